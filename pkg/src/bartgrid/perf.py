"""Scalability measurement and modeling for the distributed sampler.

Covers the arithmetic (speedup, efficiency), runtime linear models over the
algorithm's complexity terms with backward elimination, expected efficiency
averaged over the tree prior's terminal-node count, isoefficiency solving,
and a wall-clock benchmark harness that drives real master/worker runs.
"""
from __future__ import annotations

import math
import os
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .sampler import FitSettings, run_serial
from .trees import MAX_DEPTH


@dataclass(slots=True)
class TimingRecord:
    """One measured cell: problem size, layout, wall seconds, mean leaf count.

    `p_plus_1` counts the master among the cores (serial runs report 1).
    """

    n: int
    m: int
    p_plus_1: int
    iterations: int
    seconds: float
    b_bar: float

    def __post_init__(self):
        if min(self.n, self.m, self.p_plus_1, self.iterations) < 1:
            raise ValueError("timing record fields must be positive")
        if self.seconds <= 0 or self.b_bar < 1:
            raise ValueError("timing record needs positive seconds and b_bar >= 1")


def speedup_efficiency(t_seq: float, t_par: float, p_plus_1: int) -> tuple[float, float]:
    """S = t_seq / t_par and E = S / (p+1)."""
    if t_seq <= 0 or t_par <= 0:
        raise ValueError("times must be positive")
    if p_plus_1 < 1:
        raise ValueError("core count must be >= 1")
    s = t_seq / t_par
    return s, s / p_plus_1


# ---------------------------------------------------------------------------
# Runtime linear models
# ---------------------------------------------------------------------------

# Candidate regressors of the serial runtime model (no intercept).
SERIAL_TERMS: dict[str, Callable] = {
    "m": lambda n, m, p, b: m,
    "n": lambda n, m, p, b: n,
    "mn": lambda n, m, p, b: m * n,
    "mb": lambda n, m, p, b: m * b,
    "mnb": lambda n, m, p, b: m * n * b,
}

# Candidate regressors of the parallel runtime model; nt = n/p rows per worker.
PARALLEL_TERMS: dict[str, Callable] = {
    "m": lambda nt, m, p, b: m,
    "nt": lambda nt, m, p, b: nt,
    "p": lambda nt, m, p, b: p,
    "b": lambda nt, m, p, b: b,
    "mnt": lambda nt, m, p, b: m * nt,
    "mp": lambda nt, m, p, b: m * p,
    "mb": lambda nt, m, p, b: m * b,
    "ntp": lambda nt, m, p, b: nt * p,
    "ntb": lambda nt, m, p, b: nt * b,
    "pb": lambda nt, m, p, b: p * b,
    "mntb": lambda nt, m, p, b: m * nt * b,
    "mpb": lambda nt, m, p, b: m * p * b,
    "mntp": lambda nt, m, p, b: m * nt * p,
    "mntpb": lambda nt, m, p, b: m * nt * p * b,
}

# Terms surviving the order-level simplification (unit-coefficient analysis).
SERIAL_UNIT_TERMS = ("mn", "mb")
PARALLEL_UNIT_TERMS = ("mnt", "mp", "mb", "mpb")


@dataclass
class RuntimeModel:
    """A fitted (or unit-coefficient) runtime model over named terms."""

    target: str  # 'serial' | 'parallel'
    terms: list[str]
    coefficients: np.ndarray
    r_squared: float = 1.0
    rmse: float = 0.0

    def predict(self, *, n: float, m: float, p: float = 0.0, b: float) -> float:
        table = SERIAL_TERMS if self.target == "serial" else PARALLEL_TERMS
        first = n if self.target == "serial" else (n / p)
        return float(
            sum(
                coef * table[name](first, m, p, b)
                for name, coef in zip(self.terms, self.coefficients)
            )
        )

    @classmethod
    def unit(cls, target: str) -> "RuntimeModel":
        names = list(SERIAL_UNIT_TERMS if target == "serial" else PARALLEL_UNIT_TERMS)
        return cls(target, names, np.ones(len(names)))


def _design_matrix(records: Sequence[TimingRecord], target: str, terms: Sequence[str]) -> np.ndarray:
    table = SERIAL_TERMS if target == "serial" else PARALLEL_TERMS
    cols = []
    for rec in records:
        p = rec.p_plus_1 - 1
        first = rec.n if target == "serial" else rec.n / p
        cols.append([table[t](first, rec.m, p, rec.b_bar) for t in terms])
    return np.array(cols, dtype=np.float64)


def _ols(design: np.ndarray, y: np.ndarray, terms: Sequence[str]) -> tuple[np.ndarray, float]:
    scale = np.linalg.norm(design, axis=0)
    if np.any(scale == 0.0):
        dead = [terms[i] for i in np.nonzero(scale == 0.0)[0]]
        raise ValueError(f"degenerate regressors (all zero): {dead}")
    coef_scaled, _res, rank, _sv = np.linalg.lstsq(design / scale, y, rcond=None)
    if rank < design.shape[1]:
        # Identify a collinear subset by checking which columns barely change
        # the rank when dropped.
        collinear = []
        for i in range(design.shape[1]):
            reduced = np.delete(design, i, axis=1)
            if np.linalg.matrix_rank(reduced) == rank:
                collinear.append(terms[i])
        raise ValueError(f"rank-deficient design; collinear terms: {collinear}")
    coefs = coef_scaled / scale
    resid = y - design @ coefs
    dof = max(len(y) - design.shape[1], 1)
    return coefs, math.sqrt(float(resid @ resid) / dof)


def fit_runtime_model(
    records: Sequence[TimingRecord], target: str, rmse_slack: float = 0.5
) -> RuntimeModel:
    """OLS on the full term set, then backward elimination on RMSE.

    RMSE is the degrees-of-freedom-adjusted residual error sqrt(RSS/(n-k)).
    Each step removes the term whose removal leaves the lowest RMSE, as long
    as that RMSE stays within (1 + rmse_slack) of the current one.  A term
    that actually carries signal blows RMSE up by far more than the slack
    when removed, while a noise-fitting term moves it only a few percent, so
    the rule prunes reliably where a strict no-increase rule stalls on terms
    whose in-sample F-statistic happens to exceed one.
    """
    if target not in ("serial", "parallel"):
        raise ValueError("target must be 'serial' or 'parallel'")
    if target == "parallel" and any(rec.p_plus_1 < 2 for rec in records):
        raise ValueError("parallel model needs records with at least one worker")
    if rmse_slack < 0:
        raise ValueError("rmse_slack must be >= 0")
    full = list(SERIAL_TERMS if target == "serial" else PARALLEL_TERMS)
    if len(records) < len(full) + 2:
        raise ValueError(
            f"need at least {len(full) + 2} records to fit {len(full)} terms"
        )
    y = np.array([rec.seconds for rec in records])
    terms = full
    coefs, rmse = _ols(_design_matrix(records, target, terms), y, terms)
    # Absolute floor keeps the ratio test meaningful when the fit is exact
    # and RMSE sits at rounding-noise level.
    floor = 1e-10 * math.sqrt(float(np.mean(y * y)))
    while len(terms) > 1:
        best = None
        for i in range(len(terms)):
            reduced = terms[:i] + terms[i + 1 :]
            try:
                cand_coefs, cand_rmse = _ols(
                    _design_matrix(records, target, reduced), y, reduced
                )
            except ValueError:
                continue
            if best is None or cand_rmse < best[1]:
                best = (reduced, cand_rmse, cand_coefs)
        if best is None or best[1] > rmse * (1.0 + rmse_slack) + floor:
            break
        terms, rmse, coefs = best[0], best[1], best[2]
    fitted = _design_matrix(records, target, terms) @ coefs
    ss_res = float(np.sum((y - fitted) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return RuntimeModel(target, list(terms), coefs, r2, rmse)


# ---------------------------------------------------------------------------
# Expected efficiency over the tree prior
# ---------------------------------------------------------------------------

def simulate_prior_b(alpha: float, beta: float, rng: np.random.Generator) -> int:
    """Terminal-node count of one tree drawn from the branching prior.

    A node at depth d splits with probability alpha * (1+d)^-beta, capped at
    the representation's maximum depth.
    """
    count = 0
    stack = [0]
    while stack:
        depth = stack.pop()
        p = alpha * (1.0 + depth) ** (-beta) if depth < MAX_DEPTH else 0.0
        if rng.random() < p:
            stack.append(depth + 1)
            stack.append(depth + 1)
        else:
            count += 1
    return count


def draw_prior_b_samples(
    alpha: float, beta: float, n_draws: int, rng: np.random.Generator
) -> np.ndarray:
    return np.array([simulate_prior_b(alpha, beta, rng) for _ in range(n_draws)])


def expected_efficiency(
    n: float,
    m: float,
    p_plus_1: int,
    *,
    models: tuple[RuntimeModel, RuntimeModel] | None = None,
    alpha: float = 0.95,
    beta: float = 2.0,
    n_draws: int = 2000,
    rng: np.random.Generator | None = None,
    b_samples: np.ndarray | None = None,
) -> float:
    """Monte Carlo mean of T_seq / ((p+1) T_par) over the prior for b.

    `models` is a (serial, parallel) pair; None selects the unit-coefficient
    order-level models.  Pass `b_samples` to reuse one prior sample across
    calls (common random numbers keep efficiency curves smooth in n).
    """
    if p_plus_1 < 1:
        raise ValueError("p_plus_1 must be >= 1")
    if b_samples is None:
        rng = rng if rng is not None else np.random.default_rng()
        if n_draws < 1:
            raise ValueError("n_draws must be >= 1")
        b_samples = draw_prior_b_samples(alpha, beta, n_draws, rng)
    serial_model, parallel_model = (
        models if models is not None else (RuntimeModel.unit("serial"), RuntimeModel.unit("parallel"))
    )
    if p_plus_1 == 1:
        # Serial against itself: the ratio structure collapses to 1.
        return 1.0
    p = p_plus_1 - 1
    ratios = np.empty(b_samples.size)
    for i, b in enumerate(b_samples):
        t_seq = serial_model.predict(n=n, m=m, b=float(b))
        t_par = parallel_model.predict(n=n, m=m, p=p, b=float(b))
        if t_par <= 0 or t_seq <= 0:
            raise ValueError("runtime models must predict positive times")
        ratios[i] = t_seq / (p_plus_1 * t_par)
    return float(np.mean(ratios))


def isoefficiency_solve(
    e: float,
    p_plus_1: int,
    *,
    models: tuple[RuntimeModel, RuntimeModel] | None = None,
    alpha: float = 0.95,
    beta: float = 2.0,
    m: float = 200,
    bounds: tuple[float, float] = (1e2, 1e9),
    n_draws: int = 2000,
    seed: int = 0,
    grid_points: int = 241,
) -> float:
    """Smallest problem size n in `bounds` reaching expected efficiency e.

    Evaluates expected efficiency on a log-spaced grid with one shared prior
    sample for b, verifies monotonicity, then bisects between grid neighbors.
    """
    if not 0.0 < e < 1.0:
        raise ValueError("target efficiency must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    b_samples = draw_prior_b_samples(alpha, beta, n_draws, rng)

    def eff(n: float) -> float:
        return expected_efficiency(
            n, m, p_plus_1, models=models, b_samples=b_samples
        )

    grid = np.logspace(math.log10(bounds[0]), math.log10(bounds[1]), grid_points)
    values = np.array([eff(n) for n in grid])
    if np.any(np.diff(values) < -1e-12):
        raise ValueError("expected efficiency is not monotone increasing over the bounds")
    if values[0] >= e:
        return float(grid[0])
    if values[-1] < e:
        raise ValueError(
            f"target efficiency {e} unattainable within bounds; maximum reached {values[-1]:.4f}"
        )
    hi_idx = int(np.searchsorted(values, e, side="left"))
    lo, hi = float(grid[hi_idx - 1]), float(grid[hi_idx])
    for _ in range(80):
        mid = math.sqrt(lo * hi)
        if eff(mid) >= e:
            hi = mid
        else:
            lo = mid
        if hi / lo < 1.0 + 1e-9:
            break
    return hi


# ---------------------------------------------------------------------------
# Benchmark harness
# ---------------------------------------------------------------------------

def bench_run(
    ns: Sequence[int],
    ms: Sequence[int],
    worker_counts: Sequence[int],
    iterations: int,
    seed: int,
    *,
    burn: int | None = None,
    d: int = 10,
    noise_sd: float = 0.15,
    workdir: str | None = None,
    min_leaf: int = 5,
    numcut: int = 100,
    progress: Callable[[str], None] | None = None,
) -> list[TimingRecord]:
    """Time the sampler over the {n, m, workers} factorial grid.

    Worker count 0 runs the serial sampler; positive counts run a TCP
    master with that many worker subprocesses on localhost.  One dataset is
    generated per n (fixed seed) and reused across cells.  Wall time covers
    the MCMC iterations only, not data loading or the handshake; failures
    in one cell abort that cell but keep earlier records.
    """
    from . import datagen

    if iterations < 2:
        raise ValueError("iterations must be >= 2")
    burn = iterations // 2 if burn is None else burn
    own_dir = None
    if workdir is None:
        own_dir = tempfile.TemporaryDirectory(prefix="bartgrid-bench-")
        workdir = own_dir.name
    records: list[TimingRecord] = []
    try:
        data_paths: dict[int, str] = {}
        gen_rng = np.random.default_rng(seed)
        spec = datagen.gen_spec(d, 30, gen_rng)
        for n in sorted(set(ns)):
            path = os.path.join(workdir, f"bench-n{n}.csv")
            datagen.write_dataset(path, spec, n, noise_sd, np.random.default_rng([seed, n]))
            data_paths[n] = path
        for n in ns:
            x = y = None
            for m in ms:
                for workers in worker_counts:
                    label = f"n={n} m={m} workers={workers}"
                    if progress:
                        progress(f"bench cell {label}")
                    settings = FitSettings(
                        m=m, draws=iterations, burn=burn, thin=max(1, (iterations - burn) // 10),
                        seed=seed, min_leaf=min_leaf, numcut=numcut,
                    )
                    try:
                        if workers == 0:
                            if x is None:
                                x, y, _names = datagen.read_table(data_paths[n], response="y")
                            result = run_serial(x, y, settings)
                        else:
                            settings.reduction_blocks = workers
                            result = _run_tcp_cell(
                                data_paths[n], workers, settings
                            )
                    except Exception as exc:
                        if progress:
                            progress(f"bench cell {label} failed: {exc}")
                        continue
                    records.append(
                        TimingRecord(
                            n=n, m=m, p_plus_1=workers + 1, iterations=iterations,
                            seconds=result.elapsed, b_bar=result.b_bar,
                        )
                    )
    finally:
        if own_dir is not None:
            own_dir.cleanup()
    return records


def _run_tcp_cell(data_path: str, workers: int, settings: FitSettings, **master_kwargs):
    """One master+subprocess-workers run over localhost TCP."""
    from .cluster import serve_master

    procs: list[subprocess.Popen] = []

    def launch_workers(bound_addr):
        host, port = bound_addr
        for rank in range(1, workers + 1):
            procs.append(
                subprocess.Popen(
                    [
                        sys.executable, "-m", "bartgrid", "fit",
                        "--role", "worker",
                        "--connect", f"{host}:{port}",
                        "--rank", str(rank),
                        "--workers", str(workers),
                        "--reduction-blocks", str(settings.reduction_blocks or workers),
                        "--data", data_path,
                        "--response", "y",
                    ],
                    stdout=subprocess.DEVNULL,
                    stderr=subprocess.PIPE,
                )
            )

    try:
        result = serve_master(
            ("127.0.0.1", 0), workers, settings, on_bound=launch_workers, **master_kwargs
        )
        deadline = time.monotonic() + 30.0
        for proc in procs:
            timeout = max(0.1, deadline - time.monotonic())
            if proc.wait(timeout=timeout) != 0:
                stderr = proc.stderr.read().decode() if proc.stderr else ""
                raise RuntimeError(f"worker exited nonzero: {stderr.strip()[:500]}")
        return result
    finally:
        for proc in procs:
            if proc.poll() is None:
                proc.kill()
                proc.wait()


RECORD_HEADER = ["n", "m", "p_plus_1", "iterations", "seconds", "b_bar"]


def write_records(path: str, records: Sequence[TimingRecord]) -> None:
    from .datagen import write_table

    write_table(
        path,
        RECORD_HEADER,
        [[r.n, r.m, r.p_plus_1, r.iterations, r.seconds, r.b_bar] for r in records],
    )


def read_records(path: str) -> list[TimingRecord]:
    from .datagen import read_table

    data, names = read_table(path)
    if names != RECORD_HEADER:
        raise ValueError(f"unexpected record columns {names}")
    return [
        TimingRecord(
            n=int(row[0]), m=int(row[1]), p_plus_1=int(row[2]),
            iterations=int(row[3]), seconds=float(row[4]), b_bar=float(row[5]),
        )
        for row in data
    ]


def efficiency_report(records: Sequence[TimingRecord]) -> list[dict]:
    """Per (n, m): time, speedup, and efficiency relative to the smallest run.

    The reference is the record with the fewest cores in the group, so the
    report works even when no serial run exists (relative speedup), matching
    how large experiments are normally reported.
    """
    groups: dict[tuple[int, int], list[TimingRecord]] = {}
    for rec in records:
        groups.setdefault((rec.n, rec.m), []).append(rec)
    rows = []
    for (n, m), group in sorted(groups.items()):
        group = sorted(group, key=lambda r: r.p_plus_1)
        ref = group[0]
        for rec in group:
            s_rel = ref.seconds / rec.seconds
            e_rel = s_rel * ref.p_plus_1 / rec.p_plus_1
            rows.append(
                {
                    "n": n, "m": m, "p_plus_1": rec.p_plus_1,
                    "seconds": rec.seconds, "speedup_vs_ref": s_rel,
                    "efficiency_vs_ref": e_rel, "b_bar": rec.b_bar,
                }
            )
    return rows
