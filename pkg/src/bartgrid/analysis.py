"""Posterior-mean prediction and Monte Carlo sensitivity analysis.

Prediction averages tree sums over saved posterior snapshots and is exactly
linear in both rows and snapshots, so inputs can be partitioned across
threads or machines with bit-identical results.  Sensitivity estimators
(main effects, first-order and total Sobol indices) work against any
real-valued predictor of the inputs, which lets the same code run on a
fitted surface or on an analytic test function.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .sampler import partition_bounds
from .trees import CutpointGrid, Tree, evaluate_rows

Predictor = Callable[[np.ndarray], np.ndarray]


@dataclass
class PosteriorSample:
    """Saved posterior surfaces: N snapshots of m trees plus sigma each."""

    m: int
    d: int
    numcut: int
    y_mid: float
    y_range: float
    grid: CutpointGrid
    snapshots: list[tuple[float, list[Tree]]]  # (sigma, forest), scaled units

    def __post_init__(self):
        if not self.snapshots:
            raise ValueError("posterior sample holds no snapshots")
        for sigma, forest in self.snapshots:
            if len(forest) != self.m:
                raise ValueError("snapshot forest size does not match m")

    @property
    def n_snapshots(self) -> int:
        return len(self.snapshots)

    @property
    def sigmas_original(self) -> np.ndarray:
        return np.array([s for s, _ in self.snapshots]) * self.y_range

    def predictor(self) -> Predictor:
        return lambda x: predict_mean(self, x)


def posterior_from_chain(result) -> PosteriorSample:
    """Wrap a finished ChainResult's snapshots for prediction."""
    return PosteriorSample(
        m=result.settings.m,
        d=result.d,
        numcut=result.settings.numcut,
        y_mid=result.y_mid,
        y_range=result.y_range,
        grid=result.grid,
        snapshots=[(sigma, forest) for _, sigma, forest in result.snapshots],
    )


def predict_mean(samples: PosteriorSample, xstar: np.ndarray) -> np.ndarray:
    """Posterior-mean prediction in original response units.

    Per row: the average over snapshots of the forest sum, accumulated in
    snapshot-then-tree order so any row partition reproduces the same bits.
    """
    xstar = np.asarray(xstar, dtype=np.float64)
    if xstar.ndim != 2 or xstar.shape[1] != samples.d:
        raise ValueError(f"prediction inputs must be (rows, {samples.d})")
    acc = np.zeros(xstar.shape[0])
    for _sigma, forest in samples.snapshots:
        for tree in forest:
            acc += evaluate_rows(tree, samples.grid, xstar)
    acc /= samples.n_snapshots
    return acc * samples.y_range + samples.y_mid


def main_effect(
    predictor: Predictor,
    k: int,
    grid_values: Sequence[float],
    n_mc: int,
    dim: int,
    *,
    domain: tuple[float, float] = (-1.0, 1.0),
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Centered main-effect curve of variable k by Monte Carlo integration.

    For every grid value g: the average of the predictor over draws with all
    other coordinates uniform on the domain and x_k pinned to g, minus the
    overall mean estimated from full-domain draws.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    lo, hi = domain
    base = rng.uniform(lo, hi, (n_mc, dim))
    f0 = float(np.mean(predictor(base)))
    curve = np.empty(len(grid_values))
    for i, g in enumerate(grid_values):
        x = rng.uniform(lo, hi, (n_mc, dim))
        x[:, k] = g
        curve[i] = float(np.mean(predictor(x))) - f0
    return curve


@dataclass
class SobolEstimate:
    """First-order and total index for one variable, with batch-means errors."""

    k: int
    s1: float
    s1_err: float
    st: float
    st_err: float
    v_k: float
    v_total: float
    f0: float


@dataclass
class SensitivityResult:
    """Full sensitivity report for a predictor."""

    f0: float
    n_s: int
    parts: int
    estimates: list[SobolEstimate]
    effect_grid: np.ndarray = field(default_factory=lambda: np.empty(0))
    effects: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))


@dataclass(slots=True)
class _PartSums:
    """Partial sums one sample block contributes, combined in part order."""

    rows: int
    sum_a: float
    sum_b: float
    sum_a2: float
    prod: np.ndarray  # per variable: sum f(A) * f(AB_k)
    jansen: np.ndarray  # per variable: sum (f(B) - f(AB_k))^2


def _part_sums(
    predictor: Predictor, ks: Sequence[int], rows: int, dim: int,
    domain: tuple[float, float], seed: int, part: int,
) -> _PartSums:
    # Each part draws from its own stream so parts stay independent no matter
    # which thread runs them.
    rng = np.random.default_rng([seed, part])
    lo, hi = domain
    a = rng.uniform(lo, hi, (rows, dim))
    b = rng.uniform(lo, hi, (rows, dim))
    fa = np.asarray(predictor(a), dtype=np.float64)
    fb = np.asarray(predictor(b), dtype=np.float64)
    prod = np.empty(len(ks))
    jansen = np.empty(len(ks))
    for i, k in enumerate(ks):
        mixed = b.copy()
        mixed[:, k] = a[:, k]
        fm = np.asarray(predictor(mixed), dtype=np.float64)
        prod[i] = float(np.sum(fa * fm))
        jansen[i] = float(np.sum((fb - fm) ** 2))
    return _PartSums(
        rows,
        float(np.sum(fa)),
        float(np.sum(fb)),
        float(np.sum(fa * fa)),
        prod,
        jansen,
    )


def _estimate_from_sums(sums: _PartSums, i: int) -> tuple[float, float, float, float]:
    """(s1, st, v_k, v) from accumulated sums for variable slot i."""
    n = sums.rows
    f0 = (sums.sum_a + sums.sum_b) / (2 * n)
    v = sums.sum_a2 / n - f0 * f0
    v_k = sums.prod[i] / n - f0 * f0
    st_num = sums.jansen[i] / (2 * n)
    return v_k / v, st_num / v, v_k, v


def sobol_indices(
    predictor: Predictor,
    dim: int,
    n_s: int,
    p_parts: int,
    seed: int,
    *,
    ks: Sequence[int] | None = None,
    domain: tuple[float, float] = (-1.0, 1.0),
    threads: int | None = None,
) -> SensitivityResult:
    """First-order and total Sobol indices for the requested variables.

    `p_parts` independent A/B matrix pairs of about n_s/p_parts rows each are
    generated from distinct streams; their partial sums are combined in part
    order on one thread, so the estimate is identical however parts are
    scheduled.  Standard errors come from batch means over the parts.
    """
    if n_s < 2:
        raise ValueError("n_s must be >= 2")
    if p_parts < 1:
        raise ValueError("p_parts must be >= 1")
    ks = list(range(dim)) if ks is None else list(ks)
    bounds = partition_bounds(n_s, p_parts)
    sizes = [int(bounds[i + 1] - bounds[i]) for i in range(p_parts)]
    if min(sizes) < 2:
        raise ValueError("each part needs at least 2 rows; lower p_parts")

    def compute(part: int) -> _PartSums:
        return _part_sums(predictor, ks, sizes[part], dim, domain, seed, part)

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(compute, range(p_parts)))
    else:
        parts = [compute(part) for part in range(p_parts)]

    total = parts[0]
    for nxt in parts[1:]:
        total = _PartSums(
            total.rows + nxt.rows,
            total.sum_a + nxt.sum_a,
            total.sum_b + nxt.sum_b,
            total.sum_a2 + nxt.sum_a2,
            total.prod + nxt.prod,
            total.jansen + nxt.jansen,
        )
    f0 = (total.sum_a + total.sum_b) / (2 * total.rows)
    v = total.sum_a2 / total.rows - f0 * f0
    if v <= 0.0:
        raise ValueError("zero total variance: predictor is constant on the domain")

    estimates = []
    for i, k in enumerate(ks):
        s1, st, v_k, _ = _estimate_from_sums(total, i)
        if p_parts > 1:
            per_s1 = []
            per_st = []
            for part in parts:
                try:
                    ps1, pst, _, _ = _estimate_from_sums(part, i)
                except ZeroDivisionError:
                    continue
                per_s1.append(ps1)
                per_st.append(pst)
            s1_err = float(np.std(per_s1, ddof=1) / math.sqrt(len(per_s1)))
            st_err = float(np.std(per_st, ddof=1) / math.sqrt(len(per_st)))
        else:
            s1_err = st_err = float("nan")
        estimates.append(SobolEstimate(k, s1, s1_err, st, st_err, v_k, v, f0))
    return SensitivityResult(f0=f0, n_s=total.rows, parts=p_parts, estimates=estimates)


def sobol_first_order(
    predictor: Predictor,
    k: int,
    n_s: int,
    p_parts: int,
    seed: int,
    *,
    dim: int,
    domain: tuple[float, float] = (-1.0, 1.0),
) -> tuple[float, float, float]:
    """(S_k, V_k, V): the first-order index of variable k and its pieces."""
    result = sobol_indices(
        predictor, dim, n_s, p_parts, seed, ks=[k], domain=domain
    )
    est = result.estimates[0]
    return est.s1, est.v_k, est.v_total


def sobol_total(
    predictor: Predictor,
    k: int,
    n_s: int,
    p_parts: int,
    seed: int,
    *,
    dim: int,
    domain: tuple[float, float] = (-1.0, 1.0),
) -> float:
    """Total sensitivity index of variable k (Jansen-form numerator)."""
    result = sobol_indices(
        predictor, dim, n_s, p_parts, seed, ks=[k], domain=domain
    )
    return result.estimates[0].st


def sensitivity_report(
    predictor: Predictor,
    dim: int,
    n_s: int,
    p_parts: int,
    seed: int,
    *,
    effect_points: int = 21,
    effect_mc: int = 2000,
    domain: tuple[float, float] = (-1.0, 1.0),
    threads: int | None = None,
) -> SensitivityResult:
    """Sobol indices for every variable plus main-effect curves on a grid."""
    result = sobol_indices(
        predictor, dim, n_s, p_parts, seed, domain=domain, threads=threads
    )
    lo, hi = domain
    grid = np.linspace(lo, hi, effect_points)
    effects = np.empty((dim, effect_points))
    for k in range(dim):
        effects[k] = main_effect(
            predictor, k, grid, effect_mc, dim, domain=domain,
            rng=np.random.default_rng([seed, 10_000 + k]),
        )
    result.effect_grid = grid
    result.effects = effects
    return result
