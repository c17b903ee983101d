"""Command-line entry point: generate | fit | predict | sensitivity | bench.

Configuration is flat key=value text (one pair per line, # comments)
optionally combined with command-line flags; flags override file values,
file values override defaults.  Fitted posteriors persist as plain text
with full-precision decimals, so a reloaded model predicts bit-identically.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import analysis, datagen, perf
from .analysis import PosteriorSample
from .cluster import connect_worker, serve_master, worker_row_range
from .datagen import TableError, iter_rows, read_table, write_table
from .sampler import ChainResult, FitSettings, run_serial
from .trees import CutpointGrid, forest_from_lines, forest_lines


class ConfigError(ValueError):
    """Bad configuration: unknown key, out-of-domain value, missing requirement."""


class ModelFileError(ValueError):
    """Unreadable model file: version, count, or truncation problems."""


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

def _positive_int(v: int) -> bool:
    return v >= 1


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes"):
        return True
    if text.lower() in ("0", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (converter, domain check, default)
_CONFIG_KEYS: dict[str, tuple[Callable, Callable, object]] = {
    "role": (str, lambda v: v in ("serial", "master", "worker"), "serial"),
    "listen": (str, lambda v: True, ""),
    "connect": (str, lambda v: True, ""),
    "rank": (int, _positive_int, 1),
    "data": (str, lambda v: True, ""),
    "response": (str, lambda v: bool(v), "y"),
    "m": (int, _positive_int, 200),
    "kfac": (float, lambda v: v > 0, 2.0),
    "alpha": (float, lambda v: 0 < v < 1, 0.95),
    "beta": (float, lambda v: v >= 0, 2.0),
    "nu": (float, lambda v: v > 0, 3.0),
    "sigma_quantile": (float, lambda v: 0 < v < 1, 0.9),
    "numcut": (int, _positive_int, 100),
    "min_leaf": (int, lambda v: v >= 0, 5),
    "draws": (int, _positive_int, 1000),
    "burn": (int, lambda v: v >= 0, 100),
    "thin": (int, _positive_int, 1),
    "seed": (int, lambda v: v >= 0, 0),
    "workers": (int, _positive_int, 1),
    "reduction_blocks": (int, _positive_int, 0),  # 0 = default to worker count
    "out": (str, lambda v: True, ""),
    "chain_log": (str, lambda v: True, ""),
    "prior_only": (_bool, lambda v: True, False),
    "check_replicas": (_bool, lambda v: True, False),
}


@dataclass
class RunConfig:
    role: str
    listen: str
    connect: str
    rank: int
    data: str
    response: str
    m: int
    kfac: float
    alpha: float
    beta: float
    nu: float
    sigma_quantile: float
    numcut: int
    min_leaf: int
    draws: int
    burn: int
    thin: int
    seed: int
    workers: int
    reduction_blocks: int
    out: str
    chain_log: str
    prior_only: bool
    check_replicas: bool

    def fit_settings(self) -> FitSettings:
        if self.draws <= self.burn:
            raise ConfigError("draws must exceed burn (empty posterior otherwise)")
        return FitSettings(
            m=self.m,
            kfac=self.kfac,
            alpha=self.alpha,
            beta=self.beta,
            nu=self.nu,
            sigquant=self.sigma_quantile,
            numcut=self.numcut,
            min_leaf=self.min_leaf,
            draws=self.draws,
            burn=self.burn,
            thin=self.thin,
            seed=self.seed,
            reduction_blocks=self.reduction_blocks or None,
            prior_only=self.prior_only,
        )

    def require(self, *keys: str) -> None:
        for key in keys:
            if not getattr(self, key):
                raise ConfigError(f"role {self.role!r} requires {key!r} to be set")


def _read_config_file(path: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            pairs[key] = value
    return pairs


def parse_config(flags: dict[str, str], file: str | None = None) -> RunConfig:
    """Merge defaults, config-file pairs and flag pairs (flags win)."""
    merged = {key: spec[2] for key, spec in _CONFIG_KEYS.items()}
    for source_name, pairs in (("config file", _read_config_file(file) if file else {}),
                               ("flag", flags)):
        for key, raw in pairs.items():
            if key not in _CONFIG_KEYS:
                raise ConfigError(f"unknown {source_name} key {key!r}")
            conv, check, _default = _CONFIG_KEYS[key]
            try:
                value = conv(raw) if isinstance(raw, str) else raw
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
            if not check(value):
                raise ConfigError(f"{key}: value {value!r} out of domain")
            merged[key] = value
    return RunConfig(**merged)


# ---------------------------------------------------------------------------
# Model persistence
# ---------------------------------------------------------------------------

MODEL_MAGIC = "bartgrid-model"
MODEL_VERSION = 1


def save_model(path: str, sample: PosteriorSample) -> None:
    """Write a posterior sample as inspectable full-precision text."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{MODEL_MAGIC} {MODEL_VERSION}\n")
        fh.write(f"m {sample.m}\n")
        fh.write(f"d {sample.d}\n")
        fh.write(f"snapshots {sample.n_snapshots}\n")
        fh.write(f"y_mid {sample.y_mid!r}\n")
        fh.write(f"y_range {sample.y_range!r}\n")
        fh.write(f"numcut {sample.numcut}\n")
        for v in range(sample.d):
            vals = sample.grid.values[v]
            fh.write(
                f"cutpoints {v} {vals.size} " + " ".join(repr(float(c)) for c in vals) + "\n"
            )
        for idx, (sigma, forest) in enumerate(sample.snapshots):
            fh.write(f"snapshot {idx} {sigma!r}\n")
            for line in forest_lines(forest):
                fh.write(line + "\n")


def _expect(lines: list[str], pos: int, key: str) -> list[str]:
    if pos >= len(lines):
        raise ModelFileError(f"model file truncated; expected {key!r}")
    parts = lines[pos].split()
    if not parts or parts[0] != key:
        raise ModelFileError(f"line {pos + 1}: expected {key!r}, found {lines[pos]!r}")
    return parts


def load_model(path: str) -> PosteriorSample:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ModelFileError("empty model file")
    magic = lines[0].split()
    if len(magic) != 2 or magic[0] != MODEL_MAGIC:
        raise ModelFileError("not a model file")
    if int(magic[1]) != MODEL_VERSION:
        raise ModelFileError(
            f"model format version {magic[1]} unsupported (expected {MODEL_VERSION})"
        )
    pos = 1
    header: dict[str, str] = {}
    for key in ("m", "d", "snapshots", "y_mid", "y_range", "numcut"):
        parts = _expect(lines, pos, key)
        if len(parts) != 2:
            raise ModelFileError(f"line {pos + 1}: malformed {key!r}")
        header[key] = parts[1]
        pos += 1
    m = int(header["m"])
    d = int(header["d"])
    n_snapshots = int(header["snapshots"])
    values = []
    for v in range(d):
        parts = _expect(lines, pos, "cutpoints")
        if int(parts[1]) != v or len(parts) != 3 + int(parts[2]):
            raise ModelFileError(f"line {pos + 1}: malformed cutpoints for variable {v}")
        values.append(np.array([float(c) for c in parts[3:]], dtype=np.float64))
        pos += 1
    grid = CutpointGrid(values)
    snapshots = []
    for idx in range(n_snapshots):
        parts = _expect(lines, pos, "snapshot")
        if len(parts) != 3 or int(parts[1]) != idx:
            raise ModelFileError(f"line {pos + 1}: malformed snapshot header")
        sigma = float(parts[2])
        pos += 1
        # Forest body: m trees, each "tree <count>" plus that many node lines.
        body_start = pos
        for _ in range(m):
            parts = _expect(lines, pos, "tree")
            pos += 1 + int(parts[1])
            if pos > len(lines):
                raise ModelFileError("model file truncated inside a forest")
        try:
            forest = forest_from_lines(lines[body_start:pos], m)
        except ValueError as exc:
            raise ModelFileError(str(exc)) from None
        snapshots.append((sigma, forest))
    if pos != len(lines):
        raise ModelFileError("trailing content after the last snapshot")
    return PosteriorSample(
        m=m, d=d, numcut=int(header["numcut"]),
        y_mid=float(header["y_mid"]), y_range=float(header["y_range"]),
        grid=grid, snapshots=snapshots,
    )


def write_chain_log(path: str, result: ChainResult) -> None:
    """Per-iteration sigma (scaled and original units), mean b, move counts."""
    header = [
        "iteration", "sigma", "sigma_y", "mean_b",
        "birth_proposed", "birth_accepted", "death_proposed", "death_accepted",
    ]
    rows = [
        [
            it + 1,
            result.sigmas[it],
            result.sigmas[it] * result.y_range,
            result.mean_b[it],
            result.birth_proposed[it],
            result.birth_accepted[it],
            result.death_proposed[it],
            result.death_accepted[it],
        ]
        for it in range(result.sigmas.size)
    ]
    write_table(path, header, rows)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_generate(args: argparse.Namespace) -> int:
    rng = np.random.default_rng(args.seed)
    spec = datagen.gen_spec(args.d, args.q, rng)
    rows = datagen.write_dataset(
        args.out, spec, args.n, args.noise_sd, rng, truth_path=args.truth_out
    )
    print(f"wrote {rows} rows x {args.d} predictors to {args.out}")
    return 0


def _load_worker_shard(cfg: RunConfig) -> tuple[np.ndarray, np.ndarray, int]:
    """Stream the worker's contiguous row slice out of the data file."""
    n_total = 0
    for _ in iter_rows(cfg.data):
        n_total += 1
    if n_total == 0:
        raise TableError("data file has no rows")
    blocks = cfg.reduction_blocks or cfg.workers
    lo, hi = worker_row_range(n_total, blocks, cfg.workers, cfg.rank)
    xs = []
    ys = []
    ycol = None
    for i, (header, row) in enumerate(iter_rows(cfg.data)):
        if ycol is None:
            if cfg.response not in header:
                raise TableError(f"response column {cfg.response!r} not in header")
            ycol = header.index(cfg.response)
        if lo <= i < hi:
            ys.append(row[ycol])
            xs.append([v for j, v in enumerate(row) if j != ycol])
    return np.array(xs), np.array(ys), n_total


def _cmd_fit(args: argparse.Namespace) -> int:
    flag_pairs = {
        key: value
        for key, value in vars(args).items()
        if key in _CONFIG_KEYS and value is not None
    }
    cfg = parse_config(flag_pairs, args.config)
    settings = cfg.fit_settings()

    if cfg.role == "worker":
        cfg.require("connect", "data")
        host, _, port = cfg.connect.rpartition(":")
        x, y, _n_total = _load_worker_shard(cfg)
        connect_worker(
            (host or "127.0.0.1", int(port)), x, y, cfg.rank, cfg.workers,
            cfg.reduction_blocks or cfg.workers,
        )
        return 0

    if cfg.role == "master":
        cfg.require("listen", "out")
        host, _, port = cfg.listen.rpartition(":")
        result = serve_master(
            (host or "127.0.0.1", int(port)),
            cfg.workers,
            settings,
            check_replicas=cfg.check_replicas,
        )
    else:
        cfg.require("data", "out")
        x, y, _names = read_table(cfg.data, response=cfg.response)
        result = run_serial(x, y, settings)

    if not result.snapshots:
        raise ConfigError("no posterior snapshots kept; check draws/burn/thin")
    sample = analysis.posterior_from_chain(result)
    save_model(cfg.out, sample)
    log_path = cfg.chain_log or cfg.out + ".chainlog"
    write_chain_log(log_path, result)
    accept = (
        (result.birth_accepted.sum() + result.death_accepted.sum())
        / max(1, result.birth_proposed.sum() + result.death_proposed.sum())
    )
    print(
        f"fit complete: {result.sigmas.size} iterations in {result.elapsed:.2f}s, "
        f"{len(result.snapshots)} snapshots saved to {cfg.out} "
        f"(mean b {result.mean_b[-1]:.2f}, accept rate {accept:.3f})"
    )
    return 0


def _cmd_predict(args: argparse.Namespace) -> int:
    sample = load_model(args.model)
    data, names = read_table(args.data)
    if args.response and args.response in names:
        ycol = names.index(args.response)
        data = np.delete(data, ycol, axis=1)
    if data.shape[1] != sample.d:
        raise ConfigError(
            f"data has {data.shape[1]} feature columns, model wants {sample.d}"
        )
    preds = analysis.predict_mean(sample, data)
    write_table(args.out, ["prediction"], [[p] for p in preds])
    print(f"wrote {preds.size} predictions to {args.out}")
    return 0


def _cmd_sensitivity(args: argparse.Namespace) -> int:
    sample = load_model(args.model)
    predictor = sample.predictor()
    report = analysis.sensitivity_report(
        predictor,
        sample.d,
        args.n_s,
        args.parts,
        args.seed,
        effect_points=args.effect_points,
        effect_mc=args.effect_mc,
        threads=args.threads,
    )
    indices_path = args.out_prefix + ".indices.csv"
    write_table(
        indices_path,
        ["variable", "s1", "s1_err", "st", "st_err"],
        [[e.k, e.s1, e.s1_err, e.st, e.st_err] for e in report.estimates],
    )
    effects_path = args.out_prefix + ".effects.csv"
    write_table(
        effects_path,
        ["variable", "x", "effect"],
        [
            [k, report.effect_grid[i], report.effects[k, i]]
            for k in range(sample.d)
            for i in range(report.effect_grid.size)
        ],
    )
    print(f"wrote {indices_path} and {effects_path}")
    return 0


def _cmd_bench(args: argparse.Namespace) -> int:
    records = perf.bench_run(
        [int(v) for v in args.ns.split(",")],
        [int(v) for v in args.ms.split(",")],
        [int(v) for v in args.workers.split(",")],
        args.iterations,
        args.seed,
        d=args.d,
        progress=lambda msg: print(msg, file=sys.stderr),
    )
    if not records:
        print("no cells completed", file=sys.stderr)
        return 1
    perf.write_records(args.out, records)
    report = perf.efficiency_report(records)
    report_path = args.out + ".report.csv"
    write_table(
        report_path,
        ["n", "m", "p_plus_1", "seconds", "speedup_vs_ref", "efficiency_vs_ref", "b_bar"],
        [[r["n"], r["m"], r["p_plus_1"], r["seconds"], r["speedup_vs_ref"],
          r["efficiency_vs_ref"], r["b_bar"]] for r in report],
    )
    print(f"wrote {len(records)} records to {args.out} and report to {report_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bartgrid",
        description="Distributed sum-of-trees regression: fit, predict, analyze, benchmark.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a random-function benchmark dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--n", type=int, default=200_000)
    gen.add_argument("--d", type=int, default=40)
    gen.add_argument("--q", type=int, default=30)
    gen.add_argument("--noise-sd", type=float, default=0.15)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--truth-out", default=None, help="also write the noiseless response")
    gen.set_defaults(func=_cmd_generate)

    fit = sub.add_parser("fit", help="run the sampler (serial, master, or worker role)")
    fit.add_argument("--config", default=None, help="key=value configuration file")
    for key in _CONFIG_KEYS:
        fit.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None)
    fit.set_defaults(func=_cmd_fit)

    pred = sub.add_parser("predict", help="posterior-mean predictions from a saved model")
    pred.add_argument("--model", required=True)
    pred.add_argument("--data", required=True)
    pred.add_argument("--out", required=True)
    pred.add_argument("--response", default="y", help="response column to drop if present")
    pred.set_defaults(func=_cmd_predict)

    sens = sub.add_parser("sensitivity", help="Sobol indices and main effects of a saved model")
    sens.add_argument("--model", required=True)
    sens.add_argument("--out-prefix", required=True)
    sens.add_argument("--n-s", type=int, default=20_000)
    sens.add_argument("--parts", type=int, default=16)
    sens.add_argument("--seed", type=int, default=0)
    sens.add_argument("--effect-points", type=int, default=21)
    sens.add_argument("--effect-mc", type=int, default=2000)
    sens.add_argument("--threads", type=int, default=None)
    sens.set_defaults(func=_cmd_sensitivity)

    bench = sub.add_parser("bench", help="factorial wall-clock scaling experiment")
    bench.add_argument("--out", required=True)
    bench.add_argument("--ns", required=True, help="comma-separated dataset sizes")
    bench.add_argument("--ms", required=True, help="comma-separated tree counts")
    bench.add_argument("--workers", required=True, help="comma-separated worker counts (0=serial)")
    bench.add_argument("--iterations", type=int, default=100)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--d", type=int, default=10)
    bench.set_defaults(func=_cmd_bench)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ModelFileError, TableError, ValueError, OSError) as exc:
        print(f"bartgrid {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
