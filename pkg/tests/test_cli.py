import subprocess
import sys

import numpy as np
import pytest

from bartgrid.analysis import posterior_from_chain, predict_mean
from bartgrid.cli import (
    ConfigError,
    ModelFileError,
    _CONFIG_KEYS,
    load_model,
    main,
    parse_config,
    save_model,
    write_chain_log,
)
from bartgrid.datagen import read_table
from bartgrid.sampler import FitSettings, run_serial


def fit_small(seed=0, n=300, d=3, m=6, draws=40, burn=10, thin=5):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (n, d))
    y = np.sin(2 * x[:, 0]) + 0.1 * rng.standard_normal(n)
    result = run_serial(
        x, y, FitSettings(m=m, draws=draws, burn=burn, thin=thin, seed=seed, min_leaf=2)
    )
    return result, x


class TestParseConfig:
    def test_empty_gives_defaults(self):
        cfg = parse_config({})
        assert cfg.role == "serial"
        assert cfg.m == 200
        assert cfg.kfac == 2.0
        assert cfg.alpha == 0.95
        assert cfg.beta == 2.0
        assert cfg.nu == 3.0
        assert cfg.sigma_quantile == 0.9
        assert cfg.numcut == 100
        assert cfg.min_leaf == 5
        assert cfg.thin == 1

    def test_prior_sweep_cell(self):
        cfg = parse_config({"kfac": "1", "m": "500"})
        assert cfg.kfac == 1.0 and cfg.m == 500

    def test_domain_error_names_key(self):
        with pytest.raises(ConfigError, match="kfac"):
            parse_config({"kfac": "0"})

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="fancy_knob"):
            parse_config({"fancy_knob": "1"})

    def test_file_parsing_with_comments(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# a comment\nm = 25\nseed=9  # trailing comment\n\n")
        cfg = parse_config({}, str(path))
        assert cfg.m == 25 and cfg.seed == 9

    def test_malformed_file_line(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("m 25\n")
        with pytest.raises(ConfigError, match="key=value"):
            parse_config({}, str(path))

    def test_precedence_flag_over_file_over_default(self, tmp_path):
        # Property check over random key subsets: flags > file > defaults.
        rng = np.random.default_rng(1)
        numeric_keys = ["m", "draws", "burn", "seed", "numcut", "min_leaf", "workers", "rank"]
        for _ in range(25):
            file_keys = {k for k in numeric_keys if rng.random() < 0.5}
            flag_keys = {k for k in numeric_keys if rng.random() < 0.5}
            file_pairs = {k: str(100 + i) for i, k in enumerate(sorted(file_keys))}
            flag_pairs = {k: str(500 + i) for i, k in enumerate(sorted(flag_keys))}
            path = tmp_path / "p.cfg"
            path.write_text("".join(f"{k}={v}\n" for k, v in file_pairs.items()))
            cfg = parse_config(flag_pairs, str(path))
            for key in numeric_keys:
                if key in flag_pairs:
                    assert getattr(cfg, key) == int(flag_pairs[key])
                elif key in file_pairs:
                    assert getattr(cfg, key) == int(file_pairs[key])
                else:
                    assert getattr(cfg, key) == _CONFIG_KEYS[key][2]

    def test_draws_must_exceed_burn(self):
        cfg = parse_config({"draws": "50", "burn": "50"})
        with pytest.raises(ConfigError, match="burn"):
            cfg.fit_settings()


class TestModelFile:
    def test_round_trip_predicts_identically(self, tmp_path):
        result, x = fit_small()
        sample = posterior_from_chain(result)
        path = str(tmp_path / "fit.model")
        save_model(path, sample)
        loaded = load_model(path)
        xstar = np.random.default_rng(2).uniform(-1, 1, (100, 3))
        assert np.array_equal(predict_mean(sample, xstar), predict_mean(loaded, xstar))
        assert loaded.m == sample.m and loaded.n_snapshots == sample.n_snapshots

    def test_truncated_file_rejected(self, tmp_path):
        result, _ = fit_small()
        path = str(tmp_path / "fit.model")
        save_model(path, posterior_from_chain(result))
        lines = open(path).read().splitlines()
        truncated = tmp_path / "cut.model"
        truncated.write_text("\n".join(lines[: len(lines) // 2]) + "\n")
        with pytest.raises(ModelFileError):
            load_model(str(truncated))

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "v9.model"
        path.write_text("bartgrid-model 9\n")
        with pytest.raises(ModelFileError, match="version 9"):
            load_model(str(path))

    def test_not_a_model_file(self, tmp_path):
        path = tmp_path / "junk.model"
        path.write_text("something else\n")
        with pytest.raises(ModelFileError, match="not a model file"):
            load_model(str(path))

    def test_trailing_content_rejected(self, tmp_path):
        result, _ = fit_small()
        path = str(tmp_path / "fit.model")
        save_model(path, posterior_from_chain(result))
        with open(path, "a") as fh:
            fh.write("l 1 0.0\n")
        with pytest.raises(ModelFileError, match="trailing"):
            load_model(path)

    def test_paper_scale_counts_load(self, tmp_path):
        # A file declaring 400 snapshots x 200 trees parses and reports them.
        from bartgrid.analysis import PosteriorSample
        from bartgrid.trees import CutpointGrid, Tree

        grid = CutpointGrid.from_ranges(np.array([-1.0]), np.array([1.0]), 3)
        snaps = [(0.1, [Tree() for _ in range(200)]) for _ in range(400)]
        sample = PosteriorSample(m=200, d=1, numcut=3, y_mid=0.0, y_range=1.0,
                                 grid=grid, snapshots=snaps)
        path = str(tmp_path / "big.model")
        save_model(path, sample)
        loaded = load_model(path)
        assert loaded.m == 200 and loaded.n_snapshots == 400


class TestChainLog:
    def test_chain_log_round_trip_and_determinism(self, tmp_path):
        result, _ = fit_small(seed=5)
        again, _ = fit_small(seed=5)
        p1, p2 = str(tmp_path / "a.log"), str(tmp_path / "b.log")
        write_chain_log(p1, result)
        write_chain_log(p2, again)
        assert open(p1).read() == open(p2).read()
        data, names = read_table(p1)
        assert names[:4] == ["iteration", "sigma", "sigma_y", "mean_b"]
        assert np.array_equal(data[:, 1], result.sigmas)


class TestCliCommands:
    def test_generate_defaults_match_benchmark_configuration(self):
        from bartgrid.cli import build_parser

        args = build_parser().parse_args(["generate", "--out", "x.csv"])
        assert args.n == 200_000 and args.d == 40 and args.q == 30
        assert args.noise_sd == 0.15

    def test_generate_fit_predict_pipeline(self, tmp_path):
        data = str(tmp_path / "d.csv")
        truth = str(tmp_path / "f.csv")
        model = str(tmp_path / "d.model")
        preds = str(tmp_path / "p.csv")
        assert main(["generate", "--out", data, "--n", "2000", "--d", "5",
                     "--seed", "3", "--truth-out", truth]) == 0
        assert main(["fit", "--data", data, "--out", model, "--m", "50",
                     "--draws", "300", "--burn", "150", "--thin", "15",
                     "--min-leaf", "5", "--seed", "4"]) == 0
        assert main(["predict", "--model", model, "--data", data, "--out", preds]) == 0
        f, _ = read_table(truth)
        p, _ = read_table(preds)
        y, _names = read_table(data)
        resid = p[:, 0] - f[:, 0]
        # Self-consistency: in-sample predictions track the noiseless truth
        # better than the raw response spread.
        assert np.sqrt(np.mean(resid**2)) < np.std(y[:, 0])

    def test_fit_empty_posterior_errors(self, tmp_path):
        data = str(tmp_path / "d.csv")
        main(["generate", "--out", data, "--n", "100", "--d", "2", "--seed", "0"])
        rc = main(["fit", "--data", data, "--out", str(tmp_path / "m"),
                   "--draws", "10", "--burn", "10"])
        assert rc == 2

    def test_bad_flag_value_reports_key(self, tmp_path, capsys):
        data = str(tmp_path / "d.csv")
        main(["generate", "--out", data, "--n", "50", "--d", "2", "--seed", "0"])
        rc = main(["fit", "--data", data, "--out", str(tmp_path / "m"), "--kfac", "0"])
        assert rc == 2
        assert "kfac" in capsys.readouterr().err

    def test_master_worker_subprocesses_match_serial(self, tmp_path):
        data = str(tmp_path / "d.csv")
        main(["generate", "--out", data, "--n", "600", "--d", "3", "--seed", "8"])
        serial_model = str(tmp_path / "serial.model")
        dist_model = str(tmp_path / "dist.model")
        common = ["--m", "8", "--draws", "40", "--burn", "10", "--thin", "5",
                  "--seed", "9", "--min-leaf", "2", "--reduction-blocks", "2"]
        assert main(["fit", "--data", data, "--out", serial_model] + common) == 0

        port = _free_port()
        master = subprocess.Popen(
            [sys.executable, "-m", "bartgrid", "fit", "--role", "master",
             "--listen", f"127.0.0.1:{port}", "--workers", "2",
             "--out", dist_model] + common,
            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
        )
        workers = [
            subprocess.Popen(
                [sys.executable, "-m", "bartgrid", "fit", "--role", "worker",
                 "--connect", f"127.0.0.1:{port}", "--rank", str(rank),
                 "--workers", "2", "--data", data] + common,
                stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
            )
            for rank in (1, 2)
        ]
        out, err = master.communicate(timeout=120)
        assert master.returncode == 0, err
        for w in workers:
            _o, werr = w.communicate(timeout=30)
            assert w.returncode == 0, werr
        assert open(serial_model).read() == open(dist_model).read()
        assert open(serial_model + ".chainlog").read() == open(dist_model + ".chainlog").read()


def _free_port() -> int:
    import socket

    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]
