import numpy as np
import pytest

from bartgrid.perf import (
    PARALLEL_TERMS,
    RuntimeModel,
    TimingRecord,
    bench_run,
    draw_prior_b_samples,
    efficiency_report,
    expected_efficiency,
    fit_runtime_model,
    isoefficiency_solve,
    read_records,
    speedup_efficiency,
    write_records,
)


class TestSpeedupEfficiency:
    def test_embarrassingly_parallel_ideal(self):
        s, e = speedup_efficiency(100.0, 100.0 / 8, 8)
        assert e == pytest.approx(1.0, abs=1e-12)

    def test_eight_core_published_numbers(self):
        # S = 6.34 on 8 cores gives E = 0.7925.
        s, e = speedup_efficiency(6.34, 1.0, 8)
        assert abs(e - 6.34 / 8) < 1e-12
        assert abs(e - 0.7925) < 1e-12

    def test_relative_speedup_24_to_48(self):
        s, _ = speedup_efficiency(9660.0, 4477.0, 48)
        assert abs(s - 9660.0 / 4477.0) < 1e-12
        assert s == pytest.approx(2.158, abs=5e-4)

    def test_nonpositive_time_rejected(self):
        with pytest.raises(ValueError):
            speedup_efficiency(0.0, 1.0, 2)
        with pytest.raises(ValueError):
            speedup_efficiency(1.0, -1.0, 2)

    def test_self_speedup_is_one(self):
        s, _ = speedup_efficiency(3.7, 3.7, 1)
        assert s == 1.0


def synthetic_parallel_records(seed, reps=3):
    """Timings from the two-term parallel model with 1% relative noise."""
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(reps):
        for m in (50, 100, 200):
            for n in (20_000, 60_000, 140_000):
                for p1 in (3, 5, 9):
                    b = float(rng.uniform(5, 35))
                    t = 2.011 * b + 1.254e-4 * m * (n / (p1 - 1))
                    t *= 1 + 0.01 * rng.standard_normal()
                    records.append(
                        TimingRecord(n=n, m=m, p_plus_1=p1, iterations=1000,
                                     seconds=t, b_bar=b)
                    )
    return records


class TestRuntimeModelFit:
    def test_noise_free_single_term(self):
        rng = np.random.default_rng(0)
        records = []
        for n in (1000, 2000, 5000, 9000):
            for m in (10, 20, 40):
                records.append(
                    TimingRecord(n=n, m=m, p_plus_1=1, iterations=10,
                                 seconds=3.5e-4 * n, b_bar=float(rng.uniform(2, 9)))
                )
        model = fit_runtime_model(records, "serial")
        assert model.terms == ["n"]
        assert model.coefficients[0] == pytest.approx(3.5e-4, rel=1e-9)

    def test_recovers_published_two_term_model(self):
        records = synthetic_parallel_records(seed=3)
        model = fit_runtime_model(records, "parallel")
        assert sorted(model.terms) == ["b", "mnt"]
        cb = model.coefficients[model.terms.index("b")]
        cm = model.coefficients[model.terms.index("mnt")]
        assert cb == pytest.approx(2.011, rel=0.05)
        assert cm == pytest.approx(1.254e-4, rel=0.05)
        assert model.r_squared > 0.99

    def test_ols_matches_normal_equations(self):
        # Full-rank random design: lstsq equals the normal-equation solve.
        rng = np.random.default_rng(1)
        records = []
        for _ in range(40):
            records.append(
                TimingRecord(
                    n=int(rng.integers(1_000, 100_000)),
                    m=int(rng.integers(10, 300)),
                    p_plus_1=int(rng.integers(2, 20)),
                    iterations=100,
                    seconds=float(rng.uniform(1, 100)),
                    b_bar=float(rng.uniform(2, 40)),
                )
            )
        from bartgrid.perf import _design_matrix, _ols

        terms = list(PARALLEL_TERMS)
        design = _design_matrix(records, "parallel", terms)
        y = np.array([r.seconds for r in records])
        coefs, _ = _ols(design, y, terms)
        oracle = np.linalg.solve(design.T @ design, design.T @ y)
        assert np.allclose(coefs, oracle, rtol=1e-8, atol=1e-10)

    def test_rank_deficient_names_collinear_terms(self):
        # Constant p makes p-bearing columns multiples of their p-free twins.
        rng = np.random.default_rng(2)
        records = []
        for _ in range(20):
            records.append(
                TimingRecord(
                    n=int(rng.integers(1_000, 50_000)), m=int(rng.integers(10, 200)),
                    p_plus_1=5, iterations=10,
                    seconds=float(rng.uniform(1, 50)), b_bar=float(rng.uniform(2, 20)),
                )
            )
        with pytest.raises(ValueError, match="collinear"):
            fit_runtime_model(records, "parallel")

    def test_scale_equivariance(self):
        records = synthetic_parallel_records(seed=4)
        model = fit_runtime_model(records, "parallel")
        scaled = [
            TimingRecord(r.n, r.m, r.p_plus_1, r.iterations, r.seconds * 7.0, r.b_bar)
            for r in records
        ]
        model7 = fit_runtime_model(scaled, "parallel")
        assert model7.terms == model.terms
        assert np.allclose(model7.coefficients, 7.0 * model.coefficients, rtol=1e-9)

    def test_too_few_records(self):
        records = synthetic_parallel_records(seed=5)[:10]
        with pytest.raises(ValueError, match="at least"):
            fit_runtime_model(records, "parallel")


class TestPriorTerminalCount:
    @staticmethod
    def exact_pmf(k, depth=0, alpha=0.95, beta=2.0):
        """Recursive enumeration of P(subtree at `depth` has k leaves)."""
        p = alpha * (1.0 + depth) ** (-beta)
        if k == 1:
            return 1.0 - p
        return p * sum(
            TestPriorTerminalCount.exact_pmf(i, depth + 1)
            * TestPriorTerminalCount.exact_pmf(k - i, depth + 1)
            for i in range(1, k)
        )

    def test_simulated_matches_exact_recursion(self):
        exact_le4 = sum(self.exact_pmf(k) for k in (1, 2, 3, 4))
        draws = draw_prior_b_samples(0.95, 2.0, 100_000, np.random.default_rng(6))
        assert abs((draws <= 4).mean() - exact_le4) < 0.01
        assert draws.min() >= 1


class TestExpectedEfficiency:
    def test_serial_self_comparison_is_one(self):
        assert expected_efficiency(10_000, 100, 1, n_draws=100,
                                   rng=np.random.default_rng(7)) == 1.0

    def test_monotone_in_problem_size(self):
        b = draw_prior_b_samples(0.95, 2.0, 2000, np.random.default_rng(8))
        values = [
            expected_efficiency(n, 100, 9, b_samples=b)
            for n in (10_000, 100_000, 1_000_000)
        ]
        assert values[0] < values[1] < values[2]

    def test_bounded_in_unit_interval(self):
        rng = np.random.default_rng(9)
        b = draw_prior_b_samples(0.95, 2.0, 500, rng)
        for _ in range(50):
            n = 10 ** rng.uniform(2, 8)
            m = int(rng.integers(1, 500))
            p1 = int(rng.integers(2, 65))
            e = expected_efficiency(n, m, p1, b_samples=b)
            assert 0.0 < e <= 1.0

    def test_fitted_models_variant(self):
        serial = RuntimeModel("serial", ["mn", "mb"], np.array([1.3e-4, 2.0]))
        parallel = RuntimeModel("parallel", ["mnt", "b"], np.array([1.25e-4, 2.0]))
        e = expected_efficiency(
            500_000, 200, 9, models=(serial, parallel), n_draws=500,
            rng=np.random.default_rng(10),
        )
        assert 0.0 < e <= 1.5  # fitted models need not respect the unit bound


class TestIsoefficiency:
    def test_target_below_lower_bound_returns_lower_bound(self):
        n_e = isoefficiency_solve(0.01, 9, bounds=(1e4, 1e8), seed=11)
        assert n_e == pytest.approx(1e4)

    def test_unattainable_reports_maximum(self):
        with pytest.raises(ValueError, match="unattainable"):
            isoefficiency_solve(0.999999, 9, bounds=(1e2, 1e4), seed=12)

    def test_matches_dense_grid_scan(self):
        e_target = 0.7
        n_e = isoefficiency_solve(e_target, 9, bounds=(1e3, 1e8), seed=13, n_draws=800)
        b = draw_prior_b_samples(0.95, 2.0, 800, np.random.default_rng(13))
        grid = np.logspace(3, 8, 2000)
        values = np.array([expected_efficiency(n, 200, 9, b_samples=b) for n in grid])
        oracle = grid[int(np.argmax(values >= e_target))]
        assert n_e == pytest.approx(oracle, rel=0.01)

    def test_monotone_in_target_and_cores(self):
        # Unit-mode efficiency tops out at p/(p+1), so targets stay below it.
        solve = lambda e, p1: isoefficiency_solve(e, p1, bounds=(1e3, 1e9), seed=14,
                                                  n_draws=500)
        assert solve(0.5, 9) <= solve(0.7, 9) <= solve(0.85, 9)
        assert solve(0.7, 5) <= solve(0.7, 9) <= solve(0.7, 17)


class TestRecordsIO:
    def test_round_trip(self, tmp_path):
        records = synthetic_parallel_records(seed=15)[:12]
        path = str(tmp_path / "records.csv")
        write_records(path, records)
        loaded = read_records(path)
        assert loaded == records

    def test_report_relative_to_smallest_run(self):
        records = [
            TimingRecord(1000, 10, 3, 50, 10.0, 4.0),
            TimingRecord(1000, 10, 5, 50, 6.0, 4.0),
        ]
        rows = efficiency_report(records)
        assert rows[0]["speedup_vs_ref"] == 1.0
        assert rows[1]["speedup_vs_ref"] == pytest.approx(10.0 / 6.0)
        assert rows[1]["efficiency_vs_ref"] == pytest.approx((10.0 / 6.0) * 3 / 5)


class TestBenchHarness:
    def test_small_grid_produces_records(self, tmp_path):
        records = bench_run(
            ns=[400], ms=[4], worker_counts=[0, 2], iterations=8, seed=16,
            d=3, workdir=str(tmp_path),
        )
        assert len(records) == 2
        serial = next(r for r in records if r.p_plus_1 == 1)
        dist = next(r for r in records if r.p_plus_1 == 3)
        assert serial.seconds > 0 and dist.seconds > 0
        assert serial.b_bar >= 1.0 and dist.b_bar >= 1.0
        report = efficiency_report(records)
        assert len(report) == 2
