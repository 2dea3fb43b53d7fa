"""Time grids, modulated covariance processes, and martingale path sampling."""

import numpy as np
import pytest

from spdectrl import (
    CovarianceProcess,
    NuclearCovariance,
    TimeGrid,
    coarsen_ensemble,
    dump_paths,
    ito_isometry_check,
    sample_paths,
    stochastic_integral,
)


class TestTimeGrid:
    def test_basic_fields(self):
        grid = TimeGrid(2.0, 8)
        assert np.isclose(grid.dt, 0.25)
        assert len(grid.times) == 9
        assert grid.index_of(0.5) == 2

    def test_power_of_two_required(self):
        with pytest.raises(ValueError):
            TimeGrid(1.0, 48)

    def test_index_of_off_grid_rejected(self):
        grid = TimeGrid(1.0, 8)
        with pytest.raises(ValueError):
            grid.index_of(0.3)

    def test_coarsen_halves(self):
        grid = TimeGrid(1.0, 8)
        coarse = grid.coarsen()
        assert coarse.n_steps == 4
        assert np.allclose(coarse.times, grid.times[::2])


class TestCovarianceProcess:
    def test_default_modulation_decays(self):
        cov = CovarianceProcess(NuclearCovariance.dyadic(3))
        assert np.isclose(cov.modulation_at(0.0), 1.0)
        assert np.isclose(cov.modulation_at(1.0), 0.6 + 0.4 * np.exp(-1.0))

    def test_constant_modulation(self):
        cov = CovarianceProcess.constant(NuclearCovariance.dyadic(3))
        assert np.isclose(cov.modulation_at(5.0), 1.0)

    def test_modulation_must_stay_in_unit_interval(self):
        base = NuclearCovariance.dyadic(2)
        cov = CovarianceProcess(base, modulation=lambda t: 1.5)
        with pytest.raises(ValueError):
            cov.evaluate(0.0)

    def test_sqrt_consistent_with_evaluate(self):
        cov = CovarianceProcess(NuclearCovariance.dyadic(3))
        q = cov.evaluate(0.7)
        s = cov.sqrt_at(0.7)
        assert np.allclose(s @ s.T, q, atol=1e-12)
        assert np.isclose(cov.trace_at(0.7), np.trace(q))


class TestSamplePaths:
    def test_shapes_and_variance(self):
        cov = CovarianceProcess.constant(NuclearCovariance.dyadic(3))
        grid = TimeGrid(1.0, 16)
        ens = sample_paths(cov, grid, 4000, 11)
        assert ens.dw.shape == (4000, 16, 3)
        assert ens.dm.shape == (4000, 16, 3)
        # dW increments are standard scaled by sqrt(dt)
        var = ens.dw.var(axis=(0, 1))
        assert np.allclose(var, grid.dt, rtol=0.1)

    def test_chunking_stability(self):
        # per-path keyed streams: one big draw == two stacked chunks
        cov = CovarianceProcess(NuclearCovariance.dyadic(2))
        grid = TimeGrid(1.0, 8)
        whole = sample_paths(cov, grid, 100, 42)
        lo = sample_paths(cov, grid, 60, 42, path_offset=0)
        hi = sample_paths(cov, grid, 40, 42, path_offset=60)
        assert np.array_equal(whole.dw, np.vstack([lo.dw, hi.dw]))
        assert np.array_equal(whole.dm, np.vstack([lo.dm, hi.dm]))

    def test_seed_changes_draws(self):
        cov = CovarianceProcess(NuclearCovariance.dyadic(2))
        grid = TimeGrid(1.0, 8)
        a = sample_paths(cov, grid, 10, 1)
        b = sample_paths(cov, grid, 10, 2)
        assert not np.allclose(a.dw, b.dw)

    def test_modulation_scales_increments(self):
        base = NuclearCovariance.dyadic(2)
        grid = TimeGrid(1.0, 4)
        dec = sample_paths(CovarianceProcess(base), grid, 5, 3)
        const = sample_paths(CovarianceProcess.constant(base), grid, 5, 3)
        # same underlying dW, dm scaled by sqrt of the left-endpoint modulation
        k = 2
        m = 0.6 + 0.4 * np.exp(-grid.times[k])
        assert np.allclose(dec.dm[:, k], const.dm[:, k] * np.sqrt(m))

    def test_w_levels_cumulative(self):
        cov = CovarianceProcess(NuclearCovariance.dyadic(2))
        grid = TimeGrid(1.0, 8)
        ens = sample_paths(cov, grid, 7, 5)
        levels = ens.w_levels()
        assert levels.shape == (7, 9, 2)
        assert np.allclose(levels[:, 0], 0.0)
        assert np.allclose(levels[:, 5], ens.dw[:, :5].sum(axis=1))

    def test_raw_times_array_accepted(self):
        cov = CovarianceProcess(NuclearCovariance.dyadic(2))
        ens = sample_paths(cov, np.linspace(0.0, 1.0, 5), 6, 8)
        assert ens.dw.shape == (6, 4, 2)
        with pytest.raises(ValueError):
            sample_paths(cov, np.array([0.0, 0.2, 0.1]), 3, 8)
        with pytest.raises(ValueError):
            sample_paths(cov, np.array([0.0, 0.1, 0.5, 0.7, 1.0]), 3, 8)

    def test_terminal_value_sums_increments(self):
        cov = CovarianceProcess(NuclearCovariance.dyadic(2))
        grid = TimeGrid(1.0, 8)
        ens = sample_paths(cov, grid, 4, 13)
        assert np.allclose(ens.terminal_value(), ens.dm.sum(axis=1))


class TestCoarsening:
    def test_pairwise_sums(self):
        cov = CovarianceProcess(NuclearCovariance.dyadic(2))
        grid = TimeGrid(1.0, 8)
        fine = sample_paths(cov, grid, 9, 21)
        coarse = coarsen_ensemble(fine)
        assert coarse.grid.n_steps == 4
        assert np.allclose(coarse.dw[:, 0], fine.dw[:, 0] + fine.dw[:, 1])


class TestStochasticIntegral:
    def test_left_endpoint_against_loop(self):
        cov = CovarianceProcess(NuclearCovariance.dyadic(3))
        grid = TimeGrid(1.0, 16)
        ens = sample_paths(cov, grid, 50, 17)
        rng = np.random.default_rng(18)
        mats = rng.standard_normal((16, 3, 3))
        got = stochastic_integral(mats, ens)
        want = np.zeros((50, 3))
        for p in range(50):
            for k in range(16):
                want[p] += mats[k] @ ens.dm[p, k]
        assert np.allclose(got, want, atol=1e-12)

    def test_callable_integrand(self):
        cov = CovarianceProcess(NuclearCovariance.dyadic(2))
        grid = TimeGrid(1.0, 8)
        ens = sample_paths(cov, grid, 20, 19)
        got = stochastic_integral(lambda t, om: np.eye(2) * (1.0 + t), ens)
        mats = np.stack([(1.0 + t) * np.eye(2) for t in grid.times[:-1]])
        assert np.allclose(got, stochastic_integral(mats, ens))

    def test_shape_errors(self):
        cov = CovarianceProcess(NuclearCovariance.dyadic(2))
        grid = TimeGrid(1.0, 8)
        ens = sample_paths(cov, grid, 5, 20)
        with pytest.raises(ValueError):
            stochastic_integral(np.zeros((8, 3, 3)), ens)
        with pytest.raises(ValueError):
            stochastic_integral(np.zeros((4, 2, 2)), ens)


class TestItoIsometry:
    def test_constant_covariance_identity_integrand(self):
        cov = CovarianceProcess.constant(NuclearCovariance.dyadic(4))
        grid = TimeGrid(1.0, 32)
        rep = ito_isometry_check(np.eye(4), cov, grid, 4000, 23)
        assert rep["within_3se"], rep
        assert np.isclose(rep["rhs"], 1.0 - 2.0 ** -4)

    def test_decaying_modulation_analytic_rhs(self):
        # E |int dM|^2 = trQ * int_0^T (0.6 + 0.4 e^{-s}) ds, computed here
        # by the left-endpoint rule the sampler itself uses
        base = NuclearCovariance.dyadic(3)
        cov = CovarianceProcess(base)
        grid = TimeGrid(2.0, 64)
        rep = ito_isometry_check(np.eye(3), cov, grid, 4000, 29)
        mods = 0.6 + 0.4 * np.exp(-grid.times[:-1])
        want = base.trace * float(np.sum(mods) * grid.dt)
        assert np.isclose(rep["rhs"], want, rtol=1e-12)
        assert rep["within_3se"], rep


class TestDump:
    def test_csv_and_npz(self, tmp_path):
        cov = CovarianceProcess(NuclearCovariance.dyadic(2))
        grid = TimeGrid(1.0, 4)
        ens = sample_paths(cov, grid, 3, 31)
        p_csv = tmp_path / "paths.csv"
        dump_paths(ens, str(p_csv), fmt="csv")
        body = p_csv.read_text().strip().splitlines()
        assert len(body) == 1 + 3 * 4
        p_npz = tmp_path / "paths.npz"
        dump_paths(ens, str(p_npz), fmt="npz")
        data = np.load(p_npz)
        assert np.allclose(data["dm"], ens.dm)
        with pytest.raises(ValueError):
            dump_paths(ens, str(tmp_path / "x.bin"), fmt="bin")
