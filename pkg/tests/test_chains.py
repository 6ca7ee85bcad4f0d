import math

import numpy as np
import pytest
from scipy import stats

from trendex.chains import (
    PathEnsemble,
    RandomStream,
    coupling_residual,
    ensemble_to_binary,
    ensemble_to_csv,
    read_ensemble_binary,
    simulate_chain,
    simulate_coupled,
    simulate_diffusion_reference,
)
from trendex.errors import InvalidParameter, NonFiniteState
from trendex.exclusion import exclude_chain
from trendex.fundmat import MatrixFunction, TimeGrid
from trendex.harness import zero_innovations
from trendex.models import (
    ChainSpec,
    DiffusionModel,
    chain_from_model,
    gaussian_innovations,
    make_vasicek,
)


class TestRandomStream:
    def test_partition_independence(self):
        s = RandomStream(seed=123)
        full = s.normals(5, 40, 2)
        head = s.normals(5, 15, 2)
        tail = s.normals(5, 25, 2, path_offset=15)
        np.testing.assert_array_equal(full, np.vstack([head, tail]))

    def test_steps_and_streams_are_distinct(self):
        s = RandomStream(seed=123)
        a = s.normals(0, 10, 1)
        b = s.normals(1, 10, 1)
        c = RandomStream(seed=123, stream_id=1).normals(0, 10, 1)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_same_seed_bitwise_identical(self):
        a = RandomStream(seed=9).normals(3, 100, 2)
        b = RandomStream(seed=9).normals(3, 100, 2)
        np.testing.assert_array_equal(a, b)

    def test_draws_are_standard_normal(self):
        draws = RandomStream(seed=17).normals(0, 10**5, 1)[:, 0]
        crit = math.sqrt(-math.log(0.0005) / 2.0) / math.sqrt(10**5)
        assert stats.kstest(draws, stats.norm.cdf).statistic < crit


class TestSimulateChain:
    def test_random_walk_terminal_variance(self):
        # m = 0, b = 0, a = I: X(1) is a sum of n iid N(0, 1/n)
        n, paths = 32, 10**4
        spec = ChainSpec(
            dim=1, grid=TimeGrid(n), b_n=MatrixFunction.zero(1),
            m_n=lambda t, x: np.zeros(np.shape(x)),
            innovations=gaussian_innovations(np.eye(1), dim=1),
            x0=np.zeros(1),
        )
        ens = simulate_chain(spec, paths, RandomStream(4))
        var = float(np.var(ens.paths[:, -1, 0], ddof=1))
        assert abs(var - 1.0) <= 3.0 * math.sqrt(2.0 / paths)

    def test_vasicek_terminal_mean_matches_closed_form(self, vasicek_model):
        # oracle: the closed-form conditional mean x e^{-beta} + alpha (1 - e^{-beta})
        n, paths = 64, 10**5
        spec = chain_from_model(vasicek_model, n)
        ens = simulate_chain(spec, paths, RandomStream(12))
        exact = 0.03 * math.exp(-2.0) + 0.05 * (1.0 - math.exp(-2.0))
        assert abs(float(np.mean(ens.paths[:, -1, 0])) - exact) <= 1e-3

    def test_zero_innovations_give_euler_recursion(self, vasicek_model):
        n = 16
        spec = chain_from_model(vasicek_model, n)
        quiet = ChainSpec(dim=1, grid=spec.grid, b_n=spec.b_n, m_n=spec.m_n,
                          innovations=zero_innovations(1), x0=spec.x0)
        ens = simulate_chain(quiet, 3, RandomStream(0))
        h = 1.0 / n
        x = 0.03
        for k in range(n):
            x = x + h * (-2.0 * x + 0.1)
            assert ens.paths[0, k + 1, 0] == pytest.approx(x, rel=1e-15)
        np.testing.assert_array_equal(ens.paths[0], ens.paths[2])

    def test_initial_states_and_shape(self, vasicek_chain):
        ens = simulate_chain(vasicek_chain, 7, RandomStream(1))
        assert ens.paths.shape == (7, 17, 1)
        np.testing.assert_array_equal(ens.paths[:, 0, 0], np.full(7, 0.03))

    def test_non_finite_state_raises(self):
        spec = ChainSpec(
            dim=1, grid=TimeGrid(8), b_n=MatrixFunction.zero(1),
            m_n=lambda t, x: np.full(np.shape(x), np.inf),
            innovations=gaussian_innovations(np.eye(1), dim=1),
            x0=np.zeros(1),
        )
        with pytest.raises(NonFiniteState):
            simulate_chain(spec, 2, RandomStream(0))

    def test_rejects_zero_paths(self, vasicek_chain):
        with pytest.raises(InvalidParameter):
            simulate_chain(vasicek_chain, 0, RandomStream(0))

    def test_markov_property_chi_square(self, vasicek_model):
        # conditional law of X((k+1)h) given the bin of X(kh) must not
        # depend on the bin of X((k-1)h); 0.1% overall level.  The
        # conditioning bins must be much finer than the innovation
        # noise, or within-bin variation of X(kh) leaks dependence.
        spec = chain_from_model(vasicek_model, 16)
        ens = simulate_chain(spec, 20000, RandomStream(21))
        prev, cur, nxt = ens.paths[:, 7, 0], ens.paths[:, 8, 0], ens.paths[:, 9, 0]
        n_mid = 25
        cur_bins = np.searchsorted(np.quantile(cur, np.linspace(0, 1, n_mid + 1)[1:-1]), cur)
        tern = lambda v: np.searchsorted(np.quantile(v, [1 / 3, 2 / 3]), v)
        prev_bins, nxt_bins = tern(prev), tern(nxt)
        pvalues = []
        for b in range(n_mid):
            sel = cur_bins == b
            table = np.array([
                [np.count_nonzero(sel & (prev_bins == i) & (nxt_bins == j)) for j in range(3)]
                for i in range(3)
            ])
            table = table[table.sum(axis=1) > 0][:, table.sum(axis=0) > 0]
            if table.size and min(table.shape) > 1:
                pvalues.append(stats.chi2_contingency(table).pvalue)
        assert min(pvalues) > 0.001 / len(pvalues)


class TestCoupledSimulation:
    def test_zero_linear_part_identical_ensembles(self):
        model = DiffusionModel(
            dim=1, b=MatrixFunction.zero(1),
            m=lambda t, x: 0.2 * np.cos(np.asarray(x)),
            sigma=lambda t, x: 0.3 * np.eye(1), x0=np.array([0.1]),
        )
        spec = chain_from_model(model, 8)
        exc = exclude_chain(spec)
        orig, tilde = simulate_coupled(spec, exc, 20, RandomStream(2))
        np.testing.assert_array_equal(orig.paths, tilde.paths)

    def test_vasicek_residual(self, vasicek_model):
        spec = chain_from_model(vasicek_model, 16)
        exc = exclude_chain(spec)
        orig, tilde = simulate_coupled(spec, exc, 100, RandomStream(3))
        assert coupling_residual(orig, tilde, exc.phi_n) <= 1e-12

    def test_heston_residual(self, heston_model):
        spec = chain_from_model(heston_model, 32)
        exc = exclude_chain(spec)
        orig, tilde = simulate_coupled(spec, exc, 100, RandomStream(3))
        assert coupling_residual(orig, tilde, exc.phi_n) <= 1e-11

    def test_reproducible_across_runs(self, vasicek_model):
        spec = chain_from_model(vasicek_model, 16)
        exc = exclude_chain(spec)
        a, _ = simulate_coupled(spec, exc, 10, RandomStream(77))
        b, _ = simulate_coupled(spec, exc, 10, RandomStream(77))
        np.testing.assert_array_equal(a.paths, b.paths)


class TestDiffusionReference:
    def test_noise_free_path_tracks_ode(self):
        # sigma = 0: Euler on x' = alpha*beta - beta*x; gap is O(1/fine_n)
        model = DiffusionModel(
            dim=1, b=MatrixFunction.constant([[-2.0]]),
            m=lambda t, x: np.full(np.shape(x), 0.1),
            sigma=lambda t, x: np.zeros((1, 1)), x0=np.array([0.03]),
        )
        exact = 0.03 * math.exp(-2.0) + 0.05 * (1 - math.exp(-2.0))
        gaps = []
        for fine_n in (128, 256, 512):
            ens = simulate_diffusion_reference(model, fine_n, 1, RandomStream(0))
            gaps.append(abs(float(ens.paths[0, -1, 0]) - exact))
        assert gaps[0] > gaps[1] > gaps[2]
        assert 1.6 <= gaps[0] / gaps[1] <= 2.4
        assert gaps[-1] <= 10.0 / 512

    def test_strong_error_halves_with_fine_n(self, vasicek_model):
        # Euler vs the exact solution evaluated with the same
        # discretized stochastic integral; ratio averaged over seeds
        alpha, beta, sigma, x0 = 0.05, 2.0, 0.1, 0.03
        ratios = []
        for seed in range(20):
            gaps = []
            for fine_n in (128, 256):
                stream = RandomStream(seed, stream_id=fine_n)
                ens = simulate_diffusion_reference(vasicek_model, fine_n, 8, stream)
                g = TimeGrid(fine_n)
                incs = np.stack([stream.normals(k, 8, 1)[:, 0] for k in range(fine_n)], axis=1)
                db = math.sqrt(g.h) * incs
                integral = np.sum(np.exp(beta * g.points[:-1])[None, :] * db, axis=1)
                exact = (x0 * math.exp(-beta) + alpha * (1 - math.exp(-beta))
                         + sigma * math.exp(-beta) * integral)
                gaps.append(float(np.mean(np.abs(ens.paths[:, -1, 0] - exact))))
            ratios.append(gaps[0] / gaps[1])
        assert 1.6 <= float(np.mean(ratios)) <= 2.4

    def test_brownian_terminal_variance(self):
        model = DiffusionModel(
            dim=1, b=MatrixFunction.zero(1),
            m=lambda t, x: np.zeros(np.shape(x)),
            sigma=lambda t, x: np.eye(1), x0=np.zeros(1),
        )
        ens = simulate_diffusion_reference(model, 64, 10**4, RandomStream(5))
        var = float(np.var(ens.paths[:, -1, 0], ddof=1))
        assert abs(var - 1.0) <= 3.0 * math.sqrt(2.0 / 10**4)


class TestExports:
    def test_csv_layout(self, vasicek_chain, tmp_path):
        ens = simulate_chain(vasicek_chain, 2, RandomStream(1))
        path = tmp_path / "ens.csv"
        ensemble_to_csv(ens, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "path,k,t,x1"
        assert len(lines) == 1 + 2 * 17

    def test_binary_round_trip_bitwise(self, vasicek_chain, tmp_path):
        ens = simulate_chain(vasicek_chain, 5, RandomStream(1))
        path = tmp_path / "ens.tdxe"
        ensemble_to_binary(ens, path)
        with open(path, "rb") as fh:
            head = fh.read(16)
        assert head[:4] == b"TDXE"
        back = read_ensemble_binary(path)
        np.testing.assert_array_equal(back.paths, ens.paths)
        assert back.grid.n == 16

    def test_binary_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "bogus.bin"
        path.write_bytes(b"NOPE" + b"\0" * 12)
        with pytest.raises(InvalidParameter):
            read_ensemble_binary(path)
