import math

import numpy as np
import pytest
from scipy import stats

from trendex.chains import RandomStream
from trendex.errors import InvalidParameter, NotSPD, UnboundedCoefficient
from trendex.fundmat import MatrixFunction, TimeGrid, solve_continuous
from trendex.models import (
    ChainSpec,
    DiffusionModel,
    ProbeBox,
    approximation_rates,
    chain_from_model,
    gaussian_innovations,
    innovation_moments,
    make_heston_like,
    make_koo_linton,
    make_vasicek,
    validate_conditions,
)


class TestVasicekFactory:
    def test_ou_special_case(self):
        model = make_vasicek(0.0, 1.0, 1.0, 0.0)
        assert np.all(model.m(0.3, np.array([2.0])) == 0.0)

    def test_coefficient_mapping(self):
        model = make_vasicek(0.05, 2.0, 0.1, 0.03)
        assert model.b(0.7)[0, 0] == -2.0
        assert model.m(0.2, np.array([5.0]))[0] == pytest.approx(0.1)
        assert model.sigma(0.0, np.array([1.0]))[0, 0] == 0.1

    def test_drift_is_alpha_beta_minus_beta_x(self):
        alpha, beta = 0.4, 1.3
        model = make_vasicek(alpha, beta, 0.2, 0.0)
        for x in (-2.0, 0.0, 3.5):
            drift = model.drift(0.5, np.array([x]))[0]
            assert drift == pytest.approx(alpha * beta - beta * x)

    @pytest.mark.parametrize("beta,sigma", [(-1.0, 0.1), (0.0, 0.1), (2.0, 0.0), (2.0, -0.2)])
    def test_invalid_parameters(self, beta, sigma):
        with pytest.raises(InvalidParameter):
            make_vasicek(0.05, beta, sigma, 0.0)


class TestHestonFactory:
    def test_zero_rates_give_zero_linear_part(self):
        model = make_heston_like(0.0, 0.0, 0.04, 0.3,
                                 lambda v, s: 0.2, lambda v: 0.3, 1.0, 0.04)
        np.testing.assert_array_equal(model.b(0.5), np.zeros((2, 2)))

    def test_matrix_form(self):
        model = make_heston_like(0.05, 2.0, 0.04, 0.3,
                                 lambda v, s: 0.2, lambda v: 0.3, 1.0, 0.04)
        np.testing.assert_allclose(model.b(0.1), np.diag([0.05, -2.0]))
        np.testing.assert_allclose(model.m(0.0, np.zeros(2)), [0.0, 0.08])
        sig = model.sigma(0.0, np.array([1.0, 0.04]))
        assert sig[0, 0] == pytest.approx(0.2)
        assert sig[1, 1] == pytest.approx(0.3 * 0.3)

    def test_fundamental_matrix_is_diag_exponential(self):
        model = make_heston_like(0.05, 2.0, 0.04, 0.3,
                                 lambda v, s: 0.2, lambda v: 0.3, 1.0, 0.04)
        table = solve_continuous(model.b, TimeGrid(8), refinement=60)
        for k in range(9):
            t = table.grid.time(k)
            np.testing.assert_allclose(
                table.value(k), np.diag([math.exp(0.05 * t), math.exp(-2.0 * t)]),
                atol=1e-10,
            )

    def test_unbounded_coefficient_rejected(self):
        with pytest.raises(UnboundedCoefficient):
            make_heston_like(0.0, 1.0, 0.04, 0.3,
                             lambda v, s: math.exp(10 * abs(v)), lambda v: 0.3,
                             1.0, 0.04, bound=100.0)


class TestKooLintonFactory:
    def test_constant_coefficients_reduce_to_vasicek(self):
        beta = MatrixFunction.constant([[1.5]])
        model = make_koo_linton(beta, lambda t: np.array([0.04]),
                                lambda t, x: np.array([[0.2]]), np.array([0.1]))
        ref = make_vasicek(0.04, 1.5, 0.2, 0.1)
        for t in (0.0, 0.3, 1.0):
            np.testing.assert_allclose(model.b(t), ref.b(t))
            x = np.array([0.7])
            np.testing.assert_allclose(model.m(t, x), ref.m(t, x))

    def test_zero_mean_level_kills_bounded_drift(self):
        beta = MatrixFunction.constant([[2.0]])
        model = make_koo_linton(beta, lambda t: np.array([0.0]),
                                lambda t, x: np.array([[0.2]]), np.array([0.0]))
        assert np.all(model.m(0.5, np.array([3.0])) == 0.0)

    def test_time_dependent_split(self):
        beta = MatrixFunction(1, lambda t: np.array([[1.0 + t]]))
        model = make_koo_linton(beta, lambda t: np.array([0.02]),
                                lambda t, x: np.array([[0.2]]), np.array([0.0]))
        for t in (0.0, 0.4, 1.0):
            assert model.b(t)[0, 0] == pytest.approx(-(1.0 + t))
            assert model.m(t, np.array([9.9]))[0] == pytest.approx(0.02 * (1.0 + t))


class TestGaussianInnovations:
    def test_standard_normal_density_at_zero(self):
        fam = gaussian_innovations(np.eye(1), dim=1)
        # 1/sqrt(2*pi)
        assert fam.density(8, 0.0, np.zeros(1), np.zeros(1)) == pytest.approx(
            0.3989422804014327, abs=1e-12)

    def test_sample_mean_clt_bound(self):
        fam = gaussian_innovations(np.eye(1), dim=1)
        u = RandomStream(seed=11).normals(0, 10**6, 1)
        draws = fam.sample_batch(8, 0.0, np.zeros((10**6, 1)), u)
        # CLT: |mean| <= 4 sigma / sqrt(N) = 4e-3
        assert abs(float(np.mean(draws))) <= 4e-3

    def test_covariance_quadrature_on_truncated_box(self):
        a = np.array([[0.5, 0.2], [0.2, 0.8]])
        fam = gaussian_innovations(a, dim=2)
        big = math.sqrt(float(np.max(np.linalg.eigvalsh(a))))
        axes = np.linspace(-8 * big, 8 * big, 321)
        g1, g2 = np.meshgrid(axes, axes, indexing="ij")
        z = np.stack([g1.ravel(), g2.ravel()], axis=-1)
        q = fam.density(8, 0.0, np.zeros(2), z).reshape(g1.shape)
        mass = np.trapezoid(np.trapezoid(q, axes, axis=1), axes)
        assert abs(mass - 1.0) < 1e-8
        cov = np.empty((2, 2))
        for (i, j), prod in {(0, 0): g1 * g1, (0, 1): g1 * g2, (1, 1): g2 * g2}.items():
            cov[i, j] = cov[j, i] = np.trapezoid(np.trapezoid(q * prod, axes, axis=1), axes)
        assert np.max(np.abs(cov - a)) < 1e-8

    def test_sampler_matches_density_ks(self):
        var = 0.25
        fam = gaussian_innovations(np.array([[var]]), dim=1)
        u = RandomStream(seed=3).normals(1, 10**5, 1)
        draws = fam.sample_batch(8, 0.0, np.zeros((10**5, 1)), u)[:, 0]
        d_stat = stats.kstest(draws, lambda z: stats.norm.cdf(z, 0.0, math.sqrt(var))).statistic
        # 0.1% critical value: sqrt(-ln(alpha/2)/2)/sqrt(N)
        crit = math.sqrt(-math.log(0.0005) / 2.0) / math.sqrt(10**5)
        assert d_stat < crit

    def test_state_dependent_covariance(self):
        fam = gaussian_innovations(lambda t, x: np.array([[0.1 + 0.05 * x[0] ** 2]]), dim=1)
        np.testing.assert_allclose(fam.covariance(0.0, np.array([2.0])), [[0.3]])

    def test_not_spd_raises(self):
        fam = gaussian_innovations(lambda t, x: np.array([[-1.0]]), dim=1)
        with pytest.raises(NotSPD):
            fam.sample(8, 0.0, np.zeros(1), np.zeros(1))

    def test_moment_quadrature_exact_for_gaussian(self):
        fam = gaussian_innovations(np.array([[0.01]]), dim=1)
        mass, mean, cov = innovation_moments(fam, 16, 0.0, np.zeros(1))
        assert abs(mass - 1.0) < 1e-12
        assert abs(mean[0]) < 1e-12
        assert abs(cov[0, 0] - 0.01) < 1e-12


class TestValidateConditions:
    def test_vasicek_passes_with_tight_bounds(self, vasicek_model, vasicek_chain):
        report = validate_conditions(vasicek_model, vasicek_chain, ProbeBox([-1.0], [1.0]))
        assert report.passed
        c1 = report.conditions["condition1_ellipticity"].details
        assert c1["c"] == pytest.approx(0.01, abs=1e-12)
        assert c1["C"] == pytest.approx(0.01, abs=1e-12)

    def test_degenerate_diffusion_fails_ellipticity(self):
        model = DiffusionModel(
            dim=2,
            b=MatrixFunction.zero(2),
            m=lambda t, x: np.zeros(2),
            sigma=lambda t, x: np.diag([1.0, 0.0]),
            x0=np.zeros(2),
        )
        chain = chain_from_model(make_heston_like(0.0, 1.0, 0.0, 1.0,
                                                  lambda v, s: 1.0, lambda v: 1.0,
                                                  0.0, 0.0), 8)
        report = validate_conditions(model, chain, ProbeBox([-1, -1], [1, 1], num_space=5))
        cond1 = report.conditions["condition1_ellipticity"]
        assert not cond1.passed
        assert cond1.details["c"] == pytest.approx(0.0, abs=1e-15)

    def test_matching_chain_gaps_are_zero(self, vasicek_model, vasicek_chain):
        report = validate_conditions(vasicek_model, vasicek_chain, ProbeBox([-1.0], [1.0]))
        c5 = report.conditions["condition5_rates"].details
        assert c5["gap_m"] == 0.0
        assert c5["gap_a"] == 0.0
        assert c5["gap_b"] == 0.0

    def test_failures_are_entries_not_exceptions(self, vasicek_model):
        # perturbed m_n breaks condition 5 at rate_const 1
        spec = chain_from_model(vasicek_model, 16)
        bad = ChainSpec(dim=1, grid=spec.grid, b_n=spec.b_n,
                        m_n=lambda t, x: np.asarray(spec.m_n(t, x)) + 0.5,
                        innovations=spec.innovations, x0=spec.x0)
        report = validate_conditions(vasicek_model, bad, ProbeBox([-1.0], [1.0]))
        assert not report.conditions["condition5_rates"].passed
        assert not report.passed


class TestLinearGrowthSplit:
    def test_bounded_part_stays_bounded_while_drift_grows(self, vasicek_model):
        # |m| stays constant over the probe box while the full drift
        # grows linearly with |x|
        xs = np.linspace(-100.0, 100.0, 41)
        m_vals = [abs(vasicek_model.m(0.0, np.array([x]))[0]) for x in xs]
        drift_vals = [abs(vasicek_model.drift(0.0, np.array([x]))[0]) for x in xs]
        assert max(m_vals) == pytest.approx(0.1)
        assert max(drift_vals) > 100.0


class TestApproximationRates:
    def test_exact_coefficients_are_o_of_anything(self, vasicek_model):
        chains = [chain_from_model(vasicek_model, n) for n in (8, 16, 32)]
        rates = approximation_rates(vasicek_model, chains, ProbeBox([-1.0], [1.0]))
        assert rates.gaps_m == (0.0, 0.0, 0.0)
        assert rates.within(const=1.0)

    def test_order_one_over_n_perturbation_detected(self, vasicek_model):
        chains = []
        for n in (8, 16, 32):
            spec = chain_from_model(vasicek_model, n)
            chains.append(ChainSpec(
                dim=1, grid=spec.grid, b_n=spec.b_n,
                m_n=(lambda nn: lambda t, x: np.asarray(spec.m_n(t, x)) + 0.7 / nn)(n),
                innovations=spec.innovations, x0=spec.x0))
        rates = approximation_rates(vasicek_model, chains, ProbeBox([-1.0], [1.0]))
        assert not rates.within(const=0.5)
        assert rates.within(const=1.0)
