import math

import numpy as np
import pytest

from trendex.chains import RandomStream, coupling_residual, simulate_coupled
from trendex.errors import InvalidParameter, StepTooLarge
from trendex.exclusion import (
    exclude_chain,
    exclude_diffusion,
    load_excluded_chain,
    pull_state,
    restore_state,
    save_excluded_chain,
    transform_innovation_density,
    transformed_covariance,
)
from trendex.fundmat import MatrixFunction, TimeGrid, build_discrete
from trendex.models import (
    ChainSpec,
    DiffusionModel,
    chain_from_model,
    gaussian_innovations,
    make_heston_like,
    make_vasicek,
)


def _flat_model(dim=1, sigma=0.3):
    return DiffusionModel(
        dim=dim,
        b=MatrixFunction.zero(dim),
        m=lambda t, x: 0.1 * np.sin(np.asarray(x)),
        sigma=lambda t, x: sigma * np.eye(dim),
        x0=np.zeros(dim),
    )


class TestExcludeDiffusion:
    def test_vasicek_transformed_coefficients(self, vasicek_model):
        exd = exclude_diffusion(vasicek_model, refinement=16)
        for t in (0.0, 0.25, 0.5, 1.0):
            x = np.array([0.7])
            assert exd.m_tilde(t, x)[0] == pytest.approx(math.exp(2.0 * t) * 0.1, rel=1e-9)
            assert exd.sigma_tilde(t, x)[0, 0] == pytest.approx(math.exp(2.0 * t) * 0.1, rel=1e-9)

    def test_zero_linear_part_is_identity_transform(self):
        model = _flat_model()
        exd = exclude_diffusion(model, refinement=4)
        x = np.array([0.4])
        for t in (0.0, 0.6, 1.0):
            np.testing.assert_allclose(exd.m_tilde(t, x), model.m(t, x), atol=1e-14)
            np.testing.assert_allclose(exd.sigma_tilde(t, x), model.sigma(t, x), atol=1e-14)

    def test_heston_transformed_drift(self, heston_model):
        exd = exclude_diffusion(heston_model, refinement=16)
        k, theta = 2.0, 0.04
        for t in (0.0, 0.5, 1.0):
            mt = exd.m_tilde(t, np.array([0.3, 0.01]))
            assert mt[0] == pytest.approx(0.0, abs=1e-12)
            assert mt[1] == pytest.approx(math.exp(k * t) * k * theta, rel=1e-9)

    def test_initial_state_unchanged(self, vasicek_model):
        exd = exclude_diffusion(vasicek_model, refinement=8)
        np.testing.assert_array_equal(exd.base.x0, vasicek_model.x0)

    def test_boundedness_transfer(self, vasicek_model):
        exd = exclude_diffusion(vasicek_model, refinement=8)
        sup_m = 0.1
        max_inv = max(np.linalg.norm(exd.table.inverse(k), 2) for k in range(257))
        probe = np.linspace(-3, 3, 11)
        for t in np.linspace(0.0, 1.0, 9):
            for x in probe:
                assert abs(exd.m_tilde(t, np.array([x]))[0]) <= max_inv * sup_m * (1 + 1e-12)

    def test_ellipticity_transfer(self, heston_model):
        exd = exclude_diffusion(heston_model, refinement=8)
        for t in np.linspace(0.0, 1.0, 5):
            for sx in (-0.5, 0.2, 1.0):
                a = exd.a_tilde(t, np.array([sx, 0.04]))
                assert np.min(np.linalg.eigvalsh(a)) > 0.0


class TestExcludeChain:
    def test_zero_linear_part_chain_unchanged(self):
        spec = chain_from_model(_flat_model(), 8)
        exc = exclude_chain(spec)
        np.testing.assert_array_equal(exc.phi_n.phi[-1], np.eye(1))
        x = np.array([0.3])
        np.testing.assert_allclose(exc.base.m_n(0.25, x), spec.m_n(0.25, x), atol=1e-15)

    def test_vasicek_replay_residual(self, vasicek_model):
        spec = chain_from_model(vasicek_model, 4)
        exc = exclude_chain(spec)
        orig, tilde = simulate_coupled(spec, exc, 50, RandomStream(99))
        assert coupling_residual(orig, tilde, exc.phi_n) <= 1e-13

    def test_single_step_hand_expansion(self, vasicek_model):
        # Xt(h) = x + h (1 + h b)^-1 m + sqrt(h) (1 + h b)^-1 eps, since Phi_n(0) = I
        n = 5
        spec = chain_from_model(vasicek_model, n)
        exc = exclude_chain(spec)
        h = spec.grid.h
        b = -2.0
        m = 0.1
        x = float(spec.x0[0])
        u = RandomStream(7).normals(0, 1, 1)
        eps = float(spec.innovations.sample(n, 0.0, spec.x0, u[0])[0])
        factor = 1.0 / (1.0 + h * b)
        expected = x + h * factor * m + math.sqrt(h) * factor * eps
        _, tilde = simulate_coupled(spec, exc, 1, RandomStream(7))
        assert tilde.paths[0, 1, 0] == pytest.approx(expected, rel=1e-14)

    def test_step_too_large_propagates(self, vasicek_model):
        spec = chain_from_model(vasicek_model, 2)  # h*beta = 1 > 1/2
        with pytest.raises(StepTooLarge):
            exclude_chain(spec)

    @pytest.mark.parametrize("n,paths", [(16, 100), (64, 20)])
    def test_conjugation_identity_property(self, vasicek_model, n, paths):
        spec = chain_from_model(vasicek_model, n)
        exc = exclude_chain(spec)
        orig, tilde = simulate_coupled(spec, exc, paths, RandomStream(5, stream_id=n))
        assert coupling_residual(orig, tilde, exc.phi_n) <= 1e-12


class TestInnovationTransform:
    def test_identity_table_leaves_density_unchanged(self):
        fam = gaussian_innovations(np.array([[0.25]]), dim=1)
        table = build_discrete(MatrixFunction.zero(1), TimeGrid(8))
        q = transform_innovation_density(fam, table, 3, np.array([0.5]))
        zs = np.linspace(-2, 2, 9)
        for z in zs:
            assert q(np.array([z])) == pytest.approx(
                float(fam.density(8, 3 / 8, np.array([0.5]), np.array([z]))), rel=1e-14)

    def test_scalar_gaussian_variance_scaling(self, vasicek_model):
        # linear transform of a Gaussian: et = phi^-1 eps has variance a / phi^2
        spec = chain_from_model(vasicek_model, 16)
        exc = exclude_chain(spec)
        k = 6
        phi = float(exc.phi_n.value(k + 1)[0, 0])
        a = 0.01
        q = transform_innovation_density(spec.innovations, exc.phi_n, k, np.array([0.2]))
        var = a / phi**2
        zs = np.linspace(-8 * math.sqrt(var), 8 * math.sqrt(var), 2001)
        qv = np.array([float(q(np.array([z]))) for z in zs])
        expected = np.exp(-0.5 * zs**2 / var) / math.sqrt(2 * math.pi * var)
        np.testing.assert_allclose(qv, expected, atol=1e-12)

    def test_moment_identities_by_quadrature(self, vasicek_model):
        spec = chain_from_model(vasicek_model, 16)
        exc = exclude_chain(spec)
        for k, xt in [(0, 0.1), (7, -0.4), (14, 1.3)]:
            q = transform_innovation_density(spec.innovations, exc.phi_n, k, np.array([xt]))
            att = transformed_covariance(spec.innovations.covariance, exc.phi_n,
                                         k / 16, np.array([xt]))
            sd = math.sqrt(att[0, 0])
            zs = np.linspace(-9 * sd, 9 * sd, 3001)
            qv = np.array([float(q(np.array([z]))) for z in zs])
            assert abs(np.trapezoid(qv, zs) - 1.0) < 1e-8
            assert abs(np.trapezoid(qv * zs, zs)) < 1e-8
            assert abs(np.trapezoid(qv * zs * zs, zs) - att[0, 0]) < 1e-8

    def test_out_of_range_step_rejected(self, vasicek_model):
        spec = chain_from_model(vasicek_model, 8)
        exc = exclude_chain(spec)
        with pytest.raises(InvalidParameter):
            transform_innovation_density(spec.innovations, exc.phi_n, 8, np.array([0.0]))


class TestTransformedCovariance:
    def test_identity_case(self):
        table = build_discrete(MatrixFunction.zero(2), TimeGrid(4))
        out = transformed_covariance(lambda t, x: np.eye(2), table, 0.25, np.zeros(2))
        np.testing.assert_allclose(out, np.eye(2))

    def test_scalar_algebra_oracle(self):
        # a_n = sigma^2, phi = (1 + h b)^{k+1} => at_n = sigma^2 / phi^2
        b_val, sigma2, n, k = 0.8, 0.09, 10, 3
        table = build_discrete(MatrixFunction.constant([[b_val]]), TimeGrid(n))
        h = 1.0 / n
        phi = (1.0 + h * b_val) ** (k + 1)
        out = transformed_covariance(lambda t, x: np.array([[sigma2]]), table,
                                     k / n, np.array([0.0]))
        assert out[0, 0] == pytest.approx(sigma2 / phi**2, rel=1e-12)

    def test_symmetry(self, heston_model):
        spec = chain_from_model(heston_model, 16)
        exc = exclude_chain(spec)
        out = transformed_covariance(spec.innovations.covariance, exc.phi_n,
                                     0.5, np.array([0.4, 0.02]))
        np.testing.assert_allclose(out, out.T)

    def test_converges_to_continuous_limit(self, vasicek_model):
        # at_n(t, x) -> at(t, x) as n grows, with the continuous table as reference
        exd = exclude_diffusion(vasicek_model, refinement=32)
        t, xt = 0.5, np.array([0.3])
        target = exd.a_tilde(t, xt)[0, 0]
        gaps = []
        for n in (8, 16, 32, 64):
            spec = chain_from_model(vasicek_model, n)
            exc = exclude_chain(spec)
            att = transformed_covariance(spec.innovations.covariance, exc.phi_n, t, xt)
            gaps.append(abs(att[0, 0] - target))
        assert all(b < a for a, b in zip(gaps, gaps[1:]))


class TestStateMaps:
    def test_identity_at_time_zero(self, vasicek_model):
        spec = chain_from_model(vasicek_model, 8)
        exc = exclude_chain(spec)
        x = np.array([0.77])
        np.testing.assert_array_equal(restore_state(exc.phi_n, 0, x), x)
        np.testing.assert_array_equal(pull_state(exc.phi_n, 0, x), x)

    def test_vasicek_continuous_restore_value(self, vasicek_model):
        exd = exclude_diffusion(vasicek_model, refinement=32)
        xt = np.array([1.0])
        out = restore_state(exd.phi, 1.0, xt)
        assert out[0] == pytest.approx(math.exp(-2.0), rel=1e-10)

    def test_round_trip_random_vectors(self, heston_model):
        spec = chain_from_model(heston_model, 16)
        exc = exclude_chain(spec)
        rng = np.random.default_rng(0)
        for k in (0, 5, 16):
            x = rng.normal(size=2)
            back = restore_state(exc.phi_n, k, pull_state(exc.phi_n, k, x))
            assert np.max(np.abs(back - x)) <= 1e-13 * (1 + np.max(np.abs(x)))


class TestSerialization:
    def test_round_trip(self, tmp_path):
        cfg = {"builtin": "vasicek", "alpha": 0.05, "beta": 2.0, "sigma": 0.1, "x0": 0.03}
        spec = chain_from_model(make_vasicek(0.05, 2.0, 0.1, 0.03), 12)
        exc = exclude_chain(spec)
        path = save_excluded_chain(exc, tmp_path, cfg)
        back = load_excluded_chain(path)
        np.testing.assert_array_equal(back.phi_n.phi, exc.phi_n.phi)
        x = np.array([0.4])
        np.testing.assert_allclose(back.base.m_n(0.25, x), exc.base.m_n(0.25, x))
