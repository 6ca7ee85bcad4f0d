"""Trend exclusion: removing the linearly growing drift component.

The change of coordinates Ytilde(t) = Phi^-1(t) Y(t) turns the SDE
dY = {b(t)Y + m(t,Y)}dt + sigma(t,Y)dB into a bounded-drift SDE

    dYtilde = mt(t, Ytilde) dt + st(t, Ytilde) dB,
    mt(t, y) = Phi^-1(t) m(t, Phi(t) y),
    st(t, y) = Phi^-1(t) sigma(t, Phi(t) y),

and the analogous discrete substitution Xtilde(kh) = Phi_n^-1(kh) X(kh)
turns the chain step into

    Xtilde((k+1)h) = Xtilde(kh) + h mtn(kh, Xtilde(kh)) + sqrt(h) et((k+1)h),
    mtn(kh, y) = Phi_n^-1(kh) (I + h b_n(kh))^-1 m_n(kh, Phi_n(kh) y),
    et((k+1)h) = Phi_n^-1(kh) (I + h b_n(kh))^-1 eps((k+1)h).

Since (I + h b_n(kh)) Phi_n(kh) = Phi_n((k+1)h), both prefactors equal
Phi_n^-1((k+1)h); that composed form is used throughout, which keeps
the conjugation identity

    restore(one step of the excluded chain) == one step of the original chain

exact up to floating-point rounding for every shared innovation draw.
The innovation density transforms with the corresponding Jacobian:

    qt_{n,kh,y}(z) = |det Phi_n((k+1)h)| * q_{n,kh,Phi_n(kh) y}(Phi_n((k+1)h) z),

whose mean is zero and whose covariance is

    at_n = Phi_n^-1((k+1)h) a_n(kh, Phi_n(kh) y) [Phi_n^-1((k+1)h)]^T.

The time bookkeeping (state argument at kh, Jacobian at (k+1)h) is
fixed by requiring the conjugation identity to hold exactly; it also
matches the derivation that produces the transformed step above.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigInvalid, InvalidParameter
from .fundmat import (
    ContinuousFundamentalMatrix,
    FundamentalMatrixTable,
    MatrixFunction,
    TimeGrid,
    build_discrete,
    read_table_csv,
    solve_continuous,
)
from .models import (
    ChainSpec,
    DiffusionModel,
    InnovationFamily,
    is_batch_ok,
    mark_batch_ok,
)


def _apply(mat: np.ndarray, x: np.ndarray) -> np.ndarray:
    """mat @ x for a single state (d,) or a stack (..., d)."""
    return np.asarray(x, dtype=float) @ mat.T


@dataclass(frozen=True)
class ExcludedDiffusion:
    """Bounded-drift model obtained by excluding the linear trend."""

    base: DiffusionModel                 # zero linear part, drift m_tilde
    phi: ContinuousFundamentalMatrix
    source: DiffusionModel

    @property
    def table(self) -> FundamentalMatrixTable:
        return self.phi.table

    def m_tilde(self, t, x):
        return self.base.m(t, x)

    def sigma_tilde(self, t, x):
        return self.base.sigma(t, x)

    def a_tilde(self, t, x):
        return self.base.a(t, x)


@dataclass(frozen=True)
class ExcludedChain:
    """Zero-linear-part chain conjugate to the original one."""

    base: ChainSpec                      # b_n == 0, drift m_n_tilde
    phi_n: FundamentalMatrixTable
    source: ChainSpec

    def m_n_tilde(self, t, x):
        return self.base.m_n(t, x)


def exclude_diffusion(
    model: DiffusionModel,
    refinement: int = 16,
    grid: TimeGrid | None = None,
) -> ExcludedDiffusion:
    """Build the excluded diffusion with mt, st as in the module doc.

    The fundamental matrix is tabulated on `grid` (default: 256 cells
    over the model horizon) and evaluated off-grid by deterministic
    RK4 continuation.  Boundedness transfers: on any probe set,
    sup|mt| <= max_t ||Phi^-1(t)|| * sup|m|, and at = st st^T stays
    positive definite wherever a is.  The initial state is unchanged
    because Phi(0) = I.
    """
    if grid is None:
        grid = TimeGrid(256, model.horizon)
    table = solve_continuous(model.b, grid, refinement=refinement)
    cont = ContinuousFundamentalMatrix(model.b, table, refinement=refinement)

    def m_tilde(t, x):
        phi = cont.value(t)
        inv = cont.inverse(t)
        return _apply(inv, np.asarray(model.m(t, _apply(phi, x)), dtype=float))

    def sigma_tilde(t, x):
        phi = cont.value(t)
        inv = cont.inverse(t)
        s = np.asarray(model.sigma(t, _apply(phi, x)), dtype=float)
        if s.ndim == 3:
            return np.einsum("ij,pjk->pik", inv, s)
        return inv @ s

    if is_batch_ok(model.m):
        mark_batch_ok(m_tilde)
    if is_batch_ok(model.sigma):
        mark_batch_ok(sigma_tilde)

    base = DiffusionModel(
        dim=model.dim,
        b=MatrixFunction.zero(model.dim),
        m=m_tilde,
        sigma=sigma_tilde,
        x0=model.x0,
        horizon=model.horizon,
        name=f"excluded({model.name})",
    )
    return ExcludedDiffusion(base=base, phi=cont, source=model)


def transform_innovation_density(
    family: InnovationFamily,
    phi_n: FundamentalMatrixTable,
    k: int,
    x_tilde: np.ndarray,
):
    """Density of the transformed innovation at step k, as a callable.

    Returns z -> |det Phi_n((k+1)h)| q_{n,kh,Phi_n(kh) x~}(Phi_n((k+1)h) z),
    the conditional density of et((k+1)h) given Xtilde(kh) = x_tilde.
    """
    if k + 1 > phi_n.grid.n:
        raise InvalidParameter(f"step {k} has no (k+1) grid point (n={phi_n.grid.n})")
    mat = phi_n.value(k + 1)
    det = abs(phi_n.determinant(k + 1))
    x_src = _apply(phi_n.value(k), np.atleast_1d(x_tilde))
    t = phi_n.grid.time(k)
    n = phi_n.grid.n

    def q_tilde(z):
        return det * np.asarray(family.density(n, t, x_src, _apply(mat, z)), dtype=float)

    return q_tilde


def transformed_covariance(a_n, phi_n: FundamentalMatrixTable, t: float, x_tilde) -> np.ndarray:
    """Covariance of the transformed innovation family:

        Phi_n^-1((k+1)h) a_n(t, Phi_n(kh) x~) [Phi_n^-1((k+1)h)]^T,

    with k = floor(t/h) (t = kh on the grid; k+1 <= n required).
    """
    grid = phi_n.grid
    k = min(int(t / grid.h + 1e-9), grid.n)
    if k + 1 > grid.n:
        raise InvalidParameter(f"t={t} has no (k+1) grid point (n={grid.n})")
    inv = phi_n.inverse(k + 1)
    x_src = _apply(phi_n.value(k), np.atleast_1d(np.asarray(x_tilde, dtype=float)))
    a = np.asarray(a_n(t, x_src), dtype=float)
    return inv @ a @ inv.T


def _transform_family(family: InnovationFamily, phi_n: FundamentalMatrixTable) -> InnovationFamily:
    grid = phi_n.grid

    def step_of(t):
        k = int(round(t / grid.h))
        if k < 0 or k + 1 > grid.n:
            raise InvalidParameter(f"innovation time {t} outside the step range")
        return k

    def density(n, t, x, z):
        k = step_of(t)
        mat = phi_n.value(k + 1)
        det = abs(phi_n.determinant(k + 1))
        x_src = _apply(phi_n.value(k), np.atleast_1d(x))
        return det * np.asarray(family.density(n, t, x_src, _apply(mat, z)), dtype=float)

    def sample(n, t, x, u):
        k = step_of(t)
        x_src = _apply(phi_n.value(k), np.atleast_1d(x))
        return _apply(phi_n.inverse(k + 1), family.sample(n, t, x_src, u))

    def covariance(t, x):
        return transformed_covariance(family.covariance, phi_n, t, x)

    sample_batch = None
    if family.sample_batch is not None:
        def sample_batch(n, t, states, u):
            k = step_of(t)
            src = _apply(phi_n.value(k), states)
            return _apply(phi_n.inverse(k + 1), family.sample_batch(n, t, src, u))

    density_grid = None
    if family.density_grid is not None:
        def density_grid(n, t, xs, z):
            k = step_of(t)
            phi_k = float(phi_n.value(k)[0, 0])
            phi_k1 = float(phi_n.value(k + 1)[0, 0])
            return abs(phi_k1) * family.density_grid(n, t, phi_k * xs, phi_k1 * z)

    variance_grid = None
    if family.variance_grid is not None:
        def variance_grid(n, t, xs):
            # scalar form of at_n: a_n(kh, phi_k x) / phi_{k+1}^2
            k = step_of(t)
            phi_k = float(phi_n.value(k)[0, 0])
            phi_k1 = float(phi_n.value(k + 1)[0, 0])
            return family.variance_grid(n, t, phi_k * xs) / (phi_k1 * phi_k1)

    return InnovationFamily(
        dim=family.dim,
        density=density,
        sample=sample,
        covariance=covariance,
        moment_order=family.moment_order,
        is_gaussian=family.is_gaussian,
        sample_batch=sample_batch,
        density_grid=density_grid,
        variance_grid=variance_grid,
    )


def exclude_chain(spec: ChainSpec) -> ExcludedChain:
    """Build the excluded chain (zero linear part) conjugate to `spec`.

    One step of the excluded chain followed by `restore_state` equals
    one step of the original chain driven by the same innovation draw;
    this is exact algebra, testable to rounding.  Raises StepTooLarge
    (via the discrete fundamental matrix) if h*||b_n|| > 1/2.
    """
    table = build_discrete(spec.b_n, spec.grid)
    grid = spec.grid

    def m_n_tilde(t, x):
        k = int(round(t / grid.h))
        if k < 0 or k + 1 > grid.n:
            raise InvalidParameter(f"drift time {t} outside the step range")
        # Phi_n^-1(kh) (I + h b_n(kh))^-1 == Phi_n^-1((k+1)h)
        inv = table.inverse(k + 1)
        src = _apply(table.value(k), x)
        return _apply(inv, np.asarray(spec.m_n(t, src), dtype=float))

    if is_batch_ok(spec.m_n):
        mark_batch_ok(m_n_tilde)

    base = ChainSpec(
        dim=spec.dim,
        grid=grid,
        b_n=MatrixFunction.zero(spec.dim),
        m_n=m_n_tilde,
        innovations=_transform_family(spec.innovations, table),
        x0=spec.x0,
        name=f"excluded({spec.name})",
    )
    return ExcludedChain(base=base, phi_n=table, source=spec)


def _matrix_at(phi, k_or_t, inverse=False):
    if isinstance(phi, ExcludedChain):
        phi = phi.phi_n
    if isinstance(phi, ExcludedDiffusion):
        phi = phi.phi
    if isinstance(phi, FundamentalMatrixTable):
        if isinstance(k_or_t, (int, np.integer)):
            return phi.inverse(k_or_t) if inverse else phi.value(k_or_t)
        return phi.inverse_at_time(k_or_t) if inverse else phi.at_time(k_or_t)
    if isinstance(phi, ContinuousFundamentalMatrix):
        t = float(k_or_t)
        return phi.inverse(t) if inverse else phi.value(t)
    raise InvalidParameter(f"unsupported fundamental-matrix object {type(phi).__name__}")


def restore_state(phi, k_or_t, x_tilde):
    """Map an excluded-coordinates state back: x = Phi(t) x~."""
    return _apply(_matrix_at(phi, k_or_t), np.asarray(x_tilde, dtype=float))


def pull_state(phi, k_or_t, x):
    """Map an original state into excluded coordinates: x~ = Phi^-1(t) x."""
    return _apply(_matrix_at(phi, k_or_t, inverse=True), np.asarray(x, dtype=float))


# ---------------------------------------------------------------------------
# Serialization: model config + fundamental-matrix CSV reference
# ---------------------------------------------------------------------------

def save_excluded_chain(excluded: ExcludedChain, directory, model_config: dict, name="excluded"):
    """Persist an excluded chain as {config JSON + table CSV reference}.

    Only chains whose source model is expressible in the `config`
    format can round-trip; the table CSV uses 17 significant digits so
    the discrete matrices are restored exactly.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    table_file = f"{name}_phi_n.csv"
    excluded.phi_n.to_csv(directory / table_file)
    doc = {
        "model": model_config,
        "n": excluded.phi_n.grid.n,
        "horizon": excluded.phi_n.grid.horizon,
        "phi_table": table_file,
    }
    path = directory / f"{name}.json"
    path.write_text(json.dumps(doc, indent=2))
    return path


def load_excluded_chain(path) -> ExcludedChain:
    """Rebuild an excluded chain saved by `save_excluded_chain`."""
    from .config import model_from_dict
    from .models import chain_from_model

    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        model = model_from_dict(doc["model"])
        n = int(doc["n"])
    except (KeyError, ValueError, OSError) as exc:
        raise ConfigInvalid(f"cannot load excluded chain from {path}: {exc}") from exc
    spec = chain_from_model(model, n)
    excluded = exclude_chain(spec)
    saved = read_table_csv(path.parent / doc["phi_table"], kind="discrete")
    if not np.allclose(saved.phi, excluded.phi_n.phi, rtol=0, atol=0):
        raise ConfigInvalid(f"saved table in {path} disagrees with the rebuilt chain")
    return excluded
