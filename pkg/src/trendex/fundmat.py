"""Fundamental matrices of linear ODE and difference systems.

A fundamental matrix Phi(t) of the linear system x' = b(t) x is the
matrix solution of

    Phi'(t) = b(t) Phi(t),    Phi(0) = I,

whose columns form a basis of the solution space.  Its discrete
analogue on a uniform grid {0, h, ..., nh = T} is the product

    Phi_n((k+1)h) = (I + h b_n(kh)) Phi_n(kh),    Phi_n(0) = I,

which coincides with the Euler broken line of the same system.  Both
objects, together with their inverses and determinants, are tabulated
here once per grid and then shared read-only by the rest of the
package.

The continuous table is integrated with fixed-step classical RK4
(deterministic, order 4, no adaptive-step nondeterminism); the inverse
is obtained by direct LU inversion and cross-checked against the
adjoint equation [Phi^-1]' = -Phi^-1 b(t).
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import expm

from .errors import (
    InvalidParameter,
    NonFiniteCoefficient,
    SingularFundamentalMatrix,
    StepTooLarge,
)

# |det Phi| below this is treated as an integrator failure, not a model
# property: the true Phi is nondegenerate on [0, T].
SINGULARITY_TOL = 1e-12
# Condition numbers above this trigger a warning from direct inversion.
CONDITION_WARN = 1e8
# One-step factors must satisfy h * ||b_n|| <= this.
MAX_STEP_NORM = 0.5

_FLOAT_FMT = "%.17g"


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid {0, h, 2h, ..., nh = T} with h = T/n.

    Points are computed as k*h (not accumulated sums) so that
    points[k+1] - points[k] is exactly h in floating point up to a
    single rounding.
    """

    n: int
    horizon: float = 1.0

    def __post_init__(self):
        if self.n < 1 or int(self.n) != self.n:
            raise InvalidParameter(f"n must be a positive integer, got {self.n}")
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise InvalidParameter(f"horizon must be positive, got {self.horizon}")

    @property
    def h(self) -> float:
        return self.horizon / self.n

    @property
    def points(self) -> np.ndarray:
        return np.arange(self.n + 1) * self.h

    def time(self, k: int) -> float:
        return k * self.h

    def index_of(self, t: float) -> int:
        """Grid index of a time that must lie (numerically) on the grid."""
        k = int(round(t / self.h))
        if k < 0 or k > self.n or abs(t - k * self.h) > 1e-9 * max(1.0, self.horizon):
            raise InvalidParameter(f"t={t} is not a grid point of {self}")
        return k

    def __str__(self):
        return f"TimeGrid(n={self.n}, T={self.horizon})"


class MatrixFunction:
    """A time-dependent d x d matrix t -> b(t) on [0, T].

    Wraps an arbitrary callable, coerces its output to a (d, d) float
    array and rejects non-finite values.  Scalar systems are handled as
    1 x 1 matrices.
    """

    def __init__(self, dim: int, fn: Callable[[float], np.ndarray], continuous: bool = True):
        self.dim = int(dim)
        self._fn = fn
        self.continuous = continuous

    def __call__(self, t: float) -> np.ndarray:
        out = np.asarray(self._fn(t), dtype=float)
        if out.shape == () and self.dim == 1:
            out = out.reshape(1, 1)
        if out.shape != (self.dim, self.dim):
            raise InvalidParameter(
                f"matrix function returned shape {out.shape}, expected ({self.dim}, {self.dim})"
            )
        if not np.all(np.isfinite(out)):
            raise NonFiniteCoefficient(f"matrix function non-finite at t={t}: {out}")
        return out

    @classmethod
    def constant(cls, matrix) -> "MatrixFunction":
        m = np.atleast_2d(np.asarray(matrix, dtype=float))
        if m.shape[0] != m.shape[1]:
            raise InvalidParameter(f"constant matrix must be square, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise NonFiniteCoefficient(f"constant matrix is non-finite: {m}")
        m = m.copy()
        m.flags.writeable = False
        return cls(m.shape[0], lambda t: m)

    @classmethod
    def zero(cls, dim: int) -> "MatrixFunction":
        return cls.constant(np.zeros((dim, dim)))

    @classmethod
    def scalar(cls, fn: Callable[[float], float]) -> "MatrixFunction":
        return cls(1, lambda t: np.array([[float(fn(t))]]))


@dataclass
class FundamentalMatrixTable:
    """Phi, Phi^-1 and det Phi at every grid point, immutable once built."""

    grid: TimeGrid
    kind: str  # "continuous" | "discrete"
    phi: np.ndarray       # (n+1, d, d)
    phi_inv: np.ndarray   # (n+1, d, d)
    det: np.ndarray       # (n+1,)
    adjoint_gap: float | None = None  # continuous only: max |inv - adjoint solution|
    max_condition: float = field(default=1.0)

    def __post_init__(self):
        for arr in (self.phi, self.phi_inv, self.det):
            arr.flags.writeable = False

    @property
    def dim(self) -> int:
        return self.phi.shape[1]

    def value(self, k: int) -> np.ndarray:
        return self.phi[k]

    def inverse(self, k: int) -> np.ndarray:
        return self.phi_inv[k]

    def determinant(self, k: int) -> float:
        return float(self.det[k])

    def at_time(self, t: float) -> np.ndarray:
        return self.phi[self.grid.index_of(t)]

    def inverse_at_time(self, t: float) -> np.ndarray:
        return self.phi_inv[self.grid.index_of(t)]

    def to_csv(self, path) -> None:
        """Write `k, t, phi_00..phi_dd, det` rows (row-major entries,
        17 significant digits, enough to round-trip float64)."""
        d = self.dim
        header = ["k", "t"] + [f"phi_{i}{j}" for i in range(d) for j in range(d)] + ["det"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k in range(self.grid.n + 1):
                row = [str(k), _FLOAT_FMT % self.grid.time(k)]
                row += [_FLOAT_FMT % v for v in self.phi[k].ravel(order="C")]
                row.append(_FLOAT_FMT % self.det[k])
                w.writerow(row)


def read_table_csv(path, kind: str = "continuous") -> FundamentalMatrixTable:
    """Rebuild a table from its CSV serialization (inverses recomputed)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = int(round(math.sqrt(len(header) - 3)))
    n = len(body) - 1
    horizon = float(body[-1][1])
    grid = TimeGrid(n, horizon)
    phi = np.empty((n + 1, d, d))
    det = np.empty(n + 1)
    for row in body:
        k = int(row[0])
        phi[k] = np.array([float(v) for v in row[2:2 + d * d]]).reshape(d, d)
        det[k] = float(row[-1])
    phi_inv, _ = _invert_all(phi, det)
    return FundamentalMatrixTable(grid, kind, phi, phi_inv, det)


def _check_dets(det: np.ndarray, kind: str) -> None:
    bad = np.abs(det) < SINGULARITY_TOL
    if np.any(bad):
        k = int(np.argmax(bad))
        raise SingularFundamentalMatrix(
            f"{kind} fundamental matrix numerically singular at index {k}: det={det[k]:.3e}"
        )


def _invert_all(phi: np.ndarray, det: np.ndarray) -> tuple[np.ndarray, float]:
    conds = np.linalg.cond(phi)
    max_cond = float(np.max(conds))
    if max_cond > CONDITION_WARN:
        warnings.warn(
            f"fundamental matrix condition number {max_cond:.3e} exceeds {CONDITION_WARN:.0e}; "
            "inverses may lose accuracy",
            RuntimeWarning,
            stacklevel=3,
        )
    return np.linalg.inv(phi), max_cond


def _rk4_matrix_step(f, t, y, dt):
    k1 = f(t, y)
    k2 = f(t + 0.5 * dt, y + 0.5 * dt * k1)
    k3 = f(t + 0.5 * dt, y + 0.5 * dt * k2)
    k4 = f(t + dt, y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def solve_continuous(
    b: MatrixFunction,
    grid: TimeGrid,
    refinement: int = 10,
    adjoint_check: bool = True,
) -> FundamentalMatrixTable:
    """Integrate Phi' = b(t) Phi, Phi(0) = I on the grid.

    Classical 4-stage Runge-Kutta with `refinement` equal sub-steps per
    grid cell.  Inverses come from direct LU inversion; when
    `adjoint_check` is on, the adjoint system [Phi^-1]' = -Phi^-1 b(t)
    is integrated alongside and the largest disagreement with the
    direct inverses is stored as `adjoint_gap` (a secondary validation
    oracle, not the primary inversion path).

    Raises NonFiniteCoefficient if b evaluates to non-finite entries
    and SingularFundamentalMatrix if any |det Phi| falls below
    SINGULARITY_TOL.
    """
    if refinement < 1 or int(refinement) != refinement:
        raise InvalidParameter(f"refinement must be a positive integer, got {refinement}")
    d = b.dim
    n = grid.n
    sub = grid.h / refinement

    phi = np.empty((n + 1, d, d))
    phi[0] = np.eye(d)
    psi = np.eye(d)  # adjoint solution, tracks Phi^-1
    adjoint_gap = 0.0

    fwd = lambda t, y: b(t) @ y
    adj = lambda t, y: -(y @ b(t))

    cur = phi[0].copy()
    for k in range(n):
        t0 = grid.time(k)
        for j in range(refinement):
            t = t0 + j * sub
            cur = _rk4_matrix_step(fwd, t, cur, sub)
            if adjoint_check:
                psi = _rk4_matrix_step(adj, t, psi, sub)
        if not np.all(np.isfinite(cur)):
            raise NonFiniteCoefficient(f"integration diverged before t={grid.time(k + 1)}")
        phi[k + 1] = cur

    det = np.linalg.det(phi)
    _check_dets(det, "continuous")
    phi_inv, max_cond = _invert_all(phi, det)
    if adjoint_check:
        adjoint_gap = float(np.max(np.abs(phi_inv[n] - psi)))
        if adjoint_gap > 1e-6:
            warnings.warn(
                f"adjoint cross-check gap {adjoint_gap:.3e} is large; "
                "increase refinement",
                RuntimeWarning,
                stacklevel=2,
            )
    return FundamentalMatrixTable(
        grid, "continuous", phi, phi_inv, det,
        adjoint_gap=adjoint_gap if adjoint_check else None,
        max_condition=max_cond,
    )


def build_discrete(b_n: MatrixFunction, grid: TimeGrid) -> FundamentalMatrixTable:
    """Exact finite product Phi_n(kh) = prod_{j<k} (I + h b_n(jh)).

    Factors are applied in index order (j = 0 first).  Requires
    h * ||b_n(kh)||_2 <= 1/2 at every grid point, which guarantees each
    factor is invertible; otherwise StepTooLarge signals that n is too
    small for the given b_n.
    """
    d = b_n.dim
    n, h = grid.n, grid.h
    eye = np.eye(d)
    phi = np.empty((n + 1, d, d))
    phi[0] = eye
    for k in range(n):
        bk = b_n(grid.time(k))
        norm = np.linalg.norm(bk, 2)
        if h * norm > MAX_STEP_NORM:
            raise StepTooLarge(
                f"h*||b_n({grid.time(k)})|| = {h * norm:.4g} > {MAX_STEP_NORM}; increase n"
            )
        phi[k + 1] = (eye + h * bk) @ phi[k]
    det = np.linalg.det(phi)
    _check_dets(det, "discrete")
    phi_inv, max_cond = _invert_all(phi, det)
    return FundamentalMatrixTable(grid, "discrete", phi, phi_inv, det, max_condition=max_cond)


class ContinuousFundamentalMatrix:
    """Evaluate a continuous Phi at arbitrary t in [0, T].

    Grid times come from the table; off-grid times are reached by RK4
    continuation from the nearest node below, with the table's
    refinement density, so the evaluation stays deterministic.
    """

    def __init__(self, b: MatrixFunction, table: FundamentalMatrixTable, refinement: int = 10):
        if table.kind != "continuous":
            raise InvalidParameter("ContinuousFundamentalMatrix needs a continuous table")
        self.b = b
        self.table = table
        self.refinement = int(refinement)

    @property
    def dim(self) -> int:
        return self.table.dim

    def value(self, t: float) -> np.ndarray:
        grid = self.table.grid
        if t < -1e-12 or t > grid.horizon * (1 + 1e-12):
            raise InvalidParameter(f"t={t} outside [0, {grid.horizon}]")
        h = grid.h
        k = min(int(t / h), grid.n)
        rem = t - k * h
        if rem <= 1e-14 * max(1.0, grid.horizon):
            return self.table.phi[k]
        cur = self.table.phi[k].copy()
        sub = rem / self.refinement
        fwd = lambda s, y: self.b(s) @ y
        for j in range(self.refinement):
            cur = _rk4_matrix_step(fwd, k * h + j * sub, cur, sub)
        return cur

    def inverse(self, t: float) -> np.ndarray:
        grid = self.table.grid
        h = grid.h
        k = min(int(t / h), grid.n)
        if abs(t - k * h) <= 1e-14 * max(1.0, grid.horizon):
            return self.table.phi_inv[k]
        return np.linalg.inv(self.value(t))

    def determinant(self, t: float) -> float:
        return float(np.linalg.det(self.value(t)))


def exp_bound_residual(b, n: int) -> tuple[float, float]:
    """Residual pair for the constant-coefficient bound on [0, 1]:

        ||exp(b) - (I + b/n)^n||  <=  a^2 e^a / n,    a = ||b||.

    Returns (lhs, rhs) in the spectral norm, with exp(b) from scipy's
    scaling-and-squaring `expm`.  The caller asserts lhs <= rhs.
    """
    if n < 1:
        raise InvalidParameter(f"n must be >= 1, got {n}")
    bm = np.atleast_2d(np.asarray(b, dtype=float))
    if not np.all(np.isfinite(bm)):
        raise NonFiniteCoefficient(f"non-finite matrix: {bm}")
    a = np.linalg.norm(bm, 2)
    eye = np.eye(bm.shape[0])
    lhs = float(np.linalg.norm(expm(bm) - np.linalg.matrix_power(eye + bm / n, n), 2))
    rhs = float(a * a * math.exp(a) / n)
    return lhs, rhs


def broken_line_convergence(
    b_n: MatrixFunction,
    b: MatrixFunction,
    n_list: Sequence[int],
    horizon: float = 1.0,
    refinement: int = 100,
) -> list[float]:
    """Sup over grid points of ||Phi_n(kh) - Phi(kh)||_2, per n.

    Measures the uniform convergence of the Euler broken line to the
    continuous fundamental matrix; the returned gaps should decrease
    in n (asserted by callers, not here).
    """
    gaps = []
    for n in n_list:
        grid = TimeGrid(n, horizon)
        disc = build_discrete(b_n, grid)
        cont = solve_continuous(b, grid, refinement=refinement)
        diff = disc.phi - cont.phi
        gaps.append(float(np.max(np.linalg.norm(diff, 2, axis=(1, 2)))))
    return gaps
