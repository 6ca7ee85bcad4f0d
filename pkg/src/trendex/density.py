"""Transition densities: closed forms, deterministic evolution, KDE,
coordinate transforms and the weighted sup-distance.

Density transforms follow the change-of-variables identities between a
process and its trend-excluded image.  If Y(t) = Phi(t) Ytilde(t),

    p_Y(s, t, x, y)      = |det Phi^-1(t)| p_Yt(s, t, Phi^-1(s) x, Phi^-1(t) y)
    p_Yt(s, t, x~, z)    = |det Phi(t)|    p_Y(s, t, Phi(s) x~, Phi(t) z)

and identically for the chain with the discrete matrices Phi_n (the
discrete matrix is used on the chain side even where it matters only
at O(h)).  The convergence metric is the polynomially weighted
sup-distance

    sup_w (1 + ||w - x||^{2(S'-1)}) |det Phi(1)| |p1(w) - p2(w)|

with `w` the evaluation point of both densities; a second variant
weights by ||Phi^-1(1) w - x|| instead (pulling the point back rather
than pushing the source forward); neither is privileged and both are
reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .chains import PathEnsemble
from .errors import (
    GridCoverage,
    GridMismatch,
    GridTooSmall,
    InvalidParameter,
)
from .fundmat import ContinuousFundamentalMatrix, FundamentalMatrixTable
from .models import ChainSpec, eval_rows

MASS_TOL = 5e-3
MASS_TOL_KDE = 2e-2


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform tensor grid over a box, one (min, max, points) per axis."""

    lows: tuple
    highs: tuple
    counts: tuple

    def __post_init__(self):
        object.__setattr__(self, "lows", tuple(float(v) for v in np.atleast_1d(self.lows)))
        object.__setattr__(self, "highs", tuple(float(v) for v in np.atleast_1d(self.highs)))
        object.__setattr__(self, "counts", tuple(int(v) for v in np.atleast_1d(self.counts)))
        if not (len(self.lows) == len(self.highs) == len(self.counts)):
            raise InvalidParameter("grid axes must agree in length")
        for lo, hi, c in zip(self.lows, self.highs, self.counts):
            if not (lo < hi and c >= 2):
                raise InvalidParameter(f"bad grid axis ({lo}, {hi}, {c})")

    @classmethod
    def line(cls, low: float, high: float, points: int) -> "SpatialGrid":
        return cls((low,), (high,), (points,))

    @property
    def dim(self) -> int:
        return len(self.lows)

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, c) for lo, hi, c in zip(self.lows, self.highs, self.counts)]

    def axis(self) -> np.ndarray:
        if self.dim != 1:
            raise InvalidParameter("axis() is for 1-d grids")
        return self.axes()[0]

    def points(self) -> np.ndarray:
        """All grid points as an (N, d) stack in C order."""
        axes = self.axes()
        if self.dim == 1:
            return axes[0][:, None]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def spacing(self) -> tuple:
        return tuple((hi - lo) / (c - 1) for lo, hi, c in zip(self.lows, self.highs, self.counts))

    def same_as(self, other: "SpatialGrid") -> bool:
        return (self.lows == other.lows and self.highs == other.highs
                and self.counts == other.counts)


def _integral(grid: SpatialGrid, values: np.ndarray) -> float:
    axes = grid.axes()
    out = values.reshape(grid.counts)
    for ax in reversed(range(grid.dim)):
        out = np.trapezoid(out, axes[ax], axis=ax)
    return float(out)


@dataclass
class DensityField:
    """Transition density p(s, t, x0, .) tabulated on a spatial grid.

    `values` is flat in the grid's C order; kind is one of closedForm,
    evolved, kde, transformed.
    """

    s: float
    t: float
    x0: np.ndarray
    grid: SpatialGrid
    values: np.ndarray
    kind: str

    def __post_init__(self):
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        self.values = np.asarray(self.values, dtype=float).ravel()
        if self.values.size != int(np.prod(self.grid.counts)):
            raise InvalidParameter("values do not match the grid size")
        if np.min(self.values) < 0:
            raise InvalidParameter("density values must be nonnegative")
        self.values.flags.writeable = False

    def integral(self) -> float:
        return _integral(self.grid, self.values)

    @property
    def mass_tol(self) -> float:
        return MASS_TOL_KDE if self.kind == "kde" else MASS_TOL

    def check_mass(self) -> None:
        total = self.integral()
        if not (1.0 - self.mass_tol <= total <= 1.0 + self.mass_tol):
            raise GridTooSmall(
                f"{self.kind} field integrates to {total:.6f}; grid misses mass"
            )

    def peak(self) -> float:
        return float(np.max(self.values))

    def boundary_max(self) -> float:
        v = self.values.reshape(self.grid.counts)
        if self.grid.dim == 1:
            return float(max(v[0], v[-1]))
        return float(max(np.max(v[0, :]), np.max(v[-1, :]), np.max(v[:, 0]), np.max(v[:, -1])))

    def to_csv(self, path) -> None:
        """Rows `y1..yd, value` with 17 significant digits."""
        import csv

        pts = self.grid.points()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"y{i + 1}" for i in range(self.grid.dim)] + ["value"])
            for p, v in zip(pts, self.values):
                w.writerow(["%.17g" % c for c in p] + ["%.17g" % v])


# ---------------------------------------------------------------------------
# Closed forms
# ---------------------------------------------------------------------------

def _gaussian_pdf(y, mean, var):
    y = np.asarray(y, dtype=float)
    return np.exp(-0.5 * (y - mean) ** 2 / var) / math.sqrt(2.0 * math.pi * var)


def vasicek_density(alpha, beta, sigma, s, t, x, y):
    """Exact transition density of dX = {alpha*beta - beta*X}dt + sigma dB.

    X(t) | X(s)=x is Gaussian with

        mean = x e^{-beta (t-s)} + alpha (1 - e^{-beta (t-s)})
        var  = sigma^2 (1 - e^{-2 beta (t-s)}) / (2 beta)

    (variance by the Ito isometry applied to the explicit solution;
    verified against Monte-Carlo simulation in the test suite).
    """
    if beta <= 0 or sigma <= 0:
        raise InvalidParameter("beta and sigma must be positive")
    tau = t - s
    if tau <= 0:
        raise InvalidParameter(f"need t > s, got t-s = {tau}")
    decay = math.exp(-beta * tau)
    mean = x * decay + alpha * (-math.expm1(-beta * tau))
    var = sigma * sigma * (-math.expm1(-2.0 * beta * tau)) / (2.0 * beta)
    return _gaussian_pdf(y, mean, var)


def vasicek_excluded_density(alpha, beta, sigma, s, t, x, y):
    """Transition density of the trend-excluded Vasicek process
    Xtilde(t) = e^{beta t} X(t): Gaussian with

        mean = x + alpha (e^{beta t} - e^{beta s})
        var  = sigma^2 (e^{2 beta t} - e^{2 beta s}) / (2 beta).
    """
    if beta <= 0 or sigma <= 0:
        raise InvalidParameter("beta and sigma must be positive")
    if t <= s:
        raise InvalidParameter(f"need t > s, got s={s}, t={t}")
    mean = x + alpha * (math.exp(beta * t) - math.exp(beta * s))
    var = sigma * sigma * (math.exp(2.0 * beta * t) - math.exp(2.0 * beta * s)) / (2.0 * beta)
    return _gaussian_pdf(y, mean, var)


def field_from_callable(fn, grid: SpatialGrid, s, t, x0, kind="closedForm") -> DensityField:
    """Tabulate a density callable on a grid (1-d: fn(y array))."""
    if grid.dim == 1:
        vals = np.asarray(fn(grid.axis()), dtype=float)
    else:
        vals = np.asarray(fn(grid.points()), dtype=float)
    return DensityField(s=s, t=t, x0=x0, grid=grid, values=vals, kind=kind)


# ---------------------------------------------------------------------------
# Deterministic 1-d density evolution
# ---------------------------------------------------------------------------

# Gaussian kernel columns beyond this many standard deviations of a
# row's center are dropped by the banded fast path (relative weight
# below exp(-38), far under every tolerance in use).
_BAND_SD = 8.75


def evolve_chain_density(spec: ChainSpec, grid: SpatialGrid) -> DensityField:
    """Density of X_n(T) given X_n(0) = x0 by iterated quadrature (d = 1).

    The point mass at x0 is represented by the exact one-step density;
    each further step convolves with the transition kernel

        K_k(x, y) = q_{n,kh,x}((y - x - h(b_n(kh)x + m_n(kh,x))) / sqrt(h)) / sqrt(h)

    on the trapezoid rule.  Gaussian families take a banded path (the
    kernel is evaluated only within _BAND_SD standard deviations of
    each row's center); other families get the dense kernel.  Mass is
    checked every step and GridTooSmall asks for a bigger grid as soon
    as more than MASS_TOL leaks.
    """
    if spec.dim != 1:
        raise InvalidParameter("deterministic density evolution is restricted to d = 1")
    fam = spec.innovations
    if fam.density is None:
        raise InvalidParameter("innovation family provides no evaluable density")
    tg = spec.grid
    n, h = tg.n, tg.h
    sqrt_h = math.sqrt(h)
    xs = grid.axis()
    size = xs.size
    dx = xs[1] - xs[0]
    weights = np.full(size, dx)
    weights[0] *= 0.5
    weights[-1] *= 0.5

    def drift_at(t, states):
        b = float(spec.b_n(t)[0, 0])
        return b * states + eval_rows(spec.m_n, t, states[:, None])[:, 0]

    banded = fam.is_gaussian and fam.variance_grid is not None

    def step_dense(p, t):
        shift = xs + h * drift_at(t, xs)
        z = (xs[None, :] - shift[:, None]) / sqrt_h
        if fam.density_grid is not None:
            dens = fam.density_grid(n, t, xs, z)
        else:
            dens = np.stack([
                np.asarray(fam.density(n, t, np.array([x]), z[i][:, None]), dtype=float)
                for i, x in enumerate(xs)
            ])
        return (p * weights) @ (dens / sqrt_h)

    def step_banded(p, t):
        centers = xs + h * drift_at(t, xs)
        var = h * fam.variance_grid(n, t, xs)      # kernel variance per source row
        half_cols = int(math.ceil(_BAND_SD * math.sqrt(float(np.max(var))) / dx))
        offsets = np.arange(-half_cols, half_cols + 1)
        anchor = np.rint((centers - xs[0]) / dx).astype(np.int64)
        cols = anchor[:, None] + offsets[None, :]
        valid = (cols >= 0) & (cols < size)
        cols_c = np.clip(cols, 0, size - 1)
        z = xs[cols_c] - centers[:, None]
        v = var[:, None]
        kern = np.exp(-0.5 * z * z / v) / np.sqrt(2.0 * math.pi * v)
        contrib = (p * weights)[:, None] * kern
        contrib[~valid] = 0.0
        out = np.zeros(size)
        np.add.at(out, cols_c.ravel(), contrib.ravel())
        return out

    x0 = float(spec.x0[0])
    shift0 = x0 + h * (float(spec.b_n(0.0)[0, 0]) * x0
                       + float(np.asarray(spec.m_n(0.0, spec.x0), dtype=float)[0]))
    z0 = ((xs - shift0) / sqrt_h)[:, None]
    p = np.asarray(fam.density(n, 0.0, spec.x0, z0), dtype=float) / sqrt_h
    _check_step_mass(grid, p, 1)

    for k in range(1, n):
        t = tg.time(k)
        p = step_banded(p, t) if banded else step_dense(p, t)
        _check_step_mass(grid, p, k + 1)

    return DensityField(s=0.0, t=tg.horizon, x0=spec.x0, grid=grid, values=p, kind="evolved")


def _check_step_mass(grid, values, step):
    total = _integral(grid, values)
    if total < 1.0 - MASS_TOL:
        raise GridTooSmall(
            f"density mass {total:.6f} after step {step}; enlarge the spatial grid"
        )
    if total > 1.0 + MASS_TOL:
        raise GridTooSmall(
            f"density mass {total:.6f} after step {step}; grid too coarse for the kernel"
        )


# ---------------------------------------------------------------------------
# Kernel density estimation (Monte-Carlo oracle for d >= 2)
# ---------------------------------------------------------------------------

def kde_estimate(
    ensemble: PathEnsemble,
    k: int,
    grid: SpatialGrid,
    bandwidth=None,
) -> DensityField:
    """Gaussian-kernel density of the ensemble states at step k.

    Default bandwidth is Silverman's rule per dimension,
    h_i = sigma_i (4 / ((d + 2) P))^{1/(d+4)}.
    """
    samples = ensemble.states_at(k)
    num, d = samples.shape
    if num < 1000:
        raise InvalidParameter(f"kde needs >= 1000 paths, got {num}")
    if bandwidth is None:
        sd = np.std(samples, axis=0, ddof=1)
        if np.any(sd == 0):
            raise InvalidParameter(
                "samples are degenerate in some direction; pass an explicit bandwidth"
            )
        factor = (4.0 / ((d + 2) * num)) ** (1.0 / (d + 4))
        bandwidth = factor * sd
    bw = np.broadcast_to(np.asarray(bandwidth, dtype=float), (d,))
    if np.any(bw <= 0):
        raise InvalidParameter(f"bandwidth must be positive, got {bw}")
    pts = grid.points()
    norm = num * np.prod(bw) * (2.0 * math.pi) ** (d / 2.0)
    values = np.zeros(len(pts))
    chunk = max(1, int(2e7 / max(len(pts), 1)))
    for lo in range(0, num, chunk):
        block = samples[lo:lo + chunk]
        z = (pts[:, None, :] - block[None, :, :]) / bw
        values += np.sum(np.exp(-0.5 * np.sum(z * z, axis=-1)), axis=1)
    values /= norm
    return DensityField(
        s=0.0, t=ensemble.grid.time(k), x0=ensemble.paths[0, 0].copy(),
        grid=grid, values=values, kind="kde",
    )


# ---------------------------------------------------------------------------
# Coordinate transforms
# ---------------------------------------------------------------------------

def _phi_matrices(phi, s, t):
    if isinstance(phi, (FundamentalMatrixTable,)):
        return phi.at_time(s), phi.at_time(t), phi.inverse_at_time(s), phi.inverse_at_time(t)
    if isinstance(phi, ContinuousFundamentalMatrix):
        return phi.value(s), phi.value(t), phi.inverse(s), phi.inverse(t)
    raise InvalidParameter(f"unsupported fundamental-matrix object {type(phi).__name__}")


def _interpolator(field: DensityField):
    axes = field.grid.axes()
    vals = field.values.reshape(field.grid.counts)
    if field.grid.dim == 1:
        lo, hi = axes[0][0], axes[0][-1]

        def interp(pts):
            w = pts[:, 0]
            if w.min() < lo - 1e-12 or w.max() > hi + 1e-12:
                raise GridCoverage(
                    f"mapped points span [{w.min():.6g}, {w.max():.6g}] outside "
                    f"the source grid [{lo:.6g}, {hi:.6g}]"
                )
            return np.interp(w, axes[0], vals)

        return interp

    rgi = RegularGridInterpolator(axes, vals, method="linear", bounds_error=True)

    def interp(pts):
        try:
            return rgi(pts)
        except ValueError as exc:
            raise GridCoverage(f"mapped points leave the source grid: {exc}") from exc

    return interp


def transform_density(
    field: DensityField,
    phi,
    s: float,
    t: float,
    direction: str = "restore",
    target_grid: SpatialGrid | None = None,
    check_mass: bool = True,
) -> DensityField:
    """Map a density field through the trend-exclusion coordinates.

    direction="restore" treats `field` as the excluded process's
    density and returns the original one:

        out(y) = |det Phi^-1(t)| field(Phi^-1(t) y),   source -> Phi(s) x0.

    direction="exclude" goes the other way (multiply by |det Phi(t)|,
    evaluate at Phi(t) z, source -> Phi^-1(s) x0).  Values off the grid
    are looked up by piecewise-linear interpolation; needing points
    outside the source grid raises GridCoverage.
    """
    phi_s, phi_t, inv_s, inv_t = _phi_matrices(phi, s, t)
    if direction == "restore":
        map_t, map_s = inv_t, phi_s
    elif direction == "exclude":
        map_t, map_s = phi_t, inv_s
    else:
        raise InvalidParameter(f"direction must be 'restore' or 'exclude', got {direction!r}")

    grid_out = target_grid if target_grid is not None else field.grid
    interp = _interpolator(field)
    mapped = grid_out.points() @ map_t.T
    jac = abs(float(np.linalg.det(map_t)))
    values = jac * interp(mapped)
    out = DensityField(
        s=s, t=t, x0=map_s @ field.x0, grid=grid_out, values=values, kind="transformed",
    )
    if check_mass:
        out.check_mass()
    return out


# ---------------------------------------------------------------------------
# Weighted sup-distance and tail bound
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WeightedDistance:
    """Weighted sup-distances between two fields on the same grid.

    forward: weight 1 + ||w - x||^{2(S'-1)} at evaluation point w
    pullback: weight 1 + ||Phi^-1(1) w - x||^{2(S'-1)}
    pushforward: weight 1 + ||w - Phi(1) x||^{2(S'-1)} (the Remark-1
    rewriting of the pullback weight; used by equivalence checks)
    """

    forward: float
    pullback: float
    pushforward: float
    sup_gap: float


def weighted_sup_distance(
    p1: DensityField,
    p2: DensityField,
    phi1: np.ndarray,
    x,
    s_prime: int = 2,
) -> WeightedDistance:
    """Polynomially weighted sup-distance of two fields (same grid).

    Returns max over grid points w of

        (1 + ||w - x||^{2(S'-1)}) |det Phi(1)| |p1(w) - p2(w)|

    together with the pullback- and pushforward-weight variants.  With
    S' = 1 every weight degenerates to the constant 2 (the literal
    1 + ||.||^0 form is kept).
    """
    if not p1.grid.same_as(p2.grid):
        raise GridMismatch("fields must share a grid")
    if abs(p1.s - p2.s) > 1e-12 or abs(p1.t - p2.t) > 1e-12:
        raise GridMismatch(f"fields compare different times ({p1.s},{p1.t}) vs ({p2.s},{p2.t})")
    phi1 = np.atleast_2d(np.asarray(phi1, dtype=float))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    power = 2 * (int(s_prime) - 1)
    pts = p1.grid.points()
    gap = np.abs(p1.values - p2.values)
    det = abs(float(np.linalg.det(phi1)))
    inv = np.linalg.inv(phi1)

    r_fwd = np.linalg.norm(pts - x, axis=1)
    r_pb = np.linalg.norm(pts @ inv.T - x, axis=1)
    r_pf = np.linalg.norm(pts - phi1 @ x, axis=1)
    return WeightedDistance(
        forward=float(np.max((1.0 + r_fwd ** power) * det * gap)),
        pullback=float(np.max((1.0 + r_pb ** power) * det * gap)),
        pushforward=float(np.max((1.0 + r_pf ** power) * det * gap)),
        sup_gap=float(np.max(gap)),
    )


@dataclass(frozen=True)
class TailBoundReport:
    """Fitted Gaussian envelope p(y) <= c1 exp(-c2 ||Phi^-1(1)y - x||^2).

    c1/c2 is the two-constant fit (slope of log p against squared
    pulled-back radius, prefactor inflated until no grid point
    violates).  c_single is the smallest feasible C >= 1 for the
    single-constant form p <= C exp(-C r^2), NaN when no such C exists
    on the grid.  candidate_violations counts violations of a
    caller-supplied candidate constant (-1 when none was given).
    """

    c1: float
    c2: float
    violations: int
    c_single: float
    candidate_violations: int

    @property
    def finite(self) -> bool:
        return math.isfinite(self.c1) and math.isfinite(self.c2)


def gaussian_tail_check(
    field: DensityField,
    phi_inv1: np.ndarray,
    x,
    candidate_c: float | None = None,
) -> TailBoundReport:
    """Fit Gaussian-envelope constants for a density field.

    The two-constant fit regresses log p on r^2 = ||Phi^-1(1)y - x||^2
    over the region holding the top twelve decades of density, then
    raises c1 to the exact envelope so the report carries zero
    violations by construction; c_single scans C in [1, 1e8] for the
    single-constant form.
    """
    phi_inv1 = np.atleast_2d(np.asarray(phi_inv1, dtype=float))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    pts = field.grid.points()
    r2 = np.sum((pts @ phi_inv1.T - x) ** 2, axis=1)
    p = field.values
    peak = field.peak()
    mask = p > peak * 1e-12
    if np.count_nonzero(mask) < 3:
        return TailBoundReport(c1=peak, c2=0.0, violations=0, c_single=1.0,
                               candidate_violations=-1)
    slope, intercept = np.polyfit(r2[mask], np.log(p[mask]), 1)
    c2 = max(-float(slope), 0.0)
    c1 = float(np.max(p * np.exp(c2 * r2)))
    violations = int(np.count_nonzero(p > c1 * np.exp(-c2 * r2) * (1 + 1e-12)))

    def feasible(c):
        return bool(np.all(p <= c * np.exp(-c * r2) * (1 + 1e-12)))

    c_single = math.nan
    cs = np.geomspace(1.0, 1e8, 400)
    feas = [c for c in cs if feasible(c)]
    if feasible(1.0):
        c_single = 1.0
    elif feas:
        hi = feas[0]
        lo_idx = int(np.searchsorted(cs, hi)) - 1
        lo = cs[lo_idx] if lo_idx >= 0 else 1.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if feasible(mid):
                hi = mid
            else:
                lo = mid
        c_single = hi

    cand = -1
    if candidate_c is not None:
        cand = int(np.count_nonzero(p > candidate_c * np.exp(-candidate_c * r2) * (1 + 1e-12)))
    return TailBoundReport(c1=c1, c2=c2, violations=violations,
                           c_single=c_single, candidate_violations=cand)
