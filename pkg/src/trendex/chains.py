"""Chain and reference-diffusion simulation with reproducible coupling.

Randomness is counter-based: the draw for (path p, step k) comes from
a Philox block addressed directly by (p, k), so the ensemble is
bitwise identical no matter how paths are partitioned across workers
or in what order steps of independent paths are generated.  Standard
normals are produced by inverse CDF from one 64-bit uniform per
component, which keeps the per-(path, step) consumption fixed.

All simulators step the explicit recursion

    X((k+1)h) = X(kh) + h {b_n(kh) X(kh) + m_n(kh, X(kh))} + sqrt(h) eps((k+1)h)

with innovations drawn from the spec's family at (kh, current state).
Non-finite states raise immediately instead of being clipped, because
clipping would silently bias every downstream density.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .errors import InvalidParameter, NonFiniteState
from .exclusion import ExcludedChain
from .fundmat import TimeGrid
from .models import ChainSpec, DiffusionModel, eval_rows, is_batch_ok

_BINARY_MAGIC = b"TDXE"
_BINARY_VERSION = 1
_HEADER = struct.Struct("<4sHHII")  # magic, version, d, n, num_paths (16 bytes)


@dataclass(frozen=True)
class RandomStream:
    """Counter-based (path, step) -> N(0, I_d) innovation addressing.

    `seed` and `stream_id` key the Philox generator; `stream_id`
    doubles as the coupling id, so two simulations sharing (seed,
    stream_id) see the same underlying draws.
    """

    seed: int
    stream_id: int = 0

    def normals(self, step: int, num_paths: int, dim: int, path_offset: int = 0) -> np.ndarray:
        """Standard normal draws for paths [offset, offset + num_paths) at one step."""
        blocks = (dim + 3) // 4  # one Philox block = 4 uint64 words
        bg = np.random.Philox(
            key=[self.seed, self.stream_id],
            counter=[path_offset * blocks, 0, step, 0],
        )
        raw = bg.random_raw(4 * blocks * num_paths).reshape(num_paths, 4 * blocks)[:, :dim]
        u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
        return ndtri(u)


@dataclass
class PathEnsemble:
    """Write-once array of simulated paths, (num_paths, n+1, d)."""

    spec_id: str
    grid: TimeGrid
    paths: np.ndarray
    seed: int
    stream_id: int

    def __post_init__(self):
        self.paths.flags.writeable = False

    @property
    def num_paths(self) -> int:
        return self.paths.shape[0]

    @property
    def dim(self) -> int:
        return self.paths.shape[2]

    def states_at(self, k: int) -> np.ndarray:
        return self.paths[:, k, :]


def _check_finite(x, k):
    if not np.all(np.isfinite(x)):
        raise NonFiniteState(f"non-finite state at step {k}; explosion or bad coefficients")


def _sample_innovations(family, n, t, states, u):
    if family.sample_batch is not None:
        return np.asarray(family.sample_batch(n, t, states, u), dtype=float)
    return np.stack([np.asarray(family.sample(n, t, s, ui), dtype=float)
                     for s, ui in zip(states, u)])


def simulate_chain(spec: ChainSpec, num_paths: int, stream: RandomStream) -> PathEnsemble:
    """Simulate `num_paths` chain paths on the spec's grid."""
    if num_paths < 1:
        raise InvalidParameter(f"num_paths must be >= 1, got {num_paths}")
    grid = spec.grid
    n, h, d = grid.n, grid.h, spec.dim
    sqrt_h = math.sqrt(h)
    paths = np.empty((num_paths, n + 1, d))
    x = np.tile(spec.x0, (num_paths, 1))
    paths[:, 0] = x
    fam = spec.innovations
    for k in range(n):
        t = grid.time(k)
        bk = spec.b_n(t)
        drift = x @ bk.T + eval_rows(spec.m_n, t, x)
        u = stream.normals(k, num_paths, d)
        eps = _sample_innovations(fam, n, t, x, u)
        x = x + h * drift + sqrt_h * eps
        _check_finite(x, k + 1)
        paths[:, k + 1] = x
    return PathEnsemble(spec.name, grid, paths, stream.seed, stream.stream_id)


def simulate_coupled(
    spec: ChainSpec,
    excluded: ExcludedChain,
    num_paths: int,
    stream: RandomStream,
) -> tuple[PathEnsemble, PathEnsemble]:
    """Original and excluded chains driven by the same innovation draws.

    The excluded chain's innovation is the linear map
    Phi_n^-1((k+1)h) eps (never re-sampled), so restore(excluded path)
    reproduces the original path up to rounding.
    """
    if excluded.source is not spec and excluded.source.name != spec.name:
        raise InvalidParameter("excluded chain was not derived from this spec")
    grid = spec.grid
    n, h, d = grid.n, grid.h, spec.dim
    sqrt_h = math.sqrt(h)
    table = excluded.phi_n
    fam = spec.innovations
    paths = np.empty((num_paths, n + 1, d))
    paths_t = np.empty((num_paths, n + 1, d))
    x = np.tile(spec.x0, (num_paths, 1))
    xt = np.tile(spec.x0, (num_paths, 1))
    paths[:, 0] = x
    paths_t[:, 0] = xt
    for k in range(n):
        t = grid.time(k)
        u = stream.normals(k, num_paths, d)
        eps = _sample_innovations(fam, n, t, x, u)
        eps_t = eps @ table.inverse(k + 1).T
        bk = spec.b_n(t)
        x = x + h * (x @ bk.T + eval_rows(spec.m_n, t, x)) + sqrt_h * eps
        xt = xt + h * eval_rows(excluded.base.m_n, t, xt) + sqrt_h * eps_t
        _check_finite(x, k + 1)
        paths[:, k + 1] = x
        paths_t[:, k + 1] = xt
    return (
        PathEnsemble(spec.name, grid, paths, stream.seed, stream.stream_id),
        PathEnsemble(excluded.base.name, grid, paths_t, stream.seed, stream.stream_id),
    )


def coupling_residual(original: PathEnsemble, excluded: PathEnsemble, table) -> float:
    """max |Phi_n(kh) Xtilde(kh) - X(kh)| / (1 + max |X|), over paths and steps."""
    n = original.grid.n
    worst = 0.0
    for k in range(n + 1):
        restored = excluded.paths[:, k, :] @ table.value(k).T
        worst = max(worst, float(np.max(np.abs(restored - original.paths[:, k, :]))))
    scale = 1.0 + float(np.max(np.abs(original.paths)))
    return worst / scale


def simulate_diffusion_reference(
    model: DiffusionModel,
    fine_n: int,
    num_paths: int,
    stream: RandomStream,
) -> PathEnsemble:
    """Fine-grid Euler-Maruyama oracle for the diffusion itself.

    Gaussian increments come from the same counter-based stream
    (step index on the fine grid), so closed-form solutions evaluated
    with the matching discretized stochastic integral can be compared
    pathwise.
    """
    grid = TimeGrid(fine_n, model.horizon)
    h, d = grid.h, model.dim
    sqrt_h = math.sqrt(h)
    paths = np.empty((num_paths, fine_n + 1, d))
    x = np.tile(model.x0, (num_paths, 1))
    paths[:, 0] = x
    batch_sigma = is_batch_ok(model.sigma)
    for k in range(fine_n):
        t = grid.time(k)
        drift = x @ model.b(t).T + eval_rows(model.m, t, x)
        dw = sqrt_h * stream.normals(k, num_paths, d)
        if batch_sigma:
            s = np.asarray(model.sigma(t, x), dtype=float)
            if s.ndim == 2:
                s = np.broadcast_to(s, (num_paths, d, d))
            noise = np.einsum("pij,pj->pi", s, dw)
        else:
            noise = np.stack([np.asarray(model.sigma(t, xi), dtype=float) @ wi
                              for xi, wi in zip(x, dw)])
        x = x + h * drift + noise
        _check_finite(x, k + 1)
        paths[:, k + 1] = x
    return PathEnsemble(model.name, grid, paths, stream.seed, stream.stream_id)


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------

def ensemble_to_csv(ensemble: PathEnsemble, path) -> None:
    """Rows `path, k, t, x1..xd` with 17 significant digits."""
    d = ensemble.dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "k", "t"] + [f"x{i + 1}" for i in range(d)])
        for p in range(ensemble.num_paths):
            for k in range(ensemble.grid.n + 1):
                row = [str(p), str(k), "%.17g" % ensemble.grid.time(k)]
                row += ["%.17g" % v for v in ensemble.paths[p, k]]
                w.writerow(row)


def ensemble_to_binary(ensemble: PathEnsemble, path) -> None:
    """16-byte header (magic TDXE, version, d, n, num_paths) then
    little-endian float64 states in (path, step, component) order."""
    header = _HEADER.pack(
        _BINARY_MAGIC, _BINARY_VERSION, ensemble.dim, ensemble.grid.n, ensemble.num_paths
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(ensemble.paths, dtype="<f8").tobytes())


def read_ensemble_binary(path, horizon: float = 1.0) -> PathEnsemble:
    with open(path, "rb") as fh:
        magic, version, d, n, num_paths = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != _BINARY_MAGIC:
            raise InvalidParameter(f"{path} is not a TDXE ensemble file")
        if version != _BINARY_VERSION:
            raise InvalidParameter(f"unsupported TDXE version {version}")
        data = np.frombuffer(fh.read(), dtype="<f8").reshape(num_paths, n + 1, d)
    return PathEnsemble("imported", TimeGrid(n, horizon), data.astype(float), seed=0, stream_id=0)
