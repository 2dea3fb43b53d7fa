"""Simulation of the driving martingale M(t) = int_0^t Q^{1/2}(s) dW(s).

The driver is realized as a Brownian motion pushed through the square root of
a time-varying nuclear covariance Q(t) = m(t) * Q with a scalar modulation
0 < m(t) <= 1, so Q(t) <= Q holds by construction.  Increments live on a
fixed time grid: dM_k = Q^{1/2}(t_k) dW_k with dW_k ~ N(0, dt I).

Every path owns a counter-based RNG stream keyed by (seed, path_index), so
ensembles can be generated in independent chunks (or in parallel) and still
reproduce byte-identical draws.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .hilbert import NuclearCovariance, OmegaState, hs_norm

__all__ = [
    "TimeGrid",
    "CovarianceProcess",
    "MartingaleEnsemble",
    "sample_paths",
    "stochastic_integral",
    "ito_isometry_check",
    "dump_paths",
]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_L = T with L a power of two."""

    horizon: float
    n_steps: int

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        L = self.n_steps
        if L < 1 or (L & (L - 1)) != 0:
            raise ValueError(f"step count must be a power of two, got {L}")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    def index_of(self, t: float) -> int:
        """Grid index of a time that must sit on the grid."""
        k = round(t / self.dt)
        if not (0 <= k <= self.n_steps) or abs(k * self.dt - t) > 1e-9 * max(self.horizon, 1.0):
            raise ValueError(f"time {t} is not a grid point of {self}")
        return int(k)

    def coarsen(self) -> "TimeGrid":
        if self.n_steps < 2:
            raise ValueError("cannot coarsen a single-step grid")
        return TimeGrid(self.horizon, self.n_steps // 2)


class CovarianceProcess:
    """Q(t) = m(t) * Q with a dominating nuclear covariance Q.

    ``modulation`` is a scalar map with values in (0, 1]; the default is the
    exponentially relaxing profile m(t) = 0.6 + 0.4 exp(-t).
    """

    def __init__(self, base: NuclearCovariance, modulation: Optional[Callable[[float], float]] = None):
        self.base = base
        self.modulation = modulation if modulation is not None else (lambda t: 0.6 + 0.4 * np.exp(-t))

    @classmethod
    def constant(cls, base: NuclearCovariance) -> "CovarianceProcess":
        proc = cls(base, modulation=lambda t: 1.0)
        proc._constant = True
        return proc

    def modulation_at(self, t) -> np.ndarray:
        m = np.asarray([self.modulation(float(s)) for s in np.atleast_1d(t)], dtype=float)
        if np.any(m <= 0.0) or np.any(m > 1.0 + 1e-12):
            raise ValueError("modulation must take values in (0, 1]")
        return m if np.ndim(t) else m[0]

    def evaluate(self, t: float) -> np.ndarray:
        return self.modulation_at(t) * self.base.matrix

    def sqrt_at(self, t: float) -> np.ndarray:
        return np.sqrt(self.modulation_at(t)) * self.base.sqrt

    def trace_at(self, t: float) -> float:
        return float(self.modulation_at(t) * self.base.trace)

    @property
    def dim(self) -> int:
        return self.base.dim


class MartingaleEnsemble:
    """Increment arrays for n_paths sampled driver paths on a common grid.

    ``dw`` and ``dm`` are (P, L, n); ``sqrt_modulation`` holds the per-step
    scalars linking them: dm[:, k] = sqrt_modulation[k] * dw[:, k] @ base_sqrt.
    """

    def __init__(self, grid: TimeGrid, cov: CovarianceProcess, seed: int, path_offset: int,
                 dw: np.ndarray, dm: np.ndarray, sqrt_modulation: np.ndarray):
        self.grid = grid
        self.cov = cov
        self.seed = seed
        self.path_offset = path_offset
        self.dw = dw
        self.dm = dm
        self.sqrt_modulation = sqrt_modulation
        self._w_levels: Optional[np.ndarray] = None

    @property
    def n_paths(self) -> int:
        return self.dw.shape[0]

    @property
    def dim(self) -> int:
        return self.dw.shape[2]

    def qhalf_at(self, k: int) -> np.ndarray:
        return self.sqrt_modulation[k] * self.cov.base.sqrt

    def q_at(self, k: int) -> np.ndarray:
        return self.sqrt_modulation[k] ** 2 * self.cov.base.matrix

    def w_levels(self) -> np.ndarray:
        """Brownian levels W(t_k), shape (P, L+1, n); cached."""
        if self._w_levels is None:
            P, L, n = self.dw.shape
            levels = np.empty((P, L + 1, n))
            levels[:, 0] = 0.0
            np.cumsum(self.dw, axis=1, out=levels[:, 1:])
            self._w_levels = levels
        return self._w_levels

    def omega_at(self, k: int) -> OmegaState:
        return OmegaState(w=self.w_levels()[:, k], path_index=np.arange(self.path_offset, self.path_offset + self.n_paths))

    def terminal_value(self) -> np.ndarray:
        """M(T) per path, shape (P, n)."""
        return self.dm.sum(axis=1)


def _draw_increments(grid: TimeGrid, dim: int, n_paths: int, seed: int, path_offset: int) -> np.ndarray:
    """Per-path Philox streams keyed by (seed, path index); chunking-stable."""
    dw = np.empty((n_paths, grid.n_steps, dim))
    root = np.sqrt(grid.dt)
    for p in range(n_paths):
        key = np.array([seed & 0xFFFFFFFFFFFFFFFF, (path_offset + p) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
        gen = np.random.Generator(np.random.Philox(key=key))
        dw[p] = gen.standard_normal((grid.n_steps, dim)) * root
    return dw


def sample_paths(cov: CovarianceProcess, grid: Union[TimeGrid, np.ndarray], n_paths: int,
                 seed: int, path_offset: int = 0) -> MartingaleEnsemble:
    """Sample driver increments for ``n_paths`` paths on ``grid``."""
    if not isinstance(grid, TimeGrid):
        times = np.asarray(grid, dtype=float)
        if times.ndim != 1 or times.size < 2 or np.any(np.diff(times) <= 0):
            raise ValueError("grid times must be strictly increasing")
        horizon = float(times[-1] - times[0])
        grid = TimeGrid(horizon, times.size - 1)
        if not np.allclose(grid.times + times[0], times, atol=1e-12 * max(horizon, 1.0)):
            raise ValueError("only uniform grids are supported")
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    dw = _draw_increments(grid, cov.dim, n_paths, seed, path_offset)
    t_left = grid.times[:-1]
    sqrt_mod = np.sqrt(cov.modulation_at(t_left))
    dm = np.einsum("pkj,ji->pki", dw, cov.base.sqrt, optimize=True) * sqrt_mod[None, :, None]
    return MartingaleEnsemble(grid, cov, seed, path_offset, dw, dm, sqrt_mod)


def coarsen_ensemble(ens: MartingaleEnsemble) -> MartingaleEnsemble:
    """Aggregate increments onto the half-resolution grid.

    Brownian increments are summed pairwise and dM is rebuilt with the coarse
    grid's covariance snapshots, matching how a direct coarse sample is built.
    """
    grid = ens.grid.coarsen()
    P, L, n = ens.dw.shape
    dw = ens.dw.reshape(P, L // 2, 2, n).sum(axis=2)
    sqrt_mod = np.sqrt(ens.cov.modulation_at(grid.times[:-1]))
    dm = np.einsum("pkj,ji->pki", dw, ens.cov.base.sqrt, optimize=True) * sqrt_mod[None, :, None]
    return MartingaleEnsemble(grid, ens.cov, ens.seed, ens.path_offset, dw, dm, sqrt_mod)


def _integrand_steps(integrand, ens: MartingaleEnsemble):
    """Yield (k, phi_k) with phi_k of shape (n, n) or (P, n, n).

    An ndarray integrand is either one constant (n, n) matrix or a per-step
    stack (n_steps, n, n); path dependence requires a callable (or an object
    with ``evaluate``), which may return (P, n, n) per step.
    """
    n = ens.dim
    times = ens.grid.times
    if isinstance(integrand, np.ndarray) and integrand.ndim == 3 and \
            integrand.shape[0] != ens.grid.n_steps:
        raise ValueError(
            f"per-step integrand must have leading dimension {ens.grid.n_steps}, got {integrand.shape}")
    for k in range(ens.grid.n_steps):
        if isinstance(integrand, np.ndarray):
            phi = integrand[k] if integrand.ndim == 3 else integrand
        elif callable(integrand):
            phi = integrand(float(times[k]), ens.omega_at(k))
        else:
            phi = integrand.evaluate(float(times[k]), ens.omega_at(k))
        phi = np.asarray(phi, dtype=float)
        if phi.shape[-2:] != (n, n):
            raise ValueError(f"integrand at step {k} has shape {phi.shape}, expected trailing ({n}, {n})")
        yield k, phi


def stochastic_integral(integrand, ens: MartingaleEnsemble) -> np.ndarray:
    """Left-endpoint integral sum_k Phi(t_k) dM_k per path, shape (P, n)."""
    out = np.zeros((ens.n_paths, ens.dim))
    for k, phi in _integrand_steps(integrand, ens):
        if phi.ndim == 2:
            out += ens.dm[:, k] @ phi.T
        else:
            out += np.einsum("pij,pj->pi", phi, ens.dm[:, k], optimize=True)
    return out


def ito_isometry_check(integrand, cov: CovarianceProcess, grid: TimeGrid, n_paths: int, seed: int) -> dict:
    """Compare E|int Phi dM|^2 against the isometry quadrature.

    lhs is the Monte Carlo mean of the squared integral; rhs accumulates
    E ||Phi(t_k) Q^{1/2}(t_k)||_HS^2 dt over the grid (exact for deterministic
    integrands).  Reports the relative error and the lhs standard error.
    """
    ens = sample_paths(cov, grid, n_paths, seed)
    integral = np.zeros((n_paths, cov.dim))
    rhs = 0.0
    dt = grid.dt
    for k, phi in _integrand_steps(integrand, ens):
        qh = ens.qhalf_at(k)
        if phi.ndim == 2:
            integral += ens.dm[:, k] @ phi.T
            rhs += hs_norm(phi @ qh) ** 2 * dt
        else:
            integral += np.einsum("pij,pj->pi", phi, ens.dm[:, k], optimize=True)
            rhs += float(np.mean(hs_norm(phi @ qh) ** 2)) * dt
    sq = np.sum(integral * integral, axis=1)
    lhs = float(np.mean(sq))
    se = float(np.std(sq, ddof=1) / np.sqrt(n_paths))
    rel_err = abs(lhs - rhs) / max(abs(rhs), 1e-300)
    return {
        "lhs": lhs,
        "rhs": float(rhs),
        "rel_err": float(rel_err),
        "se_lhs": se,
        "within_3se": bool(abs(lhs - rhs) <= 3.0 * se),
        "n_paths": n_paths,
    }


def dump_paths(ens: MartingaleEnsemble, path: str, fmt: str = "csv") -> None:
    """Write increments to a debugging dump (csv or npz)."""
    if fmt == "npz":
        np.savez_compressed(path, dw=ens.dw, dm=ens.dm, times=ens.grid.times)
        return
    if fmt != "csv":
        raise ValueError(f"unknown dump format {fmt!r}")
    n = ens.dim
    times = ens.grid.times
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "k", "t"] + [f"dw_{i}" for i in range(n)] + [f"dm_{i}" for i in range(n)])
        for p in range(ens.n_paths):
            for k in range(ens.grid.n_steps):
                row = [p + ens.path_offset, k, repr(float(times[k]))]
                row += [repr(float(v)) for v in ens.dw[p, k]]
                row += [repr(float(v)) for v in ens.dm[p, k]]
                writer.writerow(row)
