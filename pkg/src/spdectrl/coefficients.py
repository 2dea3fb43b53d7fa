"""Coefficient families for the controlled dynamics and their declared bounds.

Two flavors share one duck-typed interface:

* ``AffineCoefficients`` - structured families whose scalar parts are affine
  in the control and carry simple time profiles, optionally modulated by a
  bounded random factor F(t) = tanh(<weights, W(t)>).  These can be compiled
  to per-step tables and handed to the fast backends.
* ``CallableCoefficients`` - arbitrary user callables (t, v, om) with
  explicitly declared bounds; always integrated on the generic path.

Controls are piecewise-constant selections out of a finite set U, stored as
index arrays so every control value is an element of U by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .hilbert import OmegaState, hs_norm
from .noise import CovarianceProcess, TimeGrid

__all__ = [
    "TimeProfile",
    "ScalarForm",
    "FactorSpec",
    "CoefficientBounds",
    "AffineCoefficients",
    "CallableCoefficients",
    "ControlProcess",
    "NonAdaptedControlError",
    "verify_coefficient_bounds",
]


@dataclass(frozen=True)
class TimeProfile:
    """Scalar time modulation: constant, sinusoidal, or piecewise steps."""

    kind: str = "const"
    amplitude: float = 0.0
    period: float = 1.0
    phase: float = 0.0
    steps: Optional[tuple] = None

    def __call__(self, t: float) -> float:
        if self.kind == "const":
            return 1.0
        if self.kind == "sin":
            return 1.0 + self.amplitude * float(np.sin(2.0 * np.pi * t / self.period + self.phase))
        if self.kind == "steps":
            vals = self.steps
            j = min(int(t / self.period * len(vals)), len(vals) - 1)
            return float(vals[j])
        raise ValueError(f"unknown profile kind {self.kind!r}")

    def sup(self) -> float:
        if self.kind == "const":
            return 1.0
        if self.kind == "sin":
            return 1.0 + abs(self.amplitude)
        if self.kind == "steps":
            return float(np.max(np.abs(self.steps)))
        raise ValueError(f"unknown profile kind {self.kind!r}")


@dataclass(frozen=True)
class ScalarForm:
    """s(t, v) = c0 * p0(t) + <cv, v> * pv(t)."""

    c0: float = 0.0
    cv: tuple = ()
    p0: TimeProfile = TimeProfile()
    pv: TimeProfile = TimeProfile()

    def value(self, t: float, v: np.ndarray):
        v = np.asarray(v, dtype=float)
        lin = v @ np.asarray(self.cv, dtype=float) if len(self.cv) else np.zeros(v.shape[:-1])
        return self.c0 * self.p0(t) + lin * self.pv(t)

    def bound(self, control_set: np.ndarray) -> float:
        control_set = np.asarray(control_set, dtype=float)
        lin = control_set @ np.asarray(self.cv, dtype=float) if len(self.cv) else np.zeros(len(control_set))
        return abs(self.c0) * self.p0.sup() + float(np.max(np.abs(lin))) * self.pv.sup()


@dataclass(frozen=True)
class FactorSpec:
    """Bounded random modulation F(t) = tanh(<weights, W(t)>), |F| < 1.

    Each coefficient family i gets multiplied by (1 + amp_i * F); amplitudes
    must satisfy |amp| < 1 so signs never flip and bounds stay finite.
    """

    weights: tuple
    amp_a: float = 0.0
    amp_b: float = 0.0
    amp_sigma: float = 0.0
    amp_g: float = 0.0

    def values(self, om: OmegaState) -> np.ndarray:
        w = np.asarray(self.weights, dtype=float)
        return np.tanh(np.asarray(om.w) @ w)


@dataclass(frozen=True)
class CoefficientBounds:
    """Declared sup bounds: |a|, |b|_K, |sigma|_K, and ||g Q^{1/2}||_HS / ||Q^{1/2}||_HS."""

    a: float
    b: float
    sigma: float
    g: float


def _times_dir(scale, direction: np.ndarray) -> np.ndarray:
    scale = np.asarray(scale, dtype=float)
    if scale.ndim == 0:
        return float(scale) * direction
    return scale[:, None] * direction[None, :]


class AffineCoefficients:
    """Structured coefficient family; see module docstring."""

    kernelizable = True

    def __init__(self, n: int, m: int, *,
                 a_form: ScalarForm,
                 b_form: ScalarForm, b_dir: np.ndarray,
                 sigma_form: ScalarForm, sigma_dir: np.ndarray,
                 g_form: ScalarForm, g_pattern: np.ndarray,
                 ell_form: ScalarForm, ell_dir: np.ndarray,
                 terminal_weight: np.ndarray, x0: np.ndarray,
                 factor: Optional[FactorSpec] = None):
        self.n, self.m = n, m
        self.a_form = a_form
        self.b_form, self.b_dir = b_form, np.asarray(b_dir, float)
        self.sigma_form, self.sigma_dir = sigma_form, np.asarray(sigma_dir, float)
        self.g_form, self.g_pattern = g_form, np.asarray(g_pattern, float)
        self.ell_form, self.ell_dir = ell_form, np.asarray(ell_dir, float)
        self.terminal_weight = np.asarray(terminal_weight, float)
        self.x0 = np.asarray(x0, float)
        self.factor = factor
        for name, arr, shape in [("b_dir", self.b_dir, (n,)), ("sigma_dir", self.sigma_dir, (n,)),
                                 ("g_pattern", self.g_pattern, (n, n)), ("ell_dir", self.ell_dir, (n,)),
                                 ("terminal_weight", self.terminal_weight, (n,)), ("x0", self.x0, (n,))]:
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
        if factor is not None:
            if len(factor.weights) != n:
                raise ValueError("factor weights must match state dimension")
            for amp in (factor.amp_a, factor.amp_b, factor.amp_sigma, factor.amp_g):
                if abs(amp) >= 1.0:
                    raise ValueError("factor amplitudes must satisfy |amp| < 1")

    @property
    def omega_dependent(self) -> bool:
        if self.factor is None:
            return False
        f = self.factor
        return any(amp != 0.0 for amp in (f.amp_a, f.amp_b, f.amp_sigma, f.amp_g))

    def factor_values(self, om: Optional[OmegaState]):
        if self.factor is None or om is None:
            return None
        return self.factor.values(om)

    def _modulate(self, val, amp: float, om: Optional[OmegaState]):
        if self.factor is None or amp == 0.0:
            return val
        if om is None:
            raise ValueError("omega-dependent coefficient evaluated without an OmegaState")
        return val * (1.0 + amp * self.factor.values(om))

    def a(self, t: float, v, om: Optional[OmegaState] = None):
        amp = self.factor.amp_a if self.factor else 0.0
        return self._modulate(self.a_form.value(t, v), amp, om)

    def b(self, t: float, v, om: Optional[OmegaState] = None):
        amp = self.factor.amp_b if self.factor else 0.0
        return _times_dir(self._modulate(self.b_form.value(t, v), amp, om), self.b_dir)

    def sigma(self, t: float, v, om: Optional[OmegaState] = None):
        amp = self.factor.amp_sigma if self.factor else 0.0
        return _times_dir(self._modulate(self.sigma_form.value(t, v), amp, om), self.sigma_dir)

    def g(self, t: float, v, om: Optional[OmegaState] = None):
        amp = self.factor.amp_g if self.factor else 0.0
        scale = np.asarray(self._modulate(self.g_form.value(t, v), amp, om), dtype=float)
        if scale.ndim == 0:
            return float(scale) * self.g_pattern
        return scale[:, None, None] * self.g_pattern[None, :, :]

    def ell(self, t: float, v):
        # running cost weight is deliberately deterministic in (t, v)
        return _times_dir(self.ell_form.value(t, v), self.ell_dir)

    def bounds(self, control_set: np.ndarray, cov: CovarianceProcess) -> CoefficientBounds:
        f = self.factor
        ga = 1.0 + abs(f.amp_a) if f else 1.0
        gb = 1.0 + abs(f.amp_b) if f else 1.0
        gs = 1.0 + abs(f.amp_sigma) if f else 1.0
        gg = 1.0 + abs(f.amp_g) if f else 1.0
        qh = cov.base.sqrt
        qh_norm = max(float(hs_norm(qh)), 1e-300)
        return CoefficientBounds(
            a=self.a_form.bound(control_set) * ga,
            b=self.b_form.bound(control_set) * gb * float(np.linalg.norm(self.b_dir)),
            sigma=self.sigma_form.bound(control_set) * gs * float(np.linalg.norm(self.sigma_dir)),
            g=self.g_form.bound(control_set) * gg * float(hs_norm(self.g_pattern @ qh)) / qh_norm,
        )


class CallableCoefficients:
    """Arbitrary coefficient callables with explicitly declared bounds."""

    kernelizable = False

    def __init__(self, n: int, m: int, *, a, b, sigma, g, ell,
                 terminal_weight, x0, declared_bounds: CoefficientBounds,
                 factor_values: Optional[Callable[[OmegaState], np.ndarray]] = None,
                 omega_dependent: bool = True):
        self.n, self.m = n, m
        self._a, self._b, self._sigma, self._g, self._ell = a, b, sigma, g, ell
        self.terminal_weight = np.asarray(terminal_weight, float)
        self.x0 = np.asarray(x0, float)
        self.declared_bounds = declared_bounds
        self._factor_values = factor_values
        self.omega_dependent = omega_dependent

    def factor_values(self, om: Optional[OmegaState]):
        if self._factor_values is None or om is None:
            return None
        return self._factor_values(om)

    def a(self, t, v, om=None):
        return self._a(t, v, om)

    def b(self, t, v, om=None):
        return np.asarray(self._b(t, v, om), float)

    def sigma(self, t, v, om=None):
        return np.asarray(self._sigma(t, v, om), float)

    def g(self, t, v, om=None):
        return np.asarray(self._g(t, v, om), float)

    def ell(self, t, v):
        return np.asarray(self._ell(t, v), float)

    def bounds(self, control_set=None, cov=None) -> CoefficientBounds:
        return self.declared_bounds


class NonAdaptedControlError(ValueError):
    pass


class ControlProcess:
    """Piecewise-constant control taking values in a finite set U.

    ``step_indices`` selects a row of ``control_set`` for each grid step.  A
    spiked control may carry per-path index columns together with the step at
    which each column was decided, so adaptedness stays checkable.
    """

    def __init__(self, grid: TimeGrid, control_set: np.ndarray, step_indices: np.ndarray,
                 per_path: Optional[np.ndarray] = None, decided_at: Optional[np.ndarray] = None,
                 n_intervals: Optional[int] = None):
        self.grid = grid
        self.control_set = np.atleast_2d(np.asarray(control_set, dtype=float))
        self.step_indices = np.asarray(step_indices, dtype=np.int64)
        self.per_path = per_path if per_path is None else np.asarray(per_path, dtype=np.int64)
        self.decided_at = decided_at if decided_at is None else np.asarray(decided_at, dtype=np.int64)
        self.n_intervals = n_intervals
        L, nU = grid.n_steps, len(self.control_set)
        if self.step_indices.shape != (L,):
            raise ValueError(f"step_indices must have shape ({L},)")
        if np.any(self.step_indices < 0) or np.any(self.step_indices >= nU):
            raise ValueError("control index out of range of the control set")
        if self.per_path is not None:
            if self.per_path.ndim != 2 or self.per_path.shape[1] != L:
                raise ValueError("per-path indices must have shape (P, L)")
            if np.any(self.per_path < 0) or np.any(self.per_path >= nU):
                raise ValueError("control index out of range of the control set")
            if self.decided_at is None:
                raise ValueError("per-path controls must declare decision steps")

    @property
    def n_values(self) -> int:
        return len(self.control_set)

    @property
    def control_dim(self) -> int:
        return self.control_set.shape[1]

    @property
    def deterministic(self) -> bool:
        return self.per_path is None

    def check_adapted(self):
        if self.per_path is not None:
            late = np.flatnonzero(self.decided_at > np.arange(self.grid.n_steps))
            if late.size:
                raise NonAdaptedControlError(
                    f"control column {late[0]} uses information from step {self.decided_at[late[0]]}")

    def value_at_step(self, k: int):
        if self.per_path is None:
            return self.control_set[self.step_indices[k]]
        return self.control_set[self.per_path[:, k]]

    def index_at_step(self, k: int):
        if self.per_path is None:
            return int(self.step_indices[k])
        return self.per_path[:, k]

    @classmethod
    def piecewise(cls, grid: TimeGrid, control_set, interval_indices) -> "ControlProcess":
        interval_indices = np.asarray(interval_indices, dtype=np.int64)
        n_int = interval_indices.size
        if grid.n_steps % n_int != 0:
            raise ValueError(f"{n_int} intervals do not divide {grid.n_steps} steps")
        reps = grid.n_steps // n_int
        return cls(grid, control_set, np.repeat(interval_indices, reps), n_intervals=n_int)

    @classmethod
    def constant(cls, grid: TimeGrid, control_set, index: int = 0) -> "ControlProcess":
        return cls(grid, control_set, np.full(grid.n_steps, index, dtype=np.int64), n_intervals=1)


def verify_coefficient_bounds(coeffs, control_set, cov: CovarianceProcess, horizon: float,
                              n_samples: int = 200, seed: int = 0) -> dict:
    """Spot-check the declared sup bounds on sampled (t, omega, u)."""
    rng = np.random.default_rng(seed)
    bounds = coeffs.bounds(control_set, cov)
    control_set = np.atleast_2d(np.asarray(control_set, float))
    qh = cov.base.sqrt
    qh_norm = max(float(hs_norm(qh)), 1e-300)
    worst = {"a": -np.inf, "b": -np.inf, "sigma": -np.inf, "g": -np.inf}
    n = coeffs.n
    for _ in range(n_samples):
        t = float(rng.uniform(0.0, horizon))
        u = control_set[rng.integers(len(control_set))]
        om = OmegaState(w=rng.standard_normal(n) * np.sqrt(max(t, 1e-12)))
        worst["a"] = max(worst["a"], abs(float(coeffs.a(t, u, om))) - bounds.a)
        worst["b"] = max(worst["b"], float(np.linalg.norm(coeffs.b(t, u, om))) - bounds.b)
        worst["sigma"] = max(worst["sigma"], float(np.linalg.norm(coeffs.sigma(t, u, om))) - bounds.sigma)
        worst["g"] = max(worst["g"], float(hs_norm(coeffs.g(t, u, om) @ qh)) / qh_norm - bounds.g)
    margin = max(worst.values())
    return {"passed": bool(margin <= 1e-10), "worst_margins": worst, "n_samples": n_samples}
