"""Finite-dimensional realization of the V ⊂ K ⊂ V' norm chain.

Everything downstream works on R^n equipped with three weighted norms built
from a single weight vector ``nu`` (entries >= 1):

    |y|_V^2  = sum_i nu_i y_i^2
    |y|_K^2  = sum_i y_i^2
    |y|_V'^2 = sum_i y_i^2 / nu_i

so |y|_V' <= |y|_K <= |y|_V holds pointwise.  Unbounded operators are
represented by matrix families t -> A(t) whose dissipativity and boundedness
constants are *declared* and then spot-checked by sampling, never assumed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

__all__ = [
    "GelfandTriple",
    "OmegaState",
    "OperatorFamily",
    "NuclearCovariance",
    "hs_inner",
    "hs_norm",
    "verify_coercivity",
    "verify_operator_bound",
]


@dataclass(frozen=True)
class GelfandTriple:
    """Weight vector and the three norms it induces."""

    nu: np.ndarray

    def __post_init__(self):
        nu = np.asarray(self.nu, dtype=float)
        if nu.ndim != 1 or nu.size == 0:
            raise ValueError("weight vector must be a nonempty 1-d array")
        if np.any(nu < 1.0):
            raise ValueError("weights must satisfy nu_i >= 1")
        object.__setattr__(self, "nu", nu)

    @property
    def dim(self) -> int:
        return self.nu.size

    def k_inner(self, a, b):
        a, b = np.asarray(a, float), np.asarray(b, float)
        self._check(a), self._check(b)
        return np.sum(a * b, axis=-1)

    def k_norm(self, y):
        return np.sqrt(self.k_inner(y, y))

    def v_inner(self, a, b):
        a, b = np.asarray(a, float), np.asarray(b, float)
        self._check(a), self._check(b)
        return np.sum(self.nu * a * b, axis=-1)

    def v_norm(self, y):
        return np.sqrt(self.v_inner(y, y))

    def dual_inner(self, a, b):
        a, b = np.asarray(a, float), np.asarray(b, float)
        self._check(a), self._check(b)
        return np.sum(a * b / self.nu, axis=-1)

    def dual_norm(self, y):
        return np.sqrt(self.dual_inner(y, y))

    def _check(self, y):
        if y.shape[-1] != self.dim:
            raise ValueError(f"vector of dim {y.shape[-1]} does not match triple dim {self.dim}")


@dataclass
class OmegaState:
    """Per-path random environment handed to operator/coefficient callables.

    ``w`` is the driving Brownian level W(t) at the current (left) grid time,
    shaped (n,) for a single path or (P, n) for a batch, so coefficient maps
    evaluated with it are predictable by construction.
    """

    w: np.ndarray
    path_index: Optional[np.ndarray] = None

    @staticmethod
    def zeros(n: int, n_paths: Optional[int] = None) -> "OmegaState":
        shape = (n,) if n_paths is None else (n_paths, n)
        return OmegaState(w=np.zeros(shape))


@dataclass
class OperatorFamily:
    """Time-indexed matrix family t -> A(t) with declared energy constants.

    ``alpha`` and ``lam`` are the declared coercivity constants in
    2<A y, y> + alpha |y|_V^2 <= lam |y|_K^2, and ``k1`` bounds the V -> V'
    operator norm.  ``evaluate`` accepts an optional OmegaState so random
    families fit the same interface; the bundled kinds are deterministic.
    """

    evaluate: Callable[..., np.ndarray]
    alpha: float
    lam: float
    k1: float
    horizon: float = 1.0
    time_dependent: bool = True
    omega_dependent: bool = False

    def __call__(self, t: float, om: Optional[OmegaState] = None) -> np.ndarray:
        if self.omega_dependent:
            return np.asarray(self.evaluate(t, om), dtype=float)
        return np.asarray(self.evaluate(t), dtype=float)


def dissipative_diagonal_family(
    triple: GelfandTriple,
    strength: float = 1.0,
    wobble: float = 0.0,
    horizon: float = 1.0,
) -> OperatorFamily:
    """A(t) = -strength * (1 + wobble*sin(2 pi t / horizon)) * diag(nu).

    Requires 0 <= wobble <= 0.5 so the modulation stays in [0.5, 1.5] and the
    declared constants below are valid:  with m(t) >= 1 - wobble,

        2<A y, y> = -2 s m(t) |y|_V^2 <= -2 s (1 - wobble) |y|_V^2,

    so alpha = s (1 - wobble) leaves 2<Ay,y> + alpha|y|_V^2 <= 0 <= lam |y|_K^2,
    and |A(t) y|_V' = s m(t) |y|_V <= s (1 + wobble) |y|_V gives k1.
    """
    if strength <= 0:
        raise ValueError("strength must be positive")
    if not 0.0 <= wobble <= 0.5:
        raise ValueError("wobble must lie in [0, 0.5]")
    nu = triple.nu

    def evaluate(t: float) -> np.ndarray:
        m = 1.0 + wobble * np.sin(2.0 * np.pi * t / horizon)
        return np.diag(-strength * m * nu)

    return OperatorFamily(
        evaluate=evaluate,
        alpha=strength * (1.0 - wobble),
        lam=0.5,
        k1=strength * (1.0 + wobble),
        horizon=horizon,
        time_dependent=wobble != 0.0,
    )


class NuclearCovariance:
    """Symmetric PSD matrix with a cached square root.

    The square root comes from an eigendecomposition with negative eigenvalues
    clamped to zero, so nearly-PSD inputs (roundoff) are accepted; anything
    with an eigenvalue below ``-tol`` is rejected.
    """

    def __init__(self, matrix: np.ndarray, tol: float = 1e-10):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError("covariance must be a square matrix")
        if not np.allclose(matrix, matrix.T, atol=1e-12, rtol=0.0):
            raise ValueError("covariance must be symmetric")
        matrix = 0.5 * (matrix + matrix.T)
        eigval, eigvec = np.linalg.eigh(matrix)
        scale = max(float(np.max(np.abs(eigval))), 1.0)
        if np.min(eigval) < -tol * scale:
            raise ValueError(f"covariance has negative eigenvalue {np.min(eigval):.3e}")
        eigval = np.clip(eigval, 0.0, None)
        self.matrix = (eigvec * eigval) @ eigvec.T
        self.matrix = 0.5 * (self.matrix + self.matrix.T)
        self.sqrt = (eigvec * np.sqrt(eigval)) @ eigvec.T
        self.sqrt = 0.5 * (self.sqrt + self.sqrt.T)
        self._eigval = eigval
        self._eigvec = eigvec

    @classmethod
    def from_spectrum(cls, spectrum: np.ndarray) -> "NuclearCovariance":
        spectrum = np.asarray(spectrum, dtype=float)
        if spectrum.ndim != 1:
            raise ValueError("spectrum must be 1-d")
        if np.any(spectrum < 0):
            raise ValueError("spectrum must be nonnegative")
        return cls(np.diag(spectrum))

    @classmethod
    def dyadic(cls, n: int) -> "NuclearCovariance":
        """Default spectrum q_i = 2^-i, i = 1..n."""
        return cls.from_spectrum(0.5 ** np.arange(1, n + 1))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def trace(self) -> float:
        return float(np.trace(self.matrix))

    def pinv_sqrt(self, tol: float = 1e-12) -> np.ndarray:
        """Pseudo-inverse of the square root (zero on the null space)."""
        eigval, eigvec = self._eigval, self._eigvec
        cut = tol * max(float(np.max(eigval)), 1e-300)
        inv = np.where(eigval > cut, 1.0 / np.sqrt(np.where(eigval > cut, eigval, 1.0)), 0.0)
        return (eigvec * inv) @ eigvec.T


def hs_inner(a: np.ndarray, b: np.ndarray) -> float:
    """Hilbert-Schmidt (Frobenius) inner product of two matrices."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"matrix shapes {a.shape} and {b.shape} do not match")
    return np.sum(a * b, axis=(-2, -1))


def hs_norm(a: np.ndarray):
    return np.sqrt(hs_inner(a, a))


def _sample_points(family: OperatorFamily, triple: GelfandTriple, n_samples: int, seed: int):
    rng = np.random.default_rng(seed)
    n = triple.dim
    for _ in range(n_samples):
        t = float(rng.uniform(0.0, family.horizon))
        y = rng.standard_normal(n)
        y /= max(np.linalg.norm(y), 1e-300)
        om = OmegaState(w=rng.standard_normal(n) * np.sqrt(max(t, 1e-12)))
        yield t, om, y


def verify_coercivity(family: OperatorFamily, triple: GelfandTriple, n_samples: int = 200, seed: int = 0) -> dict:
    """Spot-check 2<A(t)y, y> + alpha |y|_V^2 <= lam |y|_K^2 on random samples.

    Returns a report with the worst margin (max of lhs - rhs; negative means
    the inequality held everywhere) and the offending sample if any.
    """
    worst = -np.inf
    worst_at = None
    for t, om, y in _sample_points(family, triple, n_samples, seed):
        a_mat = family(t, om)
        lhs = 2.0 * float(y @ (a_mat @ y)) + family.alpha * float(triple.v_norm(y) ** 2)
        rhs = family.lam * float(triple.k_norm(y) ** 2)
        margin = lhs - rhs
        if margin > worst:
            worst, worst_at = margin, t
    return {"passed": bool(worst <= 1e-10), "worst_margin": float(worst), "worst_t": worst_at, "n_samples": n_samples}


def verify_operator_bound(family: OperatorFamily, triple: GelfandTriple, n_samples: int = 200, seed: int = 0) -> dict:
    """Spot-check |A(t)y|_V' <= k1 |y|_V on random samples."""
    worst = -np.inf
    worst_at = None
    for t, om, y in _sample_points(family, triple, n_samples, seed):
        a_mat = family(t, om)
        margin = float(triple.dual_norm(a_mat @ y)) - family.k1 * float(triple.v_norm(y))
        if margin > worst:
            worst, worst_at = margin, t
    return {"passed": bool(worst <= 1e-10), "worst_margin": float(worst), "worst_t": worst_at, "n_samples": n_samples}
