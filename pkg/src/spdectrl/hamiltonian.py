"""Cost functional and Hamiltonian for the control problem.

The cost is linear in the state,

    J(u) = E [ int_0^T <ell(t, u), x(t)> dt + <G, x(T)> ],

and the Hamiltonian couples state, costate y, and the composite martingale
argument z_q = z Q^{1/2}:

    H(t, x, v, y, z_q) = -<ell(t,v), x> - a(t,v) <x, y> - <b(t,v), y>
                         - <sigma_tilde(t, x, v) Q^{1/2}, z_q>_HS

with sigma_tilde(t, x, v) = <sigma(t,v), x> I + g(t,v).  Expanding the last
pairing shows H is affine in x with x-gradient

    grad_x H = -ell(t,v) - a(t,v) y - <Q^{1/2}, z_q>_HS sigma(t,v).

All entry points broadcast over a batch of paths.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .forward import ForwardEnsemble
from .hilbert import OmegaState, hs_inner

__all__ = [
    "HamiltonianArgs",
    "cost",
    "sigma_tilde",
    "b_operator",
    "hamiltonian",
    "grad_x_hamiltonian",
    "hamiltonian_difference",
]


def cost(ens: ForwardEnsemble, coeffs=None) -> dict:
    """Monte Carlo cost of a stored ensemble (left-endpoint running term)."""
    coeffs = coeffs if coeffs is not None else ens.coeffs
    grid = ens.grid
    dt = grid.dt
    times = grid.times
    per_path = np.zeros(ens.n_paths)
    for k in range(grid.n_steps):
        v = ens.control.value_at_step(k)
        ell_val = np.asarray(coeffs.ell(float(times[k]), v), dtype=float)
        x_k = ens.states[:, k]
        per_path += dt * (x_k @ ell_val if ell_val.ndim == 1 else np.sum(x_k * ell_val, axis=1))
    per_path += ens.states[:, -1] @ coeffs.terminal_weight
    j = float(np.mean(per_path))
    se = float(np.std(per_path, ddof=1) / np.sqrt(per_path.size)) if per_path.size > 1 else 0.0
    return {"J": j, "se": se, "per_path": per_path}


def _pair_vec(vec, batch):
    """<vec, batch> with vec (n,) or (P,n) against batch (n,) or (P,n)."""
    vec = np.asarray(vec, dtype=float)
    batch = np.asarray(batch, dtype=float)
    if vec.ndim == 1 and batch.ndim == 1:
        return float(vec @ batch)
    return np.sum(vec * batch, axis=-1)


def sigma_tilde(t: float, x, v, coeffs, om: Optional[OmegaState] = None):
    """<sigma(t,v), x> I + g(t,v), shape (n, n) or (P, n, n)."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    s = np.asarray(coeffs.sigma(t, v, om), dtype=float)
    g = np.asarray(coeffs.g(t, v, om), dtype=float)
    sx = _pair_vec(s, x)
    eye = np.eye(n)
    if np.ndim(sx) == 0 and g.ndim == 2:
        return sx * eye + g
    sx = np.atleast_1d(sx)
    out = sx[:, None, None] * eye[None, :, :]
    return out + (g if g.ndim == 3 else g[None, :, :])


def b_operator(t: float, v, z_q, qhalf: np.ndarray, coeffs, om: Optional[OmegaState] = None):
    """B(t,v) z_q = <Q^{1/2}, z_q>_HS sigma(t,v), shape (n,) or (P, n)."""
    pair = hs_inner(qhalf, np.asarray(z_q, dtype=float))
    s = np.asarray(coeffs.sigma(t, v, om), dtype=float)
    if np.ndim(pair) == 0 and s.ndim == 1:
        return float(pair) * s
    pair = np.atleast_1d(pair)
    return pair[:, None] * (s if s.ndim == 2 else s[None, :])


@dataclass
class HamiltonianArgs:
    t: float
    x: np.ndarray
    v: np.ndarray
    y: np.ndarray
    z_q: np.ndarray


def hamiltonian(args: HamiltonianArgs, coeffs, qhalf: np.ndarray, om: Optional[OmegaState] = None):
    """H(t, x, v, y, z_q); scalar for single inputs, (P,) for batches."""
    t, x, v, y, z_q = args.t, np.asarray(args.x, float), args.v, np.asarray(args.y, float), np.asarray(args.z_q, float)
    ell_val = coeffs.ell(t, v)
    a_val = np.asarray(coeffs.a(t, v, om), dtype=float)
    b_val = coeffs.b(t, v, om)
    s_val = coeffs.sigma(t, v, om)
    g_val = np.asarray(coeffs.g(t, v, om), dtype=float)
    q_pair = hs_inner(qhalf, z_q)
    g_pair = hs_inner(g_val @ qhalf if g_val.ndim == 2 else np.einsum("pij,jk->pik", g_val, qhalf, optimize=True), z_q)
    out = -_pair_vec(ell_val, x) - a_val * _pair_vec(x, y) - _pair_vec(b_val, y) \
        - _pair_vec(s_val, x) * q_pair - g_pair
    return float(out) if np.ndim(out) == 0 else out


def grad_x_hamiltonian(t: float, v, y, z_q, coeffs, qhalf: np.ndarray,
                       om: Optional[OmegaState] = None):
    """x-gradient of H: -ell - a y - <Q^{1/2}, z_q>_HS sigma; (n,) or (P, n)."""
    y = np.asarray(y, dtype=float)
    ell_val = np.asarray(coeffs.ell(t, v), dtype=float)
    a_val = np.asarray(coeffs.a(t, v, om), dtype=float)
    ay = a_val * y if (a_val.ndim == 0 or y.ndim == 1) else a_val[:, None] * y
    out = -ay - b_operator(t, v, z_q, qhalf, coeffs, om)
    return out - ell_val if ell_val.ndim <= out.ndim else out[None, :] - ell_val


def hamiltonian_difference(t: float, x, v_new, v_base, y, z_q, coeffs, qhalf: np.ndarray,
                           om: Optional[OmegaState] = None):
    """H(t, x, v_new, y, z_q) - H(t, x, v_base, y, z_q) via coefficient differences.

    Computing from differences makes the result depend only on how the
    coefficients change with the control: common additive parts cancel exactly
    rather than through floating-point subtraction of two large values.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    z_q = np.asarray(z_q, dtype=float)
    d_ell = np.asarray(coeffs.ell(t, v_new), dtype=float) - np.asarray(coeffs.ell(t, v_base), dtype=float)
    d_a = np.asarray(coeffs.a(t, v_new, om), dtype=float) - np.asarray(coeffs.a(t, v_base, om), dtype=float)
    d_b = np.asarray(coeffs.b(t, v_new, om), dtype=float) - np.asarray(coeffs.b(t, v_base, om), dtype=float)
    d_s = np.asarray(coeffs.sigma(t, v_new, om), dtype=float) - np.asarray(coeffs.sigma(t, v_base, om), dtype=float)
    d_g = np.asarray(coeffs.g(t, v_new, om), dtype=float) - np.asarray(coeffs.g(t, v_base, om), dtype=float)
    q_pair = hs_inner(qhalf, z_q)
    dg_qh = d_g @ qhalf if d_g.ndim == 2 else np.einsum("pij,jk->pik", d_g, qhalf, optimize=True)
    out = -_pair_vec(d_ell, x) - d_a * _pair_vec(x, y) - _pair_vec(d_b, y) \
        - _pair_vec(d_s, x) * q_pair - hs_inner(dg_qh, z_q)
    return float(out) if np.ndim(out) == 0 else out
