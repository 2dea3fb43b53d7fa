"""Pure-numpy implementation of the hot forward-integration kernel.

This is the fallback backend: vectorized across paths with a Python loop
over time steps.  The compiled backend in ``_ckernels`` implements exactly
the same recursion; agreement between the two is covered by tests.

Step recursion (tables built per step k, left-endpoint evaluation):

    F_k   = tanh(<fac_w, W(t_k)>)                    (optional factor)
    drift = a_k (1 + amp_a F) x + b_k (1 + amp_b F)
    diff  = <s_k (1 + amp_s F), x> dM_k + (1 + amp_g F) g_k dM_k
    rhs   = x + dt * drift + diff
    x'    = Minv_k rhs            (semi-implicit)
          = rhs + dt * A_k x      (explicit)

with running cost accumulated as dt * <ell_k, x> before the update and the
terminal weight added at the end.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

BACKEND_NAME = "python"


def forward_tables(
    mats: np.ndarray,
    scheme_implicit: bool,
    x0: np.ndarray,
    a_tab: np.ndarray,
    b_tab: np.ndarray,
    s_tab: np.ndarray,
    g_tab: np.ndarray,
    ell_tab: np.ndarray,
    g_term: np.ndarray,
    dt: float,
    dw: np.ndarray,
    dm: np.ndarray,
    fac_w: Optional[np.ndarray],
    amps: Tuple[float, float, float, float],
    store_states: bool,
    with_cost: bool,
) -> Tuple[Optional[np.ndarray], Optional[np.ndarray]]:
    P, L, n = dm.shape
    amp_a, amp_b, amp_s, amp_g = amps
    use_factor = fac_w is not None

    x = np.broadcast_to(x0, (P, n)).copy()
    states = np.empty((P, L + 1, n)) if store_states else None
    if store_states:
        states[:, 0] = x
    cost = np.zeros(P) if with_cost else None
    wcum = np.zeros((P, n)) if use_factor else None

    for k in range(L):
        dm_k = dm[:, k]
        if use_factor:
            f = np.tanh(wcum @ fac_w)
            ma = 1.0 + amp_a * f
            mb = 1.0 + amp_b * f
            ms = 1.0 + amp_s * f
            mg = 1.0 + amp_g * f
        else:
            ma = mb = ms = mg = 1.0
        drift = (a_tab[k] * ma)[..., None] * x if use_factor else (a_tab[k] * x)
        drift = drift + (mb[..., None] * b_tab[k] if use_factor else b_tab[k])
        sdot = (x @ s_tab[k]) * ms
        diff = sdot[:, None] * dm_k + (mg[:, None] if use_factor else 1.0) * (dm_k @ g_tab[k].T)
        if with_cost:
            cost += dt * (x @ ell_tab[k])
        rhs = x + dt * drift + diff
        if scheme_implicit:
            x = rhs @ mats[k].T
        else:
            x = rhs + dt * (x @ mats[k].T)
        if store_states:
            states[:, k + 1] = x
        if use_factor:
            wcum = wcum + dw[:, k]
    if with_cost:
        cost += x @ g_term
    return states, cost
