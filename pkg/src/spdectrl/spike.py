"""Spike-variation experiments and the maximum-principle margin checks.

A spike replaces the base control on a window [t0, t0 + eps) by a fixed
element of U (or by a state-dependent selection decided at t0).  The first
variation xi = x_spiked - x_base is integrated with common noise, so all
comparisons below are common-random-number estimates:

* ``xi_scaling_study``: sup_t E|xi|^2 against eps (expected slope ~ 1 on a
  log-log fit when the spike moves the martingale-part coefficients);
* ``variational_inequality``: the five-term first-order expansion of the cost
  difference, whose total must be >= 0 (up to Monte Carlo error) at an
  optimal base control;
* ``maximum_principle_check``: pointwise Hamiltonian margins
  E[H(t, x, u, y, zq) - H(t, x, u*(t), y, zq)] over the grid and control set,
  flagged as violations beyond three standard errors.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .adjoint import AdjointTriple
from .coefficients import ControlProcess
from .forward import ForwardEnsemble, integrate, integrate_cost, moment_envelope_constants
from .hamiltonian import hamiltonian_difference
from .hilbert import hs_inner
from .noise import CovarianceProcess, TimeGrid, sample_paths

__all__ = [
    "SpikeSpec",
    "VariationEnsemble",
    "spike_control",
    "variation_ensemble",
    "xi_dynamics_residual",
    "variation_envelope_constants",
    "xi_envelope_check",
    "xi_scaling_study",
    "variational_inequality",
    "optimize_control",
    "maximum_principle_check",
    "perturb_control",
]


@dataclass(frozen=True)
class SpikeSpec:
    """Spike window [t0, t0 + eps) and the replacement control.

    ``spike_index`` picks a row of the control set; ``hook``, if given,
    overrides it per path with indices computed from the state at t0 (the
    only information a spike decided at t0 may use).
    """

    t0: float
    eps: float
    spike_index: int = 0
    hook: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def window(self, grid: TimeGrid) -> tuple:
        k0 = grid.index_of(self.t0)
        k1 = grid.index_of(self.t0 + self.eps)
        if k1 <= k0:
            raise ValueError(f"spike width {self.eps} is below one grid step {grid.dt}")
        return k0, k1


@dataclass
class VariationEnsemble:
    """Base and spiked paths under common noise, plus their difference."""

    base: ForwardEnsemble
    spiked: ForwardEnsemble
    xi: np.ndarray
    window: tuple
    spec: SpikeSpec


def spike_control(base: ControlProcess, spec: SpikeSpec) -> ControlProcess:
    """Deterministic spiked control (state-dependent hooks are resolved later)."""
    if spec.hook is not None:
        raise ValueError("state-dependent spikes are resolved by variation_ensemble")
    if not base.deterministic:
        raise ValueError("base control must be deterministic")
    k0, k1 = spec.window(base.grid)
    if not (0 <= spec.spike_index < base.n_values):
        raise ValueError("spike index outside the control set")
    idx = base.step_indices.copy()
    idx[k0:k1] = spec.spike_index
    return ControlProcess(base.grid, base.control_set, idx, n_intervals=None)


def variation_ensemble(coeffs, family, base_control: ControlProcess, spec: SpikeSpec,
                       noise, scheme: str = "semi_implicit", backend: Optional[str] = None,
                       base_ens: Optional[ForwardEnsemble] = None) -> VariationEnsemble:
    """Integrate base and spiked dynamics on the same noise and difference them."""
    k0, k1 = spec.window(noise.grid)
    if base_ens is None:
        base_ens = integrate(coeffs, family, base_control, noise, scheme=scheme, backend=backend)
    elif base_ens.noise is not noise:
        raise ValueError("base ensemble was integrated on different noise")

    if spec.hook is None:
        spiked_control = spike_control(base_control, spec)
    else:
        x_t0 = base_ens.states[:, k0]
        idx = np.asarray(spec.hook(x_t0), dtype=np.int64)
        if idx.shape != (noise.n_paths,):
            raise ValueError("spike hook must return one control index per path")
        if np.any(idx < 0) or np.any(idx >= base_control.n_values):
            raise ValueError("spike hook returned indices outside the control set")
        per_path = np.tile(base_control.step_indices, (noise.n_paths, 1))
        per_path[:, k0:k1] = idx[:, None]
        decided_at = np.zeros(noise.grid.n_steps, dtype=np.int64)
        decided_at[k0:k1] = k0
        spiked_control = ControlProcess(base_control.grid, base_control.control_set,
                                        base_control.step_indices, per_path=per_path, decided_at=decided_at)

    spiked_ens = integrate(coeffs, family, spiked_control, noise, scheme=scheme, backend=backend)
    xi = spiked_ens.states - base_ens.states
    return VariationEnsemble(base_ens, spiked_ens, xi, (k0, k1), spec)


def xi_dynamics_residual(var: VariationEnsemble) -> float:
    """Max deviation of xi from its own difference recursion (exact algebra).

    Subtracting the spiked and base schemes gives, per step,

        xi_{k+1} - xi_k = dt (A# xi# + a_base xi_k + da x_spk + db)
                          + (<sigma_base, xi_k> + <d sigma, x_spk> ) dM + dg dM

    with # the scheme's A-evaluation convention, so the stored paths must
    satisfy it to accumulated roundoff.
    """
    base, spiked = var.base, var.spiked
    ens = base
    grid = ens.grid
    dt = grid.dt
    times = grid.times
    coeffs = ens.coeffs
    need_omega = getattr(coeffs, "omega_dependent", True)
    worst = 0.0
    for k in range(grid.n_steps):
        t = float(times[k])
        om = ens.noise.omega_at(k) if need_omega else None
        v_b = base.control.value_at_step(k)
        v_s = spiked.control.value_at_step(k)
        a_b = np.asarray(coeffs.a(t, v_b, om), float)
        d_a = np.asarray(coeffs.a(t, v_s, om), float) - a_b
        d_b = np.asarray(coeffs.b(t, v_s, om), float) - np.asarray(coeffs.b(t, v_b, om), float)
        s_b = np.asarray(coeffs.sigma(t, v_b, om), float)
        d_s = np.asarray(coeffs.sigma(t, v_s, om), float) - s_b
        d_g = np.asarray(coeffs.g(t, v_s, om), float) - np.asarray(coeffs.g(t, v_b, om), float)

        xi_k = var.xi[:, k]
        x_spk = spiked.states[:, k]
        dm_k = ens.noise.dm[:, k]
        drift = (a_b * xi_k if a_b.ndim == 0 else a_b[:, None] * xi_k)
        drift = drift + (d_a * x_spk if np.ndim(d_a) == 0 else np.asarray(d_a)[:, None] * x_spk) + d_b
        sdot = xi_k @ s_b if s_b.ndim == 1 else np.sum(xi_k * s_b, axis=1)
        sdot = sdot + (x_spk @ d_s if d_s.ndim == 1 else np.sum(x_spk * d_s, axis=1))
        gdm = dm_k @ d_g.T if d_g.ndim == 2 else np.einsum("pij,pj->pi", d_g, dm_k, optimize=True)
        if ens.scheme == "semi_implicit":
            a_term = var.xi[:, k + 1] @ ens.family(float(times[k + 1])).T
        else:
            a_term = xi_k @ ens.family(t).T
        step = dt * (a_term + drift) + sdot[:, None] * dm_k + gdm
        defect = var.xi[:, k + 1] - xi_k - step
        worst = max(worst, float(np.max(np.abs(defect))))
    return worst


def variation_envelope_constants(bounds, lam: float, trace_q: float, eps: float,
                                 tail_span: float, base_moment: float) -> tuple:
    """Gronwall constants bounding sup E|xi|^2 by C5 * C6(eps) * eps.

    C6 collects the window growth: exp((lam + 4 k_a^2 + k_b^2 + 2 k_a
    + 3 k_s^2 trQ) eps) times a bracket fed by the window moment envelope;
    C5 = exp((lam + 2 k_a + k_s^2 trQ) * tail_span) propagates the
    homogeneous difference dynamics over the remaining horizon.
    """
    c1, c2 = moment_envelope_constants(bounds, lam, trace_q, eps)
    ka, kb, ks, kg = bounds.a, bounds.b, bounds.sigma, bounds.g
    rate = lam + 4.0 * ka ** 2 + kb ** 2 + 2.0 * ka + 3.0 * ks ** 2 * trace_q
    bracket = (6.0 * ks ** 2 * trace_q + 1.0) * c1 * (base_moment + c2 * eps) + 1.0 + 12.0 * kg ** 2 * trace_q
    c6 = float(np.exp(rate * eps) * bracket)
    c5 = float(np.exp((lam + 2.0 * ka + ks ** 2 * trace_q) * tail_span))
    return c5, c6


def xi_envelope_check(var: VariationEnsemble, family, triple=None) -> dict:
    """sup_{[t0+eps, T]} E|xi|^2 against the C5 * C6(eps) * eps envelope."""
    ens = var.base
    grid = ens.grid
    k0, k1 = var.window
    eps = (k1 - k0) * grid.dt
    tail_span = grid.horizon - k1 * grid.dt
    cov = ens.noise.cov
    bounds = ens.coeffs.bounds(ens.control.control_set, cov)
    base_moment = float(np.mean(np.sum(ens.states[:, k0] ** 2, axis=1)))
    c5, c6 = variation_envelope_constants(bounds, family.lam, cov.base.trace, eps, tail_span, base_moment)

    sq = np.sum(var.xi[:, k1:] ** 2, axis=2)
    mean_sq = sq.mean(axis=0)
    j = int(np.argmax(mean_sq))
    sup = float(mean_sq[j])
    se = float(sq[:, j].std(ddof=1) / np.sqrt(ens.n_paths))
    envelope = c5 * c6 * eps
    rse = se / max(sup, 1e-300)
    return {
        "passed": bool(sup <= envelope * (1.0 + 3.0 * rse)),
        "sup": sup,
        "envelope": float(envelope),
        "c_tail": c5,
        "c_window": c6,
        "rel_stderr": rse,
    }


def xi_scaling_study(coeffs, family, cov: CovarianceProcess, grid: TimeGrid,
                     base_control: ControlProcess, t0: float, spike_index: int,
                     eps_list: Sequence[float], n_paths: int, seed: int,
                     scheme: str = "semi_implicit", backend: Optional[str] = None,
                     chunk_paths: int = 2000, threads: int = 1) -> dict:
    """sup_t E|xi_eps|^2 for a ladder of spike widths, with a log-log slope fit.

    Paths stream through in chunks (per-path RNG streams make chunking
    reproducible), so long ladders at fine grids stay within memory.  The
    supremum is taken over the post-spike segment [t0 + eps, T].
    """
    eps_list = sorted(float(e) for e in eps_list)
    if len(eps_list) < 2:
        raise ValueError("need at least two spike widths")
    specs = [SpikeSpec(t0, eps, spike_index) for eps in eps_list]
    windows = [spec.window(grid) for spec in specs]
    spiked_controls = [spike_control(base_control, spec) for spec in specs]

    L = grid.n_steps
    n_eps = len(eps_list)
    acc_sq = np.zeros((n_eps, L + 1))
    acc_quad = np.zeros((n_eps, L + 1))
    acc_base_t0 = 0.0
    done = 0
    while done < n_paths:
        size = min(chunk_paths, n_paths - done)
        noise = sample_paths(cov, grid, size, seed, path_offset=done)
        base_ens = integrate(coeffs, family, base_control, noise, scheme=scheme, backend=backend)
        acc_base_t0 += float(np.sum(np.sum(base_ens.states[:, windows[0][0]] ** 2, axis=1)))

        def run_one(i):
            spiked = integrate(coeffs, family, spiked_controls[i], noise, scheme=scheme, backend=backend)
            sq = np.sum((spiked.states - base_ens.states) ** 2, axis=2)
            return i, sq.sum(axis=0), (sq ** 2).sum(axis=0)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(run_one, range(n_eps)))
        else:
            results = [run_one(i) for i in range(n_eps)]
        for i, s1, s2 in sorted(results):
            acc_sq[i] += s1
            acc_quad[i] += s2
        done += size

    base_moment = acc_base_t0 / n_paths
    sups, ses, envelopes, envelope_ok = [], [], [], []
    bounds = coeffs.bounds(base_control.control_set, cov)
    for i, eps in enumerate(eps_list):
        k1 = windows[i][1]
        mean_sq = acc_sq[i, k1:] / n_paths
        j = int(np.argmax(mean_sq))
        sup = float(mean_sq[j])
        var = acc_quad[i, k1 + j] / n_paths - sup ** 2
        se = float(np.sqrt(max(var, 0.0) / n_paths))
        sups.append(sup)
        ses.append(se)
        tail_span = grid.horizon - k1 * grid.dt
        c5, c6 = variation_envelope_constants(bounds, family.lam, cov.base.trace, eps, tail_span, base_moment)
        env = c5 * c6 * eps
        envelopes.append(env)
        envelope_ok.append(bool(sup <= env * (1.0 + 3.0 * se / max(sup, 1e-300))))

    degenerate = all(s < 1e-250 for s in sups)
    if degenerate:
        slope, intercept = float("nan"), float("nan")
        ratios = [float("nan")] * (n_eps - 1)
    else:
        logs = np.log(np.asarray(sups))
        slope, intercept = np.polyfit(np.log(np.asarray(eps_list)), logs, 1)
        ratios = [sups[i + 1] / max(sups[i], 1e-300) for i in range(n_eps - 1)]
    return {
        "eps": eps_list,
        "sup_xi_sq": sups,
        "se": ses,
        "slope": float(slope),
        "intercept": float(intercept),
        "ratios": ratios,
        "degenerate": degenerate,
        "envelopes": envelopes,
        "envelope_ok": envelope_ok,
        "base_moment_t0": base_moment,
        "n_paths": n_paths,
    }


def variational_inequality(adj: AdjointTriple, var: VariationEnsemble) -> dict:
    """Five-term first-order cost expansion over the spike window.

    Terms (all integrated over [t0, t0+eps), Monte Carlo means):

        T_ell   = E int <ell(u) - ell(u*), x*> dt
        T_drift = E int <y, (a(u) - a(u*)) x*> dt
        T_mart  = E int <sigma(u) - sigma(u*), x*> <Q^{1/2}, zq>_HS dt
        T_shift = E int <y, b(u) - b(u*)> dt
        T_gain  = E int <(g(u) - g(u*)) Q^{1/2}, zq>_HS dt

    An optimal base control forces total >= 0 up to o(eps) and Monte Carlo
    noise.  ``remainder`` re-evaluates the three x-dependent terms with the
    spiked state instead of the base state; the difference is the
    higher-order part and should vanish faster than eps.
    """
    ens = adj.forward
    if var.base is not ens:
        raise ValueError("adjoint was not solved along the variation's base ensemble")
    grid = ens.grid
    dt = grid.dt
    times = grid.times
    k0, k1 = var.window
    coeffs = ens.coeffs
    P = ens.n_paths
    need_omega = getattr(coeffs, "omega_dependent", True)

    terms = {name: np.zeros(P) for name in ("T_ell", "T_drift", "T_mart", "T_shift", "T_gain")}
    rem = np.zeros(P)
    for k in range(k0, k1):
        t = float(times[k])
        om = ens.noise.omega_at(k) if need_omega else None
        v_b = ens.control.value_at_step(k)
        v_s = var.spiked.control.value_at_step(k)
        d_ell = np.asarray(coeffs.ell(t, v_s), float) - np.asarray(coeffs.ell(t, v_b), float)
        d_a = np.asarray(coeffs.a(t, v_s, om), float) - np.asarray(coeffs.a(t, v_b, om), float)
        d_b = np.asarray(coeffs.b(t, v_s, om), float) - np.asarray(coeffs.b(t, v_b, om), float)
        d_s = np.asarray(coeffs.sigma(t, v_s, om), float) - np.asarray(coeffs.sigma(t, v_b, om), float)
        d_g = np.asarray(coeffs.g(t, v_s, om), float) - np.asarray(coeffs.g(t, v_b, om), float)

        x_k = ens.states[:, k]
        xi_k = var.xi[:, k]
        y_k = adj.y[:, k]
        qh_k = ens.noise.qhalf_at(k)
        if d_g.ndim == 2:
            q_pair, g_pair = adj.zq_pairings(k, [qh_k, d_g @ qh_k])
        else:
            zq = adj.zq_at(k)
            q_pair = hs_inner(qh_k, zq)
            g_pair = hs_inner(np.einsum("pij,jk->pik", d_g, qh_k, optimize=True), zq)

        pair_ell = x_k @ d_ell if d_ell.ndim == 1 else np.sum(x_k * d_ell, axis=1)
        pair_ell_xi = xi_k @ d_ell if d_ell.ndim == 1 else np.sum(xi_k * d_ell, axis=1)
        pair_xy = np.sum(y_k * x_k, axis=1)
        pair_xy_xi = np.sum(y_k * xi_k, axis=1)
        pair_sx = x_k @ d_s if d_s.ndim == 1 else np.sum(x_k * d_s, axis=1)
        pair_sx_xi = xi_k @ d_s if d_s.ndim == 1 else np.sum(xi_k * d_s, axis=1)
        pair_by = y_k @ d_b if d_b.ndim == 1 else np.sum(y_k * d_b, axis=1)

        terms["T_ell"] += dt * pair_ell
        terms["T_drift"] += dt * d_a * pair_xy
        terms["T_mart"] += dt * pair_sx * q_pair
        terms["T_shift"] += dt * pair_by
        terms["T_gain"] += dt * g_pair
        rem += dt * (pair_ell_xi + d_a * pair_xy_xi + pair_sx_xi * q_pair)

    total = sum(terms.values())
    mean_total = float(np.mean(total))
    se_total = float(np.std(total, ddof=1) / np.sqrt(P)) if P > 1 else 0.0
    report = {name: float(np.mean(vals)) for name, vals in terms.items()}
    report.update({
        "total": mean_total,
        "se": se_total,
        "passed": bool(mean_total >= -3.0 * se_total),
        "remainder": float(np.mean(rem)),
        "remainder_se": float(np.std(rem, ddof=1) / np.sqrt(P)) if P > 1 else 0.0,
        "eps": (k1 - k0) * dt,
    })
    return report


def optimize_control(coeffs, family, cov: CovarianceProcess, grid: TimeGrid,
                     control_set, n_intervals: int, n_paths: int, seed: int,
                     mode: str = "exhaustive", budget: int = 4096,
                     scheme: str = "semi_implicit", backend: Optional[str] = None,
                     threads: int = 1) -> tuple:
    """Minimize the cost over piecewise-constant controls on a common ensemble.

    Exhaustive mode enumerates all |U|^n_intervals index sequences in
    lexicographic order (ties keep the earliest); coordinate mode sweeps one
    interval at a time until a full sweep makes no strict improvement.  Every
    candidate is scored on the same noise, so comparisons are common-random-
    number differences.
    """
    control_set = np.atleast_2d(np.asarray(control_set, dtype=float))
    n_u = len(control_set)
    noise = sample_paths(cov, grid, n_paths, seed)

    def score(indices) -> float:
        ctrl = ControlProcess.piecewise(grid, control_set, list(indices))
        return integrate_cost(coeffs, family, ctrl, noise, scheme=scheme, backend=backend)["J"]

    evaluations = []
    if mode == "exhaustive":
        if n_u > 8 or n_intervals > 8:
            raise ValueError("exhaustive mode limited to |U| <= 8 and n_intervals <= 8")
        total = n_u ** n_intervals
        if total > budget:
            raise ValueError(
                f"exhaustive search needs {total} evaluations (budget {budget}); use coordinate-descent mode")
        candidates = list(itertools.product(range(n_u), repeat=n_intervals))
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                scores = list(pool.map(score, candidates))
        else:
            scores = [score(c) for c in candidates]
        best_idx, best_j = None, np.inf
        for cand, j in zip(candidates, scores):
            evaluations.append((cand, j))
            if j < best_j:
                best_idx, best_j = cand, j
    elif mode == "coordinate":
        current = tuple([0] * n_intervals)
        best_j = score(current)
        evaluations.append((current, best_j))
        for _ in range(32):
            improved = False
            for pos in range(n_intervals):
                for val in range(n_u):
                    if val == current[pos]:
                        continue
                    cand = current[:pos] + (val,) + current[pos + 1:]
                    j = score(cand)
                    evaluations.append((cand, j))
                    if j < best_j:
                        current, best_j, improved = cand, j, True
            if not improved:
                break
        best_idx = current
    else:
        raise ValueError(f"unknown mode {mode!r}")

    best_control = ControlProcess.piecewise(grid, control_set, list(best_idx))
    rep = integrate_cost(coeffs, family, best_control, noise, scheme=scheme, backend=backend)
    report = {
        "mode": mode,
        "best_indices": list(best_idx),
        "J": rep["J"],
        "se": rep["se"],
        "n_evaluations": len(evaluations),
        "evaluations": evaluations,
        "seed": seed,
        "n_paths": n_paths,
    }
    return best_control, report


def maximum_principle_check(adj: AdjointTriple, control_set=None) -> dict:
    """Hamiltonian margins E[H(u) - H(u*)] on every (grid time, control) pair.

    Margins are computed per path from coefficient differences (common random
    numbers), so the margin at u = u*(t) is exactly zero.  A pair is a
    violation when its margin exceeds three standard errors.
    """
    ens = adj.forward
    coeffs = ens.coeffs
    if control_set is not None:
        control_set = np.atleast_2d(np.asarray(control_set, dtype=float))
        if control_set.shape != ens.control.control_set.shape or \
                not np.array_equal(control_set, ens.control.control_set):
            raise ValueError("base control takes values outside the supplied control set")
    uset = ens.control.control_set
    if not ens.control.deterministic:
        raise ValueError("margins are defined for deterministic base controls")
    grid = ens.grid
    L = grid.n_steps
    times = grid.times
    n_u = len(uset)
    P = ens.n_paths
    need_omega = getattr(coeffs, "omega_dependent", True)

    margins = np.zeros((L, n_u))
    ses = np.zeros((L, n_u))
    violations = []
    for k in range(L):
        t = float(times[k])
        om = ens.noise.omega_at(k) if need_omega else None
        zq = adj.zq_at(k)
        x_k = ens.states[:, k]
        y_k = adj.y[:, k]
        qh_k = ens.noise.qhalf_at(k)
        base_idx = ens.control.index_at_step(k)
        v_base = uset[base_idx]
        for ui in range(n_u):
            if ui == base_idx:
                continue
            delta = hamiltonian_difference(t, x_k, uset[ui], v_base, y_k, zq, coeffs, qh_k, om)
            delta = np.atleast_1d(delta)
            margins[k, ui] = float(np.mean(delta))
            ses[k, ui] = float(np.std(delta, ddof=1) / np.sqrt(P)) if P > 1 else 0.0
            if margins[k, ui] > 3.0 * ses[k, ui]:
                violations.append((k, ui))
    return {
        "times": times[:-1],
        "margins": margins,
        "ses": ses,
        "violations": violations,
        "n_violations": len(violations),
        "base_indices": ens.control.step_indices.copy(),
    }


def perturb_control(control: ControlProcess, interval: int, new_index: int) -> ControlProcess:
    """Replace one interval's value of a piecewise control."""
    if control.n_intervals is None:
        raise ValueError("control does not carry interval structure")
    if not (0 <= interval < control.n_intervals):
        raise ValueError("interval index out of range")
    reps = control.grid.n_steps // control.n_intervals
    idx = control.step_indices.copy()
    idx[interval * reps:(interval + 1) * reps] = new_index
    return ControlProcess(control.grid, control.control_set, idx, n_intervals=control.n_intervals)
