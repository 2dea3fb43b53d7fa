"""Hamiltonian algebra: affinity in the state, gradients, control margins."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import spdectrl as sp
from spdectrl.coefficients import AffineCoefficients, ScalarForm
from spdectrl.hamiltonian import (
    HamiltonianArgs,
    b_operator,
    grad_x_hamiltonian,
    hamiltonian,
    hamiltonian_difference,
    sigma_tilde,
)
from spdectrl.hilbert import hs_inner


def _rand_args(co, rng, t=0.37):
    n = co.n
    return HamiltonianArgs(t, rng.standard_normal(n), rng.uniform(0, 1, co.m),
                           rng.standard_normal(n), rng.standard_normal((n, n)))


@pytest.fixture(scope="module")
def setup():
    n = 8
    rng = np.random.default_rng(99)
    co = AffineCoefficients(
        n, 2,
        a_form=ScalarForm(c0=-0.3, cv=(0.15, 0.1)),
        b_form=ScalarForm(c0=0.25, cv=(0.3, 0.2)),
        b_dir=np.linspace(1.0, 0.3, n),
        sigma_form=ScalarForm(c0=0.2, cv=(0.15, 0.25)),
        sigma_dir=np.array([0.5, -0.3, 0.4, -0.2, 0.3, -0.1, 0.2, 0.1]),
        g_form=ScalarForm(c0=0.2, cv=(0.1, 0.3)),
        g_pattern=0.5 * np.eye(n) + 0.05 * np.ones((n, n)),
        ell_form=ScalarForm(c0=0.4, cv=(0.2, 0.1)),
        ell_dir=np.linspace(0.6, 0.25, n),
        terminal_weight=np.linspace(0.4, 0.75, n),
        x0=np.linspace(1.0, 0.3, n))
    qh = np.diag(np.sqrt(2.0 ** -np.arange(1, n + 1)))
    return co, qh


class TestAffinity:
    @settings(max_examples=50, deadline=None)
    @given(alpha=st.floats(-8.0, 8.0), seed=st.integers(0, 2**16))
    def test_state_dependence_is_affine(self, setup, alpha, seed):
        co, qh = setup
        rng = np.random.default_rng(seed)
        args = _rand_args(co, rng)
        d = rng.standard_normal(co.n)
        h0 = hamiltonian(args, co, qh)
        h1 = hamiltonian(HamiltonianArgs(args.t, args.x + d, args.v, args.y, args.z_q), co, qh)
        ha = hamiltonian(HamiltonianArgs(args.t, args.x + alpha * d, args.v, args.y, args.z_q), co, qh)
        scale = 1.0 + abs(h0) + abs(h1) + abs(ha)
        assert abs(ha - (h0 + alpha * (h1 - h0))) <= 1e-9 * scale

    def test_batched_matches_loop(self, setup):
        co, qh = setup
        rng = np.random.default_rng(7)
        P, n = 6, co.n
        x = rng.standard_normal((P, n))
        y = rng.standard_normal((P, n))
        zq = rng.standard_normal((P, n, n))
        v = rng.uniform(0, 1, co.m)
        batched = hamiltonian(HamiltonianArgs(0.37, x, v, y, zq), co, qh)
        singles = [hamiltonian(HamiltonianArgs(0.37, x[p], v, y[p], zq[p]), co, qh)
                   for p in range(P)]
        assert np.allclose(batched, singles, rtol=1e-13)


class TestGradient:
    def test_matches_central_differences(self, setup):
        co, qh = setup
        rng = np.random.default_rng(11)
        h = 1e-6
        for _ in range(20):
            args = _rand_args(co, rng, t=float(rng.uniform(0, 1)))
            grad = grad_x_hamiltonian(args.t, args.v, args.y, args.z_q, co, qh)
            fd = np.zeros(co.n)
            for i in range(co.n):
                e = np.zeros(co.n)
                e[i] = h
                hp = hamiltonian(HamiltonianArgs(args.t, args.x + e, args.v, args.y, args.z_q), co, qh)
                hm = hamiltonian(HamiltonianArgs(args.t, args.x - e, args.v, args.y, args.z_q), co, qh)
                fd[i] = (hp - hm) / (2 * h)
            assert np.linalg.norm(grad - fd) <= 1e-6 * (1 + np.linalg.norm(grad))

    def test_batched_gradient_matches_loop(self, setup):
        co, qh = setup
        rng = np.random.default_rng(13)
        P, n = 5, co.n
        y = rng.standard_normal((P, n))
        zq = rng.standard_normal((P, n, n))
        v = np.array([0.5, 1.0])
        batched = grad_x_hamiltonian(0.42, v, y, zq, co, qh)
        assert batched.shape == (P, n)
        for p in range(P):
            single = grad_x_hamiltonian(0.42, v, y[p], zq[p], co, qh)
            assert np.allclose(batched[p], single, rtol=1e-13)


class TestDifferenceForm:
    def test_agrees_with_two_evaluations(self, setup):
        co, qh = setup
        rng = np.random.default_rng(17)
        for _ in range(25):
            args = _rand_args(co, rng, t=float(rng.uniform(0, 1)))
            v2 = rng.uniform(0, 1, co.m)
            direct = hamiltonian(HamiltonianArgs(args.t, args.x, v2, args.y, args.z_q), co, qh) \
                - hamiltonian(args, co, qh)
            viadiff = hamiltonian_difference(args.t, args.x, v2, args.v, args.y, args.z_q, co, qh)
            assert np.isclose(direct, viadiff, rtol=1e-9, atol=1e-12)

    def test_control_free_terms_cancel_exactly(self):
        # only b reacts to the control; a huge running-cost offset must not
        # leak into the margin at all
        n = 3

        def make(ell_c0):
            return AffineCoefficients(
                n, 1,
                a_form=ScalarForm(c0=-0.2), b_form=ScalarForm(c0=0.3, cv=(0.6,)),
                b_dir=np.array([0.8, 0.6, 0.4]),
                sigma_form=ScalarForm(c0=0.25), sigma_dir=np.array([0.5, -0.3, 0.2]),
                g_form=ScalarForm(c0=0.2), g_pattern=np.eye(n),
                ell_form=ScalarForm(c0=ell_c0), ell_dir=np.ones(n),
                terminal_weight=np.ones(n), x0=np.ones(n))

        rng = np.random.default_rng(23)
        x, y = rng.standard_normal(n) * 1e3, rng.standard_normal(n)
        zq = rng.standard_normal((n, n))
        qh = np.diag([0.5, 0.25, 0.125])
        small = hamiltonian_difference(0.4, x, np.array([1.0]), np.array([0.0]), y, zq, make(0.4), qh)
        huge = hamiltonian_difference(0.4, x, np.array([1.0]), np.array([0.0]), y, zq, make(1e12), qh)
        assert huge == small
        want = -0.6 * float(np.array([0.8, 0.6, 0.4]) @ y)
        assert np.isclose(small, want, rtol=1e-12)

    def test_same_control_gives_exact_zero(self, setup):
        co, qh = setup
        rng = np.random.default_rng(29)
        args = _rand_args(co, rng)
        v = np.array([0.5, 1.0])
        out = hamiltonian_difference(args.t, args.x * 1e8, v, v, args.y, args.z_q, co, qh)
        assert out == 0.0


class TestBuildingBlocks:
    def test_sigma_tilde_shapes_and_values(self, setup):
        co, qh = setup
        rng = np.random.default_rng(31)
        n = co.n
        x = rng.standard_normal(n)
        v = np.array([0.5, 1.0])
        st_single = sigma_tilde(0.3, x, v, co)
        s = np.asarray(co.sigma(0.3, v), dtype=float)
        g = np.asarray(co.g(0.3, v), dtype=float)
        assert st_single.shape == (n, n)
        assert np.allclose(st_single, float(s @ x) * np.eye(n) + g)
        xb = rng.standard_normal((5, n))
        st_batch = sigma_tilde(0.3, xb, v, co)
        assert st_batch.shape == (5, n, n)
        assert np.allclose(st_batch[2], float(s @ xb[2]) * np.eye(n) + g)

    def test_b_operator_is_hs_pairing_times_sigma(self, setup):
        co, qh = setup
        rng = np.random.default_rng(37)
        zq = rng.standard_normal((co.n, co.n))
        v = np.array([1.0, 0.5])
        out = b_operator(0.3, v, zq, qh, co)
        s = np.asarray(co.sigma(0.3, v), dtype=float)
        assert np.allclose(out, hs_inner(qh, zq) * s)
        zb = rng.standard_normal((4, co.n, co.n))
        outb = b_operator(0.3, v, zb, qh, co)
        assert outb.shape == (4, co.n)
        assert np.allclose(outb[1], hs_inner(qh, zb[1]) * s)

    def test_cost_accepts_coefficient_override(self, bench_problem, bench_forward):
        co = bench_problem.coeffs
        base = sp.cost(bench_forward)
        override = sp.cost(bench_forward, coeffs=co)
        assert base["J"] == override["J"]
