"""Shared fixtures: moderately sized ensembles reused across test modules."""

import numpy as np
import pytest

import spdectrl as sp


@pytest.fixture(scope="session")
def bench_problem():
    return sp.build_problem(sp.preset_config("benchmark-n8"))


@pytest.fixture(scope="session")
def bench_noise(bench_problem):
    prob = bench_problem
    return sp.sample_paths(prob.cov, prob.grid, 2000, prob.seed)


@pytest.fixture(scope="session")
def bench_forward(bench_problem, bench_noise):
    prob = bench_problem
    return sp.integrate(prob.coeffs, prob.family, prob.base_control, bench_noise,
                        scheme=prob.scheme)


@pytest.fixture(scope="session")
def bench_adjoint(bench_forward):
    return sp.solve_bspde(bench_forward)


@pytest.fixture(scope="session")
def scalar_problem():
    return sp.build_problem(sp.preset_config("scalar-closed-form"))


@pytest.fixture(scope="session")
def mp_problem():
    return sp.build_problem(sp.preset_config("mp-n4-U3"))


def scalar_costate_closed_form(t: float) -> float:
    """Deterministic one-dimensional costate for the scalar preset.

    With constant state operator A, drift slope a, running weight l, and
    terminal weight G, and no martingale coefficients, the costate obeys
    y' = -(A + a) y - l, y(T) = G, so

        y(t) = exp((A + a)(T - t)) G + l (exp((A + a)(T - t)) - 1) / (A + a).
    """
    rate = -0.8 - 0.3
    span = 1.0 - t
    grow = np.exp(rate * span)
    return grow * 1.3 + 0.7 * (grow - 1.0) / rate
