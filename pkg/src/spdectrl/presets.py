"""Named problem configurations and the config -> objects builder.

Configs are plain JSON-style dicts (lists and scalars only), so they can be
loaded from files, hashed canonically for output directories, and re-emitted
into run records.  ``build_problem`` turns a config into the live objects the
solvers consume.

Shipped presets:

* ``zero``              everything off; x stays at the origin (smoke test).
* ``scalar-closed-form`` one-dimensional, deterministic coefficients; the
                        backward solution has an explicit exponential form.
* ``benchmark-n8``      eight-dimensional, control-dependent martingale
                        coefficients plus a bounded random factor; the
                        workhorse for moment, duality, and timing studies.
* ``mp-n4-U3``          four-dimensional, three-element control set, drift
                        rewarded in alternating directions so the optimal
                        piecewise control is non-constant.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .coefficients import AffineCoefficients, ControlProcess, FactorSpec, ScalarForm, TimeProfile
from .hilbert import GelfandTriple, NuclearCovariance, OperatorFamily, dissipative_diagonal_family
from .noise import CovarianceProcess, TimeGrid

__all__ = ["PRESETS", "preset_config", "load_config", "config_hash", "Problem", "build_problem"]


def _scaled(base: float, count: int, step: float) -> list:
    return [round(base + step * i, 12) for i in range(count)]


PRESETS: dict = {
    "zero": {
        "name": "zero",
        "n": 4,
        "m": 1,
        "horizon": 1.0,
        "n_steps": 64,
        "n_paths": 256,
        "seed": 11,
        "scheme": "semi_implicit",
        "nu": [1.0, 1.0, 1.0, 1.0],
        "operator": {"strength": 0.5, "wobble": 0.0},
        "covariance": {"spectrum": "dyadic", "modulation": "decaying"},
        "control_set": [[0.0]],
        "base_intervals": [0],
        "coefficients": {
            "a": {"c0": 0.0, "cv": [0.0]},
            "b": {"c0": 0.0, "cv": [0.0]},
            "sigma": {"c0": 0.0, "cv": [0.0]},
            "g": {"c0": 0.0, "cv": [0.0]},
            "ell": {"c0": 0.0, "cv": [0.0]},
            "b_dir": [1.0, 0.0, 0.0, 0.0],
            "sigma_dir": [1.0, 0.0, 0.0, 0.0],
            "g_pattern": [[1.0 if i == j else 0.0 for j in range(4)] for i in range(4)],
            "ell_dir": [1.0, 0.0, 0.0, 0.0],
            "terminal_weight": [0.0, 0.0, 0.0, 0.0],
            "x0": [0.0, 0.0, 0.0, 0.0],
        },
    },
    "scalar-closed-form": {
        "name": "scalar-closed-form",
        "n": 1,
        "m": 1,
        "horizon": 1.0,
        "n_steps": 256,
        "n_paths": 10000,
        "seed": 404,
        "scheme": "semi_implicit",
        "nu": [1.0],
        "operator": {"strength": 0.8, "wobble": 0.0},
        "covariance": {"spectrum": "dyadic", "modulation": "decaying"},
        "control_set": [[0.0]],
        "base_intervals": [0],
        "coefficients": {
            "a": {"c0": -0.3, "cv": [0.0]},
            "b": {"c0": 0.0, "cv": [0.0]},
            "sigma": {"c0": 0.0, "cv": [0.0]},
            "g": {"c0": 0.0, "cv": [0.0]},
            "ell": {"c0": 0.7, "cv": [0.0]},
            "b_dir": [1.0],
            "sigma_dir": [1.0],
            "g_pattern": [[1.0]],
            "ell_dir": [1.0],
            "terminal_weight": [1.3],
            "x0": [1.0],
        },
    },
    "benchmark-n8": {
        "name": "benchmark-n8",
        "n": 8,
        "m": 2,
        "horizon": 1.0,
        "n_steps": 128,
        "n_paths": 10000,
        "seed": 2377,
        "scheme": "semi_implicit",
        "nu": _scaled(1.0, 8, 0.25),
        "operator": {"strength": 0.6, "wobble": 0.25},
        "covariance": {"spectrum": "dyadic", "modulation": "decaying"},
        "control_set": [[0.0, 0.0], [1.0, 0.5], [0.5, 1.0]],
        "base_intervals": [0, 1, 2, 1],
        "coefficients": {
            "a": {"c0": -0.3, "cv": [0.15, 0.1]},
            "b": {"c0": 0.25, "cv": [0.3, 0.2]},
            "sigma": {"c0": 0.2, "cv": [0.15, 0.25]},
            "g": {"c0": 0.2, "cv": [0.1, 0.3]},
            "ell": {"c0": 0.4, "cv": [0.2, 0.1]},
            "b_dir": _scaled(1.0, 8, -0.1),
            "sigma_dir": [0.5, -0.3, 0.4, -0.2, 0.3, -0.1, 0.2, 0.1],
            "g_pattern": [[(0.5 if i == j else 0.0) + 0.05 for j in range(8)] for i in range(8)],
            "ell_dir": _scaled(0.6, 8, -0.05),
            "terminal_weight": _scaled(0.4, 8, 0.05),
            "x0": _scaled(1.0, 8, -0.1),
            "factor": {
                "weights": [0.35355339059327373] * 8,
                "amp_a": 0.25,
                "amp_b": 0.3,
                "amp_sigma": 0.35,
                "amp_g": 0.3,
            },
        },
        "spike": {"t0": 0.25, "eps": 0.125, "index": 2},
        "scaling": {
            "n_steps": 512,
            "t0": 0.25,
            "eps": [0.0625, 0.03125, 0.015625, 0.0078125, 0.00390625, 0.001953125],
            "index": 2,
            "n_paths": 10000,
            "chunk_paths": 2000,
        },
    },
    "mp-n4-U3": {
        "name": "mp-n4-U3",
        "n": 4,
        "m": 1,
        "horizon": 1.0,
        "n_steps": 64,
        "n_paths": 2000,
        "seed": 9120,
        "scheme": "semi_implicit",
        "nu": [1.0, 1.2, 1.4, 1.6],
        "operator": {"strength": 0.5, "wobble": 0.2},
        "covariance": {"spectrum": "dyadic", "modulation": "decaying"},
        "control_set": [[0.0], [0.5], [1.0]],
        "base_intervals": [0, 0, 0, 0],
        "mp": {"n_intervals": 4, "budget": 4096, "falsify_interval": 1},
        "coefficients": {
            "a": {"c0": -0.2, "cv": [0.0]},
            "b": {"c0": 0.3, "cv": [0.6],
                  "pv": {"kind": "steps", "period": 1.0, "steps": [1.0, -1.0, 1.0, -1.0]}},
            "sigma": {"c0": 0.25, "cv": [0.0]},
            "g": {"c0": 0.2, "cv": [0.3]},
            "ell": {"c0": 0.5, "cv": [0.0]},
            "b_dir": [0.8, 0.6, 0.4, 0.2],
            "sigma_dir": [0.4, 0.3, -0.2, 0.1],
            "g_pattern": [[(0.6 if i == j else 0.0) + 0.05 for j in range(4)] for i in range(4)],
            "ell_dir": [0.5, 0.4, 0.3, 0.2],
            "terminal_weight": [0.6, 0.5, 0.4, 0.3],
            "x0": [1.0, 0.8, 0.6, 0.4],
        },
    },
}


def preset_config(name: str) -> dict:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    return copy.deepcopy(PRESETS[name])


def load_config(source: str) -> dict:
    """Resolve a preset name or a JSON config file path into a config dict."""
    if source in PRESETS:
        return preset_config(source)
    with open(source, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    if "name" not in cfg:
        raise ValueError("config file must carry a 'name' field")
    return cfg


def config_hash(config: dict) -> str:
    """First 12 hex digits of the sha256 of the canonical JSON encoding."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]


def _profile(cfg: Optional[dict]) -> TimeProfile:
    if not cfg:
        return TimeProfile()
    kind = cfg.get("kind", "const")
    return TimeProfile(kind=kind,
                       amplitude=float(cfg.get("amplitude", 0.0)),
                       period=float(cfg.get("period", 1.0)),
                       phase=float(cfg.get("phase", 0.0)),
                       steps=tuple(cfg["steps"]) if cfg.get("steps") is not None else None)


def _form(cfg: dict) -> ScalarForm:
    return ScalarForm(c0=float(cfg.get("c0", 0.0)),
                      cv=tuple(float(c) for c in cfg.get("cv", ())),
                      p0=_profile(cfg.get("p0")),
                      pv=_profile(cfg.get("pv")))


@dataclass
class Problem:
    """Live objects built from one config."""

    config: dict
    name: str
    grid: TimeGrid
    triple: GelfandTriple
    family: OperatorFamily
    cov: CovarianceProcess
    coeffs: AffineCoefficients
    control_set: np.ndarray
    base_control: ControlProcess
    n_paths: int
    seed: int
    scheme: str


def build_problem(config: dict) -> Problem:
    n = int(config["n"])
    m = int(config["m"])
    grid = TimeGrid(float(config["horizon"]), int(config["n_steps"]))
    triple = GelfandTriple(np.asarray(config["nu"], dtype=float))
    op = config.get("operator", {})
    family = dissipative_diagonal_family(triple,
                                         strength=float(op.get("strength", 1.0)),
                                         wobble=float(op.get("wobble", 0.0)),
                                         horizon=grid.horizon)
    cov_cfg = config.get("covariance", {})
    spectrum = cov_cfg.get("spectrum", "dyadic")
    if spectrum == "dyadic":
        base = NuclearCovariance.dyadic(n)
    else:
        base = NuclearCovariance.from_spectrum(np.asarray(spectrum, dtype=float))
    modulation = cov_cfg.get("modulation", "decaying")
    if modulation == "constant":
        cov = CovarianceProcess.constant(base)
    elif modulation == "decaying":
        cov = CovarianceProcess(base)
    else:
        raise ValueError(f"unknown covariance modulation {modulation!r}")

    c = config["coefficients"]
    factor = None
    if c.get("factor") is not None:
        f = c["factor"]
        factor = FactorSpec(weights=tuple(float(w) for w in f["weights"]),
                            amp_a=float(f.get("amp_a", 0.0)),
                            amp_b=float(f.get("amp_b", 0.0)),
                            amp_sigma=float(f.get("amp_sigma", 0.0)),
                            amp_g=float(f.get("amp_g", 0.0)))
    coeffs = AffineCoefficients(
        n, m,
        a_form=_form(c["a"]),
        b_form=_form(c["b"]), b_dir=np.asarray(c["b_dir"], float),
        sigma_form=_form(c["sigma"]), sigma_dir=np.asarray(c["sigma_dir"], float),
        g_form=_form(c["g"]), g_pattern=np.asarray(c["g_pattern"], float),
        ell_form=_form(c["ell"]), ell_dir=np.asarray(c["ell_dir"], float),
        terminal_weight=np.asarray(c["terminal_weight"], float),
        x0=np.asarray(c["x0"], float),
        factor=factor)

    control_set = np.asarray(config["control_set"], dtype=float)
    base_control = ControlProcess.piecewise(grid, control_set, list(config["base_intervals"]))
    return Problem(config=config, name=config["name"], grid=grid, triple=triple,
                   family=family, cov=cov, coeffs=coeffs, control_set=control_set,
                   base_control=base_control, n_paths=int(config["n_paths"]),
                   seed=int(config["seed"]), scheme=config.get("scheme", "semi_implicit"))
