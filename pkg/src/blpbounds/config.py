"""Run configuration: nested key-value JSON files for the CLI.

Sections are validated strictly; unknown keys are an error so typos do not
silently fall back to defaults.
"""

from __future__ import annotations

import hashlib
import json
from typing import Optional

import numpy as np

from .errors import ConfigError
from .identify import DirectionSet, default_directions
from .inference import Combo, HypercubeSpec, PairwiseComboSpec, nevo_style_combos
from .model import GridAxis, MixingSpec, OutsideShareSet, ThetaGrid
from .simulate import SimulationDesign


def load_config(path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _check_keys(section: dict, allowed, context: str) -> None:
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"{context}: unknown keys {unknown}; allowed keys are {sorted(allowed)}")


def _require(section: dict, keys, context: str) -> None:
    missing = sorted(k for k in keys if k not in section)
    if missing:
        raise ConfigError(f"{context}: missing required keys {missing}")


def parse_simulation(cfg: dict, seed_override: Optional[int] = None) -> SimulationDesign:
    section = cfg.get("simulate")
    if section is None:
        raise ConfigError("config needs a 'simulate' section")
    _check_keys(section, {"n_markets", "seed", "alpha", "beta", "lambda", "nodes"}, "simulate")
    _require(section, ["n_markets"] + ([] if seed_override is not None else ["seed"]), "simulate")
    return SimulationDesign(
        n_markets=int(section["n_markets"]),
        alpha=float(section.get("alpha", 1.0)),
        beta=float(section.get("beta", 1.0)),
        lam=float(section.get("lambda", 1.0)),
        seed=int(seed_override if seed_override is not None else section["seed"]),
        nodes=int(section.get("nodes", 15)),
    )


def parse_mixing(cfg: dict) -> MixingSpec:
    section = cfg.get("mixing", {"family": "degenerate"})
    _check_keys(section, {"family", "zeta_sd_index", "nu_sd_index", "rule", "nodes", "seed"},
                "mixing")
    zeta = tuple(None if v is None else int(v) for v in section.get("zeta_sd_index", []))
    nu = section.get("nu_sd_index")
    return MixingSpec(
        family=section.get("family", "degenerate"),
        zeta_sd_index=zeta,
        nu_sd_index=None if nu is None else int(nu),
        rule=section.get("rule", "gauss-hermite"),
        nodes=int(section.get("nodes", 15)),
        seed=int(section.get("seed", 0)),
    )


def parse_s0_set(cfg: dict) -> OutsideShareSet:
    section = cfg.get("s0_set")
    if section is None:
        raise ConfigError("config needs an 's0_set' section")
    _check_keys(section, {"kind", "epsilon", "eta", "center"}, "s0_set")
    _require(section, ["kind"], "s0_set")
    return OutsideShareSet(
        kind=section["kind"],
        epsilon=None if section.get("epsilon") is None else float(section["epsilon"]),
        center=None if section.get("center") is None else float(section["center"]),
        eta=float(section.get("eta", 1e-4)),
    )


def parse_directions(cfg: dict, J: int) -> DirectionSet:
    section = cfg.get("directions", {})
    _check_keys(section, {"n_angular", "n_random", "seed"}, "directions")
    return default_directions(
        J,
        n_angular=int(section.get("n_angular", 64)),
        n_random=int(section.get("n_random", 32)),
        seed=int(section.get("seed", 20230515)),
    )


def _parse_axis(spec, name: str) -> GridAxis:
    if isinstance(spec, (int, float)):
        return GridAxis.fixed(float(spec))
    if isinstance(spec, (list, tuple)) and len(spec) == 3:
        return GridAxis.step(float(spec[0]), float(spec[1]), float(spec[2]))
    if isinstance(spec, dict):
        _check_keys(spec, {"lo", "hi", "step", "n", "value"}, f"grid.{name}")
        if "value" in spec:
            return GridAxis.fixed(float(spec["value"]))
        _require(spec, ["lo", "hi"], f"grid.{name}")
        if "step" in spec:
            return GridAxis.step(float(spec["lo"]), float(spec["hi"]), float(spec["step"]))
        if "n" in spec:
            return GridAxis.linspace(float(spec["lo"]), float(spec["hi"]), int(spec["n"]))
    raise ConfigError(f"grid.{name}: expected a number, [lo,hi,step], or a lo/hi/step|n object")


def parse_grid(cfg: dict) -> ThetaGrid:
    section = cfg.get("grid")
    if section is None:
        raise ConfigError("config needs a 'grid' section")
    _check_keys(section, {"alpha", "beta", "lambda"}, "grid")
    _require(section, ["alpha", "beta", "lambda"], "grid")
    alpha = _parse_axis(section["alpha"], "alpha")
    beta_spec = section["beta"]
    lam_spec = section["lambda"]
    if not isinstance(beta_spec, list) or (beta_spec and isinstance(beta_spec[0], (int, float)) and len(beta_spec) == 3):
        beta_spec = [beta_spec]
    if not isinstance(lam_spec, list) or (lam_spec and isinstance(lam_spec[0], (int, float)) and len(lam_spec) == 3):
        lam_spec = [lam_spec]
    beta = tuple(_parse_axis(s, f"beta[{i}]") for i, s in enumerate(beta_spec))
    lam = tuple(_parse_axis(s, f"lambda[{i}]") for i, s in enumerate(lam_spec))
    return ThetaGrid(alpha, beta, lam)


def parse_identify_options(cfg: dict) -> dict:
    section = cfg.get("identify", {})
    _check_keys(section, {"slack", "slack_multiplier", "n_s0", "grouping"}, "identify")
    slack = section.get("slack", "auto")
    if not isinstance(slack, str):
        slack = float(slack)
    elif slack != "auto":
        raise ConfigError("identify.slack must be 'auto' or a number")
    return dict(
        slack=slack,
        slack_multiplier=float(section.get("slack_multiplier", 2.0)),
        n_s0=int(section.get("n_s0", 51)),
        grouping=section.get("grouping", "discrete"),
    )


def parse_instrument_spec(section: dict):
    _check_keys(section, {"kind", "r0", "r_max", "instruments", "min_count",
                          "standardize", "d_z"}, "infer.instruments")
    kind = section.get("kind", "hypercube")
    if kind == "hypercube":
        return HypercubeSpec(
            r0=int(section.get("r0", 1)),
            r_max=int(section.get("r_max", 2)),
            instruments=None if section.get("instruments") is None
            else tuple(int(i) for i in section["instruments"]),
            standardize=bool(section.get("standardize", True)),
            min_count=int(section.get("min_count", 5)),
        )
    if kind == "pairwise-combos":
        return nevo_style_combos(int(section.get("d_z", 10)))
    raise ConfigError(f"unknown instrument kind {kind!r}")


def parse_infer_options(cfg: dict) -> dict:
    section = cfg.get("infer", {})
    _check_keys(section, {"pi", "method", "B", "seed", "multiplier", "instruments",
                          "n_s0", "cap", "infinite_policy"}, "infer")
    return dict(
        pi=float(section.get("pi", 0.1)),
        method=section.get("method", "self-normalized"),
        B=int(section.get("B", 500)),
        seed=int(section.get("seed", 0)),
        multiplier=section.get("multiplier", "gaussian"),
        instrument_spec=parse_instrument_spec(section.get("instruments", {"kind": "hypercube"})),
        n_s0=int(section.get("n_s0", 51)),
        cap=float(section.get("cap", 1e6)),
        infinite_policy=section.get("infinite_policy", "cap"),
    )


def parse_bounds_options(cfg: dict) -> dict:
    section = cfg.get("bounds", {})
    _check_keys(section, {"market", "objects", "n_s0"}, "bounds")
    return dict(
        market=section.get("market", "median"),
        objects=section.get("objects"),
        n_s0=int(section.get("n_s0", 51)),
    )


def parse_counterexample_options(cfg: dict, seed_override: Optional[int] = None) -> dict:
    section = cfg.get("counterexample", {})
    _check_keys(section, {"n_draws", "seed", "nodes", "lo", "hi", "n_grid"}, "counterexample")
    return dict(
        n_draws=int(section.get("n_draws", 100_000)),
        seed=int(seed_override if seed_override is not None else section.get("seed", 0)),
        nodes=int(section.get("nodes", 40)),
        lo=float(section.get("lo", 0.05)),
        hi=float(section.get("hi", 0.6)),
        n_grid=int(section.get("n_grid", 23)),
    )
