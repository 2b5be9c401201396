"""Experiment configuration: TOML files plus dotted-key overrides.

A config file has four blocks:

    [problem]   kind = "ot" | "rwpo" | "fokker_planck", plus family fields
    [model]     dim, layers, hidden, bins, tail_bound
    [train]     any TrainConfig field
    [output]    dir = "runs/..."

Unknown keys are rejected so typos fail loudly.  ``--set a.b=v`` overrides
parse TOML-style scalars.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import fields
from typing import Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .conditioner import Architecture
from .problems import (DoubleWellPotential, FokkerPlanckProblem, Gaussian,
                       GaussianMixture, OTProblem, OUDrift, QuadraticPotential,
                       RWPOProblem, RingDrift, ring_of_gaussians,
                       standard_gaussian)
from .oracles import ou_density, ou_variance
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Invalid, unknown, or missing configuration content."""


def _check_keys(block, allowed, where):
    unknown = set(block) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in [{where}]; allowed: {sorted(allowed)}")


def _distribution(block, where, dim=None):
    _check_keys(block, {"type", "mean", "cov", "centers", "cov_scale", "dim"}, where)
    kind = block.get("type", "gaussian")
    if kind == "gaussian":
        if "mean" in block:
            mean = np.asarray(block["mean"], dtype=float)
            cov = np.asarray(block.get("cov", np.eye(mean.size)), dtype=float)
            return Gaussian(mean, cov)
        return standard_gaussian(int(block.get("dim", dim or 2)))
    if kind == "mixture":
        return ring_of_gaussians(block["centers"], float(block.get("cov_scale", 1.0)))
    raise ConfigError(f"unknown distribution type {kind!r} in [{where}]")


def _problem(block):
    kind = str(block.get("kind", "")).lower()
    if kind == "ot":
        _check_keys(block, {"kind", "p0", "p1"}, "problem")
        if "p0" not in block or "p1" not in block:
            raise ConfigError("transport problems need [problem.p0] and [problem.p1]")
        return OTProblem(_distribution(block["p0"], "problem.p0"),
                         _distribution(block["p1"], "problem.p1"))
    if kind == "rwpo":
        _check_keys(block, {"kind", "beta", "horizon", "p0", "potential", "dim"}, "problem")
        pot_block = block.get("potential", {"type": "quadratic"})
        _check_keys(pot_block, {"type", "a"}, "problem.potential")
        if pot_block.get("type", "quadratic") == "quadratic":
            potential = QuadraticPotential()
        elif pot_block["type"] == "double_well":
            potential = DoubleWellPotential(float(pot_block.get("a", 1.0)))
        else:
            raise ConfigError(f"unknown potential type {pot_block['type']!r}")
        kwargs = dict(potential=potential, beta=float(block.get("beta", 1.0)),
                      horizon=float(block.get("horizon", 1.0)),
                      dim_default=int(block.get("dim", 2)))
        if "p0" in block:
            kwargs["p0"] = _distribution(block["p0"], "problem.p0")
        return RWPOProblem(**kwargs)
    if kind in ("fokker_planck", "fp"):
        _check_keys(block, {"kind", "gamma", "horizon", "p0", "drift", "reference"}, "problem")
        drift_block = block.get("drift", {"type": "ou"})
        _check_keys(drift_block, {"type", "a", "delta"}, "problem.drift")
        dtype = drift_block.get("type", "ou")
        if dtype == "ou":
            drift = OUDrift(float(drift_block.get("a", 1.0)))
        elif dtype == "ring":
            drift = RingDrift(float(drift_block.get("delta", 0.5)))
        else:
            raise ConfigError(f"unknown drift type {dtype!r}")
        p0 = _distribution(block.get("p0", {"type": "gaussian", "dim": 2}), "problem.p0")
        gamma = float(block.get("gamma", 1.0))
        reference = None
        want_ref = block.get("reference", "auto")
        if want_ref not in ("auto", "none"):
            raise ConfigError("problem.reference must be 'auto' or 'none'")
        if want_ref == "auto" and isinstance(drift, OUDrift) and isinstance(p0, Gaussian):
            iso = p0.cov[0, 0] * np.eye(p0.dim)
            if np.allclose(p0.mean, 0.0) and np.allclose(p0.cov, iso):
                var0 = float(p0.cov[0, 0])
                reference = _ou_reference(drift.a, gamma, var0)
        return FokkerPlanckProblem(p0=p0, drift=drift, gamma=gamma,
                                   horizon=float(block.get("horizon", 1.0)),
                                   reference=reference)
    raise ConfigError("problem.kind must be one of: ot, rwpo, fokker_planck")


def _ou_reference(a, gamma, var0):
    def reference(x, t):
        return ou_density(x, t, a, gamma, var0)
    reference.tag = ("ou", a, gamma, var0)
    return reference


def _architecture(block, spec):
    _check_keys(block, {"dim", "layers", "hidden", "bins", "tail_bound"}, "model")
    return Architecture(dim=int(block.get("dim", spec.dim)),
                        n_layers=int(block.get("layers", 2)),
                        hidden=tuple(block.get("hidden", (16, 16))),
                        n_bins=int(block.get("bins", 5)),
                        tail_bound=float(block.get("tail_bound", 8.0)),
                        time_scale=spec.horizon)


_FAMILY_PENALTY = {"ot": 500.0, "rwpo": 200.0, "fokker_planck": 500.0, "fp": 500.0}


def _train_config(block, kind):
    names = {f.name for f in fields(TrainConfig)}
    _check_keys(block, names, "train")
    kwargs = dict(block)
    kwargs.setdefault("penalty_weight", _FAMILY_PENALTY[kind])
    try:
        return TrainConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [train] block: {exc}") from exc


class ExperimentConfig:
    """Fully resolved experiment: problem, architecture, train config, outdir."""

    def __init__(self, raw):
        _check_keys(raw, {"problem", "model", "train", "output"}, "top level")
        if "problem" not in raw:
            raise ConfigError("config needs a [problem] block")
        self.raw = raw
        self.problem = _problem(raw["problem"])
        self.arch = _architecture(raw.get("model", {}), self.problem)
        self.train = _train_config(raw.get("train", {}), str(raw["problem"].get("kind")).lower())
        out_block = raw.get("output", {})
        _check_keys(out_block, {"dir"}, "output")
        self.outdir = out_block.get("dir", "runs/experiment")

    def config_hash(self):
        blob = json.dumps(self.raw, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _parse_override_value(text):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text  # bare string


def apply_overrides(raw, overrides):
    """Apply ``a.b.c=value`` strings onto a nested config dict (in place)."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        path, _, text = item.partition("=")
        keys = path.strip().split(".")
        node = raw
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {path!r} crosses a non-table value")
        node[keys[-1]] = _parse_override_value(text.strip())
    return raw


def load_config(path, overrides=()):
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}")
    apply_overrides(raw, overrides)
    return ExperimentConfig(raw)
