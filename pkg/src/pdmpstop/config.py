"""Run configuration: a single JSON document with unknown keys rejected."""

import copy
import importlib
import json
import numbers

from .exceptions import ConfigError
from .model import PdmpModel, make_example_model

__all__ = ["DEFAULT_CONFIG", "load_config", "validate_config", "merge_config", "build_model"]

DEFAULT_CONFIG = {
    "model": {
        "name": "example",
        "v": 1.0,
        "alpha": 1.0,
        "rate_beta": 3.0,
        "x0": 0.0,
        "plugin": None,
        "params": {},
    },
    "N": 10,
    "quantization": {
        "points_per_stage": 10,
        "train_samples": 100_000,
        "weight_samples": 100_000,
        "eval_samples": 100_000,
        "p": 2.0,
        "component_weights": [1.0, 1.0],
        "max_iter": 50,
        "tol": 1e-6,
    },
    "dp": {"delta": 0.151},
    "stopping": {"a": 0.5, "beta_override": None, "n_mc": 100_000},
    "bounds": {"enable": True, "oracle": True},
    "simulate": {"n_trajectories": 2},
    "seed": 0,
    "threads": 1,
    "output_dir": "out",
}

_OPTIONAL_NONE = {("model", "plugin"), ("stopping", "beta_override")}


def merge_config(base, override, path=()):
    """Deep-merge ``override`` into a copy of ``base``, rejecting unknown keys."""
    out = copy.deepcopy(base)
    if not isinstance(override, dict):
        raise ConfigError(f"{'.'.join(path) or 'config'} must be a JSON object")
    for key, value in override.items():
        where = path + (key,)
        if key not in base:
            raise ConfigError(f"unknown config key {'.'.join(where)!r}")
        if isinstance(base[key], dict) and key != "params":
            out[key] = merge_config(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _need(cond, msg):
    if not cond:
        raise ConfigError(msg)


def _count(value, name, minimum=1):
    _need(isinstance(value, numbers.Integral) and not isinstance(value, bool), f"{name} must be an integer")
    _need(value >= minimum, f"{name} must be >= {minimum}")


def _number(value, name):
    _need(isinstance(value, numbers.Real) and not isinstance(value, bool), f"{name} must be a number")


def validate_config(cfg):
    """Check types and ranges; returns ``cfg`` unchanged."""
    m = cfg["model"]
    _need(m["name"] in ("example", "user-plugin"), "model.name must be 'example' or 'user-plugin'")
    if m["name"] == "user-plugin":
        _need(isinstance(m["plugin"], str) and ":" in m["plugin"], "model.plugin must be 'module:factory'")
    else:
        _need(m["plugin"] is None, "model.plugin is only read when model.name is 'user-plugin'")
    for key in ("v", "alpha", "rate_beta"):
        _number(m[key], f"model.{key}")
    _need(isinstance(m["params"], dict), "model.params must be an object")
    _count(cfg["N"], "N")
    q = cfg["quantization"]
    for key in ("points_per_stage", "train_samples", "weight_samples", "eval_samples", "max_iter"):
        _count(q[key], f"quantization.{key}")
    _number(q["p"], "quantization.p")
    _need(q["p"] >= 1, "quantization.p must be >= 1")
    _need(q["train_samples"] >= 100 * q["points_per_stage"], "quantization.train_samples must be >= 100 * points_per_stage")
    cw = q["component_weights"]
    _need(isinstance(cw, list) and len(cw) == 2 and all(isinstance(c, numbers.Real) and c > 0 for c in cw),
          "quantization.component_weights must be two positive numbers")
    _number(q["tol"], "quantization.tol")
    d = cfg["dp"]["delta"]
    if isinstance(d, list):
        _need(len(d) == cfg["N"], "dp.delta table must have N entries")
        for x in d:
            _number(x, "dp.delta entries")
            _need(x > 0, "dp.delta must be > 0")
    else:
        _number(d, "dp.delta")
        _need(d > 0, "dp.delta must be > 0")
    s = cfg["stopping"]
    _number(s["a"], "stopping.a")
    _need(0 < s["a"] < 1, "stopping.a must lie in (0, 1)")
    if s["beta_override"] is not None:
        _number(s["beta_override"], "stopping.beta_override")
        _need(s["beta_override"] >= 0, "stopping.beta_override must be >= 0")
    _count(s["n_mc"], "stopping.n_mc", 2)
    for key in ("enable", "oracle"):
        _need(isinstance(cfg["bounds"][key], bool), f"bounds.{key} must be true or false")
    _count(cfg["simulate"]["n_trajectories"], "simulate.n_trajectories", 0)
    _count(cfg["seed"], "seed", 0)
    _need(cfg["seed"] < 2**64, "seed must fit in 64 bits")
    _count(cfg["threads"], "threads", 0)
    _need(isinstance(cfg["output_dir"], str), "output_dir must be a string")
    return cfg


def load_config(path=None, overrides=None):
    """Defaults, then the JSON file at ``path``, then ``overrides``."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        cfg = merge_config(cfg, doc)
    if overrides:
        cfg = merge_config(cfg, overrides)
    return validate_config(cfg)


def build_model(cfg):
    """Instantiate the configured model."""
    m = cfg["model"]
    if m["name"] == "example":
        try:
            return make_example_model(m["v"], m["alpha"], m["rate_beta"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    module, _, attr = m["plugin"].partition(":")
    try:
        factory = getattr(importlib.import_module(module), attr)
    except (ImportError, AttributeError) as exc:
        raise ConfigError(f"cannot load model plugin {m['plugin']!r}: {exc}") from exc
    model = factory(**m["params"])
    if not isinstance(model, PdmpModel):
        raise ConfigError(f"plugin {m['plugin']!r} did not return a PdmpModel")
    return model
