"""Versioned JSON experiment configuration.

A config is one JSON object.  Every section is optional and missing keys take
the defaults in :data:`SCHEMA`; unknown keys are rejected so typos surface.
Validation problems raise :class:`ConfigError` carrying a dotted field path
such as ``simulation.h_sim`` or ``grid.counts[1]``.

Randomness: the root ``seed`` is split per stage with
:func:`periodicfp.noise.derive_seed` (``sha256("<root>/<stage>")``), stage
names being listed in :data:`SEED_STAGES`.
"""

import copy
import hashlib
import json
import math
import os

from . import noise

VERSION = 1

SEED_STAGES = ("simulation", "points", "nn/init", "nn/train", "coupling", "coupling/mu0")

_NUM = "num"
_INT = "int"
_STR = "str"
_BOOL = "bool"
_VEC = "vec"
_IVEC = "ivec"
_DICT = "dict"
_ANY = "any"

# key -> (kind, default, constraint); constraint is a tuple of choices or one
# of "pos" (> 0), "nonneg" (>= 0), "unit" ([0, 1]).  ``None`` defaults are
# optional values.
SCHEMA = {
    "sde": {
        "builtin": (_STR, None, None),
        "params": (_DICT, {}, None),
        "drift": (_ANY, None, None),
        "diffusion": (_ANY, None, None),
        "period": (_NUM, None, "pos"),
        "label": (_STR, "custom", None),
        "initial_state": (_VEC, None, None),
    },
    "grid": {
        "lower": (_VEC, None, None),
        "upper": (_VEC, None, None),
        "counts": (_IVEC, None, "pos"),
        "layers": (_INT, None, "pos"),
        "t1": (_NUM, 0.0, None),
    },
    "simulation": {
        "steps": (_INT, 1_000_000, "pos"),
        "h_sim": (_NUM, 1e-3, "pos"),
        "burn_in": (_INT, 100_000, "nonneg"),
        "ensemble": (_INT, 1, "pos"),
        "init": (_STR, None, ("default", "uniform")),
        "origin_radius": (_NUM, None, "pos"),
        "record_every": (_INT, 1, "pos"),
    },
    "solver": {
        "scheme": (_STR, "crank_nicolson", ("forward_euler", "backward_euler", "crank_nicolson")),
        "variant": (_STR, "periodic", ("periodic", "nonperiodic", "part_interval")),
        "tol": (_NUM, 1e-10, "pos"),
        "max_iter": (_INT, None, "pos"),
        "export_operator": (_BOOL, False, None),
    },
    "angles": {
        "N": (_INT, 21, "pos"),
        "layers": (_INT, 20, "pos"),
        "lower": (_NUM, -3.0, None),
        "upper": (_NUM, 3.0, None),
        "scheme": (_STR, "crank_nicolson", ("forward_euler", "backward_euler", "crank_nicolson")),
        "thicknesses": (_IVEC, [1, 2, 3], "pos"),
        "variant": (_STR, "whole_period", ("whole_period", "part_interval")),
        "method": (_STR, "auto", ("auto", "svd", "elimination")),
    },
    "points": {
        "train": (_INT, 20_000, "nonneg"),
        "reference": (_INT, 10_000, "pos"),
        "boundary": (_INT, 2_000, "pos"),
        "alpha": (_NUM, 0.5, "unit"),
        "burn_in_time": (_NUM, 10.0, "nonneg"),
        "t_max": (_NUM, 5.0, "pos"),
        "ref_mode": (_STR, "mesh_free", ("mesh_free", "grid")),
        "h_loc": (_NUM, None, "pos"),
        "delta_loc": (_NUM, None, "pos"),
    },
    "nn": {
        "hidden": (_IVEC, [32, 64, 64, 32], "pos"),
        "lr1": (_NUM, 1e-3, "nonneg"),
        "lr2": (_NUM, 2e-3, "nonneg"),
        "lr3": (_NUM, 2e-3, "nonneg"),
        "decay": (_NUM, 0.9, "unit"),
        "decay_every": (_INT, 40, "pos"),
        "epochs": (_INT, 200, "nonneg"),
        "batch_train": (_INT, 256, "pos"),
        "batch_ref": (_INT, 256, "pos"),
        "batch_boundary": (_INT, 128, "pos"),
        "beta1": (_NUM, 0.9, "unit"),
        "beta2": (_NUM, 0.999, "unit"),
        "eps_adam": (_NUM, 1e-8, "pos"),
        "h_fd": (_NUM, None, "pos"),
        "ht_fd": (_NUM, None, "pos"),
        "periodic_norm": (_STR, "l1", ("l1", "l2")),
    },
    "coupling": {
        "scheme_far": (_STR, "reflection", ("independent", "synchronous", "reflection")),
        "d_switch": (_NUM, None, "nonneg"),
        "t_max": (_NUM, None, "pos"),
        "h_sim": (_NUM, 1e-3, "pos"),
        "x0": (_VEC, None, None),
        "y0": (_VEC, None, None),
        "start_time": (_NUM, 0.0, None),
        "samples": (_INT, 1000, "pos"),
        "init_mode": (_STR, "fixed", ("fixed", "field")),
        "field_layer": (_INT, 0, "nonneg"),
    },
    "tail": {
        "k": (_INT, 6, "pos"),
        "n_off": (_INT, 200, "pos"),
        "tail_start": (_NUM, None, "nonneg"),
        "dt": (_NUM, 0.01, "pos"),
        "min_events": (_INT, 100, "pos"),
    },
    "inputs": {
        "field": (_STR, None, None),
        "points": (_STR, None, None),
        "checkpoint": (_STR, None, None),
        "tau": (_STR, None, None),
    },
    "output": {
        "plots": (_BOOL, True, None),
    },
}


class ConfigError(ValueError):
    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


def _check(path, kind, value, constraint):
    if value is None:
        return None
    if kind == _NUM:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {type(value).__name__}")
        if not math.isfinite(value):
            raise ConfigError(path, "must be finite")
        value = float(value)
    elif kind == _INT:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                value = int(value)
            else:
                raise ConfigError(path, f"expected an integer, got {value!r}")
    elif kind == _STR:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {type(value).__name__}")
    elif kind == _BOOL:
        if not isinstance(value, bool):
            raise ConfigError(path, "expected true or false")
    elif kind == _DICT:
        if not isinstance(value, dict):
            raise ConfigError(path, "expected an object")
        return value
    elif kind in (_VEC, _IVEC):
        if not isinstance(value, list) or not value:
            raise ConfigError(path, "expected a non-empty list")
        inner = _NUM if kind == _VEC else _INT
        return [_check(f"{path}[{i}]", inner, v, constraint) for i, v in enumerate(value)]
    elif kind == _ANY:
        return value
    if isinstance(constraint, tuple):
        if value not in constraint:
            raise ConfigError(path, f"must be one of {', '.join(map(str, constraint))}; got {value!r}")
    elif constraint == "pos" and not value > 0:
        raise ConfigError(path, f"must be positive, got {value!r}")
    elif constraint == "nonneg" and value < 0:
        raise ConfigError(path, f"must be non-negative, got {value!r}")
    elif constraint == "unit" and not 0 <= value <= 1:
        raise ConfigError(path, f"must lie in [0, 1], got {value!r}")
    return value


def validate(raw):
    """Fill defaults and type-check ``raw``; returns a new dict."""
    if not isinstance(raw, dict):
        raise ConfigError("", "config must be a JSON object")
    if "version" not in raw:
        raise ConfigError("version", "missing (current schema version is 1)")
    if raw["version"] != VERSION:
        raise ConfigError("version", f"unsupported version {raw['version']!r}; expected {VERSION}")
    allowed = {"version", "seed", "description"} | set(SCHEMA)
    for key in raw:
        if key not in allowed:
            raise ConfigError(key, "unknown section")
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
        raise ConfigError("seed", "must be an integer in [0, 2^64)")
    out = {"version": VERSION, "seed": seed, "description": raw.get("description", "")}
    for section, fields in SCHEMA.items():
        given = raw.get(section, {})
        if not isinstance(given, dict):
            raise ConfigError(section, "expected an object")
        for key in given:
            if key not in fields:
                raise ConfigError(f"{section}.{key}", "unknown field")
        out[section] = {}
        for key, (kind, default, constraint) in fields.items():
            value = given.get(key, copy.deepcopy(default))
            out[section][key] = _check(f"{section}.{key}", kind, value, constraint)
    _cross_checks(out)
    return out


def _cross_checks(cfg):
    sde = cfg["sde"]
    if (sde["builtin"] is None) == (sde["drift"] is None):
        raise ConfigError("sde", "give exactly one of 'builtin' or 'drift'")
    if sde["builtin"] is not None:
        from .sde import BUILTIN_NAMES

        if sde["builtin"] not in BUILTIN_NAMES:
            raise ConfigError("sde.builtin", f"unknown system; choose from {list(BUILTIN_NAMES)}")
    if sde["drift"] is not None:
        if not isinstance(sde["drift"], list) or not all(isinstance(e, str) for e in sde["drift"]):
            raise ConfigError("sde.drift", "expected a list of term-grammar strings")
        if sde["period"] is None:
            raise ConfigError("sde.period", "required for term-grammar systems")
        if sde["diffusion"] is None:
            raise ConfigError("sde.diffusion", "required for term-grammar systems")
    g = cfg["grid"]
    given = [k for k in ("lower", "upper", "counts", "layers") if g[k] is not None]
    if given and len(given) < 4:
        missing = [k for k in ("lower", "upper", "counts", "layers") if g[k] is None][0]
        raise ConfigError(f"grid.{missing}", "required when any grid field is given")
    if given:
        if not len(g["lower"]) == len(g["upper"]) == len(g["counts"]):
            raise ConfigError("grid", "lower, upper and counts must have the same length")
        for i, (a, b) in enumerate(zip(g["lower"], g["upper"])):
            if not b > a:
                raise ConfigError(f"grid.upper[{i}]", "must exceed grid.lower")
        if g["layers"] < 2:
            raise ConfigError("grid.layers", "needs at least 2 (one stored layer)")
    sim = cfg["simulation"]
    if sim["steps"] <= sim["burn_in"]:
        raise ConfigError("simulation.steps", "must exceed simulation.burn_in")
    a = cfg["angles"]
    if not a["upper"] > a["lower"]:
        raise ConfigError("angles.upper", "must exceed angles.lower")


def resolve_paths(cfg, base_dir):
    """Make ``inputs.*`` paths absolute relative to the config file's directory."""
    for key, value in cfg["inputs"].items():
        if value is not None and not os.path.isabs(value):
            cfg["inputs"][key] = os.path.normpath(os.path.join(base_dir, value))
    return cfg


def load(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("", f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    cfg = validate(raw)
    return resolve_paths(cfg, os.path.dirname(os.path.abspath(path)))


def canonical_hash(cfg):
    """sha256 of the validated config serialised with sorted keys."""
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def stage_seeds(root):
    return {stage: noise.derive_seed(root, stage) for stage in SEED_STAGES}
