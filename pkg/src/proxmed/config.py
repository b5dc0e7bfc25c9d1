"""Analysis configuration: schema validation and default materialization."""
import copy
import os

import jsonschema

from .dataset import read_config_file

_num = {"type": "number"}
_opt_num = {"type": ["number", "null"]}
_int = {"type": "integer"}
_bool = {"type": "boolean"}
_names = {"type": "array", "items": {"type": "string"}}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


SCHEMA = _obj({
    "data": _obj({
        "path": {"type": "string"},
        "kinds": {"type": "object", "additionalProperties": {
            "enum": ["continuous", "categorical", "binary"]}},
    }, required=["path"]),
    "roles": _obj({
        "attribute": {"type": "string"},
        "outcome": {"type": "string"},
        "confounders": _names,
        "z_proxies": _names,
        "x_proxies": _names,
        "exclude_attribute_from_confounders": _bool,
    }, required=["attribute", "outcome", "z_proxies", "x_proxies"]),
    "seed": _int,
    "output_dir": {"type": "string"},
    "record_timing": _bool,
    "estimator": _obj({
        "alpha": {"type": ["number", "null"], "minimum": 0},
        "lasso_grid": {"type": ["array", "null"], "items": {"type": "number", "minimum": 0}},
        "n_splits": {"type": "integer", "minimum": 2},
        "alpha_level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "crossfit_folds": {"type": "integer", "minimum": 0},
    }),
    "diagnostics": _obj({
        "alpha_sig": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "tau_star": {"type": "number", "exclusiveMinimum": 0},
        "z_epsilon": {"type": ["number", "null"], "minimum": 0},
        "weak_variant": {"enum": ["orthogonal", "heuristic"]},
        "n_mc": {"type": "integer", "minimum": 100},
    }),
    "selection": _obj({
        "apply": _bool,
        "K": {"type": "integer", "minimum": 1},
        "delta": {"type": "number", "minimum": 0},
        "iterations": {"type": "integer", "minimum": 1},
        "c_sparse": {"type": "number", "minimum": 0},
        "holdout_fraction": {"type": ["number", "null"], "exclusiveMinimum": 0,
                             "exclusiveMaximum": 1},
        "noise_floor": _bool,
        "standardize": _bool,
        "require_overidentification": _bool,
    }),
    "weak_ci": _obj({"low": _num, "high": _num,
                     "step": {"type": "number", "exclusiveMinimum": 0}}),
    "bootstrap": _obj({
        "stage": {"enum": [1, 2, 3]},
        "K": {"type": "integer", "minimum": 1},
        "fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    }),
    "influence": _obj({"top": {"type": "integer", "minimum": 1},
                       "compare_features": _bool}),
    "strata": _obj({"column": {"type": "string"},
                    "min_size": {"type": "integer", "minimum": 1}}, required=["column"]),
    "simulate": _obj({
        "source": {"enum": ["reference", "data"]},
        "reference_n": {"type": "integer", "minimum": 100},
        "theta": _num, "a": _num, "b": _num, "g": _num,
        "sigma_y": {"type": "number", "minimum": 0},
        "binarize": _bool,
        "n": {"type": "integer", "minimum": 10},
        "replicates": {"type": "integer", "minimum": 0},
    }),
})

DEFAULTS = {
    "seed": 0,
    "output_dir": "out",
    "record_timing": False,
    "estimator": {"alpha": None, "lasso_grid": None, "n_splits": 3, "alpha_level": 0.05,
                  "crossfit_folds": 0},
    "diagnostics": {"alpha_sig": 0.05, "tau_star": 0.1, "z_epsilon": None,
                    "weak_variant": "orthogonal", "n_mc": 10_000},
    "selection": {"apply": False, "K": 150, "delta": 0.1, "iterations": 2, "c_sparse": 2.0,
                  "holdout_fraction": None, "noise_floor": True, "standardize": True,
                  "require_overidentification": True},
    "weak_ci": {"low": -1.0, "high": 1.0, "step": 0.001},
    "bootstrap": {"stage": 3, "K": 100, "fraction": 0.5},
    "influence": {"top": 20, "compare_features": True},
    "simulate": {"source": "reference", "reference_n": 20_000, "theta": 0.5, "a": 1.0,
                 "b": 1.0, "g": 0.0, "sigma_y": 1.0, "binarize": True, "n": 10_000,
                 "replicates": 0},
}


class ConfigError(ValueError):
    pass


def _pointer(path):
    parts = [str(p).replace("~", "~0").replace("/", "~1") for p in path]
    return "/" + "/".join(parts)


def validate(raw):
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: (list(map(str, e.path)), e.message))
    if errors:
        lines = [f"{_pointer(e.absolute_path)}: {e.message}" for e in errors]
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(lines))


def materialize(raw):
    """Validated config with every default filled in."""
    validate(raw)
    cfg = copy.deepcopy(DEFAULTS)
    for key, value in raw.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(copy.deepcopy(value))
        else:
            cfg[key] = copy.deepcopy(value)
    if "roles" in cfg:
        cfg["roles"].setdefault("confounders", [])
        cfg["roles"].setdefault("exclude_attribute_from_confounders", False)
    if "data" in cfg:
        cfg["data"].setdefault("kinds", {})
    env = os.environ.get("PROXMED_SEED")
    if env is not None and env.strip():
        try:
            cfg["seed"] = int(env)
        except ValueError:
            raise ConfigError(f"PROXMED_SEED must be an integer, got {env!r}") from None
    return cfg


def load(path):
    try:
        raw = read_config_file(path)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except ValueError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("/: configuration must be an object")
    return materialize(raw)


def require(cfg, *keys):
    missing = [k for k in keys if k not in cfg]
    if missing:
        raise ConfigError("; ".join(f"/{k}: required for this command" for k in missing))
