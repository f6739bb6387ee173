"""Strict YAML experiment configs.

Unknown keys and wrong types are rejected with the offending line. Loaded
configs carry every default explicitly so the run manifest records them.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass

import numpy as np
import yaml

from .core import TAIL_MASS, ConfigurationError, CostParams, DemandModel, DiffusionParams


class ConfigError(ConfigurationError):
    def __init__(self, msg, line=None, path=""):
        where = f" (line {line})" if line is not None else ""
        loc = f"{path}: " if path else ""
        super().__init__(f"{loc}{msg}{where}")
        self.line = line


REQUIRED = object()


def _num(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise TypeError("expected a number")
    return float(v)


def _int(v):
    if isinstance(v, bool):
        raise TypeError("expected an integer")
    if isinstance(v, float) and v.is_integer():
        v = int(v)
    if not isinstance(v, int):
        raise TypeError("expected an integer")
    return v


def _str(v):
    if not isinstance(v, str):
        raise TypeError("expected a string")
    return v


def _vec(v):
    if isinstance(v, list):
        return [_num(x) for x in v]
    return _num(v)


def _ivec(v):
    if isinstance(v, list):
        return [_int(x) for x in v]
    return _int(v)


def _numlist(v):
    if not isinstance(v, list):
        raise TypeError("expected a list")
    return [_num(x) for x in v]


def _intlist(v):
    if not isinstance(v, list):
        raise TypeError("expected a list")
    return [_int(x) for x in v]


def _schedule(v):
    if not isinstance(v, list) or not v:
        raise TypeError("expected a nonempty list of [last_iteration, value]")
    out = []
    for row in v:
        if not isinstance(row, list) or len(row) != 2:
            raise TypeError("schedule rows are [last_iteration, value]")
        out.append([_int(row[0]), _num(row[1])])
    return out


def _strlist(v):
    if not isinstance(v, list):
        raise TypeError("expected a list")
    return [_str(x) for x in v]


def _opt(conv):
    def f(v):
        return None if v is None else conv(v)
    return f


def _choice(*options):
    def f(v):
        v = _str(v)
        if v not in options:
            raise TypeError(f"expected one of {list(options)}")
        return v
    return f


SCHEMA = {
    "name": (_str, REQUIRED),
    "description": (_str, ""),
    "problem": {
        "demand_mean": (_opt(_numlist), None),
        "variable_cost": (_numlist, REQUIRED),
        "c0": (_num, REQUIRED),
        "h": (_vec, REQUIRED),
        "p": (_vec, REQUIRED),
        "r": (_num, 0.05),
        "demand": {
            "kind": (_choice("poisson", "negbinomial", "diffusion"), REQUIRED),
            "cv": (_opt(_num), None),
            "periods_per_year": (_int, 52),
        },
        "diffusion": {
            "mu": (_opt(_numlist), None),
            "sigma": (_opt(_numlist), None),
        },
    },
    "benchmarks": {
        "families": (_strlist, ["rs", "qs", "can_order", "independent_ss"]),
        "rs_R_max": (_int, 100),
        "qs_samples": (_int, 10000),
        "seed": (_int, 0),
        "n_paths": (_int, 10000),
        "horizon_periods": (_int, 5000),
    },
    "mdp": {
        "state_lo": (_ivec, -200),
        "state_hi": (_ivec, 100),
        "action_hi": (_ivec, 100),
        "tail": (_num, TAIL_MASS),
    },
    "training": {
        "T": (_num, 0.1),
        "N": (_int, 50),
        "K": (_int, 2500),
        "M": (_int, 25000),
        "hidden": (_intlist, [500, 500, 500, 500]),
        "kappa": (_num, 0.1),
        "seed": (_int, 0),
        "checkpoint_every": (_int, 1000),
        "lr_schedule": (_schedule, REQUIRED),
        "beta_schedule": (_schedule, REQUIRED),
        "x_init": (_vec, 0.0),
        "reference": {
            "lam": (_num, REQUIRED),
            "nu": (_num, 0.2),
            "alpha": (_num, 0.0),
            "source": (_choice("explicit", "qs", "can_order", "rs", "independent_ss"),
                       "explicit"),
            "order_up_to_mean": (_opt(_numlist), None),
        },
    },
    "extraction": {
        "epsilon": (_num, REQUIRED),
        "method": (_choice("minimize_value", "gradient_stationarity"), "minimize_value"),
        "bounds": (_numlist, [0.0, 1.5]),
        "start": (_num, 1.0),
        "restarts": (_int, 10),
        "seed": (_int, 0),
    },
    "evaluation": {
        "n_paths": (_int, 1000),
        "horizon_periods": (_int, 5000),
        "seed": (_int, 1),
        "baseline": (_str, "neural"),
    },
    "validation": {
        "x_lo": (_num, -3.0),
        "x_hi": (_num, 6.0),
        "n_points": (_int, 1801),
        "check_lo": (_num, -1.0),
        "check_hi": (_num, 3.0),
        "value_tol": (_num, 0.02),
        "gradient_tol": (_num, 0.05),
        "violation_tol": (_num, 0.01),
        "holdout_paths": (_int, 10000),
    },
}
OPTIONAL_SECTIONS = {"benchmarks", "mdp", "training", "extraction", "evaluation", "validation"}


def _to_python(node, lines, path=""):
    """YAML node tree -> plain data, recording the line of every key path."""
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = k.value
            sub = f"{path}.{key}" if path else key
            if key in out:
                raise ConfigError("duplicate key", k.start_mark.line + 1, sub)
            lines[sub] = k.start_mark.line + 1
            out[key] = _to_python(v, lines, sub)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_to_python(v, lines, path) for v in node.value]
    return yaml.safe_load(yaml.serialize(node))


def _validate(data, schema, lines, path=""):
    if not isinstance(data, dict):
        raise ConfigError("expected a mapping", lines.get(path), path)
    out = {}
    for key in data:
        if key not in schema:
            sub = f"{path}.{key}" if path else key
            raise ConfigError("unknown key", lines.get(sub), sub)
    for key, spec in schema.items():
        sub = f"{path}.{key}" if path else key
        if isinstance(spec, dict):
            if key in data:
                out[key] = _validate(data[key] if data[key] is not None else {}, spec, lines, sub)
            elif path == "" and key in OPTIONAL_SECTIONS:
                continue
            else:
                out[key] = _validate({}, spec, lines, sub)
            continue
        conv, default = spec
        if key in data:
            try:
                out[key] = conv(data[key])
            except TypeError as exc:
                raise ConfigError(str(exc), lines.get(sub), sub) from None
        elif default is REQUIRED:
            raise ConfigError("missing required key", lines.get(path), sub)
        else:
            out[key] = copy.deepcopy(default)
    return out


@dataclass
class ExperimentConfig:
    data: dict
    source: str = "<memory>"

    # -- construction helpers --------------------------------------------------
    @property
    def name(self):
        return self.data["name"]

    @property
    def problem(self):
        return self.data["problem"]

    def section(self, name):
        if name not in self.data:
            raise ConfigError(f"config has no '{name}' section", path=name)
        return self.data[name]

    @property
    def d(self):
        return len(self.problem["variable_cost"])

    def _per_item(self, v):
        return np.broadcast_to(np.asarray(v, dtype=np.float64), (self.d,)).copy()

    def cost_params(self) -> CostParams:
        pr = self.problem
        return CostParams(pr["c0"], pr["variable_cost"], self._per_item(pr["h"]),
                          self._per_item(pr["p"]), pr["r"])

    def demand_model(self) -> DemandModel:
        pr = self.problem
        dm = pr["demand"]
        if dm["kind"] == "diffusion":
            raise ConfigError("diffusion problems have no discrete demand model", path="problem")
        if pr["demand_mean"] is None:
            raise ConfigError("missing demand_mean", path="problem.demand_mean")
        return DemandModel(dm["kind"], pr["demand_mean"], dm["cv"], dm["periods_per_year"])

    def diffusion(self) -> DiffusionParams:
        pr = self.problem
        df = pr["diffusion"]
        if df["mu"] is not None:
            return DiffusionParams(df["mu"], df["sigma"])
        from .core import diffusion_moments
        return diffusion_moments(self.demand_model())

    def hash(self):
        blob = json.dumps(self.data, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def dump(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=False)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dump())


def _check_consistency(data):
    pr = data["problem"]
    d = len(pr["variable_cost"])
    for key in ("demand_mean",):
        if pr[key] is not None and len(pr[key]) != d:
            raise ConfigError(f"{key} has {len(pr[key])} entries, expected {d}", path=f"problem.{key}")
    for key in ("h", "p"):
        if isinstance(pr[key], list) and len(pr[key]) != d:
            raise ConfigError(f"{key} has {len(pr[key])} entries, expected {d}", path=f"problem.{key}")
    kind = pr["demand"]["kind"]
    if kind == "negbinomial" and pr["demand"]["cv"] is None:
        raise ConfigError("negative binomial demand needs cv", path="problem.demand.cv")
    if kind == "diffusion" and pr["diffusion"]["mu"] is None:
        raise ConfigError("diffusion problems need problem.diffusion", path="problem.diffusion")
    if kind != "diffusion" and pr["demand_mean"] is None:
        raise ConfigError("missing demand_mean", path="problem.demand_mean")
    tr = data.get("training")
    if tr is not None:
        ref = tr["reference"]
        if ref["source"] == "explicit":
            if ref["order_up_to_mean"] is None or len(ref["order_up_to_mean"]) != d:
                raise ConfigError("explicit reference needs order_up_to_mean of length d",
                                  path="training.reference.order_up_to_mean")
    ex = data.get("extraction")
    if ex is not None and len(ex["bounds"]) != 2:
        raise ConfigError("bounds are [lo, hi] multiples", path="extraction.bounds")


def parse_config(text, source="<memory>") -> ExperimentConfig:
    try:
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}",
                          mark.line + 1 if mark else None) from None
    if node is None:
        raise ConfigError("empty config")
    lines = {}
    data = _to_python(node, lines)
    data = _validate(data, SCHEMA, lines)
    _check_consistency(data)
    return ExperimentConfig(data, source)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        text = fh.read()
    try:
        return parse_config(text, str(path))
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
