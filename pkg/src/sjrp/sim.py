"""Discrete-time inventory simulation and discounted-cost estimation.

Periods are weeks. In period ``n`` the policy sees the start-of-period state,
places an order that arrives at once, demand is subtracted, and the
end-of-period state is charged ``f(x) / 52``. Every cost of period ``n`` is
weighted ``gamma ** (n - 1)``.

Path ``k`` draws all its demand from its own generator seeded by
``SeedSequence(seed, spawn_key=(k,))``, so results do not depend on block size
or evaluation order, and every policy evaluated with the same seed sees the
same demand (common random numbers).
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import (PERIODS_PER_YEAR, CostParams, DemandModel, ConfigurationError,
                   weekly_discount)

COMPONENTS = ("ordering", "variable", "holding", "backlog")
_BLOCK_BYTES = 64 * 2**20


class PolicyContractError(RuntimeError):
    """A policy returned an invalid order."""


def step(x, order, demand):
    """End-of-period state: order arrives before demand is subtracted."""
    order = np.asarray(order)
    if (order < 0).any():
        raise PolicyContractError("negative order")
    return np.asarray(x) + order - np.asarray(demand)


@dataclass
class SimConfig:
    horizon_periods: int = 10000
    n_paths: int = 10000
    seed: int = 0
    initial_state: np.ndarray | None = None
    block_paths: int = 256
    backend: str | None = None

    def __post_init__(self):
        if self.horizon_periods < 0:
            raise ConfigurationError("horizon_periods must be >= 0")
        if self.n_paths < 1:
            raise ConfigurationError("n_paths must be >= 1")
        if self.block_paths < 1:
            raise ConfigurationError("block_paths must be >= 1")

    def x0(self, d):
        if self.initial_state is None:
            return np.zeros(d, dtype=np.int64)
        x0 = np.asarray(self.initial_state)
        if x0.shape != (d,):
            raise ConfigurationError("initial_state has the wrong dimension")
        return x0


@dataclass
class CostEstimate:
    mean: float
    std_error: float
    n_paths: int
    components: dict
    orders_per_year: float = float("nan")
    wall_time: float = 0.0
    policy_id: str = ""

    def row(self):
        return {"policy": self.policy_id, "mean": self.mean, "std_error": self.std_error,
                "n_paths": self.n_paths, **{k: self.components[k] for k in COMPONENTS},
                "orders_per_year": self.orders_per_year, "wall_time": self.wall_time}


def write_estimates_csv(path, estimates):
    """One row per estimate; first line is a schema comment."""
    rows = [e.row() for e in estimates]
    fields = ["policy", "mean", "std_error", "n_paths", *COMPONENTS, "orders_per_year",
              "wall_time"]
    with open(path, "w", newline="") as fh:
        fh.write("# sjrp-estimates v1\n")
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


@dataclass
class Observation:
    """What a policy sees at the start of a period, for a block of paths.

    ``since_order`` holds per-item demand accumulated since the last positive
    order and is ``inf`` before the first one.
    """

    period: int
    since_order: np.ndarray


@dataclass
class Environment:
    model: DemandModel
    params: CostParams
    gamma: float
    periods_per_year: int = PERIODS_PER_YEAR


class Policy:
    """Base class. Subclasses implement :meth:`decide`; families with a compiled
    kernel also override :meth:`simulate_block`."""

    kind = "policy"

    @property
    def d(self) -> int:
        raise NotImplementedError

    def decide(self, x: np.ndarray, obs: Observation) -> np.ndarray:
        """Order quantities for states ``x`` of shape ``(P, d)``."""
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    def label(self) -> str:
        return self.kind

    def simulate_block(self, demand, x0, env: Environment, backend=None):
        return simulate_block_generic(self, demand, x0, env)


def simulate_block_generic(policy: Policy, demand, x0, env: Environment):
    """Reference period loop driving ``policy.decide``; returns ``(P, 5)`` costs."""
    P, H, d = demand.shape
    params = env.params
    x = np.broadcast_to(np.asarray(x0), (P, d)).astype(np.result_type(x0, np.int64))
    since = np.full((P, d), np.inf)
    out = np.zeros((P, 5))
    w = 1.0 / env.periods_per_year
    disc = 1.0
    for n in range(H):
        y = np.asarray(policy.decide(x, Observation(n, since)))
        if (y < 0).any():
            raise PolicyContractError(f"{policy.label()} returned a negative order")
        ordered = y.sum(axis=1) > 0
        if ordered.any():
            x = x + y
            out[:, 0] += disc * params.c0 * ordered
            out[:, 1] += disc * (y @ params.c)
            out[:, 4] += ordered
            since[ordered] = 0.0
        dn = demand[:, n, :]
        x = x - dn
        since += dn
        out[:, 2] += disc * w * (np.maximum(x, 0) @ params.h)
        out[:, 3] += disc * w * (np.maximum(-x, 0) @ params.p)
        disc *= env.gamma
    return out


def _as_int_vec(v, name):
    arr = np.atleast_1d(np.asarray(v))
    if not np.all(arr == np.round(arr)):
        raise ConfigurationError(f"{name} must be integer-valued")
    return np.ascontiguousarray(arr, dtype=np.int64)


def _kernel_args(env):
    p = env.params
    return (p.c0, np.ascontiguousarray(p.c), np.ascontiguousarray(p.h),
            np.ascontiguousarray(p.p), env.gamma, float(env.periods_per_year))


class RsPolicy(Policy):
    """Every ``R`` periods (starting with the first) order up to ``S``."""

    kind = "rs"

    def __init__(self, R, S):
        self.R = int(R)
        self.S = _as_int_vec(S, "S")
        if self.R < 1:
            raise ConfigurationError("R must be >= 1")
        if (self.S < 0).any():
            raise ConfigurationError("S must be nonnegative")

    @property
    def d(self):
        return self.S.shape[0]

    def decide(self, x, obs):
        if obs.period % self.R:
            return np.zeros_like(x)
        return np.maximum(self.S - x, 0)

    def simulate_block(self, demand, x0, env, backend=None):
        out = np.zeros((demand.shape[0], 5))
        kernels.get_backend(backend).simulate_rs(demand, _as_int_vec(x0, "x0"), self.R, self.S,
                                                 *_kernel_args(env), out)
        return out

    def to_dict(self):
        return {"kind": self.kind, "R": self.R, "S": self.S.tolist()}

    def label(self):
        return f"rs(R={self.R},S={self.S.tolist()})"


class QsPolicy(Policy):
    """Order up to ``S`` once aggregate demand since the last order reaches ``Q``."""

    kind = "qs"

    def __init__(self, Q, S):
        self.Q = float(Q)
        self.S = _as_int_vec(S, "S")
        if self.Q < 0:
            raise ConfigurationError("Q must be >= 0")
        if (self.S < 0).any():
            raise ConfigurationError("S must be nonnegative")

    @property
    def d(self):
        return self.S.shape[0]

    def decide(self, x, obs):
        fire = obs.since_order.sum(axis=1) >= self.Q
        return np.where(fire[:, None], np.maximum(self.S - x, 0), 0)

    def simulate_block(self, demand, x0, env, backend=None):
        out = np.zeros((demand.shape[0], 5))
        kernels.get_backend(backend).simulate_qs(demand, _as_int_vec(x0, "x0"), self.Q, self.S,
                                                 *_kernel_args(env), out)
        return out

    def to_dict(self):
        Q = int(self.Q) if self.Q.is_integer() else self.Q
        return {"kind": self.kind, "Q": Q, "S": self.S.tolist()}

    def label(self):
        return f"qs(Q={self.Q:g},S={self.S.tolist()})"


class CanOrderPolicy(Policy):
    """If any item is at or below ``s``, raise every item at or below ``o`` to ``S``."""

    kind = "can_order"

    def __init__(self, s, o, S):
        self.s = _as_int_vec(s, "s")
        self.o = _as_int_vec(o, "o")
        self.S = _as_int_vec(S, "S")
        if not (self.s.shape == self.o.shape == self.S.shape):
            raise ConfigurationError("s, o, S must share a dimension")
        if (self.s > self.o).any() or (self.o > self.S).any():
            raise ConfigurationError("need s <= o <= S")

    @property
    def d(self):
        return self.S.shape[0]

    def decide(self, x, obs):
        trigger = (x <= self.s).any(axis=1)
        mask = trigger[:, None] & (x <= self.o)
        return np.where(mask, np.maximum(self.S - x, 0), 0)

    def simulate_block(self, demand, x0, env, backend=None):
        out = np.zeros((demand.shape[0], 5))
        kernels.get_backend(backend).simulate_can_order(
            demand, _as_int_vec(x0, "x0"), self.s, self.o, self.S, *_kernel_args(env), out)
        return out

    def to_dict(self):
        return {"kind": self.kind, "s": self.s.tolist(), "o": self.o.tolist(),
                "S": self.S.tolist()}

    def label(self):
        return f"can_order(s={self.s.tolist()},o={self.o.tolist()},S={self.S.tolist()})"


class IndependentSsPolicy(CanOrderPolicy):
    """Each item follows its own (s, S) rule; the shared fixed cost is still paid per order."""

    kind = "independent_ss"

    def __init__(self, s, S, alpha=None):
        s = _as_int_vec(s, "s")
        super().__init__(s, s, S)
        if (self.s >= self.S).any():
            raise ConfigurationError("need s < S")
        self.alpha = None if alpha is None else float(alpha)

    def to_dict(self):
        return {"kind": self.kind, "s": self.s.tolist(), "S": self.S.tolist(),
                "alpha": self.alpha}

    def label(self):
        return f"independent_ss(s={self.s.tolist()},S={self.S.tolist()})"


class TablePolicy(Policy):
    """Order-up-to table on the integer box ``[lo, hi]``; outside states use the
    clamped cell."""

    kind = "table"

    def __init__(self, lo, hi, order_flag, target):
        self.lo = _as_int_vec(lo, "lo")
        self.hi = _as_int_vec(hi, "hi")
        shape = tuple(int(v) for v in self.hi - self.lo + 1)
        flag = np.asarray(order_flag, dtype=np.uint8).reshape(-1)
        target = np.asarray(target).reshape(-1, len(shape))
        if flag.shape[0] != int(np.prod(shape)) or target.shape[0] != flag.shape[0]:
            raise ConfigurationError("table size does not match bounds")
        self.shape = shape
        self.order_flag = np.ascontiguousarray(flag)
        self.target = np.ascontiguousarray(target, dtype=np.int64)
        strides = np.ones(len(shape), dtype=np.int64)
        for j in range(len(shape) - 2, -1, -1):
            strides[j] = strides[j + 1] * shape[j + 1]
        self.strides = strides

    @property
    def d(self):
        return self.lo.shape[0]

    def decide(self, x, obs):
        idx = (np.clip(x, self.lo, self.hi) - self.lo) @ self.strides
        fire = self.order_flag[idx].astype(bool)
        return np.where(fire[:, None], np.maximum(self.target[idx] - x, 0), 0)

    def simulate_block(self, demand, x0, env, backend=None):
        out = np.zeros((demand.shape[0], 5))
        kernels.get_backend(backend).simulate_table(
            demand, _as_int_vec(x0, "x0"), self.lo, self.hi, self.strides, self.order_flag,
            self.target, *_kernel_args(env), out)
        return out

    def to_dict(self):
        return {"kind": self.kind, "lo": self.lo.tolist(), "hi": self.hi.tolist(),
                "order_flag": self.order_flag.tolist(), "target": self.target.tolist()}


class NeverOrderPolicy(Policy):
    kind = "never"

    def __init__(self, d):
        self._d = int(d)

    @property
    def d(self):
        return self._d

    def decide(self, x, obs):
        return np.zeros_like(x)

    def to_dict(self):
        return {"kind": self.kind, "d": self._d}


_REGISTRY = {
    "rs": lambda m: RsPolicy(m["R"], m["S"]),
    "qs": lambda m: QsPolicy(m["Q"], m["S"]),
    "can_order": lambda m: CanOrderPolicy(m["s"], m["o"], m["S"]),
    "independent_ss": lambda m: IndependentSsPolicy(m["s"], m["S"], m.get("alpha")),
    "table": lambda m: TablePolicy(m["lo"], m["hi"], m["order_flag"], m["target"]),
    "never": lambda m: NeverOrderPolicy(m["d"]),
}


def register_policy_kind(kind, factory):
    _REGISTRY[kind] = factory


def policy_from_dict(m: dict) -> Policy:
    kind = m.get("kind")
    if kind not in _REGISTRY:
        raise ConfigurationError(f"unknown policy kind {kind!r}")
    return _REGISTRY[kind](m)


def path_demand(model: DemandModel, seed: int, path_ids, horizon: int) -> np.ndarray:
    """Demand array ``(len(path_ids), horizon, d)`` from per-path substreams."""
    out = np.empty((len(path_ids), horizon, model.d), dtype=np.int64)
    for row, k in enumerate(path_ids):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(int(k),)))
        out[row] = model.sample(rng, horizon)
    return out


def _block_size(cfg, d):
    per_path = max(1, cfg.horizon_periods * d * 8)
    return max(1, min(cfg.block_paths, _BLOCK_BYTES // per_path))


def simulate_paths(policies, model: DemandModel, params: CostParams, cfg: SimConfig):
    """Per-path cost components for each policy on common demand; list of ``(n_paths, 5)``."""
    for pol in policies:
        if pol.d != model.d or params.d != model.d:
            raise ConfigurationError("policy, demand and cost dimensions differ")
    env = Environment(model, params, weekly_discount(params, model.periods_per_year),
                      model.periods_per_year)
    x0 = cfg.x0(model.d)
    results = [np.zeros((cfg.n_paths, 5)) for _ in policies]
    if cfg.horizon_periods == 0:
        return results
    bs = _block_size(cfg, model.d)
    for start in range(0, cfg.n_paths, bs):
        ids = range(start, min(start + bs, cfg.n_paths))
        demand = path_demand(model, cfg.seed, ids, cfg.horizon_periods)
        for pol, res in zip(policies, results):
            res[start:start + len(ids)] = pol.simulate_block(demand, x0, env, cfg.backend)
    return results


def summarize(per_path: np.ndarray, horizon: int, periods_per_year=PERIODS_PER_YEAR,
              policy_id="", wall_time=0.0) -> CostEstimate:
    totals = per_path[:, :4].sum(axis=1)
    n = per_path.shape[0]
    se = float(totals.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    comps = {k: float(per_path[:, i].mean()) for i, k in enumerate(COMPONENTS)}
    rate = (float(per_path[:, 4].mean()) * periods_per_year / horizon if horizon
            else float("nan"))
    return CostEstimate(float(totals.mean()), se, n, comps, rate, wall_time, policy_id)


def simulate_many(policies, model: DemandModel, params: CostParams, cfg: SimConfig):
    """Estimates for several policies under common random numbers."""
    t0 = time.perf_counter()
    paths = simulate_paths(policies, model, params, cfg)
    wall = (time.perf_counter() - t0) / max(1, len(policies))
    return [summarize(pp, cfg.horizon_periods, model.periods_per_year, pol.label(), wall)
            for pol, pp in zip(policies, paths)]


def simulate_policy(policy: Policy, model: DemandModel, params: CostParams,
                    cfg: SimConfig) -> CostEstimate:
    return simulate_many([policy], model, params, cfg)[0]
