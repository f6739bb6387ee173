"""Turn trained ``(H, G)`` into an inventory policy.

A state triggers an order when the no-action residual
``-1/2 Tr(sigma sigma^T dG) + mu.G + r H - f`` falls to the threshold or
below; the order then raises every item to a single vector ``z*`` found once
by box-constrained minimization.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .core import ConfigurationError, CostParams, DiffusionParams, holding_backlog_cost
from .nn import NonFiniteError
from .sim import Policy, register_policy_kind

METHODS = ("minimize_value", "gradient_stationarity")


class BoundaryWarning(UserWarning):
    pass


def no_action_value(H, G, x, params: CostParams, diff: DiffusionParams):
    """Residual of the no-action operator at ``x`` (rows), in the units of ``H``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    g, J = G.forward_with_jacobian(x)
    h = H(x)[:, 0]
    trace = np.einsum("ij,bji->b", diff.sigma_sq, J)
    val = -0.5 * trace + g @ diff.mu + params.r * h - holding_backlog_cost(x, params)
    if not np.all(np.isfinite(val)):
        raise NonFiniteError("non-finite network output")
    return float(val[0]) if single else val


@dataclass
class ExtractionConfig:
    epsilon: float
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray
    start: np.ndarray
    method: str = "minimize_value"
    restarts: int = 10
    seed: int = 0
    gtol: float = 1e-8

    def __post_init__(self):
        self.bounds_lo = np.atleast_1d(np.asarray(self.bounds_lo, dtype=np.float64))
        self.bounds_hi = np.atleast_1d(np.asarray(self.bounds_hi, dtype=np.float64))
        self.start = np.atleast_1d(np.asarray(self.start, dtype=np.float64))
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}")
        if not (self.bounds_lo <= self.start).all() or not (self.start <= self.bounds_hi).all():
            raise ConfigurationError("need bounds_lo <= start <= bounds_hi")
        if not np.isfinite(self.epsilon):
            raise ConfigurationError("epsilon must be finite")

    @classmethod
    def scaled(cls, epsilon, mean_target, lo=0.0, hi=1.5, start=1.0, **kw):
        """Bounds and start as multiples of the reference order-up-to mean."""
        m = np.asarray(mean_target, dtype=np.float64)
        return cls(epsilon, lo * m, hi * m, start * m, **kw)


@dataclass
class OrderUpTo:
    z: np.ndarray
    objective: float
    at_bound: np.ndarray

    @property
    def warning(self):
        return bool(self.at_bound.any())


def _objective(H, G, params, method):
    c = params.c

    if method == "minimize_value":
        def fun(z):
            y, cache = H.forward(z[None, :], keep=True)
            grad = H.input_gradient(cache, np.ones((1, 1)))[0]
            return float(y[0, 0] + params.c0 + c @ z), grad + c
    else:
        def fun(z):
            g, J = G.forward_with_jacobian(z[None, :])
            res = g[0] + c
            return 0.5 * float(res @ res), J[0].T @ res
    return fun


def compute_order_up_to(H, G, params: CostParams, cfg: ExtractionConfig) -> OrderUpTo:
    """L-BFGS-B from ``cfg.start`` plus jittered restarts; best result kept."""
    fun = _objective(H, G, params, cfg.method)
    bounds = list(zip(cfg.bounds_lo, cfg.bounds_hi))
    rng = np.random.default_rng(cfg.seed)
    width = cfg.bounds_hi - cfg.bounds_lo
    starts = [cfg.start]
    for _ in range(max(cfg.restarts - 1, 0)):
        jitter = cfg.start + 0.1 * width * rng.uniform(-1, 1, size=cfg.start.shape)
        starts.append(np.clip(jitter, cfg.bounds_lo, cfg.bounds_hi))
    best = None
    for s in starts:
        res = minimize(fun, s, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"gtol": cfg.gtol, "ftol": 1e-15, "maxiter": 1000})
        if best is None or res.fun < best.fun:
            best = res
    z = best.x
    _, grad = fun(z)
    tol = 1e-9 * np.maximum(1.0, width)
    at_lo = (z - cfg.bounds_lo <= tol) & (grad > 0)
    at_hi = (cfg.bounds_hi - z <= tol) & (grad < 0)
    out = OrderUpTo(z, float(best.fun), at_lo | at_hi)
    if out.warning:
        warnings.warn(f"order-up-to vector stalls at the box for items "
                      f"{np.flatnonzero(out.at_bound).tolist()}", BoundaryWarning, stacklevel=2)
    return out


def nn_policy_decide(x, z_star, epsilon, H, G, params, diff):
    """Orders ``(z* - x)^+`` where the no-action residual is ``<= epsilon``, else zero."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    fire = no_action_value(H, G, x, params, diff) <= epsilon
    return np.where(fire[:, None], np.maximum(np.asarray(z_star) - x, 0.0), 0.0)


class NeuralPolicy(Policy):
    """Simulator adapter. States are integer, so trigger decisions are cached per state.

    ``params`` are the costs the networks were trained with (scaled by kappa),
    so ``epsilon`` is in those units as well.
    """

    kind = "neural"

    def __init__(self, H, G, z_star, epsilon, params, diff, round_target=True,
                 checkpoint=None):
        self.H, self.G = H, G
        z = np.asarray(z_star, dtype=np.float64)
        self.z_star = np.round(z) if round_target else z
        self.epsilon = float(epsilon)
        self.params = params
        self.diff = diff
        self.checkpoint = checkpoint
        self._cache = {}

    @property
    def d(self):
        return self.z_star.shape[0]

    def triggers(self, x):
        x = np.asarray(x)
        uniq, inv = np.unique(x, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        keys = [row.tobytes() for row in uniq]
        todo = [k for k, key in enumerate(keys) if key not in self._cache]
        if todo:
            vals = no_action_value(self.H, self.G, uniq[todo], self.params, self.diff)
            for k, v in zip(todo, np.atleast_1d(vals)):
                self._cache[keys[k]] = bool(v <= self.epsilon)
        flags = np.array([self._cache[key] for key in keys], dtype=bool)
        return flags[inv]

    def decide(self, x, obs):
        fire = self.triggers(x)
        y = np.where(fire[:, None], np.maximum(self.z_star - x, 0), 0)
        if np.all(self.z_star == np.round(self.z_star)):
            return y.astype(x.dtype)
        return y

    def to_dict(self):
        return {"kind": self.kind, "checkpoint": self.checkpoint,
                "z_star": self.z_star.tolist(), "epsilon": self.epsilon,
                "train_costs": {"c0": self.params.c0, "c": self.params.c.tolist(),
                                "h": self.params.h.tolist(), "p": self.params.p.tolist(),
                                "r": self.params.r},
                "diffusion": {"mu": self.diff.mu.tolist(),
                              "sigma": np.diag(self.diff.sigma).tolist()}}

    def label(self):
        return f"neural(z*={self.z_star.tolist()},eps={self.epsilon:g})"


def _neural_from_dict(m):
    from .nn import load_checkpoint
    (H, G), _ = load_checkpoint(m["checkpoint"])
    tc = m["train_costs"]
    params = CostParams(tc["c0"], tc["c"], tc["h"], tc["p"], tc["r"])
    diff = DiffusionParams(m["diffusion"]["mu"], m["diffusion"]["sigma"])
    return NeuralPolicy(H, G, m["z_star"], m["epsilon"], params, diff, round_target=False,
                        checkpoint=m["checkpoint"])


register_policy_kind("neural", _neural_from_dict)


def order_region(H, G, params, diff, epsilon, axes):
    """Trigger mask on the tensor grid spanned by ``axes`` (one array per item)."""
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    flat = mesh.reshape(-1, len(axes)).astype(np.float64)
    vals = np.concatenate([np.atleast_1d(no_action_value(H, G, flat[i:i + 4096], params, diff))
                           for i in range(0, len(flat), 4096)])
    return (vals <= epsilon).reshape(mesh.shape[:-1]), vals.reshape(mesh.shape[:-1])


def write_region_csv(path, axes, mask, values):
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    with open(path, "w", newline="") as fh:
        fh.write("# sjrp-nn-region v1\n")
        w = csv.writer(fh)
        w.writerow([f"x{i+1}" for i in range(len(axes))] + ["order", "no_action_value"])
        for x, m, v in zip(mesh, mask.reshape(-1), values.reshape(-1)):
            w.writerow(list(x) + [int(m), repr(float(v))])
