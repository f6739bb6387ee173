"""Shared domain types: costs, demand laws, discounting.

Money amounts are float64. Holding and backlog rates ``h`` and ``p`` are
annual rates per unit, so one weekly period of the discrete model is charged
``f(x) / periods_per_year``; the continuous-time model integrates ``f``
directly over years.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import stats

PERIODS_PER_YEAR = 52
TAIL_MASS = 1e-12


class ConfigurationError(ValueError):
    """Raised for parameter sets that violate a model invariant."""


def _vec(values, name, d=None):
    arr = np.atleast_1d(np.asarray(values, dtype=np.float64)).copy()
    if arr.ndim != 1:
        raise ConfigurationError(f"{name} must be one-dimensional")
    if d is not None and arr.shape[0] != d:
        raise ConfigurationError(f"{name} has dimension {arr.shape[0]}, expected {d}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CostParams:
    """Economic environment: fixed cost, per-item linear costs, interest rate."""

    c0: float
    c: np.ndarray
    h: np.ndarray
    p: np.ndarray
    r: float = 0.05

    def __post_init__(self):
        c = _vec(self.c, "c")
        d = c.shape[0]
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "h", _vec(self.h, "h", d))
        object.__setattr__(self, "p", _vec(self.p, "p", d))
        object.__setattr__(self, "c0", float(self.c0))
        object.__setattr__(self, "r", float(self.r))
        if d < 1:
            raise ConfigurationError("need at least one item")
        if self.c0 < 0 or (self.c < 0).any() or (self.h < 0).any() or (self.p < 0).any():
            raise ConfigurationError("costs must be nonnegative")
        if not self.r > 0:
            raise ConfigurationError("interest rate must be positive")

    @property
    def d(self) -> int:
        return self.c.shape[0]

    def scaled(self, kappa: float) -> "CostParams":
        """All money parameters multiplied by ``kappa`` (interest rate unchanged)."""
        if not kappa > 0:
            raise ConfigurationError("kappa must be positive")
        return CostParams(kappa * self.c0, kappa * self.c, kappa * self.h, kappa * self.p, self.r)

    def subset(self, items) -> "CostParams":
        items = list(items)
        return CostParams(self.c0, self.c[items], self.h[items], self.p[items], self.r)


@dataclass(frozen=True)
class DiffusionParams:
    """Brownian approximation of cumulative demand, ``D(t) = mu t + sigma B(t)``."""

    mu: np.ndarray
    sigma: np.ndarray
    sigma_sq: np.ndarray = field(init=False)

    def __post_init__(self):
        mu = _vec(self.mu, "mu")
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if sigma.ndim == 1:
            sigma = np.diag(sigma)
        if sigma.shape != (mu.shape[0], mu.shape[0]):
            raise ConfigurationError("sigma must be d x d")
        sigma = sigma.copy()
        sigma.setflags(write=False)
        sq = sigma @ sigma.T
        sq.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "sigma_sq", sq)

    @property
    def d(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True)
class DemandModel:
    """Per-item weekly demand law with annual mean and (for NB) annual CV.

    Negative binomial items use the annual law NB(rho, q) with
    ``q = 1 / (cv^2 mu)`` and ``rho = mu q / (1 - q)``; one period is
    NB(rho / periods_per_year, q), so annual sums reproduce the annual law.
    """

    kind: str
    annual_mean: np.ndarray
    annual_cv: np.ndarray | None = None
    periods_per_year: int = PERIODS_PER_YEAR

    def __post_init__(self):
        kind = str(self.kind).lower()
        aliases = {"poisson": "poisson", "nb": "negbinomial", "negbinomial": "negbinomial",
                   "negative_binomial": "negbinomial"}
        if kind not in aliases:
            raise ConfigurationError(f"unknown demand kind {self.kind!r}")
        kind = aliases[kind]
        mean = _vec(self.annual_mean, "annual_mean")
        if not (mean > 0).all():
            raise ConfigurationError("annual_mean must be positive")
        if kind == "poisson":
            cv = 1.0 / np.sqrt(mean)
        else:
            if self.annual_cv is None:
                raise ConfigurationError("negative binomial demand needs annual_cv")
            cv = np.broadcast_to(np.asarray(self.annual_cv, dtype=np.float64), mean.shape)
            if not (cv**2 * mean > 1).all():
                raise ConfigurationError("negative binomial needs cv^2 * mean > 1")
        cv = _vec(cv, "annual_cv", mean.shape[0])
        if int(self.periods_per_year) < 1:
            raise ConfigurationError("periods_per_year must be >= 1")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "annual_mean", mean)
        object.__setattr__(self, "annual_cv", cv)
        object.__setattr__(self, "periods_per_year", int(self.periods_per_year))

    @property
    def d(self) -> int:
        return self.annual_mean.shape[0]

    @property
    def weekly_mean(self) -> np.ndarray:
        return self.annual_mean / self.periods_per_year

    def nb_params(self):
        """Annual (shape, success probability) per item for NB demand."""
        q = 1.0 / (self.annual_cv**2 * self.annual_mean)
        rho = self.annual_mean * q / (1.0 - q)
        return rho, q

    def subset(self, items) -> "DemandModel":
        items = list(items)
        return DemandModel(self.kind, self.annual_mean[items], self.annual_cv[items],
                           self.periods_per_year)

    def distribution(self, item: int, periods: int = 1):
        """Frozen scipy law of item demand summed over ``periods`` weeks."""
        if periods < 1:
            raise ValueError("periods must be >= 1")
        if self.kind == "poisson":
            return stats.poisson(self.weekly_mean[item] * periods)
        rho, q = self.nb_params()
        return stats.nbinom(rho[item] * periods / self.periods_per_year, q[item])

    def pmf(self, item: int, periods: int = 1, tail: float = TAIL_MASS) -> np.ndarray:
        """Demand pmf on ``0..k`` with ``k`` the ``1 - tail`` quantile."""
        return _pmf_cached(self, item, periods, tail)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        """Integer demand of shape ``(*size, d)``."""
        size = (size,) if np.isscalar(size) else tuple(size)
        shape = size + (self.d,)
        if self.kind == "poisson":
            return rng.poisson(np.broadcast_to(self.weekly_mean, shape)).astype(np.int64)
        rho, q = self.nb_params()
        return rng.negative_binomial(np.broadcast_to(rho / self.periods_per_year, shape),
                                     np.broadcast_to(q, shape)).astype(np.int64)

    def __hash__(self):
        return hash((self.kind, self.annual_mean.tobytes(), self.annual_cv.tobytes(),
                     self.periods_per_year))

    def __eq__(self, other):
        return (isinstance(other, DemandModel) and self.kind == other.kind
                and np.array_equal(self.annual_mean, other.annual_mean)
                and np.array_equal(self.annual_cv, other.annual_cv)
                and self.periods_per_year == other.periods_per_year)


@lru_cache(maxsize=4096)
def _pmf_cached(model: DemandModel, item: int, periods: int, tail: float) -> np.ndarray:
    dist = model.distribution(item, periods)
    kmax = dist.ppf(1.0 - tail)
    if not np.isfinite(kmax):
        raise FloatingPointError("demand quantile unreachable")
    pmf = dist.pmf(np.arange(int(kmax) + 1))
    pmf.setflags(write=False)
    return pmf


def ordering_cost(y, params: CostParams):
    """``c0 + c.y`` if anything is ordered, else 0. Works on ``(..., d)`` arrays."""
    y = np.asarray(y, dtype=np.float64)
    if (y < 0).any():
        raise ValueError("order quantities must be nonnegative")
    variable = y @ params.c
    cost = np.where(y.sum(axis=-1) > 0, params.c0 + variable, 0.0)
    return cost[()] if cost.ndim == 0 else cost


def holding_backlog_cost(x, params: CostParams):
    """Annual-rate state cost ``sum_i h_i x_i^+ + p_i x_i^-`` on ``(..., d)`` arrays."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.d:
        raise ValueError("state dimension does not match cost parameters")
    cost = (np.maximum(x, 0.0) @ params.h) + (np.maximum(-x, 0.0) @ params.p)
    return cost[()] if np.ndim(cost) == 0 else cost


def period_state_cost(x, params: CostParams, periods_per_year: int = PERIODS_PER_YEAR):
    """State cost charged for one discrete period ending in state ``x``."""
    return holding_backlog_cost(x, params) / periods_per_year


def weekly_demand_sample(model: DemandModel, rng: np.random.Generator) -> np.ndarray:
    return model.sample(rng, ())


def diffusion_moments(model: DemandModel) -> DiffusionParams:
    """Moment-matched Brownian demand: annual mean and annual variance per item."""
    var = (model.annual_cv * model.annual_mean) ** 2
    return DiffusionParams(model.annual_mean, np.sqrt(var))


def weekly_discount(params: CostParams, periods_per_year: int = PERIODS_PER_YEAR) -> float:
    if not params.r > 0:
        raise ConfigurationError("interest rate must be positive")
    return float(np.exp(-params.r / periods_per_year))


def expected_period_cost(model: DemandModel, params: CostParams, item: int, levels,
                         periods: int = 1) -> np.ndarray:
    """``E f_i(y - D_i^(periods)) / 52`` for every ``y`` in ``levels`` (exact pmf sum)."""
    pmf = model.pmf(item, periods)
    y = np.asarray(levels, dtype=np.float64)[..., None] - np.arange(pmf.shape[0])
    f = np.where(y >= 0, params.h[item] * y, -params.p[item] * y)
    return (f @ pmf) / model.periods_per_year
