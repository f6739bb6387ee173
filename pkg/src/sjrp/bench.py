"""Benchmark policy families: analytic discounted costs and tuning searches."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .core import (ConfigurationError, CostParams, DemandModel, expected_period_cost,
                   weekly_discount)
from .mdp import TruncatedMdpSpec, policy_iteration
from .sim import (CanOrderPolicy, IndependentSsPolicy, QsPolicy, RsPolicy, SimConfig,
                  simulate_many)

ALPHA_GRID = tuple(round(0.05 * k, 2) for k in range(1, 21))
CAN_ORDER_ALPHAS = tuple(round(0.05 * k, 2) for k in range(0, 21))
CAN_ORDER_KAPPAS = tuple(round(0.1 * k, 1) for k in range(0, 11))


@dataclass
class SearchResult:
    policy: object
    estimate: object
    candidates: list   # (parameters dict, CostEstimate)

    def write_csv(self, path):
        keys = sorted({k for p, _ in self.candidates for k in p})
        with open(path, "w", newline="") as fh:
            fh.write("# sjrp-search v1\n")
            w = csv.writer(fh)
            w.writerow(keys + ["mean", "std_error"])
            for p, est in self.candidates:
                w.writerow([p.get(k, "") for k in keys] + [est.mean, est.std_error])

    def __iter__(self):
        return iter((self.policy, self.estimate))


def _any_demand_prob(model, periods):
    p_none = 1.0
    for i in range(model.d):
        p_none *= float(model.distribution(i, periods).pmf(0))
    return 1.0 - p_none


# --------------------------------------------------------------------------- (R, S)


def rs_fixed_cost(R, S, model, params):
    gR = weekly_discount(params, model.periods_per_year) ** R
    tail = params.c0 * gR * _any_demand_prob(model, R) / (1.0 - gR)
    return tail + (params.c0 if np.any(np.asarray(S) > 0) else 0.0)


def rs_item_cost(R, S_i, item, model, params):
    g = weekly_discount(params, model.periods_per_year)
    holding = sum(g**r * float(expected_period_cost(model, params, item, [S_i], r + 1)[0])
                  for r in range(R))
    mean_R = model.weekly_mean[item] * R
    return params.c[item] * S_i + (holding + g**R * params.c[item] * mean_R) / (1.0 - g**R)


def rs_analytic_cost(policy: RsPolicy, model: DemandModel, params: CostParams) -> float:
    """Exact discounted cost of an (R, S) policy started at zero inventory."""
    if policy.d != model.d:
        raise ConfigurationError("policy and demand dimensions differ")
    total = rs_fixed_cost(policy.R, policy.S, model, params)
    for i in range(model.d):
        total += rs_item_cost(policy.R, int(policy.S[i]), i, model, params)
    return float(total)


def _scan_convex(obj_chunk, start=0, chunk=64, limit=10**7):
    """First local minimizer of a convex sequence evaluated in chunks."""
    best_y, best_v = None, math.inf
    y0 = start
    while y0 < limit:
        ys = np.arange(y0, y0 + chunk)
        vals = obj_chunk(ys)
        for y, v in zip(ys, vals):
            if v < best_v:
                best_y, best_v = int(y), float(v)
            elif v > best_v:
                return best_y
        y0 += chunk
    raise RuntimeError("convex scan did not terminate")


def rs_basestock_objective(R, item, model, params, ys):
    g = weekly_discount(params, model.periods_per_year)
    ys = np.asarray(ys, dtype=np.float64)
    val = (1.0 - g**R) * params.c[item] * ys
    for r in range(R):
        val = val + g**r * expected_period_cost(model, params, item, ys, r + 1)
    return val


def rs_optimal_basestock(R, item, model, params) -> int:
    if R < 1:
        raise ConfigurationError("R must be >= 1")
    return _scan_convex(lambda ys: rs_basestock_objective(R, item, model, params, ys))


def rs_search(model, params, cfg: SimConfig, R_max=100) -> SearchResult:
    """Simulate ``(R, S*(R))`` for ``R = 1..R_max``; smallest R wins ties."""
    cands = []
    for R in range(1, R_max + 1):
        S = [rs_optimal_basestock(R, i, model, params) for i in range(model.d)]
        cands.append(RsPolicy(R, S))
    ests = simulate_many(cands, model, params, cfg)
    k = int(np.argmin([e.mean for e in ests]))
    return SearchResult(cands[k], ests[k],
                        [({"R": c.R, "S": " ".join(map(str, c.S))}, e) for c, e in zip(cands, ests)])


# --------------------------------------------------------------------------- (Q, S)


def _simulate_cycles(Q, model, n_samples, rng, g_tables=None, S=None, gamma=1.0):
    """Cycle lengths, end-of-cycle demand, and optional discounted state costs.

    A cycle starts right after an order. ``R_Q`` is the first ``R >= 1`` with
    aggregate demand over the cycle reaching ``Q``. With ``g_tables`` the
    state-cost sum ``sum_{t < R_Q} gamma^t g_i(S_i - D_i^(t))`` is accumulated,
    where ``g_i(y) = E f_i(y - xi) / 52``; this equals the realized cost in
    expectation because ``{t < R_Q}`` is decided by demand through period ``t``.
    """
    d = model.d
    R = np.zeros(n_samples, dtype=np.int64)
    D = np.zeros((n_samples, d), dtype=np.int64)
    fsum = np.zeros((n_samples, d))
    active = np.arange(n_samples)
    t = 0
    while active.size:
        if g_tables is not None:
            for i in range(d):
                lvl = S[i] - D[active, i]
                fsum[active, i] += gamma**t * g_tables[i](lvl)
        xi = model.sample(rng, active.size)
        D[active] += xi
        t += 1
        done = D[active].sum(axis=1) >= Q
        R[active[done]] = t
        active = active[~done]
    return R, D, fsum


def qs_cycle_samples(Q, model, n_samples, rng) -> np.ndarray:
    if Q < 0:
        raise ConfigurationError("Q must be >= 0")
    R, _, _ = _simulate_cycles(Q, model, int(n_samples), rng)
    return R


def _rq_survival(R_samples):
    """``P(R_Q > r)`` for ``r = 0 .. max(R_Q) - 1``."""
    counts = np.bincount(R_samples)
    n = R_samples.shape[0]
    return 1.0 - np.cumsum(counts)[:-1] / n


def qs_basestock_objective(item, model, params, R_samples, ys):
    g = weekly_discount(params, model.periods_per_year)
    ys = np.asarray(ys, dtype=np.float64)
    surv = _rq_survival(R_samples)
    val = (1.0 - float(np.mean(g**R_samples))) * params.c[item] * ys
    for r, w in enumerate(surv):
        if w > 0:
            val = val + w * g**r * expected_period_cost(model, params, item, ys, r + 1)
    return val


def qs_optimal_basestock(Q, item, model, params, n_samples=10000, rng=None,
                         R_samples=None) -> int:
    """Sample-average minimizer over ``y >= 0`` with one fixed set of cycle lengths."""
    if R_samples is None:
        if n_samples < 100:
            raise ConfigurationError("n_samples must be >= 100")
        rng = np.random.default_rng(rng)
        R_samples = qs_cycle_samples(Q, model, n_samples, rng)
    elif len(R_samples) < 100:
        raise ConfigurationError("n_samples must be >= 100")
    R_samples = np.asarray(R_samples)
    return _scan_convex(lambda ys: qs_basestock_objective(item, model, params, R_samples, ys))


@dataclass
class QsAnalytic:
    value: float
    std_error: float
    fixed: float
    e_discount: float


def qs_analytic_cost(policy: QsPolicy, model, params, n_samples=100000, rng=None,
                     convention="simulator", return_detail=False):
    """Renewal-reward discounted cost of a (Q, S) policy from zero inventory.

    ``convention="simulator"`` matches :func:`sjrp.sim.simulate_policy`
    exactly: the first order is only charged if ``S != 0`` and a cycle that
    ends with zero demand (possible only when ``Q = 0``) places no order.
    ``convention="renewal"`` charges ``c0`` on every renewal including the
    first, giving the fixed part ``c0 / (1 - E gamma^R_Q)``.
    """
    if convention not in ("simulator", "renewal"):
        raise ValueError("convention must be 'simulator' or 'renewal'")
    rng = np.random.default_rng(rng)
    g = weekly_discount(params, model.periods_per_year)
    S = policy.S
    tables = []
    for i in range(model.d):
        lo = int(S[i] - max(policy.Q, 0) - 1)
        levels = np.arange(lo, int(S[i]) + 1)
        vals = expected_period_cost(model, params, i, levels, 1)

        def lookup(y, lo=lo, vals=vals, i=i):
            k = y - lo
            if (k < 0).any():  # only reachable by the Q = 0 first period
                return expected_period_cost(model, params, i, y, 1)
            return vals[k]
        tables.append(lookup)
    R, D, fsum = _simulate_cycles(policy.Q, model, int(n_samples), rng, tables, S, g)
    gR = g**R.astype(np.float64)
    any_dem = D.sum(axis=1) > 0
    if convention == "renewal":
        any_dem = np.ones_like(any_dem)
    a = fsum.sum(axis=1) + gR * (params.c0 * any_dem + D @ params.c)
    b = gR
    A, B = a.mean(), 1.0 - b.mean()
    ordered_first = convention == "renewal" or bool((S > 0).any())
    head = params.c0 * ordered_first + float(S @ params.c)
    value = head + A / B
    psi = a / B + A * b / B**2
    se = float(psi.std(ddof=1) / np.sqrt(len(psi)))
    fixed = params.c0 * ordered_first + params.c0 * float((gR * any_dem).mean()) / B
    if return_detail:
        return QsAnalytic(float(value), se, float(fixed), float(b.mean()))
    return float(value)


def qs_window(R_star, model):
    m = float(model.weekly_mean.sum())
    lo = max(int(math.floor((R_star - 5) * m)), 0)
    hi = int(math.floor((R_star + 5) * m))
    return lo, hi


def qs_search(model, params, R_star, cfg: SimConfig, n_samples=10000, seed=0) -> SearchResult:
    """Scan ``Q`` over the window around ``R*`` with SAA base stocks; simulated argmin."""
    lo, hi = qs_window(R_star, model)
    cands = []
    for Q in range(lo, hi + 1):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(Q,)))
        Rs = qs_cycle_samples(Q, model, n_samples, rng)
        S = [qs_optimal_basestock(Q, i, model, params, R_samples=Rs) for i in range(model.d)]
        cands.append(QsPolicy(Q, S))
    ests = simulate_many(cands, model, params, cfg)
    k = int(np.argmin([e.mean for e in ests]))
    return SearchResult(cands[k], ests[k],
                        [({"Q": c.Q, "S": " ".join(map(str, c.S))}, e) for c, e in zip(cands, ests)])


# --------------------------------------------------------------------------- (s, S), can-order


def _single_item_policy(item, fixed_cost, model, params, widen=3):
    """(s, S) of the one-item problem with the given fixed cost, by policy iteration."""
    m = model.subset([item])
    half = max(int(math.ceil(40 * m.weekly_mean[0])), 10)
    sub = params.subset([item])
    sub = CostParams(fixed_cost, sub.c, sub.h, sub.p, sub.r)
    for _ in range(widen + 1):
        spec = TruncatedMdpSpec([-half], [half], [half], m, sub)
        sol = policy_iteration(spec)
        x = spec.axis(0)
        tgt = sol.target[:, 0]
        ordering = tgt > x
        if ordering.any() and tgt[ordering].max() < half and not ordering[-1]:
            s = int(x[ordering].max())
            return s, int(tgt[x == s][0])
        half *= 2
    raise RuntimeError("order-up-to level exceeds the truncation bound after widening")


def make_independent_ss(alpha, model, params) -> IndependentSsPolicy:
    if not 0 <= alpha <= 1:
        raise ConfigurationError("alpha must be in [0, 1]")
    s, S = zip(*[_single_item_policy(i, alpha * params.c0, model, params)
                 for i in range(model.d)])
    return IndependentSsPolicy(s, S, alpha)


def independent_ss_search(model, params, cfg: SimConfig, alphas=ALPHA_GRID) -> SearchResult:
    cands = [make_independent_ss(a, model, params) for a in alphas]
    ests = simulate_many(cands, model, params, cfg)
    k = int(np.argmin([e.mean for e in ests]))
    return SearchResult(cands[k], ests[k],
                        [({"alpha": a}, e) for a, e in zip(alphas, ests)])


def can_order_levels(base: IndependentSsPolicy, kappa):
    o = np.floor(kappa * base.s + (1.0 - kappa) * base.S + 0.5).astype(np.int64)
    return CanOrderPolicy(base.s, o, base.S)


def can_order_search(model, params, cfg: SimConfig, alphas=CAN_ORDER_ALPHAS,
                     kappas=CAN_ORDER_KAPPAS) -> SearchResult:
    """Grid over (alpha, kappa); alpha = 0 uses the alpha = 0.05 levels."""
    bases = {}
    cands, keys = [], []
    for a in alphas:
        a_eff = a if a > 0 else 0.05
        if a_eff not in bases:
            bases[a_eff] = make_independent_ss(a_eff, model, params)
        for k in kappas:
            cands.append(can_order_levels(bases[a_eff], k))
            keys.append({"alpha": a, "kappa": k})
    ests = simulate_many(cands, model, params, cfg)
    k = int(np.argmin([e.mean for e in ests]))
    return SearchResult(cands[k], ests[k], list(zip(keys, ests)))
