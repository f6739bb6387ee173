"""Exact solutions on truncated grids.

``policy_iteration`` solves the discrete weekly problem for one or two items in
order-up-to form. The expected next-period value is separable across items,
so ``E V(z - xi)`` is a product of one banded transition matrix per axis. The
improvement step builds ``Q(z) = E f(z - xi) / 52 + gamma E V(z - xi)`` once
and takes a suffix minimum of ``c.z + Q(z)`` over ``z >= max(x, 0)``.

``solve_1d_qvi`` is a finite-difference solver for the one-item impulse
control problem with Brownian demand, used as an oracle for the trained
networks.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .core import (TAIL_MASS, ConfigurationError, CostParams,
                   DemandModel, DiffusionParams, holding_backlog_cost, weekly_discount)

MAGIC = b"SJRPMDP1"


class ConvergenceError(RuntimeError):
    pass


class GridTooCoarseError(RuntimeError):
    """The order region reaches the edge of the grid; widen it."""


@dataclass
class TruncatedMdpSpec:
    state_lo: np.ndarray
    state_hi: np.ndarray
    action_hi: np.ndarray
    model: DemandModel
    params: CostParams
    tail: float = TAIL_MASS
    pmfs: list | None = None  # overrides model pmfs (test stubs)

    def __post_init__(self):
        d = self.params.d
        self.state_lo = np.broadcast_to(np.asarray(self.state_lo, dtype=np.int64), (d,)).copy()
        self.state_hi = np.broadcast_to(np.asarray(self.state_hi, dtype=np.int64), (d,)).copy()
        self.action_hi = np.broadcast_to(np.asarray(self.action_hi, dtype=np.int64), (d,)).copy()
        if self.model.d != d:
            raise ConfigurationError("demand and cost dimensions differ")
        if not ((self.state_lo < 0).all() and (self.action_hi >= 0).all()
                and (self.action_hi <= self.state_hi).all()):
            raise ConfigurationError("need state_lo < 0 <= action_hi <= state_hi")
        if self.pmfs is None:
            self.pmfs = [np.asarray(self.model.pmf(i, 1, self.tail)) for i in range(d)]
        else:
            self.pmfs = [np.asarray(pm, dtype=np.float64) for pm in self.pmfs]

    @property
    def d(self):
        return self.params.d

    @property
    def shape(self):
        return tuple(int(v) for v in self.state_hi - self.state_lo + 1)

    def axis(self, i):
        return np.arange(self.state_lo[i], self.state_hi[i] + 1)

    def gamma(self):
        return weekly_discount(self.params, self.model.periods_per_year)


@dataclass
class MdpSolution:
    value: np.ndarray          # grid shape
    target: np.ndarray         # grid shape + (d,); equals the state where no order is placed
    state_lo: np.ndarray
    state_hi: np.ndarray
    residual: float = float("nan")
    iterations: int = 0
    history: list = field(default_factory=list)

    @property
    def d(self):
        return self.state_lo.shape[0]

    def states(self):
        axes = [np.arange(lo, hi + 1) for lo, hi in zip(self.state_lo, self.state_hi)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def order_mask(self):
        return (self.target != self.states()).any(axis=-1)

    def value_at(self, x):
        idx = tuple(np.asarray(x, dtype=np.int64) - self.state_lo)
        return float(self.value[idx])

    def to_policy(self):
        from .sim import TablePolicy
        return TablePolicy(self.state_lo, self.state_hi, self.order_mask().reshape(-1),
                           self.target.reshape(-1, self.d))


def _transition(pmf, n):
    """Row-stochastic ``T[a, b] = P(next index b | post-order index a)``, floor-projected."""
    rows, cols, vals = [], [], []
    base = np.arange(n)
    for k, pk in enumerate(pmf):
        if pk == 0.0:
            continue
        rows.append(base)
        cols.append(np.maximum(base - k, 0))
        vals.append(np.full(n, pk))
    T = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, n))
    T = T.toarray()
    T /= T.sum(axis=1, keepdims=True)  # renormalize the truncated pmf
    return T


class _Operators:
    """Per-spec precomputation shared by evaluation and improvement."""

    def __init__(self, spec: TruncatedMdpSpec):
        self.spec = spec
        self.gamma = spec.gamma()
        self.shape = spec.shape
        self.T = [_transition(spec.pmfs[i], self.shape[i]) for i in range(spec.d)]
        ppy = spec.model.periods_per_year
        F = np.zeros(self.shape)
        for i in range(spec.d):
            x = spec.axis(i).astype(np.float64)
            pm = spec.pmfs[i]
            y = x[:, None] - np.arange(pm.shape[0])
            f = np.where(y >= 0, spec.params.h[i] * y, -spec.params.p[i] * y) @ pm
            f = f / pm.sum() / ppy
            F = F + f.reshape([-1 if j == i else 1 for j in range(spec.d)])
        self.F = F
        cz = np.zeros(self.shape)
        for i in range(spec.d):
            cz = cz + (spec.params.c[i] * spec.axis(i)).reshape(
                [-1 if j == i else 1 for j in range(spec.d)])
        self.cz = cz
        self.states = np.stack(np.meshgrid(*[spec.axis(i) for i in range(spec.d)], indexing="ij"),
                               axis=-1)

    def expect(self, V):
        """``E V(z - xi)`` for every grid point ``z``."""
        W = V
        for i, T in enumerate(self.T):
            W = np.moveaxis(np.tensordot(T, W, axes=(1, i)), 0, i)
        return W

    def q_table(self, V):
        return self.F + self.gamma * self.expect(V)

    def order_values(self, Q):
        """Best ordering value and its target for every state (``inf`` where infeasible)."""
        spec = self.spec
        zlo = -spec.state_lo                     # index of z = 0
        zhi = zlo + spec.action_hi               # index of z = action cap
        box = tuple(slice(int(a), int(b) + 1) for a, b in zip(zlo, zhi))
        A = (self.cz + Q)[box]
        M, arg = _suffix_argmin(A)
        xpos = np.maximum(self.states, 0)
        feasible = (self.states <= spec.action_hi).all(axis=-1)
        idx = tuple(np.minimum(xpos[..., i], spec.action_hi[i]) for i in range(spec.d))
        best = np.where(feasible, M[idx], np.inf)
        target = np.stack([arg[i][idx] for i in range(spec.d)], axis=-1)
        values = spec.params.c0 - self.cz + best
        return values, target

    def flat(self, target):
        idx = target - self.spec.state_lo
        return np.ravel_multi_index(tuple(np.moveaxis(idx, -1, 0)), self.shape)


def _suffix_argmin(A):
    """Minimum of ``A`` over the upper orthant of each index, with its location.

    Ties keep the smaller index. Returns ``(M, [idx_axis0, idx_axis1, ...])``.
    """
    M = A.copy()
    d = A.ndim
    idx = [np.broadcast_to(np.arange(A.shape[i]).reshape([-1 if j == i else 1 for j in range(d)]),
                           A.shape).copy() for i in range(d)]
    for ax in range(d):
        for k in range(A.shape[ax] - 2, -1, -1):
            cur = [slice(None)] * d
            nxt = [slice(None)] * d
            cur[ax] = k
            nxt[ax] = k + 1
            cur, nxt = tuple(cur), tuple(nxt)
            better = M[nxt] < M[cur]
            if better.any():
                M[cur] = np.where(better, M[nxt], M[cur])
                for j in range(d):
                    idx[j][cur] = np.where(better, idx[j][nxt], idx[j][cur])
    return M, idx


def _evaluate(ops: _Operators, target, V0, tol, max_iter):
    """Value of a fixed order-up-to policy by extrapolated fixed-point iteration."""
    spec = ops.spec
    g = ops.gamma
    flat = ops.flat(target).reshape(-1)
    y = target - ops.states
    ordered = (y != 0).any(axis=-1)
    K = (spec.params.c0 * ordered + (y * spec.params.c).sum(axis=-1)).reshape(-1)
    Ff = ops.F.reshape(-1)[flat]
    V = V0.copy()
    for it in range(max_iter):
        W = ops.expect(V).reshape(-1)
        Vn = (K + Ff + g * W[flat]).reshape(V.shape)
        diff = Vn - V
        lo, hi = diff.min(), diff.max()
        V = Vn
        scale = 1.0 + np.abs(V).max()
        if g / (1.0 - g) * (hi - lo) <= tol * scale:
            return V + g / (1.0 - g) * 0.5 * (hi + lo), it + 1
    raise ConvergenceError(f"policy evaluation did not converge (span {hi - lo:.3e})")


def _improve(ops: _Operators, V, current=None, slack=1e-9):
    Q = ops.q_table(V)
    order_val, order_tgt = ops.order_values(Q)
    scale = slack * (1.0 + np.abs(V).max())
    new_target = np.where((order_val < Q - scale)[..., None], order_tgt, ops.states)
    if current is not None:
        # keep the incumbent action unless the challenger is strictly better
        cur_val = _action_values(ops, Q, current)
        keep = cur_val <= np.minimum(Q, order_val) + scale
        new_target = np.where(keep[..., None], current, new_target)
    return new_target


def _action_values(ops, Q, target):
    y = target - ops.states
    ordered = (y != 0).any(axis=-1)
    flat = ops.flat(target)
    return (ops.spec.params.c0 * ordered + (y * ops.spec.params.c).sum(axis=-1)
            + Q.reshape(-1)[flat])


def policy_iteration(spec: TruncatedMdpSpec, tol=1e-10, max_iter=100,
                     eval_max_iter=200000) -> MdpSolution:
    """Optimal value and order-up-to table of the truncated problem (one or two items)."""
    if spec.d > 2:
        raise ConfigurationError("policy_iteration supports at most two items")
    ops = _Operators(spec)
    V = np.zeros(ops.shape)
    target = _improve(ops, V)
    history = []
    for it in range(1, max_iter + 1):
        V, n_eval = _evaluate(ops, target, V, tol, eval_max_iter)
        history.append(float(V.max()))
        new_target = _improve(ops, V, target)
        if np.array_equal(new_target, target):
            sol = MdpSolution(V, target, spec.state_lo.copy(), spec.state_hi.copy(),
                              iterations=it, history=history)
            sol.residual = bellman_residual(sol, spec, _ops=ops)
            return sol
        target = new_target
    sol = MdpSolution(V, target, spec.state_lo.copy(), spec.state_hi.copy(), iterations=max_iter)
    res = bellman_residual(sol, spec, _ops=ops)
    raise ConvergenceError(f"policy iteration hit {max_iter} iterations, residual {res:.3e}")


def bellman_residual(solution: MdpSolution, spec: TruncatedMdpSpec, _ops=None) -> float:
    """``max_x |V(x) - min(Q(x), min_z c(z - x) + Q(z))|``."""
    ops = _ops or _Operators(spec)
    Q = ops.q_table(solution.value)
    order_val, _ = ops.order_values(Q)
    return float(np.abs(solution.value - np.minimum(Q, order_val)).max())


def floor_visit_probability(solution: MdpSolution, spec: TruncatedMdpSpec, x0=None,
                            horizon=2000) -> float:
    """Largest per-period probability of sitting on a grid floor, from ``x0``."""
    ops = _Operators(spec)
    x0 = np.zeros(spec.d, dtype=np.int64) if x0 is None else np.asarray(x0)
    dist = np.zeros(ops.shape)
    dist[tuple(x0 - spec.state_lo)] = 1.0
    flat = ops.flat(solution.target).reshape(-1)
    worst = 0.0
    for _ in range(horizon):
        post = np.bincount(flat, weights=dist.reshape(-1), minlength=dist.size).reshape(ops.shape)
        nxt = post
        for i, T in enumerate(ops.T):
            nxt = np.moveaxis(np.tensordot(T.T, nxt, axes=(1, i)), 0, i)
        dist = nxt
        on_floor = 0.0
        for i in range(spec.d):
            sl = [slice(None)] * spec.d
            sl[i] = 0
            on_floor = max(on_floor, float(dist[tuple(sl)].sum()))
        worst = max(worst, on_floor)
    return worst


def save_solution(solution: MdpSolution, path):
    """Binary layout: magic, int64 d, int64 lo[d], int64 hi[d], float64 value
    (row-major), float64 target (row-major, trailing axis d). Little-endian."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<q", solution.d))
        fh.write(solution.state_lo.astype("<i8").tobytes())
        fh.write(solution.state_hi.astype("<i8").tobytes())
        fh.write(np.ascontiguousarray(solution.value, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(solution.target, dtype="<f8").tobytes())


def load_solution(path) -> MdpSolution:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError("not an MDP solution file")
        (d,) = struct.unpack("<q", fh.read(8))
        lo = np.frombuffer(fh.read(8 * d), dtype="<i8").astype(np.int64)
        hi = np.frombuffer(fh.read(8 * d), dtype="<i8").astype(np.int64)
        shape = tuple(int(v) for v in hi - lo + 1)
        n = int(np.prod(shape))
        value = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape).copy()
        target = np.frombuffer(fh.read(8 * n * d), dtype="<f8").reshape(shape + (d,))
    return MdpSolution(value, target.astype(np.int64), lo, hi)


def write_region_csv(solution: MdpSolution, path, lo=None, hi=None):
    """Order region dump: one row per state with the order flag, target and value."""
    states = solution.states().reshape(-1, solution.d)
    mask = solution.order_mask().reshape(-1)
    tgt = solution.target.reshape(-1, solution.d)
    val = solution.value.reshape(-1)
    keep = np.ones(len(states), dtype=bool)
    if lo is not None:
        keep &= (states >= np.asarray(lo)).all(axis=1)
    if hi is not None:
        keep &= (states <= np.asarray(hi)).all(axis=1)
    d = solution.d
    with open(path, "w", newline="") as fh:
        fh.write("# sjrp-region v1\n")
        w = csv.writer(fh)
        w.writerow([f"x{i+1}" for i in range(d)] + ["order"] + [f"z{i+1}" for i in range(d)]
                   + ["value"])
        for k in np.flatnonzero(keep):
            w.writerow(list(states[k]) + [int(mask[k])] + list(tgt[k]) + [repr(float(val[k]))])


# --------------------------------------------------------------------------- 1-D QVI


@dataclass
class QviSolution:
    x: np.ndarray
    value: np.ndarray
    order_target: np.ndarray
    iterations: int
    history: list

    def reorder_point(self):
        """Largest grid point with an order, or ``nan`` if none."""
        idx = np.flatnonzero(self.order_target > self.x)
        return float(self.x[idx.max()]) if idx.size else float("nan")

    def order_up_to(self):
        idx = np.flatnonzero(self.order_target > self.x)
        return float(self.order_target[idx.max()]) if idx.size else float("nan")

    def interp(self, x):
        return np.interp(x, self.x, self.value)

    def gradient(self):
        return np.gradient(self.value, self.x)


def _no_action_matrix(params, diff, x):
    """Implicit upwind discretization of ``r V + mu V' - sigma^2/2 V''`` with
    asymptotic slope boundary conditions ``-p/r`` (left) and ``h/r`` (right)."""
    n = x.shape[0]
    dx = x[1] - x[0]
    r = params.r
    mu = float(diff.mu[0])
    s2 = float(diff.sigma_sq[0, 0])
    lower = -mu / dx - 0.5 * s2 / dx**2
    diag = r + mu / dx + s2 / dx**2
    upper = -0.5 * s2 / dx**2
    f = holding_backlog_cost(x[:, None], params)
    rhs = np.asarray(f, dtype=np.float64).copy()
    d0 = np.full(n, diag)
    d0[0] += lower
    rhs[0] -= lower * (params.p[0] / r) * dx
    d0[-1] += upper
    rhs[-1] -= upper * (params.h[0] / r) * dx
    A = sparse.diags([np.full(n - 1, lower), d0, np.full(n - 1, upper)], [-1, 0, 1], format="lil")
    return A, rhs


def solve_1d_qvi(params: CostParams, diff: DiffusionParams, x_lo=-3.0, x_hi=6.0,
                 n_points=1801, max_iter=200) -> QviSolution:
    """Grid solution of ``max((r + L)V - f, V - MV) = 0`` by policy iteration.

    ``MV(x) = min_{x' > x} V(x') + c0 + c (x' - x)`` over grid points. Starts
    from the no-order solution, so iterates decrease monotonically.
    """
    if params.d != 1 or diff.d != 1:
        raise ConfigurationError("solve_1d_qvi is one-dimensional")
    x = np.linspace(x_lo, x_hi, int(n_points))
    n = x.shape[0]
    A0, rhs0 = _no_action_matrix(params, diff, x)
    A0 = A0.tocsr()
    c = float(params.c[0])
    c0 = params.c0
    V = spsolve(A0, rhs0)
    history = [V.copy()]
    choice = np.full(n, -1)
    for it in range(1, max_iter + 1):
        # j(i) = argmin_{j > i} (c x_j + V_j)
        a = c * x + V
        sm = np.minimum.accumulate(a[::-1])[::-1]
        nxt = np.append(sm[1:], np.inf)
        jidx = np.full(n, -1, dtype=np.int64)
        best = n - 1
        for i in range(n - 2, -1, -1):
            if a[i + 1] <= a[best]:
                best = i + 1
            jidx[i] = best
        MV = c0 - c * x + nxt
        cont = A0 @ V - rhs0
        interv = V - MV
        new_choice = np.where((interv > cont) & (np.arange(n) < n - 1), jidx, -1)
        if np.array_equal(new_choice, choice) and it > 1:
            break
        choice = new_choice
        A = A0.tolil(copy=True)
        rhs = rhs0.copy()
        for i in np.flatnonzero(choice >= 0):
            A.rows[i] = [i, int(choice[i])]
            A.data[i] = [1.0, -1.0]
            rhs[i] = c0 + c * (x[choice[i]] - x[i])
        V = spsolve(A.tocsr(), rhs)
        history.append(V.copy())
    else:
        raise ConvergenceError("QVI policy iteration did not converge")
    target = np.where(choice >= 0, x[np.maximum(choice, 0)], x)
    if (choice == n - 1).any():
        raise GridTooCoarseError("order targets reach x_hi; widen the grid")
    return QviSolution(x, V, target, it, history)
