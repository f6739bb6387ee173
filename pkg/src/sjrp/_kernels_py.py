"""Pure-numpy fallback for :mod:`sjrp._kernels` (vectorized over paths)."""
import numpy as np


def _finish(out, fixed, var, hold, back, norders):
    out[:, 0] = fixed
    out[:, 1] = var
    out[:, 2] = hold
    out[:, 3] = back
    out[:, 4] = norders


def _run(demand, x0, decide, c0, c, h, p, gamma, periods_per_year, out, on_order=None,
         on_demand=None):
    P, H, d = demand.shape
    x = np.broadcast_to(np.asarray(x0, dtype=np.int64), (P, d)).copy()
    fixed = np.zeros(P)
    var = np.zeros(P)
    hold = np.zeros(P)
    back = np.zeros(P)
    norders = np.zeros(P)
    c = np.asarray(c, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    w = 1.0 / periods_per_year
    disc = 1.0
    for n in range(H):
        y = decide(n, x)
        if y is not None:
            ordered = y.sum(axis=1) > 0
            x += y
            fixed += disc * c0 * ordered
            var += disc * (y @ c)
            norders += ordered
            if on_order is not None:
                on_order(ordered)
        dn = demand[:, n, :]
        x -= dn
        if on_demand is not None:
            on_demand(dn)
        hold += disc * w * (np.maximum(x, 0) @ h)
        back += disc * w * (np.maximum(-x, 0) @ p)
        disc *= gamma
    _finish(out, fixed, var, hold, back, norders)


def simulate_rs(demand, x0, R, S, c0, c, h, p, gamma, periods_per_year, out):
    S = np.asarray(S, dtype=np.int64)

    def decide(n, x):
        if n % R:
            return None
        return np.maximum(S - x, 0)

    _run(demand, x0, decide, c0, c, h, p, gamma, periods_per_year, out)


def simulate_qs(demand, x0, Q, S, c0, c, h, p, gamma, periods_per_year, out):
    S = np.asarray(S, dtype=np.int64)
    P = demand.shape[0]
    fresh = np.ones(P, dtype=bool)
    cum = np.zeros(P, dtype=np.int64)

    def decide(n, x):
        fire = fresh | (cum >= Q)
        if not fire.any():
            return None
        return np.where(fire[:, None], np.maximum(S - x, 0), 0)

    def on_order(ordered):
        fresh[ordered] = False
        cum[ordered] = 0

    def on_demand(dn):
        cum[:] += dn.sum(axis=1)

    _run(demand, x0, decide, c0, c, h, p, gamma, periods_per_year, out, on_order, on_demand)


def simulate_can_order(demand, x0, s, o, S, c0, c, h, p, gamma, periods_per_year, out):
    s = np.asarray(s, dtype=np.int64)
    o = np.asarray(o, dtype=np.int64)
    S = np.asarray(S, dtype=np.int64)

    def decide(n, x):
        trigger = (x <= s).any(axis=1)
        if not trigger.any():
            return None
        mask = trigger[:, None] & (x <= o)
        return np.where(mask, np.maximum(S - x, 0), 0)

    _run(demand, x0, decide, c0, c, h, p, gamma, periods_per_year, out)


def simulate_table(demand, x0, lo, hi, strides, order_flag, target, c0, c, h, p, gamma,
                   periods_per_year, out):
    lo = np.asarray(lo, dtype=np.int64)
    hi = np.asarray(hi, dtype=np.int64)
    strides = np.asarray(strides, dtype=np.int64)
    flag = np.asarray(order_flag).astype(bool)
    target = np.asarray(target, dtype=np.int64)

    def decide(n, x):
        idx = (np.clip(x, lo, hi) - lo) @ strides
        fire = flag[idx]
        if not fire.any():
            return None
        return np.where(fire[:, None], np.maximum(target[idx] - x, 0), 0)

    _run(demand, x0, decide, c0, c, h, p, gamma, periods_per_year, out)
