"""Compiled vs. numpy simulation kernels on Base Case demand.

    python3 benchmarks/bench_kernels.py [--paths 512] [--horizon 2000] [--repeat 3]

Prints ns per path-period for each policy kind and backend, the speedup, and
checks that both backends return the same per-path costs.
"""
import argparse
import time

import numpy as np

from sjrp.core import CostParams, DemandModel, weekly_discount
from sjrp.kernels import BACKENDS
from sjrp.mdp import TruncatedMdpSpec, policy_iteration
from sjrp.sim import CanOrderPolicy, Environment, QsPolicy, RsPolicy, path_demand


def policies(model, params):
    spec = TruncatedMdpSpec([-60, -60], [60, 60], [60, 60], model, params)
    return {
        "rs": RsPolicy(4, [47, 23]),
        "qs": QsPolicy(40, [57, 28]),
        "can_order": CanOrderPolicy([4, 2], [30, 15], [45, 22]),
        "table": policy_iteration(spec).to_policy(),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--paths", type=int, default=512)
    ap.add_argument("--horizon", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    model = DemandModel("negbinomial", [40, 20], 0.5)
    params = CostParams(50, [0.1, 0.4], [2, 2], [50, 50])
    env = Environment(model, params, weekly_discount(params), 52)
    demand = path_demand(model, 0, range(args.paths), args.horizon)
    x0 = np.zeros(2, dtype=np.int64)
    cells = args.paths * args.horizon
    if "cython" not in BACKENDS:
        print("compiled extension not built; timing the numpy backend only")

    print(f"{'policy':10s} {'backend':8s} {'ns/step':>10s} {'speedup':>8s}")
    for name, pol in policies(model, params).items():
        timings, outs = {}, {}
        for backend in sorted(BACKENDS):
            best = np.inf
            for _ in range(args.repeat):
                t0 = time.perf_counter()
                out = pol.simulate_block(demand, x0, env, backend)
                best = min(best, time.perf_counter() - t0)
            timings[backend], outs[backend] = best, out
        ref = timings["python"]
        for backend, t in timings.items():
            print(f"{name:10s} {backend:8s} {1e9 * t / cells:10.1f} {ref / t:8.1f}x")
        if len(outs) == 2:
            err = np.max(np.abs(outs["cython"] - outs["python"]) / (1 + np.abs(outs["python"])))
            print(f"{name:10s} max relative difference {err:.2e}")


if __name__ == "__main__":
    main()
