"""Command-line runner.

    sjrp <subcommand> --config FILE --out DIR [--seed N] [--threads N] [--checkpoint FILE]

Every subcommand writes CSV tables plus ``manifest_<subcommand>.json`` (config
hash, seed, library versions and the fully defaulted config) into ``--out``.
Rerunning with the same config and seed reproduces every CSV apart from the
``wall_time`` columns.

Exit codes::

    0  success
    2  usage error or unknown subcommand
    3  invalid config or policy file
    4  missing checkpoint or input artifact
    5  training diverged
    6  solver failure (no convergence, grid too coarse)
    7  validation ran but missed its bar
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import platform
import sys
import time

import numpy as np
import yaml

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_DIVERGED = 5
EXIT_SOLVER = 6
EXIT_VALIDATION = 7

MATCH_BAND = 0.01
SUBCOMMANDS = ("bench", "mdp", "train", "extract", "eval", "compare", "validate1d")


class MissingArtifact(FileNotFoundError):
    pass


class ValidationFailed(RuntimeError):
    pass


# --------------------------------------------------------------------------- helpers


def _versions():
    import scipy

    from . import __version__, kernels
    return {"sjrp": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pyyaml": yaml.__version__, "kernel_backend": kernels.BACKEND}


def write_manifest(out, cfg, subcommand, seed, extra=None):
    m = {"subcommand": subcommand, "config_source": cfg.source, "config_hash": cfg.hash(),
         "seed": seed, "versions": _versions(), "config": cfg.data,
         "created": time.strftime("%Y-%m-%dT%H:%M:%S")}
    if extra:
        m.update(extra)
    with open(os.path.join(out, f"manifest_{subcommand}.json"), "w") as fh:
        json.dump(m, fh, indent=2, default=_jsonable)
    return m


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o))


def _require(path):
    if not path or not os.path.exists(path):
        raise MissingArtifact(f"missing input: {path}")
    return path


def save_policy(path, policy):
    with open(path, "w") as fh:
        yaml.safe_dump(json.loads(json.dumps(policy.to_dict(), default=_jsonable)), fh,
                       sort_keys=False, default_flow_style=None)


def load_policy(path):
    from .core import ConfigurationError
    from .sim import policy_from_dict
    _require(path)
    with open(path) as fh:
        try:
            m = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
    if not isinstance(m, dict):
        raise ConfigurationError(f"{path}: policy file must be a mapping")
    for key in ("checkpoint", "solution"):
        if key in m and m[key] and not os.path.isabs(m[key]):
            m[key] = os.path.join(os.path.dirname(os.path.abspath(path)), m[key])
        if key in m and m[key]:
            _require(m[key])
    try:
        return policy_from_dict(m)
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"{path}: bad policy file ({exc})") from None


def _mdp_table_from_dict(m):
    from .mdp import load_solution
    pol = load_solution(m["solution"]).to_policy()
    pol.solution = m["solution"]
    return pol


def _register_kinds():
    from . import policy  # noqa: F401  (registers "neural")
    from .sim import register_policy_kind
    register_policy_kind("mdp_table", _mdp_table_from_dict)


def _sim_config(section, seed=None, **over):
    from .sim import SimConfig
    return SimConfig(horizon_periods=over.get("horizon_periods", section["horizon_periods"]),
                     n_paths=over.get("n_paths", section["n_paths"]),
                     seed=section["seed"] if seed is None else seed)


def _reference_mean(cfg, args):
    """Mean order-up-to vector of the reference process."""
    ref = cfg.section("training")["reference"]
    if ref["source"] == "explicit":
        return np.asarray(ref["order_up_to_mean"], dtype=np.float64)
    path = args.policy or os.path.join(args.out, "policies", f"{ref['source']}.yaml")
    pol = load_policy(path)
    return np.asarray(pol.S, dtype=np.float64)


def _train_config(cfg, out_dir, seed=None):
    from .bsde import TrainConfig
    tr = cfg.section("training")
    return TrainConfig(T=tr["T"], N=tr["N"], K=tr["K"], M=tr["M"],
                       lr_schedule=tr["lr_schedule"], beta_schedule=tr["beta_schedule"],
                       kappa=tr["kappa"], seed=tr["seed"] if seed is None else seed,
                       hidden=tr["hidden"], checkpoint_every=tr["checkpoint_every"],
                       out_dir=out_dir)


def _iteration_from_name(path):
    stem = os.path.splitext(os.path.basename(path))[0]
    if stem.startswith("ckpt_"):
        try:
            return int(stem[5:])
        except ValueError:
            pass
    return 0


# --------------------------------------------------------------------------- subcommands


def cmd_bench(cfg, args):
    from .bench import (can_order_search, independent_ss_search, qs_analytic_cost, qs_search,
                        rs_analytic_cost, rs_search)
    from .sim import write_estimates_csv
    sec = cfg.section("benchmarks") if "benchmarks" in cfg.data else None
    if sec is None:
        from .config import ConfigError
        raise ConfigError("config has no 'benchmarks' section", path="benchmarks")
    model, params = cfg.demand_model(), cfg.cost_params()
    seed = sec["seed"] if args.seed is None else args.seed
    sim_cfg = _sim_config(sec, seed)
    families = list(sec["families"])
    os.makedirs(os.path.join(args.out, "policies"), exist_ok=True)
    results, summary = {}, []
    if "qs" in families and "rs" not in families:
        families.insert(0, "rs")
    for fam in families:
        t0 = time.perf_counter()
        if fam == "rs":
            res = rs_search(model, params, sim_cfg, R_max=sec["rs_R_max"])
            analytic = rs_analytic_cost(res.policy, model, params)
        elif fam == "qs":
            res = qs_search(model, params, results["rs"].policy.R, sim_cfg,
                            n_samples=sec["qs_samples"], seed=seed)
            analytic = qs_analytic_cost(res.policy, model, params, n_samples=sec["qs_samples"],
                                        rng=np.random.default_rng(seed))
        elif fam == "can_order":
            res = can_order_search(model, params, sim_cfg)
            analytic = float("nan")
        elif fam == "independent_ss":
            res = independent_ss_search(model, params, sim_cfg)
            analytic = float("nan")
        else:
            from .config import ConfigError
            raise ConfigError(f"unknown benchmark family {fam!r}", path="benchmarks.families")
        results[fam] = res
        res.write_csv(os.path.join(args.out, f"search_{fam}.csv"))
        save_policy(os.path.join(args.out, "policies", f"{fam}.yaml"), res.policy)
        res.estimate.policy_id = fam
        summary.append(res.estimate)
        print(f"{fam:15s} {res.estimate.mean:12.2f} +- {res.estimate.std_error:.2f}  "
              f"analytic {analytic:.2f}  {res.policy.label()}  ({time.perf_counter() - t0:.1f}s)")
    write_estimates_csv(os.path.join(args.out, "estimates.csv"), summary)
    write_manifest(args.out, cfg, "bench", seed,
                   {"policies": {f: r.policy.to_dict() for f, r in results.items()}})
    return EXIT_OK


def cmd_mdp(cfg, args):
    from .mdp import (TruncatedMdpSpec, bellman_residual, policy_iteration, save_solution,
                      write_region_csv)
    sec = cfg.data.get("mdp")
    if sec is None:
        from .config import ConfigError
        raise ConfigError("config has no 'mdp' section", path="mdp")
    model, params = cfg.demand_model(), cfg.cost_params()
    d = model.d
    vec = lambda v: np.broadcast_to(np.asarray(v, dtype=np.int64), (d,)).copy()  # noqa: E731
    spec = TruncatedMdpSpec(vec(sec["state_lo"]), vec(sec["state_hi"]), vec(sec["action_hi"]),
                            model, params, sec["tail"])
    t0 = time.perf_counter()
    sol = policy_iteration(spec)
    res = bellman_residual(sol, spec)
    os.makedirs(args.out, exist_ok=True)
    save_solution(sol, os.path.join(args.out, "solution.bin"))
    write_region_csv(sol, os.path.join(args.out, "region.csv"))
    os.makedirs(os.path.join(args.out, "policies"), exist_ok=True)
    with open(os.path.join(args.out, "policies", "mdp.yaml"), "w") as fh:
        yaml.safe_dump({"kind": "mdp_table", "solution": "../solution.bin"}, fh)
    x0 = np.zeros(d, dtype=np.int64)
    v0 = sol.value_at(x0)
    with open(os.path.join(args.out, "mdp_summary.csv"), "w", newline="") as fh:
        fh.write("# sjrp-mdp v1\n")
        w = csv.writer(fh)
        w.writerow(["value_at_zero", "bellman_residual", "iterations", "wall_time"])
        w.writerow([repr(v0), repr(res), sol.iterations, time.perf_counter() - t0])
    print(f"V(0) = {v0:.4f}  residual {res:.2e}  iterations {sol.iterations}")
    write_manifest(args.out, cfg, "mdp", None, {"value_at_zero": v0, "bellman_residual": res})
    return EXIT_OK


def cmd_train(cfg, args):
    from .bsde import ReferencePolicy, train
    from .nn import load_checkpoint
    tr = cfg.section("training")
    ref = tr["reference"]
    mean = _reference_mean(cfg, args)
    policy = ReferencePolicy(ref["lam"], mean, ref["nu"], ref["alpha"])
    seed = tr["seed"] if args.seed is None else args.seed
    tcfg = _train_config(cfg, args.out, seed)
    H = G = None
    start = 1
    if args.checkpoint:
        (H, G), _ = load_checkpoint(_require(args.checkpoint))
        start = _iteration_from_name(args.checkpoint) + 1
    every = max(1, tcfg.M // 50) if tcfg.M else 1

    def report(diag):
        m = diag["iteration"]
        if m % every == 0 or m == tcfg.M:
            print(f"iter {m:6d}  loss {diag['loss']:.6g}  violation {diag['violation']:.4f}  "
                  f"H(x0) {diag['mean_h0']:.6g}", flush=True)

    result = train(tcfg, policy, cfg.diffusion(), cfg.cost_params(), tr["x_init"], H, G,
                   callback=report, start_iteration=start)
    write_manifest(args.out, cfg, "train", seed,
                   {"reference_mean": mean, "start_iteration": start,
                    "final_checkpoint": "final.bin", "iterations": len(result.diagnostics)})
    return EXIT_OK


def cmd_extract(cfg, args):
    from .nn import load_checkpoint
    from .policy import ExtractionConfig, NeuralPolicy, compute_order_up_to, order_region
    from .policy import write_region_csv as write_nn_region
    ex = cfg.section("extraction")
    tr = cfg.section("training")
    ckpt = _require(args.checkpoint or os.path.join(args.out, "final.bin"))
    (H, G), _ = load_checkpoint(ckpt)
    mean = _reference_mean(cfg, args)
    lo, hi = ex["bounds"]
    seed = ex["seed"] if args.seed is None else args.seed
    ecfg = ExtractionConfig.scaled(ex["epsilon"], mean, lo, hi, ex["start"], method=ex["method"],
                                   restarts=ex["restarts"], seed=seed)
    params = cfg.cost_params().scaled(tr["kappa"])
    diff = cfg.diffusion()
    zr = compute_order_up_to(H, G, params, ecfg)
    pol = NeuralPolicy(H, G, zr.z, ex["epsilon"], params, diff, round_target=True,
                       checkpoint=os.path.relpath(os.path.abspath(ckpt), os.path.abspath(args.out)))
    os.makedirs(args.out, exist_ok=True)
    save_policy(os.path.join(args.out, "policy_neural.yaml"), pol)
    with open(os.path.join(args.out, "order_up_to.csv"), "w", newline="") as fh:
        fh.write("# sjrp-extract v1\n")
        w = csv.writer(fh)
        w.writerow(["item", "z_continuous", "z_rounded", "at_bound"])
        for i in range(len(zr.z)):
            w.writerow([i + 1, repr(float(zr.z[i])), int(pol.z_star[i]), int(zr.at_bound[i])])
    if pol.d <= 2:
        span = np.maximum(np.ceil(2 * pol.z_star), 10)
        axes = [np.arange(-int(s), int(s) + 1) for s in span]
        mask, vals = order_region(H, G, params, diff, ex["epsilon"], axes)
        write_nn_region(os.path.join(args.out, "nn_region.csv"), axes, mask, vals)
    print(f"z* = {pol.z_star.tolist()}  epsilon {ex['epsilon']:g}")
    write_manifest(args.out, cfg, "extract", seed,
                   {"checkpoint": ckpt, "z_continuous": zr.z, "z_star": pol.z_star,
                    "at_bound": zr.at_bound.tolist()})
    return EXIT_OK


def cmd_eval(cfg, args):
    from .sim import simulate_many, write_estimates_csv
    ev = cfg.section("evaluation")
    if not args.policy:
        raise MissingArtifact("eval needs at least one --policy file")
    pols = [load_policy(p) for p in args.policy]
    seed = ev["seed"] if args.seed is None else args.seed
    ests = simulate_many(pols, cfg.demand_model(), cfg.cost_params(), _sim_config(ev, seed))
    for path, est in zip(args.policy, ests):
        est.policy_id = os.path.splitext(os.path.basename(path))[0]
        print(f"{est.policy_id:20s} {est.mean:12.2f} +- {est.std_error:.2f}")
    os.makedirs(args.out, exist_ok=True)
    write_estimates_csv(os.path.join(args.out, "estimates.csv"), ests)
    write_manifest(args.out, cfg, "eval", seed, {"policies": list(args.policy)})
    return EXIT_OK


def read_estimates(path):
    _require(path)
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# sjrp-estimates"):
            raise ValueError(f"{path}: not an estimates table")
        rows = list(csv.DictReader(fh))
    return [{"policy": r["policy"], "mean": float(r["mean"]), "std_error": float(r["std_error"])}
            for r in rows]


def gap_row(bench_mean, bench_se, base_mean, base_se):
    """Relative gap ``(bench - base) / base`` with a delta-method standard error
    treating the two estimates as independent."""
    gap = (bench_mean - base_mean) / base_mean
    se = math.sqrt(bench_se**2 + (bench_mean / base_mean) ** 2 * base_se**2) / abs(base_mean)
    return gap, se


def classify(gap, band=MATCH_BAND):
    if abs(gap) <= band:
        return "match"
    return "beat" if gap > band else "trail"


def cmd_compare(cfg, args):
    from .config import ConfigError
    if not args.estimates:
        raise MissingArtifact("compare needs at least one estimates.csv")
    rows = []
    for path in args.estimates:
        rows += read_estimates(path)
    baseline = args.baseline or cfg.section("evaluation")["baseline"]
    base = [r for r in rows if r["policy"] == baseline]
    if len(base) != 1:
        raise ConfigError(f"baseline {baseline!r} matches {len(base)} rows",
                          path="evaluation.baseline")
    b = base[0]
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "compare.csv"), "w", newline="") as fh:
        fh.write("# sjrp-compare v1\n")
        w = csv.writer(fh)
        w.writerow(["policy", "mean", "std_error", "baseline", "gap", "gap_se", "label"])
        for r in rows:
            if r is b:
                continue
            gap, se = gap_row(r["mean"], r["std_error"], b["mean"], b["std_error"])
            label = classify(gap)
            w.writerow([r["policy"], repr(r["mean"]), repr(r["std_error"]), baseline,
                        repr(gap), repr(se), label])
            print(f"{r['policy']:20s} {r['mean']:12.2f}  gap {100 * gap:7.2f}% "
                  f"+- {100 * se:.2f}%  {label}")
    write_manifest(args.out, cfg, "compare", None,
                   {"estimates": list(args.estimates), "baseline": baseline,
                    "match_band": MATCH_BAND})
    return EXIT_OK


def sup_norm_report(H, G, qvi, kappa, lo, hi):
    """Relative sup-norm errors of ``H / kappa`` and ``G / kappa`` against the QVI
    solution on the grid points in ``[lo, hi]``."""
    keep = (qvi.x >= lo) & (qvi.x <= hi)
    x = qvi.x[keep]
    V = qvi.value[keep]
    dV = qvi.gradient()[keep]
    h = H(x[:, None])[:, 0] / kappa
    g = G(x[:, None])[:, 0] / kappa
    return {"value_error": float(np.max(np.abs(h - V)) / np.max(np.abs(V))),
            "gradient_error": float(np.max(np.abs(g - dV)) / np.max(np.abs(dV))),
            "value_at_zero_qvi": float(qvi.interp(0.0)),
            "value_at_zero_nn": float(H(np.zeros((1, 1)))[0, 0] / kappa)}


def cmd_validate1d(cfg, args):
    from .bsde import ReferencePolicy, euler_maruyama, iteration_rng, train, violation_probability
    from .config import ConfigError
    from .mdp import solve_1d_qvi
    from .nn import load_checkpoint
    if cfg.d != 1:
        raise ConfigError("validate1d needs a one-item problem", path="problem.variable_cost")
    va = cfg.section("validation")
    tr = cfg.section("training")
    params, diff = cfg.cost_params(), cfg.diffusion()
    qvi = solve_1d_qvi(params, diff, va["x_lo"], va["x_hi"], va["n_points"])
    ref = tr["reference"]
    mean = _reference_mean(cfg, args)
    policy = ReferencePolicy(ref["lam"], mean, ref["nu"], ref["alpha"])
    seed = tr["seed"] if args.seed is None else args.seed
    os.makedirs(args.out, exist_ok=True)
    if args.checkpoint:
        (H, G), _ = load_checkpoint(_require(args.checkpoint))
        x_end = np.full((tr["K"], 1), float(np.asarray(tr["x_init"]).reshape(-1)[0]))
    else:
        result = train(_train_config(cfg, args.out, seed), policy, diff, params, tr["x_init"])
        H, G, x_end = result.H, result.G, result.x_state
    rep = sup_norm_report(H, G, qvi, tr["kappa"], va["check_lo"], va["check_hi"])
    # holdout violation rate on fresh paths continuing from the final training states
    K = va["holdout_paths"]
    x0 = x_end[np.arange(K) % x_end.shape[0]]
    dt = tr["T"] / tr["N"]
    bundle = euler_maruyama(policy, diff, tr["T"], dt, x0, iteration_rng(seed + 1, 0))
    rep["violation"] = violation_probability(H, G, bundle, params.scaled(tr["kappa"]), diff)
    rep["reorder_point_qvi"] = qvi.reorder_point()
    rep["order_up_to_qvi"] = qvi.order_up_to()
    passed = (rep["value_error"] <= va["value_tol"] and rep["gradient_error"] <= va["gradient_tol"]
              and rep["violation"] < va["violation_tol"])
    rep["passed"] = bool(passed)
    with open(os.path.join(args.out, "validate1d.csv"), "w", newline="") as fh:
        fh.write("# sjrp-validate1d v1\n")
        w = csv.writer(fh)
        w.writerow(["metric", "value", "bar"])
        w.writerow(["value_error", repr(rep["value_error"]), va["value_tol"]])
        w.writerow(["gradient_error", repr(rep["gradient_error"]), va["gradient_tol"]])
        w.writerow(["violation", repr(rep["violation"]), va["violation_tol"]])
        w.writerow(["passed", int(passed), ""])
    with open(os.path.join(args.out, "qvi.csv"), "w", newline="") as fh:
        fh.write("# sjrp-qvi v1\n")
        w = csv.writer(fh)
        w.writerow(["x", "value", "gradient", "h_nn", "g_nn"])
        h = H(qvi.x[:, None])[:, 0] / tr["kappa"]
        g = G(qvi.x[:, None])[:, 0] / tr["kappa"]
        for row in zip(qvi.x, qvi.value, qvi.gradient(), h, g):
            w.writerow([repr(float(v)) for v in row])
    print(json.dumps(rep, indent=2))
    write_manifest(args.out, cfg, "validate1d", seed, {"report": rep})
    if not passed:
        raise ValidationFailed("validation bars not met")
    return EXIT_OK


COMMANDS = {"bench": cmd_bench, "mdp": cmd_mdp, "train": cmd_train, "extract": cmd_extract,
            "eval": cmd_eval, "compare": cmd_compare, "validate1d": cmd_validate1d}


# --------------------------------------------------------------------------- entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    p = _Parser(prog="sjrp", description="Stochastic joint replenishment workbench")
    p.add_argument("subcommand", help=" | ".join(SUBCOMMANDS))
    p.add_argument("--config", required=True, help="experiment YAML")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1)")
    p.add_argument("--checkpoint", default=None, help="network checkpoint to resume or use")
    p.add_argument("--policy", action="append", default=[],
                   help="policy YAML (eval; reference for train/extract); repeatable")
    p.add_argument("--estimates", action="append", default=[],
                   help="estimates.csv for compare; repeatable")
    p.add_argument("--baseline", default=None, help="baseline policy id for compare")
    return p


def _limit_threads(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return
    threadpool_limits(n)


def run(subcommand, config_path, out, seed=None, checkpoint=None, policy=(), estimates=(),
        baseline=None, threads=1):
    argv = [subcommand, "--config", str(config_path), "--out", str(out), "--threads", str(threads)]
    if seed is not None:
        argv += ["--seed", str(seed)]
    if checkpoint:
        argv += ["--checkpoint", str(checkpoint)]
    for p in policy:
        argv += ["--policy", str(p)]
    for e in estimates:
        argv += ["--estimates", str(e)]
    if baseline:
        argv += ["--baseline", baseline]
    return main(argv)


def main(argv=None):
    from .bsde import TrainingDiverged
    from .config import load_config
    from .core import ConfigurationError
    from .mdp import ConvergenceError, GridTooCoarseError
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    if args.subcommand not in COMMANDS:
        print(f"sjrp: unknown subcommand {args.subcommand!r}; choose from {', '.join(SUBCOMMANDS)}",
              file=sys.stderr)
        return EXIT_USAGE
    if args.threads < 1:
        print("sjrp: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    _limit_threads(args.threads)
    _register_kinds()
    try:
        cfg = load_config(_require(args.config))
        os.makedirs(args.out, exist_ok=True)
        args.policy = args.policy if args.subcommand == "eval" else (args.policy[0] if args.policy
                                                                     else None)
        return COMMANDS[args.subcommand](cfg, args)
    except MissingArtifact as exc:
        print(f"sjrp: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigurationError, ValueError) as exc:
        print(f"sjrp: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"sjrp: training diverged: {exc} (last checkpoint {exc.checkpoint})",
              file=sys.stderr)
        return EXIT_DIVERGED
    except (ConvergenceError, GridTooCoarseError) as exc:
        print(f"sjrp: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValidationFailed as exc:
        print(f"sjrp: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
