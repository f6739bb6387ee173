"""Reference-process simulation, the penalized pathwise loss, and training.

Training learns ``H ~ V`` and ``G ~ grad V`` by maximizing the mean of
``H(x0)`` while penalizing paths on which the discounted inequality

    H(x0) <= e^{-rT} H(X_T) + sum_n e^{-r t_n} [G(X_n).sigma dB_n + f(X_n) dt + c(dU_n)]

fails. Paths come from a controlled diffusion whose orders arrive as a
thinned Bernoulli stream.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .core import ConfigurationError, CostParams, DiffusionParams, holding_backlog_cost
from .nn import AdamState, Mlp, NonFiniteError, adam_step, he_init, save_checkpoint

DIVERGENCE_LIMIT = 1e12


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class ReferencePolicy:
    lam: float                   # orders per year
    order_up_to_mean: np.ndarray  # E[Z]
    nu: float = 0.0              # lognormal coefficient of variation
    alpha: float = 0.0           # exponential floor scale, mean alpha * mu_i / lam

    def __post_init__(self):
        S = np.atleast_1d(np.asarray(self.order_up_to_mean, dtype=np.float64))
        object.__setattr__(self, "order_up_to_mean", S)
        if not self.lam > 0:
            raise ConfigurationError("lam must be positive")
        if self.nu < 0:
            raise ConfigurationError("nu must be >= 0")
        if not 0 <= self.alpha < 1:
            raise ConfigurationError("alpha must be in [0, 1)")
        if not (S > 0).all():
            raise ConfigurationError("order_up_to_mean must be positive")

    def lognormal_params(self):
        s2 = np.log1p(self.nu**2)
        return np.log(self.order_up_to_mean) - 0.5 * s2, np.sqrt(s2)


@dataclass
class PathBundle:
    """A batch of ``K`` reference paths; leading axis indexes paths."""

    states: np.ndarray       # (K, N + 1, d)
    dB: np.ndarray           # (K, N, d)
    dU: np.ndarray           # (K, N, d)
    dt: float

    @property
    def N(self):
        return self.dB.shape[1]

    @property
    def T(self):
        return self.N * self.dt

    @property
    def x0(self):
        return self.states[:, 0]

    @property
    def terminal(self):
        return self.states[:, -1]


def euler_maruyama(policy: ReferencePolicy, diff: DiffusionParams, T, dt, x0, rng,
                   K=None) -> PathBundle:
    """Simulate ``X_{n+1} = X_n - mu dt - sigma dB_n + dU_n`` for ``K`` paths."""
    N = int(round(T / dt))
    if N < 1 or abs(N * dt - T) > 1e-9 * max(T, 1.0):
        raise ConfigurationError("T must be a positive multiple of dt")
    if policy.lam * dt > 1:
        raise ConfigurationError("lam * dt must be <= 1")
    d = diff.d
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim == 1:
        K = 1 if K is None else int(K)
        x0 = np.broadcast_to(x0, (K, d))
    K = x0.shape[0]
    rng = np.random.default_rng(rng)
    dB = rng.standard_normal((K, N, d)) * np.sqrt(dt)
    fire = rng.random((K, N)) < policy.lam * dt
    mln, sln = policy.lognormal_params()
    Z = np.exp(mln + sln * rng.standard_normal((K, N, d)))
    if policy.alpha > 0:
        zeta = rng.exponential(1.0, (K, N, d)) * (policy.alpha * diff.mu / policy.lam)
    else:
        zeta = np.zeros((K, N, d))
    drift = diff.mu * dt
    noise = dB @ diff.sigma.T
    X = np.empty((K, N + 1, d))
    dU = np.zeros((K, N, d))
    X[:, 0] = x0
    for n in range(N):
        x = X[:, n]
        f = fire[:, n]
        if f.any():
            dU[f, n] = np.maximum(Z[f, n] - x[f], zeta[f, n])
        X[:, n + 1] = x - drift - noise[:, n] + dU[:, n]
    return PathBundle(X, dB, dU, dt)


def _path_costs(bundle: PathBundle, params: CostParams, r):
    """Discounted running cost ``sum_n e^{-r t_n} (f(X_n) dt + c(dU_n))`` per path."""
    K, N, d = bundle.dB.shape
    disc = np.exp(-r * bundle.dt * np.arange(N))
    f = holding_backlog_cost(bundle.states[:, :N], params)                   # (K, N)
    ordered = bundle.dU.sum(axis=-1) > 0
    c = np.where(ordered, params.c0 + bundle.dU @ params.c, 0.0)              # (K, N)
    return (f * bundle.dt + c) @ disc, disc


def slack(H: Mlp, G: Mlp, bundle: PathBundle, params: CostParams, diff: DiffusionParams,
          _parts=False):
    """Violation of the pathwise inequality per path (positive when violated)."""
    K, N, d = bundle.dB.shape
    r = params.r
    running, disc = _path_costs(bundle, params, r)
    h0 = H(bundle.x0)[:, 0]
    hT = H(bundle.terminal)[:, 0]
    Xn = bundle.states[:, :N].reshape(K * N, d)
    g = G(Xn).reshape(K, N, d)
    sdB = bundle.dB @ diff.sigma.T
    mart = np.einsum("knd,knd,n->k", g, sdB, disc)
    s = h0 - np.exp(-r * bundle.T) * hT - mart - running
    if _parts:
        return s, h0
    return s


def loss(H, G, bundle, beta, params, diff) -> float:
    s, h0 = slack(H, G, bundle, params, diff, _parts=True)
    val = float(np.mean(-h0 + beta * np.maximum(s, 0.0) ** 2))
    if not np.isfinite(val):
        raise NonFiniteError("non-finite loss")
    return val


def violation_probability(H, G, bundle, params, diff) -> float:
    return float(np.mean(slack(H, G, bundle, params, diff) > 0))


def loss_and_gradients(H: Mlp, G: Mlp, bundle: PathBundle, beta, params, diff):
    """Loss, parameter gradients of both networks, and diagnostics."""
    K, N, d = bundle.dB.shape
    r = params.r
    running, disc = _path_costs(bundle, params, r)
    y0, c0 = H.forward(bundle.x0, keep=True)
    yT, cT = H.forward(bundle.terminal, keep=True)
    Xn = bundle.states[:, :N].reshape(K * N, d)
    g, cg = G.forward(Xn, keep=True)
    g = g.reshape(K, N, d)
    sdB = bundle.dB @ diff.sigma.T
    eT = np.exp(-r * bundle.T)
    mart = np.einsum("knd,knd,n->k", g, sdB, disc)
    s = y0[:, 0] - eT * yT[:, 0] - mart - running
    sp = np.maximum(s, 0.0)
    val = float(np.mean(-y0[:, 0] + beta * sp**2))
    if not np.isfinite(val):
        raise NonFiniteError("non-finite loss")
    ds = 2.0 * beta * sp / K
    gH = [a + b for a, b in zip(H.backward(c0, (-1.0 / K + ds)[:, None]),
                                H.backward(cT, (-eT * ds)[:, None]))]
    dG = -(ds[:, None, None] * disc[None, :, None]) * sdB
    gG = G.backward(cg, dG.reshape(K * N, d))
    diag = {"loss": val, "violation": float(np.mean(s > 0)), "mean_h0": float(np.mean(y0)),
            "mean_slack": float(np.mean(s))}
    return val, gH, gG, diag


def step_schedule(steps):
    """``[(last_iteration, value), ...]`` -> function of the 1-based iteration."""
    steps = sorted((int(e), float(v)) for e, v in steps)
    if not steps:
        raise ConfigurationError("empty schedule")

    def at(m):
        for end, v in steps:
            if m <= end:
                return v
        return steps[-1][1]
    at.steps = steps
    return at


@dataclass
class TrainConfig:
    T: float
    N: int
    K: int
    M: int
    lr_schedule: list
    beta_schedule: list
    kappa: float = 1.0
    seed: int = 0
    hidden: list = field(default_factory=lambda: [500, 500, 500, 500])
    checkpoint_every: int = 1000
    out_dir: str | None = None

    def __post_init__(self):
        if self.T <= 0 or self.N < 1 or self.K < 1 or self.M < 0:
            raise ConfigurationError("need T > 0, N >= 1, K >= 1, M >= 0")
        if self.kappa <= 0:
            raise ConfigurationError("kappa must be positive")
        for name in ("lr_schedule", "beta_schedule"):
            sched = getattr(self, name)
            if not sched:
                raise ConfigurationError(f"{name} is empty")
            if self.M and max(int(e) for e, _ in sched) < self.M:
                raise ConfigurationError(f"{name} does not cover iteration {self.M}")

    @property
    def dt(self):
        return self.T / self.N


@dataclass
class TrainResult:
    H: Mlp
    G: Mlp
    diagnostics: list
    x_state: np.ndarray

    def write_diagnostics(self, path):
        write_diagnostics(path, self.diagnostics)


DIAG_FIELDS = ["iteration", "loss", "violation", "mean_h0", "mean_slack", "lr", "beta"]


def write_diagnostics(path, rows):
    with open(path, "w", newline="") as fh:
        fh.write("# sjrp-train v1\n")
        w = csv.DictWriter(fh, fieldnames=DIAG_FIELDS, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def init_networks(d, hidden, seed):
    ss = np.random.SeedSequence(seed, spawn_key=(0,))
    kh, kg = ss.spawn(2)
    return he_init([d, *hidden, 1], np.random.default_rng(kh)), \
        he_init([d, *hidden, d], np.random.default_rng(kg))


def iteration_rng(seed, m):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, int(m))))


def train(cfg: TrainConfig, policy: ReferencePolicy, diff: DiffusionParams, params: CostParams,
          x_init, H=None, G=None, callback=None, start_iteration=1) -> TrainResult:
    """Algorithm loop: simulate, penalized loss, Adam on both networks, carry states."""
    d = diff.d
    if params.d != d or policy.order_up_to_mean.shape[0] != d:
        raise ConfigurationError("dimension mismatch between costs, diffusion and policy")
    scaled = params.scaled(cfg.kappa)
    if H is None or G is None:
        H, G = init_networks(d, cfg.hidden, cfg.seed)
    pol = ReferencePolicy(policy.lam, policy.order_up_to_mean, policy.nu, policy.alpha)
    lr_at = step_schedule(cfg.lr_schedule)
    beta_at = step_schedule(cfg.beta_schedule)
    adam_h = AdamState(H.params)
    adam_g = AdamState(G.params)
    x = np.asarray(x_init, dtype=np.float64)
    x = np.broadcast_to(x, (cfg.K, d)).copy() if x.ndim <= 1 else x.copy()
    diags = []
    last_ckpt = None
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
    for m in range(start_iteration, cfg.M + 1):
        lr, beta = lr_at(m), beta_at(m)
        bundle = euler_maruyama(pol, diff, cfg.T, cfg.dt, x, iteration_rng(cfg.seed, m))
        try:
            val, gH, gG, diag = loss_and_gradients(H, G, bundle, beta, scaled, diff)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"iteration {m}: {exc}", last_ckpt) from exc
        if abs(val) > DIVERGENCE_LIMIT:
            raise TrainingDiverged(f"iteration {m}: loss {val:.3e}", last_ckpt)
        adam_step(H.params, gH, adam_h, lr)
        adam_step(G.params, gG, adam_g, lr)
        x = bundle.terminal.copy()
        diag.update(iteration=m, lr=lr, beta=beta)
        diags.append(diag)
        if callback is not None:
            callback(diag)
        if cfg.out_dir and cfg.checkpoint_every and m % cfg.checkpoint_every == 0:
            last_ckpt = os.path.join(cfg.out_dir, f"ckpt_{m:06d}.bin")
            save_checkpoint(last_ckpt, [H, G])
    if cfg.out_dir:
        save_checkpoint(os.path.join(cfg.out_dir, "final.bin"), [H, G])
        write_diagnostics(os.path.join(cfg.out_dir, "diagnostics.csv"), diags)
    return TrainResult(H, G, diags, x)
