"""Small fully connected networks in numpy (float64).

Layers compute ``a_{l+1} = elu(a_l @ W_l + b_l)`` with identity on the last
layer. Parameter gradients come from a hand-written reverse pass; input
Jacobians from a forward-mode pass through the same layers.
"""
from __future__ import annotations

import struct

import numpy as np

CHECKPOINT_MAGIC = b"SJRPNN\x00\x00"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    pass


def elu(u):
    neg = np.minimum(u, 0.0)
    np.expm1(neg, out=neg)
    out = np.maximum(u, 0.0)
    out += neg
    return out


def elu_grad(u):
    return np.where(u >= 0, 1.0, np.exp(np.minimum(u, 0.0)))


def _elu_grad_from_output(a):
    """ELU derivative expressed through the activation: ``min(a, 0) + 1``."""
    g = np.minimum(a, 0.0)
    g += 1.0
    return g


class Mlp:
    def __init__(self, weights, biases):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need matching, nonempty weight and bias lists")
        for l, (W, b) in enumerate(zip(weights, biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ValueError(f"layer {l} has inconsistent shapes")
            if l and weights[l - 1].shape[1] != W.shape[0]:
                raise ValueError(f"layer {l} input width mismatch")
        self.weights = [np.asarray(W, dtype=np.float64) for W in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]

    @property
    def widths(self):
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def params(self):
        """Flat list ``[W0, b0, W1, b1, ...]`` (views, updated in place by Adam)."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self):
        return Mlp([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def _check(self, X):
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[-1] != self.widths[0]:
            raise ValueError(f"input has dimension {X.shape[-1]}, expected {self.widths[0]}")
        return X, single

    def forward(self, X, keep=False):
        X, single = self._check(X)
        acts = [X]
        a = X
        last = len(self.weights) - 1
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ W
            z += b
            if l < last:
                a = elu(z)
                acts.append(a)
            else:
                a = z
        out = a[0] if single else a
        if keep:
            return out, acts
        return out

    __call__ = forward

    def backward(self, cache, dY):
        """Parameter gradients for output cotangent ``dY`` (shape ``(B, out)``)."""
        acts = cache
        dY = np.atleast_2d(dY)
        grads_W = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        delta = dY
        for l in range(len(self.weights) - 1, -1, -1):
            grads_W[l] = acts[l].T @ delta
            grads_b[l] = delta.sum(axis=0)
            if l:
                delta = delta @ self.weights[l].T
                delta *= _elu_grad_from_output(acts[l])
        out = []
        for gW, gb in zip(grads_W, grads_b):
            out += [gW, gb]
        return out

    def input_gradient(self, cache, dY):
        """Cotangent with respect to the input rows."""
        acts = cache
        delta = np.atleast_2d(dY)
        for l in range(len(self.weights) - 1, -1, -1):
            delta = delta @ self.weights[l].T
            if l:
                delta *= _elu_grad_from_output(acts[l])
        return delta

    def input_jacobian(self, X):
        """``J[k, i, j] = d out_i / d x_j`` at each row ``k`` (forward mode)."""
        X, single = self._check(X)
        B, d = X.shape
        J = np.broadcast_to(np.eye(d), (B, d, d))
        a = X
        last = len(self.weights) - 1
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ W + b
            J = np.einsum("bjd,jw->bwd", J, W)
            if l < last:
                a = elu(z)
                J = J * _elu_grad_from_output(a)[:, :, None]
        return J[0] if single else J

    def forward_with_jacobian(self, X):
        X, single = self._check(X)
        B, d = X.shape
        J = np.broadcast_to(np.eye(d), (B, d, d))
        a = X
        last = len(self.weights) - 1
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ W + b
            J = np.einsum("bjd,jw->bwd", J, W)
            if l < last:
                a = elu(z)
                J = J * _elu_grad_from_output(a)[:, :, None]
            else:
                a = z
        return (a[0], J[0]) if single else (a, J)


def he_init(widths, rng) -> Mlp:
    """Uniform on ``[-sqrt(6 / fan_in), sqrt(6 / fan_in)]``, zero biases."""
    widths = [int(w) for w in widths]
    if len(widths) < 2 or min(widths) < 1:
        raise ValueError("widths must have at least two positive entries")
    rng = np.random.default_rng(rng)
    Ws, bs = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / fan_in)
        Ws.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return Mlp(Ws, bs)


def loss_gradients(evaluations, loss_fn):
    """Reverse-mode gradients of a scalar loss built from network outputs.

    ``evaluations`` is a list of ``(net, X)``; ``loss_fn(outputs)`` returns
    ``(loss, [dL/d output for each evaluation])``. Gradients of evaluations
    that share a network are summed. Returns ``(loss, {id(net): grads})``.
    """
    outs, caches = [], []
    for net, X in evaluations:
        Y, cache = net.forward(np.atleast_2d(X), keep=True)
        outs.append(Y)
        caches.append(cache)
    loss, douts = loss_fn(outs)
    if not np.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss}")
    grads = {}
    for (net, _), cache, dY in zip(evaluations, caches, douts):
        g = net.backward(cache, dY)
        if id(net) in grads:
            grads[id(net)] = [a + b for a, b in zip(grads[id(net)], g)]
        else:
            grads[id(net)] = g
    return float(loss), grads


class AdamState:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps


def adam_step(params, grads, state: AdamState, lr):
    """In-place bias-corrected Adam update of ``params``."""
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def save_checkpoint(path, nets, extra: bytes = b""):
    """Layout (little-endian): 8-byte magic, uint32 version, uint32 network count;
    per network uint32 layer-count + 1 followed by that many uint32 widths; then
    for every network and layer the float64 weight matrix (fan_in x fan_out,
    row-major) and bias vector; then uint64 length and opaque trailing bytes."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(nets)))
        for net in nets:
            w = net.widths
            fh.write(struct.pack(f"<I{len(w)}I", len(w), *w))
        for net in nets:
            for W, b in zip(net.weights, net.biases):
                fh.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
        fh.write(struct.pack("<Q", len(extra)))
        fh.write(extra)


def load_checkpoint(path):
    """Returns ``(nets, extra_bytes)``."""
    with open(path, "rb") as fh:
        if fh.read(8) != CHECKPOINT_MAGIC:
            raise ValueError("not a network checkpoint")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        all_widths = []
        for _ in range(count):
            (n,) = struct.unpack("<I", fh.read(4))
            all_widths.append(struct.unpack(f"<{n}I", fh.read(4 * n)))
        nets = []
        for widths in all_widths:
            Ws, bs = [], []
            for fi, fo in zip(widths[:-1], widths[1:]):
                Ws.append(np.frombuffer(fh.read(8 * fi * fo), dtype="<f8").reshape(fi, fo).copy())
                bs.append(np.frombuffer(fh.read(8 * fo), dtype="<f8").copy())
            nets.append(Mlp(Ws, bs))
        raw = fh.read(8)
        extra = b""
        if raw:
            (n,) = struct.unpack("<Q", raw)
            extra = fh.read(n)
    return nets, extra
