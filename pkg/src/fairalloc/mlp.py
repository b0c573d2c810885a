"""Minimal dense network with hand-written gradients.

Hidden layers use tanh, the output layer is linear.  Forward accepts a
single vector or any batch shape (..., d_in); parameter gradients are summed
over the batch, input gradients keep the batch shape.  Parameters are
treated as immutable: optimizer steps return fresh objects, and backward
refuses a cache built from different parameters.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import DimensionMismatch, StaleCache

DEFAULT_HIDDEN = (64, 64)  # two hidden layers of width 64


@dataclass(frozen=True)
class MlpParams:
    weights: tuple  # W_l of shape (d_in_l, d_out_l)
    biases: tuple  # b_l of shape (d_out_l,)

    @property
    def sizes(self) -> tuple:
        return tuple([self.weights[0].shape[0]] + [w.shape[1] for w in self.weights])

    @property
    def n_layers(self) -> int:
        return len(self.weights)


@dataclass(frozen=True)
class MlpGrads:
    weights: tuple
    biases: tuple


@dataclass
class MlpCache:
    params: MlpParams
    acts: list  # layer inputs: acts[0] = x, acts[l] = input to layer l


def init_mlp(sizes, rng: np.random.Generator) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases.

    sizes = (d_in, hidden..., d_out).
    """
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise DimensionMismatch(f"bad layer sizes {sizes}")
    ws, bs = [], []
    for d_in, d_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(d_in)
        ws.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
        bs.append(rng.uniform(-bound, bound, size=d_out))
    return MlpParams(tuple(ws), tuple(bs))


def forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.sizes[0]:
        raise DimensionMismatch(
            f"input dim {x.shape[-1]} vs network d_in {params.sizes[0]}"
        )
    acts = [x]
    h = x
    last = params.n_layers - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        s = h @ w + b
        h = s if l == last else np.tanh(s)
        if l != last:
            acts.append(h)
    return h, MlpCache(params, acts)


def backward(
    params: MlpParams, cache: MlpCache, grad_out: np.ndarray
) -> tuple[MlpGrads, np.ndarray]:
    """Gradients of a scalar loss given d loss / d output.

    Returns (parameter gradients summed over any batch dims, gradient with
    respect to the input, same shape as the forward input).
    """
    if cache.params is not params:
        raise StaleCache("cache was built from different parameters")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    ds = grad_out
    gw = [None] * params.n_layers
    gb = [None] * params.n_layers
    for l in range(params.n_layers - 1, -1, -1):
        h_in = cache.acts[l]
        flat_in = h_in.reshape(-1, h_in.shape[-1])
        flat_ds = ds.reshape(-1, ds.shape[-1])
        gw[l] = flat_in.T @ flat_ds
        gb[l] = flat_ds.sum(axis=0)
        grad_h = ds @ params.weights[l].T
        if l > 0:
            # tanh'(s) = 1 - tanh(s)^2, and acts[l] stores tanh(s)
            ds = grad_h * (1.0 - cache.acts[l] ** 2)
        else:
            grad_in = grad_h
    return MlpGrads(tuple(gw), tuple(gb)), grad_in


def zeros_like_grads(params: MlpParams) -> MlpGrads:
    return MlpGrads(
        tuple(np.zeros_like(w) for w in params.weights),
        tuple(np.zeros_like(b) for b in params.biases),
    )


def add_grads(a: MlpGrads, b: MlpGrads, scale: float = 1.0) -> MlpGrads:
    return MlpGrads(
        tuple(wa + scale * wb for wa, wb in zip(a.weights, b.weights)),
        tuple(ba + scale * bb for ba, bb in zip(a.biases, b.biases)),
    )


def scale_grads(g: MlpGrads, scale: float) -> MlpGrads:
    return MlpGrads(
        tuple(scale * w for w in g.weights), tuple(scale * b for b in g.biases)
    )


def grad_inf_norm(g: MlpGrads) -> float:
    parts = [np.abs(w).max() for w in g.weights if w.size] + [
        np.abs(b).max() for b in g.biases if b.size
    ]
    return float(max(parts)) if parts else 0.0


def sgd_step(params: MlpParams, grads: MlpGrads, lr: float) -> MlpParams:
    """One descent step; returns new parameters."""
    return MlpParams(
        tuple(w - lr * g for w, g in zip(params.weights, grads.weights)),
        tuple(b - lr * g for b, g in zip(params.biases, grads.biases)),
    )


@dataclass(frozen=True)
class AdamState:
    params: MlpParams
    m: MlpGrads
    v: MlpGrads
    t: int = 0


def adam_init(params: MlpParams) -> AdamState:
    return AdamState(params, zeros_like_grads(params), zeros_like_grads(params), 0)


def adam_step(
    state: AdamState,
    grads: MlpGrads,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Standard Adam descent step with bias correction; returns new state."""
    t = state.t + 1
    new_m, new_v, new_w, new_b = [], [], [], []
    packs = zip(
        state.params.weights + state.params.biases,
        state.m.weights + state.m.biases,
        state.v.weights + state.v.biases,
        grads.weights + grads.biases,
    )
    for p, m, v, g in packs:
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        p = p - lr * mhat / (np.sqrt(vhat) + eps)
        new_m.append(m)
        new_v.append(v)
        (new_w if p.ndim == 2 else new_b).append(p)
    k = len(state.params.weights)
    return AdamState(
        MlpParams(tuple(new_w), tuple(new_b)),
        MlpGrads(tuple(new_m[:k]), tuple(new_m[k:])),
        MlpGrads(tuple(new_v[:k]), tuple(new_v[k:])),
        t,
    )


CHECKPOINT_VERSION = 1


def save_params(path, params: MlpParams, meta: dict | None = None):
    """Binary checkpoint (npz); float64 arrays round-trip bit-exact."""
    payload = {
        "version": np.int64(CHECKPOINT_VERSION),
        "sizes": np.asarray(params.sizes, dtype=np.int64),
        "meta": np.frombuffer(json.dumps(meta or {}).encode(), dtype=np.uint8),
    }
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        payload[f"w{l}"] = w
        payload[f"b{l}"] = b
    np.savez(path, **payload)


def load_params(path) -> tuple[MlpParams, dict]:
    with np.load(path) as z:
        version = int(z["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        sizes = z["sizes"]
        n_layers = len(sizes) - 1
        ws = tuple(z[f"w{l}"] for l in range(n_layers))
        bs = tuple(z[f"b{l}"] for l in range(n_layers))
        meta = json.loads(z["meta"].tobytes().decode()) if "meta" in z else {}
    return MlpParams(ws, bs), meta
