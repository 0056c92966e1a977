"""Stacked LSTM with dropout, softmax cross-entropy, BPTT, clipping and ADAM.

Parameters live in a plain ``dict[str, np.ndarray]`` with names::

    lstm{l}.w_input      (4H, D)   gate blocks ordered input, forget, cell, output
    lstm{l}.w_recurrent  (4H, H)
    lstm{l}.bias         (4H,)
    out.weight           (K, H_top)
    out.bias             (K,)

The first layer consumes one-hot symbols, so its input projection is a
column gather rather than a matrix product.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

Params = dict[str, np.ndarray]


class ShapeMismatch(ValueError):
    pass


class NonFiniteInput(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


def param_names(n_layers: int) -> list[str]:
    names = []
    for layer in range(n_layers):
        names += [f"lstm{layer}.w_input", f"lstm{layer}.w_recurrent", f"lstm{layer}.bias"]
    return names + ["out.weight", "out.bias"]


def init_params(
    vocab_size: int,
    hidden_sizes: Sequence[int],
    rng: np.random.Generator,
    scale: float = 0.08,
    dtype=np.float64,
) -> Params:
    """Uniform(-scale, scale) weights, zero biases except forget gates at 1.0."""
    params: Params = {}
    d_in = vocab_size
    for layer, h in enumerate(hidden_sizes):
        params[f"lstm{layer}.w_input"] = rng.uniform(-scale, scale, (4 * h, d_in)).astype(dtype)
        params[f"lstm{layer}.w_recurrent"] = rng.uniform(-scale, scale, (4 * h, h)).astype(dtype)
        bias = np.zeros(4 * h, dtype=dtype)
        bias[h : 2 * h] = 1.0
        params[f"lstm{layer}.bias"] = bias
        d_in = h
    params["out.weight"] = rng.uniform(-scale, scale, (vocab_size, d_in)).astype(dtype)
    params["out.bias"] = np.zeros(vocab_size, dtype=dtype)
    return params


def hidden_sizes_of(params: Params) -> list[int]:
    sizes = []
    layer = 0
    while f"lstm{layer}.bias" in params:
        sizes.append(params[f"lstm{layer}.w_recurrent"].shape[1])
        layer += 1
    return sizes


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# --------------------------------------------------------------------------
# single-step inference


@dataclass
class RnnState:
    """Per-layer hidden and cell vectors; leading axis is the stream batch."""

    h: list[np.ndarray]
    c: list[np.ndarray]

    @classmethod
    def zeros(cls, hidden_sizes: Sequence[int], batch: int | None = None, dtype=np.float64) -> "RnnState":
        shape = (lambda n: (n,)) if batch is None else (lambda n: (batch, n))
        return cls([np.zeros(shape(n), dtype) for n in hidden_sizes], [np.zeros(shape(n), dtype) for n in hidden_sizes])

    def copy(self) -> "RnnState":
        return RnnState([x.copy() for x in self.h], [x.copy() for x in self.c])


def lstm_step(params: Params, state: RnnState, x: np.ndarray, symbols: np.ndarray | None = None):
    """Advance every layer by one step.

    ``x`` is a dense input (batch, K) or (K,); alternatively pass symbol
    indices in ``symbols`` and ``x=None`` to gather one-hot columns.
    Returns the new state and the output logits.
    """
    sizes = hidden_sizes_of(params)
    if len(state.h) != len(sizes):
        raise ShapeMismatch(f"state has {len(state.h)} layers, model has {len(sizes)}")
    w0 = params["lstm0.w_input"]
    if symbols is not None:
        inp = w0.T[symbols]
    else:
        if x.shape[-1] != w0.shape[1]:
            raise ShapeMismatch(f"input size {x.shape[-1]} != {w0.shape[1]}")
        inp = x @ w0.T
    new_h, new_c = [], []
    below = None
    for layer, hsz in enumerate(sizes):
        if layer > 0:
            inp = below @ params[f"lstm{layer}.w_input"].T
        h_prev, c_prev = state.h[layer], state.c[layer]
        if h_prev.shape[-1] != hsz:
            raise ShapeMismatch(f"layer {layer} state size {h_prev.shape[-1]} != {hsz}")
        z = inp + h_prev @ params[f"lstm{layer}.w_recurrent"].T + params[f"lstm{layer}.bias"]
        i = _sigmoid(z[..., :hsz])
        f = _sigmoid(z[..., hsz : 2 * hsz])
        g = np.tanh(z[..., 2 * hsz : 3 * hsz])
        o = _sigmoid(z[..., 3 * hsz :])
        c = f * c_prev + i * g
        h = o * np.tanh(c)
        new_h.append(h)
        new_c.append(c)
        below = h
    y = below @ params["out.weight"].T + params["out.bias"]
    return RnnState(new_h, new_c), y


def lstm_forward(params: Params, state: RnnState, x: np.ndarray):
    """One recurrence step ``h_t = R(h_{t-1}, x_t)``, ``y_t = O(h_t)`` for a single input vector."""
    return lstm_step(params, state, np.asarray(x))


# --------------------------------------------------------------------------
# probabilities and loss


def softmax(y: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Softmax over the last axis of ``y / temperature`` (max-shifted)."""
    y = np.asarray(y, dtype=np.float64)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not np.all(np.isfinite(y)):
        raise NonFiniteInput("logits contain NaN or infinity")
    z = y / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss(probabilities: Sequence[np.ndarray], targets: Sequence[int]) -> float:
    """Mean negative log-probability of the targets, in nats per symbol."""
    probabilities = list(probabilities)
    targets = list(targets)
    if len(probabilities) != len(targets):
        raise LengthMismatch(f"{len(probabilities)} distributions for {len(targets)} targets")
    if not targets:
        return 0.0
    p = np.array([probabilities[t][k] for t, k in enumerate(targets)], dtype=np.float64)
    return float(-np.mean(np.log(np.maximum(p, np.finfo(np.float64).tiny))))


# --------------------------------------------------------------------------
# sequence forward / backward


def forward_sequence(
    params: Params,
    inputs: np.ndarray,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
):
    """Run a zero-initialised batch of sequences.

    ``inputs`` is an int array (B, T). Dropout (inverted scaling) is applied
    to each layer's output sequence before it feeds the next layer or the
    output projection; recurrent connections are never dropped. Returns the
    logits (B, T, K) and a cache for :func:`backward_sequence`.
    """
    sizes = hidden_sizes_of(params)
    B, T = inputs.shape
    dtype = params["out.weight"].dtype
    caches = []
    below = None
    for layer, hsz in enumerate(sizes):
        w_in = params[f"lstm{layer}.w_input"]
        w_rec_t = params[f"lstm{layer}.w_recurrent"].T
        if layer == 0:
            xw = w_in.T[inputs]
        else:
            xw = (below.reshape(B * T, -1) @ w_in.T).reshape(B, T, 4 * hsz)
        xw = xw + params[f"lstm{layer}.bias"]
        gates = np.empty((B, T, 4 * hsz), dtype=dtype)
        cs = np.empty((B, T, hsz), dtype=dtype)
        tcs = np.empty((B, T, hsz), dtype=dtype)
        hs = np.empty((B, T, hsz), dtype=dtype)
        h = np.zeros((B, hsz), dtype=dtype)
        c = np.zeros((B, hsz), dtype=dtype)
        for t in range(T):
            z = xw[:, t] + h @ w_rec_t
            a = gates[:, t]
            a[:, : 2 * hsz] = _sigmoid(z[:, : 2 * hsz])
            a[:, 2 * hsz : 3 * hsz] = np.tanh(z[:, 2 * hsz : 3 * hsz])
            a[:, 3 * hsz :] = _sigmoid(z[:, 3 * hsz :])
            c = a[:, hsz : 2 * hsz] * c + a[:, :hsz] * a[:, 2 * hsz : 3 * hsz]
            tc = np.tanh(c)
            h = a[:, 3 * hsz :] * tc
            cs[:, t] = c
            tcs[:, t] = tc
            hs[:, t] = h
        mask = None
        out = hs
        if dropout > 0.0:
            if rng is None:
                raise ValueError("dropout needs an RNG")
            keep = 1.0 - dropout
            mask = (rng.random(hs.shape) < keep).astype(dtype) / keep
            out = hs * mask
        caches.append((below, gates, cs, tcs, hs, mask))
        below = out
    logits = (below.reshape(B * T, -1) @ params["out.weight"].T + params["out.bias"]).reshape(B, T, -1)
    return logits, (inputs, caches, below)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sequence_loss(logits: np.ndarray, targets: np.ndarray) -> float:
    logp = _log_softmax(logits.astype(np.float64))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)
    return float(-picked.mean())


def backward_sequence(params: Params, logits: np.ndarray, targets: np.ndarray, cache) -> Params:
    """Exact gradients of the mean cross-entropy through the unrolled network."""
    inputs, caches, top = cache
    B, T, K = logits.shape
    N = B * T
    sizes = hidden_sizes_of(params)
    grads: Params = {}
    probs = np.exp(_log_softmax(logits))
    dlogits = probs
    np.put_along_axis(dlogits, targets[..., None], np.take_along_axis(dlogits, targets[..., None], -1) - 1.0, -1)
    dlogits = (dlogits / N).astype(logits.dtype).reshape(N, K)
    grads["out.weight"] = dlogits.T @ top.reshape(N, -1)
    grads["out.bias"] = dlogits.sum(axis=0)
    dbelow = (dlogits @ params["out.weight"]).reshape(B, T, -1)
    for layer in range(len(sizes) - 1, -1, -1):
        hsz = sizes[layer]
        x, gates, cs, tcs, hs, mask = caches[layer]
        dh_seq = dbelow * mask if mask is not None else dbelow
        w_rec = params[f"lstm{layer}.w_recurrent"]
        dz = np.empty_like(gates)
        dh_next = np.zeros((B, hsz), dtype=gates.dtype)
        dc_next = np.zeros((B, hsz), dtype=gates.dtype)
        for t in range(T - 1, -1, -1):
            a = gates[:, t]
            ig, fg, gg, og = a[:, :hsz], a[:, hsz : 2 * hsz], a[:, 2 * hsz : 3 * hsz], a[:, 3 * hsz :]
            tc = tcs[:, t]
            dh = dh_seq[:, t] + dh_next
            dc = dh * og * (1.0 - tc * tc) + dc_next
            c_prev = cs[:, t - 1] if t > 0 else 0.0
            d = dz[:, t]
            d[:, :hsz] = dc * gg * ig * (1.0 - ig)
            d[:, hsz : 2 * hsz] = dc * c_prev * fg * (1.0 - fg)
            d[:, 2 * hsz : 3 * hsz] = dc * ig * (1.0 - gg * gg)
            d[:, 3 * hsz :] = dh * tc * og * (1.0 - og)
            dc_next = dc * fg
            dh_next = d @ w_rec
        dz2 = dz.reshape(N, 4 * hsz)
        h_prev = np.concatenate([np.zeros((B, 1, hsz), dtype=hs.dtype), hs[:, :-1]], axis=1).reshape(N, hsz)
        grads[f"lstm{layer}.w_recurrent"] = dz2.T @ h_prev
        grads[f"lstm{layer}.bias"] = dz2.sum(axis=0)
        if layer == 0:
            vocab = params["lstm0.w_input"].shape[1]
            g_in = np.zeros((vocab, 4 * hsz), dtype=dz.dtype)
            np.add.at(g_in, inputs.reshape(N), dz2)
            grads["lstm0.w_input"] = g_in.T
        else:
            grads[f"lstm{layer}.w_input"] = dz2.T @ x.reshape(N, -1)
            dbelow = (dz2 @ params[f"lstm{layer}.w_input"]).reshape(B, T, -1)
    return grads


def bptt_gradients(
    params: Params,
    inputs: np.ndarray,
    targets: np.ndarray,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[float, Params]:
    """Mean cross-entropy over a (B, T) batch and its gradient for every parameter."""
    inputs = np.asarray(inputs)
    targets = np.asarray(targets)
    if inputs.shape != targets.shape or inputs.ndim != 2:
        raise ShapeMismatch(f"inputs {inputs.shape} and targets {targets.shape} must be equal 2-d shapes")
    logits, cache = forward_sequence(params, inputs, dropout, rng)
    loss = sequence_loss(logits, targets)
    return loss, backward_sequence(params, logits, targets, cache)


# --------------------------------------------------------------------------
# optimisation


def global_norm(grads: Params) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_gradients(grads: Params, max_norm: float) -> tuple[Params, float]:
    """Rescale so the global L2 norm is at most ``max_norm``; returns (grads, norm before clipping)."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Params, lr: float = 0.001, **kw) -> "AdamState":
        return cls(
            lr=lr,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            **kw,
        )


def adam_step(state: AdamState, params: Params, grads: Params) -> tuple[Params, AdamState]:
    """Bias-corrected ADAM update, applied in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
