"""Small single-layer LSTM substrate with exact backpropagation through time.

Everything here runs in float64 numpy. Parameter sets are treated as values:
training helpers return fresh :class:`SeqModelParams` instead of mutating.

Gate layout inside the fused weight matrix ``W`` is ``[input, forget, output,
candidate]``, each block ``n_hidden`` wide. ``W`` acts on ``concat(x, h)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import expit

__all__ = [
    "SeqModelParams",
    "AdamState",
    "ForwardCache",
    "init_state_from_noise",
    "lstm_forward",
    "lstm_backward",
    "softmax",
    "log_softmax",
    "sigmoid",
    "cross_entropy_loss",
    "binary_cross_entropy_loss",
    "discriminator_objective",
    "generator_objective",
    "loss_and_gradients",
    "adam_update",
    "clip_gradients",
    "categorical_sample",
    "save_checkpoint",
    "load_checkpoint",
]

FORGET_BIAS = 1.0
INIT_SCALE = 0.1


def sigmoid(x):
    return expit(np.asarray(x, dtype=np.float64))


def softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


class SeqModelParams:
    """Weights of an LSTM cell plus a dense output head.

    Tensors (declared order, which is also the checkpoint order):

    ``W``  (n_in + n_hidden, 4 * n_hidden) fused gate weights
    ``b``  (4 * n_hidden,) gate biases
    ``Wy`` (n_hidden, n_out) output projection
    ``by`` (n_out,)
    ``Wz`` (n_noise, 2 * n_hidden) noise-to-state projection, only when n_noise > 0
    ``bz`` (2 * n_hidden,)
    """

    def __init__(self, tensors, n_in, n_hidden, n_out, n_noise=0, seed=0):
        self.n_in = int(n_in)
        self.n_hidden = int(n_hidden)
        self.n_out = int(n_out)
        self.n_noise = int(n_noise)
        self.seed = int(seed)
        expected = self.shapes()
        if list(tensors) != list(expected):
            raise ValueError(f"expected tensors {list(expected)}, got {list(tensors)}")
        for name, shape in expected.items():
            arr = np.asarray(tensors[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"tensor {name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"tensor {name} has non-finite entries")
        self.tensors = {k: np.asarray(tensors[k], dtype=np.float64) for k in expected}

    @classmethod
    def initialize(cls, n_in, n_hidden, n_out, n_noise=0, seed=0):
        rng = np.random.default_rng(seed)
        H = n_hidden
        shapes = cls._shapes(n_in, n_hidden, n_out, n_noise)
        tensors = {}
        for name, shape in shapes.items():
            tensors[name] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
        tensors["b"][H:2 * H] += FORGET_BIAS
        return cls(tensors, n_in, n_hidden, n_out, n_noise, seed)

    @staticmethod
    def _shapes(n_in, n_hidden, n_out, n_noise):
        H = n_hidden
        shapes = {
            "W": (n_in + H, 4 * H),
            "b": (4 * H,),
            "Wy": (H, n_out),
            "by": (n_out,),
        }
        if n_noise:
            shapes["Wz"] = (n_noise, 2 * H)
            shapes["bz"] = (2 * H,)
        return shapes

    def shapes(self):
        return self._shapes(self.n_in, self.n_hidden, self.n_out, self.n_noise)

    def __getitem__(self, name):
        return self.tensors[name]

    def replace(self, tensors):
        return SeqModelParams(tensors, self.n_in, self.n_hidden, self.n_out,
                              self.n_noise, self.seed)

    def copy(self):
        return self.replace({k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self):
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def equals(self, other):
        return (self.shapes() == other.shapes()
                and all(np.array_equal(self[k], other[k]) for k in self.tensors))

    def __repr__(self):
        return (f"SeqModelParams(n_in={self.n_in}, n_hidden={self.n_hidden}, "
                f"n_out={self.n_out}, n_noise={self.n_noise})")


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, lr, **kw):
        return cls(lr=lr, m=params.zeros_like(), v=params.zeros_like(), **kw)


class ForwardCache(NamedTuple):
    inputs: np.ndarray  # (B, T, n_in)
    h0: np.ndarray
    c0: np.ndarray
    hidden: np.ndarray  # (B, T, H)
    cell: np.ndarray
    gates: np.ndarray   # (B, T, 4H) post-activation
    logits: np.ndarray  # (B, T, n_out)


def init_state_from_noise(params, z):
    """Map noise ``z`` (B, n_noise) to an initial (hidden, cell) pair via tanh."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if params.n_noise == 0 or z.shape[1] != params.n_noise:
        raise ValueError(f"noise dimension {z.shape[1]} does not match model "
                         f"n_noise={params.n_noise}")
    m0 = np.tanh(z @ params["Wz"] + params["bz"])
    H = params.n_hidden
    return m0[:, :H], m0[:, H:]


def _zero_state(params, batch):
    H = params.n_hidden
    return np.zeros((batch, H)), np.zeros((batch, H))


def _step(W, b, x, h, c, H):
    z = np.concatenate([x, h], axis=1) @ W + b
    gates = np.empty_like(z)
    gates[:, :3 * H] = sigmoid(z[:, :3 * H])
    gates[:, 3 * H:] = np.tanh(z[:, 3 * H:])
    i, f, o, g = (gates[:, k * H:(k + 1) * H] for k in range(4))
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new, gates


def _step_backward(W, x, h_prev, c_prev, c, gates, dh, dc, H, n_in, grads):
    i, f, o, g = (gates[:, k * H:(k + 1) * H] for k in range(4))
    tc = np.tanh(c)
    dc = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate([
        dc * g * i * (1.0 - i),
        dc * c_prev * f * (1.0 - f),
        dh * tc * o * (1.0 - o),
        dc * i * (1.0 - g * g),
    ], axis=1)
    xh = np.concatenate([x, h_prev], axis=1)
    grads["W"] += xh.T @ dz
    grads["b"] += dz.sum(axis=0)
    dxh = dz @ W.T
    return dxh[:, :n_in], dxh[:, n_in:], dc * f


def lstm_forward(params, inputs, state=None):
    """Run the recurrence over ``inputs`` of shape (B, T, n_in).

    Returns a :class:`ForwardCache`; ``cache.logits[:, t]`` is the output
    projection of the hidden state after step ``t``.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 3 or inputs.shape[2] != params.n_in:
        raise ValueError(f"inputs must have shape (B, T, {params.n_in}), got {inputs.shape}")
    B, T, _ = inputs.shape
    H = params.n_hidden
    h0, c0 = _zero_state(params, B) if state is None else state
    W, b = params["W"], params["b"]
    hidden = np.empty((B, T, H))
    cell = np.empty((B, T, H))
    gates = np.empty((B, T, 4 * H))
    h, c = h0, c0
    for t in range(T):
        h, c, gt = _step(W, b, inputs[:, t], h, c, H)
        if not np.all(np.isfinite(h)):
            raise FloatingPointError(f"non-finite hidden state at step {t}")
        hidden[:, t], cell[:, t], gates[:, t] = h, c, gt
    logits = hidden @ params["Wy"] + params["by"]
    return ForwardCache(inputs, h0, c0, hidden, cell, gates, logits)


def lstm_backward(params, cache, dlogits=None, dhidden=None):
    """Backpropagate through a cached forward pass.

    ``dlogits`` (B, T, n_out) flows through the output head; ``dhidden``
    (B, T, H) is added directly to the hidden states. Returns
    ``(grads, dinputs, dh0, dc0)``.
    """
    B, T, n_in = cache.inputs.shape
    H = params.n_hidden
    grads = params.zeros_like()
    dH = np.zeros((B, T, H)) if dhidden is None else np.array(dhidden, dtype=np.float64)
    if dlogits is not None:
        grads["Wy"] += np.einsum("bth,bto->ho", cache.hidden, dlogits)
        grads["by"] += dlogits.sum(axis=(0, 1))
        dH += dlogits @ params["Wy"].T
    dinputs = np.empty_like(cache.inputs)
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    W = params["W"]
    for t in range(T - 1, -1, -1):
        h_prev = cache.h0 if t == 0 else cache.hidden[:, t - 1]
        c_prev = cache.c0 if t == 0 else cache.cell[:, t - 1]
        dx, dh, dc = _step_backward(W, cache.inputs[:, t], h_prev, c_prev,
                                    cache.cell[:, t], cache.gates[:, t],
                                    dH[:, t] + dh, dc, H, n_in, grads)
        dinputs[:, t] = dx
    return grads, dinputs, dh, dc


def _noise_backward(params, z, h0, c0, dh0, dc0, grads):
    m0 = np.concatenate([h0, c0], axis=1)
    du = np.concatenate([dh0, dc0], axis=1) * (1.0 - m0 * m0)
    grads["Wz"] += z.T @ du
    grads["bz"] += du.sum(axis=0)


# ---------------------------------------------------------------- losses


def cross_entropy_loss(params, inputs, targets, mask=None, state=None, z=None):
    """Mean next-step categorical cross-entropy over unmasked positions.

    With noise ``z`` the initial state is ``init_state_from_noise(params, z)``
    and the noise projection receives gradients too.
    """
    if z is not None:
        z = np.atleast_2d(z)
        state = init_state_from_noise(params, z)
    cache = lstm_forward(params, inputs, state)
    targets = np.asarray(targets)
    B, T = targets.shape
    mask = np.ones((B, T)) if mask is None else np.asarray(mask, dtype=np.float64)
    n = mask.sum()
    if n == 0:
        raise ValueError("empty batch: no unmasked positions")
    logp = log_softmax(cache.logits)
    safe_t = np.where(mask > 0, targets, 0)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=2)[..., 0]
    loss = -(picked * mask).sum() / n
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, safe_t[..., None],
                      np.take_along_axis(dlogits, safe_t[..., None], axis=2) - 1.0, axis=2)
    dlogits *= (mask / n)[..., None]
    grads, _, dh0, dc0 = lstm_backward(params, cache, dlogits=dlogits)
    if z is not None:
        _noise_backward(params, z, cache.h0, cache.c0, dh0, dc0, grads)
    return float(loss), grads


def _final_logit(cache, lengths):
    B = cache.logits.shape[0]
    return cache.logits[np.arange(B), lengths - 1, 0]


def binary_cross_entropy_loss(params, inputs, lengths, labels, weights=None):
    """Sequence classifier loss; the score is read at each sequence's last valid step."""
    cache = lstm_forward(params, inputs)
    B, T, _ = cache.inputs.shape
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
    y = np.asarray(labels, dtype=np.float64)
    w = np.ones(B) if weights is None else np.asarray(weights, dtype=np.float64)
    u = _final_logit(cache, lengths)
    loss = -(w * (y * _log_sigmoid(u) + (1 - y) * _log_sigmoid(-u))).sum() / w.sum()
    du = w * (sigmoid(u) - y) / w.sum()
    dlogits = np.zeros_like(cache.logits)
    dlogits[np.arange(B), lengths - 1, 0] = du
    grads, _, _, _ = lstm_backward(params, cache, dlogits=dlogits)
    return float(loss), grads


def discriminator_objective(D, real_inputs, fake_inputs):
    """``mean[log D(x|s) + log(1 - D(G(z|s)))]`` and its gradient (to ascend)."""
    value = 0.0
    grads = D.zeros_like()
    for inputs, is_real in ((real_inputs, True), (fake_inputs, False)):
        cache = lstm_forward(D, inputs)
        B, T, _ = cache.inputs.shape
        u = cache.logits[:, -1, 0]
        if is_real:
            value += _log_sigmoid(u).mean()
            du = (1.0 - sigmoid(u)) / B
        else:
            value += _log_sigmoid(-u).mean()
            du = -sigmoid(u) / B
        dlogits = np.zeros_like(cache.logits)
        dlogits[:, -1, 0] = du
        g, _, _, _ = lstm_backward(D, cache, dlogits=dlogits)
        for k in grads:
            grads[k] += g[k]
    return float(value), grads


class GeneratorRollout(NamedTuple):
    samples: np.ndarray     # (B, T, N) vectors fed forward (one-hot or relaxed)
    soft: np.ndarray        # (B, T, N) relaxed samples used for the backward pass
    tokens: np.ndarray      # (B, T) argmax of samples
    cache_h: list
    cache_c: list
    cache_g: list
    step_inputs: np.ndarray
    h0: np.ndarray
    c0: np.ndarray


def generator_rollout(G, conditions, z, gumbel, tau=1.0, mode="straight_through"):
    """Roll the conditional generator forward.

    ``conditions`` (B, T, K) one-hot classes, ``z`` (B, n_noise) noise and
    ``gumbel`` (B, T, N) Gumbel noise. In ``"soft"`` mode the relaxed sample
    ``softmax((logits + gumbel) / tau)`` is fed forward, which makes the whole
    rollout a smooth function of the weights. ``"straight_through"`` feeds the
    exact categorical sample ``one_hot(argmax(logits + gumbel))`` instead.
    """
    B, T, K = conditions.shape
    N = G.n_out
    H = G.n_hidden
    h, c = init_state_from_noise(G, z)
    h0, c0 = h, c
    W, b, Wy, by = G["W"], G["b"], G["Wy"], G["by"]
    prev = np.zeros((B, N))
    samples = np.empty((B, T, N))
    soft = np.empty((B, T, N))
    step_inputs = np.empty((B, T, N + K))
    hs, cs, gs = [], [], []
    for t in range(T):
        x = np.concatenate([prev, conditions[:, t]], axis=1)
        step_inputs[:, t] = x
        h, c, gt = _step(W, b, x, h, c, H)
        if not np.all(np.isfinite(h)):
            raise FloatingPointError(f"non-finite generator state at step {t}")
        hs.append(h)
        cs.append(c)
        gs.append(gt)
        pert = h @ Wy + by + gumbel[:, t]
        y = softmax(pert / tau)
        soft[:, t] = y
        if mode == "soft":
            prev = y
        elif mode == "straight_through":
            prev = np.eye(N)[pert.argmax(axis=1)]
        else:
            raise ValueError(f"unknown relaxation mode {mode!r}")
        samples[:, t] = prev
    tokens = samples.argmax(axis=2)
    return GeneratorRollout(samples, soft, tokens, hs, cs, gs, step_inputs, h0, c0)


def generator_objective(G, D, conditions, z, gumbel, tau=1.0, mode="soft"):
    """``mean[log(1 - D(G(z|s)|s))]`` and its gradient w.r.t. the generator."""
    roll = generator_rollout(G, conditions, z, gumbel, tau, mode)
    B, T, K = conditions.shape
    N = G.n_out
    H = G.n_hidden
    d_in = np.concatenate([roll.samples, conditions], axis=2)
    cache = lstm_forward(D, d_in)
    u = cache.logits[:, -1, 0]
    value = float(_log_sigmoid(-u).mean())
    dlogits_d = np.zeros_like(cache.logits)
    dlogits_d[:, -1, 0] = -sigmoid(u) / B
    _, d_inputs, _, _ = lstm_backward(D, cache, dlogits=dlogits_d)
    dsamples = d_inputs[:, :, :N]

    grads = G.zeros_like()
    W, Wy = G["W"], G["Wy"]
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    dprev_next = np.zeros((B, N))
    for t in range(T - 1, -1, -1):
        dy = dsamples[:, t] + dprev_next
        y = roll.soft[:, t]
        dpert = y * (dy - (dy * y).sum(axis=1, keepdims=True)) / tau
        h = roll.cache_h[t]
        grads["Wy"] += h.T @ dpert
        grads["by"] += dpert.sum(axis=0)
        dh = dh + dpert @ Wy.T
        h_prev = roll.h0 if t == 0 else roll.cache_h[t - 1]
        c_prev = roll.c0 if t == 0 else roll.cache_c[t - 1]
        dx, dh, dc = _step_backward(W, roll.step_inputs[:, t], h_prev, c_prev,
                                    roll.cache_c[t], roll.cache_g[t], dh, dc, H,
                                    N + K, grads)
        dprev_next = dx[:, :N]
    _noise_backward(G, np.atleast_2d(z), roll.h0, roll.c0, dh, dc, grads)
    return value, grads


def loss_and_gradients(params, batch, kind, **kwargs):
    """Dispatch on ``kind``: ``cross_entropy``, ``binary``, ``discriminator`` or ``generator``.

    ``batch`` is a dict whose keys match the selected loss function's
    arguments. The returned value is the quantity written in the training
    algorithm (ascended for the discriminator, descended otherwise).
    """
    if kind == "cross_entropy":
        return cross_entropy_loss(params, batch["inputs"], batch["targets"],
                                  batch.get("mask"), batch.get("state"), batch.get("z"))
    if kind == "binary":
        return binary_cross_entropy_loss(params, batch["inputs"], batch.get("lengths"),
                                         batch["labels"], batch.get("weights"))
    if kind == "discriminator":
        return discriminator_objective(params, batch["real"], batch["fake"])
    if kind == "generator":
        return generator_objective(params, batch["discriminator"], batch["conditions"],
                                   batch["z"], batch["gumbel"], **kwargs)
    raise ValueError(f"unknown loss kind {kind!r}")


# ------------------------------------------------------------- optimizer


def clip_gradients(grads, max_norm=5.0):
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


def adam_update(params, grads, state, maximize=False):
    """One bias-corrected Adam step; returns ``(new_params, new_state)``."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v, new_t = {}, {}, {}
    for name, p in params.tensors.items():
        g = -grads[name] if maximize else grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient {name} shape {g.shape} != {p.shape}")
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_t[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v
    new_state = AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v)
    return params.replace(new_t), new_state


def categorical_sample(logits, rng):
    """Draw one index from ``softmax(logits)``; returns a one-hot vector.

    Accepts a single logit vector or a (B, n) batch.
    """
    logits = np.asarray(logits, dtype=np.float64)
    idx = np.argmax(logits + rng.gumbel(size=logits.shape), axis=-1)
    n = logits.shape[-1]
    return np.eye(n)[idx]


# ------------------------------------------------------------ checkpoint

_MAGIC = b"MSLSTM01"
_VERSION = 1
_HEADER = struct.Struct("<8sIIIIIq")


def save_checkpoint(params, path):
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, params.n_in, params.n_hidden,
                              params.n_out, params.n_noise, params.seed))
        for name in params.shapes():
            fh.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint header")
    magic, version, n_in, n_hidden, n_out, n_noise, seed = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a seqnet checkpoint")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    shapes = SeqModelParams._shapes(n_in, n_hidden, n_out, n_noise)
    offset = _HEADER.size
    tensors = {}
    for name, shape in shapes.items():
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        tensors[name] = arr.reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return SeqModelParams(tensors, n_in, n_hidden, n_out, n_noise, seed)
