"""Minimal reverse-mode differentiable layers, loss, and SGD on numpy arrays.

Each layer owns its :class:`Parameter` objects and implements ``forward``
(caching whatever backward needs) and ``backward`` (returning the gradient
w.r.t. its input while accumulating into each parameter's ``grad``). That is
all the two classifiers in this toolkit need; there is no graph compiler.

Training math is single precision by default; gradient checking builds f64
instances via the registry at the bottom of this module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError


class Parameter:
    """A value tensor with its gradient accumulator and SGD velocity."""

    __slots__ = ("name", "value", "grad", "velocity")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.ascontiguousarray(value)
        self.grad = np.zeros_like(self.value)
        self.velocity = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def glorot_uniform(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    if len(shape) == 2:
        fan_out, fan_in = shape
    elif len(shape) == 4:  # (c_out, c_in, kh, kw)
        fan_in = shape[1] * shape[2] * shape[3]
        fan_out = shape[0] * shape[2] * shape[3]
    else:
        fan_in = fan_out = int(np.prod(shape))
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Layer:
    """Common interface: params(), forward(x), backward(dout)."""

    def params(self) -> list[Parameter]:
        return []


class Linear(Layer):
    """Affine map out = x @ W.T + b over rows of x."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 dtype=np.float32, name: str = "linear"):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.w = Parameter(f"{name}.w", glorot_uniform(rng, (out_dim, in_dim), dtype))
        self.b = Parameter(f"{name}.b", np.zeros(out_dim, dtype=dtype))
        self._x = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"{self.w.name}: input has {x.shape[-1]} features, expected {self.in_dim}")
        self._x = x
        return x @ self.w.value.T + self.b.value

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x = self._x
        if dout.ndim == 1:
            self.w.grad += np.outer(dout, x)
            self.b.grad += dout
        else:
            self.w.grad += dout.T @ x
            self.b.grad += dout.sum(axis=0)
        return dout @ self.w.value


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0)

    def backward(self, dout):
        return np.where(self._mask, dout, 0)


class Conv2d2x2(Layer):
    """Valid 2x2 cross-correlation, stride 1: (C_in, H, W) -> (C_out, H-1, W-1)."""

    KERNEL = 2

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 dtype=np.float32, name: str = "conv"):
        self.c_in, self.c_out = c_in, c_out
        k = self.KERNEL
        self.w = Parameter(f"{name}.w", glorot_uniform(rng, (c_out, c_in, k, k), dtype))
        self.b = Parameter(f"{name}.b", np.zeros(c_out, dtype=dtype))
        self._x = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x: np.ndarray) -> np.ndarray:
        c, h, w = x.shape
        if c != self.c_in:
            raise ValueError(f"{self.w.name}: input has {c} channels, expected {self.c_in}")
        if h < 2 or w < 2:
            raise ValueError(f"{self.w.name}: input {h}x{w} is smaller than the 2x2 kernel")
        self._x = x
        out = np.tile(self.b.value[:, None, None], (1, h - 1, w - 1)).astype(x.dtype)
        for di in range(2):
            for dj in range(2):
                patch = x[:, di:di + h - 1, dj:dj + w - 1]
                out += np.tensordot(self.w.value[:, :, di, dj], patch, axes=([1], [0]))
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x = self._x
        _, h, w = x.shape
        dx = np.zeros_like(x)
        self.b.grad += dout.sum(axis=(1, 2))
        for di in range(2):
            for dj in range(2):
                patch = x[:, di:di + h - 1, dj:dj + w - 1]
                self.w.grad[:, :, di, dj] += np.tensordot(dout, patch, axes=([1, 2], [1, 2]))
                dx[:, di:di + h - 1, dj:dj + w - 1] += np.tensordot(
                    self.w.value[:, :, di, dj].T, dout, axes=([1], [0])
                )
        return dx


@dataclass(frozen=True)
class TdnnLayerSpec:
    """Context size, dilation, and stride of one time-delay layer."""

    context_size: int = 1
    dilation: int = 1
    stride: int = 1
    activation: str = "relu"  # relu | none

    def __post_init__(self):
        if self.context_size < 1 or self.dilation < 1 or self.stride < 1:
            raise ValueError("context size, dilation, and stride must all be >= 1")
        if self.activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def span(self) -> int:
        """Input frames consumed by one output frame."""
        return (self.context_size - 1) * self.dilation + 1

    def offsets(self) -> list[int]:
        """Frame offsets gathered around each output position (centered)."""
        k, r = self.context_size, self.dilation
        return [math.floor((i - (k - 1) / 2) * r) for i in range(k)]

    def out_frames(self, t: int) -> int:
        if t < self.span:
            raise ValueError(f"input of {t} frames is below the layer minimum of {self.span}")
        return (t - self.span) // self.stride + 1


class TdnnLayer(Layer):
    """Time-delay layer: affine map over a dilated context window per frame."""

    def __init__(self, spec: TdnnLayerSpec, in_dim: int, out_dim: int,
                 rng: np.random.Generator, dtype=np.float32, name: str = "tdnn"):
        self.spec = spec
        self.in_dim, self.out_dim = in_dim, out_dim
        k = spec.context_size
        self.w = Parameter(f"{name}.w", glorot_uniform(rng, (out_dim, k * in_dim), dtype))
        self.b = Parameter(f"{name}.b", np.zeros(out_dim, dtype=dtype))
        self._cache = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x: np.ndarray) -> np.ndarray:
        t, d = x.shape
        if d != self.in_dim:
            raise ValueError(f"{self.w.name}: input has {d} features, expected {self.in_dim}")
        spec = self.spec
        t_out = spec.out_frames(t)
        offsets = np.asarray(spec.offsets())
        centers = -offsets[0] + np.arange(t_out) * spec.stride
        idx = centers[:, None] + offsets[None, :]          # (T', k)
        gathered = x[idx].reshape(t_out, -1)               # (T', k*I)
        z = gathered @ self.w.value.T + self.b.value
        mask = None
        if spec.activation == "relu":
            mask = z > 0
            z = np.where(mask, z, 0)
        self._cache = (x.shape, idx, gathered, mask)
        return z

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x_shape, idx, gathered, mask = self._cache
        dz = np.where(mask, dout, 0) if mask is not None else dout
        self.w.grad += dz.T @ gathered
        self.b.grad += dz.sum(axis=0)
        dgather = (dz @ self.w.value).reshape(-1, self.in_dim)
        dx = np.zeros(x_shape, dtype=dout.dtype)
        np.add.at(dx, idx.ravel(), dgather)
        return dx


class LstmDirection(Layer):
    """Single-direction LSTM over (T, I) -> (T, H); initial states are zero.

    Gate order in the stacked parameters is input, forget, cell, output; the
    forget-gate bias starts at 1 so early training does not wash out state.
    """

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator,
                 dtype=np.float32, reverse: bool = False, name: str = "lstm"):
        self.in_dim, self.hidden, self.reverse = in_dim, hidden, reverse
        self.w = Parameter(f"{name}.w", glorot_uniform(rng, (4 * hidden, in_dim), dtype))
        self.u = Parameter(f"{name}.u", glorot_uniform(rng, (4 * hidden, hidden), dtype))
        bias = np.zeros(4 * hidden, dtype=dtype)
        bias[hidden:2 * hidden] = 1.0
        self.b = Parameter(f"{name}.b", bias)
        self._cache = None
        self.last_dh0 = None
        self.last_dc0 = None

    def params(self):
        return [self.w, self.u, self.b]

    def forward(self, x: np.ndarray, h0: np.ndarray | None = None,
                c0: np.ndarray | None = None) -> np.ndarray:
        t, d = x.shape
        if d != self.in_dim:
            raise ValueError(f"{self.w.name}: input has {d} features, expected {self.in_dim}")
        hsz = self.hidden
        seq = x[::-1] if self.reverse else x
        zx = seq @ self.w.value.T + self.b.value
        gates = np.empty((t, 4 * hsz), dtype=x.dtype)
        cells = np.empty((t, hsz), dtype=x.dtype)
        tanh_c = np.empty((t, hsz), dtype=x.dtype)
        hidden = np.empty((t, hsz), dtype=x.dtype)
        h_prev = np.zeros(hsz, dtype=x.dtype) if h0 is None else h0
        c_prev = np.zeros(hsz, dtype=x.dtype) if c0 is None else c0
        h_first, c_first = h_prev, c_prev
        for step in range(t):
            z = zx[step] + self.u.value @ h_prev
            gi = _sigmoid(z[:hsz])
            gf = _sigmoid(z[hsz:2 * hsz])
            gg = np.tanh(z[2 * hsz:3 * hsz])
            go = _sigmoid(z[3 * hsz:])
            c_prev = gf * c_prev + gi * gg
            tc = np.tanh(c_prev)
            h_prev = go * tc
            gates[step] = np.concatenate([gi, gf, gg, go])
            cells[step] = c_prev
            tanh_c[step] = tc
            hidden[step] = h_prev
        self._cache = (seq, gates, cells, tanh_c, hidden, h_first, c_first)
        return hidden[::-1] if self.reverse else hidden

    def backward(self, dout: np.ndarray) -> np.ndarray:
        seq, gates, cells, tanh_c, hidden, h_first, c_first = self._cache
        t = seq.shape[0]
        hsz = self.hidden
        dh_seq = dout[::-1] if self.reverse else dout
        dz_all = np.empty((t, 4 * hsz), dtype=dout.dtype)
        dh_carry = np.zeros(hsz, dtype=dout.dtype)
        dc = np.zeros(hsz, dtype=dout.dtype)
        for step in range(t - 1, -1, -1):
            gi = gates[step, :hsz]
            gf = gates[step, hsz:2 * hsz]
            gg = gates[step, 2 * hsz:3 * hsz]
            go = gates[step, 3 * hsz:]
            tc = tanh_c[step]
            c_prev = cells[step - 1] if step > 0 else c_first
            dh = dh_seq[step] + dh_carry
            do = dh * tc
            dc = dc + dh * go * (1.0 - tc * tc)
            di = dc * gg
            dg = dc * gi
            df = dc * c_prev
            dz = np.concatenate([
                di * gi * (1.0 - gi),
                df * gf * (1.0 - gf),
                dg * (1.0 - gg * gg),
                do * go * (1.0 - go),
            ])
            dz_all[step] = dz
            dh_carry = self.u.value.T @ dz
            dc = dc * gf
        h_hist = np.vstack([h_first[None, :], hidden[:-1]])
        self.w.grad += dz_all.T @ seq
        self.u.grad += dz_all.T @ h_hist
        self.b.grad += dz_all.sum(axis=0)
        self.last_dh0 = dh_carry
        self.last_dc0 = dc
        dx = dz_all @ self.w.value
        return dx[::-1] if self.reverse else dx


class BiLstm(Layer):
    """Bidirectional LSTM: forward and backward hidden states concatenated."""

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator,
                 dtype=np.float32, name: str = "bilstm"):
        self.hidden = hidden
        self.fwd = LstmDirection(in_dim, hidden, rng, dtype, reverse=False, name=f"{name}.fwd")
        self.bwd = LstmDirection(in_dim, hidden, rng, dtype, reverse=True, name=f"{name}.bwd")

    def params(self):
        return self.fwd.params() + self.bwd.params()

    def forward(self, x: np.ndarray) -> np.ndarray:
        return np.concatenate([self.fwd.forward(x), self.bwd.forward(x)], axis=1)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        h = self.hidden
        return self.fwd.backward(dout[:, :h]) + self.bwd.backward(dout[:, h:])


class AttentionPool(Layer):
    """Additive attention pooling of (T, F) into ``out_dim`` logits.

    Scores are v . tanh(W h_t), softmax-normalized into weights alpha; the
    weighted context vector goes through a final affine map. The last weights
    stay available on ``last_alpha`` for inspection.
    """

    def __init__(self, in_dim: int, attn_dim: int, out_dim: int,
                 rng: np.random.Generator, dtype=np.float32, name: str = "attn"):
        self.in_dim = in_dim
        self.w = Parameter(f"{name}.w", glorot_uniform(rng, (attn_dim, in_dim), dtype))
        self.v = Parameter(f"{name}.v", glorot_uniform(rng, (attn_dim, 1), dtype)[:, 0])
        self.out = Linear(in_dim, out_dim, rng, dtype, name=f"{name}.out")
        self.last_alpha = None
        self._cache = None

    def params(self):
        return [self.w, self.v] + self.out.params()

    def forward(self, h: np.ndarray) -> np.ndarray:
        if h.ndim != 2 or h.shape[0] < 1:
            raise ValueError(f"attention expects (T>=1, F), got {h.shape}")
        u = np.tanh(h @ self.w.value.T)      # (T, A)
        scores = u @ self.v.value            # (T,)
        alpha = softmax(scores)
        context = alpha @ h                  # (F,)
        self.last_alpha = alpha
        self._cache = (h, u, alpha, context)
        return self.out.forward(context)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        h, u, alpha, _ = self._cache
        dcontext = self.out.backward(dout)
        dalpha = h @ dcontext
        dh = np.outer(alpha, dcontext)
        dscores = alpha * (dalpha - float(alpha @ dalpha))
        self.v.grad += u.T @ dscores
        dpre = np.outer(dscores, self.v.value) * (1.0 - u * u)
        self.w.grad += dpre.T @ h
        dh += dpre @ self.w.value
        return dh


def softmax(z: np.ndarray) -> np.ndarray:
    """Stable softmax along the last axis."""
    z = np.asarray(z)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, label: int) -> float:
    """-ln p[label] for an already-normalized probability vector."""
    if not 0 <= label < probs.shape[-1]:
        raise ValueError(f"label {label} out of range for {probs.shape[-1]} classes")
    return float(-np.log(probs[label]))


def softmax_cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. the logits (probs - onehot)."""
    probs = softmax(np.asarray(logits, dtype=np.float64))
    loss = cross_entropy(probs, label)
    grad = probs.copy()
    grad[label] -= 1.0
    return loss, grad.astype(logits.dtype)


def sgd_step(params, lr: float, momentum: float = 0.0):
    """Momentum SGD update; gradients are consumed (zeroed) by the step."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {p.name}")
        p.velocity *= momentum
        p.velocity += p.grad
        p.value -= lr * p.velocity
        p.zero_grad()


# --- Gradient checking ------------------------------------------------------


def max_rel_error(loss_fn, params, rng: np.random.Generator, h: float = 1e-3,
                  max_coords: int = 200, analytic: dict | None = None) -> float:
    """Max relative error of analytic grads vs central differences.

    ``loss_fn()`` recomputes the scalar loss from the params' current values.
    ``analytic`` maps parameter name to its gradient array; when omitted it is
    taken from ``p.grad``. At most ``max_coords`` coordinates per tensor are
    sampled (seeded).
    """
    worst = 0.0
    for p in params:
        grad = analytic[p.name] if analytic is not None else p.grad
        flat = p.value.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            loss_plus = loss_fn()
            flat[i] = orig - h
            loss_minus = loss_fn()
            flat[i] = orig
            numeric = (loss_plus - loss_minus) / (2.0 * h)
            a = float(grad.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-2)
            worst = max(worst, err)
    return worst


def _check_linear(seed, shapes):
    b, i, o = shapes or (3, 4, 5)
    rng = np.random.default_rng(seed)
    layer = Linear(i, o, rng, dtype=np.float64)
    x = rng.standard_normal((b, i))
    target = rng.standard_normal((b, o))

    def loss_fn(compute_grads=False):
        out = layer.forward(x)
        loss = 0.5 * float(np.sum((out - target) ** 2))
        if compute_grads:
            layer.backward(out - target)
        return loss

    return loss_fn, layer.params()


def _check_conv(seed, shapes):
    c_in, c_out, height, width = shapes or (2, 3, 5, 4)
    rng = np.random.default_rng(seed)
    layer = Conv2d2x2(c_in, c_out, rng, dtype=np.float64)
    x = rng.standard_normal((c_in, height, width))
    target = rng.standard_normal((c_out, height - 1, width - 1))

    def loss_fn(compute_grads=False):
        out = layer.forward(x)
        loss = 0.5 * float(np.sum((out - target) ** 2))
        if compute_grads:
            layer.backward(out - target)
        return loss

    return loss_fn, layer.params()


def _check_tdnn(seed, shapes):
    t, i, o = shapes or (9, 3, 4)
    rng = np.random.default_rng(seed)
    layer = TdnnLayer(TdnnLayerSpec(3, 2, 1, "relu"), i, o, rng, dtype=np.float64)
    layer.b.value += 0.3  # keep preactivations away from the ReLU kink
    x = rng.standard_normal((t, i))
    t_out = layer.spec.out_frames(t)
    target = rng.standard_normal((t_out, o))

    def loss_fn(compute_grads=False):
        out = layer.forward(x)
        loss = 0.5 * float(np.sum((out - target) ** 2))
        if compute_grads:
            layer.backward(out - target)
        return loss

    return loss_fn, layer.params()


def _check_lstm_cell(seed, shapes):
    i, hsz = shapes or (4, 3)
    rng = np.random.default_rng(seed)
    cell = LstmDirection(i, hsz, rng, dtype=np.float64)
    x = rng.standard_normal((1, i))
    h0 = Parameter("h0", rng.standard_normal(hsz))
    c0 = Parameter("c0", rng.standard_normal(hsz))
    target = rng.standard_normal((1, hsz))

    def loss_fn(compute_grads=False):
        out = cell.forward(x, h0=h0.value, c0=c0.value)
        loss = 0.5 * float(np.sum((out - target) ** 2))
        if compute_grads:
            cell.backward(out - target)
            h0.grad += cell.last_dh0
            c0.grad += cell.last_dc0
        return loss

    return loss_fn, cell.params() + [h0, c0]


def _check_bilstm(seed, shapes):
    t, i, hsz = shapes or (5, 3, 4)
    rng = np.random.default_rng(seed)
    layer = BiLstm(i, hsz, rng, dtype=np.float64)
    x = rng.standard_normal((t, i))
    target = rng.standard_normal((t, 2 * hsz))

    def loss_fn(compute_grads=False):
        out = layer.forward(x)
        loss = 0.5 * float(np.sum((out - target) ** 2))
        if compute_grads:
            layer.backward(out - target)
        return loss

    return loss_fn, layer.params()


def _check_attention(seed, shapes):
    t, f, a, o = shapes or (6, 4, 3, 5)
    rng = np.random.default_rng(seed)
    layer = AttentionPool(f, a, o, rng, dtype=np.float64)
    x = rng.standard_normal((t, f))
    target = rng.standard_normal(o)

    def loss_fn(compute_grads=False):
        out = layer.forward(x)
        loss = 0.5 * float(np.sum((out - target) ** 2))
        if compute_grads:
            layer.backward(out - target)
        return loss

    return loss_fn, layer.params()


def _check_softmax_xent(seed, shapes):
    (k,) = shapes or (7,)
    rng = np.random.default_rng(seed)
    logits = Parameter("logits", rng.standard_normal(k))
    label = int(rng.integers(k))

    def loss_fn(compute_grads=False):
        loss, grad = softmax_cross_entropy(logits.value, label)
        if compute_grads:
            logits.grad += grad
        return loss

    return loss_fn, [logits]


GRAD_CHECKS = {
    "linear": _check_linear,
    "conv2d_2x2": _check_conv,
    "tdnn_layer": _check_tdnn,
    "lstm_cell": _check_lstm_cell,
    "lstm_bidirectional": _check_bilstm,
    "attention_pool": _check_attention,
    "softmax_cross_entropy": _check_softmax_xent,
}


def grad_check(op: str, shapes=None, seed: int = 0, h: float = 1e-3,
               max_coords: int = 200) -> float:
    """Central-difference check of a registered op; returns the max relative error."""
    if op not in GRAD_CHECKS:
        raise KeyError(f"no gradient check registered for {op!r}; have {sorted(GRAD_CHECKS)}")
    loss_fn, params = GRAD_CHECKS[op](seed, shapes)
    for p in params:
        p.zero_grad()
    loss_fn(compute_grads=True)
    analytic = {p.name: p.grad.copy() for p in params}
    rng = np.random.default_rng(seed + 1)
    return max_rel_error(loss_fn, params, rng, h=h, max_coords=max_coords, analytic=analytic)
