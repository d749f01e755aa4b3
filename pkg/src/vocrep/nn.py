"""Minimal reverse-mode autodiff over numpy arrays.

Covers exactly the operations the waveform encoder, quantizer, transformer
and training loops need: elementwise math, matmul, 1-D convolution,
normalization, attention, the losses, Adam, and a finite-difference
gradient checker. Values are float32 by default; build tensors from float64
arrays to run checks with 64-bit headroom.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes cannot be combined."""


class Tensor:
    """A numpy array plus an optional gradient tape node."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        """Backpropagate from a scalar output through the recorded tape.

        Leaf gradients accumulate across calls; the caller zeroes them
        between optimizer steps.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x, dtype=np.float32) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _toposort(root: Tensor):
    seen = set()
    order = []
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Sum `g` down to `shape` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), backward)


def exp(t: Tensor) -> Tensor:
    out_data = np.exp(t.data)

    def backward(g):
        _accum(t, g * out_data)

    return _make(out_data, (t,), backward)


def log(t: Tensor) -> Tensor:
    def backward(g):
        _accum(t, g / t.data)

    return _make(np.log(t.data), (t,), backward)


def sqrt(t: Tensor) -> Tensor:
    out_data = np.sqrt(t.data)

    def backward(g):
        _accum(t, g * 0.5 / out_data)

    return _make(out_data, (t,), backward)


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0

    def backward(g):
        _accum(t, g * mask)

    return _make(np.where(mask, t.data, 0), (t,), backward)


def gelu(t: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF."""
    x = t.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        _accum(t, g * (cdf + x * pdf))

    return _make(x * cdf, (t,), backward)


def tsum(t: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        if axis is None:
            _accum(t, np.broadcast_to(g, t.shape))
        elif keepdims:
            _accum(t, np.broadcast_to(g, t.shape))
        else:
            _accum(t, np.broadcast_to(np.expand_dims(g, axis), t.shape))

    return _make(t.data.sum(axis=axis, keepdims=keepdims), (t,), backward)


def tmean(t: Tensor, axis=None, keepdims=False) -> Tensor:
    count = t.data.size if axis is None else t.data.shape[axis]
    return mul(tsum(t, axis=axis, keepdims=keepdims), _as_tensor(1.0 / count, t.dtype))


def tmax(t: Tensor, axis, keepdims=False) -> Tensor:
    """Max over one axis; gradient splits evenly among tied maxima."""
    out_data = t.data.max(axis=axis, keepdims=True)
    mask = (t.data == out_data).astype(t.data.dtype)
    mask /= mask.sum(axis=axis, keepdims=True)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(t, g * mask)

    return _make(out_data if keepdims else out_data.squeeze(axis), (t,), backward)


def reshape(t: Tensor, shape) -> Tensor:
    def backward(g):
        _accum(t, g.reshape(t.shape))

    return _make(t.data.reshape(shape), (t,), backward)


def transpose(t: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)

    def backward(g):
        _accum(t, g.transpose(inverse))

    return _make(t.data.transpose(axes), (t,), backward)


def concat(tensors, axis=0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(start, stop)
            _accum(t, g[tuple(index)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def pad1d(t: Tensor, before: int, after: int) -> Tensor:
    """Zero-pad along the last axis."""
    widths = [(0, 0)] * (t.ndim - 1) + [(before, after)]

    def backward(g):
        index = [slice(None)] * g.ndim
        index[-1] = slice(before, g.shape[-1] - after)
        _accum(t, g[tuple(index)])

    return _make(np.pad(t.data, widths), (t,), backward)


def take_rows(t: Tensor, idx) -> Tensor:
    """Gather rows (leading axis) by an integer index array."""
    idx = np.asarray(idx)

    def backward(g):
        buf = np.zeros_like(t.data)
        np.add.at(buf, idx, g)
        _accum(t, buf)

    return _make(t.data[idx], (t,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires tensors with at least 2 dims")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _unbroadcast(ga, a.shape))
        _accum(b, _unbroadcast(gb, b.shape))

    return _make(np.matmul(a.data, b.data), (a, b), backward)


def softmax(t: Tensor, axis=-1) -> Tensor:
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accum(t, y * (g - inner))

    return _make(y, (t,), backward)


def dropout(t: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if p <= 0.0:
        return t
    keep = (rng.random(t.shape) >= p).astype(t.data.dtype) / (1.0 - p)

    def backward(g):
        _accum(t, g * keep)

    return _make(t.data * keep, (t,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def backward(g):
        _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        _accum(bias, g.reshape(-1, d).sum(axis=0))
        gx = g * gain.data
        gsum = gx.sum(axis=-1, keepdims=True)
        gdot = (gx * xhat).sum(axis=-1, keepdims=True)
        _accum(x, inv / d * (d * gx - gsum - xhat * gdot))

    return _make(xhat * gain.data + bias.data, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: tuple[int, int] = (0, 0), groups: int = 1) -> Tensor:
    """1-D convolution of x[C_in, L] with weight[C_out, C_in/groups, K].

    No implicit padding: pass `padding` explicitly when needed.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    c_in, length = x.shape
    c_out, c_in_g, k = weight.shape
    if c_in % groups or c_out % groups or c_in_g != c_in // groups:
        raise ShapeError(
            f"channels ({c_in}->{c_out}) not divisible into {groups} groups")
    before, after = padding
    padded_len = length + before + after
    if padded_len < k:
        raise ShapeError(f"input length {padded_len} shorter than kernel {k}")

    xp = np.pad(x.data, ((0, 0), (before, after))) if (before or after) else x.data
    l_out = (padded_len - k) // stride + 1
    # windows[c, t, j] = xp[c, t*stride + j]
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)[:, ::stride, :]
    gci = c_in // groups
    gco = c_out // groups
    out = np.empty((c_out, l_out), dtype=x.data.dtype)
    for gi in range(groups):
        out[gi * gco:(gi + 1) * gco] = np.einsum(
            "ctj,ocj->ot",
            windows[gi * gci:(gi + 1) * gci],
            weight.data[gi * gco:(gi + 1) * gco],
            optimize=True,
        )
    if bias is not None:
        out += bias.data[:, None]

    def backward(g):
        gw = np.empty_like(weight.data)
        gxp = np.zeros_like(xp)
        for gi in range(groups):
            co = slice(gi * gco, (gi + 1) * gco)
            ci = slice(gi * gci, (gi + 1) * gci)
            gw[co] = np.einsum("ot,ctj->ocj", g[co], windows[ci], optimize=True)
            gcols = np.einsum("ot,ocj->ctj", g[co], weight.data[co], optimize=True)
            for j in range(k):
                gxp[ci, j:j + stride * l_out:stride] += gcols[:, :, j]
        _accum(weight, gw)
        if bias is not None:
            _accum(bias, g.sum(axis=1))
        _accum(x, gxp[:, before:padded_len - after] if (before or after) else gxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"q.weight": self.wq, "q.bias": self.bq,
                "k.weight": self.wk, "k.bias": self.bk,
                "v.weight": self.wv, "v.bias": self.bv,
                "out.weight": self.wo, "out.bias": self.bo}


def multi_head_attention(x: Tensor, params: AttentionParams, num_heads: int,
                         return_weights: bool = False):
    """Full bidirectional scaled dot-product attention over x[T, d]."""
    t_len, dim = x.shape
    if dim % num_heads:
        raise ValueError(f"model dim {dim} not divisible by {num_heads} heads")
    dh = dim // num_heads

    def split(y):  # [T, d] -> [heads, T, dh]
        return transpose(reshape(y, (t_len, num_heads, dh)), (1, 0, 2))

    q = split(add(matmul(x, params.wq), params.bq))
    k = split(add(matmul(x, params.wk), params.bk))
    v = split(add(matmul(x, params.wv), params.bv))
    scores = mul(matmul(q, transpose(k, (0, 2, 1))), _as_tensor(1.0 / math.sqrt(dh), x.dtype))
    weights = softmax(scores, axis=-1)
    ctx = matmul(weights, v)
    merged = reshape(transpose(ctx, (1, 0, 2)), (t_len, dim))
    out = add(matmul(merged, params.wo), params.bo)
    if return_weights:
        return out, weights
    return out


# ---------------------------------------------------------------------------
# losses and similarity
# ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, target) -> Tensor:
    """Negative log softmax probability of the target class.

    Accepts logits of shape [n] with an int target, or [N, n] with N int
    targets (returns the mean over rows).
    """
    if logits.ndim == 1:
        return cross_entropy(reshape(logits, (1, logits.shape[0])), [target])
    targets = np.asarray(target, dtype=np.intp)
    n_rows, n_classes = logits.shape
    if targets.shape != (n_rows,):
        raise ValueError("one target index per logits row required")
    if (targets < 0).any() or (targets >= n_classes).any():
        raise ValueError("target index out of range")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(shifted - lse)
    losses = lse[:, 0] - shifted[np.arange(n_rows), targets]

    def backward(g):
        gl = probs.copy()
        gl[np.arange(n_rows), targets] -= 1.0
        _accum(logits, gl * (g / n_rows))

    return _make(losses.mean(), (logits,), backward)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between two vectors; 0 if either has zero norm."""
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na == 0.0 or nb == 0.0:
        return Tensor(np.asarray(0.0, dtype=a.dtype))
    s = float(a.data @ b.data) / (na * nb)

    def backward(g):
        g = float(g)
        _accum(a, g * (b.data / (na * nb) - s * a.data / (na * na)))
        _accum(b, g * (a.data / (na * nb) - s * b.data / (nb * nb)))

    return _make(np.asarray(s, dtype=a.dtype), (a, b), backward)


def normalize_rows(t: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale the last axis to unit L2 norm (eps guards zero rows)."""
    norms = sqrt(tsum(mul(t, t), axis=-1, keepdims=True) + _as_tensor(eps, t.dtype))
    return div(t, norms)


def gumbel_softmax(logits: Tensor, temperature: float, hard: bool, noise) -> Tensor:
    """Softmax of (logits + noise) / temperature over the last axis.

    With `hard`, the forward value is the one-hot argmax while the gradient
    follows the soft distribution (straight-through estimator). `noise`
    must be Gumbel(0,1) draws shaped like `logits`; inject zeros in tests.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    noise = np.asarray(noise, dtype=logits.dtype)
    u = (logits.data + noise) / temperature
    u -= u.max(axis=-1, keepdims=True)
    e = np.exp(u)
    soft = e / e.sum(axis=-1, keepdims=True)
    if hard:
        out = np.zeros_like(soft)
        np.put_along_axis(out, soft.argmax(axis=-1)[..., None], 1.0, axis=-1)
    else:
        out = soft

    def backward(g):
        inner = (g * soft).sum(axis=-1, keepdims=True)
        _accum(logits, soft * (g - inner) / temperature)

    return _make(out, (logits,), backward)


def gumbel_noise(rng: np.random.Generator, shape, dtype=np.float32):
    return rng.gumbel(size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter Adam accumulators."""
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: Tensor, **kwargs) -> "AdamState":
        return cls(m=np.zeros_like(param.data), v=np.zeros_like(param.data), **kwargs)


def adam_step(param: Tensor, state: AdamState, lr: float):
    """One bias-corrected Adam update; mutates param.data and state."""
    if param.grad is None:
        raise ValueError("adam_step requires a gradient")
    g = param.grad
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    param.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype)


def clip_grad_norm(params, max_norm: float = 1.0) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    grads = [p.grad for p in params if p.grad is not None]
    for g in grads:
        total += float((g * g).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def grad_check(f, tensors, h: float = 1e-4) -> float:
    """Max relative error between the tape gradient and central differences.

    `f` must rebuild its forward pass from `tensors` on every call and
    return a scalar Tensor. Works best on float64 inputs.
    """
    tensors = [tensors] if isinstance(tensors, Tensor) else list(tensors)
    for t in tensors:
        t.zero_grad()
    loss = f()
    loss.backward()
    analytic = [np.array(t.grad, copy=True) if t.grad is not None else np.zeros_like(t.data)
                for t in tensors]

    worst = 0.0
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f().data)
            flat[i] = orig - h
            down = float(f().data)
            flat[i] = orig
            numeric[i] = (up - down) / (2.0 * h)
        a = a.reshape(-1)
        denom = np.maximum(np.abs(a) + np.abs(numeric), 1e-4)
        worst = max(worst, float(np.max(np.abs(a - numeric) / denom)))
    return worst
