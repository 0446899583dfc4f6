"""Minimal dense-tensor compute with reverse-mode differentiation.

Covers exactly the layer set the multiview model needs: conv2d with
edge-clamp padding, 2x2 max pooling, dense affine, layer norm, multi-head
self-attention, softmax cross-entropy, Adam, and a finite-difference
gradient checker. Everything is float64 and deterministic.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidLabel, InvalidParam, IoFailure, MalformedImage, ShapeMismatch

# Decision trace for kink detection: when a list is installed here, relu and
# max_pool2 append their branch decisions to it.
_decision_trace: list | None = None


class Tensor:
    """Node in the reverse-mode graph; data is always float64."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def backward(self):
        if self.data.size != 1:
            raise ShapeMismatch("backward requires a scalar")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accum(self, g):
        # gradients are never mutated in place, so storing a reference is safe
        if self.grad is None:
            self.grad = np.asarray(g, dtype=np.float64)
        else:
            self.grad = self.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, parents=(a, b))

    def bw(g):
        a._accum(_unbroadcast(g, a.data.shape))
        b._accum(_unbroadcast(g, b.data.shape))

    out._backward = bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data, parents=(a, b))

    def bw(g):
        a._accum(_unbroadcast(g, a.data.shape))
        b._accum(_unbroadcast(-g, b.data.shape))

    out._backward = bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, parents=(a, b))

    def bw(g):
        a._accum(_unbroadcast(g * b.data, a.data.shape))
        b._accum(_unbroadcast(g * a.data, b.data.shape))

    out._backward = bw
    return out


def scale(a: Tensor, s: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data * s, parents=(a,))
    out._backward = lambda g: a._accum(g * s)
    return out


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def mean_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.mean(), parents=(a,))
    out._backward = lambda g: a._accum(np.full_like(a.data, float(g) / a.data.size))
    return out


def mean_axis(a: Tensor, axis: int) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.mean(axis=axis), parents=(a,))
    n = a.data.shape[axis]

    def bw(g):
        a._accum(np.repeat(np.expand_dims(g / n, axis), n, axis=axis))

    out._backward = bw
    return out


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape), parents=(a,))
    out._backward = lambda g: a._accum(g.reshape(a.data.shape))
    return out


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.swapaxes(a.data, ax1, ax2), parents=(a,))
    out._backward = lambda g: a._accum(np.swapaxes(g, ax1, ax2))
    return out


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 parents=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accum(g[tuple(idx)])

    out._backward = bw
    return out


def slice_axis(a: Tensor, axis: int, lo: int, hi: int) -> Tensor:
    a = as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(lo, hi)
    idx = tuple(idx)
    out = Tensor(a.data[idx], parents=(a,))

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        a._accum(full)

    out._backward = bw
    return out


def pick(a: Tensor, index: tuple) -> Tensor:
    """Select one scalar element; used to target a single logit."""
    a = as_tensor(a)
    out = Tensor(a.data[index], parents=(a,))

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        a._accum(full)

    out._backward = bw
    return out


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    if _decision_trace is not None:
        _decision_trace.append(mask.tobytes())
    out = Tensor(a.data * mask, parents=(a,))
    out._backward = lambda g: a._accum(g * mask)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b for (..., m, k) @ (k, n) or batched operands of equal rank."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims {a.data.shape} @ {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data), parents=(a, b))

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        a._accum(_unbroadcast(ga, a.data.shape))
        b._accum(_unbroadcast(gb, b.data.shape))

    out._backward = bw
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p, parents=(a,))

    def bw(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        a._accum(p * (g - dot))

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation, NCHW input and OIHW kernel, edge-clamp padding."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatch("conv2d expects NCHW input and OIHW kernel")
    n, ci, h, wid = x.data.shape
    co, ci_k, kh, kw = w.data.shape
    if ci != ci_k:
        raise ShapeMismatch(f"channel mismatch: input {ci}, kernel {ci_k}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                mode="edge") if padding else x.data
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wid + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeMismatch("output dimensions must be >= 1")
    # im2col: (n, ci*kh*kw, oh*ow)
    sn, sc, sh, sw = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, shape=(n, ci, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride))
    cols = cols.reshape(n, ci * kh * kw, oh * ow)
    wmat = w.data.reshape(co, ci * kh * kw)
    out_data = np.matmul(wmat, cols).reshape(n, co, oh, ow)
    out = Tensor(out_data, parents=(x, w))

    def bw(g):
        gmat = np.ascontiguousarray(g.reshape(n, co, oh * ow))
        w._accum(np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape))
        gcols = np.matmul(wmat.T, gmat).reshape(n, ci, kh, kw, oh, ow)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += gcols[:, :, i, j]
        if padding:
            gx = gxp[:, :, padding:-padding, padding:-padding].copy()
            # edge-clamp padding routes border gradient back to the border rows
            gx[:, :, 0, :] += gxp[:, :, :padding, padding:-padding].sum(axis=2)
            gx[:, :, -1, :] += gxp[:, :, -padding:, padding:-padding].sum(axis=2)
            gx[:, :, :, 0] += gxp[:, :, padding:-padding, :padding].sum(axis=3)
            gx[:, :, :, -1] += gxp[:, :, padding:-padding, -padding:].sum(axis=3)
            gx[:, :, 0, 0] += gxp[:, :, :padding, :padding].sum(axis=(2, 3))
            gx[:, :, 0, -1] += gxp[:, :, :padding, -padding:].sum(axis=(2, 3))
            gx[:, :, -1, 0] += gxp[:, :, -padding:, :padding].sum(axis=(2, 3))
            gx[:, :, -1, -1] += gxp[:, :, -padding:, -padding:].sum(axis=(2, 3))
            x._accum(gx)
        else:
            x._accum(gxp)

    out._backward = bw
    return out


def max_pool2(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeMismatch("max_pool2 requires even spatial dimensions")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2)
    flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = flat.argmax(axis=-1)  # first index wins ties
    if _decision_trace is not None:
        _decision_trace.append(arg.tobytes())
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out = Tensor(out_data, parents=(x,))

    def bw(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        x._accum(gx.reshape(n, c, h, w))

    out._backward = bw
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """NCHW -> NC spatial mean."""
    x = as_tensor(x)
    n, c, h, w = x.data.shape
    out = Tensor(x.data.mean(axis=(2, 3)), parents=(x,))

    def bw(g):
        x._accum(np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).copy())

    out._backward = bw
    return out


def dense_affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeMismatch(f"dense inner dims {x.data.shape} x {w.data.shape}")
    return add(matmul(x, w), b)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Standardize the last axis, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data, parents=(x, gamma, beta))
    d = x.data.shape[-1]

    def bw(g):
        sum_axes = tuple(range(g.ndim - 1))
        gamma._accum((g * xhat).sum(axis=sum_axes))
        beta._accum(g.sum(axis=sum_axes))
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        x._accum(gx)

    out._backward = bw
    return out


def multi_head_self_attention(tokens: Tensor, wq: Tensor, wk: Tensor,
                              wv: Tensor, wo: Tensor, heads: int):
    """Self-attention over tokens shaped (T, D) or (B, T, D).

    Returns (output tensor, attention weights array (..., heads, T, T)).
    """
    tokens = as_tensor(tokens)
    squeeze = tokens.data.ndim == 2
    x = reshape(tokens, (1,) + tokens.data.shape) if squeeze else tokens
    b, t, d = x.data.shape
    if d % heads:
        raise ShapeMismatch(f"model dim {d} not divisible by {heads} heads")
    dh = d // heads

    def split_heads(y):
        return swapaxes(reshape(y, (b, t, heads, dh)), 1, 2)  # (b, heads, t, dh)

    q = split_heads(matmul(x, wq))
    k = split_heads(matmul(x, wk))
    v = split_heads(matmul(x, wv))
    scores = scale(matmul(q, swapaxes(k, -1, -2)), 1.0 / np.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v)
    merged = reshape(swapaxes(ctx, 1, 2), (b, t, d))
    out = matmul(merged, wo)
    if squeeze:
        out = reshape(out, (t, d))
        return out, attn.data[0]
    return out, attn.data


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise ShapeMismatch("labels must be one index per row")
    if labels.min() < 0 or labels.max() >= c:
        raise InvalidLabel(f"labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -logp[np.arange(n), labels].mean()
    out = Tensor(loss, parents=(logits,))

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        logits._accum(float(g) * p / n)

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# Parameter store + Adam
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SGNT1"


@dataclass
class ParamStore:
    """Named parameters with gradient slots and Adam state."""

    params: dict = field(default_factory=dict)
    trainable: dict = field(default_factory=dict)
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        t = Tensor(np.array(data, dtype=np.float64))
        self.params[name] = t
        self.trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def adam_step(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8):
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise InvalidParam("betas must lie in [0, 1)")
        self.step += 1
        bc1 = 1.0 - beta1 ** self.step
        bc2 = 1.0 - beta2 ** self.step
        for name, t in self.params.items():
            if not self.trainable[name] or t.grad is None:
                continue
            g = t.grad
            m = self.adam_m.get(name)
            v = self.adam_v.get(name)
            if m is None:
                m = np.zeros_like(t.data)
                v = np.zeros_like(t.data)
            m = beta1 * m + (1.0 - beta1) * g
            v = beta2 * v + (1.0 - beta2) * g * g
            self.adam_m[name] = m
            self.adam_v[name] = v
            t.data = t.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)

    def snapshot(self) -> dict:
        return {name: t.data.copy() for name, t in self.params.items()}

    def restore(self, snap: dict):
        for name, data in snap.items():
            self.params[name].data = data.copy()

    def save(self, path):
        try:
            with open(path, "wb") as fh:
                fh.write(CHECKPOINT_MAGIC)
                for name in sorted(self.params):
                    data = self.params[name].data
                    raw = name.encode("utf-8")
                    fh.write(struct.pack("<I", len(raw)))
                    fh.write(raw)
                    fh.write(struct.pack("<I", data.ndim))
                    for dim in data.shape:
                        fh.write(struct.pack("<I", dim))
                    fh.write(data.astype("<f8").tobytes())
        except OSError as exc:
            raise IoFailure(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ParamStore":
        try:
            with open(path, "rb") as fh:
                buf = fh.read()
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        if buf[:5] != CHECKPOINT_MAGIC:
            raise MalformedImage("bad checkpoint magic")
        store = cls()
        i = 5
        while i < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, i)
            i += 4
            name = buf[i:i + nlen].decode("utf-8")
            i += nlen
            (rank,) = struct.unpack_from("<I", buf, i)
            i += 4
            dims = struct.unpack_from(f"<{rank}I", buf, i)
            i += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(buf, dtype="<f8", count=count, offset=i).reshape(dims)
            i += 8 * count
            store.add(name, data.astype(np.float64))
        return store


# ---------------------------------------------------------------------------
# Gradient checker
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_err: float
    checked: int
    skipped: int


def grad_check(loss_fn, params, eps: float = 1e-5, num_coords: int = 20,
               seed: int = 0) -> GradCheckResult:
    """Compare analytic gradients of `loss_fn()` against central differences.

    `params` is a list of Tensors the loss reads. Coordinates whose +/- eps
    evaluations take different relu/max-pool branches are skipped.
    """
    global _decision_trace
    if eps <= 0:
        raise InvalidParam("eps must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    sizes = [p.data.size for p in params]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    coords = rng.choice(total, size=min(num_coords, total), replace=False)
    offsets = np.cumsum([0] + sizes)

    max_err = 0.0
    checked = 0
    skipped = 0
    for flat in sorted(int(c) for c in coords):
        pi = int(np.searchsorted(offsets, flat, side="right")) - 1
        local = flat - offsets[pi]
        p = params[pi]
        orig = p.data.ravel()[local]

        vals = []
        traces = []
        for delta in (eps, -eps):
            p.data.ravel()[local] = orig + delta
            _decision_trace = []
            try:
                vals.append(float(loss_fn().data))
                traces.append(tuple(_decision_trace))
            finally:
                _decision_trace = None
        p.data.ravel()[local] = orig
        if traces[0] != traces[1]:
            skipped += 1
            continue
        numeric = (vals[0] - vals[1]) / (2.0 * eps)
        a = float(analytic[pi].ravel()[local])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        max_err = max(max_err, err)
        checked += 1
    return GradCheckResult(max_rel_err=max_err, checked=checked, skipped=skipped)
