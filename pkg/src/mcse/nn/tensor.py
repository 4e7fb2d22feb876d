"""Reverse-mode differentiation engine on numpy arrays.

A Tensor wraps an ndarray and remembers how it was produced; backward()
walks the tape in reverse topological order and accumulates gradients
into every reachable Parameter. The engine is deliberately small: only
the operations the enhancement/acoustic models need are provided, each
with an explicit adjoint.

Gradients accumulate across backward calls until zero_grad(); graphs are
single-use (re-running backward on the same root raises StaleGraphError).
All computation is single-threaded numpy and therefore deterministic for
fixed inputs.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Parameter",
    "StaleGraphError",
    "no_grad",
    "constant",
    "concat",
    "maximum",
    "minimum",
    "matmul",
    "conv2d",
    "depthwise_conv1d",
    "pad2d",
    "pad_edge1d",
    "unfold_frames",
    "overlap_add",
    "cross_entropy",
]


class StaleGraphError(RuntimeError):
    """Raised when backward() is invoked twice on the same graph root."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording; forward results become plain constants."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (adjoint of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Node of the compute tape: value + backward closure + parent refs."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward_fn", "_done")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward_fn=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = _parents
        self._backward_fn = _backward_fn
        self._done = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # -- gradient bookkeeping ------------------------------------------------

    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = grad.astype(self.data.dtype, copy=True)
        else:
            self.grad += grad

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's .grad.

        `self` must be scalar unless `seed` supplies an upstream gradient of
        matching shape. Each graph may be backwarded once.
        """
        if self._done:
            raise StaleGraphError(
                "backward() already ran on this graph root; rebuild the graph "
                "with a fresh forward pass before differentiating again"
            )
        if seed is None:
            if self.data.size != 1:
                raise ValueError(f"backward() root must be scalar, got shape {self.data.shape}")
            seed = np.ones_like(self.data)
        else:
            seed = np.broadcast_to(np.asarray(seed, dtype=self.data.dtype), self.data.shape)

        # Iterative reverse topological order (graphs can be thousands deep).
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.array(seed, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward_fn is None:
                node._accumulate(g)
            if node._backward_fn is not None:
                for parent, pg in node._backward_fn(g):
                    if pg is None:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] += pg
                    else:
                        grads[key] = pg
        self._done = True

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        neg = mul(other, -1.0) if isinstance(other, Tensor) else -other
        return add(self, neg)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # method aliases used all over the model code
    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


class Parameter(Tensor):
    """Named trainable (or frozen) tensor; gradient persists across steps."""

    __slots__ = ()

    def __init__(self, data, name=None, trainable=True):
        super().__init__(np.asarray(data), requires_grad=trainable, name=name)

    @property
    def trainable(self):
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag):
        self.requires_grad = bool(flag)


def constant(data, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=False)


def _pair(a, b) -> tuple["Tensor", "Tensor"]:
    """Coerce one plain operand to a constant Tensor of the other's dtype."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    return Tensor(np.asarray(a, dtype=b.data.dtype)), b


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward_fn is not None


def _make(data, parents, backward_fn) -> Tensor:
    if _grad_enabled() and any(_needs_grad(p) for p in parents):
        return Tensor(data, _parents=tuple(parents), _backward_fn=backward_fn)
    return Tensor(data)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data

    def bw(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape)))

    return _make(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def bw(g):
        return (
            (a, _unbroadcast(g * b.data, a.data.shape) if _needs_grad(a) else None),
            (b, _unbroadcast(g * a.data, b.data.shape) if _needs_grad(b) else None),
        )

    return _make(out, (a, b), bw)


def power(x: Tensor, p: float) -> Tensor:
    out = x.data**p

    def bw(g):
        return ((x, g * (p * x.data ** (p - 1.0))),)

    return _make(out, (x,), bw)


def square(x: Tensor) -> Tensor:
    out = x.data * x.data

    def bw(g):
        return ((x, g * (2.0 * x.data)),)

    return _make(out, (x,), bw)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def bw(g):
        return ((x, g * (0.5 / out)),)

    return _make(out, (x,), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        return ((x, g * out),)

    return _make(out, (x,), bw)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def bw(g):
        return ((x, g / x.data),)

    return _make(out, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)

    def bw(g):
        return ((x, g * (out * (1.0 - out))),)

    return _make(out, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bw(g):
        return ((x, g * (1.0 - out * out)),)

    return _make(out, (x,), bw)


def maximum(x: Tensor, other) -> Tensor:
    """Elementwise max; at ties the gradient goes to the `x` side only when
    strictly greater (subgradient 0 at the kink, matching relu at 0)."""
    oth = other.data if isinstance(other, Tensor) else np.asarray(other, dtype=x.data.dtype)
    out = np.maximum(x.data, oth)
    if isinstance(other, Tensor):

        def bw(g):
            mx = x.data > oth
            return (
                (x, _unbroadcast(g * mx, x.data.shape)),
                (other, _unbroadcast(g * ~mx, other.data.shape)),
            )

        return _make(out, (x, other), bw)

    def bw(g):
        return ((x, g * (x.data > oth)),)

    return _make(out, (x,), bw)


def minimum(x: Tensor, other) -> Tensor:
    oth = other.data if isinstance(other, Tensor) else np.asarray(other, dtype=x.data.dtype)
    out = np.minimum(x.data, oth)
    if isinstance(other, Tensor):

        def bw(g):
            mx = x.data < oth
            return (
                (x, _unbroadcast(g * mx, x.data.shape)),
                (other, _unbroadcast(g * ~mx, other.data.shape)),
            )

        return _make(out, (x, other), bw)

    def bw(g):
        return ((x, g * (x.data < oth)),)

    return _make(out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    return maximum(x, 0.0)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside [lo, hi]."""
    out = np.clip(x.data, lo, hi)

    def bw(g):
        return ((x, g * ((x.data >= lo) & (x.data <= hi))),)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            g = np.expand_dims(g, tuple(a % x.data.ndim for a in axes))
        return ((x, np.broadcast_to(g, x.data.shape).astype(x.data.dtype)),)

    return _make(out, (x,), bw)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.data.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def cumsum(x: Tensor, axis: int) -> Tensor:
    out = np.cumsum(x.data, axis=axis)

    def bw(g):
        return ((x, np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)),)

    return _make(out, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def bw(g):
        return ((x, g.reshape(x.data.shape)),)

    return _make(out, (x,), bw)


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        return ((x, np.transpose(g, inv)),)

    return _make(out, (x,), bw)


def getitem(x: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing only; each input element is read at most
    once, so the adjoint is plain assignment into zeros."""
    out = x.data[idx]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return ((x, gx),)

    return _make(out, (x,), bw)


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple((t, p) for t, p in zip(tensors, pieces))

    return _make(out, tuple(tensors), bw)


def pad2d(x: Tensor, pad) -> Tensor:
    """Zero-pad the last two axes of a (C, H, W) tensor; pad=((t,b),(l,r))."""
    (pt, pb), (pl, pr) = pad
    if pt == pb == pl == pr == 0:
        return x
    out = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr)))
    H, W = x.data.shape[-2:]

    def bw(g):
        return ((x, g[:, pt : pt + H, pl : pl + W]),)

    return _make(out, (x,), bw)


def pad1d(x: Tensor, left: int, right: int) -> Tensor:
    """Zero-pad the time axis of a (C, T) tensor."""
    if left == 0 and right == 0:
        return x
    out = np.pad(x.data, ((0, 0), (left, right)))
    T = x.data.shape[1]

    def bw(g):
        return ((x, g[:, left : left + T]),)

    return _make(out, (x,), bw)


def pad_edge1d(x: Tensor, left: int, right: int) -> Tensor:
    """Replicate the first/last frame of (C, T) along time."""
    if left == 0 and right == 0:
        return x
    out = np.pad(x.data, ((0, 0), (left, right)), mode="edge")
    T = x.data.shape[1]

    def bw(g):
        core = g[:, left : left + T].copy()
        if left:
            core[:, 0] += g[:, :left].sum(axis=1)
        if right:
            core[:, -1] += g[:, left + T :].sum(axis=1)
        return ((x, core),)

    return _make(out, (x,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data @ b.data

    def bw(g):
        return (
            (a, g @ b.data.T if _needs_grad(a) else None),
            (b, a.data.T @ g if _needs_grad(b) else None),
        )

    return _make(out, (a, b), bw)


# ---------------------------------------------------------------------------
# convolution kernels
# ---------------------------------------------------------------------------

_idx_cache: dict[tuple, tuple] = {}


def _conv2d_indices(Hp, Wp, kh, kw, sh, sw, dh, dw):
    key = (Hp, Wp, kh, kw, sh, sw, dh, dw)
    hit = _idx_cache.get(key)
    if hit is not None:
        return hit
    Ho = (Hp - dh * (kh - 1) - 1) // sh + 1
    Wo = (Wp - dw * (kw - 1) - 1) // sw + 1
    if Ho <= 0 or Wo <= 0:
        raise ValueError(
            f"kernel ({kh}x{kw}, dilation {dh}x{dw}) does not fit padded input {Hp}x{Wp}"
        )
    rows = [np.arange(Ho) * sh + r * dh for r in range(kh)]  # each (Ho,)
    wcols = np.arange(kw)[:, None] * dw + np.arange(Wo)[None, :] * sw  # (kw, Wo)
    flat = [(rows[r][None, :, None] * Wp + wcols[:, None, :]) for r in range(kh)]  # (kw,Ho,Wo)
    entry = (Ho, Wo, rows, wcols, flat)
    if len(_idx_cache) > 256:
        _idx_cache.clear()
    _idx_cache[key] = entry
    return entry


def conv2d(x: Tensor, w: Tensor, bias=None, stride=(1, 1), dilation=(1, 1), pad=((0, 0), (0, 0))) -> Tensor:
    """2-D cross-correlation of (C,H,W) with (O,C,kh,kw) kernels.

    Accumulates one im2col GEMM per kernel row, so a kernel whose rows are
    exact negations of each other cancels bit-exactly on identical input
    rows (the inter-channel difference layer relies on this).
    """
    x = pad2d(x, pad)
    C, Hp, Wp = x.data.shape
    O, Cw, kh, kw = w.data.shape
    if Cw != C:
        raise ValueError(f"conv2d channel mismatch: input has {C}, kernel expects {Cw}")
    sh, sw = stride
    dh, dw = dilation
    Ho, Wo, rows, wcols, flat = _conv2d_indices(Hp, Wp, kh, kw, sh, sw, dh, dw)

    xd = x.data
    cols = []  # per kernel row: (C*kw, Ho*Wo)
    out2 = None
    w2 = w.data.reshape(O, C, kh, kw)
    for r in range(kh):
        col = xd[:, rows[r], :][:, :, wcols]  # (C, Ho, kw, Wo)
        col = col.transpose(0, 2, 1, 3).reshape(C * kw, Ho * Wo)
        cols.append(col)
        wr = w2[:, :, r, :].reshape(O, C * kw)
        part = wr @ col
        out2 = part if out2 is None else out2 + part
    out = out2.reshape(O, Ho, Wo)
    if bias is not None:
        out = out + bias.data.reshape(O, 1, 1)

    def bw(g):
        g2 = g.reshape(O, Ho * Wo)
        need_x, need_w = _needs_grad(x), _needs_grad(w)
        gw = np.empty_like(w.data) if need_w else None
        gx_flat = np.zeros(C * Hp * Wp, dtype=xd.dtype) if need_x else None
        choff = (np.arange(C) * (Hp * Wp))[:, None, None, None]
        for r in range(kh):
            if need_w:
                gw[:, :, r, :] = (g2 @ cols[r].T).reshape(O, C, kw)
            if need_x:
                gcol = (w2[:, :, r, :].reshape(O, C * kw).T @ g2).reshape(C, kw, Ho, Wo)
                idx = (choff + flat[r][None]).ravel()
                gx_flat += np.bincount(idx, weights=gcol.ravel(),
                                       minlength=gx_flat.size).astype(xd.dtype)
        outs = [(x, gx_flat.reshape(C, Hp, Wp) if need_x else None), (w, gw)]
        if bias is not None:
            outs.append((bias, g.sum(axis=(1, 2)) if _needs_grad(bias) else None))
        return tuple(outs)

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, bw)


def depthwise_conv1d(x: Tensor, w: Tensor, stride=1, dilation=1) -> Tensor:
    """Per-channel 1-D cross-correlation: (C,T) with (C,k) -> (C,To).

    Padding is the caller's job (compose with pad2d/pad_edge1d).
    """
    C, T = x.data.shape
    Cw, k = w.data.shape
    if Cw != C:
        raise ValueError(f"depthwise conv channel mismatch: {C} vs {Cw}")
    To = (T - dilation * (k - 1) - 1) // stride + 1
    if To <= 0:
        raise ValueError(f"kernel {k} (dilation {dilation}) does not fit input length {T}")
    tidx = np.arange(k)[:, None] * dilation + np.arange(To)[None, :] * stride  # (k, To)
    xg = x.data[:, tidx]  # (C, k, To)
    out = np.einsum("ckt,ck->ct", xg, w.data)

    def bw(g):
        gw = np.einsum("ckt,ct->ck", xg, g) if _needs_grad(w) else None
        gx = None
        if _needs_grad(x):
            gxc = w.data[:, :, None] * g[:, None, :]  # (C, k, To)
            choff = (np.arange(C) * T)[:, None, None]
            idx = (choff + tidx[None]).ravel()
            gx = np.bincount(idx, weights=gxc.ravel(), minlength=C * T).astype(
                x.data.dtype
            ).reshape(C, T)
        return ((x, gx), (w, gw))

    return _make(out, (x, w), bw)


# ---------------------------------------------------------------------------
# framing / overlap-add (the STFT path of the differentiable chain)
# ---------------------------------------------------------------------------


def unfold_frames(x: Tensor, frame_len: int, hop: int) -> Tensor:
    """Slice a 1-D signal into (T, frame_len) frames starting at i*hop."""
    S = x.data.shape[0]
    if S < frame_len:
        raise ValueError(f"signal of {S} samples is shorter than one frame ({frame_len})")
    T = (S - frame_len) // hop + 1
    idx = np.arange(T)[:, None] * hop + np.arange(frame_len)[None, :]
    out = x.data[idx]

    def bw(g):
        gx = np.bincount(idx.ravel(), weights=g.ravel(), minlength=S).astype(x.data.dtype)
        return ((x, gx),)

    return _make(out, (x,), bw)


def overlap_add(frames: Tensor, hop: int, length: int) -> Tensor:
    """Sum (T, L) frames into a signal of `length` samples at offsets i*hop."""
    T, L = frames.data.shape
    if (T - 1) * hop + L > length:
        raise ValueError(f"{T} frames of {L} at hop {hop} overrun output length {length}")
    idx = np.arange(T)[:, None] * hop + np.arange(L)[None, :]
    out = np.bincount(idx.ravel(), weights=frames.data.ravel(), minlength=length).astype(
        frames.data.dtype
    )

    def bw(g):
        return ((frames, g[idx]),)

    return _make(out, (frames,), bw)


# ---------------------------------------------------------------------------
# classification loss
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-frame cross-entropy of (K, T) logits against T int labels."""
    K, T = logits.data.shape
    labels = np.asarray(labels)
    if labels.shape != (T,):
        raise ValueError(f"labels shape {labels.shape} does not match {T} frames")
    z = logits.data - logits.data.max(axis=0, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=0, keepdims=True)
    logp = z - np.log(denom)
    out = np.asarray(-logp[labels, np.arange(T)].mean(), dtype=logits.data.dtype)

    def bw(g):
        soft = ez / denom
        soft[labels, np.arange(T)] -= 1.0
        return ((logits, (float(g) / T) * soft.astype(logits.data.dtype)),)

    return _make(out, (logits,), bw)
