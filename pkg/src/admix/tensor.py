"""Dense float32 tensors with a tape-based reverse-mode differentiator.

Values are immutable numpy arrays of dtype float32. Operations that reduce
(matrix products, convolutions, pooling, sums) accumulate in float64 and
round the result back to float32. Gradients are carried in float64 during
the reverse sweep and rounded once when handed back to the caller.

Every differentiable operation accepts an optional leading batch axis so
that a model can evaluate many transformed copies of an image in one pass;
the single-image forms described by the signatures are the primary surface.

Typical use::

    tape = Tape()
    x = tape.watch(image)
    loss = softmax_cross_entropy(model.logits(x), label)
    grad = input_gradient(tape, loss, x)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GraphError, LabelError, NonFiniteError, ShapeError, ZeroGradientError

F32 = np.float32
F64 = np.float64


class Tensor:
    """Immutable n-dimensional float32 array, optionally tracked on a tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data):
        arr = np.array(data, dtype=F32)
        _check_finite(arr)
        arr.flags.writeable = False
        self.data = arr
        self.tape = None
        self.node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, tape: "Tape | None" = None, node: int | None = None) -> "Tensor":
        arr = np.asarray(arr, dtype=F32)
        if not arr.flags.c_contiguous:
            arr = arr.copy()
        _check_finite(arr)
        arr.flags.writeable = False
        t = cls.__new__(cls)
        t.data = arr
        t.tape = tape
        t.node = node
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """Return a writable float32 copy of the data."""
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", "tensor is not a scalar", shape=self.shape)
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        tracked = f", node={self.node}" if self.tape is not None else ""
        return f"Tensor(shape={list(self.shape)}{tracked})"


def _check_finite(arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"tensor of shape {list(arr.shape)} contains NaN or Inf")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor._wrap(np.zeros(tuple(shape), dtype=F32))


# ---------------------------------------------------------------------------
# tape


@dataclass(frozen=True)
class Node:
    """One recorded operation. ``inputs`` holds earlier node ids (None for
    untracked constants); ``backward`` maps the output gradient to one
    gradient per input."""

    op: str
    inputs: tuple
    backward: Callable | None


class Tape:
    """Records operations on watched tensors in topological order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def watch(self, t: Tensor) -> Tensor:
        """Return a tracked copy of ``t`` that serves as a differentiation source."""
        t = as_tensor(t)
        self.nodes.append(Node("leaf", (), None))
        return Tensor._wrap(t.data, self, len(self.nodes) - 1)

    def _record(self, op: str, inputs: tuple, backward: Callable) -> int:
        self.nodes.append(Node(op, inputs, backward))
        return len(self.nodes) - 1

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[Tensor]:
        """Gradients of the scalar ``loss`` with respect to each of ``sources``."""
        if loss.tape is not self:
            raise GraphError("loss was not recorded on this tape")
        if loss.data.size != 1 or loss.ndim != 0:
            raise GraphError(f"loss must be a scalar, got shape {list(loss.shape)}")
        for s in sources:
            if s.tape is not self:
                raise GraphError("source tensor is not watched by this tape")

        grads: list = [None] * (loss.node + 1)
        grads[loss.node] = np.ones((), dtype=F64)
        for nid in range(loss.node, -1, -1):
            g = grads[nid]
            node = self.nodes[nid]
            if g is None or node.backward is None:
                continue
            for inp, ig in zip(node.inputs, node.backward(g)):
                if inp is None or ig is None:
                    continue
                grads[inp] = ig if grads[inp] is None else grads[inp] + ig

        out = []
        for s in sources:
            g = grads[s.node] if s.node < len(grads) else None
            out.append(Tensor._wrap(np.zeros(s.shape, F32) if g is None else g))
        return out


def input_gradient(tape: Tape, loss: Tensor, x: Tensor) -> Tensor:
    """Exact reverse-mode gradient dLoss/dx."""
    return tape.gradient(loss, [x])[0]


def _tape_of(inputs: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise GraphError("operands belong to different tapes")
    return tape


def _emit(op: str, out: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor._wrap(out)
    ids = tuple(t.node if t.tape is tape else None for t in inputs)
    return Tensor._wrap(out, tape, tape._record(op, ids, backward))


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("add", "operand shapes differ", a=list(a.shape), b=list(b.shape))
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply every element by the constant ``c`` (rounded to float32)."""
    c32 = F32(c)
    c64 = F64(c32)
    return _emit("scale", a.data * c32, (a,), lambda g: (g * c64,))


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise select: ``a`` where mask is true, else ``b``."""
    mask = np.asarray(mask, dtype=bool)
    if a.shape != b.shape or mask.shape != a.shape:
        raise ShapeError("where", "operand shapes differ",
                         mask=list(mask.shape), a=list(a.shape), b=list(b.shape))
    return _emit("where", np.where(mask, a.data, b.data), (a, b),
                 lambda g: (np.where(mask, g, 0.0), np.where(mask, 0.0, g)))


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    if not tensors:
        raise ShapeError("stack", "nothing to stack")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ShapeError("stack", "operand shapes differ", first=list(shape), other=list(t.shape))
    out = np.stack([t.data for t in tensors])
    return _emit("stack", out, tuple(tensors), lambda g: tuple(g[i] for i in range(len(tensors))))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", "element count changes", src=list(src), dst=list(shape)) from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(src),))


def flatten(a: Tensor, batched: bool = False) -> Tensor:
    return reshape(a, (a.shape[0], -1) if batched else (-1,))


def total(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    shape = a.shape
    out = np.asarray(a.data.sum(dtype=F64), dtype=F32)
    return _emit("sum", out, (a,), lambda g: (np.broadcast_to(g, shape),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, F32(0)), (a,), lambda g: (np.where(mask, g, 0.0),))


# ---------------------------------------------------------------------------
# layers


def _as_batch(x: Tensor, rank: int, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == rank:
        return x.data[None], False
    if x.ndim == rank + 1:
        return x.data, True
    raise ShapeError(op, f"expected rank {rank} (or {rank + 1} with a batch axis)",
                     rank=x.ndim, shape=list(x.shape))


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0,
           bias: Tensor | None = None) -> Tensor:
    """Cross-correlation of a [C_in,H,W] image with [C_out,C_in,kH,kW] kernels.

    Zero padding of ``padding`` pixels on every side; the output is
    [C_out,H',W'] with H' = floor((H + 2*padding - kH) / stride) + 1.
    """
    xb, batched = _as_batch(x, 3, "conv2d")
    n, c, h, w = xb.shape
    if kernels.ndim != 4:
        raise ShapeError("conv2d", "kernels must be [C_out,C_in,kH,kW]", kernel_rank=kernels.ndim)
    co, ci, kh, kw = kernels.shape
    if ci != c:
        raise ShapeError("conv2d", "input channels do not match kernel channels",
                         input_channels=c, kernel_channels=ci)
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d", "stride must be >= 1 and padding >= 0", stride=stride, padding=padding)
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError("conv2d", "kernel larger than padded input",
                         kernel_h=kh, kernel_w=kw, padded_h=hp, padded_w=wp)
    if bias is not None and bias.shape != (co,):
        raise ShapeError("conv2d", "bias must be [C_out]", bias=list(bias.shape), out_channels=co)
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    xp = np.pad(xb.astype(F64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    wmat = kernels.data.reshape(co, -1).astype(F64)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data.astype(F64)
    out = out.reshape(n, oh, ow, co).transpose(0, 3, 1, 2)
    if not batched:
        out = out[0]

    def backward(g):
        gb = g if batched else g[None]
        gm = gb.transpose(0, 2, 3, 1).reshape(-1, co)
        dx = None
        if x.tape is not None:
            dcols = np.ascontiguousarray((gm @ wmat).reshape(n, oh, ow, c, kh, kw).transpose(4, 5, 0, 3, 1, 2))
            dxp = np.zeros((n, c, hp, wp), dtype=F64)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[i, j]
            dx = dxp[:, :, padding:padding + h, padding:padding + w]
            if not batched:
                dx = dx[0]
        dk = (gm.T @ cols).reshape(co, ci, kh, kw) if kernels.tape is not None else None
        grads = (dx, dk)
        if bias is not None:
            grads += (gm.sum(axis=0) if bias.tape is not None else None,)
        return grads

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return _emit("conv2d", out, inputs, backward)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``weight @ x + bias`` for x of shape [N] (or [B,N])."""
    xb, batched = _as_batch(x, 1, "dense")
    if weight.ndim != 2:
        raise ShapeError("dense", "weight must be [M,N]", weight_rank=weight.ndim)
    m, k = weight.shape
    if xb.shape[1] != k:
        raise ShapeError("dense", "input length does not match weight columns",
                         input_len=xb.shape[1], weight_cols=k)
    if bias.shape != (m,):
        raise ShapeError("dense", "bias length does not match weight rows",
                         bias_len=bias.shape[0] if bias.ndim else 0, weight_rows=m)
    x64 = xb.astype(F64)
    w64 = weight.data.astype(F64)
    out = x64 @ w64.T + bias.data.astype(F64)
    if not batched:
        out = out[0]

    def backward(g):
        gb = g if batched else g[None]
        dx = gb @ w64
        dw = gb.T @ x64 if weight.tape is not None else None
        db = gb.sum(axis=0) if bias.tape is not None else None
        return (dx if batched else dx[0], dw, db)

    return _emit("dense", out, (x, weight, bias), backward)


def avgpool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k mean pooling of a [C,H,W] tensor."""
    xb, batched = _as_batch(x, 3, "avgpool2d")
    n, c, h, w = xb.shape
    if k < 1 or h % k or w % k:
        raise ShapeError("avgpool2d", "window must divide the spatial size", k=k, height=h, width=w)
    out = xb.astype(F64).reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
    if not batched:
        out = out[0]
    inv = 1.0 / (k * k)

    def backward(g):
        gb = g if batched else g[None]
        dx = np.repeat(np.repeat(gb * inv, k, axis=2), k, axis=3)
        return (dx if batched else dx[0],)

    return _emit("avgpool2d", out, (x,), backward)


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Cross-entropy of softmax(logits) against ``target``.

    ``target`` is an int label, or a length-C vector of class weights (soft
    label). With batched logits [B,C] it is a length-B sequence of labels or
    a [B,C] weight matrix, and the result is the mean loss over the batch.
    """
    if logits.ndim not in (1, 2):
        raise ShapeError("softmax_cross_entropy", "logits must be [C] or [B,C]", shape=list(logits.shape))
    batched = logits.ndim == 2
    z = logits.data.astype(F64)
    if not batched:
        z = z[None]
    b, c = z.shape
    q = _targets(target, b, c, batched)

    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    e = np.exp(shifted)
    s = e.sum(axis=1, keepdims=True)
    logp = shifted - np.log(s)
    loss = -(q * logp).sum() / b
    p = e / s

    def backward(g):
        d = (p * q.sum(axis=1, keepdims=True) - q) * (g / b)
        return (d if batched else d[0],)

    return _emit("softmax_cross_entropy", np.asarray(loss), (logits,), backward)


def _targets(target, b: int, c: int, batched: bool) -> np.ndarray:
    arr = np.asarray(target)
    if arr.dtype.kind in "iu" or isinstance(target, (int, np.integer)):
        labels = arr.reshape(-1).astype(np.int64)
        if labels.shape[0] != b:
            raise ShapeError("softmax_cross_entropy", "one label per row required", labels=labels.shape[0], rows=b)
        bad = (labels < 0) | (labels >= c)
        if bad.any():
            raise LabelError(f"label {int(labels[bad][0])} out of range for {c} classes")
        q = np.zeros((b, c), dtype=F64)
        q[np.arange(b), labels] = 1.0
        return q
    q = arr.astype(F64).reshape(b, c) if arr.size == b * c else None
    if q is None or (not batched and arr.ndim != 1):
        raise ShapeError("softmax_cross_entropy", "soft target must match logits", target=list(arr.shape), classes=c)
    return q


def resize_nearest(x: Tensor, h2: int, w2: int) -> Tensor:
    """Nearest-neighbour resize of [C,H,W] to [C,h2,w2]; row i reads floor(i*H/h2)."""
    if x.ndim not in (3, 4):
        raise ShapeError("resize_nearest", "expected [C,H,W] or [N,C,H,W]", shape=list(x.shape))
    if h2 < 1 or w2 < 1:
        raise ShapeError("resize_nearest", "target size must be positive", height=h2, width=w2)
    h, w = x.shape[-2:]
    rows = (np.arange(h2) * h) // h2
    cols = (np.arange(w2) * w) // w2
    out = x.data[..., rows[:, None], cols[None, :]]
    rmat = np.zeros((h2, h), dtype=F64)
    rmat[np.arange(h2), rows] = 1.0
    cmat = np.zeros((w2, w), dtype=F64)
    cmat[np.arange(w2), cols] = 1.0
    return _emit("resize_nearest", out, (x,), lambda g: (rmat.T @ g @ cmat,))


def pad_constant(x: Tensor, top: int, bottom: int, left: int, right: int, value: float = 0.0) -> Tensor:
    """Pad the last two axes with a constant border."""
    if min(top, bottom, left, right) < 0:
        raise ShapeError("pad_constant", "pad amounts must be non-negative",
                         top=top, bottom=bottom, left=left, right=right)
    if x.ndim < 2:
        raise ShapeError("pad_constant", "need at least two axes", rank=x.ndim)
    h, w = x.shape[-2:]
    widths = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    out = np.pad(x.data, widths, constant_values=F32(value))
    return _emit("pad_constant", out, (x,), lambda g: (g[..., top:top + h, left:left + w],))


def cross_correlate_2d(g: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel same-size cross-correlation with zero padding.

    ``kernel`` is [kH,kW] with both sides odd; every channel of the [C,H,W]
    input is filtered independently.
    """
    if kernel.ndim != 2:
        raise ShapeError("cross_correlate_2d", "kernel must be [kH,kW]", kernel_rank=kernel.ndim)
    kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("cross_correlate_2d", "kernel sides must be odd", kernel_h=kh, kernel_w=kw)
    if g.ndim not in (3, 4):
        raise ShapeError("cross_correlate_2d", "expected [C,H,W] or [N,C,H,W]", shape=list(g.shape))
    k64 = kernel.data.astype(F64)
    out = _correlate_same(g.data.astype(F64), k64)
    flipped = k64[::-1, ::-1]
    return _emit("cross_correlate_2d", out, (g,), lambda d: (_correlate_same(d, flipped),))


def _correlate_same(a: np.ndarray, k: np.ndarray) -> np.ndarray:
    kh, kw = k.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    widths = [(0, 0)] * (a.ndim - 2) + [(ph, ph), (pw, pw)]
    win = sliding_window_view(np.pad(a, widths), (kh, kw), axis=(-2, -1))
    return np.tensordot(win, k, axes=([-2, -1], [0, 1]))


# ---------------------------------------------------------------------------
# untracked helpers used by the attack loops


def l1_normalize(g: Tensor) -> Tensor:
    """``g / sum(|g|)``; raises ZeroGradientError for the zero tensor."""
    g64 = g.data.astype(F64)
    norm = np.abs(g64).sum()
    if norm == 0.0:
        raise ZeroGradientError()
    return Tensor._wrap(g64 / norm)


def sign(g: Tensor) -> Tensor:
    """Elementwise sign with sign(0) = 0."""
    return Tensor._wrap(np.sign(g.data))


def clip(x: Tensor, lo, hi) -> Tensor:
    """Elementwise clamp into [lo, hi]; bounds may be scalars or tensors."""
    lo = lo.data if isinstance(lo, Tensor) else F32(lo)
    hi = hi.data if isinstance(hi, Tensor) else F32(hi)
    if np.any(np.asarray(lo) > np.asarray(hi)):
        raise ValueError("clip: lower bound exceeds upper bound")
    return Tensor._wrap(np.minimum(np.maximum(x.data, lo), hi))
