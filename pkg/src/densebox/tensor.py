"""Minimal dense tensor engine with a per-forward tape.

Only the layers the detector needs are provided: convolution (1x1 and 3x3),
2x2 max pooling, ReLU, factor-2 bilinear upsampling, channel concatenation
and a masked squared-error reduction.  Every op records a backward closure on
its output; :meth:`Tensor.backward` walks the recorded graph in reverse
topological order.

Tensors are treated as immutable once produced.  Gradients accumulate in
``Tensor.grad`` (a plain ``numpy.ndarray``) until cleared.
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
CHECKPOINT_MAGIC = b"DBXCKPT1"


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; ops return plain tensors without backward rules."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _result(out, parents, backward) -> "Tensor":
    if not _GRAD_ENABLED or not any(p.requires_grad for p in parents):
        return Tensor(out)
    return Tensor(out, _parents=parents, _backward=backward)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class StateError(RuntimeError):
    """Raised when an operation is called on an object in the wrong state."""


class Tensor:
    """Dense row-major array with an optional gradient and backward rule.

    Parameters
    ----------
    data : array_like
        Values; copied into a contiguous array of ``dtype``.
    requires_grad : bool
        Leaf tensors that should receive gradients (parameters).
    dtype : numpy dtype, optional
        Storage dtype. Defaults to the dtype of ``data`` when it is a
        floating array, else float64.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, _parents=(), _backward=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DTYPE
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad or any(p.requires_grad for p in _parents))
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], None] | None = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, seed: float | np.ndarray = 1.0) -> None:
        """Backpropagate from this tensor.

        ``seed`` is the upstream gradient (a scalar for scalar losses).  Leaf
        gradients accumulate, so several losses can be backpropagated before a
        single optimizer step.  Intermediate gradients are released once used.
        """
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self._accumulate(np.broadcast_to(np.asarray(seed, dtype=self.data.dtype), self.shape))
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            g = node.grad
            node._backward(g)
            if node._parents:
                # interior node: drop its gradient to free memory
                node.grad = None


@dataclass
class Param:
    """Trainable parameter with its SGD momentum buffer."""

    name: str
    value: Tensor
    momentum_buffer: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.value.requires_grad = True
        if self.momentum_buffer is None:
            self.momentum_buffer = np.zeros_like(self.value.data)
        if self.momentum_buffer.shape != self.value.shape:
            raise ShapeError(f"momentum buffer shape mismatch for {self.name}")

    @property
    def grad(self) -> np.ndarray | None:
        return self.value.grad


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op} produced non-finite values")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _shifted_columns(xp: np.ndarray, k: int, out_h: int) -> tuple[np.ndarray, int]:
    """Gather the k*k shifted views of a padded image into one matrix.

    Works on the flattened padded grid so every shift is a contiguous slice;
    output positions in the ``k - 1`` wrap-around columns of each row are
    computed and later discarded.
    """
    c, hp, wp = xp.shape
    flat = xp.reshape(c, hp * wp)
    length = (out_h - 1) * wp + (wp - k + 1)
    cols = np.empty((c, k * k, length), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            start = i * wp + j
            cols[:, i * k + j, :] = flat[:, start:start + length]
    return cols.reshape(c * k * k, length), length


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, pad: int | None = None) -> Tensor:
    """Same-size 2-D cross-correlation of a CxHxW input.

    ``weight`` has shape (C_out, C_in, k, k) with odd ``k``; ``pad`` must be
    ``(k - 1) // 2`` (the default).
    """
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects CxHxW input and 4-d weights, got {x.shape}, {weight.shape}")
    c_out, c_in, kh, kw = weight.shape
    c, h, w = x.shape
    if c != c_in:
        raise ShapeError(f"input has {c} channels but weights expect {c_in}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {kh}x{kw}")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} does not match {c_out} output channels")
    k = kh
    if pad is None:
        pad = (k - 1) // 2
    if pad != (k - 1) // 2:
        raise ShapeError(f"pad must be {(k - 1) // 2} for a {k}x{k} kernel")

    w2 = weight.data.reshape(c_out, c_in * k * k)
    if k == 1:
        cols = x.data.reshape(c, h * w)
        out = (w2 @ cols).reshape(c_out, h, w)
        out += bias.data[:, None, None]

        def backward(g: np.ndarray) -> None:
            g2 = g.reshape(c_out, h * w)
            if weight.requires_grad:
                weight._accumulate((g2 @ cols.T).reshape(weight.shape))
            if bias.requires_grad:
                bias._accumulate(g2.sum(axis=1))
            if x.requires_grad:
                x._accumulate((w2.T @ g2).reshape(x.shape))

        return _result(out, (x, weight, bias), backward)

    wp = w + 2 * pad
    hp = h + 2 * pad
    xp = np.zeros((c, hp, wp), dtype=x.data.dtype)
    xp[:, pad:pad + h, pad:pad + w] = x.data
    cols, length = _shifted_columns(xp, k, h)
    res = w2 @ cols
    full = np.empty((c_out, h * wp), dtype=res.dtype)
    full[:, :length] = res
    full[:, length:] = 0.0
    out = np.ascontiguousarray(full.reshape(c_out, h, wp)[:, :, :w])
    out += bias.data[:, None, None]

    def backward(g: np.ndarray) -> None:
        gext = np.zeros((c_out, h, wp), dtype=g.dtype)
        gext[:, :, :w] = g
        g2 = gext.reshape(c_out, h * wp)[:, :length]
        if weight.requires_grad:
            weight._accumulate((g2 @ cols.T).reshape(weight.shape))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(1, 2)))
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(c, k * k, length)
            dflat = np.zeros((c, hp * wp), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    start = i * wp + j
                    dflat[:, start:start + length] += dcols[:, i * k + j, :]
            x._accumulate(np.ascontiguousarray(dflat.reshape(c, hp, wp)[:, pad:pad + h, pad:pad + w]))

    return _result(out, (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# pooling / activation / resampling / concat
# ---------------------------------------------------------------------------

def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pool with stride 2; ties go to the first element in row-major order."""
    if x.data.ndim != 3:
        raise ShapeError(f"maxpool2 expects CxHxW, got {x.shape}")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    v = x.data.reshape(c, h // 2, 2, w // 2, 2)
    corners = (v[:, :, 0, :, 0], v[:, :, 0, :, 1], v[:, :, 1, :, 0], v[:, :, 1, :, 1])
    out = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))

    def backward(g: np.ndarray) -> None:
        gx = np.zeros((c, h // 2, 2, w // 2, 2), dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for n, (dy, dx) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            hit = corners[n] == out
            if n:
                hit &= ~taken
            if n < 3:
                taken |= hit
            gx[:, :, dy, :, dx] = np.where(hit, g, 0.0)
        x._accumulate(gx.reshape(c, h, w))

    return _result(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward(g: np.ndarray) -> None:
        x._accumulate(np.where(x.data > 0, g, 0.0))

    return _result(out, (x,), backward)


def _upsample_axis(a: np.ndarray, axis: int) -> np.ndarray:
    # half-pixel centres: even outputs read n - 0.25, odd outputs n + 0.25
    a = np.moveaxis(a, axis, -1)
    prev = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    nxt = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    out = np.empty(a.shape[:-1] + (2 * a.shape[-1],), dtype=a.dtype)
    out[..., 0::2] = 0.75 * a + 0.25 * prev
    out[..., 1::2] = 0.75 * a + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _upsample_axis_T(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge = g[..., 0::2]
    go = g[..., 1::2]
    out = 0.75 * (ge + go)
    # prev term: output 2n reads a[n-1] (clamped to a[0] at n = 0)
    out[..., :-1] += 0.25 * ge[..., 1:]
    out[..., 0] += 0.25 * ge[..., 0]
    # next term: output 2n+1 reads a[n+1] (clamped to a[-1] at the end)
    out[..., 1:] += 0.25 * go[..., :-1]
    out[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(out, -1, axis)


def bilinear_upsample2(x: Tensor) -> Tensor:
    """Factor-2 bilinear upsampling with half-pixel alignment and clamped borders."""
    if x.data.ndim != 3:
        raise ShapeError(f"bilinear_upsample2 expects CxHxW, got {x.shape}")
    out = _upsample_axis(_upsample_axis(x.data, 1), 2)

    def backward(g: np.ndarray) -> None:
        x._accumulate(_upsample_axis_T(_upsample_axis_T(g, 2), 1))

    return _result(np.ascontiguousarray(out), (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)

    def backward(g: np.ndarray) -> None:
        a._accumulate(g[:ca])
        b._accumulate(g[ca:])

    return _result(out, (a, b), backward)


# ---------------------------------------------------------------------------
# losses and scalar arithmetic
# ---------------------------------------------------------------------------

def masked_l2(pred: Tensor, target, mask, normalizer: float | None = None) -> Tensor:
    """Sum of ``mask * (pred - target)**2`` divided by a pixel count.

    The divisor defaults to ``max(1, mask.sum())``; pass ``normalizer`` to
    scale by a different count of contributing pixels.
    """
    target = np.asarray(target, dtype=pred.data.dtype)
    mask = np.asarray(mask, dtype=pred.data.dtype)
    if target.shape != pred.shape or mask.shape != pred.shape:
        raise ShapeError(f"masked_l2 shapes differ: {pred.shape}, {target.shape}, {mask.shape}")
    count = max(1.0, float(mask.sum())) if normalizer is None else max(1.0, float(normalizer))
    diff = mask * (pred.data - target)
    value = float(np.sum(diff * (pred.data - target))) / count

    def backward(g: np.ndarray) -> None:
        pred._accumulate(g * (2.0 / count) * diff)

    return _result(np.array(value, dtype=pred.data.dtype), (pred,), backward)


def weighted_sum(terms: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """Linear combination of scalar tensors."""
    if len(terms) != len(weights):
        raise ShapeError("terms and weights differ in length")
    value = sum(float(wt) * t.data for t, wt in zip(terms, weights))

    def backward(g: np.ndarray) -> None:
        for t, wt in zip(terms, weights):
            t._accumulate(g * float(wt))

    return _result(np.asarray(value, dtype=DTYPE), tuple(terms), backward)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

def sgd_step(params: Iterable[Param], lr: float, momentum: float, weight_decay: float) -> None:
    """One momentum SGD update; gradients are cleared afterwards.

    ``buf = momentum * buf + grad + weight_decay * value``; ``value -= lr * buf``.
    """
    params = list(params)
    for p in params:
        if p.value.grad is None:
            raise StateError(f"parameter {p.name!r} has no gradient")
    for p in params:
        buf = p.momentum_buffer
        buf *= momentum
        buf += p.value.grad
        if weight_decay:
            buf += weight_decay * p.value.data
        p.value.data -= lr * buf
        _check_finite(p.value.data, "sgd_step")
        p.value.grad = None


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def write_checkpoint(fh: BinaryIO, named_arrays: Iterable[tuple[str, np.ndarray]]) -> None:
    """Write ``DBXCKPT1`` followed by (name, dims, float64 LE payload) records.

    Integers are little-endian uint32: name byte length, dim count, each dim.
    """
    fh.write(CHECKPOINT_MAGIC)
    for name, arr in named_arrays:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(fh: BinaryIO) -> dict[str, np.ndarray]:
    magic = fh.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint (magic {magic!r})")
    out: dict[str, np.ndarray] = {}
    while True:
        head = fh.read(4)
        if not head:
            return out
        if len(head) < 4:
            raise ValueError("truncated checkpoint")
        (n,) = struct.unpack("<I", head)
        name = fh.read(n).decode("utf-8")
        (ndim,) = struct.unpack("<I", fh.read(4))
        dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
        count = int(np.prod(dims)) if ndim else 1
        payload = fh.read(8 * count)
        if len(payload) != 8 * count:
            raise ValueError(f"truncated payload for {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
