"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

The engine is deliberately small: enough primitives for fully-connected and
convolutional autoencoders plus the interval arithmetic built on top of them.
Elementwise operations require identical shapes; the only implicit expansion
is bias addition inside ``affine`` / ``conv2d``. Explicit ``reshape`` is the
way to change shape. All buffers are float64.

One ``Tape`` records one forward pass; ``Tape.backward`` replays it in
reverse from a scalar root. A tensor created outside a tape is a constant.
Tapes are single-threaded; independent tapes may live on different threads.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Iterable

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names the offending axes."""


class ConfigError(ValueError):
    """Structurally invalid operation configuration (e.g. empty conv output)."""


class TapeError(RuntimeError):
    """Misuse of the tape: mixed tapes, non-scalar backward root, etc."""


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """A float64 array, optionally tracked on a tape.

    ``tape``/``node`` identify the tensor's position in the recorded graph;
    both are None for constants. ``grad`` is populated on tracked leaves by
    ``Tape.backward``.
    """

    __slots__ = ("data", "tape", "node", "grad")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        self.data = _as_f64(data)
        self.tape = tape
        self.node = node
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def detach(self) -> "Tensor":
        """Constant view sharing this tensor's buffer."""
        return Tensor(self.data)

    def __float__(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"cannot convert tensor of shape {self.shape} to float")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, tracked={self.tracked})"

    # -- operator sugar (tensor <op> tensor requires identical shapes) --

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis: int | None = None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return tmean(self, axis)


class Gradients:
    """Read-only view of the gradients produced by one backward pass."""

    def __init__(self, tape: "Tape", grads: dict[int, np.ndarray]):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.tape is not self._tape or t.node is None:
            raise TapeError("tensor was not recorded on the tape that ran backward")
        g = self._grads.get(t.node)
        if g is None:
            return np.zeros_like(t.data)
        return g


class Tape:
    """Ordered record of operations for one reverse-mode pass."""

    def __init__(self):
        self._records: list[tuple[int, tuple[int, ...], Callable]] = []
        self._leaves: dict[int, Tensor] = {}
        self._next_node = 0

    def _new_node(self) -> int:
        node = self._next_node
        self._next_node += 1
        return node

    def leaf(self, value) -> Tensor:
        """Register a tracked leaf (a parameter or attacked input).

        Returns a tracked view sharing the underlying buffer; the original
        tensor/array is left untracked.
        """
        data = value.data if isinstance(value, Tensor) else _as_f64(value)
        t = Tensor(data, tape=self, node=self._new_node())
        self._leaves[t.node] = t
        return t

    def record(self, out_data: np.ndarray, parents: tuple[Tensor, ...],
               backward: Callable[[np.ndarray], tuple]) -> Tensor:
        parent_ids = tuple(p.node if p.tape is self else None for p in parents)
        node = self._new_node()
        self._records.append((node, parent_ids, backward))
        return Tensor(out_data, tape=self, node=node)

    def backward(self, root: Tensor) -> Gradients:
        """Accumulate d(root)/d(node) for every recorded node; root must be scalar."""
        if root.tape is not self:
            raise TapeError("backward root does not belong to this tape")
        if root.data.size != 1:
            raise TapeError(f"backward root must be scalar, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {root.node: np.ones_like(root.data)}
        for node, parent_ids, backward_fn in reversed(self._records):
            g = grads.get(node)
            if g is None:
                continue
            parent_grads = backward_fn(g)
            for pid, pg in zip(parent_ids, parent_grads):
                if pid is None or pg is None:
                    continue
                acc = grads.get(pid)
                grads[pid] = pg if acc is None else acc + pg
        for nid, leaf in self._leaves.items():
            leaf.grad = grads.get(nid, np.zeros_like(leaf.data))
        return Gradients(self, grads)


def _tape_of(*tensors: Tensor | None) -> Tape | None:
    tape = None
    for t in tensors:
        if t is None or t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise TapeError("operands were recorded on different tapes")
    return tape


def _emit(out: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out)
    return tape.record(out, inputs, backward)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(x: Tensor) -> Tensor:
    return _emit(-x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    return _emit(x.data * c, (x,), lambda g: (g * c,))


def shift(x: Tensor, c: float) -> Tensor:
    return _emit(x.data + c, (x,), lambda g: (g,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _emit(xd * xd, (x,), lambda g: (g * (2.0 * xd),))


def absolute(x: Tensor) -> Tensor:
    xd = x.data
    return _emit(np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; subgradient routes to ``a`` on ties."""
    _same_shape(a, b, "maximum")
    mask = a.data >= b.data
    out = np.where(mask, a.data, b.data)
    return _emit(out, (a, b), lambda g: (g * mask, g * ~mask))


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old_shape = x.data.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old_shape} as {shape}") from exc
    return _emit(out, (x,), lambda g: (g.reshape(old_shape),))


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice along the final axis (used to split encoder heads)."""
    n = x.shape[-1]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice_last: [{start}:{stop}] out of range for axis of size {n}")
    out = x.data[..., start:stop]

    def backward(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    return _emit(np.ascontiguousarray(out), (x,), backward)


# ---------------------------------------------------------------------------
# reductions


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.data.shape
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit(np.asarray(out), (x,), backward)


def tmean(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.data.shape
    n = x.data.size if axis is None else shape[axis]
    out = x.data.mean(axis=axis)

    def backward(g):
        if axis is None:
            return (np.full(shape, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / n,)

    return _emit(np.asarray(out), (x,), backward)


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # derivative at exactly 0 is 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    xd = x.data
    d = np.where(xd >= 0, 1.0, slope)  # positive-side slope at x == 0
    return _emit(np.where(xd >= 0, xd, slope * xd), (x,), lambda g: (g * d,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # two-branch form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _emit(t, (x,), lambda g: (g * (1.0 - t * t),))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _emit(e, (x,), lambda g: (g * e,))


_ACTIVATIONS: dict[str, Callable] = {
    "relu": lambda x, slope: relu(x),
    "leaky-relu": lambda x, slope: leaky_relu(x, slope),
    "sigmoid": lambda x, slope: sigmoid(x),
    "tanh": lambda x, slope: tanh(x),
    "exp": lambda x, slope: exp(x),
}


def activation(x: Tensor, kind: str, slope: float = 0.01) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unsupported activation {kind!r}; "
                         f"expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x, slope)


ACTIVATION_KINDS = tuple(sorted(_ACTIVATIONS))


# ---------------------------------------------------------------------------
# layer primitives


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """out[b, i] = sum_j weight[i, j] * x[b, j] + bias[i].

    Accepts a single example (1-d input) or a batch (2-d input).
    """
    single = x.data.ndim == 1
    xd = x.data[None, :] if single else x.data
    if xd.ndim != 2:
        raise ShapeError(f"affine: input must be 1-d or 2-d, got shape {x.shape}")
    if weight.data.ndim != 2:
        raise ShapeError(f"affine: weight must be 2-d, got shape {weight.shape}")
    m, n = weight.shape
    if xd.shape[1] != n:
        raise ShapeError(f"affine: input feature axis has size {xd.shape[1]} "
                         f"but weight expects {n}")
    if bias is not None and bias.shape != (m,):
        raise ShapeError(f"affine: bias shape {bias.shape} does not match output width {m}")

    out = xd @ weight.data.T
    if bias is not None:
        out = out + bias.data
    if single:
        out = out[0]

    wd = weight.data

    def backward(g):
        g2 = g[None, :] if single else g
        dx = g2 @ wd
        dw = g2.T @ xd
        if single:
            dx = dx[0]
        return (dx, dw, g2.sum(axis=0))

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _emit(out, inputs, backward)


def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, padding: int):
    """[B,C,H,W] -> ([B, C*k*k, Ho*Wo], (Ho, Wo)). Zero padding."""
    b, c, h, w = x.shape
    ho = _conv_out_size(h, k, stride, padding)
    wo = _conv_out_size(w, k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((b, c, k, k, ho, wo), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(b, c * k * k, ho * wo), (ho, wo)


def _col2im(cols: np.ndarray, img_shape: tuple, k: int, stride: int, padding: int,
            ho: int, wo: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add columns back into [B,C,H,W]."""
    b, c, h, w = img_shape
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    cols = cols.reshape(b, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return out


def _normalize_image(x: Tensor, op: str):
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise ShapeError(f"{op}: input must be [batch, channels, h, w] "
                         f"(or unbatched 3-d), got shape {x.shape}")
    return xd, single


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Standard cross-correlation with square kernel, zero padding."""
    xd, single = _normalize_image(x, "conv2d")
    if kernel.data.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"conv2d: kernel must be [out_ch, in_ch, k, k], got {kernel.shape}")
    oc, ic, k, _ = kernel.shape
    b, c, h, w = xd.shape
    if c != ic:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {ic}")
    if bias is not None and bias.shape != (oc,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {oc} output channels")
    ho = _conv_out_size(h, k, stride, padding)
    wo = _conv_out_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv2d: output spatial dims {ho}x{wo} are not positive "
                          f"for input {h}x{w}, kernel {k}, stride {stride}, padding {padding}")

    cols, _ = _im2col(xd, k, stride, padding)
    kmat = kernel.data.reshape(oc, ic * k * k)
    out = np.einsum("ok,bkl->bol", kmat, cols).reshape(b, oc, ho, wo)
    if bias is not None:
        out = out + bias.data[:, None, None]
    if single:
        out = out[0]

    def backward(g):
        g4 = g[None] if single else g
        gmat = g4.reshape(b, oc, ho * wo)
        dk = np.einsum("bol,bkl->ok", gmat, cols).reshape(kernel.shape)
        dcols = np.einsum("ok,bol->bkl", kmat, gmat)
        dx = _col2im(dcols, (b, c, h, w), k, stride, padding, ho, wo)
        if single:
            dx = dx[0]
        if bias is not None:
            return (dx, dk, g4.sum(axis=(0, 2, 3)))
        return (dx, dk)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return _emit(out, inputs, backward)


def conv2d_transpose(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution (adjoint of conv2d over the input).

    Kernel layout is [in_ch, out_ch, k, k]; output spatial size is
    (h - 1) * stride - 2 * padding + k.
    """
    xd, single = _normalize_image(x, "conv2d_transpose")
    if kernel.data.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"conv2d_transpose: kernel must be [in_ch, out_ch, k, k], "
                         f"got {kernel.shape}")
    ic, oc, k, _ = kernel.shape
    b, c, h, w = xd.shape
    if c != ic:
        raise ShapeError(f"conv2d_transpose: input has {c} channels but kernel expects {ic}")
    if bias is not None and bias.shape != (oc,):
        raise ShapeError(f"conv2d_transpose: bias shape {bias.shape} does not match "
                         f"{oc} output channels")
    ho = (h - 1) * stride - 2 * padding + k
    wo = (w - 1) * stride - 2 * padding + k
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv2d_transpose: output spatial dims {ho}x{wo} are not positive")

    kmat = kernel.data.reshape(ic, oc * k * k)
    xmat = xd.reshape(b, ic, h * w)
    cols = np.einsum("ik,bil->bkl", kmat, xmat)
    out = _col2im(cols, (b, oc, ho, wo), k, stride, padding, h, w)
    if bias is not None:
        out = out + bias.data[:, None, None]
    if single:
        out = out[0]

    def backward(g):
        g4 = g[None] if single else g
        gcols, _ = _im2col(g4, k, stride, padding)  # [b, oc*k*k, h*w]
        dx = np.einsum("ik,bkl->bil", kmat, gcols).reshape(b, ic, h, w)
        dk = np.einsum("bil,bkl->ik", xmat, gcols).reshape(kernel.shape)
        if single:
            dx = dx[0]
        if bias is not None:
            return (dx, dk, g4.sum(axis=(0, 2, 3)))
        return (dx, dk)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return _emit(out, inputs, backward)


# ---------------------------------------------------------------------------
# parameter sets


class ParameterSet:
    """Named parameter tensors for an encoder/decoder pair.

    Names carry an ``enc.`` or ``dec.`` prefix; insertion order is the
    canonical manifest order for checkpoints and optimizer state.
    """

    def __init__(self, tensors: dict[str, Tensor], arch=None):
        for name in tensors:
            if not (name.startswith("enc.") or name.startswith("dec.")):
                raise ValueError(f"parameter name {name!r} must start with 'enc.' or 'dec.'")
        self._tensors = dict(tensors)
        self.arch = arch

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._tensors.items()

    def encoder_items(self) -> Iterable[tuple[str, Tensor]]:
        return ((n, t) for n, t in self._tensors.items() if n.startswith("enc."))

    def decoder_items(self) -> Iterable[tuple[str, Tensor]]:
        return ((n, t) for n, t in self._tensors.items() if n.startswith("dec."))

    def tracked(self, tape: Tape) -> "ParameterSet":
        """Tracked leaf views of every parameter, registered on ``tape``."""
        return ParameterSet({n: tape.leaf(t) for n, t in self._tensors.items()},
                            arch=self.arch)

    def copy(self) -> "ParameterSet":
        return ParameterSet({n: Tensor(t.data.copy()) for n, t in self._tensors.items()},
                            arch=self.arch)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self._tensors.items():
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def num_values(self) -> int:
        return sum(t.data.size for t in self._tensors.values())
