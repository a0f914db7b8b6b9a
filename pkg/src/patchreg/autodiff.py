"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation executed while a :class:`Tape` is active is
appended to that tape together with a closure computing the vector-Jacobian
product. :meth:`Tape.backward` walks the record in exact reverse order, so
gradients are deterministic for fixed inputs.

Broadcasting is deliberately restricted: binary elementwise operations accept
either two tensors of identical shape or a tensor and a scalar.

Arrays use channels-first layout. Spatial operations (``conv3d``,
``upsample_nearest3d``, ``box_sum3d``) act on the last three axes and accept an
optional leading batch axis.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NotScalar, ShapeMismatch

_DEFAULT_DTYPE = [np.dtype(np.float64)]
_TAPES: list["Tape"] = []


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE[-1]


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the element type used for new tensors."""
    _DEFAULT_DTYPE.append(np.dtype(dtype))
    try:
        yield
    finally:
        _DEFAULT_DTYPE.pop()


def set_default_dtype(dtype) -> None:
    _DEFAULT_DTYPE[-1] = np.dtype(dtype)


class Tensor:
    """Array value that may take part in a recorded computation.

    ``grad`` is ``None`` until a backward pass reaches this tensor as a leaf.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_leaf")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = np.dtype(dtype) if dtype is not None else None
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype.kind == "f" else get_default_dtype()
        self.data = np.asarray(arr, dtype=dtype, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._leaf = True

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(negate(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


DiffValue = Tensor


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; operations run inside the ``with`` block are
    recorded, and :meth:`backward` replays them in reverse.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self.records.append((out, inputs, vjp))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced and not (loss._leaf and loss.requires_grad):
            raise ValueError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = vjp(g)
            for inp, ig in zip(inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        # whatever is left belongs to leaves
        for out, inputs, _ in self.records:
            for inp in inputs:
                if inp._leaf and inp.requires_grad and id(inp) in grads:
                    g = grads.pop(id(inp))
                    inp.grad = g if inp.grad is None else inp.grad + g
        if loss._leaf and loss.requires_grad and id(loss) in grads:
            g = grads.pop(id(loss))
            loss.grad = g if loss.grad is None else loss.grad + g


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``grad`` on every ``requires_grad`` leaf reachable from ``loss``."""
    tape = tape or active_tape()
    if tape is None:
        raise RuntimeError("no active tape; run the forward pass inside `with Tape():`")
    tape.backward(loss)


def make_node(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``data`` as the output of an operation and record it if needed.

    ``vjp`` maps the output gradient to a tuple with one entry (array or None)
    per input.
    """
    inputs = tuple(inputs)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    out._leaf = False
    tape = active_tape()
    if needs and tape is not None:
        tape.record(out, inputs, vjp)
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = as_tensor(a, b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, a)
    if a.dtype != b.dtype:
        raise TypeError(f"mixed element types {a.dtype} and {b.dtype}")
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeMismatch(f"shapes {a.shape} and {b.shape} are neither equal nor scalar")
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# -- elementwise ---------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_node(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_node(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_node(
        a.data * b.data,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
    )


def div(a, b, eps: float = 0.0) -> Tensor:
    """``a / (b + eps)``; pass ``eps > 0`` to guard a non-negative denominator."""
    a, b = _pair(a, b)
    den = b.data + eps if eps else b.data
    out = a.data / den

    def vjp(g):
        ga = g / den
        return _reduce_to(ga, a.shape), _reduce_to(-ga * out, b.shape)

    return make_node(out, (a, b), vjp)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return make_node(x.data * c, (x,), lambda g: (g * c,))


def negate(x: Tensor) -> Tensor:
    return make_node(-x.data, (x,), lambda g: (-g,))


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    alpha = x.dtype.type(alpha)
    pos = x.data >= 0
    return make_node(np.where(pos, x.data, alpha * x.data), (x,), lambda g: (np.where(pos, g, alpha * g),))


def clamp_min(x: Tensor, lo: float) -> Tensor:
    keep = x.data > lo
    return make_node(np.maximum(x.data, x.dtype.type(lo)), (x,), lambda g: (np.where(keep, g, 0),))


def square(x: Tensor) -> Tensor:
    return make_node(x.data * x.data, (x,), lambda g: (2 * g * x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_node(out, (x,), lambda g: (g / (2 * out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,))


# -- reductions ------------------------------------------------------------
def _axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(np.asarray(out), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum_(x, axes, keepdims), 1.0 / count)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, x.dtype.type(eps))
    out = x.data / norm

    def vjp(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return make_node(out, (x,), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), vjp)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """Stable log-sum-exp along ``axis`` (the axis is removed)."""
    mx = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - mx)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + mx).squeeze(axis)
    probs = e / s

    def vjp(g):
        return (np.expand_dims(g, axis) * probs,)

    return make_node(out, (x,), vjp)


# -- linear algebra --------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a plain matrix shared by
    the whole batch or has the same batch axes as ``a``.
    """
    if a.dtype != b.dtype:
        raise TypeError(f"mixed element types {a.dtype} and {b.dtype}")
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"cannot multiply {a.shape} by {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeMismatch(f"batch axes differ: {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if b.ndim == 2 and gb.ndim > 2:
                gb = gb.reshape(-1, *b.shape).sum(axis=0)
        return ga, gb

    return make_node(out, (a, b), vjp)


# -- structural -------------------------------------------------------------
def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node(np.asarray(x.data.transpose(axes), order="C"), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, index) -> Tensor:
    out = np.asarray(x.data[index], order="C")
    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def vjp(g):
        full = np.zeros_like(x.data)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return make_node(out, (x,), vjp)


def take(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of ``x`` (first axis) by an integer index array."""
    indices = np.asarray(indices)
    out = x.data[indices]

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, indices, g)
        return (full,)

    return make_node(out, (x,), vjp)


def concat(values: Sequence[Tensor], axis: int = 0) -> Tensor:
    values = list(values)
    dtypes = {v.dtype for v in values}
    if len(dtypes) > 1:
        raise TypeError(f"mixed element types {dtypes}")
    try:
        out = np.concatenate([v.data for v in values], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_node(out, values, vjp)


def stack(values: Sequence[Tensor], axis: int = 0) -> Tensor:
    values = list(values)
    shapes = {v.shape for v in values}
    if len(shapes) != 1:
        raise ShapeMismatch(f"cannot stack shapes {shapes}")
    out = np.stack([v.data for v in values], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(values)))

    return make_node(out, values, vjp)


def roll(x: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    """``np.roll`` with gradient; positive shift moves content to higher indices."""
    shifts = tuple(int(s) for s in shifts)
    axes = tuple(axes)
    back = tuple(-s for s in shifts)
    return make_node(np.roll(x.data, shifts, axes), (x,), lambda g: (np.roll(g, back, axes),))


# -- spatial ----------------------------------------------------------------
def _batched(arr: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if arr.ndim == ndim:
        return arr[None], True
    if arr.ndim == ndim + 1:
        return arr, False
    raise ShapeMismatch(f"expected {ndim}D or batched {ndim + 1}D input, got shape {arr.shape}")


# Stride-1 taps are constant offsets into a flattened padded volume. Work is
# blocked along that axis so the data for all taps of a block stays in cache;
# narrow inputs are unfolded instead (one GEMM over taps x channels).
_BLOCK = 512
_UNFOLD_MAX_CHANNELS = 16
# with this few outputs, multiply all taps at once and shift the products instead
_NARROW_OUT = 4


def _tap_gemm(src: np.ndarray, w: np.ndarray, offsets: Sequence[int], n_out: int) -> np.ndarray:
    """``out[:, :, p] = sum_t w[t] @ src[:, :, p + offsets[t]]`` for ``p < n_out``."""
    B, C, _ = src.shape
    T, O, _ = w.shape
    out = np.empty((B, O, n_out), dtype=src.dtype)
    if O <= _NARROW_OUT < C:
        w2 = w.reshape(T * O, C)
        for b in range(B):
            z = (w2 @ src[b]).reshape(T, O, -1)
            acc = out[b]
            acc[:] = z[0, :, offsets[0] : offsets[0] + n_out]
            for t in range(1, T):
                acc += z[t, :, offsets[t] : offsets[t] + n_out]
        return out
    if C <= _UNFOLD_MAX_CHANNELS:
        w2 = w.transpose(1, 0, 2).reshape(O, T * C)
        col = np.empty((T, C, n_out), dtype=src.dtype)
        for b in range(B):
            for t, o in enumerate(offsets):
                col[t] = src[b, :, o : o + n_out]
            np.matmul(w2, col.reshape(T * C, n_out), out=out[b])
        return out
    tmp = np.empty((O, _BLOCK), dtype=src.dtype)
    for b in range(B):
        for lo in range(0, n_out, _BLOCK):
            hi = min(n_out, lo + _BLOCK)
            acc = out[b, :, lo:hi]
            part = tmp[:, : hi - lo]
            for t, o in enumerate(offsets):
                if t == 0:
                    np.matmul(w[t], src[b, :, lo + o : hi + o], out=acc)
                else:
                    np.matmul(w[t], src[b, :, lo + o : hi + o], out=part)
                    acc += part
    return out


def _tap_corr(g: np.ndarray, src: np.ndarray, offsets: Sequence[int]) -> np.ndarray:
    """``gw[t] = sum_b sum_p g[b, :, p] src[b, :, p + offsets[t]]^T`` over ``p < g.shape[-1]``."""
    B, O, n = g.shape
    C = src.shape[1]
    T = len(offsets)
    gw = np.zeros((T, O, C), dtype=g.dtype)
    if O <= _NARROW_OUT < C:
        # shift the gradient rather than the (wider) input
        L = src.shape[-1]
        gcol = np.zeros((T, O, L), dtype=g.dtype)
        for b in range(B):
            for t, o in enumerate(offsets):
                gcol[t, :, o : o + n] = g[b]
            gw += (gcol.reshape(T * O, L) @ src[b].T).reshape(T, O, C)
        return gw
    if C <= _UNFOLD_MAX_CHANNELS:
        col = np.empty((T, C, n), dtype=g.dtype)
        for b in range(B):
            for t, o in enumerate(offsets):
                col[t] = src[b, :, o : o + n]
            gw += (g[b] @ col.reshape(T * C, n).T).reshape(O, T, C).transpose(1, 0, 2)
        return gw
    tmp = np.empty((O, C), dtype=g.dtype)
    for b in range(B):
        for lo in range(0, n, _BLOCK):
            hi = min(n, lo + _BLOCK)
            gb = g[b, :, lo:hi]
            for t, o in enumerate(offsets):
                np.matmul(gb, src[b, :, lo + o : hi + o].T, out=tmp)
                gw[t] += tmp
    return gw


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Direct 3D cross-correlation.

    ``x`` is ``[Cin, W, H, D]`` or ``[B, Cin, W, H, D]``; ``kernel`` is
    ``[Cout, Cin, k, k, k]``. The sum over kernel taps runs in a fixed order,
    each tap being one matrix product over channels.

    With stride 1 every tap is a constant offset into the flattened padded
    volume, so taps read strided views instead of gathered copies; outputs
    are computed on the padded grid and cropped. The input gradient is the
    same tap sum run backwards over the zero-extended output gradient.
    """
    xd, unbatched = _batched(x.data, 4)
    B, C, W, H, D = xd.shape
    O, Ci, k, k2, k3 = kernel.shape
    if Ci != C:
        raise ShapeMismatch(f"input has {C} channels, kernel expects {Ci}")
    if not (k == k2 == k3):
        raise ShapeMismatch(f"kernel must be cubic, got {kernel.shape[2:]}")
    if x.dtype != kernel.dtype:
        raise TypeError(f"mixed element types {x.dtype} and {kernel.dtype}")
    if bias is not None and bias.shape != (O,):
        raise ShapeMismatch(f"bias shape {bias.shape} != ({O},)")
    s = int(stride)
    Wo, Ho, Do = ((n + 2 * pad - k) // s + 1 for n in (W, H, D))
    if min(Wo, Ho, Do) < 1:
        raise ShapeMismatch(f"input {xd.shape[2:]} too small for kernel {k} with pad {pad}")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else xd
    Wp, Hp, Dp = xp.shape[2:]
    taps = [(a, b, c) for a in range(k) for b in range(k) for c in range(k)]
    wt = np.ascontiguousarray(kernel.data.transpose(2, 3, 4, 0, 1))  # [k,k,k,O,C]
    dtype = xd.dtype

    if s == 1:
        L = Wp * Hp * Dp
        xflat = xp.reshape(B, C, L)
        span = ((Wo - 1) * Hp + (Ho - 1)) * Dp + Do
        offsets = [(a * Hp + b) * Dp + c for a, b, c in taps]
        wtaps = wt.reshape(len(taps), O, C)
        acc = np.zeros((B, O, L), dtype=dtype)
        acc[:, :, :span] = _tap_gemm(xflat, wtaps, offsets, span)
        out = acc.reshape(B, O, Wp, Hp, Dp)[:, :, :Wo, :Ho, :Do]
    else:

        def window(a, b, c):
            sl = xp[:, :, a : a + s * (Wo - 1) + 1 : s, b : b + s * (Ho - 1) + 1 : s, c : c + s * (Do - 1) + 1 : s]
            return np.ascontiguousarray(sl).reshape(B, C, -1)

        out = np.zeros((B, O, Wo * Ho * Do), dtype=dtype)
        for a, b, c in taps:
            out += np.matmul(wt[a, b, c], window(a, b, c))
        out = out.reshape(B, O, Wo, Ho, Do)
    out = np.array(out, order="C")
    if bias is not None:
        out += bias.data[None, :, None, None, None]
    if unbatched:
        out = out[0]

    def vjp(g):
        g = g.reshape(B, O, Wo, Ho, Do)
        gx = gw = gb = None
        want_x = x.requires_grad
        want_w = kernel.requires_grad
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        if want_w and s != 1:
            gw = np.empty_like(wt)
        gxp = np.zeros_like(xp) if want_x and s != 1 else None
        if s == 1:
            gpad = np.zeros((B, O, Wp, Hp, Dp), dtype=dtype)
            gpad[:, :, :Wo, :Ho, :Do] = g
            gpad = gpad.reshape(B, O, -1)[:, :, :span]
            if want_w:
                gw = _tap_corr(gpad, xflat, offsets).reshape(k, k, k, O, C)
            if want_x:
                # gather form: gx[p] = sum_t w_t^T g[p - o_t], g zero-extended on both sides
                omax = max(offsets)
                gext = np.zeros((B, O, omax + L), dtype=dtype)
                gext[:, :, omax : omax + span] = gpad
                back = [omax - o for o in offsets]
                gxp = _tap_gemm(gext, np.ascontiguousarray(wtaps.transpose(0, 2, 1)), back, L).reshape(xp.shape)
        else:
            g2 = g.reshape(B, O, -1)
            for a, b, c in taps:
                if want_w:
                    gw[a, b, c] = np.matmul(g2, window(a, b, c).transpose(0, 2, 1)).sum(axis=0)
                if want_x:
                    contrib = np.matmul(wt[a, b, c].T, g2).reshape(B, C, Wo, Ho, Do)
                    gxp[:, :, a : a + s * (Wo - 1) + 1 : s, b : b + s * (Ho - 1) + 1 : s, c : c + s * (Do - 1) + 1 : s] += contrib
        if want_w:
            gw = np.ascontiguousarray(gw.transpose(3, 4, 0, 1, 2))
        if want_x:
            gx = gxp[:, :, pad : pad + W, pad : pad + H, pad : pad + D] if pad else gxp
            gx = np.ascontiguousarray(gx[0] if unbatched else gx)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return make_node(out, inputs, vjp)


def upsample_nearest3d(x: Tensor) -> Tensor:
    """Double each of the last three axes by voxel replication."""
    out = x.data.repeat(2, axis=-3).repeat(2, axis=-2).repeat(2, axis=-1)
    lead = x.shape[:-3]
    W, H, D = x.shape[-3:]

    def vjp(g):
        return (g.reshape(*lead, W, 2, H, 2, D, 2).sum(axis=(-5, -3, -1)),)

    return make_node(out, (x,), vjp)


def _box_sum(arr: np.ndarray, radius: int) -> np.ndarray:
    out = arr
    for axis in (-3, -2, -1):
        n = out.shape[axis]
        csum = np.cumsum(out, axis=axis)
        zero = np.zeros_like(np.take(csum, [0], axis=axis))
        csum = np.concatenate([zero, csum], axis=axis)
        hi = np.minimum(np.arange(n) + radius + 1, n)
        lo = np.maximum(np.arange(n) - radius, 0)
        out = np.take(csum, hi, axis=axis) - np.take(csum, lo, axis=axis)
    return out


def box_sum3d(x: Tensor, window: int) -> Tensor:
    """Sum over a centred cubic window, clipped at the volume borders.

    The window relation is symmetric, so the operator is its own adjoint.
    """
    if window % 2 != 1:
        raise ValueError(f"window must be odd, got {window}")
    r = window // 2
    return make_node(_box_sum(x.data, r), (x,), lambda g: (_box_sum(g, r),))


def box_count3d(shape: Sequence[int], window: int, dtype=None) -> np.ndarray:
    """Number of voxels inside each clipped window."""
    dtype = dtype or get_default_dtype()
    return _box_sum(np.ones(tuple(shape), dtype=dtype), window // 2)


# -- gradient checking -------------------------------------------------------
def numeric_grad(f: Callable[..., Tensor], points: Sequence[np.ndarray], which: int, index, eps: float) -> float:
    """Central difference of ``f`` along one component of one argument."""
    plus = [p.copy() for p in points]
    minus = [p.copy() for p in points]
    plus[which][index] += eps
    minus[which][index] -= eps
    fp = f(*[Tensor(p) for p in plus]).data.item()
    fm = f(*[Tensor(p) for p in minus]).data.item()
    return (fp - fm) / (2 * eps)


def grad_check(
    f: Callable[..., Tensor],
    point,
    eps: float = 1e-5,
    components: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative disagreement between tape gradients and central differences.

    ``point`` is one array or a sequence of arrays, one per argument of ``f``.
    The error per component is ``|analytic - numeric| / max(1e-8, |analytic| +
    |numeric|)``. With ``components`` set, only that many randomly chosen
    entries per argument are probed.
    """
    single = isinstance(point, np.ndarray)
    points = [np.array(point, dtype=np.float64)] if single else [np.array(p, dtype=np.float64) for p in point]
    args = [Tensor(p, requires_grad=True) for p in points]
    with Tape() as tape:
        loss = f(*args)
    tape.backward(loss)
    worst = 0.0
    for which, arg in enumerate(args):
        analytic = arg.grad if arg.grad is not None else np.zeros_like(arg.data)
        flat = range(arg.size)
        if components is not None and components < arg.size:
            rng = rng or np.random.default_rng(0)
            flat = rng.choice(arg.size, size=components, replace=False)
        for lin in flat:
            idx = np.unravel_index(int(lin), arg.shape)
            num = numeric_grad(f, points, which, idx, eps)
            ana = float(analytic[idx])
            err = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
            worst = max(worst, err)
    return worst


def parameters_grad_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    per_param: int = 3,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Finite-difference check of ``loss_fn`` against every tensor in ``params``.

    Parameters are perturbed in place and restored; ``per_param`` random
    entries of each tensor are probed. Returns the worst relative error per
    parameter name.
    """
    rng = rng or np.random.default_rng(0)
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    report = {}
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        picks = rng.choice(p.size, size=min(per_param, p.size), replace=False)
        worst = 0.0
        for lin in picks:
            idx = np.unravel_index(int(lin), p.shape)
            orig = p.data[idx]
            p.data[idx] = orig + eps
            fp = loss_fn().data.item()
            p.data[idx] = orig - eps
            fm = loss_fn().data.item()
            p.data[idx] = orig
            num = (fp - fm) / (2 * eps)
            ana = float(analytic[idx])
            worst = max(worst, abs(ana - num) / max(1e-8, abs(ana) + abs(num)))
        report[p.name or f"param{len(report)}"] = worst
    return report
