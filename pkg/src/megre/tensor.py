"""Dense float32 tensors with reverse-mode automatic differentiation.

Each operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  ``backward`` walks
the recorded graph in reverse topological order, visiting every node once.

Complex values live in :mod:`megre.cplx` as real tensors with a leading axis of
extent 2 (real, imaginary); the FFT primitives here operate on that layout.
"""

from __future__ import annotations

import contextlib
import threading
from collections.abc import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def record_kinks():
    """Collect the branch pattern of every piecewise op evaluated inside the block.

    Yields a list that fills with boolean arrays; finite-difference checks use
    it to detect steps that cross a non-differentiable point.
    """
    prev = getattr(_state, "kinks", None)
    _state.kinks = []
    try:
        yield _state.kinks
    finally:
        _state.kinks = prev


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the working dtype of every new tensor (process wide).

    Meant for float64 gradient checks; parameters created under float32 are
    promoted as soon as they enter an op.
    """
    global DTYPE
    prev = DTYPE
    DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = prev


def _note_branch(pattern: np.ndarray) -> None:
    kinks = getattr(_state, "kinks", None)
    if kinks is not None:
        kinks.append(pattern)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = ""):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = _backward
        self.op = op

    # -- basic properties -------------------------------------------------
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
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op or 'leaf'})"

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise ValueError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self._accumulate(np.asarray(grad, dtype=DTYPE))
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
            # interior gradients are not needed after propagation
            node.grad = None

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    """Wrap ``data`` as an op output, recording the graph only when needed."""
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=tuple(parents), _backward=backward, op=op)
    return Tensor(data, op=op)


# -- element-wise arithmetic ----------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / b.data)
        if b.requires_grad:
            b._accumulate(-g * out / b.data)

    return _make(out, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent

    def backward(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1))

    return _make(out, (a,), backward, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: a._accumulate(g * out), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: a._accumulate(g / a.data), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: a._accumulate(g * 0.5 / out), "sqrt")


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, (a,), lambda g: a._accumulate(g * out * (1.0 - out)), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x).astype(DTYPE)
    slope = 1.0 / (1.0 + np.exp(-x))
    return _make(out, (a,), lambda g: a._accumulate(g * slope), "softplus")


def leaky_relu(a: Tensor, negative_slope: float = 0.1) -> Tensor:
    positive = a.data > 0
    _note_branch(positive)
    scale = np.where(positive, 1.0, negative_slope).astype(DTYPE)
    return _make(a.data * scale, (a,), lambda g: a._accumulate(g * scale), "leaky_relu")


def maximum(a, b) -> Tensor:
    """Element-wise max; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.where(pick_a, g, 0.0))
        if b.requires_grad:
            b._accumulate(np.where(pick_a, 0.0, g))

    return _make(np.maximum(a.data, b.data), (a, b), backward, "maximum")


# -- reductions and shape ops -----------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(out, (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: a._accumulate(g.transpose(inverse)), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g) if _is_advanced(index) else full.__setitem__(index, g)
        a._accumulate(full)

    return _make(a.data[index], (a,), backward, "getitem")


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


def pad2d(a: Tensor, ph: int, pw: int) -> Tensor:
    """Zero-pad the last two axes symmetrically."""
    widths = [(0, 0)] * (a.ndim - 2) + [(ph, ph), (pw, pw)]
    h, w = a.shape[-2:]
    return _make(
        np.pad(a.data, widths),
        (a,),
        lambda g: a._accumulate(g[..., ph:ph + h, pw:pw + w]),
        "pad2d",
    )


# -- convolution -------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-size 2D cross-correlation: ``x`` (C_in,H,W), ``kernel`` (C_out,C_in,kh,kw)."""
    if x.ndim != 3 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects (C,H,W) input and 4D kernel, got {x.shape} and {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if x.shape[0] != c_in:
        raise ValueError(f"conv2d channel mismatch: input has {x.shape[0]}, kernel expects {c_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d kernel extents must be odd")
    _, h, w = x.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    # (H, W, C_in, kh, kw) -> (H*W, C_in*kh*kw)
    cols = sliding_window_view(xp, (kh, kw), axis=(1, 2)).transpose(1, 2, 0, 3, 4).reshape(h * w, -1)
    kmat = kernel.data.reshape(c_out, -1)
    out = (cols @ kmat.T).T.reshape(c_out, h, w)
    if bias is not None:
        out = out + bias.data[:, None, None]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gmat = g.reshape(c_out, h * w)
        if kernel.requires_grad:
            kernel._accumulate((gmat @ cols).reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gmat.sum(axis=1))
        if x.requires_grad:
            dcols = (kmat.T @ gmat).reshape(c_in, kh, kw, h, w)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + h, j:j + w] += dcols[:, i, j]
            x._accumulate(dxp[:, ph:ph + h, pw:pw + w])

    return _make(out, parents, backward, "conv2d")


def filter2d_valid(x: Tensor, window: np.ndarray) -> Tensor:
    """Correlate every leading slice of ``x`` (..., H, W) with a fixed 2D window, valid region only."""
    window = np.asarray(window, dtype=DTYPE)
    kh, kw = window.shape
    h, w = x.shape[-2:]
    if kh > h or kw > w:
        raise ValueError(f"window {window.shape} larger than image {(h, w)}")
    out = np.einsum("...ij,ij->...", sliding_window_view(x.data, (kh, kw), axis=(-2, -1)), window)

    def backward(g):
        full = np.zeros_like(x.data)
        for i in range(kh):
            for j in range(kw):
                full[..., i:i + g.shape[-2], j:j + g.shape[-1]] += window[i, j] * g
        x._accumulate(full)

    return _make(out, (x,), backward, "filter2d_valid")


# -- Fourier transforms on packed complex tensors ---------------------------

def _check_pow2(shape: tuple[int, ...]) -> None:
    for n in shape[-2:]:
        if n < 1 or n & (n - 1):
            raise ValueError(f"FFT extents must be powers of two, got {shape[-2:]}")


def _pack(z: np.ndarray) -> np.ndarray:
    return np.stack([z.real, z.imag]).astype(DTYPE)


def _fft_packed(a: np.ndarray, inverse: bool) -> np.ndarray:
    z = a[0] + 1j * a[1]
    fn = np.fft.ifft2 if inverse else np.fft.fft2
    return _pack(fn(z, axes=(-2, -1), norm="ortho"))


def fft2_packed(a: Tensor) -> Tensor:
    """Orthonormal 2D FFT over the last two axes of a (2, ..., H, W) tensor."""
    _check_pow2(a.shape)
    return _make(_fft_packed(a.data, False), (a,), lambda g: a._accumulate(_fft_packed(g, True)), "fft2")


def ifft2_packed(a: Tensor) -> Tensor:
    _check_pow2(a.shape)
    return _make(_fft_packed(a.data, True), (a,), lambda g: a._accumulate(_fft_packed(g, False)), "ifft2")


def cmul_packed(a: Tensor, b: Tensor) -> Tensor:
    """Complex product of two packed tensors (broadcasting over trailing axes)."""
    ar, ai = a.data[0], a.data[1]
    br, bi = b.data[0], b.data[1]
    out = np.stack([ar * br - ai * bi, ar * bi + ai * br])

    def backward(g):
        gr, gi = g[0], g[1]
        # gradient of a real loss w.r.t. a complex input is g * conj(other)
        if a.requires_grad:
            a._accumulate(np.stack([gr * br + gi * bi, gi * br - gr * bi]))
        if b.requires_grad:
            b._accumulate(np.stack([gr * ar + gi * ai, gi * ar - gr * ai]))

    return _make(out, (a, b), backward, "cmul")


# -- straight-through binarization ------------------------------------------

def straight_through_binarize(p: Tensor, z) -> Tensor:
    """Forward ``1[z < p]``; backward passes the incoming gradient to ``p`` untouched."""
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=DTYPE)
    if np.any(p.data < 0) or np.any(p.data > 1) or np.any(np.isnan(p.data)):
        raise ValueError("straight_through_binarize: probabilities must lie in [0, 1]")
    if z.shape != p.shape:
        raise ValueError(f"z shape {z.shape} does not match p shape {p.shape}")
    out = (z < p.data).astype(DTYPE)
    return _make(out, (p,), lambda g: p._accumulate(g), "straight_through")
