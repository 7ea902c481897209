"""Complex tensors stored as one real tensor with a leading (real, imag) axis."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

_CONJ = np.array([1.0, -1.0], dtype=T.DTYPE)


class ComplexTensor:
    """Complex array backed by a packed real :class:`Tensor` of shape (2, *shape).

    Arithmetic stays on the autodiff graph; ``.real`` and ``.imag`` are
    differentiable views.
    """

    __slots__ = ("packed",)

    def __init__(self, packed: Tensor):
        if packed.shape[0] != 2:
            raise ValueError(f"packed complex tensor needs leading extent 2, got {packed.shape}")
        self.packed = packed

    @classmethod
    def from_parts(cls, real, imag=None) -> ComplexTensor:
        real = T.as_tensor(real)
        imag = T.Tensor(np.zeros(real.shape)) if imag is None else T.as_tensor(imag)
        if real.shape != imag.shape:
            raise ValueError(f"real/imag shapes differ: {real.shape} vs {imag.shape}")
        return cls(T.stack([real, imag]))

    @classmethod
    def from_numpy(cls, z, requires_grad: bool = False) -> ComplexTensor:
        z = np.asarray(z)
        return cls(Tensor(np.stack([z.real, z.imag]), requires_grad=requires_grad))

    @classmethod
    def zeros(cls, shape) -> ComplexTensor:
        return cls(Tensor(np.zeros((2, *shape))))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.packed.shape[1:]

    @property
    def real(self) -> Tensor:
        return self.packed[0]

    @property
    def imag(self) -> Tensor:
        return self.packed[1]

    @property
    def requires_grad(self) -> bool:
        return self.packed.requires_grad

    def numpy(self) -> np.ndarray:
        d = self.packed.data
        return (d[0] + 1j * d[1]).astype(np.complex64)

    def detach(self) -> ComplexTensor:
        return ComplexTensor(self.packed.detach())

    def __repr__(self) -> str:
        return f"ComplexTensor(shape={self.shape})"

    def __getitem__(self, index) -> ComplexTensor:
        index = index if isinstance(index, tuple) else (index,)
        return ComplexTensor(self.packed[(slice(None), *index)])

    def __add__(self, other: ComplexTensor) -> ComplexTensor:
        return ComplexTensor(self.packed + other.packed)

    def __sub__(self, other: ComplexTensor) -> ComplexTensor:
        return ComplexTensor(self.packed - other.packed)

    def __neg__(self) -> ComplexTensor:
        return ComplexTensor(-self.packed)

    def __mul__(self, other) -> ComplexTensor:
        if isinstance(other, ComplexTensor):
            return ComplexTensor(T.cmul_packed(self.packed, other.packed))
        return self.scale(other)

    __rmul__ = __mul__

    def scale(self, factor) -> ComplexTensor:
        """Multiply by a real scalar or a real tensor broadcastable to ``shape``."""
        if isinstance(factor, Tensor):
            factor = factor.reshape((1, *factor.shape))
        return ComplexTensor(self.packed * factor)

    def conj(self) -> ComplexTensor:
        return ComplexTensor(self.packed * _CONJ.reshape((2,) + (1,) * len(self.shape)))

    def abs2(self) -> Tensor:
        return (self.packed * self.packed).sum(axis=0)

    def sum(self, axis: int, keepdims: bool = False) -> ComplexTensor:
        return ComplexTensor(self.packed.sum(axis=axis + 1 if axis >= 0 else axis, keepdims=keepdims))

    def reshape(self, *shape) -> ComplexTensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ComplexTensor(self.packed.reshape((2, *shape)))


def vdot_real(a: ComplexTensor, b: ComplexTensor, axis=None, keepdims: bool = False) -> Tensor:
    """Re<a, b> summed over ``axis`` (axes of the complex shape); all axes when None."""
    prod = a.packed * b.packed
    if axis is None:
        return prod.sum()
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return prod.sum(axis=(0, *[ax + 1 for ax in axes]), keepdims=keepdims)


def fft2(x: ComplexTensor) -> ComplexTensor:
    """Unitary 2D FFT over the last two axes."""
    return ComplexTensor(T.fft2_packed(x.packed))


def ifft2(x: ComplexTensor) -> ComplexTensor:
    return ComplexTensor(T.ifft2_packed(x.packed))


def concat(xs, axis: int = 0) -> ComplexTensor:
    return ComplexTensor(T.concat([x.packed for x in xs], axis=axis + 1))


def stack(xs, axis: int = 0) -> ComplexTensor:
    return ComplexTensor(T.stack([x.packed for x in xs], axis=axis + 1))
