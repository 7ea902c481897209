"""Multi-coil Cartesian encoding operator, its adjoint and the regularized normal operator.

Shapes: images (echo, y, x); coil maps (coil, y, x); masks (echo, ky, kx);
k-space (echo, coil, ky, kx).  K-space is stored unshifted (DC at index [0, 0]).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cplx
from .cplx import ComplexTensor
from .tensor import Tensor, as_tensor


@dataclass
class KSpaceData:
    """Measured samples with the masks that produced them."""

    samples: ComplexTensor  # (echo, coil, ky, kx)
    masks: Tensor  # (echo, ky, kx), entries in {0, 1}
    noise_sigma: float = 0.0

    @property
    def n_echoes(self) -> int:
        return self.samples.shape[0]

    @property
    def n_coils(self) -> int:
        return self.samples.shape[1]


def _check(s_shape, coils: ComplexTensor, masks: Tensor) -> None:
    n_echo, h, w = s_shape
    if coils.shape[1:] != (h, w):
        raise ValueError(f"coil maps {coils.shape} incompatible with images {s_shape}")
    if masks.shape != (n_echo, h, w):
        raise ValueError(f"masks {masks.shape} incompatible with images {s_shape}")


def _coil_mask(masks: Tensor) -> Tensor:
    return masks.reshape(masks.shape[0], 1, *masks.shape[1:])


def encode(s: ComplexTensor, coils: ComplexTensor, masks) -> ComplexTensor:
    """U_j F (E_k s_j) for every echo j and coil k."""
    masks = as_tensor(masks)
    _check(s.shape, coils, masks)
    n_echo, h, w = s.shape
    coil_images = s.reshape(n_echo, 1, h, w) * coils.reshape(1, *coils.shape)
    return cplx.fft2(coil_images).scale(_coil_mask(masks))


def adjoint(b: ComplexTensor, coils: ComplexTensor, masks) -> ComplexTensor:
    """sum_k conj(E_k) F^-1 (U_j b_jk); the zero-filled reconstruction for measured data."""
    masks = as_tensor(masks)
    if len(b.shape) != 4 or b.shape[1] != coils.shape[0]:
        raise ValueError(f"k-space {b.shape} incompatible with {coils.shape[0]} coils")
    _check((b.shape[0], *b.shape[2:]), coils, masks)
    coil_images = cplx.ifft2(b.scale(_coil_mask(masks)))
    return (coil_images * coils.conj().reshape(1, *coils.shape)).sum(axis=1)


def normal_op(s: ComplexTensor, coils: ComplexTensor, masks, rho) -> ComplexTensor:
    """(A^H A + rho/2 I) s."""
    rho_value = float(np.min(rho.data)) if isinstance(rho, Tensor) else float(rho)
    if rho_value < 0:
        raise ValueError(f"rho must be non-negative, got {rho_value}")
    out = adjoint(encode(s, coils, masks), coils, masks)
    if isinstance(rho, Tensor) or rho_value != 0:
        out = out + s.scale(as_tensor(rho) * 0.5)
    return out


def zero_filled(data: KSpaceData, coils: ComplexTensor) -> ComplexTensor:
    return adjoint(data.samples, coils, data.masks)


def undersample(full: ComplexTensor, masks) -> KSpaceData:
    """Retrospectively apply per-echo masks to fully sampled k-space."""
    masks = as_tensor(masks)
    return KSpaceData(full.scale(_coil_mask(masks)), masks)


def coil_combine(coil_images: np.ndarray, coils: np.ndarray) -> np.ndarray:
    """Plain numpy sum_k conj(E_k) x_k over the coil axis (-3)."""
    return np.sum(np.conj(coils) * coil_images, axis=-3)
