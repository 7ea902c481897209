"""SSIM / PSNR metrics and the unrolled SSIM training loss."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .cplx import ComplexTensor
from .tensor import Tensor, as_tensor

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g).astype(T.DTYPE)


def ssim_map(x, y, dynamic_range, window: np.ndarray | None = None) -> Tensor:
    """Per-pixel SSIM over the valid region of the last two axes.

    ``dynamic_range`` is a scalar or an array broadcastable to the leading axes
    plus two trailing singleton axes, e.g. (C, 1, 1) for channel-wise ranges.
    """
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ValueError(f"ssim inputs differ in shape: {x.shape} vs {y.shape}")
    window = gaussian_window() if window is None else np.asarray(window, dtype=T.DTYPE)
    L = np.asarray(dynamic_range, dtype=T.DTYPE)
    if np.any(L <= 0):
        raise ValueError("dynamic range must be positive")
    c1 = (K1 * L) ** 2
    c2 = (K2 * L) ** 2
    mu_x = T.filter2d_valid(x, window)
    mu_y = T.filter2d_valid(y, window)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    var_x = T.maximum(T.filter2d_valid(x * x, window) - mu_xx, 0.0)
    var_y = T.maximum(T.filter2d_valid(y * y, window) - mu_yy, 0.0)
    cov = T.filter2d_valid(x * y, window) - mu_xy
    num = (2.0 * mu_xy + c1) * (2.0 * cov + c2)
    den = (mu_xx + mu_yy + c1) * (var_x + var_y + c2)
    return num / den


def ssim(x, y, dynamic_range, window: np.ndarray | None = None) -> Tensor:
    """Mean SSIM over valid pixels (and over any leading axes)."""
    return ssim_map(x, y, dynamic_range, window).mean()


def fitted_window(shape) -> np.ndarray:
    """Standard window, shrunk to the largest odd extent that fits images smaller than 11x11."""
    n = min(WINDOW_SIZE, *shape[-2:])
    n -= 1 - n % 2
    return gaussian_window(n)


def channel_ranges(label: ComplexTensor) -> np.ndarray:
    """Per real/imag channel max - min of a (echo, H, W) label, shape (2, echo, 1, 1)."""
    d = label.packed.data
    rng = d.max(axis=(2, 3), keepdims=True) - d.min(axis=(2, 3), keepdims=True)
    return np.maximum(rng, 1e-6).astype(T.DTYPE)


def iterate_loss(iterate: ComplexTensor, label: ComplexTensor, ranges: np.ndarray | None = None) -> Tensor:
    """sum over echoes and real/imag channels of (1 - SSIM) for one unroll."""
    if iterate.shape != label.shape:
        raise ValueError(f"iterate {iterate.shape} and label {label.shape} differ in shape")
    ranges = channel_ranges(label) if ranges is None else ranges
    window = fitted_window(label.shape)
    per_channel = ssim_map(iterate.packed, label.packed.detach(), ranges, window).mean(axis=(2, 3))
    return (1.0 - per_channel).sum()


def training_loss(iterates: list[ComplexTensor], label: ComplexTensor) -> Tensor:
    """Sum over unrolls, echoes and real/imag channels of (1 - SSIM)."""
    if not iterates:
        raise ValueError("training loss needs at least one iterate")
    ranges = channel_ranges(label)
    total = iterate_loss(iterates[0], label, ranges)
    for it in iterates[1:]:
        total = total + iterate_loss(it, label, ranges)
    return total


def echo_combined(images: np.ndarray) -> np.ndarray:
    """sqrt(sum_j |s_j|^2) over the leading echo axis."""
    images = np.asarray(images)
    return np.sqrt(np.sum(np.abs(images.astype(np.complex128)) ** 2, axis=0))


def psnr_echo_combined(recon: np.ndarray, label: np.ndarray) -> float:
    """PSNR in dB of echo-combined images; ``math.inf`` when they are identical."""
    recon, label = np.asarray(recon), np.asarray(label)
    if recon.shape != label.shape:
        raise ValueError(f"recon {recon.shape} and label {label.shape} differ in shape")
    a, b = echo_combined(recon), echo_combined(label)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return float(20.0 * np.log10(b.max() / np.sqrt(mse)))


def ssim_echo_combined(recon: np.ndarray, label: np.ndarray) -> float:
    a, b = echo_combined(recon), echo_combined(label)
    L = max(float(b.max() - b.min()), 1e-6)
    with T.no_grad():
        return float(ssim(a, b, L).data)
