"""Synthetic MEGRE phantoms, coil sensitivities and fully sampled k-space.

Units: time in ms, R2* in 1/ms, field in rad/ms, phases in rad.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from . import cplx
from .cplx import ComplexTensor
from .forward import KSpaceData
from .tensor import Tensor

FIRST_TE_MS = 1.972
ECHO_SPACING_MS = 3.384

M0_RANGE = (0.0, 1.0)
R2STAR_RANGE = (0.01, 0.1)
FIELD_RANGE = (-0.3, 0.3)
PHI0_RANGE = (-np.pi / 4, np.pi / 4)

PHANTOM_KINDS = ("shepp-logan-like", "random-smooth")


@dataclass
class PhantomParams:
    m0: np.ndarray
    r2star: np.ndarray
    phi0: np.ndarray
    field: np.ndarray
    echo_times: np.ndarray

    def __post_init__(self):
        self.m0, self.r2star, self.phi0, self.field = (
            np.asarray(a, dtype=np.float32) for a in (self.m0, self.r2star, self.phi0, self.field)
        )
        self.echo_times = np.asarray(self.echo_times, dtype=np.float64)
        shape = self.m0.shape
        if self.m0.ndim != 2 or any(a.shape != shape for a in (self.r2star, self.phi0, self.field)):
            raise ValueError("all parameter maps must share one 2D shape")
        if self.echo_times.ndim != 1 or len(self.echo_times) < 2:
            raise ValueError("need at least two echo times")
        if np.any(np.diff(self.echo_times) <= 0):
            raise ValueError("echo times must be strictly increasing")

    @property
    def shape(self) -> tuple[int, int]:
        return self.m0.shape

    @property
    def n_echoes(self) -> int:
        return len(self.echo_times)

    def stack(self) -> np.ndarray:
        """Maps as one (4, H, W) array in the order m0, r2star, phi0, field."""
        return np.stack([self.m0, self.r2star, self.phi0, self.field])


def default_echo_times(n_echoes: int, first: float = FIRST_TE_MS, spacing: float = ECHO_SPACING_MS) -> np.ndarray:
    return first + spacing * np.arange(n_echoes)


def simulate_signal(params: PhantomParams) -> ComplexTensor:
    """s_j = m0 exp(-R2* t_j) exp(i (phi0 + f t_j)), returned as (echo, y, x)."""
    t = params.echo_times[:, None, None]
    m0 = params.m0.astype(np.float64)
    mag = m0 * np.exp(-params.r2star.astype(np.float64) * t)
    phase = params.phi0.astype(np.float64) + params.field.astype(np.float64) * t
    return ComplexTensor(Tensor(np.stack([mag * np.cos(phase), mag * np.sin(phase)])))


def _ellipse(xx, yy, cx, cy, a, b, theta):
    c, s = np.cos(theta), np.sin(theta)
    xr = (xx - cx) * c + (yy - cy) * s
    yr = -(xx - cx) * s + (yy - cy) * c
    return (xr / a) ** 2 + (yr / b) ** 2 <= 1.0


# (cx, cy, a, b, theta) in normalized [-1, 1] coordinates, loosely after Shepp-Logan
_ELLIPSES = [
    (0.0, 0.0, 0.69, 0.92, 0.0),
    (0.0, -0.0184, 0.6624, 0.874, 0.0),
    (0.22, 0.0, 0.11, 0.31, -0.31),
    (-0.22, 0.0, 0.16, 0.41, 0.31),
    (0.0, 0.35, 0.21, 0.25, 0.0),
    (0.0, 0.1, 0.046, 0.046, 0.0),
    (-0.08, -0.605, 0.046, 0.023, 0.0),
    (0.06, -0.605, 0.023, 0.046, 0.0),
]


def _nonzero_uniform(rng, lo, hi, min_abs):
    """Uniform draw from [lo, hi] excluding (-min_abs, min_abs)."""
    while True:
        v = rng.uniform(lo, hi)
        if abs(v) >= min_abs:
            return v


def _shepp_logan_like(size: int, rng: np.random.Generator):
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    xx, yy = np.meshgrid(coords, coords)
    m0 = np.zeros((size, size))
    r2s = np.full((size, size), R2STAR_RANGE[0])
    phi0 = np.zeros((size, size))
    field = np.zeros((size, size))
    for i, (cx, cy, a, b, th) in enumerate(_ELLIPSES):
        jitter = rng.uniform(-0.03, 0.03, size=2)
        scale = rng.uniform(0.9, 1.1)
        inside = _ellipse(xx, yy, cx + jitter[0], cy + jitter[1], a * scale, b * scale, th + rng.uniform(-0.1, 0.1))
        m0[inside] = rng.uniform(0.6, 1.0) if i == 0 else rng.uniform(0.2, 1.0)
        r2s[inside] = rng.uniform(0.015, 0.095)
        phi0[inside] = _nonzero_uniform(rng, *PHI0_RANGE, 0.05)
        field[inside] = _nonzero_uniform(rng, -0.28, 0.28, 0.02)
    return m0, r2s, phi0, field


def _smooth_field(size: int, rng: np.random.Generator, lo: float, hi: float, sigma: float) -> np.ndarray:
    x = gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    x = (x - x.min()) / max(x.max() - x.min(), 1e-12)
    return lo + (hi - lo) * x


def _random_smooth(size: int, rng: np.random.Generator):
    sigma = size / 8
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    xx, yy = np.meshgrid(coords, coords)
    support = _ellipse(xx, yy, 0.0, 0.0, rng.uniform(0.7, 0.9), rng.uniform(0.7, 0.9), rng.uniform(0, np.pi))
    m0 = _smooth_field(size, rng, 0.2, 1.0, sigma) * support
    r2s = _smooth_field(size, rng, 0.015, 0.095, sigma)
    phi0 = _smooth_field(size, rng, *PHI0_RANGE, sigma)
    field = _smooth_field(size, rng, -0.28, 0.28, sigma)
    return m0, r2s, phi0, field


def make_phantom(kind: str, size: int, n_echoes: int, seed: int,
                 echo_times: np.ndarray | None = None) -> PhantomParams:
    """Random phantom of the given kind; identical output for identical seeds."""
    if size < 2 or size & (size - 1):
        raise ValueError(f"size must be a power of two, got {size}")
    rng = np.random.default_rng(seed)
    if kind == "shepp-logan-like":
        maps = _shepp_logan_like(size, rng)
    elif kind == "random-smooth":
        maps = _random_smooth(size, rng)
    else:
        raise ValueError(f"unknown phantom kind {kind!r}; expected one of {PHANTOM_KINDS}")
    m0, r2s, phi0, field = maps
    m0 = np.clip(m0, *M0_RANGE)
    r2s = np.clip(r2s, *R2STAR_RANGE)
    field = np.clip(field, *FIELD_RANGE)
    if echo_times is None:
        echo_times = default_echo_times(n_echoes)
    return PhantomParams(m0, r2s, phi0, field, echo_times)


def make_coils(n_coils: int, size: int, seed: int) -> ComplexTensor:
    """Smooth Gaussian-lobed complex maps normalized to unit root-sum-of-squares, (coil, y, x)."""
    if n_coils < 1:
        raise ValueError("n_coils must be at least 1")
    rng = np.random.default_rng(seed)
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    xx, yy = np.meshgrid(coords, coords)
    maps = []
    for k in range(n_coils):
        angle = 2 * np.pi * k / n_coils + rng.uniform(-0.2, 0.2)
        cx, cy = 0.8 * np.cos(angle), 0.8 * np.sin(angle)
        width = rng.uniform(0.7, 1.0)
        mag = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * width ** 2))
        phase = rng.uniform(-np.pi, np.pi) + rng.uniform(-1, 1) * xx + rng.uniform(-1, 1) * yy
        maps.append(mag * np.exp(1j * phase))
    maps = np.array(maps)
    maps /= np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return ComplexTensor.from_numpy(maps)


def acquire_full_kspace(image: ComplexTensor, coils: ComplexTensor, noise_sigma: float, seed: int) -> KSpaceData:
    """b_jk = F(E_k s_j) + n with complex Gaussian noise (per-component std ``noise_sigma``)."""
    n_echo, h, w = image.shape
    if coils.shape[1:] != (h, w):
        raise ValueError(f"coil maps {coils.shape} incompatible with images {image.shape}")
    k = cplx.fft2(image.reshape(n_echo, 1, h, w) * coils.reshape(1, *coils.shape))
    data = k.packed.data
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        data = data + noise_sigma * rng.standard_normal(data.shape)
    masks = Tensor(np.ones((n_echo, h, w)))
    return KSpaceData(ComplexTensor(Tensor(data)), masks, float(noise_sigma))
