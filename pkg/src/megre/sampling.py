"""Cartesian k-space sampling patterns: a manual variable-density baseline and
learnable per-echo probability maps with straight-through binarization.

Masks are laid out unshifted, matching :mod:`megre.forward` (DC at [0, 0]).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

MODES = ("manual", "spo-single", "spo-multi")
DEFAULT_RATIO = 0.23
DEFAULT_SLOPE = 5.0


def _check_ratio(target_ratio: float) -> None:
    if not 0.0 < target_ratio < 1.0:
        raise ValueError(f"target ratio must lie in (0, 1), got {target_ratio}")


def renormalize(p: Tensor, target_ratio: float) -> Tensor:
    """Rescale one probability map so its mean equals ``target_ratio``."""
    p_mean = float(p.data.mean(dtype=np.float64))
    mean = p.mean()
    if p_mean >= target_ratio:
        return p * (target_ratio / mean)
    return 1.0 - (1.0 - p) * ((1.0 - target_ratio) / (1.0 - mean))


def weights_to_probabilities(w: Tensor, slope: float = DEFAULT_SLOPE, target_ratio: float = DEFAULT_RATIO) -> Tensor:
    """sigmoid(slope * w) followed by per-echo ratio renormalization; ``w`` is (echo, ky, kx)."""
    _check_ratio(target_ratio)
    if slope <= 0:
        raise ValueError(f"sigmoid slope must be positive, got {slope}")
    p = T.sigmoid(w * slope)
    if p.ndim == 2:
        return renormalize(p, target_ratio)
    return T.stack([renormalize(p[j], target_ratio) for j in range(p.shape[0])])


def _dc_indicator(shape) -> np.ndarray:
    dc = np.zeros(shape, dtype=np.float32)
    dc[..., 0, 0] = 1.0
    return dc


def sample_mask(P: Tensor, rng_seed, force_dc: bool = True) -> Tensor:
    """One stochastic draw U = 1[z < P] with a straight-through gradient to P.

    ``rng_seed`` is an int seed or a ``numpy.random.Generator``.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    z = rng.random(P.shape, dtype=np.float32)
    U = T.straight_through_binarize(P, z)
    if force_dc:
        dc = _dc_indicator(P.shape)
        U = U * (1.0 - dc) + dc
    return U


def manual_variable_density(size: int, target_ratio: float = DEFAULT_RATIO, decay_power: float = 2.0,
                            acs_lines: int = 0, seed: int = 0) -> np.ndarray:
    """Binary (size, size) mask drawn from a radial power-law density.

    Density is proportional to (1 + |k| / k_max) ** -decay_power; an optional
    central ``acs_lines`` x ``acs_lines`` block is always sampled.  Exactly
    round(target_ratio * size**2) points are sampled.
    """
    _check_ratio(target_ratio)
    k = np.fft.fftfreq(size)
    ky, kx = np.meshgrid(k, k, indexing="ij")
    radius = np.hypot(ky, kx)
    density = (1.0 + radius / radius.max()) ** (-float(decay_power))

    acs = np.zeros((size, size), dtype=bool)
    if acs_lines > 0:
        idx = np.fft.ifftshift(np.arange(size))
        lo = size // 2 - acs_lines // 2
        block = idx[lo:lo + acs_lines]
        acs[np.ix_(block, block)] = True
    budget = int(round(target_ratio * size * size))
    remaining = budget - int(acs.sum())
    if remaining < 0:
        raise ValueError(f"ACS block of {acs.sum()} points exceeds the sampling budget of {budget}")

    rng = np.random.default_rng(seed)
    candidates = np.flatnonzero(~acs)
    prob = density.ravel()[candidates]
    picked = rng.choice(candidates, size=remaining, replace=False, p=prob / prob.sum())
    mask = acs.ravel().copy()
    mask[picked] = True
    return mask.reshape(size, size).astype(np.float32)


class SamplingPattern:
    """Per-echo sampling state: learnable weights (SPO modes) or fixed manual masks."""

    def __init__(self, mode: str, n_echoes: int, size: int, target_ratio: float = DEFAULT_RATIO,
                 slope: float = DEFAULT_SLOPE, seed: int = 0, masks: np.ndarray | None = None,
                 weights: np.ndarray | None = None, force_dc: bool = True):
        if mode not in MODES:
            raise ValueError(f"unknown sampling mode {mode!r}; expected one of {MODES}")
        _check_ratio(target_ratio)
        self.mode = mode
        self.n_echoes = n_echoes
        self.size = size
        self.target_ratio = target_ratio
        self.slope = slope
        self.force_dc = force_dc
        self.weights: Tensor | None = None
        self.frozen: np.ndarray | None = None
        if mode == "manual":
            if masks is None:
                masks = manual_variable_density(size, target_ratio, seed=seed)
            masks = np.asarray(masks, dtype=np.float32)
            if masks.ndim == 2:
                masks = np.broadcast_to(masks, (n_echoes, size, size))
            self.frozen = np.array(masks)
        else:
            n_maps = 1 if mode == "spo-single" else n_echoes
            if weights is None:
                weights = np.random.default_rng(seed).uniform(-0.5, 0.5, size=(n_maps, size, size))
            weights = np.asarray(weights, dtype=np.float32)
            if weights.shape != (n_maps, size, size):
                raise ValueError(f"weights must have shape {(n_maps, size, size)}, got {weights.shape}")
            self.weights = Tensor(weights, requires_grad=True)

    @property
    def learnable(self) -> bool:
        return self.weights is not None

    def probabilities(self) -> Tensor:
        """Per-echo probability maps P_j, shape (echo, ky, kx)."""
        if self.weights is None:
            return Tensor(self.frozen)
        P = weights_to_probabilities(self.weights, self.slope, self.target_ratio)
        if self.mode == "spo-single":
            P = T.concat([P] * self.n_echoes, axis=0)
        return P

    def sample(self, rng_seed) -> Tensor:
        """Fresh differentiable draw in SPO modes; the fixed masks once frozen or manual."""
        if self.frozen is not None:
            return Tensor(self.frozen)
        return self.draw(rng_seed)

    def draw(self, rng_seed) -> Tensor:
        """One draw from the current probabilities, ignoring any frozen masks."""
        if self.weights is None:
            raise RuntimeError("manual patterns have no probabilities to draw from")
        P = self.probabilities()
        if self.mode == "spo-single":
            rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
            single = sample_mask(P[0:1], rng, self.force_dc)
            return T.concat([single] * self.n_echoes, axis=0)
        return sample_mask(P, rng_seed, self.force_dc)

    def masks(self) -> np.ndarray:
        if self.frozen is None:
            raise RuntimeError("pattern has no fixed masks; call freeze_pattern first")
        return self.frozen


def freeze_pattern(spo: SamplingPattern, seed: int) -> np.ndarray:
    """Draw one binary mask set from the current probabilities and pin it on ``spo``."""
    if spo.weights is None:
        return spo.frozen
    with T.no_grad():
        spo.frozen = np.array(spo.draw(seed).data)
    return spo.frozen
