"""Finite-difference checks for the reverse-mode engine."""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def directional_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-3,
                      seed: int = 0, directions: Sequence[np.ndarray] | None = None,
                      return_smooth: bool = False) -> tuple:
    """Compare the analytic directional derivative of scalar ``fn()`` with a central difference.

    Unless ``directions`` are given, a random Gaussian direction is drawn for
    every input.  Returns ``(relative_error, analytic, numeric)``, plus a
    flag telling whether both probe points share one branch pattern of the
    piecewise ops when ``return_smooth`` is set.
    """
    if directions is None:
        rng = np.random.default_rng(seed)
        directions = [rng.standard_normal(t.shape).astype(T.DTYPE) for t in inputs]
    for t in inputs:
        t.grad = None
    out = fn()
    out.backward()
    analytic = float(sum(np.sum(t.grad.astype(np.float64) * d) for t, d in zip(inputs, directions)))

    originals = [t.data.copy() for t in inputs]

    def value_at(step: float):
        for t, x0, d in zip(inputs, originals, directions):
            t.data = (x0 + step * d).astype(T.DTYPE)
        with T.no_grad(), T.record_kinks() as kinks:
            return float(fn().data), kinks

    try:
        plus, kinks_plus = value_at(h)
        minus, kinks_minus = value_at(-h)
    finally:
        for t, x0 in zip(inputs, originals):
            t.data = x0
    numeric = (plus - minus) / (2 * h)
    scale = max(abs(analytic), abs(numeric), 1e-12)
    result = (abs(analytic - numeric) / scale, analytic, numeric)
    if return_smooth:
        smooth = len(kinks_plus) == len(kinks_minus) and all(
            np.array_equal(a, b) for a, b in zip(kinks_plus, kinks_minus))
        return (*result, smooth)
    return result


def weighted_sum(x: Tensor, seed: int = 1) -> Tensor:
    """A generic scalar functional sum(w * x) with fixed random weights."""
    w = np.random.default_rng(seed).standard_normal(x.shape).astype(T.DTYPE)
    return (x * w).sum()


def coordinate_check(fn: Callable[[], Tensor], param: Tensor, index: tuple[int, ...], h: float = 1e-3,
                     return_smooth: bool = False) -> tuple:
    """Central-difference check of d fn / d param[index] for a single entry."""
    d = np.zeros(param.shape, dtype=T.DTYPE)
    d[index] = 1.0
    return directional_check(fn, [param], h, directions=[d], return_smooth=return_smooth)


def sampled_coordinate_check(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-3, seed: int = 0,
                             top_fraction: float = 0.1, max_tries: int = 20,
                             steps: Sequence[float] | None = None) -> tuple[float, tuple[int, ...], float]:
    """Check one sampled entry of ``param`` where the function is smooth over [-h, h].

    Candidates are drawn from the ``top_fraction`` of entries by analytic
    gradient magnitude, so the central difference is not swamped by float32
    rounding of the function value.  For each candidate the step sizes in
    ``steps`` (default ``h`` only) are tried in order and the first one whose
    probe points do not straddle a kink is used; candidates with no such step
    are skipped.  Returns ``(relative_error, index, step)``.
    """
    steps = (h,) if steps is None else tuple(steps)
    param.grad = None
    fn().backward()
    magnitude = np.abs(param.grad).ravel()
    n_top = max(1, int(np.ceil(top_fraction * magnitude.size)))
    candidates = np.argsort(-magnitude, kind="stable")[:n_top]
    rng = np.random.default_rng(seed)
    for flat in rng.permutation(candidates)[:max_tries]:
        index = np.unravel_index(int(flat), param.shape)
        for step in steps:
            err, _, _, smooth = coordinate_check(fn, param, index, step, return_smooth=True)
            if smooth:
                return err, tuple(int(i) for i in index), step
    raise RuntimeError("no smooth coordinate found for the finite-difference check")
