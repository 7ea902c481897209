"""Field-map estimation from multi-echo images and regularized dipole inversion.

The voxel-wise fit uses the mono-exponential complex decay model

    s_j = m0 exp(-R2* t_j) exp(i (phi0 + f t_j))

solved with a batched Levenberg-Marquardt loop over all voxels at once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cplx import ComplexTensor

N_PARAMS = 4  # m0, r2star, phi0, field


@dataclass
class FieldFitResult:
    field: np.ndarray
    m0: np.ndarray
    r2star: np.ndarray
    phi0: np.ndarray
    residual: np.ndarray
    converged: np.ndarray
    fitted: np.ndarray  # False where the voxel was skipped (low signal or outside mask)
    iterations: int = 0

    def stack(self) -> np.ndarray:
        return np.stack([self.m0, self.r2star, self.phi0, self.field]).astype(np.float32)


@dataclass
class SusceptibilityMap:
    chi: np.ndarray
    reg_weight: float


def _as_complex(s) -> np.ndarray:
    if isinstance(s, ComplexTensor):
        return s.numpy().astype(np.complex128)
    return np.asarray(s, dtype=np.complex128)


def _model(theta: np.ndarray, t: np.ndarray) -> np.ndarray:
    m0, r2, phi0, f = theta.T
    return m0[:, None] * np.exp(-r2[:, None] * t + 1j * (phi0[:, None] + f[:, None] * t))


def _residual(theta, t, s):
    d = _model(theta, t) - s
    return np.concatenate([d.real, d.imag], axis=1)


def _jacobian(theta, t):
    m = _model(theta, t)
    m0 = theta[:, 0:1]
    safe_m0 = np.where(m0 == 0, 1.0, m0)
    d_m0 = np.where(m0 == 0, np.exp(-theta[:, 1:2] * t + 1j * (theta[:, 2:3] + theta[:, 3:4] * t)), m / safe_m0)
    cols = [d_m0, -t * m, 1j * m, 1j * t * m]
    J = np.stack(cols, axis=2)  # (V, E, 4)
    return np.concatenate([J.real, J.imag], axis=1)  # (V, 2E, 4)


def initial_guess(s: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Log-linear magnitude fit for (m0, R2*) and first-echo phase difference for (phi0, f); s is (V, E)."""
    logmag = np.log(np.maximum(np.abs(s), 1e-30))
    A = np.stack([np.ones_like(t), -t], axis=1)
    coef, *_ = np.linalg.lstsq(A, logmag.T, rcond=None)
    m0 = np.exp(coef[0])
    r2 = coef[1]
    f = np.angle(s[:, 1] * np.conj(s[:, 0])) / (t[1] - t[0])
    phi0 = np.angle(s[:, 0] * np.exp(-1j * f * t[0]))
    return np.stack([m0, r2, phi0, f], axis=1)


def fit_field_lm(s, echo_times, mask: np.ndarray | None = None, max_iters: int = 100, tol: float = 1e-12,
                 min_signal: float | None = None, lam0: float = 1e-3) -> FieldFitResult:
    """Per-voxel Levenberg-Marquardt fit of (m0, R2*, phi0, f) to (echo, H, W) images.

    Voxels with ``|s_1|`` below ``min_signal`` (default 1e-3 of the maximum)
    or outside ``mask`` are skipped and reported with ``fitted == False``.
    A step is accepted only if it lowers the voxel's squared residual; the
    damping is divided by 10 on acceptance and multiplied by 10 otherwise.
    """
    s = _as_complex(s)
    t = np.asarray(echo_times, dtype=np.float64)
    if s.ndim != 3 or s.shape[0] != len(t):
        raise ValueError(f"images {s.shape} do not match {len(t)} echo times")
    if len(t) < N_PARAMS:
        raise ValueError(f"need at least {N_PARAMS} echoes to fit {N_PARAMS} parameters")
    n_e, h, w = s.shape
    first = np.abs(s[0])
    if min_signal is None:
        min_signal = 1e-3 * float(first.max()) if first.max() > 0 else np.inf
    fitted = first >= min_signal
    if mask is not None:
        fitted &= np.asarray(mask, dtype=bool)

    sv = s.reshape(n_e, -1).T[fitted.ravel()]
    theta = initial_guess(sv, t) if len(sv) else np.zeros((0, N_PARAMS))
    r = _residual(theta, t, sv)
    cost = np.sum(r * r, axis=1)
    lam = np.full(len(sv), lam0)
    active = np.ones(len(sv), dtype=bool)
    iters = 0
    for iters in range(1, max_iters + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            iters -= 1
            break
        J = _jacobian(theta[idx], t)
        ra = r[idx]
        JtJ = np.einsum("vei,vej->vij", J, J)
        g = np.einsum("vei,ve->vi", J, ra)
        diag = np.einsum("vii->vi", JtJ)
        damped = JtJ + (lam[idx, None] * np.maximum(diag, 1e-12))[:, :, None] * np.eye(N_PARAMS)
        step = -np.linalg.solve(damped, g[:, :, None])[:, :, 0]
        trial = theta[idx] + step
        # wild trial steps may overflow; they are rejected below
        with np.errstate(over="ignore", invalid="ignore"):
            r_trial = _residual(trial, t, sv[idx])
            cost_trial = np.sum(r_trial * r_trial, axis=1)
        accept = np.isfinite(cost_trial) & (cost_trial < cost[idx])
        acc = idx[accept]
        rel_drop = (cost[acc] - cost_trial[accept]) / np.maximum(cost[acc], 1e-300)
        theta[acc] = trial[accept]
        r[acc] = r_trial[accept]
        cost[acc] = cost_trial[accept]
        lam[acc] /= 10.0
        lam[idx[~accept]] *= 10.0
        small_step = np.max(np.abs(step[accept]) / (np.abs(trial[accept]) + 1e-12), axis=1) < 1e-10 if accept.any() else np.zeros(0, bool)
        done = (rel_drop < tol) | small_step | (cost[acc] < 1e-28)
        active[acc[done]] = False
        active[idx[~accept][lam[idx[~accept]] > 1e12]] = False
    converged = ~active

    def full(values, fill=0.0):
        out = np.full(h * w, fill, dtype=np.float64)
        out[fitted.ravel()] = values
        return out.reshape(h, w)

    conv_map = np.zeros(h * w, dtype=bool)
    conv_map[fitted.ravel()] = converged
    return FieldFitResult(
        field=full(theta[:, 3]),
        m0=full(theta[:, 0]),
        r2star=full(theta[:, 1]),
        phi0=full(theta[:, 2]),
        residual=full(np.sqrt(cost)),
        converged=conv_map.reshape(h, w),
        fitted=fitted,
        iterations=iters,
    )


def dipole_kernel(shape, voxel_size=(1.0, 1.0, 1.0), b0_direction=(0.0, 0.0, 1.0)) -> np.ndarray:
    """D(k) = 1/3 - (k . b0)^2 / |k|^2 on an unshifted (ny, nx[, nz]) grid, D(0) = 0.

    A 2D shape is treated as a single-slice 3D grid (k_z = 0).
    """
    shape = tuple(shape)
    grid3 = shape if len(shape) == 3 else (*shape, 1)
    vs = tuple(voxel_size) + (1.0,) * (3 - len(voxel_size))
    ks = np.meshgrid(*[np.fft.fftfreq(n, d=d) for n, d in zip(grid3, vs)], indexing="ij")
    b = np.asarray(b0_direction, dtype=np.float64)
    b = b / np.linalg.norm(b)
    k2 = ks[0] ** 2 + ks[1] ** 2 + ks[2] ** 2
    kb = ks[0] * b[0] + ks[1] * b[1] + ks[2] * b[2]
    with np.errstate(invalid="ignore", divide="ignore"):
        D = 1.0 / 3.0 - kb ** 2 / k2
    D[k2 == 0] = 0.0
    return D.reshape(shape)


def forward_dipole(chi: np.ndarray, voxel_size=(1.0, 1.0, 1.0), b0_direction=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Field induced by susceptibility ``chi``: F^-1[D F(chi)]."""
    chi = np.asarray(chi, dtype=np.float64)
    D = dipole_kernel(chi.shape, voxel_size, b0_direction)
    return np.real(np.fft.ifftn(D * np.fft.fftn(chi)))


def dipole_invert(field: np.ndarray, voxel_size=(1.0, 1.0, 1.0), b0_direction=(0.0, 0.0, 1.0),
                  reg_weight: float = 1e-2, field_scale: float = 1.0) -> SusceptibilityMap:
    """Tikhonov-regularized closed-form inversion chi = F^-1[conj(D) F(f) / (|D|^2 + reg)]."""
    if reg_weight <= 0:
        raise ValueError(f"reg_weight must be positive, got {reg_weight}")
    f = np.asarray(field, dtype=np.float64) * field_scale
    D = dipole_kernel(f.shape, voxel_size, b0_direction)
    chi = np.real(np.fft.ifftn(np.conj(D) * np.fft.fftn(f) / (np.abs(D) ** 2 + reg_weight)))
    return SusceptibilityMap(chi.astype(np.float32), float(reg_weight))
