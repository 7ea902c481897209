"""Unrolled deep ADMM with a learned CNN denoiser and optional temporal feature fusion.

Each unroll k performs

    v_tilde = s + u / rho_k
    v       = D(v_tilde)
    s_tilde = v - u / rho_k
    s       = argmin sum ||A s - b||^2 + rho_k / 2 ||s - s_tilde||^2   (CG)
    u       = u + rho_k (s - v)

with every step recorded on the autodiff graph.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import cplx
from . import tensor as T
from .cplx import ComplexTensor
from .forward import KSpaceData, adjoint, normal_op
from .tensor import Tensor, as_tensor

_TINY = 1e-30


@dataclass
class AdmmConfig:
    n_echoes: int
    unrolls: int = 3
    width: int = 32
    width_mult: float = 1.0
    tff: bool = False
    tff_hidden: int = 8
    tff_concat_input: bool = False
    share_weights: bool = True
    negative_slope: float = 0.1
    cg_iters: int = 8
    cg_tol: float = 1e-6
    rho_init: float = 1.0
    n_layers: int = 5

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def hidden_width(self) -> int:
        return max(1, int(round(self.width * self.width_mult)))


@dataclass
class CGInfo:
    iterations: int = 0
    residual_norms: list[np.ndarray] = field(default_factory=list)


def _inverse_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


def _conv_init(rng, c_out, c_in, k=3, zero=False):
    if zero:
        w = np.zeros((c_out, c_in, k, k))
    else:
        w = rng.standard_normal((c_out, c_in, k, k)) * np.sqrt(2.0 / (c_in * k * k))
    return Tensor(w, requires_grad=True), Tensor(np.zeros(c_out), requires_grad=True)


class AdmmModel:
    """All learnable parameters: denoiser convs, TFF cell, per-unroll penalties."""

    def __init__(self, config: AdmmConfig, seed: int = 0):
        if config.unrolls < 0:
            raise ValueError("unroll count must be non-negative")
        self.config = config
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        n_ch = 2 * config.n_echoes
        c = config.hidden_width
        if config.tff:
            ch = config.tff_hidden
            w, b = _conv_init(rng, ch, 2 + ch)
            self.params["tff.weight"], self.params["tff.bias"] = w, b
            in_ch = config.n_echoes * ch + (n_ch if config.tff_concat_input else 0)
        else:
            in_ch = n_ch
        widths = [in_ch] + [c] * (config.n_layers - 1) + [n_ch]
        n_sets = 1 if config.share_weights else max(config.unrolls, 1)
        for s in range(n_sets):
            for layer in range(config.n_layers):
                last = layer == config.n_layers - 1
                w, b = _conv_init(rng, widths[layer + 1], widths[layer], zero=last)
                self.params[f"denoiser{s}.conv{layer}.weight"] = w
                self.params[f"denoiser{s}.conv{layer}.bias"] = b
        rho0 = _inverse_softplus(config.rho_init)
        self.params["rho_raw"] = Tensor(np.full(max(config.unrolls, 1), rho0), requires_grad=True)

    @property
    def n_echoes(self) -> int:
        return self.config.n_echoes

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def rho(self, k: int) -> Tensor:
        return T.softplus(self.params["rho_raw"][k])

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for name, p in self.params.items():
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


# -- channel packing ----------------------------------------------------------

def to_channels(x: ComplexTensor) -> Tensor:
    """(echo, H, W) complex -> (2*echo, H, W) real, ordered re1, im1, re2, im2, ..."""
    n, h, w = x.shape
    return T.transpose(x.packed, (1, 0, 2, 3)).reshape(2 * n, h, w)


def from_channels(x: Tensor) -> ComplexTensor:
    c, h, w = x.shape
    return ComplexTensor(T.transpose(x.reshape(c // 2, 2, h, w), (1, 0, 2, 3)))


# -- components -----------------------------------------------------------------

def cg_solve(rhs: ComplexTensor, coils: ComplexTensor, masks, rho, n_iters: int = 8, tol: float = 1e-6,
             x0: ComplexTensor | None = None, info: CGInfo | None = None) -> ComplexTensor:
    """Solve (A^H A + rho/2 I) x = rhs independently per echo with conjugate gradients."""
    rho_value = float(np.min(rho.data)) if isinstance(rho, Tensor) else float(rho)
    if rho_value <= 0:
        raise ValueError(f"CG needs rho > 0 for a positive definite system, got {rho_value}")
    masks = as_tensor(masks)
    axes = (1, 2)
    rhs_norm = np.sqrt(np.sum(rhs.packed.data.astype(np.float64) ** 2, axis=(0, 2, 3)))
    if x0 is None:
        x = ComplexTensor.zeros(rhs.shape)
        r = rhs
    else:
        x = x0
        r = rhs - normal_op(x0, coils, masks, rho)
    p = r
    rr = cplx.vdot_real(r, r, axis=axes, keepdims=True)
    if info is not None:
        info.residual_norms.append(np.sqrt(rr.data.ravel()))
    for it in range(n_iters):
        if np.all(np.sqrt(rr.data.ravel()) <= tol * np.maximum(rhs_norm, _TINY)):
            break
        Ap = normal_op(p, coils, masks, rho)
        alpha = rr / (cplx.vdot_real(p, Ap, axis=axes, keepdims=True) + _TINY)
        x = ComplexTensor(x.packed + alpha * p.packed)
        r = ComplexTensor(r.packed - alpha * Ap.packed)
        rr_new = cplx.vdot_real(r, r, axis=axes, keepdims=True)
        p = ComplexTensor(r.packed + (rr_new / (rr + _TINY)) * p.packed)
        rr = rr_new
        if info is not None:
            info.iterations = it + 1
            info.residual_norms.append(np.sqrt(rr.data.ravel()))
    return x


def _denoiser_set(model: AdmmModel, k: int) -> int:
    return 0 if model.config.share_weights else k


def tff_forward(s: ComplexTensor, model: AdmmModel) -> Tensor:
    """Sweep the shared recurrent cell over echoes; returns h_2..h_{N_T+1} stacked on channels."""
    if not model.config.tff:
        raise RuntimeError("temporal feature fusion is disabled for this model")
    n, h, w = s.shape
    ch = model.config.tff_hidden
    weight, bias = model.params["tff.weight"], model.params["tff.bias"]
    chans = to_channels(s)
    hidden = Tensor(np.zeros((ch, h, w)))
    states = []
    for j in range(n):
        cell_in = T.concat([chans[2 * j:2 * j + 2], hidden], axis=0)
        hidden = T.leaky_relu(T.conv2d(cell_in, weight, bias), model.config.negative_slope)
        states.append(hidden)
    return T.concat(states, axis=0)


def denoise(v_in: ComplexTensor, model: AdmmModel, k: int = 0) -> ComplexTensor:
    """Residual CNN denoiser over the 2*N_T real/imag channel stack."""
    cfg = model.config
    if v_in.shape[0] != cfg.n_echoes:
        raise ValueError(f"model expects {cfg.n_echoes} echoes, got {v_in.shape[0]}")
    chans = to_channels(v_in)
    if cfg.tff:
        feats = tff_forward(v_in, model)
        x = T.concat([feats, chans], axis=0) if cfg.tff_concat_input else feats
    else:
        x = chans
    prefix = f"denoiser{_denoiser_set(model, k)}"
    for layer in range(cfg.n_layers):
        x = T.conv2d(x, model.params[f"{prefix}.conv{layer}.weight"], model.params[f"{prefix}.conv{layer}.bias"])
        if layer < cfg.n_layers - 1:
            x = T.leaky_relu(x, cfg.negative_slope)
    return from_channels(chans + x)


def admm_forward(b: KSpaceData, coils: ComplexTensor, model: AdmmModel,
                 unrolls: int | None = None) -> list[ComplexTensor]:
    """Run the unrolled iterations from the zero-filled start; returns every primal iterate."""
    K = model.config.unrolls if unrolls is None else unrolls
    masks = as_tensor(b.masks)
    atb = adjoint(b.samples, coils, masks)
    s = atb
    u = ComplexTensor.zeros(s.shape)
    iterates = []
    for k in range(K):
        rho = model.rho(k)
        inv_rho = 1.0 / rho
        v_tilde = s + u.scale(inv_rho)
        v = denoise(v_tilde, model, k)
        s_tilde = v - u.scale(inv_rho)
        rhs = atb + s_tilde.scale(rho * 0.5)
        s = cg_solve(rhs, coils, masks, rho, model.config.cg_iters, model.config.cg_tol, x0=s_tilde)
        u = u + (s - v).scale(rho)
        iterates.append(s)
    return iterates
