"""Synthetic datasets, two-stage training, evaluation reports and the ablation harness."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import stats

from . import container, forward, metrics, phantom, qsm
from . import tensor as T
from .admm import AdmmConfig, AdmmModel, admm_forward
from .cplx import ComplexTensor
from .forward import KSpaceData
from .optim import Adam, AdamState
from .sampling import SamplingPattern, freeze_pattern, manual_variable_density
from .tensor import Tensor

log = logging.getLogger(__name__)

SPO_MODES = {"none": "manual", "single": "spo-single", "multi": "spo-multi"}
STAGES = ("joint", "frozen-mask")
DATASET_FILE = "dataset.met"


class TrainingError(RuntimeError):
    pass


# -- datasets ---------------------------------------------------------------------

@dataclass
class Dataset:
    kspace: np.ndarray  # (slice, echo, coil, ky, kx) complex, fully sampled
    labels: np.ndarray  # (slice, echo, y, x) complex, coil-combined fully sampled images
    truth: np.ndarray  # (slice, echo, y, x) complex, noiseless signal
    params: np.ndarray  # (slice, 4, y, x): m0, r2star, phi0, field
    coils: np.ndarray  # (coil, y, x) complex
    echo_times: np.ndarray
    noise_sigma: float
    seed: int = 0

    def __len__(self) -> int:
        return self.kspace.shape[0]

    @property
    def n_echoes(self) -> int:
        return self.kspace.shape[1]

    @property
    def size(self) -> int:
        return self.kspace.shape[-1]

    def coil_tensor(self) -> ComplexTensor:
        return ComplexTensor.from_numpy(self.coils)

    def full_kspace(self, i: int) -> ComplexTensor:
        return ComplexTensor.from_numpy(self.kspace[i])

    def label(self, i: int) -> ComplexTensor:
        return ComplexTensor.from_numpy(self.labels[i])


def make_dataset(n: int, size: int = 32, n_echoes: int = 4, n_coils: int = 4, noise_sigma: float = 0.01,
                 seed: int = 0, kind: str = "mixed") -> Dataset:
    """Seeded synthetic slices: phantom -> signal -> coils -> noisy full k-space -> label."""
    coils = phantom.make_coils(n_coils, size, seed)
    ss = np.random.SeedSequence(seed)
    slice_seeds = ss.generate_state(2 * n)
    kinds = phantom.PHANTOM_KINDS
    ks, labels, truth, params = [], [], [], []
    masks = Tensor(np.ones((n_echoes, size, size)))
    for i in range(n):
        k = kinds[i % len(kinds)] if kind == "mixed" else kind
        p = phantom.make_phantom(k, size, n_echoes, int(slice_seeds[2 * i]))
        s = phantom.simulate_signal(p)
        full = phantom.acquire_full_kspace(s, coils, noise_sigma, int(slice_seeds[2 * i + 1]))
        ks.append(full.samples.numpy())
        labels.append(forward.adjoint(full.samples, coils, masks).numpy())
        truth.append(s.numpy())
        params.append(p.stack())
    echo_times = phantom.default_echo_times(n_echoes)
    return Dataset(np.array(ks), np.array(labels), np.array(truth), np.array(params),
                   coils.numpy(), echo_times, float(noise_sigma), seed)


def save_dataset(ds: Dataset, out_dir) -> Path:
    path = Path(out_dir) / DATASET_FILE
    container.write_container(
        path,
        {"kspace": ds.kspace, "labels": ds.labels, "truth": ds.truth, "params": ds.params, "coils": ds.coils},
        meta={"echo_times": [float(t) for t in ds.echo_times], "noise_sigma": ds.noise_sigma, "seed": ds.seed,
              "param_order": ["m0", "r2star", "phi0", "field"]},
        axes={"coils": ["coil", "y", "x"]},
    )
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    if path.is_dir():
        path = path / DATASET_FILE
    arrays, meta = container.read_container(path)
    return Dataset(arrays["kspace"], arrays["labels"], arrays["truth"], arrays["params"], arrays["coils"],
                   np.asarray(meta["echo_times"]), float(meta["noise_sigma"]), int(meta.get("seed", 0)))


def split_indices(n: int, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded train/val/test split by slice."""
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]), np.sort(perm[n_train + n_val:])


# -- configuration and reports ---------------------------------------------------------

@dataclass
class TrainConfig:
    unrolls: int = 3
    epochs: int = 30
    lr: float = 1e-3
    seed: int = 0
    spo: str = "none"
    tff: bool = False
    ratio: float = 0.23
    noise_sigma: float = 0.01
    stage: str = "joint"
    data: str | None = None
    # synthetic data generated in memory when ``data`` is None
    n_slices: int = 80
    size: int = 32
    echoes: int = 4
    coils: int = 4
    data_seed: int = 0
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    width: int = 32
    width_mult: float = 1.0
    tff_hidden: int = 8
    cg_iters: int = 8
    slope: float = 5.0
    vd_decay: float = 2.0
    share_weights: bool = True
    lr_schedule: str = "cosine"  # or "constant"
    lr_final: float = 0.1  # final learning rate as a fraction of ``lr`` (cosine schedule)

    def __post_init__(self):
        self.split = tuple(self.split)
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.unrolls < 1:
            raise ValueError("need at least one unroll")
        if not 0 < self.ratio < 1:
            raise ValueError("sampling ratio must lie in (0, 1)")
        if self.spo not in SPO_MODES:
            raise ValueError(f"spo must be one of {sorted(SPO_MODES)}")
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError("lr_schedule must be 'cosine' or 'constant'")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``: cosine decay from ``lr`` to ``lr * lr_final``."""
        if self.lr_schedule == "constant" or self.epochs <= 1:
            return self.lr
        frac = epoch / (self.epochs - 1)
        return self.lr * (self.lr_final + (1.0 - self.lr_final) * 0.5 * (1.0 + math.cos(math.pi * frac)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def admm_config(self, n_echoes: int) -> AdmmConfig:
        return AdmmConfig(n_echoes=n_echoes, unrolls=self.unrolls, width=self.width, width_mult=self.width_mult,
                          tff=self.tff, tff_hidden=self.tff_hidden, cg_iters=self.cg_iters,
                          share_weights=self.share_weights)


def full_scale_preset(**overrides) -> TrainConfig:
    """The full-scale recipe: K=10 unrolls, 100 epochs, 10 echoes, lr 1e-3."""
    base = dict(unrolls=10, epochs=100, lr=1e-3, echoes=10, tff=True, spo="multi", ratio=0.23)
    base.update(overrides)
    return TrainConfig(**base)


def _json_float(x: float):
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


@dataclass
class EvalReport:
    psnr: list[float]
    ssim: list[float]
    fingerprint: str = ""
    label: str = ""

    @property
    def psnr_mean(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def psnr_std(self) -> float:
        """Population std; identical values (including all-infinite) give 0, mixed inf/finite give nan."""
        values = np.asarray(self.psnr, dtype=np.float64)
        if values.size and np.all(values == values[0]):
            return 0.0
        with np.errstate(invalid="ignore"):
            return float(np.std(values))

    @property
    def ssim_mean(self) -> float:
        return float(np.mean(self.ssim))

    @property
    def ssim_std(self) -> float:
        return float(np.std(self.ssim))

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "fingerprint": self.fingerprint,
            "psnr": [_json_float(p) for p in self.psnr],
            "ssim": self.ssim,
            "psnr_mean": _json_float(self.psnr_mean),
            "psnr_std": _json_float(self.psnr_std) if np.isfinite(self.psnr_std) else "nan",
            "ssim_mean": self.ssim_mean,
            "ssim_std": self.ssim_std,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        return cls([float(p) for p in d["psnr"]], [float(s) for s in d["ssim"]], d.get("fingerprint", ""),
                   d.get("label", ""))


def evaluate_images(recons, labels, fingerprint: str = "", label: str = "") -> EvalReport:
    psnrs = [metrics.psnr_echo_combined(r, l) for r, l in zip(recons, labels)]
    ssims = [metrics.ssim_echo_combined(r, l) for r, l in zip(recons, labels)]
    return EvalReport(psnrs, ssims, fingerprint, label)


# -- model + pattern bundle ---------------------------------------------------------------

def build_pattern(cfg: TrainConfig, n_echoes: int, size: int) -> SamplingPattern:
    mode = SPO_MODES[cfg.spo]
    if mode == "manual":
        mask = manual_variable_density(size, cfg.ratio, cfg.vd_decay, seed=cfg.seed)
        return SamplingPattern("manual", n_echoes, size, cfg.ratio, masks=mask)
    return SamplingPattern(mode, n_echoes, size, cfg.ratio, cfg.slope, seed=cfg.seed)


@dataclass
class Checkpoint:
    config: TrainConfig
    model: AdmmModel
    pattern: SamplingPattern
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    optimizer: AdamState | None = None

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        if self.pattern.weights is not None:
            out["spo.weights"] = self.pattern.weights.data.copy()
        if self.pattern.frozen is not None:
            out["spo.masks"] = self.pattern.frozen.astype(np.uint8)
        if self.optimizer is not None and self.optimizer.m:
            for i, (m, v) in enumerate(zip(self.optimizer.m, self.optimizer.v)):
                out[f"adam.m.{i}"] = m
                out[f"adam.v.{i}"] = v
        return out

    def meta(self) -> dict:
        return {
            "kind": "checkpoint",
            "config": self.config.to_dict(),
            "admm": self.model.config.to_dict(),
            "pattern": {"mode": self.pattern.mode, "n_echoes": self.pattern.n_echoes, "size": self.pattern.size,
                        "target_ratio": self.pattern.target_ratio, "slope": self.pattern.slope},
            "epoch": self.epoch,
            "adam_step": self.optimizer.step if self.optimizer is not None else 0,
            "history": self.history,
        }

    def save(self, path) -> None:
        container.write_container(path, self.arrays(), self.meta())

    def to_bytes(self) -> bytes:
        return container.pack_container(self.arrays(), self.meta())

    @classmethod
    def load(cls, path) -> Checkpoint:
        arrays, meta = container.read_container(path)
        if meta.get("kind") != "checkpoint":
            raise ValueError(f"{path} is not a checkpoint container")
        cfg = TrainConfig.from_dict(meta["config"])
        model = AdmmModel(AdmmConfig(**meta["admm"]))
        model.load_state_dict({k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")})
        pm = meta["pattern"]
        if pm["mode"] == "manual":
            pattern = SamplingPattern("manual", pm["n_echoes"], pm["size"], pm["target_ratio"],
                                      masks=arrays["spo.masks"].astype(np.float32))
        else:
            pattern = SamplingPattern(pm["mode"], pm["n_echoes"], pm["size"], pm["target_ratio"], pm["slope"],
                                      weights=arrays["spo.weights"])
            if "spo.masks" in arrays:
                pattern.frozen = arrays["spo.masks"].astype(np.float32)
        opt = None
        if meta.get("adam_step"):
            n = len([k for k in arrays if k.startswith("adam.m.")])
            opt = AdamState(int(meta["adam_step"]), [arrays[f"adam.m.{i}"] for i in range(n)],
                            [arrays[f"adam.v.{i}"] for i in range(n)])
        return cls(cfg, model, pattern, int(meta.get("epoch", 0)), list(meta.get("history", [])), opt)


# -- reconstruction --------------------------------------------------------------------

def reconstruct(model: AdmmModel, kfull: ComplexTensor | None, coils: ComplexTensor, masks,
                data: KSpaceData | None = None) -> np.ndarray:
    """Final ADMM iterate (no graph) from fully sampled k-space + masks, or from measured data."""
    with T.no_grad():
        if data is None:
            data = forward.undersample(kfull, masks)
        iterates = admm_forward(data, coils, model)
        out = iterates[-1] if iterates else forward.zero_filled(data, coils)
        return out.numpy()


def zero_fill_images(ds: Dataset, indices, masks) -> list[np.ndarray]:
    coils = ds.coil_tensor()
    with T.no_grad():
        return [forward.zero_filled(forward.undersample(ds.full_kspace(i), masks), coils).numpy() for i in indices]


def eval_masks(pattern: SamplingPattern, seed: int) -> np.ndarray:
    """Masks used for validation: frozen/manual masks, else one fixed draw."""
    if pattern.frozen is not None:
        return pattern.frozen
    with T.no_grad():
        return np.array(pattern.draw(seed).data)


def evaluate_model(model: AdmmModel, ds: Dataset, indices, masks, fingerprint: str = "",
                   label: str = "") -> EvalReport:
    coils = ds.coil_tensor()
    recons = [reconstruct(model, ds.full_kspace(i), coils, masks) for i in indices]
    return evaluate_images(recons, [ds.labels[i] for i in indices], fingerprint, label)


# -- training ------------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    report: EvalReport
    zero_fill: EvalReport
    curve: list[dict]

    def curve_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "loss", "val_psnr", "val_ssim"])
        for row in self.curve:
            writer.writerow([row["epoch"], repr(row["loss"]), repr(row["val_psnr"]), repr(row["val_ssim"])])
        return buf.getvalue()


def _load_data(cfg: TrainConfig) -> Dataset:
    if cfg.data is not None:
        return load_dataset(cfg.data)
    return make_dataset(cfg.n_slices, cfg.size, cfg.echoes, cfg.coils, cfg.noise_sigma, cfg.data_seed)


def train(cfg: TrainConfig, dataset: Dataset | None = None, resume: Checkpoint | None = None,
          checkpoint_path=None) -> TrainResult:
    """Train one stage.

    ``joint``: SPO weights (if any) and network weights are updated together,
    with a fresh mask draw per step.  ``frozen-mask``: the pattern is frozen
    to one draw and only the network is updated.
    """
    ds = dataset if dataset is not None else _load_data(cfg)
    train_idx, val_idx, _ = split_indices(len(ds), cfg.split, cfg.data_seed)
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise ValueError("split leaves no training or validation slices")

    if resume is not None:
        model, pattern = resume.model, resume.pattern
        same_stage = resume.config.stage == cfg.stage
        start_epoch = resume.epoch if same_stage else 0
        history = list(resume.history)
        opt_state = resume.optimizer if same_stage else None
    else:
        model = AdmmModel(cfg.admm_config(ds.n_echoes), seed=cfg.seed)
        pattern = build_pattern(cfg, ds.n_echoes, ds.size)
        start_epoch, history, opt_state = 0, [], None

    joint = cfg.stage == "joint" and pattern.learnable
    if cfg.stage == "frozen-mask" and pattern.learnable and (resume is None or resume.config.stage != cfg.stage):
        freeze_pattern(pattern, cfg.seed + 1)
    params = model.parameters() + ([pattern.weights] if joint else [])
    opt = Adam(params, lr=cfg.lr)
    if opt_state is not None and opt_state.m and len(opt_state.m) == len(params):
        opt.state = opt_state

    coils = ds.coil_tensor()
    labels = {i: ds.label(i) for i in train_idx}
    fulls = {i: ds.full_kspace(i) for i in train_idx}
    val_mask_seed = cfg.seed + 10_000
    ckpt = Checkpoint(cfg, model, pattern, start_epoch, history, opt.state)
    for epoch in range(start_epoch, cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(train_idx)
        losses = []
        for i in order:
            masks = pattern.sample(rng) if joint else Tensor(pattern.frozen)
            data = forward.undersample(fulls[i], masks)
            iterates = admm_forward(data, coils, model)
            loss = metrics.training_loss(iterates, labels[i])
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, slice {int(i)}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(value)
        report = evaluate_model(model, ds, val_idx, eval_masks(pattern, val_mask_seed))
        row = {"epoch": epoch + 1, "loss": float(np.mean(losses)), "val_psnr": report.psnr_mean,
               "val_ssim": report.ssim_mean}
        history.append(row)
        log.info("epoch %d loss %.4f val psnr %.2f ssim %.4f", epoch + 1, row["loss"], row["val_psnr"],
                 row["val_ssim"])
        ckpt.epoch = epoch + 1
        if checkpoint_path is not None:
            ckpt.save(checkpoint_path)

    masks = eval_masks(pattern, val_mask_seed)
    report = evaluate_model(model, ds, val_idx, masks, cfg.fingerprint(), label="val")
    zf = evaluate_images(zero_fill_images(ds, val_idx, masks), [ds.labels[i] for i in val_idx],
                         cfg.fingerprint(), label="zero-fill")
    if checkpoint_path is not None:
        ckpt.save(checkpoint_path)
    return TrainResult(ckpt, report, zf, history)


# -- ablation ------------------------------------------------------------------------------

ABLATION_ROWS = (
    ("Deep ADMM", dict(tff=False, spo="none")),
    ("Deep ADMM + single SPO", dict(tff=False, spo="single")),
    ("Deep ADMM + TFF", dict(tff=True, spo="none")),
    ("Deep ADMM + TFF + single SPO", dict(tff=True, spo="single")),
    ("Deep ADMM + TFF + multi SPO", dict(tff=True, spo="multi")),
)


def matched_width_mult(base: TrainConfig, n_echoes: int) -> float:
    """Width multiplier giving the plain denoiser at least the parameter count of the TFF variant."""
    tff_params = AdmmModel(AdmmConfig(n_echoes=n_echoes, unrolls=base.unrolls, width=base.width, tff=True,
                                      tff_hidden=base.tff_hidden)).n_parameters()
    mult = 1.0
    while AdmmModel(AdmmConfig(n_echoes=n_echoes, unrolls=base.unrolls, width=base.width,
                               width_mult=mult)).n_parameters() < tff_params:
        mult += 1.0 / base.width
    return mult


def train_two_stage(cfg: TrainConfig, ds: Dataset, joint_epochs: int, frozen_epochs: int) -> TrainResult:
    """Joint SPO + network training followed by frozen-mask fine-tuning; plain training without SPO."""
    if cfg.spo == "none":
        return train(_replace(cfg, epochs=joint_epochs + frozen_epochs, stage="joint"), ds)
    first = train(_replace(cfg, epochs=joint_epochs, stage="joint"), ds)
    return train(_replace(cfg, epochs=frozen_epochs, stage="frozen-mask"), ds, resume=first.checkpoint)


def _replace(cfg: TrainConfig, **changes) -> TrainConfig:
    d = cfg.to_dict()
    d.update(changes)
    return TrainConfig.from_dict(d)


@dataclass
class AblationRow:
    name: str
    psnr_per_seed: list[float]
    ssim_per_seed: list[float]
    field_residual_per_seed: list[float] = field(default_factory=list)

    @property
    def psnr(self) -> float:
        return float(np.mean(self.psnr_per_seed))

    @property
    def ssim(self) -> float:
        return float(np.mean(self.ssim_per_seed))

    @property
    def field_residual(self) -> float:
        return float(np.mean(self.field_residual_per_seed)) if self.field_residual_per_seed else math.nan

    def to_dict(self) -> dict:
        return {"name": self.name, "psnr_mean": self.psnr, "psnr_std": float(np.std(self.psnr_per_seed)),
                "ssim_mean": self.ssim, "ssim_std": float(np.std(self.ssim_per_seed)),
                "field_residual_median": _json_float(self.field_residual),
                "psnr_per_seed": self.psnr_per_seed, "ssim_per_seed": self.ssim_per_seed,
                "field_residual_per_seed": self.field_residual_per_seed}


def median_field_residual(ckpt: Checkpoint, ds: Dataset, indices) -> float:
    """Median per-voxel LM residual of field fits to the model's reconstructions."""
    coils = ds.coil_tensor()
    masks = eval_masks(ckpt.pattern, ckpt.config.seed + 10_000)
    residuals = []
    for i in indices:
        fit = qsm.fit_field_lm(reconstruct(ckpt.model, ds.full_kspace(i), coils, masks), ds.echo_times)
        residuals.append(fit.residual[fit.fitted])
    return float(np.median(np.concatenate(residuals)))


def rank_correlation(rows: list[AblationRow]) -> float:
    """Spearman correlation between row PSNR and negated median field residual."""
    rho = stats.spearmanr([r.psnr for r in rows], [-r.field_residual for r in rows]).statistic
    return float(rho)


def run_ablation(base: TrainConfig, ds: Dataset, seeds=(0, 1, 2), joint_epochs: int | None = None,
                 frozen_epochs: int | None = None) -> list[AblationRow]:
    """Train the five ablation configurations for each seed; mean validation metrics per row.

    Each row also records the median field-fit residual on the test slices
    (validation slices when the split has no test set).
    """
    if joint_epochs is None:
        joint_epochs = base.epochs // 2
    if frozen_epochs is None:
        frozen_epochs = base.epochs - joint_epochs
    width_mult = matched_width_mult(base, ds.n_echoes)
    _, val_idx, test_idx = split_indices(len(ds), base.split, base.data_seed)
    fit_idx = test_idx if len(test_idx) else val_idx
    rows = []
    for name, overrides in ABLATION_ROWS:
        psnrs, ssims, residuals = [], [], []
        for seed in seeds:
            cfg = _replace(base, seed=seed, width_mult=1.0 if overrides["tff"] else width_mult, **overrides)
            result = train_two_stage(cfg, ds, joint_epochs, frozen_epochs)
            psnrs.append(result.report.psnr_mean)
            ssims.append(result.report.ssim_mean)
            residuals.append(median_field_residual(result.checkpoint, ds, fit_idx))
            log.info("%s seed %d: psnr %.2f ssim %.4f field residual %.4g", name, seed, psnrs[-1], ssims[-1],
                     residuals[-1])
        rows.append(AblationRow(name, psnrs, ssims, residuals))
    return rows


def ablation_markdown(rows: list[AblationRow]) -> str:
    lines = ["| Configuration | PSNR (dB) | SSIM | Field residual |", "|---|---|---|---|"]
    for r in rows:
        d = r.to_dict()
        lines.append(f"| {r.name} | {d['psnr_mean']:.2f} ± {d['psnr_std']:.2f} | "
                     f"{d['ssim_mean']:.4f} ± {d['ssim_std']:.4f} | {r.field_residual:.4g} |")
    return "\n".join(lines) + "\n"
