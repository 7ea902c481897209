"""Command-line entry point: ``megre <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error (a one-line JSON
object on stderr with ``error``, ``message`` and ``command``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import container, forward, qsm, sampling, training
from . import tensor as T
from .cplx import ComplexTensor
from .forward import KSpaceData
from .tensor import Tensor

log = logging.getLogger("megre")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- helpers -------------------------------------------------------------------------------

def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _write_json(path, obj) -> None:
    container.atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


def _read_images(path) -> np.ndarray:
    """(slice, echo, y, x) complex images from an image container or a dataset."""
    arrays, _ = container.read_container(path)
    for key in ("images", "labels"):
        if key in arrays:
            images = arrays[key]
            break
    else:
        raise ValueError(f"{path} holds neither 'images' nor 'labels'")
    return images[None] if images.ndim == 3 else images


def _pattern_arrays(pattern: sampling.SamplingPattern, seed: int) -> dict[str, np.ndarray]:
    with T.no_grad():
        probs = np.array(pattern.probabilities().data)
    masks = training.eval_masks(pattern, seed)
    out = {"masks": masks.astype(np.uint8), "probabilities": probs}
    if pattern.weights is not None:
        out["weights"] = pattern.weights.data.copy()
    return out


def _pattern_previews(out: Path, arrays: dict[str, np.ndarray]) -> list[Path]:
    """One PGM per echo for masks and probabilities, DC moved to the image centre."""
    written = []
    for key, vmax in (("masks", 1.0), ("probabilities", 1.0)):
        for j, img in enumerate(arrays[key]):
            path = _sibling(out, f"_{key}_e{j}.pgm")
            container.write_pgm(path, np.fft.fftshift(img.astype(np.float64)), vmin=0.0, vmax=vmax)
            written.append(path)
    return written


# -- subcommands ------------------------------------------------------------------------------

def cmd_gen_phantom(args) -> None:
    ds = training.make_dataset(args.n, args.size, args.echoes, args.coils, args.noise, args.seed, args.kind)
    path = training.save_dataset(ds, args.out)
    log.info("wrote %d slices to %s", len(ds), path)


def cmd_make_pattern(args) -> None:
    if args.mode == "vd":
        mask = sampling.manual_variable_density(args.size, args.ratio, args.decay, args.acs, args.seed)
        pattern = sampling.SamplingPattern("manual", args.echoes, args.size, args.ratio, masks=mask)
    else:
        pattern = sampling.SamplingPattern("spo-multi", args.echoes, args.size, args.ratio, args.slope,
                                           seed=args.seed)
    arrays = _pattern_arrays(pattern, args.seed)
    meta = {"kind": "pattern", "mode": args.mode, "ratio": args.ratio, "seed": args.seed,
            "sampled_fraction": float(arrays["masks"].mean())}
    axes = {k: ["echo", "ky", "kx"] for k in arrays}
    container.write_container(args.out, arrays, meta, axes)


def cmd_train(args) -> None:
    cfg_dict = json.loads(Path(args.config).read_text())
    if args.stage is not None:
        cfg_dict["stage"] = args.stage
    if args.data is not None:
        cfg_dict["data"] = args.data
    cfg = training.TrainConfig.from_dict(cfg_dict)
    resume = training.Checkpoint.load(args.resume) if args.resume else None
    out = Path(args.out)
    result = training.train(cfg, resume=resume, checkpoint_path=out)
    report = result.report.to_dict()
    report["zero_fill"] = result.zero_fill.to_dict()
    _write_json(args.report or _sibling(out, ".report.json"), report)
    container.atomic_write_bytes(args.curve or _sibling(out, ".curve.csv"), result.curve_csv().encode("utf-8"))


def _load_kspace(path, ckpt: training.Checkpoint) -> tuple[list[KSpaceData], ComplexTensor]:
    arrays, _ = container.read_container(path)
    if "kspace" not in arrays or "coils" not in arrays:
        raise ValueError(f"{path} must hold 'kspace' and 'coils' arrays")
    kspace = arrays["kspace"]
    kspace = kspace[None] if kspace.ndim == 4 else kspace
    coils = ComplexTensor.from_numpy(arrays["coils"])
    if "masks" in arrays:
        masks = Tensor(arrays["masks"].astype(np.float32))
        data = [KSpaceData(ComplexTensor.from_numpy(k), masks) for k in kspace]
    else:
        masks = Tensor(training.eval_masks(ckpt.pattern, ckpt.config.seed + 10_000))
        data = [forward.undersample(ComplexTensor.from_numpy(k), masks) for k in kspace]
    return data, coils


def cmd_recon(args) -> None:
    ckpt = training.Checkpoint.load(args.ckpt)
    data, coils = _load_kspace(args.input, ckpt)
    images = np.stack([training.reconstruct(ckpt.model, None, coils, None, data=d) for d in data])
    meta = {"kind": "images", "fingerprint": ckpt.config.fingerprint()}
    container.write_container(args.out, {"images": images}, meta)


def cmd_eval(args) -> None:
    recon, ref = _read_images(args.recon), _read_images(args.ref)
    if recon.shape != ref.shape:
        raise ValueError(f"recon {recon.shape} and reference {ref.shape} differ in shape")
    _, meta = container.read_container(args.recon)
    report = training.evaluate_images(recon, ref, meta.get("fingerprint", ""), label="eval")
    _write_json(args.out, report.to_dict())


def cmd_qsm(args) -> None:
    if len(args.tes) != 2:
        raise ValueError("--tes expects 't1,delta'")
    images = _read_images(args.recon)
    n_echoes = images.shape[1]
    echo_times = args.tes[0] + args.tes[1] * np.arange(n_echoes)
    keys = ("field", "m0", "r2star", "phi0", "residual")
    maps = {k: [] for k in (*keys, "converged", "fitted", "chi")}
    for img in images:
        fit = qsm.fit_field_lm(img, echo_times, max_iters=args.max_iters)
        for k in keys:
            maps[k].append(getattr(fit, k).astype(np.float32))
        maps["converged"].append(fit.converged.astype(np.uint8))
        maps["fitted"].append(fit.fitted.astype(np.uint8))
        maps["chi"].append(qsm.dipole_invert(fit.field, reg_weight=args.reg, field_scale=args.field_scale).chi)
    arrays = {k: np.stack(v) for k, v in maps.items()}
    meta = {"kind": "qsm", "echo_times": [float(t) for t in echo_times], "reg_weight": args.reg,
            "field_scale": args.field_scale}
    container.write_container(args.out, arrays, meta)
    if args.pgm:
        out = Path(args.out)
        for k in ("field", "chi"):
            for i, img in enumerate(arrays[k]):
                container.write_pgm(_sibling(out, f"_{k}_s{i}.pgm"), img)


def cmd_export_pattern(args) -> None:
    ckpt = training.Checkpoint.load(args.ckpt)
    arrays = _pattern_arrays(ckpt.pattern, ckpt.config.seed + 10_000)
    meta = {"kind": "pattern", "mode": ckpt.pattern.mode, "ratio": ckpt.pattern.target_ratio,
            "sampled_fraction": float(arrays["masks"].mean())}
    container.write_container(args.out, arrays, meta, {k: ["echo", "ky", "kx"] for k in arrays})
    if not args.no_pgm:
        _pattern_previews(Path(args.out), arrays)


def cmd_ablation(args) -> None:
    base = training.TrainConfig.from_dict(json.loads(Path(args.config).read_text())) if args.config \
        else training.TrainConfig()
    ds = training.load_dataset(args.data)
    rows = training.run_ablation(base, ds, args.seeds, args.joint_epochs, args.frozen_epochs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    container.atomic_write_bytes(out / "ablation.md", training.ablation_markdown(rows).encode("utf-8"))
    _write_json(out / "ablation.json", {"base_config": base.to_dict(), "seeds": list(args.seeds),
                                        "rows": [r.to_dict() for r in rows],
                                        "rank_correlation": training.rank_correlation(rows)})


# -- parser -------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="megre", description="Multi-echo GRE simulation, deep ADMM reconstruction and QSM.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-phantom", help="simulate a seeded multi-echo dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=80)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--echoes", type=int, default=4)
    g.add_argument("--coils", type=int, default=4)
    g.add_argument("--noise", type=float, default=0.01)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--kind", default="mixed", choices=("mixed", "shepp-logan-like", "random-smooth"))
    g.set_defaults(func=cmd_gen_phantom)

    m = sub.add_parser("make-pattern", help="variable-density masks or an initial learnable pattern")
    m.add_argument("--mode", required=True, choices=("vd", "learned-init"))
    m.add_argument("--ratio", type=float, default=sampling.DEFAULT_RATIO)
    m.add_argument("--size", type=int, default=32)
    m.add_argument("--echoes", type=int, default=4)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--decay", type=float, default=2.0, help="variable-density decay power")
    m.add_argument("--acs", type=int, default=0, help="fully sampled central block width")
    m.add_argument("--slope", type=float, default=sampling.DEFAULT_SLOPE)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_make_pattern)

    t = sub.add_parser("train", help="train one stage from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--stage", choices=training.STAGES)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--data", help="dataset directory (overrides the config)")
    t.add_argument("--report", help="report JSON path (default: next to the checkpoint)")
    t.add_argument("--curve", help="training curve CSV path (default: next to the checkpoint)")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("recon", help="reconstruct k-space with a trained checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--input", required=True, help="container with 'kspace', 'coils' and optionally 'masks'")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_recon)

    e = sub.add_parser("eval", help="PSNR/SSIM report of reconstructions against references")
    e.add_argument("--recon", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("qsm", help="field fit and dipole inversion of reconstructed images")
    q.add_argument("--recon", required=True)
    q.add_argument("--tes", required=True, type=_float_list, help="first echo time and spacing, 't1,delta' (ms)")
    q.add_argument("--out", required=True)
    q.add_argument("--reg", type=float, default=1e-2)
    q.add_argument("--field-scale", type=float, default=1.0)
    q.add_argument("--max-iters", type=int, default=100)
    q.add_argument("--pgm", action="store_true", help="also write field and susceptibility previews")
    q.set_defaults(func=cmd_qsm)

    x = sub.add_parser("export-pattern", help="masks and probability maps of a checkpoint")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--no-pgm", action="store_true")
    x.set_defaults(func=cmd_export_pattern)

    a = sub.add_parser("ablation", help="train the five ablation configurations")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--config", help="base TrainConfig JSON")
    a.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    a.add_argument("--joint-epochs", type=int)
    a.add_argument("--frozen-epochs", type=int)
    a.set_defaults(func=cmd_ablation)
    return p


def _thread_limit() -> int | None:
    raw = os.environ.get("MEGRE_THREADS", "0").strip() or "0"
    n = int(raw)
    if n < 0:
        raise UsageError(f"MEGRE_THREADS must be >= 0, got {n}")
    return n or None


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        threads = _thread_limit()
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"megre: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=threads):
            args.func(args)
    except Exception as exc:
        payload = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
