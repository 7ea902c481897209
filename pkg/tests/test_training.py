import math

import numpy as np
import pytest

from megre import training
from megre.training import Checkpoint, EvalReport, TrainConfig

TINY = dict(unrolls=1, epochs=2, width=4, n_slices=5, size=16, echoes=4, coils=2, cg_iters=3,
            split=(0.6, 0.2, 0.2))


@pytest.fixture(scope="module")
def tiny_ds():
    return training.make_dataset(5, size=16, n_echoes=4, n_coils=2, seed=1)


def test_dataset_is_deterministic_and_round_trips(tmp_path, tiny_ds):
    again = training.make_dataset(5, size=16, n_echoes=4, n_coils=2, seed=1)
    np.testing.assert_array_equal(tiny_ds.kspace, again.kspace)
    training.save_dataset(tiny_ds, tmp_path)
    loaded = training.load_dataset(tmp_path)
    for name in ("kspace", "labels", "truth", "params", "coils", "echo_times"):
        np.testing.assert_array_equal(getattr(loaded, name), getattr(tiny_ds, name).astype(getattr(loaded, name).dtype))


def test_split_covers_all_slices_once():
    tr, va, te = training.split_indices(80, (0.6, 0.2, 0.2), seed=3)
    assert (len(tr), len(va), len(te)) == (48, 16, 16)
    assert sorted(np.concatenate([tr, va, te]).tolist()) == list(range(80))


def test_config_validation_and_fingerprint():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(unrolls=0)
    with pytest.raises(ValueError):
        TrainConfig(ratio=1.0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochs": 1, "bogus": 2})
    a, b = TrainConfig(seed=1), TrainConfig(seed=1)
    assert a.fingerprint() == b.fingerprint() != TrainConfig(seed=2).fingerprint()
    assert TrainConfig.from_dict(a.to_dict()) == a


def test_full_scale_preset_recipe():
    cfg = training.full_scale_preset()
    assert (cfg.unrolls, cfg.epochs, cfg.lr) == (10, 100, 1e-3)


def test_report_statistics_recompute_from_per_slice_values():
    r = EvalReport([20.0, 22.0, 27.0], [0.8, 0.9, 0.7])
    d = r.to_dict()
    assert d["psnr_mean"] == float(np.mean(d["psnr"])) and d["psnr_std"] == float(np.std(d["psnr"]))
    assert d["ssim_mean"] == float(np.mean(d["ssim"])) and d["ssim_std"] == float(np.std(d["ssim"]))
    back = EvalReport.from_dict(d)
    assert back.psnr == r.psnr and back.ssim == r.ssim


def test_report_inf_sentinel():
    d = EvalReport([math.inf], [1.0]).to_dict()
    assert d["psnr"] == ["inf"] and d["psnr_mean"] == "inf" and d["psnr_std"] == 0.0


def test_train_is_deterministic(tiny_ds, tmp_path):
    cfg = TrainConfig(**TINY, spo="multi", tff=True)
    a = training.train(cfg, tiny_ds, checkpoint_path=tmp_path / "a.met")
    b = training.train(cfg, tiny_ds, checkpoint_path=tmp_path / "b.met")
    assert (tmp_path / "a.met").read_bytes() == (tmp_path / "b.met").read_bytes()
    assert a.report.to_json() == b.report.to_json()
    assert a.curve_csv() == b.curve_csv()
    assert a.curve_csv().splitlines()[0] == "epoch,loss,val_psnr,val_ssim"


def test_joint_stage_updates_spo_weights_and_frozen_stage_does_not(tiny_ds):
    cfg = TrainConfig(**TINY, spo="multi")
    pattern = training.build_pattern(cfg, tiny_ds.n_echoes, tiny_ds.size)
    initial = pattern.weights.data.copy()
    joint = training.train(cfg, tiny_ds)
    after_joint = joint.checkpoint.pattern.weights.data.copy()
    assert not np.array_equal(initial, after_joint)
    frozen = training.train(training._replace(cfg, stage="frozen-mask"), tiny_ds, resume=joint.checkpoint)
    assert np.array_equal(frozen.checkpoint.pattern.weights.data, after_joint)
    assert frozen.checkpoint.pattern.frozen is not None


def test_checkpoint_round_trip(tiny_ds, tmp_path):
    cfg = TrainConfig(**TINY, spo="single", tff=True)
    result = training.train(cfg, tiny_ds)
    path = tmp_path / "c.met"
    result.checkpoint.save(path)
    loaded = Checkpoint.load(path)
    assert loaded.to_bytes() == path.read_bytes()
    assert loaded.config == cfg and loaded.epoch == cfg.epochs


def test_resume_continues_from_saved_epoch(tiny_ds, tmp_path):
    cfg = TrainConfig(**{**TINY, "epochs": 3})
    full = training.train(cfg, tiny_ds)
    partial = training.train(training._replace(cfg, epochs=1), tiny_ds, checkpoint_path=tmp_path / "p.met")
    assert partial.checkpoint.epoch == 1
    resumed = training.train(cfg, tiny_ds, resume=Checkpoint.load(tmp_path / "p.met"))
    assert [r["epoch"] for r in resumed.curve] == [1, 2, 3]
    assert resumed.report.psnr == full.report.psnr


def test_nan_loss_aborts(tiny_ds):
    bad = training.Dataset(**{**tiny_ds.__dict__, "kspace": tiny_ds.kspace * np.nan})
    with pytest.raises(training.TrainingError):
        training.train(TrainConfig(**TINY), bad)


def test_matched_width_gives_plain_model_at_least_tff_capacity():
    from megre.admm import AdmmConfig, AdmmModel

    base = TrainConfig(width=8)
    mult = training.matched_width_mult(base, 4)
    plain = AdmmModel(AdmmConfig(n_echoes=4, width=8, width_mult=mult)).n_parameters()
    tff = AdmmModel(AdmmConfig(n_echoes=4, width=8, tff=True)).n_parameters()
    assert plain >= tff


def test_ablation_emits_five_named_rows(tiny_ds):
    base = TrainConfig(**{**TINY, "epochs": 2})
    rows = training.run_ablation(base, tiny_ds, seeds=(0,))
    assert [r.name for r in rows] == [name for name, _ in training.ABLATION_ROWS]
    table = training.ablation_markdown(rows)
    assert len([line for line in table.splitlines() if line.startswith("| Deep ADMM")]) == 5
    assert all(np.isfinite(r.field_residual) for r in rows)
