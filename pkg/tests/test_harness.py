import json
import math

import numpy as np
import pytest

from semismd import io
from semismd import losses as L
from semismd.diffcore import Tensor
from semismd.errors import ConfigError
from semismd.harness import cli
from semismd.harness import train as T
from semismd.harness.config import (ABLATIONS, ExperimentConfig, ablation, from_dict, load_config,
                                    save_config)
from semismd.harness.data import load_dataset, regenerate, synth
from semismd.harness.optim import learning_rate
from semismd.harness.visual import ERROR_SCALE_MAX, error_colors
from semismd.synthrig import default_rig

TINY = dict(height=16, width=24, levels=3, steps=3, train_sets=2, val_sets=1, val_seed=500)


def tiny(**kw) -> ExperimentConfig:
    return ExperimentConfig(**{**TINY, **kw})


# -- configuration ------------------------------------------------------------------

def test_config_rejects_unknown_key():
    with pytest.raises(ConfigError, match="stst_spacial"):
        from_dict({"stst_spacial": False})


def test_config_file_round_trip(tmp_path):
    cfg = tiny(lambda_rep=2.5, loss_seg=False)
    save_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg
    assert load_config(tmp_path / "c.json").digest() == cfg.digest()


def test_config_rejects_nested_and_bad_types(tmp_path):
    (tmp_path / "n.json").write_text(json.dumps({"height": {"a": 1}}))
    with pytest.raises(ConfigError):
        load_config(tmp_path / "n.json")
    with pytest.raises(ConfigError):
        from_dict({"loss_d": "maybe"})
    with pytest.raises(ConfigError):
        from_dict({"steps": 1.5})
    assert from_dict({"steps": "7", "loss_d": "false"}).steps == 7


def test_config_invariants():
    with pytest.raises(ConfigError):
        tiny(loss_d=False, loss_curv=False, loss_rep=False, loss_seg=False)
    with pytest.raises(ConfigError):
        tiny(height=20)
    with pytest.raises(ConfigError):
        tiny(loss_levels=4)


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.weights == (0.5, 0.5, 3.0, 3.0)
    assert cfg.lambda_l1 == 0.2 and cfg.loss_levels == 3 and cfg.curvature_steps == 3


def test_ablation_rows():
    base = ExperimentConfig()
    one = ablation(base, "row1")
    assert not (one.stst_spatial or one.stst_temporal or one.semantic_adapter
                or one.depth_enhanced_pose)
    two = ablation(base, "row2")
    assert two.stst_spatial and two.stst_temporal and not two.semantic_adapter
    three = ablation(base, "row3")
    assert three.semantic_adapter and not three.depth_enhanced_pose
    assert ablation(base, "row4") == base
    assert not ablation(base, "row5").loss_d and ablation(base, "row5").loss_curv
    assert ablation(base, "row6").loss_d and not ablation(base, "row6").loss_curv
    assert ablation(base, "row7") == base
    with pytest.raises(ConfigError):
        ablation(base, "row9")
    assert set(ABLATIONS) >= {f"row{i}" for i in range(1, 8)}


def test_learning_rate_schedule():
    total, base = 200, 1e-3
    lrs = [learning_rate(s, total, base) for s in range(total)]
    warm = 10
    assert np.all(np.diff(lrs[:warm]) > 0) and math.isclose(lrs[warm - 1], base)
    assert np.all(np.diff(lrs[warm:]) <= 0)
    assert lrs[-1] < 1e-3 * base


# -- training -----------------------------------------------------------------------

def test_zero_steps_writes_initial_checkpoint(tmp_path):
    res = T.train(tiny(steps=0), tmp_path)
    assert res.report.history == []
    assert (tmp_path / "checkpoint_000000.ckpt").exists()
    assert (tmp_path / "final.ckpt").read_bytes() != b""
    assert json.loads((tmp_path / "report.json").read_text())["history"] == []


def test_rep_only_row_runs():
    res = T.train(ablation(tiny(), "rep_only"))
    assert len(res.report.history) == 3
    assert all(h["l_d"] is None and h["l_rep"] is not None for h in res.report.history)


def test_training_is_bit_reproducible(tmp_path):
    a = T.train(tiny(checkpoint_every=2), tmp_path / "a")
    b = T.train(tiny(checkpoint_every=2), tmp_path / "b")
    for name in ("checkpoint_000002.ckpt", "final.ckpt", "report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert a.report.average == b.report.average


def test_checkpoint_reload_evaluates_identically(tmp_path):
    res = T.train(tiny(), tmp_path)
    val = T.generate([500], res.pipeline.rig, res.pipeline.cfg)
    _, avg_mem, pred_mem = T.evaluate(res.pipeline, val)
    pipe = T.load_pipeline(res.checkpoint)
    _, avg_disk, pred_disk = T.evaluate(pipe, val)
    np.testing.assert_array_equal(pred_mem, pred_disk)
    assert avg_mem == avg_disk


def test_non_finite_loss_aborts_with_step(monkeypatch):
    monkeypatch.setattr(T.L, "sparse_depth_loss", lambda *a, **k: Tensor(np.nan))
    with pytest.raises(T.TrainingDiverged) as info:
        T.train(tiny())
    assert info.value.step == 0 and "l_d" in str(info.value)


# -- evaluation ---------------------------------------------------------------------

def test_ground_truth_predictions_are_perfect(frameset):
    gt = frameset.gt_depth[None]
    rows, avg = T.camera_metrics(gt, gt, 1.0, 40.0)
    assert len(rows) == frameset.gt_depth.shape[1]
    for r in rows + [avg]:
        assert r["abs_rel"] == 0.0 and r["a1"] == 1.0


def test_camera_metrics_pool_over_sets(rng, frameset):
    gt = np.stack([frameset.gt_depth] * 2)
    pred = np.where(np.isfinite(gt), gt, 10.0) * rng.uniform(0.8, 1.25, gt.shape)
    rows, avg = T.camera_metrics(pred, gt, 1.0, 40.0)
    for n, row in enumerate(rows):
        ref = L.metrics(pred[:, :, n], gt[:, :, n], 1.0, 40.0)
        for k in L.METRIC_NAMES:
            assert abs(row[k] - ref[k]) <= 1e-6
    assert abs(avg["abs_rel"] - np.mean([r["abs_rel"] for r in rows])) <= 1e-12


def test_report_table_has_camera_rows_plus_average():
    rows = [{k: 0.1 * i for k in L.METRIC_NAMES} for i in range(4)]
    avg = {k: 0.15 for k in L.METRIC_NAMES}
    lines = T.RunReport({}, "x", per_camera=rows, average=avg).table().splitlines()
    assert len(lines) == 1 + 4 + 1 and lines[-1].startswith("avg")


def test_error_colors_clamp():
    gt = np.array([[10.0, 10.0, np.inf]])
    pred = np.array([[10.0, 10.0 * (1 + 2 * ERROR_SCALE_MAX), 5.0]])
    rgb = error_colors(pred, gt, 1.0, 40.0)
    np.testing.assert_array_equal(rgb[:, 0, 0], [0, 1, 0])
    np.testing.assert_array_equal(rgb[:, 0, 1], [1, 0, 0])
    np.testing.assert_array_equal(rgb[:, 0, 2], [0, 0, 0])


# -- datasets -----------------------------------------------------------------------

def test_synth_single_and_regenerate(tmp_path):
    rig = default_rig(16, 24)
    synth(tmp_path / "a", [3], rig)
    folders = [p for p in (tmp_path / "a").iterdir() if p.is_dir()]
    assert len(folders) == 1
    fs = load_dataset(tmp_path / "a")[0]
    assert fs.images.shape == (2, 4, 3, 16, 24)
    assert fs.images.min() >= 0.0 and fs.images.max() <= 1.0
    regenerate(tmp_path / "a" / "manifest.json", tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


# -- command line -------------------------------------------------------------------

def test_cli_usage_errors(capsys):
    assert cli.main([]) == cli.EXIT_USAGE
    assert cli.main(["gradcheck"]) == cli.EXIT_USAGE
    assert cli.main(["gradcheck", "--scope", "bogus"]) == cli.EXIT_USAGE
    assert cli.main(["train", "--no-such-flag", "1"]) == cli.EXIT_USAGE
    assert cli.main(["train", "--height", "20", "--steps", "0"]) == cli.EXIT_USAGE
    assert cli.main(["synth", "--count", "0"]) == cli.EXIT_USAGE


def test_cli_gradcheck_primitive(capsys):
    assert cli.main(["gradcheck", "--scope", "primitive"]) == cli.EXIT_OK
    assert "checks passed" in capsys.readouterr().out


def test_cli_numerical_failure_exit_code(monkeypatch, tmp_path):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path))
    monkeypatch.setattr(T.L, "sparse_depth_loss", lambda *a, **k: Tensor(np.inf))
    args = ["train", "--height", "16", "--width", "24", "--levels", "3", "--steps", "2",
            "--train-sets", "1", "--val-sets", "0"]
    assert cli.main(args) == cli.EXIT_NUMERIC


def test_cli_end_to_end(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path))
    assert cli.main(["synth", "--seed", "5", "--count", "2", "--height", "16", "--width", "24",
                     "--out", "data"]) == 0
    assert (tmp_path / "data" / "manifest.json").exists()
    assert cli.main(["train", "--height", "16", "--width", "24", "--levels", "3", "--steps", "2",
                     "--val-sets", "1", "--val-seed", "9", "--data", str(tmp_path / "data"),
                     "--ablation", "row3", "--out", "run"]) == 0
    ckpt = tmp_path / "run" / "final.ckpt"
    assert ckpt.exists()
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(tmp_path / "data"),
                     "--out", "ev"]) == 0
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert len(report["per_camera"]) == 4
    assert any(p.suffix == ".ppm" for p in (tmp_path / "ev" / "images").iterdir())
    assert cli.main(["infer", "--checkpoint", str(ckpt), "--frameset",
                     str(tmp_path / "data" / "fs_000005"), "--out", "inf"]) == 0
    depth = io.read_depth(tmp_path / "inf" / "depth_g1_c2.bin")
    assert depth.shape == (16, 24) and depth.min() >= 1.0 and depth.max() <= 40.0
    assert len(json.loads((tmp_path / "inf" / "pose.json").read_text())["pose6"]) == 6


def test_cli_eval_rejects_mismatched_data(monkeypatch, tmp_path):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path))
    T.train(tiny(steps=0), tmp_path / "run")
    synth(tmp_path / "big", [1], default_rig(32, 48))
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "run" / "final.ckpt"),
                     "--data", str(tmp_path / "big")]) == cli.EXIT_USAGE
