import copy
import json

import numpy as np
import pytest

from sparsejepa import checkpoint as ckpt
from sparsejepa import train
from sparsejepa.config import DatasetConfig, OptimizerConfig, RunConfig
from sparsejepa.data import DatasetHandle
from sparsejepa.jepa import MaskParams
from sparsejepa.sparsity import LossConfig
from sparsejepa.vit import ViTConfig


def tiny_cfg(steps=4, out_dir="runs/tiny", **over) -> RunConfig:
    kwargs = dict(
        vit=ViTConfig(image_size=8, patch_size=4, embed_dim=16, depth=1,
                      heads=2, mlp_ratio=2.0),
        mask=MaskParams(num_targets=1, target_scale=(0.2, 0.3),
                        target_aspect=(1.0, 1.0)),
        loss=LossConfig(latent_dim=8),
        optimizer=OptimizerConfig(lr=0.02, steps=steps, batch_size=8),
        dataset=DatasetConfig(name="synth-class", n=16),
        out_dir=out_dir,
    )
    kwargs.update(over)
    return RunConfig(**kwargs)


def tiny_handle(n=16, seed=0) -> DatasetHandle:
    rng = np.random.default_rng(seed)
    handle = DatasetHandle(source="test", images=rng.uniform(size=(n, 3, 8, 8)),
                           labels=rng.integers(0, 4, size=n))
    handle.compute_stats()
    return handle


class TestStep:
    def test_metrics_fields_and_finiteness(self):
        result = train.pretrain(tiny_cfg(), write_files=False, dataset=tiny_handle())
        assert [r["step"] for r in result.metrics] == [0, 1, 2, 3]
        for row in result.metrics:
            for key in ("jepa_loss", "group_recon", "kl", "penalty", "total"):
                assert np.isfinite(row[key])
            assert row["zero_columns"] >= 0

    def test_total_combines_components(self):
        cfg = tiny_cfg(steps=2)
        rows = train.pretrain(cfg, write_files=False, dataset=tiny_handle()).metrics
        for r in rows:
            expect = r["jepa_loss"] + r["group_recon"] \
                + cfg.loss.kl_weight * r["kl"] \
                + cfg.loss.group_lasso_weight * r["penalty"]
            assert r["total"] == pytest.approx(expect, rel=1e-12)

    def test_subgradient_mode_runs(self):
        cfg = tiny_cfg(steps=2, loss=LossConfig(latent_dim=8, proximal=False))
        rows = train.pretrain(cfg, write_files=False, dataset=tiny_handle()).metrics
        assert len(rows) == 2

    def test_numeric_abort_on_divergence(self):
        cfg = tiny_cfg(steps=20, optimizer=OptimizerConfig(lr=1e12, steps=20,
                                                           batch_size=8,
                                                           max_grad_norm=0.0))
        with np.errstate(over="ignore", invalid="ignore"), \
                pytest.raises(train.NumericAbort):
            train.pretrain(cfg, write_files=False, dataset=tiny_handle())


class TestDeterminism:
    def test_bitwise_repeatable(self):
        a = train.pretrain(tiny_cfg(), write_files=False, dataset=tiny_handle()).metrics
        b = train.pretrain(tiny_cfg(), write_files=False, dataset=tiny_handle()).metrics
        assert a == b

    def test_seed_changes_trajectory(self):
        a = train.pretrain(tiny_cfg(), write_files=False, dataset=tiny_handle()).metrics
        b = train.pretrain(tiny_cfg(seed=1), write_files=False,
                           dataset=tiny_handle()).metrics
        assert a != b

    def test_metrics_file_byte_identical(self, tmp_path):
        for sub in ("a", "b"):
            train.pretrain(tiny_cfg(out_dir=str(tmp_path / sub)),
                           dataset=tiny_handle())
        assert (tmp_path / "a" / "metrics.jsonl").read_bytes() \
            == (tmp_path / "b" / "metrics.jsonl").read_bytes()


class TestResume:
    def test_resume_matches_uninterrupted(self, tmp_path):
        # full run: 6 steps over a 2-step epoch (n=16, batch=8)
        full = train.pretrain(tiny_cfg(steps=6, out_dir=str(tmp_path / "full")),
                              dataset=tiny_handle())
        # interrupted run: stop after 4 steps, then resume to 6
        part_cfg = tiny_cfg(steps=6, out_dir=str(tmp_path / "part"))
        part = train.pretrain(part_cfg, dataset=tiny_handle(), stop_after=4)
        resumed = train.pretrain(part_cfg, resume_from=part.checkpoint_path,
                                 dataset=tiny_handle())
        assert resumed.metrics == full.metrics[4:]
        assert (tmp_path / "full" / "checkpoint.sjck").read_bytes() \
            == (tmp_path / "part" / "checkpoint.sjck").read_bytes()
        merged = [json.loads(line) for line in
                  (tmp_path / "part" / "metrics.jsonl").read_text().splitlines()]
        assert merged == full.metrics

    def test_resume_rejects_other_config(self, tmp_path):
        part = train.pretrain(tiny_cfg(steps=2, out_dir=str(tmp_path / "p")),
                              dataset=tiny_handle())
        other = tiny_cfg(steps=4, seed=99, out_dir=str(tmp_path / "q"))
        with pytest.raises(ckpt.CheckpointError):
            train.pretrain(other, resume_from=part.checkpoint_path,
                           dataset=tiny_handle())


class TestCheckpointContents:
    def test_sections_cover_all_state(self, tmp_path):
        cfg = tiny_cfg(steps=2, out_dir=str(tmp_path / "r"))
        result = train.pretrain(cfg, dataset=tiny_handle())
        h, step, sections = ckpt.load_checkpoint(result.checkpoint_path)
        assert h == cfg.config_hash()
        assert step == 2
        assert set(sections) == {"student", "teacher", "predictor", "pool",
                                 "group-head", "optimizer"}
        assert set(sections["student"]) == set(sections["teacher"])

    def test_teacher_tracks_student(self):
        cfg = tiny_cfg(steps=3)
        trainer = train.Trainer(cfg)
        handle = tiny_handle()
        start = copy.deepcopy({k: v.data for k, v in trainer.pair.teacher.items()})
        for i in range(3):
            trainer.step(handle.normalized(np.arange(8)))
        moved = any(not np.array_equal(start[k], trainer.pair.teacher[k].data)
                    for k in start)
        assert moved


class TestProbeEvaluation:
    def test_probe_report_on_fresh_encoder(self):
        cfg = RunConfig(
            vit=ViTConfig(image_size=32, patch_size=8, embed_dim=16, depth=1,
                          heads=2, mlp_ratio=2.0),
            loss=LossConfig(latent_dim=8),
            dataset=DatasetConfig(name="synth-class", n=60))
        trainer = train.Trainer(cfg)
        report = train.evaluate_probe(cfg, trainer.sections(), "synth-class", n=60)
        assert report["n_train"] == 48 and report["n_test"] == 12
        assert 0.0 <= report["test_accuracy"] <= 1.0
        assert 0.0 <= report["train_accuracy"] <= 1.0
