"""Pretraining loop: mask, encode, predict, combined loss, SGD-with-momentum
step, proximal shrink of the group head, EMA teacher update.

Everything is derived from (config, seed): per-step mask generators and
per-epoch batch permutations come from seed sequences keyed by the step or
epoch index, so a resumed run replays the exact step stream of an
uninterrupted one.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from . import data, jepa, sparsity, tensor as T, vit
from .config import DatasetConfig, RunConfig
from .jepa import EncoderPair, PredictorConfig
from .sparsity import GroupHead, GroupPartition
from .tensor import Tensor

_INIT_KEY = 0
_MASK_KEY = 1


class NumericAbort(RuntimeError):
    """Training hit a non-finite loss; the last good checkpoint is retained."""


def load_dataset(cfg: RunConfig) -> data.DatasetHandle:
    ds = cfg.dataset
    if ds.name in ("synth-class", "synth-count"):
        task = ds.name.split("-")[1]
        rng = np.random.default_rng(ds.data_seed)
        handle = data.synth_shapes(ds.n, task, rng)
    elif ds.name == "cifar100-train":
        handle = data.load_cifar100(ds.path, source=ds.name)
    else:
        raise ValueError(f"unknown dataset {ds.name!r}")
    handle.compute_stats()
    return handle


class Trainer:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=cfg.seed, spawn_key=(_INIT_KEY,)))
        self.pair = EncoderPair.init(cfg.vit, rng, momentum=cfg.optimizer.ema_momentum)
        self.pcfg = PredictorConfig(embed_dim=cfg.vit.embed_dim, depth=cfg.predictor_depth,
                                    heads=cfg.vit.heads, mlp_ratio=cfg.vit.mlp_ratio)
        self.predictor = jepa.init_predictor(self.pcfg, rng)
        self.partition = GroupPartition.spatial(cfg.vit.grid, cfg.group_rows, cfg.group_cols)
        self.head = GroupHead.init(self.partition.num_groups, cfg.vit.embed_dim,
                                   cfg.loss.latent_dim, rng)
        self.pool_proj = Tensor(vit.trunc_normal(rng, (cfg.vit.embed_dim, cfg.loss.latent_dim),
                                                 std=1.0 / math.sqrt(cfg.vit.embed_dim)),
                                requires_grad=True)
        self.step_idx = 0
        self.velocity: dict[str, np.ndarray] = {}

    # ------------------------------------------------------------------
    # parameter bookkeeping

    def trainable(self) -> dict[str, Tensor]:
        out = {f"student/{k}": v for k, v in self.pair.student.items()}
        out.update({f"predictor/{k}": v for k, v in self.predictor.items()})
        out["pool/proj"] = self.pool_proj
        out.update(self.head.params("group-head"))
        return out

    def sections(self) -> ckpt.Sections:
        secs: ckpt.Sections = {
            "student": {k: v.data for k, v in self.pair.student.items()},
            "teacher": {k: v.data for k, v in self.pair.teacher.items()},
            "predictor": {k: v.data for k, v in self.predictor.items()},
            "pool": {"proj": self.pool_proj.data},
            "group-head": {k: v.data for k, v in self.head.params("").items()},
            "optimizer": dict(self.velocity),
        }
        return secs

    def restore(self, sections: ckpt.Sections, step: int) -> None:
        def fill(params: dict[str, Tensor], stored: dict[str, np.ndarray]):
            if set(params) != set(stored):
                raise ckpt.CheckpointError("parameter tree mismatch on restore")
            for k, p in params.items():
                if p.shape != stored[k].shape:
                    raise ckpt.CheckpointError(f"shape mismatch for {k}")
                p.data = stored[k].copy()

        fill(self.pair.student, sections["student"])
        fill(self.pair.teacher, sections["teacher"])
        fill(self.predictor, sections["predictor"])
        self.pool_proj.data = sections["pool"]["proj"].copy()
        fill(self.head.params(""), sections["group-head"])
        self.velocity = {k: v.copy() for k, v in sections.get("optimizer", {}).items()}
        self.step_idx = step

    # ------------------------------------------------------------------
    # one optimization step

    def _mask_rng(self, step: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence(entropy=self.cfg.seed, spawn_key=(_MASK_KEY, step)))

    def step(self, images: np.ndarray) -> dict:
        cfg = self.cfg
        lcfg = cfg.loss
        T.clear_tape()
        for p in self.trainable().values():
            p.zero_grad()

        mask = jepa.sample_masks(cfg.vit.grid, self._mask_rng(self.step_idx), cfg.mask)
        ctx = vit.encode(images, cfg.vit, self.pair.student, patch_indices=mask.context)
        with T.no_grad():
            teacher_full = vit.encode(images, cfg.vit, self.pair.teacher)
        targets = [T.take_rows(teacher_full, blk, axis=1) for blk in mask.targets]
        preds = jepa.predict_targets(ctx, mask, self.predictor, self.pcfg)
        jepa_term = jepa.jepa_loss(preds, targets)

        z = sparsity.pool_latent(ctx, self.pool_proj)                 # (B, K)
        group_tgt = sparsity.group_targets(teacher_full, self.partition)  # (B, G, d)
        recon = sparsity.group_reconstruction_loss(z, self.head, group_tgt)
        kl = sparsity.kl_sparsity_penalty(z, lcfg.target_rate)
        penalty = sparsity.group_lasso_penalty(self.head)
        total = sparsity.total_loss(jepa_term, recon, kl, penalty, lcfg)

        objective = jepa_term + recon + lcfg.kl_weight * kl
        if not lcfg.proximal and lcfg.group_lasso_weight > 0:
            objective = objective + lcfg.group_lasso_weight \
                * sparsity.group_lasso_penalty_grad(self.head)
        T.backward(objective)

        # linear warmup over the first tenth of the budget, then cosine decay:
        # warmup keeps the EMA teacher-student pair stable at the start, decay
        # lets the loss settle instead of oscillating around its floor; the
        # value depends only on (config, step index), so resumed runs replay
        # the same schedule
        steps = max(1, cfg.optimizer.steps)
        warmup = steps // 10
        if self.step_idx < warmup:
            lr = cfg.optimizer.lr * (self.step_idx + 1) / warmup
        else:
            t = min((self.step_idx - warmup) / max(1, steps - warmup), 1.0)
            lr = cfg.optimizer.lr * 0.5 * (1.0 + math.cos(math.pi * t))
        mu = cfg.optimizer.momentum
        params = self.trainable()
        clip = cfg.optimizer.max_grad_norm
        scale = 1.0
        if clip > 0:
            gnorm = math.sqrt(sum(float((p.grad ** 2).sum())
                                  for p in params.values() if p.grad is not None))
            if gnorm > clip:
                scale = clip / gnorm
        for name, p in params.items():
            if p.grad is None:
                continue
            g = scale * p.grad
            v = self.velocity.get(name)
            v = g if v is None else mu * v + g
            self.velocity[name] = v
            p.data = p.data - lr * v
        if lcfg.proximal:
            # the prox threshold couples lambda with the loss config's own
            # eta, so sparsification strength is independent of optimizer lr
            sparsity.proximal_step(self.head, lcfg.group_lasso_weight,
                                   lcfg.learning_rate)
        jepa.ema_update(self.pair)
        self.step_idx += 1
        return {
            "step": self.step_idx - 1,
            "jepa_loss": jepa_term.item(),
            "group_recon": recon.item(),
            "kl": kl.item(),
            "penalty": penalty,
            "total": total.item(),
            "zero_columns": self.head.zero_columns(),
        }


def evaluate_probe(cfg: RunConfig, sections: ckpt.Sections, dataset_name: str,
                   n: int = 2000, train_frac: float = 0.8,
                   encoder_section: str = "teacher") -> dict:
    """Train a linear probe on frozen features and score a held-out split.

    The synthetic dataset is regenerated from cfg.dataset.data_seed and split
    deterministically; normalization stats come from the train split only.
    """
    from . import probe

    ds_cfg = DatasetConfig(name=dataset_name, n=n, path=cfg.dataset.path,
                           data_seed=cfg.dataset.data_seed)
    handle = load_dataset(RunConfig(vit=cfg.vit, dataset=ds_cfg))
    n_train = int(round(train_frac * len(handle)))
    if n_train < 2 or n_train >= len(handle):
        raise ValueError("train_frac leaves an empty split")
    train = data.DatasetHandle(source=handle.source, images=handle.images[:n_train],
                               labels=handle.labels[:n_train])
    test = data.DatasetHandle(source=handle.source, images=handle.images[n_train:],
                              labels=handle.labels[n_train:])
    train.compute_stats()
    test.adopt_stats(train)

    encoder = {k: Tensor(v.copy(), requires_grad=False)
               for k, v in sections[encoder_section].items()}
    train_table = probe.extract_features(train, encoder, cfg.vit)
    test_table = probe.extract_features(test, encoder, cfg.vit)
    # standardize features on train-split statistics so the fixed-step probe
    # optimizer is well conditioned regardless of encoder output scale
    mu = train_table.features.mean(axis=0)
    sd = train_table.features.std(axis=0) + 1e-8
    train_table = probe.FeatureTable(features=(train_table.features - mu) / sd,
                                     labels=train_table.labels)
    test_table = probe.FeatureTable(features=(test_table.features - mu) / sd,
                                    labels=test_table.labels)
    weights = probe.train_linear_probe(train_table)
    return {
        "dataset": dataset_name,
        "n_train": len(train_table),
        "n_test": len(test_table),
        "train_accuracy": probe.top1_accuracy(weights, train_table),
        "test_accuracy": probe.top1_accuracy(weights, test_table),
    }


@dataclass
class RunResult:
    metrics: list[dict]
    checkpoint_path: str


def pretrain(cfg: RunConfig, resume_from: str | None = None,
             write_files: bool = True, dataset: data.DatasetHandle | None = None,
             stop_after: int | None = None) -> RunResult:
    """Run the full loop for cfg.optimizer.steps steps.

    Writes metrics.jsonl (deterministic fields only), timings.jsonl
    (wall-clock per step), and checkpoint.sjck per epoch. A non-finite loss
    aborts, keeping the last epoch's checkpoint. ``stop_after`` interrupts
    after that many total steps (saving a checkpoint) without changing the
    configured budget, so the run can be resumed later under the same
    config and replay the exact step stream of an uninterrupted run.
    """
    handle = dataset if dataset is not None else load_dataset(cfg)
    trainer = Trainer(cfg)
    cfg_hash = cfg.config_hash()
    if resume_from is not None:
        _, step, sections = ckpt.load_checkpoint(resume_from, expect_hash=cfg_hash)
        trainer.restore(sections, step)

    out_dir = cfg.out_dir
    ckpt_path = os.path.join(out_dir, "checkpoint.sjck")
    metrics_fh = timings_fh = None
    if write_files:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            fh.write(cfg.to_json())
        mode = "a" if resume_from is not None else "w"
        metrics_fh = open(os.path.join(out_dir, "metrics.jsonl"), mode)
        timings_fh = open(os.path.join(out_dir, "timings.jsonl"), mode)

    batch = cfg.optimizer.batch_size
    steps_per_epoch = max(1, math.ceil(len(handle) / batch))
    stop_at = cfg.optimizer.steps if stop_after is None \
        else min(stop_after, cfg.optimizer.steps)
    rows: list[dict] = []
    try:
        while trainer.step_idx < stop_at:
            epoch = trainer.step_idx // steps_per_epoch
            batches = data.batch_iter(handle, batch, epoch_seed=cfg.seed, epoch=epoch)
            offset = trainer.step_idx % steps_per_epoch
            for b, (images, _) in enumerate(batches):
                if trainer.step_idx >= stop_at:
                    break
                if b < offset:
                    continue  # batches consumed before a mid-epoch resume
                t0 = time.perf_counter()
                try:
                    row = trainer.step(images)
                except FloatingPointError as exc:
                    raise NumericAbort(str(exc)) from exc
                wall = time.perf_counter() - t0
                rows.append(row)
                if metrics_fh:
                    metrics_fh.write(json.dumps(row, sort_keys=True) + "\n")
                    timings_fh.write(json.dumps(
                        {"step": row["step"], "wall_time": wall}) + "\n")
            if write_files:
                metrics_fh.flush()
                timings_fh.flush()
                ckpt.save_checkpoint(ckpt_path, cfg_hash, trainer.step_idx,
                                     trainer.sections())
    finally:
        if metrics_fh:
            metrics_fh.close()
            timings_fh.close()
    if write_files:
        ckpt.save_checkpoint(ckpt_path, cfg_hash, trainer.step_idx, trainer.sections())
    return RunResult(metrics=rows, checkpoint_path=ckpt_path if write_files else "")
