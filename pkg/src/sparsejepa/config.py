"""Run configuration: a flat JSON document that fully determines a run.

Two runs with equal configs and seeds produce identical metrics; the
canonical-JSON hash of the config is stored in every checkpoint so stale
checkpoints are rejected on load.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

from .jepa import MaskParams
from .sparsity import LossConfig
from .vit import ViTConfig


@dataclass
class OptimizerConfig:
    lr: float = 5e-5
    momentum: float = 0.9
    steps: int = 500
    batch_size: int = 64
    ema_momentum: float = 0.996
    max_grad_norm: float = 50.0  # global-norm clip; 0 disables


@dataclass
class DatasetConfig:
    name: str = "synth-class"  # synth-class | synth-count | cifar100-train
    n: int = 2000              # synthetic sample count
    path: str = ""             # binary file path for cifar100
    data_seed: int = 1234


@dataclass
class RunConfig:
    vit: ViTConfig = field(default_factory=ViTConfig)
    mask: MaskParams = field(default_factory=MaskParams)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    predictor_depth: int = 2
    group_rows: int = 2
    group_cols: int = 2
    seed: int = 0
    out_dir: str = "runs/default"

    def to_flat_dict(self) -> dict:
        """Flat key-value document with slash-joined keys."""
        flat = {}

        def walk(prefix, obj):
            for k, v in obj.items():
                key = f"{prefix}/{k}" if prefix else k
                if isinstance(v, dict):
                    walk(key, v)
                elif isinstance(v, tuple):
                    flat[key] = list(v)
                else:
                    flat[key] = v

        walk("", asdict(self))
        return flat

    def to_json(self) -> str:
        return json.dumps(self.to_flat_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_flat_dict(cls, flat: dict) -> "RunConfig":
        base = cls()
        nested: dict = {}
        for key, value in flat.items():
            parts = key.split("/")
            cur = nested
            for p in parts[:-1]:
                cur = cur.setdefault(p, {})
            cur[parts[-1]] = value

        def build(dc_type, payload, defaults):
            kwargs = dict(payload)
            for k, v in kwargs.items():
                if isinstance(getattr(defaults, k, None), tuple) and isinstance(v, list):
                    kwargs[k] = tuple(v)
            return dc_type(**kwargs)

        kwargs: dict = {}
        sections = {"vit": ViTConfig, "mask": MaskParams, "loss": LossConfig,
                    "optimizer": OptimizerConfig, "dataset": DatasetConfig}
        for name, typ in sections.items():
            if name in nested:
                kwargs[name] = build(typ, nested.pop(name), getattr(base, name))
        for k, v in nested.items():
            if not hasattr(base, k):
                raise ValueError(f"unknown config key {k!r}")
            kwargs[k] = v
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_flat_dict(json.loads(text))

    def config_hash(self) -> bytes:
        """SHA-256 over the canonical run-defining fields.

        out_dir and optimizer/steps are excluded: neither changes the
        per-step stream, and excluding the step budget lets a checkpoint
        from an interrupted short run resume under a longer one.
        """
        flat = self.to_flat_dict()
        flat.pop("out_dir", None)
        flat.pop("optimizer/steps", None)
        canon = json.dumps(flat, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).digest()
