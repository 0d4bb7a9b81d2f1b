"""Linear-probe evaluation on frozen features.

Features are mean-pooled patch embeddings from a frozen encoder; the probe is
multinomial logistic regression trained by full-batch gradient descent with
L2 weight decay. Full-batch keeps the whole procedure bit-deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import vit
from .data import DatasetHandle
from .tensor import Tensor
from .vit import ViTConfig


@dataclass
class FeatureTable:
    features: np.ndarray  # (n, d)
    labels: np.ndarray    # (n,)

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise ValueError("feature/label count mismatch")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite features")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class ProbeConfig:
    lr: float = 0.1
    epochs: int = 500
    weight_decay: float = 1e-4
    seed: int = 0


def extract_features(handle: DatasetHandle, encoder: dict[str, Tensor], cfg: ViTConfig,
                     batch_size: int = 64, normalized: bool = True) -> FeatureTable:
    """Mean-pool the per-patch embeddings of every image; encoder stays frozen."""
    feats = np.empty((len(handle), cfg.embed_dim))
    with T.no_grad():
        for start in range(0, len(handle), batch_size):
            idx = np.arange(start, min(start + batch_size, len(handle)))
            imgs = handle.normalized(idx) if normalized else handle.images[idx]
            emb = vit.encode(imgs, cfg, encoder)
            feats[idx] = emb.data.mean(axis=1)
    return FeatureTable(features=feats, labels=handle.labels.copy())


@dataclass
class ProbeWeights:
    w: np.ndarray  # (d, n_classes)
    b: np.ndarray  # (n_classes,)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def cross_entropy_and_grad(w: np.ndarray, b: np.ndarray, x: np.ndarray, y: np.ndarray,
                           weight_decay: float):
    """Mean softmax cross-entropy with L2 on the weights, plus gradients."""
    n = len(x)
    probs = _softmax_rows(x @ w + b)
    nll = -np.log(np.clip(probs[np.arange(n), y], 1e-300, None)).mean()
    loss = nll + 0.5 * weight_decay * float((w**2).sum())
    delta = probs
    delta[np.arange(n), y] -= 1.0
    delta /= n
    return loss, x.T @ delta + weight_decay * w, delta.sum(axis=0)


def train_linear_probe(table: FeatureTable, cfg: ProbeConfig | None = None) -> ProbeWeights:
    """Deterministic full-batch gradient descent with step halving on any
    loss increase, so the recorded loss is non-increasing."""
    cfg = cfg or ProbeConfig()
    classes = np.unique(table.labels)
    if len(classes) < 2:
        raise ValueError("probe training needs at least 2 classes present")
    n_classes = int(classes.max()) + 1
    d = table.dim
    w = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    x, y = table.features, table.labels
    lr = cfg.lr
    loss, gw, gb = cross_entropy_and_grad(w, b, x, y, cfg.weight_decay)
    for _ in range(cfg.epochs):
        w2, b2 = w - lr * gw, b - lr * gb
        loss2, gw2, gb2 = cross_entropy_and_grad(w2, b2, x, y, cfg.weight_decay)
        if loss2 > loss:
            lr *= 0.5
            continue
        w, b, loss, gw, gb = w2, b2, loss2, gw2, gb2
    return ProbeWeights(w=w, b=b)


def top1_accuracy(probe: ProbeWeights, table: FeatureTable) -> float:
    """Fraction of rows whose argmax logit hits the label; argmax breaks ties
    toward the lowest class index."""
    if len(table) == 0:
        raise ValueError("empty feature table")
    if table.dim != probe.w.shape[0]:
        raise ValueError(f"probe width {probe.w.shape[0]} != feature dim {table.dim}")
    preds = np.argmax(table.features @ probe.w + probe.b, axis=1)
    return float((preds == table.labels).mean())
