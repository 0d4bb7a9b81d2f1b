"""Group-sparsity additions on top of the prediction loss.

A pooled K-dim latent is decoded through per-group matrices onto per-group
mean teacher embeddings. Column j of a group's matrix carries latent j's
influence on that group; the column-wise L2 penalty (group lasso) plus a
Bernoulli-KL activity penalty push each latent to serve few groups. Exact
zeros come from a block soft-threshold applied after the gradient step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .vit import PatchGrid


@dataclass(frozen=True)
class GroupPartition:
    """Map patch index -> group id; a true partition with G >= 2 groups."""

    num_groups: int
    assignment: np.ndarray  # (n_patches,) of group ids

    def __post_init__(self):
        a = np.asarray(self.assignment)
        if self.num_groups < 2:
            raise ValueError("need at least 2 groups")
        present = np.unique(a)
        if not np.array_equal(present, np.arange(self.num_groups)):
            raise ValueError("assignment must cover every group id exactly 0..G-1")

    @property
    def n_patches(self) -> int:
        return len(self.assignment)

    @classmethod
    def quadrants(cls, grid: PatchGrid) -> "GroupPartition":
        """Default spatial partition: the four quadrants of the patch grid."""
        return cls.spatial(grid, 2, 2)

    @classmethod
    def spatial(cls, grid: PatchGrid, grows: int, gcols: int) -> "GroupPartition":
        """Partition the grid into a grows x gcols cell layout."""
        r = np.repeat(np.arange(grid.rows), grid.cols) * grows // grid.rows
        c = np.tile(np.arange(grid.cols), grid.rows) * gcols // grid.cols
        return cls(num_groups=grows * gcols, assignment=r * gcols + c)


@dataclass
class GroupHead:
    """Per-group latent-to-embedding matrices W (d x K) with biases.

    Exact zero columns are representable and survive serialization; they are
    the interpretability artifact.
    """

    weights: list[Tensor]  # G matrices of shape (d, K)
    biases: list[Tensor]   # G vectors of shape (d,)

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("weights/biases count mismatch")
        shapes = {w.shape for w in self.weights}
        if len(shapes) != 1:
            raise ValueError(f"all group matrices must share a shape, got {shapes}")

    @property
    def num_groups(self) -> int:
        return len(self.weights)

    @property
    def latent_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def embed_dim(self) -> int:
        return self.weights[0].shape[0]

    @classmethod
    def init(cls, num_groups: int, embed_dim: int, latent_dim: int,
             rng: np.random.Generator, scale: float = 0.1) -> "GroupHead":
        ws = [Tensor(rng.normal(0.0, scale, size=(embed_dim, latent_dim)), requires_grad=True)
              for _ in range(num_groups)]
        bs = [Tensor(np.zeros(embed_dim), requires_grad=True) for _ in range(num_groups)]
        return cls(weights=ws, biases=bs)

    def params(self, prefix: str = "group_head") -> dict[str, Tensor]:
        out = {}
        sep = "/" if prefix else ""
        for g, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}{sep}w{g}"] = w
            out[f"{prefix}{sep}b{g}"] = b
        return out

    def column_norms(self) -> np.ndarray:
        """(G, K) Euclidean column norms."""
        return np.stack([np.linalg.norm(w.data, axis=0) for w in self.weights])

    def zero_columns(self) -> int:
        """Number of exactly-zero columns across all groups."""
        return int(sum((np.all(w.data == 0.0, axis=0)).sum() for w in self.weights))


@dataclass
class LossConfig:
    group_lasso_weight: float = 0.001  # lambda
    kl_weight: float = 0.1             # beta
    target_rate: float = 0.05          # rho
    latent_dim: int = 32               # K
    learning_rate: float = 0.05        # eta, couples into the prox threshold
    proximal: bool = True              # False: subgradient handling instead

    def __post_init__(self):
        if self.group_lasso_weight < 0 or self.kl_weight < 0:
            raise ValueError("penalty weights must be >= 0")
        if not (0.0 < self.target_rate < 1.0):
            raise ValueError("target activation rate must be in (0, 1)")


def pool_latent(context_emb: Tensor, proj: Tensor) -> Tensor:
    """Mean over context rows, then a learned linear map to K dims.

    (n_ctx, d) -> (K,) or batched (B, n_ctx, d) -> (B, K).
    """
    if context_emb.shape[-2] < 1:
        raise ValueError("pool_latent: empty context")
    pooled = T.mean(context_emb, axis=context_emb.ndim - 2)
    if pooled.ndim == 1:
        return T.reshape(T.matmul(T.reshape(pooled, (1, -1)), proj), (proj.shape[1],))
    return T.matmul(pooled, proj)


def group_targets(target_emb_full: Tensor, partition: GroupPartition) -> Tensor:
    """Mean teacher embedding per group: (n_patches, d) -> (G, d), or batched
    (B, n_patches, d) -> (B, G, d). Carries no gradient."""
    emb = target_emb_full.data
    if emb.shape[-2] != partition.n_patches:
        raise T.ShapeError(
            f"partition covers {partition.n_patches} patches, embeddings have {emb.shape[-2]}")
    rows = [emb[..., np.flatnonzero(partition.assignment == g), :].mean(axis=-2)
            for g in range(partition.num_groups)]
    return Tensor(np.stack(rows, axis=-2))


def group_reconstruction_loss(z: Tensor, head: GroupHead, targets: Tensor) -> Tensor:
    """(1/G) sum over groups of || W_g z + b_g - t_g ||^2, batch-averaged."""
    g_count = head.num_groups
    batched = z.ndim == 2
    b = z.shape[0] if batched else 1
    zc = z if batched else T.reshape(z, (1, -1))  # (B, K)
    total = None
    for g in range(g_count):
        recon = T.matmul(zc, T.transpose(head.weights[g])) + head.biases[g]  # (B, d)
        tgt = T.take_rows(targets, [g], axis=targets.ndim - 2)
        tgt = T.reshape(tgt, (b, head.embed_dim)) if batched else T.reshape(tgt, (1, head.embed_dim))
        diff = recon - tgt
        sse = T.tsum(diff * diff)
        total = sse if total is None else total + sse
    return total * (1.0 / (g_count * b))


def group_lasso_penalty(head: GroupHead) -> float:
    """Sum over groups and latent columns of the column Euclidean norm."""
    return float(head.column_norms().sum())


def group_lasso_penalty_grad(head: GroupHead, eps: float = 1e-12) -> Tensor:
    """Differentiable variant for subgradient mode.

    sqrt(||col||^2 + eps) smooths the kink at zero, giving subgradient ~0 for
    zero columns.
    """
    total = None
    for w in head.weights:
        norms = T.tsum(T.sqrt(T.tsum(w * w, axis=0) + eps))
        total = norms if total is None else total + norms
    return total


def kl_sparsity_penalty(latent_activations: Tensor, target_rate: float) -> Tensor:
    """Bernoulli KL between batch-mean logistic activations and the target rate.

    Activations of shape (batch, K) are squashed to (0, 1), averaged over the
    batch, clamped away from {0, 1}, then summed over latent units.
    """
    if latent_activations.ndim != 2:
        raise T.ShapeError(
            f"expected (batch, K) activations, got shape {latent_activations.shape}")
    rho = target_rate
    rho_hat = T.clip(T.mean(T.sigmoid(latent_activations), axis=0), 1e-6, 1.0 - 1e-6)
    term = rho * (np.log(rho) - T.log(rho_hat)) \
        + (1.0 - rho) * (np.log(1.0 - rho) - T.log(1.0 - rho_hat))
    return T.tsum(term)


def total_loss(jepa_term: Tensor, group_recon: Tensor, kl: Tensor,
               penalty: float, cfg: LossConfig) -> Tensor:
    """jepa + group_recon + beta * kl + lambda * penalty.

    The reconstruction term has fixed weight 1. Non-finite inputs abort.
    """
    parts = [jepa_term.item(), group_recon.item(), kl.item(), float(penalty)]
    if not all(np.isfinite(parts)):
        raise FloatingPointError(f"non-finite loss component: {parts}")
    return jepa_term + group_recon + cfg.kl_weight * kl \
        + T.tensor(cfg.group_lasso_weight * penalty)


def proximal_step(head: GroupHead, lasso_weight: float, lr: float) -> None:
    """Block soft-threshold every latent column in place.

    col <- max(0, 1 - lambda*eta/||col||) * col; columns at or below the
    threshold become exactly zero (explicit zeroing, no denormal dust).
    """
    thresh = lasso_weight * lr
    if thresh < 0:
        raise ValueError("negative threshold")
    if thresh == 0.0:
        return
    for w in head.weights:
        norms = np.linalg.norm(w.data, axis=0)
        kill = norms <= thresh
        keep = ~kill
        w.data[:, kill] = 0.0
        if keep.any():
            w.data[:, keep] *= 1.0 - thresh / norms[keep]
