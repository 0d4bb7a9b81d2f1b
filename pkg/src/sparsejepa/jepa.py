"""Context/target masking, target encoding, the predictor, the prediction
loss, and the EMA teacher update.

The loss follows the block form exactly: squared L2 distances summed over the
patches of each target block, averaged over the number of blocks M (not over
patches). Batches additionally average over images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import vit
from .tensor import Tensor
from .vit import PatchGrid, ViTConfig


class MaskSamplingError(RuntimeError):
    """Raised when no valid context/target split can be sampled."""


@dataclass(frozen=True)
class MaskSpec:
    """One context patch-index set plus M disjoint-from-context target blocks."""

    context: np.ndarray            # sorted patch indices
    targets: tuple[np.ndarray, ...]  # M blocks of sorted patch indices
    grid: PatchGrid

    def __post_init__(self):
        n = self.grid.n_patches
        ctx = np.asarray(self.context)
        if ctx.size == 0:
            raise ValueError("context is empty")
        if len(self.targets) < 1:
            raise ValueError("need at least one target block")
        ctx_set = set(ctx.tolist())
        for blk in self.targets:
            b = np.asarray(blk)
            if b.size == 0:
                raise ValueError("empty target block")
            if b.min() < 0 or b.max() >= n or ctx.min() < 0 or ctx.max() >= n:
                raise ValueError("patch index out of range")
            if ctx_set & set(b.tolist()):
                raise ValueError("context overlaps a target block")

    @property
    def n_target_patches(self) -> int:
        return sum(len(b) for b in self.targets)


@dataclass
class MaskParams:
    num_targets: int = 4
    target_scale: tuple[float, float] = (0.15, 0.2)
    target_aspect: tuple[float, float] = (0.75, 1.5)
    context_scale: tuple[float, float] = (0.85, 1.0)
    max_retries: int = 20


def _sample_block(grid: PatchGrid, rng: np.random.Generator,
                  scale: tuple[float, float], aspect: tuple[float, float]) -> np.ndarray:
    """Rectangular patch block: area from scale range, shape from aspect range."""
    lo, hi = scale[0] * grid.n_patches, scale[1] * grid.n_patches
    area = rng.uniform(*scale) * grid.n_patches
    ratio = rng.uniform(*aspect)
    h = int(np.clip(round(np.sqrt(area * ratio)), 1, grid.rows))
    w = int(np.clip(round(area / h), 1, grid.cols))
    # rounding can push the patch count outside the scale band; snap it back
    if h * w > hi:
        w = max(1, int(hi // h))
    if h * w < lo:
        w = min(grid.cols, int(np.ceil(lo / h)))
    top = int(rng.integers(0, grid.rows - h + 1))
    left = int(rng.integers(0, grid.cols - w + 1))
    rr, cc = np.meshgrid(np.arange(top, top + h), np.arange(left, left + w), indexing="ij")
    return np.sort((rr * grid.cols + cc).reshape(-1))


def sample_masks(grid: PatchGrid, rng: np.random.Generator,
                 params: MaskParams | None = None) -> MaskSpec:
    """Sample M rectangular target blocks plus a context block with the
    target patches removed. Deterministic given the rng state."""
    params = params or MaskParams()
    if params.num_targets < 1:
        raise ValueError("num_targets must be >= 1")
    for lo, hi in (params.target_scale, params.target_aspect, params.context_scale):
        if not (0 < lo <= hi):
            raise ValueError("mask ranges must be positive and ordered")

    targets = tuple(_sample_block(grid, rng, params.target_scale, params.target_aspect)
                    for _ in range(params.num_targets))
    forbidden = np.zeros(grid.n_patches, dtype=bool)
    for blk in targets:
        forbidden[blk] = True

    for _ in range(params.max_retries):
        rect = _sample_block(grid, rng, params.context_scale, (1.0, 1.0))
        ctx = rect[~forbidden[rect]]
        if ctx.size:
            return MaskSpec(context=ctx, targets=targets, grid=grid)
    # relaxed fallback: everything outside the targets
    ctx = np.flatnonzero(~forbidden)
    if ctx.size == 0:
        raise MaskSamplingError("targets cover the entire grid; no context possible")
    return MaskSpec(context=ctx, targets=targets, grid=grid)


# ---------------------------------------------------------------------------
# encoders and predictor


@dataclass
class EncoderPair:
    """Student parameters with their EMA teacher twin."""

    student: dict[str, Tensor]
    teacher: dict[str, Tensor]
    momentum: float = 0.996

    def __post_init__(self):
        if not (0.0 <= self.momentum <= 1.0):
            raise ValueError("momentum must be in [0, 1]")
        if set(self.student) != set(self.teacher):
            raise ValueError("student/teacher parameter trees differ")
        for k in self.student:
            if self.student[k].shape != self.teacher[k].shape:
                raise ValueError(f"shape mismatch at {k}")

    @classmethod
    def init(cls, cfg: ViTConfig, rng: np.random.Generator, momentum: float = 0.996):
        student = vit.init_params(cfg, rng, requires_grad=True)
        teacher = {k: Tensor(v.data.copy(), requires_grad=False) for k, v in student.items()}
        return cls(student=student, teacher=teacher, momentum=momentum)


def ema_update(pair: EncoderPair) -> None:
    """teacher <- m * teacher + (1 - m) * student, elementwise, in place."""
    m = pair.momentum
    for k, s in pair.student.items():
        t = pair.teacher[k]
        t.data *= m
        t.data += (1.0 - m) * s.data


@dataclass(frozen=True)
class PredictorConfig:
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0

    def vit_cfg(self, image_size: int = 32, patch_size: int = 4) -> ViTConfig:
        # reuse the transformer-block shapes; patch geometry is irrelevant here
        return ViTConfig(image_size=image_size, patch_size=patch_size,
                         embed_dim=self.embed_dim, depth=self.depth,
                         heads=self.heads, mlp_ratio=self.mlp_ratio)


def init_predictor(cfg: PredictorConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Shallow transformer over context tokens plus mask tokens."""
    d = cfg.embed_dim
    params = vit.init_params(cfg.vit_cfg(), rng, requires_grad=True)
    # drop the patch-embedding head; the predictor consumes embeddings directly
    del params["embed/w"], params["embed/b"]
    params["in/w"] = Tensor(vit.trunc_normal(rng, (d, d)) + np.eye(d), requires_grad=True)
    params["in/b"] = Tensor(np.zeros(d), requires_grad=True)
    params["out/w"] = Tensor(vit.trunc_normal(rng, (d, d)) + np.eye(d), requires_grad=True)
    params["out/b"] = Tensor(np.zeros(d), requires_grad=True)
    params["mask_token"] = Tensor(vit.trunc_normal(rng, (d,)), requires_grad=True)
    return params


def encode_targets(image: np.ndarray, teacher: dict[str, Tensor], cfg: ViTConfig,
                   mask: MaskSpec) -> list[Tensor]:
    """Teacher embeddings for each target block, selected from a full-image
    encoding. No gradients reach the teacher."""
    with T.no_grad():
        full = vit.encode(image, cfg, teacher)
        axis = full.ndim - 2  # patch axis for single image or batch
        return [T.take_rows(full, blk, axis=axis) for blk in mask.targets]


def predict_targets(context_emb: Tensor, mask: MaskSpec,
                    predictor: dict[str, Tensor], cfg: PredictorConfig) -> list[Tensor]:
    """Predicted embeddings per target block.

    For each block, one mask token per target patch (carrying that patch's
    positional encoding) is appended to the projected context tokens; the
    stack runs through the predictor and the mask-token rows are returned.
    """
    d = cfg.embed_dim
    batched = context_emb.ndim == 3
    if context_emb.shape[-1] != d:
        raise T.ShapeError(f"context embeddings have width {context_emb.shape[-1]}, expected {d}")
    if context_emb.shape[-2] != len(mask.context):
        raise T.ShapeError("context embedding rows do not match mask.context")
    x = context_emb if batched else T.reshape(context_emb, (1,) + context_emb.shape)
    b = x.shape[0]
    pos = vit.positional_encoding(mask.grid, d)
    ctx_tokens = T.matmul(x, predictor["in/w"]) + predictor["in/b"]
    ctx_tokens = ctx_tokens + T.tensor(pos[mask.context])

    vcfg = cfg.vit_cfg()
    outputs = []
    for blk in mask.targets:
        nt = len(blk)
        tok = T.broadcast_rows(predictor["mask_token"], nt) + T.tensor(pos[blk])
        tok = T.add(tok, T.zeros((b, nt, d)))  # tile over the batch
        stack = T.concat([ctx_tokens, tok], axis=1)
        hidden = vit.run_blocks(stack, predictor, vcfg, vcfg.depth)
        pred_rows = T.take_rows(hidden, np.arange(stack.shape[1] - nt, stack.shape[1]), axis=1)
        pred = T.matmul(pred_rows, predictor["out/w"]) + predictor["out/b"]
        outputs.append(pred if batched else T.reshape(pred, (nt, d)))
    return outputs


def jepa_loss(predicted: list[Tensor], targets: list[Tensor]) -> Tensor:
    """(1/M) sum over blocks of the summed squared patch distances.

    Block tensors are (n_i, d) or (B, n_i, d); batched inputs are averaged
    over B in addition to the 1/M block average.
    """
    if len(predicted) != len(targets) or not predicted:
        raise ValueError(f"block count mismatch: {len(predicted)} vs {len(targets)}")
    m = len(predicted)
    total = None
    for s_hat, s in zip(predicted, targets):
        if s_hat.shape != s.shape:
            raise T.ShapeError(f"block shape mismatch: {s_hat.shape} vs {s.shape}")
        batch = s.shape[0] if s.ndim == 3 else 1
        diff = s_hat - s
        sse = T.tsum(diff * diff) * (1.0 / batch)
        total = sse if total is None else total + sse
    return total * (1.0 / m)
