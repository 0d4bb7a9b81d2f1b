"""Tiny Vision Transformer producing per-patch embeddings.

Used as the backbone for both the student (context) and teacher (target)
encoders. No class token: everything downstream works on patch-level rows.
Positions are fixed 2D sin-cos, so the only learned state is the patch
embedding, the transformer blocks, and the final layer norm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def grid(self) -> "PatchGrid":
        side = self.image_size // self.patch_size
        return PatchGrid(side, side)

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    @property
    def mlp_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


@dataclass(frozen=True)
class PatchGrid:
    rows: int
    cols: int

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols


def patchify(image: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    """Split (C, H, W) pixels into (n_patches, C*p*p) rows, row-major grid order.

    Also accepts a batch (B, C, H, W), returning (B, n_patches, C*p*p).
    """
    img = np.asarray(image, dtype=np.float64)
    batched = img.ndim == 4
    if not batched:
        img = img[None]
    b, c, h, w = img.shape
    s = cfg.image_size
    if c != cfg.channels or h != s or w != s:
        raise T.ShapeError(f"patchify: expected ({cfg.channels}, {s}, {s}), got {img.shape[1:]}")
    p = cfg.patch_size
    g = s // p
    # (B, C, gr, p, gc, p) -> (B, gr, gc, C, p, p) -> rows
    out = (img.reshape(b, c, g, p, g, p)
              .transpose(0, 2, 4, 1, 3, 5)
              .reshape(b, g * g, c * p * p))
    return out if batched else out[0]


def unpatchify(patches: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    """Inverse of patchify for a single image."""
    p, c = cfg.patch_size, cfg.channels
    g = cfg.image_size // p
    return (np.asarray(patches, dtype=np.float64)
            .reshape(g, g, c, p, p)
            .transpose(2, 0, 3, 1, 4)
            .reshape(c, cfg.image_size, cfg.image_size))


def positional_encoding(grid: PatchGrid, d: int) -> np.ndarray:
    """Fixed 2D sinusoidal encoding, (n_patches, d).

    Half the channels encode the row coordinate, half the column, each as
    interleaved sin/cos pairs over a geometric frequency ladder.
    """
    if d % 4 != 0:
        raise ValueError(f"positional_encoding: d={d} must be divisible by 4")
    half = d // 2
    n_freq = half // 2
    freqs = 1.0 / (10000.0 ** (np.arange(n_freq) / n_freq))

    def axis_encoding(pos):
        ang = np.outer(pos, freqs)  # (len, n_freq)
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    rows = np.repeat(np.arange(grid.rows), grid.cols)
    cols = np.tile(np.arange(grid.cols), grid.rows)
    return np.concatenate([axis_encoding(rows), axis_encoding(cols)], axis=1)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until within 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_params(cfg: ViTConfig, rng: np.random.Generator,
                requires_grad: bool = True) -> dict[str, Tensor]:
    """Parameter tree as a flat dict keyed by slash paths."""
    p: dict[str, Tensor] = {}

    def param(name, shape, zero=False, one=False):
        if zero:
            data = np.zeros(shape)
        elif one:
            data = np.ones(shape)
        else:
            data = trunc_normal(rng, shape)
        p[name] = Tensor(data, requires_grad=requires_grad)

    d = cfg.embed_dim
    param("embed/w", (cfg.patch_dim, d))
    param("embed/b", (d,), zero=True)
    for i in range(cfg.depth):
        pre = f"block{i}"
        param(f"{pre}/ln1/g", (d,), one=True)
        param(f"{pre}/ln1/b", (d,), zero=True)
        for nm in ("wq", "wk", "wv", "wo"):
            param(f"{pre}/attn/{nm}", (d, d))
        param(f"{pre}/attn/bo", (d,), zero=True)
        param(f"{pre}/ln2/g", (d,), one=True)
        param(f"{pre}/ln2/b", (d,), zero=True)
        param(f"{pre}/mlp/w1", (d, cfg.mlp_dim))
        param(f"{pre}/mlp/b1", (cfg.mlp_dim,), zero=True)
        param(f"{pre}/mlp/w2", (cfg.mlp_dim, d))
        param(f"{pre}/mlp/b2", (d,), zero=True)
    param("final_ln/g", (d,), one=True)
    param("final_ln/b", (d,), zero=True)
    return p


def _attention(x: Tensor, params: dict[str, Tensor], pre: str, cfg: ViTConfig,
               attn_out: list | None) -> Tensor:
    """Multi-head self-attention on (B, n, d)."""
    b, n, d = x.shape
    h = cfg.heads
    dh = d // h

    def heads(t):  # (B, n, d) -> (B, h, n, dh)
        return T.transpose(T.reshape(t, (b, n, h, dh)), (0, 2, 1, 3))

    q = heads(T.matmul(x, params[f"{pre}/attn/wq"]))
    k = heads(T.matmul(x, params[f"{pre}/attn/wk"]))
    v = heads(T.matmul(x, params[f"{pre}/attn/wv"]))
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    if attn_out is not None:
        attn_out.append(attn.data)
    mixed = T.matmul(attn, v)  # (B, h, n, dh)
    merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (b, n, d))
    return T.matmul(merged, params[f"{pre}/attn/wo"]) + params[f"{pre}/attn/bo"]


def run_blocks(x: Tensor, params: dict[str, Tensor], cfg: ViTConfig, depth: int,
               attn_out: list | None = None) -> Tensor:
    """Pre-norm transformer stack on (B, n, d) tokens, then final layer norm."""
    for i in range(depth):
        pre = f"block{i}"
        normed = T.layer_norm(x, params[f"{pre}/ln1/g"], params[f"{pre}/ln1/b"])
        x = x + _attention(normed, params, pre, cfg, attn_out)
        normed = T.layer_norm(x, params[f"{pre}/ln2/g"], params[f"{pre}/ln2/b"])
        hid = T.gelu(T.matmul(normed, params[f"{pre}/mlp/w1"]) + params[f"{pre}/mlp/b1"])
        x = x + T.matmul(hid, params[f"{pre}/mlp/w2"]) + params[f"{pre}/mlp/b2"]
    return T.layer_norm(x, params["final_ln/g"], params["final_ln/b"])


def encode(image: np.ndarray, cfg: ViTConfig, params: dict[str, Tensor],
           patch_indices: np.ndarray | None = None,
           attn_out: list | None = None) -> Tensor:
    """Per-patch embeddings for one image or a batch.

    ``patch_indices`` restricts the token set to a patch subset (the context
    encoder path); positions follow the selected patches. Returns
    (n_tokens, d) for a single image, (B, n_tokens, d) for a batch.
    """
    raw = np.asarray(image, dtype=np.float64)
    batched = raw.ndim == 4
    patches = patchify(raw, cfg)
    if not batched:
        patches = patches[None]
    pos = positional_encoding(cfg.grid, cfg.embed_dim)
    if patch_indices is not None:
        idx = np.asarray(patch_indices, dtype=np.int64)
        patches = patches[:, idx, :]
        pos = pos[idx]
    b, n, _ = patches.shape
    x = T.matmul(T.tensor(patches), params["embed/w"]) + params["embed/b"]
    x = x + T.tensor(pos)
    out = run_blocks(x, params, cfg, cfg.depth, attn_out)
    if not batched:
        out = T.reshape(out, (n, cfg.embed_dim))
    return out
