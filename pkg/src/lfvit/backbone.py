"""Patch embedding, the pre-norm encoder stack and the classifier head."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from lfvit import numkern as nk
from lfvit.config import ModelConfig
from lfvit.errors import DimensionError
from lfvit.weights import WeightStore


@dataclass
class TokenSequence:
    """Encoder input/output. Row 0 is always the class token.

    For grid-ordered sequences the remaining rows are the patch tokens in
    row-major order over ``grid_rows x grid_cols``.  Sequences assembled for
    the focus stage in compact mode mix fine and coarse positions; there
    ``positions`` records, for every row after the class token, a
    ``("fine" | "coarse", index)`` pair.
    """

    tokens: np.ndarray
    grid_rows: int
    grid_cols: int
    positions: Optional[list] = None

    @property
    def n_patches(self) -> int:
        return self.tokens.shape[0] - 1

    @property
    def patch_tokens(self) -> np.ndarray:
        return self.tokens[1:]

    @property
    def class_token(self) -> np.ndarray:
        return self.tokens[0]


@dataclass
class ClassAttentionTrace:
    """Head-averaged class-token attention row of every layer, shape (L, N+1).

    ``attention`` holds the full per-head attention matrices, one
    ``(H, N+1, N+1)`` array per layer, when the encoder was asked to keep them.
    """

    per_layer: np.ndarray
    attention: Optional[list] = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.per_layer.shape[0]


def downsample_half(image) -> np.ndarray:
    """2x2 area pooling per channel: (3, H, W) -> (3, H/2, W/2)."""
    image = nk.as_tensor(image)
    if image.ndim != 3:
        raise DimensionError(f"expected a (C, H, W) image, got shape {image.shape}")
    _, h, w = image.shape
    if h % 2 or w % 2:
        raise DimensionError(f"cannot halve odd image dimensions {h}x{w}")
    summed = image[:, 0::2, 0::2] + image[:, 0::2, 1::2] + image[:, 1::2, 0::2] + image[:, 1::2, 1::2]
    return summed * np.float32(0.25)


def patchify(image, patch: int) -> np.ndarray:
    """Split (3, S, S) into (N, P*P*3) rows, patches row-major, pixels (y, x, c)."""
    c, s, _ = image.shape
    g = s // patch
    grid = image.reshape(c, g, patch, g, patch)
    return np.ascontiguousarray(grid.transpose(1, 3, 2, 4, 0).reshape(g * g, patch * patch * c))


def _resize_axis(x: np.ndarray, out: int, axis: int) -> np.ndarray:
    n = x.shape[axis]
    if n == out:
        return x
    src = (np.arange(out, dtype=np.float64) + 0.5) * (n / out) - 0.5
    src = np.clip(src, 0.0, n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = (src - lo).astype(np.float32)
    shape = [1] * x.ndim
    shape[axis] = out
    frac = frac.reshape(shape)
    return np.take(x, lo, axis=axis) * (1 - frac) + np.take(x, hi, axis=axis) * frac


def interpolate_pos_embed(pos_embed: np.ndarray, grid_side: int) -> np.ndarray:
    """Bilinearly resample the patch rows of a square positional table.

    Half-pixel-centre sampling; for an exact 2x reduction this averages each
    2x2 block.  The class-token row is passed through unchanged.
    """
    src_side = int(round(np.sqrt(pos_embed.shape[0] - 1)))
    if src_side == grid_side:
        return pos_embed
    grid = pos_embed[1:].reshape(src_side, src_side, -1)
    grid = _resize_axis(_resize_axis(grid, grid_side, 0), grid_side, 1)
    return np.concatenate([pos_embed[:1], grid.reshape(grid_side * grid_side, -1)]).astype(np.float32)


def patch_embed(image, w: WeightStore, indices=None) -> np.ndarray:
    """Shared linear projection of flattened patches (optionally only ``indices``)."""
    rows = patchify(nk.as_tensor(image), w.config.patch)
    if indices is not None:
        rows = rows[np.asarray(indices, dtype=int)]
    return nk.linear(rows, w["patch_proj"], w["patch_bias"])


def embed(image, w: WeightStore, cfg: ModelConfig) -> TokenSequence:
    image = nk.as_tensor(image)
    if image.ndim != 3 or image.shape[0] != 3 or image.shape[1] != image.shape[2]:
        raise DimensionError(f"expected a square (3, S, S) image, got shape {image.shape}")
    side = image.shape[1]
    if side % cfg.patch:
        raise DimensionError(f"image side {side} not divisible by patch size {cfg.patch}")
    if side not in (cfg.image_side, cfg.image_side // 2):
        raise DimensionError(
            f"image side {side} is neither {cfg.image_side} nor {cfg.image_side // 2}"
        )
    g = side // cfg.patch
    pos = interpolate_pos_embed(w["pos_embed"], g)
    cls = w["cls_token"][None, :]
    tokens = np.concatenate([cls, patch_embed(image, w)]) + pos
    return TokenSequence(tokens.astype(np.float32), g, g)


def encoder_block(z: np.ndarray, p: dict, cfg: ModelConfig, keep: bool = False):
    """One pre-norm block over ``z[..., N, D]`` (leading axes are independent sequences).

    Returns (z_out, head-averaged class-token attention ``[..., N]``,
    per-head attention ``[..., H, N, N]`` or None).
    """
    *lead, n, _ = z.shape
    h, hd = cfg.heads, cfg.head_dim

    def split_heads(t):
        return t.reshape(*lead, n, h, hd).swapaxes(-2, -3)

    x = nk.layer_norm(z, p["ln1_g"], p["ln1_b"], cfg.eps)
    q = split_heads(nk.linear(x, p["wq"], p["bq"]))
    k = split_heads(nk.linear(x, p["wk"], p["bk"]))
    v = split_heads(nk.linear(x, p["wv"], p["bv"]))
    scores = np.matmul(q, k.swapaxes(-1, -2)) * np.float32(1.0 / np.sqrt(hd))
    attn = nk.softmax(scores)
    heads = np.matmul(attn, v).swapaxes(-2, -3).reshape(*lead, n, cfg.dim)
    z = z + nk.linear(heads, p["wo"], p["bo"])

    x = nk.layer_norm(z, p["ln2_g"], p["ln2_b"], cfg.eps)
    z = z + nk.linear(nk.gelu(nk.linear(x, p["fc1"], p["fc1_b"])), p["fc2"], p["fc2_b"])
    return z, attn[..., 0, :].mean(axis=-2), (attn if keep else None)


def encode_tokens(z, w: WeightStore, cfg: ModelConfig, keep_attention: bool = False):
    """Run all blocks on ``z[..., N, D]``.

    Returns (z_out, class-attention rows ``[..., L, N]``, list of per-layer
    attention arrays or None).
    """
    z = nk.as_tensor(z)
    if z.ndim < 2 or z.shape[-1] != cfg.dim:
        raise DimensionError(f"token matrix shape {z.shape} does not match dim {cfg.dim}")
    rows = []
    full = [] if keep_attention else None
    for i in range(cfg.depth):
        z, cls_row, attn = encoder_block(z, w.block(i), cfg, keep_attention)
        rows.append(cls_row)
        if keep_attention:
            full.append(attn)
    return z, np.stack(rows, axis=-2), full


def encode(seq: TokenSequence, w: WeightStore, cfg: ModelConfig, keep_attention: bool = False):
    z = nk.as_tensor(seq.tokens)
    if z.ndim != 2:
        raise DimensionError(f"expected an (N+1, D) token matrix, got shape {z.shape}")
    z, rows, full = encode_tokens(z, w, cfg, keep_attention)
    out = TokenSequence(z, seq.grid_rows, seq.grid_cols, seq.positions)
    return out, ClassAttentionTrace(rows, full)


def logits(seq: TokenSequence, w: WeightStore) -> np.ndarray:
    return nk.linear(seq.class_token, w["head_w"], w["head_b"])


def classify(seq: TokenSequence, w: WeightStore):
    """Returns (probs, pred, conf); ties in the argmax go to the lowest index."""
    probs = nk.softmax(logits(seq, w))
    pred = int(np.argmax(probs))
    return probs, pred, float(probs[pred])
