"""Focus-stage input construction.

Localization features are upsampled onto the full-resolution patch grid,
the selected window is mapped to fine token indices, the top-scoring
fraction of those is re-embedded from the original image (and fused with
the aligned features) while every other position reuses aligned or
localization features.
"""

from dataclasses import dataclass

import numpy as np

from lfvit import numkern as nk
from lfvit.attention_maps import GcaMap, Region
from lfvit.backbone import TokenSequence, patch_embed
from lfvit.config import ModelConfig
from lfvit.errors import ConfigError, DimensionError
from lfvit.weights import WeightStore


@dataclass
class AlignedFeatures:
    """``f_prime``: (N_fine, D) aligned features; ``coarse``: the (N_coarse, D) source tokens."""

    f_prime: np.ndarray
    coarse: np.ndarray


@dataclass
class FocusPlan:
    fresh: list
    reused_region: list
    reused_background: list
    region: Region
    mode: str

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "region": self.region.to_dict(),
            "fresh": list(self.fresh),
            "reused_region": list(self.reused_region),
            "reused_background": list(self.reused_background),
            "background_grid": "fine" if self.mode == "full_sequence" else "coarse",
        }


def upsample_nearest(grid: np.ndarray, factor: int = 2) -> np.ndarray:
    """Replicate each cell of the two leading axes into a factor x factor block."""
    return np.repeat(np.repeat(grid, factor, axis=0), factor, axis=1)


def align_features(z_final: TokenSequence, w: WeightStore, cfg: ModelConfig,
                   activation: bool = True) -> AlignedFeatures:
    g = cfg.coarse_side
    coarse = z_final.patch_tokens
    if (z_final.grid_rows, z_final.grid_cols) != (g, g) or coarse.shape[0] != g * g:
        raise DimensionError(
            f"expected a {g}x{g} localization grid, got {z_final.grid_rows}x{z_final.grid_cols} "
            f"with {coarse.shape[0]} tokens"
        )
    fine = upsample_nearest(coarse.reshape(g, g, cfg.dim))
    fine = nk.linear(fine.reshape(cfg.n_fine, cfg.dim), w["align_w"], w["align_b"])
    if activation:
        fine = nk.gelu(fine)
    return AlignedFeatures(fine, np.asarray(coarse))


def region_to_fine_indices(region: Region, fine_side: int) -> np.ndarray:
    """Row-major fine-grid indices of the 2m x 2m block covering ``region``."""
    span = 2 * region.size
    rows = np.arange(2 * region.top_row, 2 * region.top_row + span)
    cols = np.arange(2 * region.top_col, 2 * region.top_col + span)
    return (rows[:, None] * fine_side + cols[None, :]).ravel()


def region_coarse_mask(region: Region, side: int) -> np.ndarray:
    mask = np.zeros((side, side), dtype=bool)
    mask[region.top_row:region.top_row + region.size, region.top_col:region.top_col + region.size] = True
    return mask.ravel()


def build_focus_plan(region: Region, gca: GcaMap, cfg: ModelConfig) -> FocusPlan:
    """Split the upsampled region into fresh (top-K by GCA) and reused tokens."""
    k = cfg.n_fresh
    if k < 1:
        raise ConfigError(
            f"alpha={cfg.alpha} selects no tokens from a {2 * region.size}x{2 * region.size} region"
        )
    fine_scores = upsample_nearest(np.asarray(gca.grid)).ravel()
    region_idx = region_to_fine_indices(region, cfg.fine_side)
    # descending score, ascending index on ties
    order = np.lexsort((region_idx, -fine_scores[region_idx]))
    ranked = region_idx[order]
    fresh = sorted(int(i) for i in ranked[:k])
    reused = sorted(int(i) for i in ranked[k:])

    if cfg.focus_mode == "full_sequence":
        inside = np.zeros(cfg.n_fine, dtype=bool)
        inside[region_idx] = True
        background = np.flatnonzero(~inside)
    else:
        background = np.flatnonzero(~region_coarse_mask(region, cfg.coarse_side))
    return FocusPlan(fresh, reused, [int(i) for i in background], region, cfg.focus_mode)


def fuse_and_assemble(image, plan: FocusPlan, aligned: AlignedFeatures, w: WeightStore,
                      cfg: ModelConfig) -> TokenSequence:
    image = nk.as_tensor(image)
    if image.shape != (3, cfg.image_side, cfg.image_side):
        raise DimensionError(
            f"focus stage needs the original (3, {cfg.image_side}, {cfg.image_side}) image, "
            f"got {image.shape}"
        )
    pos = w["pos_embed"]
    fresh = np.asarray(plan.fresh, dtype=int)
    fresh_tokens = patch_embed(image, w, fresh) + pos[1 + fresh] + aligned.f_prime[fresh]
    cls = (w["cls_token"] + pos[0])[None, :]

    if plan.mode == "full_sequence":
        body = aligned.f_prime.copy()
        body[fresh] = fresh_tokens
        tokens = np.concatenate([cls, body])
        return TokenSequence(tokens.astype(np.float32), cfg.fine_side, cfg.fine_side)

    reused = np.asarray(plan.reused_region, dtype=int)
    background = np.asarray(plan.reused_background, dtype=int)
    tokens = np.concatenate([
        cls,
        fresh_tokens,
        aligned.f_prime[reused].reshape(-1, cfg.dim),
        aligned.coarse[background].reshape(-1, cfg.dim),
    ])
    positions = ([("fine", int(i)) for i in fresh] + [("fine", int(i)) for i in reused]
                 + [("coarse", int(i)) for i in background])
    return TokenSequence(tokens.astype(np.float32), cfg.fine_side, cfg.fine_side, positions)
