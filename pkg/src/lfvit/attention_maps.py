"""Cross-layer class-attention averaging and window-based region selection."""

import json
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from lfvit.backbone import ClassAttentionTrace
from lfvit.errors import ConfigError, DimensionError
from lfvit.imageio import encode_pgm

VARIANTS = ("ngca", "negative_ngca", "max_gca", "min_gca", "random")


@dataclass
class GcaMap:
    """Moving-average class attention over the patch tokens, laid out on the grid."""

    grid: np.ndarray

    @property
    def rows(self) -> int:
        return self.grid.shape[0]

    @property
    def cols(self) -> int:
        return self.grid.shape[1]


@dataclass(frozen=True)
class Region:
    """An m x m window on the localization grid, anchored at its top-left cell."""

    top_row: int
    top_col: int
    size: int
    score: float = 0.0

    def to_dict(self) -> dict:
        return {"top_row": self.top_row, "top_col": self.top_col, "size": self.size, "score": self.score}

    def cells(self):
        for r in range(self.top_row, self.top_row + self.size):
            for c in range(self.top_col, self.top_col + self.size):
                yield r, c


def accumulate_gca(trace: ClassAttentionTrace, beta: float, rows: int = None, cols: int = None) -> GcaMap:
    """Exponential moving average of class attention from layer 2 to layer L.

    The average starts at layer 2's attention and folds in layers 3..L with
    momentum ``beta``.  The class token's own entry is dropped (not
    renormalised) and the patch entries are reshaped row-major.
    """
    per_layer = np.asarray(trace.per_layer, dtype=np.float64)
    depth = per_layer.shape[0]
    if depth < 3:
        raise ConfigError(f"moving-average class attention needs depth >= 3, got {depth}")
    avg = per_layer[1].copy()
    for layer in per_layer[2:]:
        avg = beta * avg + (1.0 - beta) * layer
    patches = avg[1:]
    n = patches.shape[0]
    if rows is None and cols is None:
        rows = cols = int(round(np.sqrt(n)))
    if rows * cols != n:
        raise DimensionError(f"{n} patch entries do not fill a {rows}x{cols} grid")
    return GcaMap(patches.reshape(rows, cols).astype(np.float32))


def ngca_scan(gca: GcaMap, m: int) -> np.ndarray:
    """Sum of every m x m window; output shape (rows-m+1, cols-m+1).

    Sums are accumulated in float64.  For float32 inputs of ordinary dynamic
    range every partial sum is exact, so equal windows compare equal no
    matter the summation order.
    """
    grid = np.asarray(gca.grid if isinstance(gca, GcaMap) else gca, dtype=np.float64)
    if m < 1 or m > min(grid.shape):
        raise DimensionError(f"window size {m} does not fit a {grid.shape[0]}x{grid.shape[1]} grid")
    return sliding_window_view(grid, (m, m)).sum(axis=(-2, -1))


def _region_at(flat_index: int, ngca: np.ndarray, m: int) -> Region:
    r, c = divmod(int(flat_index), ngca.shape[1])
    return Region(r, c, m, float(ngca[r, c]))


def select_region(ngca: np.ndarray, m: int) -> Region:
    """Highest-scoring window; ties go to the first in row-major order."""
    ngca = np.asarray(ngca)
    if ngca.size == 0:
        raise DimensionError("empty NGCA map")
    return _region_at(np.argmax(ngca), ngca, m)


def _centered_on(cell: int, gca: GcaMap, m: int, ngca: np.ndarray) -> Region:
    r, c = divmod(int(cell), gca.cols)
    top = min(max(r - (m - 1) // 2, 0), gca.rows - m)
    left = min(max(c - (m - 1) // 2, 0), gca.cols - m)
    return Region(top, left, m, float(ngca[top, left]))


def select_region_variant(gca: GcaMap, m: int, variant: str = "ngca", seed: int = 0) -> Region:
    """Alternative region pickers used for ablation.

    ``max_gca``/``min_gca`` centre the window on the extreme cell (for even
    ``m`` the cell sits just above-left of centre) and clamp it into the grid.
    ``random`` picks uniformly among all windows with ``numpy.random.default_rng(seed)``.
    """
    ngca = ngca_scan(gca, m)
    if variant == "ngca":
        return select_region(ngca, m)
    if variant == "negative_ngca":
        return _region_at(np.argmin(ngca), ngca, m)
    if variant == "max_gca":
        return _centered_on(np.argmax(gca.grid), gca, m, ngca)
    if variant == "min_gca":
        return _centered_on(np.argmin(gca.grid), gca, m, ngca)
    if variant == "random":
        rng = np.random.default_rng(seed)
        return _region_at(rng.integers(ngca.size), ngca, m)
    raise ConfigError(f"unknown region variant {variant!r}; expected one of {VARIANTS}")


def to_pgm(values) -> bytes:
    """8-bit binary PGM of a 2-D map, min-max normalised (constant map -> all zeros)."""
    grid = np.asarray(values, dtype=np.float64)
    if grid.ndim != 2:
        raise DimensionError(f"heatmap must be 2-D, got shape {grid.shape}")
    lo, hi = grid.min(), grid.max()
    scaled = np.zeros(grid.shape) if hi == lo else (grid - lo) / (hi - lo) * 255.0
    return encode_pgm(np.rint(scaled).astype(np.uint8))


def to_json(values) -> str:
    grid = np.asarray(values, dtype=np.float64)
    return json.dumps({"rows": grid.shape[0], "cols": grid.shape[1], "values": grid.tolist()})
