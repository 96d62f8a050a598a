"""Image patching, visible-subset sampling, and the cross-image patch pool.

An image is tiled into non-overlapping s_p x s_p patches in row-major order.
A uniform random subset is kept for encoding; the held-out remainder feeds a
FIFO pool that supplies relevance-score candidates drawn from many images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class PatchingError(ValueError):
    pass


@dataclass(frozen=True)
class PatchGrid:
    """Row-major tiling of one image into non-overlapping square patches."""

    image_id: str
    side: int  # patch side in pixels
    rows: int
    cols: int
    patches: np.ndarray  # (N_P, side, side, 3)

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class PatchSet:
    """The kept (visible) subset of one image's patches."""

    image_id: str
    indices: tuple  # strictly increasing original grid indices
    patches: np.ndarray  # (len(indices), side, side, 3)


@dataclass(frozen=True)
class PoolEntry:
    image_id: str
    index: int
    patch: np.ndarray


def split(image: np.ndarray, side: int, image_id: str = "") -> PatchGrid:
    """Tile an H x W x 3 image into (H/side)*(W/side) patches, row-major."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise PatchingError("image must be H x W x 3")
    h, w, _ = img.shape
    if h % side or w % side:
        raise PatchingError(f"image size {h}x{w} not divisible by patch side {side}")
    rows, cols = h // side, w // side
    blocks = img.reshape(rows, side, cols, side, 3).swapaxes(1, 2).reshape(-1, side, side, 3)
    return PatchGrid(image_id=image_id, side=side, rows=rows, cols=cols, patches=blocks)


def reassemble(grid: PatchGrid) -> np.ndarray:
    """Inverse of split; exact round trip."""
    r, c, s = grid.rows, grid.cols, grid.side
    return grid.patches.reshape(r, c, s, s, 3).swapaxes(1, 2).reshape(r * s, c * s, 3)


def subset_size(n_patches: int, ratio: float) -> int:
    # round-half-up for cross-platform determinism
    return int(math.floor(ratio * n_patches + 0.5))


def sample_subset(grid: PatchGrid, ratio: float, rng: np.random.Generator):
    """Uniformly sample the kept subset; returns (PatchSet, held-out entries).

    Kept and held-out indices partition the grid exactly.
    """
    if not 0.0 < ratio < 1.0:
        raise PatchingError(f"sampling ratio must be in (0, 1), got {ratio}")
    n = grid.n_patches
    k = subset_size(n, ratio)
    kept = np.sort(rng.choice(n, size=k, replace=False))
    mask = np.zeros(n, dtype=bool)
    mask[kept] = True
    patch_set = PatchSet(
        image_id=grid.image_id,
        indices=tuple(int(i) for i in kept),
        patches=grid.patches[kept],
    )
    held_out = [
        PoolEntry(grid.image_id, int(i), grid.patches[i]) for i in np.flatnonzero(~mask)
    ]
    return patch_set, held_out


@dataclass
class PatchPool:
    """FIFO store of held-out patches from many images."""

    capacity: int = 4096
    entries: list = field(default_factory=list)

    def push(self, held_out):
        self.entries.extend(held_out)
        if len(self.entries) > self.capacity:
            del self.entries[: len(self.entries) - self.capacity]

    def __len__(self):
        return len(self.entries)

    def sample(self, k: int, exclude: str, rng: np.random.Generator) -> list:
        """Draw k entries without replacement, never from image `exclude`."""
        eligible = [e for e in self.entries if e.image_id != exclude]
        if k > len(eligible):
            raise PatchingError(
                f"requested {k} pool entries but only {len(eligible)} eligible"
            )
        idx = rng.choice(len(eligible), size=k, replace=False)
        return [eligible[int(i)] for i in idx]
