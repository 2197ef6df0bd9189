"""Annotations, ground-truth density maps, training patches and inference tiles.

Annotation files are JSON objects ``{"image": "<path>", "heads": [[x, y], ...]}``
with the image path relative to the annotation file.  A dataset index is a JSON
object mapping split names to lists of annotation paths (relative to the index).
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import DataError


@dataclass
class HeadAnnotations:
    image_id: str
    heads: np.ndarray  # (n, 2) float64, columns x, y
    image_path: Optional[str] = None
    height: Optional[int] = None
    width: Optional[int] = None

    @property
    def count(self) -> int:
        return int(self.heads.shape[0])


@dataclass
class DensityMap:
    grid: np.ndarray  # (H, W), persons per pixel

    @property
    def count(self) -> float:
        return float(self.grid.sum())

    @property
    def shape(self):
        return self.grid.shape


@dataclass
class PatchPair:
    image: np.ndarray  # (C, h, w)
    density: np.ndarray  # (h, w)
    origin: Tuple[int, int]
    flipped: bool = False


@dataclass
class TileLayout:
    height: int
    width: int
    boxes: List[Tuple[int, int, int, int]] = field(default_factory=list)  # (r0, r1, c0, c1)


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def load_image(path, channels: int = 1) -> np.ndarray:
    """Read an 8-bit PNG/PGM into a ``(channels, H, W)`` float64 array in [0, 1]."""
    if channels not in (1, 3):
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    try:
        with Image.open(path) as im:
            im = im.convert("L" if channels == 1 else "RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if channels == 1:
        return arr[None]
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(path, image: np.ndarray):
    """Write a ``(C, H, W)`` array in [0, 1] as 8-bit grayscale or RGB."""
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def _image_size(path) -> Tuple[int, int]:
    try:
        with Image.open(path) as im:
            w, h = im.size
    except (OSError, ValueError) as exc:
        raise DataError(f"annotation references unreadable image {path}: {exc}") from exc
    return h, w


def clamp_heads(heads: np.ndarray, height: int, width: int, source: str = "") -> np.ndarray:
    """Clamp head coordinates into ``[0, W-1] x [0, H-1]``, warning when anything moves."""
    heads = np.asarray(heads, dtype=np.float64).reshape(-1, 2)
    clamped = heads.copy()
    clamped[:, 0] = np.clip(clamped[:, 0], 0.0, width - 1)
    clamped[:, 1] = np.clip(clamped[:, 1], 0.0, height - 1)
    moved = np.any(clamped != heads, axis=1)
    if moved.any():
        warnings.warn(f"{source}: clamped {int(moved.sum())} head(s) into the "
                      f"{width}x{height} image", UserWarning, stacklevel=3)
    return clamped


def load_annotations(path, image_size: Optional[Tuple[int, int]] = None) -> HeadAnnotations:
    """Parse one annotation file.

    ``image_size`` as ``(H, W)`` skips opening the image; otherwise the image is
    opened to read its dimensions, and a missing image is an error.
    """
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as f:
            obj = json.load(f)
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed annotation JSON in {path}: {exc}") from exc
    except OSError as exc:
        raise DataError(f"cannot read annotation file {path}: {exc}") from exc
    if not isinstance(obj, dict) or "image" not in obj or "heads" not in obj:
        raise DataError(f"{path}: annotation must be an object with 'image' and 'heads'")
    try:
        heads = np.asarray(obj["heads"], dtype=np.float64).reshape(-1, 2)
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path}: heads must be a list of [x, y] pairs") from exc
    if not np.all(np.isfinite(heads)):
        raise DataError(f"{path}: non-finite head coordinate")
    image_path = os.path.join(os.path.dirname(path), obj["image"])
    if image_size is None:
        if not os.path.exists(image_path):
            raise DataError(f"{path}: referenced image {image_path} does not exist")
        image_size = _image_size(image_path)
    h, w = image_size
    heads = clamp_heads(heads, h, w, source=path)
    image_id = os.path.splitext(os.path.basename(obj["image"]))[0]
    return HeadAnnotations(image_id=image_id, heads=heads, image_path=image_path, height=h, width=w)


def write_annotations(path, image_rel: str, heads: Sequence[Sequence[float]]):
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"image": image_rel, "heads": [[float(x), float(y)] for x, y in heads]}, f)


def read_index(path, split: str) -> List[str]:
    """Annotation paths for ``split`` of a dataset index, resolved to absolute paths."""
    try:
        with open(path, encoding="utf-8") as f:
            index = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read dataset index {path}: {exc}") from exc
    if not isinstance(index, dict) or split not in index:
        raise DataError(f"dataset index {path} has no split {split!r}")
    base = os.path.dirname(os.path.abspath(path))
    return [os.path.join(base, p) for p in index[split]]


@dataclass
class Sample:
    image_id: str
    image: np.ndarray  # (C, H, W)
    heads: np.ndarray  # (n, 2)


def load_sample(annotation_path, channels: int) -> Sample:
    ann = load_annotations(annotation_path)
    image = load_image(ann.image_path, channels)
    return Sample(ann.image_id, image, ann.heads)


def load_dataset(index_path, split: str, channels: int) -> List[Sample]:
    return [load_sample(p, channels) for p in read_index(index_path, split)]


# ---------------------------------------------------------------------------
# ground truth
# ---------------------------------------------------------------------------

def generate_density_map(heads, height: int, width: int, sigma: float = 4.0) -> DensityMap:
    """Sum of per-head truncated Gaussians, each renormalised to unit in-image mass.

    The window extends ``ceil(3 * sigma)`` pixels around the head's nearest pixel.
    """
    if height <= 0 or width <= 0:
        raise ValueError(f"density map size must be positive, got {height}x{width}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if isinstance(heads, HeadAnnotations):
        heads = heads.heads
    heads = np.asarray(heads, dtype=np.float64).reshape(-1, 2)
    grid = np.zeros((height, width), dtype=np.float64)
    radius = int(math.ceil(3.0 * sigma))
    inv = 1.0 / (2.0 * sigma * sigma)
    for x, y in heads:
        cx = min(max(int(math.floor(x + 0.5)), 0), width - 1)
        cy = min(max(int(math.floor(y + 0.5)), 0), height - 1)
        r0, r1 = max(cy - radius, 0), min(cy + radius + 1, height)
        c0, c1 = max(cx - radius, 0), min(cx + radius + 1, width)
        dy = np.arange(r0, r1, dtype=np.float64) - y
        dx = np.arange(c0, c1, dtype=np.float64) - x
        bump = np.exp(-(dy[:, None] ** 2 + dx[None, :] ** 2) * inv)
        grid[r0:r1, c0:c1] += bump / bump.sum()
    return DensityMap(grid)


# ---------------------------------------------------------------------------
# patches and tiles
# ---------------------------------------------------------------------------

def _even_crop(image: np.ndarray, density: np.ndarray):
    # odd dims lose their last row/column so quadrants are exact halves
    H, W = density.shape
    return image[:, :H - H % 2, :W - W % 2], density[:H - H % 2, :W - W % 2]


def extract_training_patches(image: np.ndarray, density, rng: np.random.Generator) -> List[PatchPair]:
    """Four quadrants followed by five random quarter-size crops."""
    grid = density.grid if isinstance(density, DensityMap) else np.asarray(density)
    if image.shape[1:] != grid.shape:
        raise ValueError(f"image {image.shape} and density {grid.shape} disagree")
    if grid.shape[0] < 2 or grid.shape[1] < 2:
        raise ValueError(f"image {grid.shape} too small to split into patches")
    image, grid = _even_crop(image, grid)
    H, W = grid.shape
    h, w = H // 2, W // 2
    origins = [(0, 0), (0, w), (h, 0), (h, w)]
    for _ in range(5):
        origins.append((int(rng.integers(0, H - h + 1)), int(rng.integers(0, W - w + 1))))
    return [PatchPair(image[:, r:r + h, c:c + w].copy(), grid[r:r + h, c:c + w].copy(), (r, c))
            for r, c in origins]


def random_hflip(pair: PatchPair, rng: Optional[np.random.Generator] = None,
                 force: Optional[bool] = None) -> PatchPair:
    """Mirror image and density left-right with probability 0.5 (or when ``force``)."""
    flip = force if force is not None else bool(rng.random() < 0.5)
    if not flip:
        return pair
    return PatchPair(pair.image[:, :, ::-1].copy(), pair.density[:, ::-1].copy(),
                     pair.origin, not pair.flipped)


def tile_for_inference(image: np.ndarray) -> Tuple[List[np.ndarray], TileLayout]:
    """Split a ``(C, H, W)`` image into a 2x2 grid of non-overlapping tiles.

    Tiles are ``H//2 x W//2``; the bottom/right tiles absorb odd remainders.
    Dimensions of 1 yield a single tile along that axis.
    """
    H, W = image.shape[1:]
    rows = [(0, H // 2), (H // 2, H)] if H >= 2 else [(0, H)]
    cols = [(0, W // 2), (W // 2, W)] if W >= 2 else [(0, W)]
    layout = TileLayout(H, W)
    tiles = []
    for r0, r1 in rows:
        for c0, c1 in cols:
            layout.boxes.append((r0, r1, c0, c1))
            tiles.append(image[:, r0:r1, c0:c1].copy())
    return tiles, layout


def reassemble(tiles: Sequence[np.ndarray], layout: TileLayout) -> np.ndarray:
    """Inverse of :func:`tile_for_inference` for ``(C, h, w)`` or ``(h, w)`` tiles."""
    lead = tiles[0].shape[:-2]
    out = np.zeros(lead + (layout.height, layout.width), dtype=np.asarray(tiles[0]).dtype)
    for tile, (r0, r1, c0, c1) in zip(tiles, layout.boxes):
        out[..., r0:r1, c0:c1] = tile
    return out
