"""Procedural training corpus, rule-based segmenter and PNG ingestion.

Scenes are 16x16 RGB images: a solid background with one filled rectangle
or disc per 8x8 quadrant. Every quadrant's object is sampled independently,
so a perfect generator can vary one quadrant without touching the others.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from pydantic import TypeAdapter

from .models import (
    IMAGE_CHANNELS,
    IMAGE_SIZE,
    QUADRANT_SIZE,
    QuadrantObjectV1,
    SceneFactorsV1,
    SemanticLabel,
    ShapeKind,
)


LOGGER = logging.getLogger("linklab.synthdata")

DEFAULT_SEGMENT_THRESHOLD = 0.25
MIN_OBJECT_CONTRAST = 0.5
QUADRANT_LABELS = ("quadrant_tl", "quadrant_tr", "quadrant_bl", "quadrant_br")
MANIFEST_NAME = "manifest.json"

_MANIFEST = TypeAdapter(list[SceneFactorsV1])


class EmptyImageDirectoryError(FileNotFoundError):
    """Raised when a directory yields no readable PNG images."""

    def __init__(self, *, path: Path, skipped: int = 0) -> None:
        super().__init__(f"no readable PNG images in {path} (skipped {skipped})")
        self.path = path
        self.skipped = skipped


@dataclass(frozen=True)
class Scene:
    """Rendered scene with ground-truth masks keyed by label."""

    image: np.ndarray
    masks: dict[str, np.ndarray] = field(repr=False)
    factors: SceneFactorsV1


# ---------------------------------------------------------------------
# Sampling and rendering
# ---------------------------------------------------------------------


def _sample_color(rng: np.random.Generator, background: np.ndarray) -> np.ndarray:
    while True:
        color = rng.uniform(-1.0, 1.0, size=IMAGE_CHANNELS)
        if np.max(np.abs(color - background)) >= MIN_OBJECT_CONTRAST:
            return color


def sample_factors(rng: np.random.Generator) -> SceneFactorsV1:
    background = rng.uniform(-1.0, 1.0, size=IMAGE_CHANNELS)
    quadrants = []
    for _ in QUADRANT_LABELS:
        shape = ShapeKind.RECT if rng.integers(2) == 0 else ShapeKind.DISC
        size = int(rng.integers(2, QUADRANT_SIZE - 1))
        top = int(rng.integers(1, QUADRANT_SIZE - size))
        left = int(rng.integers(1, QUADRANT_SIZE - size))
        color = _sample_color(rng, background)
        quadrants.append(
            QuadrantObjectV1(
                shape=shape,
                color=tuple(float(c) for c in color),
                top=top,
                left=left,
                size=size,
            )
        )
    return SceneFactorsV1(background=tuple(float(c) for c in background), quadrants=quadrants)


def quadrant_masks() -> dict[str, np.ndarray]:
    masks = {}
    for index, label in enumerate(QUADRANT_LABELS):
        mask = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
        row, col = (index // 2) * QUADRANT_SIZE, (index % 2) * QUADRANT_SIZE
        mask[row : row + QUADRANT_SIZE, col : col + QUADRANT_SIZE] = 1.0
        masks[label] = mask
    return masks


def _shape_mask(item: QuadrantObjectV1) -> np.ndarray:
    local = np.zeros((QUADRANT_SIZE, QUADRANT_SIZE))
    if item.shape == ShapeKind.RECT:
        local[item.top : item.top + item.size, item.left : item.left + item.size] = 1.0
        return local
    radius = item.size / 2.0
    center_row, center_col = item.top + radius, item.left + radius
    rows, cols = np.mgrid[0:QUADRANT_SIZE, 0:QUADRANT_SIZE] + 0.5
    local[(rows - center_row) ** 2 + (cols - center_col) ** 2 <= radius * radius] = 1.0
    return local


def render_scene(factors: SceneFactorsV1) -> Scene:
    """Deterministic rendering of one factor record."""
    image = np.empty((IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS))
    image[:] = np.asarray(factors.background)
    objects = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    for index, item in enumerate(factors.quadrants):
        row, col = (index // 2) * QUADRANT_SIZE, (index % 2) * QUADRANT_SIZE
        local = _shape_mask(item)
        objects[row : row + QUADRANT_SIZE, col : col + QUADRANT_SIZE] = local
        tile = image[row : row + QUADRANT_SIZE, col : col + QUADRANT_SIZE]
        tile[local > 0] = np.asarray(item.color)

    masks = {
        SemanticLabel.OBJECT.value: objects,
        SemanticLabel.BACKGROUND.value: 1.0 - objects,
        **quadrant_masks(),
    }
    return Scene(image=image, masks=masks, factors=factors)


def sample_scene(rng: np.random.Generator) -> Scene:
    return render_scene(sample_factors(rng))


def sample_corpus(seed: int, count: int) -> list[Scene]:
    """`count` scenes, each from its own stream forked from `seed`."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [sample_scene(np.random.default_rng(child)) for child in children]


def stack_images(scenes: Sequence[Scene]) -> np.ndarray:
    if not scenes:
        return np.zeros((0, IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS))
    return np.stack([scene.image for scene in scenes])


def write_manifest(factors: Sequence[SceneFactorsV1], path: Path) -> None:
    payload = [item.model_dump(mode="json") for item in factors]
    path.write_text(json.dumps(payload, indent=2, ensure_ascii=True) + "\n", encoding="utf-8")


def read_manifest(path: Path) -> list[SceneFactorsV1]:
    return _MANIFEST.validate_json(path.read_text(encoding="utf-8"))


def write_corpus(scenes: Sequence[Scene], out_dir: Path) -> Path:
    """Write scene PNGs plus the factor manifest; returns the manifest path."""
    out_dir.mkdir(parents=True, exist_ok=True)
    for index, scene in enumerate(scenes):
        save_png(scene.image, out_dir / f"scene_{index:05d}.png")
    manifest = out_dir / MANIFEST_NAME
    write_manifest([scene.factors for scene in scenes], manifest)
    return manifest


# ---------------------------------------------------------------------
# Segmentation
# ---------------------------------------------------------------------


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round((np.clip(image, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float64) / 127.5 - 1.0


def dominant_border_color(image: np.ndarray) -> np.ndarray:
    """Most frequent 8-bit-quantized colour along the image border."""
    border = np.concatenate([image[0], image[-1], image[1:-1, 0], image[1:-1, -1]], axis=0)
    quantized = to_uint8(border).astype(np.int64)
    colors, counts = np.unique(quantized, axis=0, return_counts=True)
    return from_uint8(colors[np.argmax(counts)])


def rule_segment(
    image: np.ndarray, threshold: float = DEFAULT_SEGMENT_THRESHOLD
) -> dict[SemanticLabel, np.ndarray]:
    """Label a pixel "object" iff its L-inf distance to the border colour exceeds `threshold`."""
    reference = dominant_border_color(image)
    objects = (np.max(np.abs(image - reference), axis=-1) > threshold).astype(np.float64)
    return {SemanticLabel.OBJECT: objects, SemanticLabel.BACKGROUND: 1.0 - objects}


# ---------------------------------------------------------------------
# PNG IO
# ---------------------------------------------------------------------


def save_png(image: np.ndarray, path: Path) -> None:
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def tile_images(images: Sequence[np.ndarray] | np.ndarray, columns: int | None = None, fill: float = 1.0) -> np.ndarray:
    """Row-major grid with 1-pixel separators; `columns` defaults to ceil(sqrt(n))."""
    tiles = [np.asarray(image) for image in images]
    if not tiles:
        raise ValueError("cannot tile an empty image list")
    height, width = tiles[0].shape[:2]
    channels = tiles[0].shape[2] if tiles[0].ndim == 3 else None
    columns = columns or int(np.ceil(np.sqrt(len(tiles))))
    rows = int(np.ceil(len(tiles) / columns))
    shape = (rows * height + rows - 1, columns * width + columns - 1)
    grid = np.full(shape if channels is None else (*shape, channels), fill, dtype=np.float64)
    for index, tile in enumerate(tiles):
        if tile.shape != tiles[0].shape:
            raise ValueError(f"tile {index} has shape {tile.shape}, expected {tiles[0].shape}")
        row, col = divmod(index, columns)
        top, left = row * (height + 1), col * (width + 1)
        grid[top : top + height, left : left + width] = tile
    return grid


def load_png(path: Path) -> np.ndarray:
    """Centre-crop to square, box-resize to 16x16, map [0, 255] to [-1, 1]."""
    with Image.open(path) as handle:
        rgb = handle.convert("RGB")
    width, height = rgb.size
    side = min(width, height)
    left, top = (width - side) // 2, (height - side) // 2
    square = rgb.crop((left, top, left + side, top + side))
    if square.size != (IMAGE_SIZE, IMAGE_SIZE):
        square = square.resize((IMAGE_SIZE, IMAGE_SIZE), resample=Image.Resampling.BOX)
    return from_uint8(np.asarray(square, dtype=np.uint8))


def load_png_dir(path: Path) -> list[np.ndarray]:
    """Load every readable PNG in `path` (sorted by name); unreadable files are skipped."""
    directory = Path(path)
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png") if directory.is_dir() else []
    if not files:
        raise EmptyImageDirectoryError(path=directory)

    images: list[np.ndarray] = []
    skipped = 0
    for file in files:
        try:
            images.append(load_png(file))
        except (OSError, UnidentifiedImageError, ValueError) as err:
            skipped += 1
            LOGGER.warning("png_skipped", extra={"path": str(file), "error": str(err)})

    LOGGER.info(
        "png_load_complete",
        extra={"path": str(directory), "loaded": len(images), "skipped": skipped},
    )
    if not images:
        raise EmptyImageDirectoryError(path=directory, skipped=skipped)
    return images
