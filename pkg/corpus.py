"""
Reference corpora: the procedural desk set, reference images on disk, and random
evaluation patches cut from them.
"""
import logging
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from canvas import BrushConfig, Canvas, blank_canvas, load_image, stamp_polyline
from errors import CorpusError

logger = logging.getLogger(__name__)

DESK_CORPUS_SEED = 20231
IMAGE_SUFFIXES = (".png", ".ppm", ".pgm")
INK = (0.0, 0.0, 0.0)


def _render(size: int, polylines, radius: float, channels: int = 1) -> Canvas:
    canvas = blank_canvas(size, size, channels, 1.0)
    # opacity-1 dabs; the brush reach does not matter for stamping
    config = BrushConfig(window_h=2, window_w=2)
    for points in polylines:
        canvas = stamp_polyline(canvas, points, radius, INK, config)
    return canvas


def disk(size: int, rng: np.random.Generator, channels: int = 1) -> Canvas:
    center = rng.uniform(0.35 * size, 0.65 * size, size=2)
    radius = rng.uniform(0.12 * size, 0.22 * size)
    return _render(size, [[center, center]], radius, channels)


def bar(size: int, rng: np.random.Generator, diagonal: bool = False, channels: int = 1) -> Canvas:
    half = rng.uniform(0.25 * size, 0.35 * size)
    center = rng.uniform(0.4 * size, 0.6 * size, size=2)
    angle = rng.uniform(0.6, 0.9) if diagonal else rng.uniform(-0.08, 0.08)
    direction = np.array([np.sin(angle), np.cos(angle)])
    radius = rng.uniform(0.05 * size, 0.09 * size)
    return _render(size, [[center - half * direction, center + half * direction]], radius, channels)


def cross(size: int, rng: np.random.Generator, channels: int = 1) -> Canvas:
    """Two strokes: one along the rows, one along the columns."""
    center = rng.uniform(0.4 * size, 0.6 * size, size=2)
    half = rng.uniform(0.25 * size, 0.33 * size)
    radius = rng.uniform(0.05 * size, 0.08 * size)
    strokes = [[center - (half, 0.0), center + (half, 0.0)], [center - (0.0, half), center + (0.0, half)]]
    return _render(size, strokes, radius, channels)


def desk_corpus(size: int = 32, seed: int = DESK_CORPUS_SEED, channels: int = 1) -> Dict[str, Canvas]:
    """The four procedural training references."""
    rng = np.random.default_rng(seed)
    return {
        "disk": disk(size, rng, channels),
        "bar": bar(size, rng, channels=channels),
        "diagonal": bar(size, rng, diagonal=True, channels=channels),
        "cross": cross(size, rng, channels),
    }


def holdout_disk(size: int = 32, seed: int = DESK_CORPUS_SEED + 1, channels: int = 1) -> Canvas:
    return disk(size, np.random.default_rng(seed), channels)


def load_reference_images(directory: str | Path, channels: Optional[int] = None) -> Dict[str, Canvas]:
    directory = Path(directory)
    if not directory.is_dir():
        raise CorpusError(f"corpus directory {directory} does not exist")
    images = {path.stem: load_image(path, channels)
              for path in sorted(directory.iterdir()) if path.suffix.lower() in IMAGE_SUFFIXES}
    if not images:
        raise CorpusError(f"no PNG/PPM/PGM images in {directory}")
    logger.info(f"Loaded {len(images)} reference images from {directory}")
    return images


def sample_patches(images: Dict[str, Canvas], count: int, size: int,
                   rng: np.random.Generator) -> Dict[str, Canvas]:
    """`count` random size x size crops, drawn uniformly over images then positions."""
    names = sorted(images)
    if not names:
        raise CorpusError("cannot sample patches from an empty corpus")
    for name in names:
        height, width = images[name].shape[:2]
        if height < size or width < size:
            raise CorpusError(f"image {name} ({height}x{width}) is smaller than the {size}px patch")
    patches = {}
    for index in range(count):
        name = names[int(rng.integers(len(names)))]
        image = images[name]
        row = int(rng.integers(image.shape[0] - size + 1))
        col = int(rng.integers(image.shape[1] - size + 1))
        patches[f"{index:04d}:{name}@{row},{col}"] = image[row:row + size, col:col + size].copy()
    return patches


def desk_eval_images(size: int = 96, seed: int = DESK_CORPUS_SEED + 2, channels: int = 1) -> Dict[str, Canvas]:
    """Four larger procedural images to cut evaluation patches from when no image directory is set."""
    rng = np.random.default_rng(seed)
    return {
        "disks": np.minimum(disk(size, rng, channels), disk(size, rng, channels)),
        "bars": np.minimum(bar(size, rng, channels=channels), bar(size, rng, diagonal=True, channels=channels)),
        "cross": cross(size, rng, channels),
        "mixed": np.minimum(disk(size, rng, channels), cross(size, rng, channels)),
    }
