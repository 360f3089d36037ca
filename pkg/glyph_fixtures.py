"""
Glyph fixtures in KanjiVG file layout.

Each glyph is a 109x109 SVG whose strokes are ordered <path> elements written as
an absolute moveto followed by relative cubics, the way KanjiVG files are. The
strokes are composed from the basic calligraphic strokes (horizontal, vertical,
left-falling, right-falling, dot) by a seeded generator, so the set is stable
across runs without shipping third-party data.
"""
import logging
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

logger = logging.getLogger(__name__)

FIXTURE_COUNT = 50
FIXTURE_SEED = 109
VIEWBOX = 109

SVG_TEMPLATE = """<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" xmlns:kvg="http://kanjivg.tagaini.net" width="109" height="109" viewBox="0 0 109 109">
<g id="kvg:StrokePaths_{name}" style="fill:none;stroke:#000000;stroke-width:3;stroke-linecap:round;stroke-linejoin:round;">
<g id="kvg:{name}" kvg:element="{name}">
{paths}
</g>
</g>
</svg>
"""

StrokeSpec = Tuple[Tuple[float, float], Tuple[float, float], float]


def _basic_stroke(kind: str, rng: np.random.Generator) -> StrokeSpec:
    """(start, end, bow) for one stroke kind; bow bends the cubic sideways."""
    if kind == "horizontal":
        y = rng.uniform(20, 90)
        x0 = rng.uniform(15, 40)
        return (x0, y), (x0 + rng.uniform(30, 60), y + rng.uniform(-3, 1)), rng.uniform(-2, 2)
    if kind == "vertical":
        x = rng.uniform(20, 90)
        y0 = rng.uniform(12, 35)
        return (x, y0), (x + rng.uniform(-1, 1), y0 + rng.uniform(35, 65)), rng.uniform(-1.5, 1.5)
    if kind == "left_falling":
        x0, y0 = rng.uniform(45, 80), rng.uniform(15, 45)
        return (x0, y0), (x0 - rng.uniform(20, 35), y0 + rng.uniform(25, 45)), rng.uniform(3, 8)
    if kind == "right_falling":
        x0, y0 = rng.uniform(25, 55), rng.uniform(30, 55)
        return (x0, y0), (x0 + rng.uniform(20, 35), y0 + rng.uniform(20, 35)), rng.uniform(-6, -2)
    x0, y0 = rng.uniform(25, 85), rng.uniform(15, 80)
    return (x0, y0), (x0 + rng.uniform(3, 7), y0 + rng.uniform(4, 8)), rng.uniform(-1, 1)


def _path_data(start: Tuple[float, float], end: Tuple[float, float], bow: float) -> str:
    (x0, y0), (x1, y1) = start, end
    dx, dy = x1 - x0, y1 - y0
    length = max(np.hypot(dx, dy), 1e-9)
    nx, ny = -dy / length * bow, dx / length * bow
    c1 = (dx / 3 + nx, dy / 3 + ny)
    c2 = (2 * dx / 3 + nx, 2 * dy / 3 + ny)
    return (f"M{x0:.2f},{y0:.2f}c{c1[0]:.2f},{c1[1]:.2f} "
            f"{c2[0]:.2f},{c2[1]:.2f} {dx:.2f},{dy:.2f}")


def glyph_strokes(index: int) -> List[str]:
    rng = np.random.default_rng([FIXTURE_SEED, index])
    kinds = ["horizontal", "vertical", "left_falling", "right_falling", "dot"]
    count = int(rng.integers(2, 6))
    chosen = [kinds[i] for i in rng.choice(len(kinds), size=count, p=[0.3, 0.3, 0.15, 0.15, 0.1])]
    return [_path_data(*_basic_stroke(kind, rng)) for kind in chosen]


def glyph_name(index: int) -> str:
    return f"g{index:04x}"


def glyph_document(index: int) -> str:
    name = glyph_name(index)
    paths = "\n".join(f'<path id="kvg:{name}-s{number}" kvg:type="stroke" d="{d}"/>'
                      for number, d in enumerate(glyph_strokes(index), start=1))
    return SVG_TEMPLATE.format(name=name, paths=paths)


def glyph_documents(count: int = FIXTURE_COUNT) -> Dict[str, str]:
    return {glyph_name(i): glyph_document(i) for i in range(count)}


def write_fixtures(directory: str | Path, count: int = FIXTURE_COUNT) -> List[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, document in glyph_documents(count).items():
        path = directory / f"{name}.svg"
        path.write_text(document, encoding="utf-8")
        written.append(path)
    logger.info(f"Wrote {len(written)} glyph fixtures to {directory}")
    return written


def load_glyph_directory(directory: str | Path) -> Dict[str, str]:
    return {path.stem: path.read_text(encoding="utf-8") for path in sorted(Path(directory).glob("*.svg"))}
