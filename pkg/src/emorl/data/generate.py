"""Procedural sprite scenes with exact per-pixel ground-truth masks.

Rendering is a pure function of the stored (float32) factors plus draw order,
so re-rendering from a saved factor table reproduces the saved image bit for
bit. Later-drawn objects occlude earlier ones; masks cover visible pixels only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..config import GeneratorPreset


class GenerationError(Exception):
    pass


# Free tetromino shapes as (col, row) cell lists, origin at the bounding box corner.
TETROMINO_CELLS: dict[int, list[tuple[int, int]]] = {
    0: [(0, 0), (1, 0), (2, 0), (3, 0)],  # I
    1: [(0, 0), (1, 0), (0, 1), (1, 1)],  # O
    2: [(0, 0), (1, 0), (2, 0), (1, 1)],  # T
    3: [(1, 0), (2, 0), (0, 1), (1, 1)],  # S
    4: [(0, 0), (1, 0), (1, 1), (2, 1)],  # Z
    5: [(0, 0), (0, 1), (1, 1), (2, 1)],  # J
    6: [(2, 0), (0, 1), (1, 1), (2, 1)],  # L
}

SPRITE_SHAPES = ("ellipse", "square", "triangle")


@dataclass
class ObjectFactors:
    shape_id: int
    color: np.ndarray      # (3,) float32 in [0, 1]
    scale: float           # fraction of image height
    position: np.ndarray   # (2,) float32, (x, y) in [0, 1]^2
    angle: float           # radians in [0, 2*pi)


@dataclass
class SceneFactors:
    objects: list[ObjectFactors]
    background_color: np.ndarray  # (3,) float32


@dataclass
class Scene:
    image: np.ndarray       # (H, W, 3) uint8
    true_masks: np.ndarray  # (n_objects + 1, H, W) bool, index 0 = background
    factors: SceneFactors

    @property
    def labels(self) -> np.ndarray:
        """Per-pixel integer labels, 0 = background."""
        return np.argmax(self.true_masks, axis=0)


def _pixel_centers(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:h, 0:w]
    return xs + 0.5, ys + 0.5


def _rotated_cells(shape_id: int, quarter: int) -> np.ndarray:
    """Cell centers of a tetromino rotated by quarter*90deg, centered on its centroid."""
    cells = np.array(TETROMINO_CELLS[shape_id], dtype=np.float64) + 0.5
    for _ in range(quarter % 4):
        cells = np.stack([cells[:, 1], -cells[:, 0]], axis=1)
    return cells - cells.mean(axis=0)


def _tetromino_mask(obj: ObjectFactors, h: int, w: int) -> np.ndarray:
    cell = float(obj.scale) * h
    quarter = int(round(float(obj.angle) / (math.pi / 2))) % 4
    offsets = _rotated_cells(obj.shape_id, quarter) * cell
    cx = float(obj.position[0]) * w
    cy = float(obj.position[1]) * h
    px, py = _pixel_centers(h, w)
    mask = np.zeros((h, w), dtype=bool)
    half = cell / 2
    for ox, oy in offsets:
        mx = np.abs(px - (cx + ox)) < half
        my = np.abs(py - (cy + oy)) < half
        mask |= mx & my
    return mask


def _sprite_mask(obj: ObjectFactors, h: int, w: int) -> np.ndarray:
    a = float(obj.scale) * h / 2  # half extent in pixels
    cx = float(obj.position[0]) * w
    cy = float(obj.position[1]) * h
    px, py = _pixel_centers(h, w)
    # rotate pixel offsets into the shape frame
    c, s = math.cos(-float(obj.angle)), math.sin(-float(obj.angle))
    dx = px - cx
    dy = py - cy
    rx = c * dx - s * dy
    ry = s * dx + c * dy
    kind = SPRITE_SHAPES[obj.shape_id]
    if kind == "ellipse":
        return rx * rx + ry * ry <= a * a
    if kind == "square":
        return np.maximum(np.abs(rx), np.abs(ry)) <= a
    # equilateral triangle inscribed in the radius-a circle, apex pointing up
    # (up = negative image y); inside = on the inner side of all three edges
    verts = [
        (a * math.cos(t), -a * math.sin(t))
        for t in (math.pi / 2, math.pi * 7 / 6, math.pi * 11 / 6)
    ]
    inside = np.ones_like(rx, dtype=bool)
    for (x0, y0), (x1, y1) in zip(verts, verts[1:] + verts[:1]):
        inside &= (x1 - x0) * (ry - y0) - (y1 - y0) * (rx - x0) <= 0
    return inside


def _object_mask(obj: ObjectFactors, preset: GeneratorPreset) -> np.ndarray:
    if preset.kind == "tetromino":
        return _tetromino_mask(obj, preset.height, preset.width)
    return _sprite_mask(obj, preset.height, preset.width)


def render_scene(factors: SceneFactors, preset: GeneratorPreset) -> tuple[np.ndarray, np.ndarray]:
    """Rasterize factors (in draw order) into (image uint8, masks bool)."""
    h, w = preset.height, preset.width
    labels = np.zeros((h, w), dtype=np.int32)
    for i, obj in enumerate(factors.objects):
        m = _object_mask(obj, preset)
        labels[m] = i + 1
    n = len(factors.objects)
    masks = np.zeros((n + 1, h, w), dtype=bool)
    for i in range(n + 1):
        masks[i] = labels == i
    image = np.empty((h, w, 3), dtype=np.uint8)
    bg = np.round(factors.background_color.astype(np.float64) * 255).astype(np.uint8)
    image[:] = bg
    for i, obj in enumerate(factors.objects):
        col = np.round(obj.color.astype(np.float64) * 255).astype(np.uint8)
        image[masks[i + 1]] = col
    return image, masks


def _max_extent_px(preset: GeneratorPreset) -> float:
    if preset.kind == "tetromino":
        return 4.0 * preset.cell_size  # longest piece bounding box (I)
    a = preset.scale_range[1] * preset.height / 2
    return 2 * a * math.sqrt(2.0)  # rotated square circumcircle


def _sample_color(rng: np.random.Generator, preset: GeneratorPreset) -> np.ndarray:
    if preset.palette is not None:
        c = preset.palette[int(rng.integers(len(preset.palette)))]
        return np.asarray(c, dtype=np.float32)
    return rng.uniform(0.0, 1.0, size=3).astype(np.float32)


def _sample_tetromino(rng: np.random.Generator, preset: GeneratorPreset) -> ObjectFactors:
    h, w = preset.height, preset.width
    shape_id = int(rng.integers(len(TETROMINO_CELLS)))
    quarter = int(rng.integers(4))
    cell = preset.cell_size
    offsets = _rotated_cells(shape_id, quarter) * cell
    # snap the piece to the pixel grid: pick an integer anchor such that all
    # cells land fully inside the image
    lo = offsets.min(axis=0) - cell / 2
    hi = offsets.max(axis=0) + cell / 2
    max_x = w - hi[0] + lo[0]
    max_y = h - hi[1] + lo[1]
    if max_x < 0 or max_y < 0:
        raise GenerationError(
            f"preset {preset.name!r}: object extent exceeds {h}x{w} image bounds"
        )
    ax = int(rng.integers(int(max_x) + 1))
    ay = int(rng.integers(int(max_y) + 1))
    cx = ax - lo[0]
    cy = ay - lo[1]
    return ObjectFactors(
        shape_id=shape_id,
        color=_sample_color(rng, preset),
        scale=np.float32(cell / h),
        position=np.array([cx / w, cy / h], dtype=np.float32),
        angle=np.float32(quarter * math.pi / 2),
    )


def _sample_sprite(rng: np.random.Generator, preset: GeneratorPreset) -> ObjectFactors:
    h, w = preset.height, preset.width
    shape_id = int(rng.integers(len(SPRITE_SHAPES)))
    scale = np.float32(rng.uniform(*preset.scale_range))
    angle = np.float32(rng.uniform(0.0, 2 * math.pi))
    a = float(scale) * h / 2
    rc = a * math.sqrt(2.0)  # circumradius bound, covers all three shapes
    if 2 * rc > min(h, w):
        raise GenerationError(
            f"preset {preset.name!r}: object extent exceeds {h}x{w} image bounds"
        )
    cx = rng.uniform(rc, w - rc)
    cy = rng.uniform(rc, h - rc)
    return ObjectFactors(
        shape_id=shape_id,
        color=_sample_color(rng, preset),
        scale=scale,
        position=np.array([cx / w, cy / h], dtype=np.float32),
        angle=angle,
    )


def generate_scene(seed: int, preset: GeneratorPreset) -> Scene:
    """Deterministically sample and render one scene for (seed, preset)."""
    if _max_extent_px(preset) > min(preset.height, preset.width):
        raise GenerationError(
            f"preset {preset.name!r}: max object extent exceeds image bounds"
        )
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    lo, hi = preset.count_range
    n = int(rng.integers(lo, hi + 1))
    objects: list[ObjectFactors] = []
    occupied = np.zeros((preset.height, preset.width), dtype=bool)
    for _ in range(n):
        for attempt in range(preset.max_place_attempts):
            obj = (
                _sample_tetromino(rng, preset)
                if preset.kind == "tetromino"
                else _sample_sprite(rng, preset)
            )
            m = _object_mask(obj, preset)
            if preset.allow_overlap or not (m & occupied).any():
                occupied |= m
                objects.append(obj)
                break
        else:
            raise GenerationError(
                f"could not place object {len(objects)} after "
                f"{preset.max_place_attempts} attempts (preset {preset.name!r})"
            )
    if preset.background == "black":
        bg = np.zeros(3, dtype=np.float32)
    else:
        bg = np.full(3, np.float32(rng.uniform(0.0, 1.0)), dtype=np.float32)
    factors = SceneFactors(objects=objects, background_color=bg)
    image, masks = render_scene(factors, preset)
    return Scene(image=image, true_masks=masks, factors=factors)


def factor_matrix(factors: SceneFactors) -> np.ndarray:
    """Per-object factor rows [shape, r, g, b, scale, x, y, angle], float32."""
    rows = []
    for o in factors.objects:
        rows.append(
            [float(o.shape_id), *o.color.tolist(), float(o.scale),
             float(o.position[0]), float(o.position[1]), float(o.angle)]
        )
    return np.asarray(rows, dtype=np.float32).reshape(len(rows), 8)
