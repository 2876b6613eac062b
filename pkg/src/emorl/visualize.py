"""PNG grid renderers for decompositions, traversals, and activeness maps."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .model import EfficientMorl
from .trainer import images_to_tensor

# distinct slot colors for label maps (cycled when K exceeds the list)
_SLOT_COLORS = np.array(
    [
        (230, 60, 60), (60, 160, 230), (90, 200, 90), (240, 200, 60),
        (180, 100, 220), (60, 220, 200), (240, 140, 60), (150, 150, 150),
        (120, 80, 40), (220, 110, 180), (100, 110, 230),
    ],
    dtype=np.uint8,
)


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def _label_colors(labels: np.ndarray) -> np.ndarray:
    return _SLOT_COLORS[labels % len(_SLOT_COLORS)]


def tile_rows(rows: list[list[np.ndarray]], pad: int = 2) -> np.ndarray:
    """Tile HxWx3 uint8 cells into one grid image with white padding."""
    h = max(c.shape[0] for row in rows for c in row)
    w = max(c.shape[1] for row in rows for c in row)
    n_cols = max(len(row) for row in rows)
    grid = np.full(
        (len(rows) * (h + pad) + pad, n_cols * (w + pad) + pad, 3), 255, np.uint8
    )
    for i, row in enumerate(rows):
        for j, cell in enumerate(row):
            y = pad + i * (h + pad)
            x = pad + j * (w + pad)
            grid[y : y + cell.shape[0], x : x + cell.shape[1]] = cell
    return grid


def save_png(array: np.ndarray, path: str | Path, upscale: int = 3) -> None:
    img = Image.fromarray(array)
    if upscale > 1:
        img = img.resize((img.width * upscale, img.height * upscale), Image.NEAREST)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)


def decomposition_grid(
    model: EfficientMorl, scenes, steps: int, num_slots: int | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Rows per scene: image | reconstruction | mask labels | K masked components."""
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    images = images_to_tensor(scenes)
    result = model.infer(images, steps=steps, num_slots=num_slots, generator=gen)
    out = result.reconstruction_output
    recon = out.composite().detach().cpu().numpy()
    pi = out.pi.detach().cpu().numpy()
    y = out.y.detach().cpu().numpy()
    labels = pi.argmax(axis=1)
    rows = []
    for b, scene in enumerate(scenes):
        row = [
            scene.image,
            _to_uint8(recon[b].transpose(1, 2, 0)),
            _label_colors(labels[b]),
        ]
        for k in range(pi.shape[1]):
            row.append(_to_uint8((pi[b, k][None] * y[b, k]).transpose(1, 2, 0)))
        rows.append(row)
    return tile_rows(rows)


def traversal_grid(
    model: EfficientMorl,
    base_mu: np.ndarray,
    slot: int,
    dims: list[int],
    ranges: np.ndarray,
    grid: int = 8,
) -> np.ndarray:
    """Rows per latent dim: reconstructions as the dim sweeps min..max."""
    model.eval()
    rows = []
    base = torch.from_numpy(base_mu).to(torch.float32)
    with torch.no_grad():
        for dim in dims:
            sweep = base.unsqueeze(0).repeat(grid, 1, 1)
            sweep[:, slot, dim] = torch.linspace(
                float(ranges[dim, 0]), float(ranges[dim, 1]), grid
            )
            recon = model.decoder(sweep).composite().cpu().numpy()
            rows.append([_to_uint8(r.transpose(1, 2, 0)) for r in recon])
    return tile_rows(rows)


def activeness_map(scores: np.ndarray, cell: int = 12) -> np.ndarray:
    """One heat cell per latent dimension, normalized to the max score."""
    s = np.asarray(scores, dtype=np.float64)
    peak = s.max() if s.max() > 0 else 1.0
    norm = s / peak
    cells = []
    for v in norm:
        shade = np.full((cell, cell, 3), 255, np.uint8)
        shade[:, :, 1] = np.uint8(255 * (1 - v))
        shade[:, :, 2] = np.uint8(255 * (1 - v))
        cells.append(shade)
    return tile_rows([cells])
