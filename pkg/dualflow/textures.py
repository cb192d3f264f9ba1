"""Procedural textures used as static backgrounds and object surfaces."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from dualflow.errors import SequenceLoadError, StimulusError


def procedural_texture(
    shape: tuple[int, int],
    seed: int | np.random.Generator,
    octaves: int = 4,
    base_cells: int = 4,
    persistence: float = 0.5,
) -> np.ndarray:
    """Multi-octave value noise in [0, 1].

    Each octave doubles the lattice density and scales the amplitude by
    ``persistence``; lattices are upsampled with cubic splines.
    """
    rng = np.random.default_rng(seed)
    height, width = shape
    if height < 2 or width < 2:
        raise StimulusError(f"texture must be at least 2x2, got {shape}")
    total = np.zeros(shape)
    amplitude = 1.0
    for octave in range(octaves):
        cells = base_cells * 2**octave
        lattice = rng.random((cells + 1, cells + 1))
        up = ndimage.zoom(lattice, (height / cells, width / cells), order=3, mode="reflect")
        total += amplitude * up[:height, :width]
        amplitude *= persistence
    lo, hi = total.min(), total.max()
    return (total - lo) / (hi - lo) if hi > lo else np.full(shape, 0.5)


def load_background(path: str | Path, size: int | None = None) -> np.ndarray:
    """Grayscale image in [0, 1], optionally centre-cropped and resized to ``size``."""
    try:
        with Image.open(path) as img:
            gray = img.convert("L")
            if size is not None:
                side = min(gray.size)
                left, top = (gray.width - side) // 2, (gray.height - side) // 2
                gray = gray.crop((left, top, left + side, top + side)).resize((size, size), Image.BILINEAR)
            return np.asarray(gray, dtype=float) / 255.0
    except OSError as exc:
        raise SequenceLoadError(f"cannot read background image {path}: {exc}") from exc
