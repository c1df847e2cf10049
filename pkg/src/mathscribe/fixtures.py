"""Bundled sample corpus and synthetic fixture generation.

No real handwriting corpus ships with the package.  For offline runs and
tests, a "handwritten" domain is faked by warping stub renders with a
smooth random displacement field, which is enough to give the two domains
visibly different statistics.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np
from scipy import ndimage

from .corpus import FormulaRecord, records_from_lines

__all__ = ["sample_corpus_lines", "load_sample_corpus", "wobble"]


def sample_corpus_lines() -> list[str]:
    text = resources.files("mathscribe").joinpath("data/sample_corpus.txt").read_text(encoding="utf-8")
    return [ln for ln in text.splitlines() if ln.strip()]


def load_sample_corpus(limit: int | None = None) -> list[FormulaRecord]:
    lines = sample_corpus_lines()
    if limit is not None:
        lines = lines[:limit]
    records, _ = records_from_lines(lines, id_prefix="sample")
    return records


def wobble(img: np.ndarray, rng: np.random.Generator, amplitude: float = 2.5, grid: int = 6) -> np.ndarray:
    """Warp an image with a smooth random displacement field.

    A coarse grid of offsets is drawn and bilinearly upsampled to pixel
    resolution, displacing strokes by up to ``amplitude`` pixels, which
    turns rigid dot-matrix renders into wavy handwriting-like marks.
    """
    h, w = img.shape
    coarse = rng.uniform(-amplitude, amplitude, size=(2, grid, grid))
    dy = ndimage.zoom(coarse[0], (h / grid, w / grid), order=1)[:h, :w]
    dx = ndimage.zoom(coarse[1], (h / grid, w / grid), order=1)[:h, :w]
    rows, cols = np.indices((h, w), dtype=np.float32)
    warped = ndimage.map_coordinates(img, [rows + dy, cols + dx], order=1, cval=0.0)
    return np.clip(warped, 0.0, 1.0).astype(np.float32)
