"""Grayscale image operations for formula pictures.

Images are 2-D float32 arrays with intensities in [0, 1].  The pipeline
convention is dark background (~0) and bright strokes (~1); scans with the
opposite polarity are inverted during intensity normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

__all__ = [
    "ImageError",
    "as_gray_image",
    "to_uint8",
    "from_uint8",
    "save_png",
    "load_png",
    "normalize_intensity",
    "AugmentParams",
    "sample_augment_params",
    "augment",
    "resize_for_training",
    "resize_to_height",
    "pad_width_to_multiple",
]


class ImageError(ValueError):
    pass


def as_gray_image(arr: np.ndarray) -> np.ndarray:
    """Validate and coerce to the float32 [0,1] image contract."""
    img = np.asarray(arr, dtype=np.float32)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ImageError(f"expected a non-empty 2-D array, got shape {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ImageError("intensities must lie in [0, 1]")
    return img


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def from_uint8(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.float32) / 255.0).astype(np.float32)


def save_png(img: np.ndarray, path) -> None:
    Image.fromarray(to_uint8(as_gray_image(img)), mode="L").save(path)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("L")))


def normalize_intensity(img: np.ndarray) -> np.ndarray:
    """Map the background level to ~0 and the ink level to ~1.

    Background is estimated as the histogram mode (median of the pixels in
    the fullest of 256 bins), ink as the 99th percentile on the far side of
    the background.  Bright-background images are inverted first.  The map
    is affine with clamping, hence monotone.  Images with fewer than two
    distinct values are returned unchanged.
    """
    img = as_gray_image(img)
    lo, hi = float(img.min()), float(img.max())
    if hi - lo == 0.0:
        return img

    flat = img.ravel()
    counts, edges = np.histogram(flat, bins=256, range=(0.0, 1.0))
    mode_bin = int(np.argmax(counts))
    in_bin = flat[(flat >= edges[mode_bin]) & (flat <= edges[mode_bin + 1])]
    background = float(np.median(in_bin))

    if background > 0.5:
        img = 1.0 - img
        background = 1.0 - background

    ink = float(np.percentile(img, 99.0))
    if ink <= background + 1e-6:
        ink = float(img.max())
    if ink <= background:
        return img

    out = (img - background) / (ink - background)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


@dataclass(frozen=True)
class AugmentParams:
    """Concrete geometric-augmentation parameters for one image."""

    rotation: float = 0.0  # degrees, pipeline samples within +/-4
    shear: float = 0.0  # x-shear factor
    border_pad: int = 10  # pixels, sampled from [10, 20]
    aspect_scale: float = 1.0  # width multiplier


@dataclass(frozen=True)
class AugmentRanges:
    rotation: tuple[float, float] = (-4.0, 4.0)
    shear: tuple[float, float] = (-0.1, 0.1)
    border_pad: tuple[int, int] = (10, 20)
    aspect_scale: tuple[float, float] = (0.9, 1.1)


def sample_augment_params(rng: np.random.Generator, ranges: AugmentRanges | None = None) -> AugmentParams:
    r = ranges or AugmentRanges()
    return AugmentParams(
        rotation=float(rng.uniform(*r.rotation)),
        shear=float(rng.uniform(*r.shear)),
        border_pad=int(rng.integers(r.border_pad[0], r.border_pad[1] + 1)),
        aspect_scale=float(rng.uniform(*r.aspect_scale)),
    )


def _identity(params: AugmentParams) -> bool:
    return params.rotation == 0.0 and params.shear == 0.0 and params.aspect_scale == 1.0


def augment(img: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Rotate, shear, and rescale about the image center, then zero-pad.

    The canvas grows to contain the transformed content; the image center
    maps to the new canvas center, so centroid motion follows the closed
    form of the applied affine map.  Bilinear interpolation, output clamped
    to [0, 1].  Identity parameters reduce exactly to zero-padding.
    """
    img = as_gray_image(img)
    p = params.border_pad
    if _identity(params):
        return np.pad(img, p, mode="constant")

    h, w = img.shape
    theta = math.radians(params.rotation)
    # Forward map: output = A @ input (in (x, y) order), composed as
    # aspect-scale after shear after rotation.
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    shear = np.array([[1.0, params.shear], [0.0, 1.0]])
    scale = np.array([[params.aspect_scale, 0.0], [0.0, 1.0]])
    fwd = scale @ shear @ rot

    corners = np.array([[x, y] for x in (-w / 2.0, w / 2.0) for y in (-h / 2.0, h / 2.0)]).T
    mapped = fwd @ corners
    out_w = int(math.ceil(mapped[0].max() - mapped[0].min()))
    out_h = int(math.ceil(mapped[1].max() - mapped[1].min()))

    # ndimage.affine_transform wants the inverse map in (row, col) order.
    inv = np.linalg.inv(fwd)
    inv_rc = inv[::-1, ::-1].copy()
    center_in = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    center_out = np.array([(out_h - 1) / 2.0, (out_w - 1) / 2.0])
    offset = center_in - inv_rc @ center_out
    warped = ndimage.affine_transform(
        img, inv_rc, offset=offset, output_shape=(out_h, out_w), order=1, cval=0.0
    )
    out = np.pad(np.clip(warped, 0.0, 1.0).astype(np.float32), p, mode="constant")
    return out


def resize_to_height(img: np.ndarray, target_height: int) -> np.ndarray:
    """Aspect-preserving bilinear rescale to the given height."""
    img = as_gray_image(img)
    h, w = img.shape
    if h == target_height:
        return img
    new_w = max(1, round(w * target_height / h))
    pil = Image.fromarray(img, mode="F").resize((new_w, target_height), Image.BILINEAR)
    return np.clip(np.asarray(pil, dtype=np.float32), 0.0, 1.0)


def resize_for_training(img: np.ndarray, target_height: int, max_width: int) -> np.ndarray | None:
    """Rescale to ``target_height``; ``None`` when the width would exceed
    ``max_width`` (the record is rejected, not an error)."""
    out = resize_to_height(img, target_height)
    if out.shape[1] > max_width:
        return None
    return out


def pad_width_to_multiple(img: np.ndarray, multiple: int) -> np.ndarray:
    """Right-pad with background so the width divides ``multiple``."""
    img = as_gray_image(img)
    w = img.shape[1]
    rem = w % multiple
    if rem == 0:
        return img
    return np.pad(img, ((0, 0), (0, multiple - rem)), mode="constant")
