"""Slide loading, tiling and entropy filtering.

Images are handled as ``(height, width, 3)`` uint8 arrays. Masks are
``(height, width)`` boolean arrays where True marks an annotated tumor region.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ImageDecodeError, UnsupportedFormatError

DEFAULT_TILE_SIZE = 256
DEFAULT_ENTROPY_THRESHOLD = 5.0
DEFAULT_MASK_COVERAGE_MIN = 0.5
DEFAULT_MEAN = (0.5, 0.5, 0.5)
DEFAULT_STD = (0.5, 0.5, 0.5)
MAX_PIXELS = 1 << 31

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
MANIFEST_HEADER = ["slide_id", "x", "y", "entropy_bits", "kept"]


@dataclass
class Patch:
    slide_id: str
    x: int
    y: int
    pixels: np.ndarray
    entropy_bits: float = 0.0

    @property
    def tile_size(self) -> int:
        return self.pixels.shape[0]


def _open(path):
    try:
        img = Image.open(path)
    except FileNotFoundError:
        raise
    except UnidentifiedImageError as exc:
        raise UnsupportedFormatError(f"{path}: not a recognised raster") from exc
    except OSError as exc:
        raise ImageDecodeError(f"{path}: {exc}") from exc
    if img.width * img.height > MAX_PIXELS:
        raise ImageDecodeError(f"{path}: {img.width}x{img.height} exceeds pixel limit")
    return img


def load_image(path) -> np.ndarray:
    """Decode a PNG or uncompressed TIFF into an (H, W, 3) uint8 array.

    Alpha is dropped. No color management is applied.
    """
    img = _open(path)
    fmt = img.format
    if fmt == "TIFF":
        if img.info.get("compression", "raw") != "raw":
            raise UnsupportedFormatError(f"{path}: compressed TIFF is not supported")
        if img.mode != "RGB":
            raise UnsupportedFormatError(f"{path}: TIFF mode {img.mode} is not 8-bit RGB")
    elif fmt != "PNG":
        raise UnsupportedFormatError(f"{path}: format {fmt} is not supported")
    try:
        img.load()
    except (OSError, SyntaxError, ValueError) as exc:
        raise ImageDecodeError(f"{path}: {exc}") from exc
    if img.mode in ("RGBA", "LA", "P", "L"):
        img = img.convert("RGB")
    elif img.mode != "RGB":
        raise UnsupportedFormatError(f"{path}: image mode {img.mode} is not supported")
    return np.asarray(img, dtype=np.uint8).copy()


def load_mask(path) -> np.ndarray:
    """Load a PNG annotation mask; luma >= 128 marks tumor."""
    img = _open(path)
    if img.format != "PNG":
        raise UnsupportedFormatError(f"{path}: masks must be PNG")
    try:
        img.load()
    except (OSError, SyntaxError, ValueError) as exc:
        raise ImageDecodeError(f"{path}: {exc}") from exc
    if img.mode != "1":
        img = img.convert("RGB")
        return to_grayscale(np.asarray(img, dtype=np.uint8)) >= 128
    return np.asarray(img, dtype=bool).copy()


def save_png(path, img: np.ndarray) -> None:
    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path, format="PNG")


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma, rounded half-up and clamped to 0..255."""
    img = np.asarray(img)
    luma = img[..., :3].astype(np.float64) @ LUMA_WEIGHTS
    return np.clip(np.floor(luma + 0.5), 0, 255).astype(np.uint8)


def entropy_of(img: np.ndarray) -> float:
    """Shannon entropy in bits of the 256-bin grayscale histogram."""
    gray = to_grayscale(img)
    counts = np.bincount(gray.ravel(), minlength=256)
    counts = counts[counts > 0]
    if counts.size <= 1:
        return 0.0
    p = counts / counts.sum()
    h = float(-(p * np.log2(p)).sum())
    return min(max(h, 0.0), 8.0)


def shannon_entropy(patch: Patch | np.ndarray) -> float:
    pixels = patch.pixels if isinstance(patch, Patch) else patch
    return entropy_of(pixels)


def tile_slide(
    img: np.ndarray,
    slide_id: str = "",
    tile_size: int = DEFAULT_TILE_SIZE,
    stride: int | None = None,
    mask: np.ndarray | None = None,
    mask_coverage_min: float = DEFAULT_MASK_COVERAGE_MIN,
) -> list[Patch]:
    """Cut ``img`` into full tiles on a regular grid.

    Partial tiles at the right/bottom edges are discarded. With a mask, only
    tiles whose masked fraction is at least ``mask_coverage_min`` are returned.
    Each patch carries its entropy.
    """
    if tile_size < 1:
        raise ValueError("tile_size must be >= 1")
    stride = tile_size if stride is None else stride
    if stride < 1:
        raise ValueError("stride must be >= 1")
    h, w = img.shape[:2]
    if mask is not None and mask.shape != (h, w):
        raise ValueError(f"mask shape {mask.shape} does not match image {(h, w)}")

    patches = []
    if tile_size > h or tile_size > w:
        return patches
    area = tile_size * tile_size
    for y in range(0, h - tile_size + 1, stride):
        for x in range(0, w - tile_size + 1, stride):
            if mask is not None:
                covered = np.count_nonzero(mask[y:y + tile_size, x:x + tile_size])
                if covered / area < mask_coverage_min:
                    continue
            pixels = img[y:y + tile_size, x:x + tile_size].copy()
            patches.append(Patch(slide_id, x, y, pixels, entropy_of(pixels)))
    return patches


def filter_patches(patches: Iterable[Patch], threshold: float = DEFAULT_ENTROPY_THRESHOLD) -> list[Patch]:
    if not 0.0 <= threshold <= 8.0:
        raise ValueError("entropy threshold must lie in [0, 8]")
    return [p for p in patches if p.entropy_bits >= threshold]


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an (H, W, ...) float array with half-pixel centers.

    Sample positions are clamped to the border, so resizing to the same
    shape returns the input unchanged.
    """
    arr = np.asarray(arr, dtype=np.float64)
    in_h, in_w = arr.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return arr.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(in_h, out_h)
    x0, x1, fx = axis(in_w, out_w)
    extra = (1,) * (arr.ndim - 2)
    fy = fy.reshape((-1, 1) + extra)
    fx = fx.reshape((1, -1) + extra)
    top = arr[y0][:, x0] * (1 - fx) + arr[y0][:, x1] * fx
    bottom = arr[y1][:, x0] * (1 - fx) + arr[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def resize_normalize(
    patch: Patch | np.ndarray,
    out_size: int = 224,
    mean: Sequence[float] = DEFAULT_MEAN,
    std: Sequence[float] = DEFAULT_STD,
) -> np.ndarray:
    """Resize to ``out_size`` and normalize per channel; returns a (3, S, S) float64 tensor."""
    pixels = patch.pixels if isinstance(patch, Patch) else patch
    resized = resize_bilinear(pixels[..., :3], out_size, out_size)
    out = (resized / 255.0 - np.asarray(mean)) / np.asarray(std)
    return np.ascontiguousarray(out.transpose(2, 0, 1))


def channel_stats(patches: Sequence[Patch]) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Per-channel mean and std of patch pixels scaled to [0, 1] (dataset-statistics normalization)."""
    stack = np.concatenate([p.pixels.reshape(-1, 3) for p in patches]).astype(np.float64) / 255.0
    std = stack.std(axis=0)
    std[std == 0] = 1.0
    return tuple(stack.mean(axis=0).tolist()), tuple(std.tolist())


def write_manifest(path, rows: Iterable[tuple[Patch, bool]]) -> None:
    """Write the patch manifest CSV (``slide_id,x,y,entropy_bits,kept``)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for patch, kept in rows:
            writer.writerow([patch.slide_id, patch.x, patch.y, f"{patch.entropy_bits:.6f}", int(kept)])


def read_manifest(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise ValueError(f"{path}: unexpected manifest header {reader.fieldnames}")
        return [
            {"slide_id": r["slide_id"], "x": int(r["x"]), "y": int(r["y"]),
             "entropy_bits": float(r["entropy_bits"]), "kept": r["kept"] == "1"}
            for r in reader
        ]


def slide_id_from_path(path) -> str:
    return os.path.splitext(os.path.basename(path))[0]
