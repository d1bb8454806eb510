"""Slide rasters: PPM I/O, tissue segmentation, patch extraction and the
blue-ratio transform.

A slide raster is a plain ``(H, W, 3)`` uint8 ndarray; a tissue mask is a
``(H, W)`` bool ndarray of the same spatial extent. Binary PPM (P6, maxval
255) is the interchange image format: reads and writes are bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .validation import ContractError, as_image, require

# Rec. 601 luma coefficients, applied to [0, 1]-scaled channels.
_LUMA = np.array([0.299, 0.587, 0.114])

# 8-connectivity for small-region removal.
_STRUCTURE = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class Patch:
    """A square tile cut from a slide on the non-overlapping grid.

    ``centroid`` is (x, y) in source-image pixel coordinates:
    ``(grid_col * P + P / 2, grid_row * P + P / 2)``.
    """

    pixels: np.ndarray
    grid_row: int
    grid_col: int
    centroid: tuple[float, float]
    tissue_fraction: float


# --- PPM --------------------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 image as binary PPM (P6, maxval 255)."""
    img = as_image(image)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def _read_token(fh) -> bytes:
    tok = b""
    while True:
        c = fh.read(1)
        if not c:
            raise ContractError("truncated PPM header")
        if c == b"#":
            while c not in (b"\n", b""):
                c = fh.read(1)
            continue
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if _read_token(fh) != b"P6":
            raise ContractError(f"{path}: not a binary PPM (P6) file")
        w = int(_read_token(fh))
        h = int(_read_token(fh))
        maxval = int(_read_token(fh))
        if maxval != 255:
            raise ContractError(f"{path}: only maxval 255 is supported")
        raw = fh.read(w * h * 3)
    if len(raw) != w * h * 3:
        raise ContractError(f"{path}: truncated PPM payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy()


# --- segmentation and tiling --------------------------------------------------


def luminance(image: np.ndarray) -> np.ndarray:
    """Per-pixel luma in [0, 1]."""
    return as_image(image).astype(np.float64) @ _LUMA / 255.0


def segment_tissue(image: np.ndarray, luminance_threshold: float = 0.85,
                   min_region_px: int = 64) -> np.ndarray:
    """Threshold-based tissue mask: a pixel is tissue iff its luma falls
    below ``luminance_threshold``; connected regions (8-connectivity)
    smaller than ``min_region_px`` are then dropped. An empty mask is a
    valid result."""
    mask = luminance(image) < float(luminance_threshold)
    if min_region_px > 1 and mask.any():
        labels, count = ndimage.label(mask, structure=_STRUCTURE)
        sizes = np.bincount(labels.ravel(), minlength=count + 1)
        keep = sizes >= int(min_region_px)
        keep[0] = False
        mask = keep[labels]
    return mask


def extract_patches(image: np.ndarray, mask: np.ndarray, patch_size: int = 32,
                    min_tissue_fraction: float = 0.5) -> list[Patch]:
    """Tile the slide on a non-overlapping grid (stride = patch size).

    Tiles whose tissue fraction falls below ``min_tissue_fraction`` are
    discarded; right/bottom remainders narrower than a full patch are
    dropped. Output is ordered by (grid_row, grid_col).
    """
    img = as_image(image)
    require(patch_size >= 1, "patch_size must be at least 1")
    require(0.0 <= min_tissue_fraction <= 1.0, "min_tissue_fraction must be in [0, 1]")
    require(mask.shape == img.shape[:2], "mask dimensions must match the image")
    h, w = img.shape[:2]
    p = int(patch_size)
    patches = []
    for row in range(h // p):
        for col in range(w // p):
            y, x = row * p, col * p
            tile_mask = mask[y : y + p, x : x + p]
            fraction = float(tile_mask.mean())
            if fraction < min_tissue_fraction:
                continue
            patches.append(
                Patch(
                    pixels=img[y : y + p, x : x + p].copy(),
                    grid_row=row,
                    grid_col=col,
                    centroid=(col * p + p / 2.0, row * p + p / 2.0),
                    tissue_fraction=fraction,
                )
            )
    return patches


# --- blue ratio ---------------------------------------------------------------


def blue_ratio(image: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-pixel blue ratio and its mean over the image.

    Br = (100 * B / (1 + R + G)) * (256 / (1 + R + G + B)) with the raw
    8-bit channel values; denominators are >= 1 by construction.
    """
    img = as_image(image).astype(np.float64)
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    br = (100.0 * b / (1.0 + r + g)) * (256.0 / (1.0 + r + g + b))
    return br, float(br.mean())


# --- slide manifest -----------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    split: str = ""


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    """One tab-separated record per slide: path, label, optional split tag."""
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(f"{e.path}\t{e.label}\t{e.split}\n")


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) not in (2, 3):
                raise ContractError(f"{path}:{lineno}: malformed manifest record")
            split = fields[2] if len(fields) == 3 else ""
            entries.append(ManifestEntry(fields[0], int(fields[1]), split))
    return entries


def patches_to_arrays(patches: list[Patch]):
    """Pack a patch list into (pixels, grid, centroids, tissue_fraction) arrays."""
    if not patches:
        raise ContractError("empty slide: no patches to pack")
    pixels = np.stack([p.pixels for p in patches]).astype(np.uint8)
    grid = np.array([[p.grid_row, p.grid_col] for p in patches], dtype=np.int64)
    centroids = np.array([p.centroid for p in patches], dtype=np.float64)
    fractions = np.array([p.tissue_fraction for p in patches], dtype=np.float64)
    return pixels, grid, centroids, fractions


def patches_from_arrays(pixels, grid, centroids, fractions) -> list[Patch]:
    patches = []
    for i in range(pixels.shape[0]):
        patches.append(
            Patch(
                pixels=np.asarray(pixels[i], dtype=np.uint8),
                grid_row=int(grid[i, 0]),
                grid_col=int(grid[i, 1]),
                centroid=(float(centroids[i, 0]), float(centroids[i, 1])),
                tissue_fraction=float(fractions[i]),
            )
        )
    return patches
