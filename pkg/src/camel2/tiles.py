"""Grayscale slide preprocessing: Otsu foreground, tiling, tile manifests."""

from __future__ import annotations

import csv
import enum
import io
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .bags import RegionLabel, classify_region_label

MIN_TISSUE = 0.10
MANIFEST_COLUMNS = ["slide_id", "tile_x", "tile_y", "tissue_fraction", "cancer_ratio", "region_label"]


class Polarity(str, enum.Enum):
    DARK_IS_TISSUE = "dark_is_tissue"
    BRIGHT_IS_TISSUE = "bright_is_tissue"


class ManifestError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GrayImage:
    width: int
    height: int
    pixels: np.ndarray  # uint8, shape (height, width)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.uint8)
        if px.size != self.width * self.height:
            raise ValueError(f"pixel count {px.size} != {self.width}x{self.height}")
        object.__setattr__(self, "pixels", px.reshape(self.height, self.width))

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "GrayImage":
        arr = np.asarray(arr)
        return cls(arr.shape[1], arr.shape[0], arr)

    def histogram(self) -> np.ndarray:
        return np.bincount(self.pixels.ravel(), minlength=256)


@dataclass(frozen=True)
class Tile:
    tile_x: int
    tile_y: int
    size: int

    @property
    def window(self) -> tuple[slice, slice]:
        y0, x0 = self.tile_y * self.size, self.tile_x * self.size
        return slice(y0, y0 + self.size), slice(x0, x0 + self.size)


@dataclass(frozen=True)
class TileManifestRow:
    slide_id: str
    tile_x: int
    tile_y: int
    tissue_fraction: float
    cancer_ratio: float
    region_label: RegionLabel

    def __post_init__(self):
        if self.tile_x < 0 or self.tile_y < 0:
            raise ValueError("tile coordinates must be non-negative")
        for name in ("tissue_fraction", "cancer_ratio"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        object.__setattr__(self, "region_label", RegionLabel(self.region_label))


# -- PGM ---------------------------------------------------------------------

_PGM_HEADER = re.compile(rb"P5\s+(?:#.*\s+)*(\d+)\s+(?:#.*\s+)*(\d+)\s+(?:#.*\s+)*(\d+)\s")


def write_pgm(path: Union[str, Path], img: GrayImage) -> None:
    head = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(head + img.pixels.tobytes())


def read_pgm(path: Union[str, Path]) -> GrayImage:
    buf = Path(path).read_bytes()
    m = _PGM_HEADER.match(buf)
    if not m:
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=m.end())
    return GrayImage(w, h, data)


# -- thresholding --------------------------------------------------------------


def otsu_threshold(histogram: Sequence[int]) -> int:
    """Return the Otsu threshold of a 256-bin histogram.

    Pixels ``<= threshold`` form the lower class. Candidates run from the
    lowest to the highest occupied bin; ties go to the smallest candidate.
    Scores are compared exactly in integer arithmetic.
    """
    hist = [int(c) for c in histogram]
    if len(hist) != 256:
        raise ValueError("histogram must have 256 bins")
    if any(c < 0 for c in hist):
        raise ValueError("negative histogram count")
    occupied = [i for i, c in enumerate(hist) if c]
    if not occupied:
        raise ValueError("empty histogram")
    lo, hi = occupied[0], occupied[-1]
    total = sum(hist)
    total_mass = sum(i * c for i, c in enumerate(hist))

    # between-class variance * total**2 == (total*s0 - n0*total_mass)**2 / (n0*n1)
    best_t, best_num, best_den = lo, 0, 1
    n0 = s0 = 0
    for t in range(lo, hi + 1):
        n0 += hist[t]
        s0 += t * hist[t]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        num = (total * s0 - n0 * total_mass) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def foreground_mask(img: GrayImage, polarity: Union[Polarity, str] = Polarity.DARK_IS_TISSUE) -> np.ndarray:
    polarity = Polarity(polarity)
    hist = img.histogram()
    if np.count_nonzero(hist) < 2:
        return np.zeros(img.pixels.shape, dtype=bool)
    t = otsu_threshold(hist)
    if polarity is Polarity.DARK_IS_TISSUE:
        return img.pixels <= t
    return img.pixels > t


# -- tiling --------------------------------------------------------------------


def tile_grid(img: Union[GrayImage, tuple[int, int]], tile: int) -> list[Tile]:
    """Non-overlapping tiles in row-major order; edge remainders are dropped."""
    if tile < 1:
        raise ValueError("tile size must be >= 1")
    width, height = (img.width, img.height) if isinstance(img, GrayImage) else img
    return [Tile(tx, ty, tile) for ty in range(height // tile) for tx in range(width // tile)]


def _fraction(tile: Tile, mask: np.ndarray) -> float:
    window = mask[tile.window]
    if window.shape != (tile.size, tile.size):
        raise ValueError(f"tile ({tile.tile_x}, {tile.tile_y}) falls outside the mask")
    return float(np.count_nonzero(window)) / window.size


def tissue_fraction(tile: Tile, mask: np.ndarray) -> float:
    return _fraction(tile, mask)


def keep_tile(fraction: float, min_tissue: float = MIN_TISSUE) -> bool:
    return fraction >= min_tissue


def cancer_ratio(tile: Tile, annotation_mask: np.ndarray) -> float:
    return _fraction(tile, annotation_mask)


def build_manifest(
    slide_id: str,
    img: GrayImage,
    annotation_mask: np.ndarray,
    tile: int,
    *,
    min_tissue: float = MIN_TISSUE,
    pos_threshold: float = 0.20,
    polarity: Union[Polarity, str] = Polarity.DARK_IS_TISSUE,
) -> list[TileManifestRow]:
    """Rows for every tile that passes the tissue filter."""
    annotation_mask = np.asarray(annotation_mask).astype(bool)
    if annotation_mask.shape != img.pixels.shape:
        raise ValueError("annotation mask is not aligned with the image")
    fg = foreground_mask(img, polarity)
    rows = []
    for t in tile_grid(img, tile):
        tf = tissue_fraction(t, fg)
        if not keep_tile(tf, min_tissue):
            continue
        cr = round(cancer_ratio(t, annotation_mask), 6)
        rows.append(
            TileManifestRow(
                slide_id, t.tile_x, t.tile_y, round(tf, 6), cr,
                classify_region_label(cr, pos_threshold),
            )
        )
    return rows


# -- manifest CSV --------------------------------------------------------------


def write_manifest(rows: Iterable[TileManifestRow], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in rows:
            w.writerow(
                [r.slide_id, r.tile_x, r.tile_y, f"{r.tissue_fraction:.6f}",
                 f"{r.cancer_ratio:.6f}", r.region_label.value]
            )


def parse_manifest(text: str) -> list[TileManifestRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != MANIFEST_COLUMNS:
        raise ManifestError(f"line 1: expected header {','.join(MANIFEST_COLUMNS)}")
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(MANIFEST_COLUMNS):
            raise ManifestError(f"line {lineno}: expected {len(MANIFEST_COLUMNS)} fields, got {len(rec)}")
        try:
            rows.append(
                TileManifestRow(rec[0], int(rec[1]), int(rec[2]), float(rec[3]), float(rec[4]), rec[5])
            )
        except ValueError as exc:
            raise ManifestError(f"line {lineno}: {exc}") from None
    return rows


def read_manifest(path: Union[str, Path]) -> list[TileManifestRow]:
    return parse_manifest(Path(path).read_text())
