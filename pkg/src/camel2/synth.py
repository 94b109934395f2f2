"""Synthetic grayscale slides with exact cancer annotations, and the
conversion from slides to instance bags."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .bags import Bag, BagDataset, BagLabel, RegionLabel
from .tiles import (
    GrayImage,
    Polarity,
    TileManifestRow,
    build_manifest,
    foreground_mask,
    read_manifest,
    read_pgm,
    write_manifest,
    write_pgm,
)


@dataclass(frozen=True)
class SlideParams:
    slide_size: int = 2048
    tile_size: int = 256
    instance_size: int = 32
    n_slides: int = 8
    positive_fraction: float = 0.5
    tissue_blobs: int = 6
    cancer_regions: int = 4
    max_region_cells: int = 12
    min_tissue: float = 0.10
    pos_threshold: float = 0.20
    texture_amplitude: float = 30.0
    texture_period: float = 8.0
    cancer_darkening: float = 0.0
    noise_sigma: float = 14.0

    def __post_init__(self):
        if self.instance_size < 1 or self.tile_size < self.instance_size:
            raise ValueError("need 1 <= instance_size <= tile_size")
        if self.tile_size % self.instance_size:
            raise ValueError("tile_size must be a multiple of instance_size")
        if self.slide_size < self.tile_size:
            raise ValueError("slide_size must be >= tile_size")
        if self.n_slides < 1:
            raise ValueError("n_slides must be >= 1")
        if self.max_region_cells < 1:
            raise ValueError("max_region_cells must be >= 1")


@dataclass(eq=False)
class Slide:
    slide_id: str
    image: GrayImage
    annotation: np.ndarray  # bool, cancer pixels
    manifest: list[TileManifestRow]


def _render(params: SlideParams, positive: bool, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n = params.slide_size
    cell = params.instance_size
    yy, xx = np.mgrid[0:n, 0:n]

    tissue = np.zeros((n, n), dtype=bool)
    for _ in range(params.tissue_blobs):
        cy, cx = rng.uniform(0, n, 2)
        ry, rx = rng.uniform(0.08, 0.25, 2) * n
        tissue |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0

    img = np.full((n, n), 225.0)
    base = 130.0 + 8.0 * np.sin(xx / 97.0 + rng.uniform(0, 6.3)) * np.cos(yy / 131.0)
    img[tissue] = base[tissue]

    cancer = np.zeros((n, n), dtype=bool)
    if positive:
        cells = n // cell
        cell_tissue = tissue[: cells * cell, : cells * cell].reshape(cells, cell, cells, cell).mean(axis=(1, 3))
        seeds = np.argwhere(cell_tissue > 0.9)
        for _ in range(params.cancer_regions if len(seeds) else 0):
            cy, cx = seeds[rng.integers(len(seeds))]
            h, w = rng.integers(1, params.max_region_cells + 1, 2)
            y0, x0 = max(0, cy - h // 2), max(0, cx - w // 2)
            block = np.zeros((cells, cells), dtype=bool)
            block[y0 : y0 + h, x0 : x0 + w] = True
            block &= cell_tissue > 0.5
            cancer[: cells * cell, : cells * cell] |= np.kron(block, np.ones((cell, cell), dtype=bool))

        # grid-aligned plaid texture, one shared pattern with per-cell contrast jitter
        ys, xs = np.nonzero(cancer[::cell, ::cell])
        wave = np.sin(2 * np.pi * np.arange(cell) / params.texture_period)
        plaid = 0.5 * (wave[:, None] + wave[None, :])
        for cy, cx in zip(ys, xs):
            patch = rng.uniform(0.75, 1.25) * plaid
            win = (slice(cy * cell, (cy + 1) * cell), slice(cx * cell, (cx + 1) * cell))
            img[win] = base[win] - params.cancer_darkening + params.texture_amplitude * patch

    img += rng.normal(0.0, params.noise_sigma, size=(n, n))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), cancer


def make_synthetic_slides(
    params: SlideParams, seed: int, out_dir: Optional[Union[str, Path]] = None, prefix: str = "slide"
) -> list[Slide]:
    """Render slides, annotate them, and build tile manifests.

    Cancer regions are unions of whole instance cells, so every instance's
    ground truth is exact. With ``out_dir`` the slides are also written as
    ``<id>.pgm`` / ``<id>_mask.pgm`` plus one ``manifest.csv``.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    n_pos = int(round(params.n_slides * params.positive_fraction))
    slides = []
    for i in range(params.n_slides):
        slide_id = f"{prefix}_{i:03d}"
        pixels, cancer = _render(params, i < n_pos, rng)
        img = GrayImage.from_array(pixels)
        rows = build_manifest(
            slide_id, img, cancer, params.tile_size,
            min_tissue=params.min_tissue, pos_threshold=params.pos_threshold,
            polarity=Polarity.DARK_IS_TISSUE,
        )
        slides.append(Slide(slide_id, img, cancer, rows))
    if out_dir is not None:
        save_slides(slides, out_dir)
    return slides


def save_slides(slides: list[Slide], out_dir: Union[str, Path]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s in slides:
        write_pgm(out / f"{s.slide_id}.pgm", s.image)
        write_pgm(out / f"{s.slide_id}_mask.pgm", GrayImage.from_array(s.annotation.astype(np.uint8) * 255))
    write_manifest([r for s in slides for r in s.manifest], out / "manifest.csv")


def load_slides(in_dir: Union[str, Path]) -> list[Slide]:
    src = Path(in_dir)
    rows = read_manifest(src / "manifest.csv")
    by_slide: dict[str, list[TileManifestRow]] = {}
    for r in rows:
        by_slide.setdefault(r.slide_id, []).append(r)
    slides = []
    for path in sorted(src.glob("*.pgm")):
        if path.stem.endswith("_mask"):
            continue
        mask = read_pgm(src / f"{path.stem}_mask.pgm").pixels > 0
        slides.append(Slide(path.stem, read_pgm(path), mask, by_slide.get(path.stem, [])))
    return slides


# -- slides -> instances and bags ----------------------------------------------


@dataclass(eq=False)
class TileInstances:
    """All instance cells of the kept tiles of a set of slides."""

    features: np.ndarray  # (n, instance_size**2) float32 in [0, 1]
    truth: np.ndarray  # int8
    tissue: np.ndarray  # float, per-instance tissue fraction
    tile_of: np.ndarray  # index into ``rows`` for each instance
    rows: list[TileManifestRow]


def extract_instances(slides: list[Slide], tile_size: int, instance_size: int, pool: int = 1) -> TileInstances:
    """Cut kept tiles into instance cells.

    Features are the cell's pixels scaled to [0, 1], average-pooled over
    ``pool`` x ``pool`` blocks.
    """
    if pool < 1 or instance_size % pool:
        raise ValueError("pool must be >= 1 and divide instance_size")
    per_tile = (tile_size // instance_size) ** 2
    side = instance_size // pool
    feats, truth, tissue, tile_of, rows = [], [], [], [], []
    for s in slides:
        fg = foreground_mask(s.image, Polarity.DARK_IS_TISSUE)
        for r in s.manifest:
            y0, x0 = r.tile_y * tile_size, r.tile_x * tile_size
            win = (slice(y0, y0 + tile_size), slice(x0, x0 + tile_size))
            k = tile_size // instance_size

            def cells(a):
                return a[win].reshape(k, instance_size, k, instance_size).swapaxes(1, 2).reshape(per_tile, -1)

            px = cells(s.image.pixels).reshape(per_tile, side, pool, side, pool).mean(axis=(2, 4))
            feats.append(px.reshape(per_tile, -1))
            truth.append(cells(s.annotation).any(axis=1))
            tissue.append(cells(fg).mean(axis=1))
            tile_of.append(np.full(per_tile, len(rows)))
            rows.append(r)
    if not rows:
        raise ValueError("no tiles survived background filtering")
    return TileInstances(
        np.concatenate(feats).astype(np.float32) / np.float32(255.0),
        np.concatenate(truth).astype(np.int8),
        np.concatenate(tissue),
        np.concatenate(tile_of),
        rows,
    )


def tile_bags(inst: TileInstances, use_ratio: bool) -> BagDataset:
    """One bag per kept tile.

    Without ratios, positives are tiles labeled Positive and Discarded
    tiles are dropped; with ratios, every tile with cancer is a positive
    bag carrying its cancer ratio.
    """
    bags = []
    for t, r in enumerate(inst.rows):
        ids = np.flatnonzero(inst.tile_of == t)
        if use_ratio:
            if r.cancer_ratio > 0:
                bags.append(Bag(len(bags), ids, BagLabel.POSITIVE, ratio=r.cancer_ratio, source_id=r.slide_id))
            else:
                bags.append(Bag(len(bags), ids, BagLabel.NEGATIVE, source_id=r.slide_id))
        elif r.region_label is RegionLabel.POSITIVE:
            bags.append(Bag(len(bags), ids, BagLabel.POSITIVE, source_id=r.slide_id))
        elif r.region_label is RegionLabel.NEGATIVE:
            bags.append(Bag(len(bags), ids, BagLabel.NEGATIVE, source_id=r.slide_id))
    return BagDataset(inst.features, np.arange(len(inst.features)), bags, truth=inst.truth)


def slide_bags(inst: TileInstances, use_ratio: bool) -> BagDataset:
    """One bag per slide over all instances of its kept tiles.

    A slide is positive when any of its tiles holds cancer; its ratio is
    the mean cancer ratio over kept tiles.
    """
    by_slide: dict[str, list[int]] = {}
    for t, r in enumerate(inst.rows):
        by_slide.setdefault(r.slide_id, []).append(t)
    bags = []
    for slide_id, tiles in by_slide.items():
        ids = np.flatnonzero(np.isin(inst.tile_of, tiles))
        ratio = float(np.mean([inst.rows[t].cancer_ratio for t in tiles]))
        if ratio > 0:
            bags.append(Bag(len(bags), ids, BagLabel.POSITIVE, ratio=ratio if use_ratio else None, source_id=slide_id))
        else:
            bags.append(Bag(len(bags), ids, BagLabel.NEGATIVE, source_id=slide_id))
    return BagDataset(inst.features, np.arange(len(inst.features)), bags, truth=inst.truth)
