"""Synthetic histology-like fixtures and a deterministic mask-proposal oracle.

Images are elliptical cells on a tissue background, rendered directly in
feature space: every pixel gets a class-coded base vector plus Gaussian
noise, so propagation behavior is analytically predictable while the full
pipeline (grids, propagation, scoring, distillation) runs unchanged.

Layout of a generated image:
  - cell interiors: lean strongly cell-side; big cells carry a one-pixel
    inner edge band tilted further toward tissue so an edge head has a signal
  - membrane: the one-pixel ring around every painted cell leans tissue-side
    and is excluded from gt, so touching cells stay separable and the seed
    mass of a patch exactly matches its gt foreground
  - tissue: the tissue basis direction
  - optional speckles: isolated distractor pixels that lean cell-side with
    an off-plane component; they fool a plain similarity argmax but carry
    too little transport mass to survive refinement
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grids import DataError, ImageRecord
from .morphology import boundary_edges, dilate, distance_transform

# base-vector mixes (cell weight, tissue weight); every class keeps a
# strictly positive tissue component so the rectified cosine against the
# tissue prototype never collapses to zero under noise — otherwise any
# epsilon of transport mass resurrects unseeded pixels.  Membrane always
# loses the cell-vs-tissue argmax, the edge band always wins it but ranks
# below the interior core.
CORE_MIX = (0.85, 0.15)
EDGE_MIX = (0.72, 0.28)
MEMBRANE_MIX = (0.30, 0.70)
SPECKLE_MIX = (0.52, 0.48, 0.45)  # cell, tissue, off-plane

_PLACE_ATTEMPTS = 1000


@dataclass(frozen=True)
class SynthConfig:
    """Generator knobs; defaults give a clean, easy dataset."""

    seed: int = 0
    train_images: int = 4
    test_images: int = 2
    size: int = 96
    cells: int = 14
    radius_min: float = 5.5
    radius_max: float = 8.0
    overlap: float = 0.15
    depth: int = 8
    noise: float = 0.12
    erode: float = 0.0
    drop: float = 0.0
    drop_grid: int = 3
    small_fraction: float = 0.0
    small_radius_min: float = 2.0
    small_radius_max: float = 2.5
    speckle_fraction: float = 0.0

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        for name in ("train_images", "test_images", "cells"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.size < 16:
            raise ValueError("size must be >= 16")
        if self.depth < 3:
            raise ValueError("depth must be >= 3 (cell, tissue, off-plane)")
        if not 0.0 < self.radius_min <= self.radius_max:
            raise ValueError("need 0 < radius_min <= radius_max")
        if not 0.0 < self.small_radius_min <= self.small_radius_max:
            raise ValueError("need 0 < small_radius_min <= small_radius_max")
        for name in ("overlap", "erode", "drop", "small_fraction",
                     "speckle_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.drop_grid < 1:
            raise ValueError("drop_grid must be >= 1")
        if self.radius_max * 2 + 6 > self.size:
            raise ValueError("cells do not fit the image at this size")


@dataclass(frozen=True)
class _Cell:
    row: float
    col: float
    a: float  # semi-axis along theta
    b: float
    theta: float
    small: bool

    @property
    def reach(self) -> float:
        return max(self.a, self.b)

    def radius_toward(self, phi: float) -> float:
        """Boundary distance from the center along direction phi."""
        rel = phi - self.theta
        return 1.0 / math.sqrt((math.cos(rel) / self.a) ** 2
                               + (math.sin(rel) / self.b) ** 2)


def _too_close(cell: _Cell, others: list[_Cell], margin: float,
               skip: _Cell | None = None) -> bool:
    for other in others:
        if other is skip:
            continue
        gap = math.hypot(cell.row - other.row, cell.col - other.col)
        if gap < cell.reach + other.reach + margin:
            return True
    return False


def _place_cells(rng: np.random.Generator, cfg: SynthConfig) -> list[_Cell]:
    n_small = int(round(cfg.cells * cfg.small_fraction))
    n_big = cfg.cells - n_small
    placed: list[_Cell] = []
    bigs: list[_Cell] = []
    for index in range(cfg.cells):
        small = index >= n_big
        lo, hi = ((cfg.small_radius_min, cfg.small_radius_max) if small
                  else (cfg.radius_min, cfg.radius_max))
        for _ in range(_PLACE_ATTEMPTS):
            a = float(rng.uniform(lo, hi))
            b = float(rng.uniform(lo, hi))
            theta = float(rng.uniform(0.0, math.pi))
            reach = max(a, b)
            margin = reach + 2.0
            attach = (not small and bigs and float(rng.random()) < cfg.overlap)
            if attach:
                anchor = bigs[int(rng.integers(len(bigs)))]
                phi = float(rng.uniform(0.0, 2.0 * math.pi))
                trial = _Cell(0.0, 0.0, a, b, theta, small)
                span = anchor.radius_toward(phi) + trial.radius_toward(phi + math.pi)
                dist = float(rng.uniform(0.75, 0.9)) * span
                row = anchor.row + dist * math.sin(phi)
                col = anchor.col + dist * math.cos(phi)
                trial = _Cell(row, col, a, b, theta, small)
                ok = (margin <= row <= cfg.size - 1 - margin
                      and margin <= col <= cfg.size - 1 - margin
                      and not _too_close(trial, placed, 2.0, skip=anchor))
            else:
                row = float(rng.uniform(margin, cfg.size - 1 - margin))
                col = float(rng.uniform(margin, cfg.size - 1 - margin))
                trial = _Cell(row, col, a, b, theta, small)
                ok = not _too_close(trial, placed, 5.0)
            if ok:
                placed.append(trial)
                if not small:
                    bigs.append(trial)
                break
        else:
            raise DataError(
                f"could not place cell {index + 1}/{cfg.cells} after "
                f"{_PLACE_ATTEMPTS} attempts; config: {cfg}")
    return placed


def _paint_labels(cfg: SynthConfig, cells: list[_Cell]) -> np.ndarray:
    """Rasterize ellipses; later cells overwrite earlier at shared pixels."""
    size = cfg.size
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    labels = np.zeros((size, size), dtype=np.int32)
    for idx, cell in enumerate(cells, start=1):
        dr = rows - cell.row
        dc = cols - cell.col
        cos_t = math.cos(cell.theta)
        sin_t = math.sin(cell.theta)
        major = (dc * cos_t + dr * sin_t) / cell.a
        minor = (-dc * sin_t + dr * cos_t) / cell.b
        labels[major ** 2 + minor ** 2 <= 1.0] = idx
    return labels


def _render(cfg: SynthConfig, rng: np.random.Generator,
            cells: list[_Cell]) -> tuple[np.ndarray, np.ndarray]:
    """Return (gt instance map, features); gt holds interiors only."""
    labels = _paint_labels(cfg, cells)
    size = cfg.size
    base = np.zeros((size, size, cfg.depth), dtype=np.float64)
    base[:, :, 1] = 1.0
    gt = np.zeros((size, size), dtype=np.int32)
    for idx, cell in enumerate(cells, start=1):
        owned = labels == idx
        if not owned.any():
            raise DataError(
                f"cell {idx} was painted over entirely; config: {cfg}")
        rim = boundary_edges(owned).astype(bool)
        interior = owned & ~rim
        if not interior.any():
            raise DataError(
                f"cell {idx} has no interior after its membrane ring; "
                f"config: {cfg}")
        gt[interior] = idx
        base[rim] = 0.0
        base[rim, 0] = MEMBRANE_MIX[0]
        base[rim, 1] = MEMBRANE_MIX[1]
        base[interior] = 0.0
        base[interior, 0] = CORE_MIX[0]
        base[interior, 1] = CORE_MIX[1]
        if not cell.small:
            band = interior & boundary_edges(interior).astype(bool)
            base[band] = 0.0
            base[band, 0] = EDGE_MIX[0]
            base[band, 1] = EDGE_MIX[1]
    if cfg.speckle_fraction > 0.0:
        lottery = rng.random((size, size))
        spots = (labels == 0) & (lottery < cfg.speckle_fraction)
        base[spots] = 0.0
        base[spots, 0] = SPECKLE_MIX[0]
        base[spots, 1] = SPECKLE_MIX[1]
        base[spots, 2] = SPECKLE_MIX[2]
    noise = rng.standard_normal((size, size, cfg.depth))
    features = (base + cfg.noise * noise).astype(np.float32)
    return gt, features


def _patch_bounds(extent: int, grid: int) -> list[tuple[int, int]]:
    step = -(-extent // grid)
    return [(i * step, min((i + 1) * step, extent)) for i in range(grid)
            if i * step < extent]


def _corrupt_seed(cfg: SynthConfig, rng: np.random.Generator,
                  gt: np.ndarray) -> np.ndarray:
    seed = (gt > 0).astype(np.uint8)
    if cfg.erode > 0.0:
        for idx in range(1, int(gt.max()) + 1):
            inst = gt == idx
            dist = distance_transform(inst)
            keep = dist > cfg.erode * dist.max()
            seed[inst & ~keep] = 0
    if cfg.drop > 0.0:
        row_bounds = _patch_bounds(gt.shape[0], cfg.drop_grid)
        col_bounds = _patch_bounds(gt.shape[1], cfg.drop_grid)
        for r0, r1 in row_bounds:
            for c0, c1 in col_bounds:
                if float(rng.random()) < cfg.drop:
                    seed[r0:r1, c0:c1] = 0
    return seed


def _generate_image(cfg: SynthConfig, image_id: str,
                    image_index: int) -> ImageRecord:
    rng = np.random.default_rng([cfg.seed, image_index])
    cells = _place_cells(rng, cfg)
    gt, features = _render(cfg, rng, cells)
    present = np.unique(gt)
    expected = np.arange(cfg.cells + 1)
    if present.size != cfg.cells + 1 or (np.sort(present) != expected).any():
        raise DataError(
            f"gt labels are not contiguous 1..{cfg.cells}; config: {cfg}")
    seed = _corrupt_seed(cfg, rng, gt)
    return ImageRecord(image_id=image_id, features=features, seed=seed, gt=gt)


def gen_dataset(cfg: SynthConfig) -> dict[str, list[ImageRecord]]:
    """Generate train/test splits; fixed config gives byte-identical output.

    Image ids are `train_000`, ... and `test_000`, ...; the per-image RNG is
    keyed by (config seed, global image index) so records are independent of
    how many images sit in each split ahead of them.
    """
    splits: dict[str, list[ImageRecord]] = {"train": [], "test": []}
    index = 0
    for split, count in (("train", cfg.train_images),
                         ("test", cfg.test_images)):
        for i in range(count):
            record = _generate_image(cfg, f"{split}_{i:03d}", index)
            splits[split].append(record)
            index += 1
    return splits


def standard_config() -> SynthConfig:
    """The tuned showcase dataset used by the demo pipeline and benchmarks.

    Size-bimodal population: nine large cells per image carry the real
    signal, while a majority of tiny cells stay hard for the proposal
    oracle (pair with `small_label_map` and a failing oracle so their
    consistency scores form a persistent low cluster).  Forty percent of
    seed tiles are dropped so propagation has genuine dropouts to recover,
    and speckles give the similarity argmax something to overreach on.
    """
    return SynthConfig(seed=404, train_images=4, test_images=2, size=96,
                       cells=26, radius_min=7.0, radius_max=9.0,
                       overlap=0.15, noise=0.10, drop=0.4, drop_grid=3,
                       small_fraction=0.65, small_radius_min=2.2,
                       small_radius_max=2.8, speckle_fraction=0.03)


def small_label_map(cfg: SynthConfig,
                    dataset: dict[str, list[ImageRecord]],
                    ) -> dict[str, frozenset[int]]:
    """Per-image label sets of the small cells a dataset was generated with.

    Small cells are always placed after the big ones, so their labels are the
    trailing block of the 1..cells range in every image.
    """
    n_small = int(round(cfg.cells * cfg.small_fraction))
    labels = frozenset(range(cfg.cells - n_small + 1, cfg.cells + 1))
    return {record.image_id: labels
            for records in dataset.values() for record in records}


def _shift_no_wrap(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate a mask; pixels pushed past the border are lost, not wrapped."""
    out = np.zeros_like(mask)
    height, width = mask.shape
    src_r = slice(max(0, -dy), min(height, height - dy))
    src_c = slice(max(0, -dx), min(width, width - dx))
    dst_r = slice(max(0, dy), min(height, height + dy))
    dst_c = slice(max(0, dx), min(width, width + dx))
    if src_r.start < src_r.stop and src_c.start < src_c.stop:
        out[dst_r, dst_c] = mask[src_r, src_c]
    return out


class SyntheticOracle:
    """Mask proposals from ground truth with controlled success and failure.

    A prompt inside a gt instance returns that instance's mask with its
    boundary ring (inner and outer one-pixel layers) flipped pixelwise at
    the jitter rate.  Instances listed in fail_labels are mislocalized
    instead: the mask is translated past its own effective radius before
    jittering, so the proposal lands mostly off the instance no matter how
    the prompt was chosen.  Every in-instance proposal still contains the
    prompt pixel itself, which keeps its overlap with the prompted object
    strictly positive.  A prompt on background over-propagates: it returns
    the smallest centered blob covering at least failure_fraction of the
    image.  Proposals are deterministic per (image, prompt, oracle seed).
    """

    def __init__(self, gt_maps: dict[str, np.ndarray], jitter: float = 0.1,
                 failure_fraction: float = 0.5, seed: int = 0,
                 fail_labels: dict[str, frozenset[int]] | None = None,
                 fail_shift: float = 2.2) -> None:
        if not 0.0 <= jitter <= 1.0:
            raise ValueError("jitter must be in [0, 1]")
        if not 0.0 < failure_fraction <= 1.0:
            raise ValueError("failure_fraction must be in (0, 1]")
        if fail_shift <= 0.0:
            raise ValueError("fail_shift must be positive")
        if not gt_maps:
            raise ValueError("oracle needs at least one gt map")
        self.gt_maps = {key: np.asarray(value) for key, value in gt_maps.items()}
        self.jitter = float(jitter)
        self.failure_fraction = float(failure_fraction)
        self.seed = int(seed)
        self.fail_labels = {key: frozenset(value)
                            for key, value in (fail_labels or {}).items()}
        self.fail_shift = float(fail_shift)
        self._order = {key: i for i, key in enumerate(sorted(self.gt_maps))}

    @classmethod
    def from_dataset(cls, dataset: dict[str, list[ImageRecord]],
                     jitter: float = 0.1, failure_fraction: float = 0.5,
                     seed: int = 0,
                     fail_labels: dict[str, frozenset[int]] | None = None,
                     fail_shift: float = 2.2) -> "SyntheticOracle":
        maps = {}
        for records in dataset.values():
            for record in records:
                if record.gt is None:
                    raise ValueError(f"record {record.image_id} has no gt")
                maps[record.image_id] = record.gt
        return cls(maps, jitter=jitter, failure_fraction=failure_fraction,
                   seed=seed, fail_labels=fail_labels, fail_shift=fail_shift)

    def propose(self, image_id: str, row: int, col: int) -> np.ndarray:
        gt = self.gt_maps[image_id]
        height, width = gt.shape
        if not (0 <= row < height and 0 <= col < width):
            raise ValueError(f"prompt ({row}, {col}) out of bounds for "
                             f"{height}x{width} image {image_id}")
        rng = np.random.default_rng(
            [self.seed, self._order[image_id], int(row), int(col)])
        label = int(gt[row, col])
        if label > 0:
            mask = (gt == label).astype(np.uint8)
            if label in self.fail_labels.get(image_id, frozenset()):
                reach = math.sqrt(mask.sum() / math.pi)
                dist = max(2.0, self.fail_shift * reach)
                phi = float(rng.uniform(0.0, 2.0 * math.pi))
                mask = _shift_no_wrap(mask, round(dist * math.sin(phi)),
                                      round(dist * math.cos(phi)))
            ring = boundary_edges(mask).astype(bool)
            ring |= dilate(mask, 1).astype(bool) & (mask == 0)
            spots = np.flatnonzero(ring.ravel())
            flips = rng.random(spots.size) < self.jitter
            flat = mask.ravel()
            flat[spots[flips]] ^= 1
            proposal = flat.reshape(mask.shape)
            proposal[row, col] = 1
            return proposal
        rows, cols = np.mgrid[0:height, 0:width]
        d2 = (rows - row) ** 2 + (cols - col) ** 2
        target = math.ceil(self.failure_fraction * height * width)
        kth = np.partition(d2.ravel(), target - 1)[target - 1]
        return (d2 <= kth).astype(np.uint8)
