"""Per-image feature export: patch, embed, upsample, stitch, write.

Each image is split into ``per_axis`` x ``per_axis`` equal patches (bottom/
right edge-replication padding when the extent does not divide evenly — the
same tiling rule the segmentation pipeline uses), the backend embeds every
patch into a token grid, tokens are upsampled back to pixel resolution by
nearest neighbor, and the patches are stitched and cropped to the source
extent.  The result is one ``<id>.features.cgf`` float32 (H, W, D) tensor
per image plus a ``manifest.json`` describing every export.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .formats import DataError, atomic_write_json, discover_images, load_image, save_tensor
from .models import create_feature_model


@dataclass(frozen=True)
class ExportJob:
    """One feature-export request over a folder of images."""

    images_dir: Path
    out_dir: Path
    model: str = "filterbank"
    per_axis: int = 6
    stride: int = 4
    layer: str = "final"

    def __post_init__(self) -> None:
        if self.per_axis < 1:
            raise ValueError(f"per_axis must be >= 1, got {self.per_axis}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")


def _partition(grid: np.ndarray, per_axis: int) -> tuple[list[np.ndarray], int, int]:
    """Equal patches in row-major order; returns (patches, ph, pw)."""
    h, w = grid.shape[:2]
    ph = -(-h // per_axis)
    pw = -(-w // per_axis)
    pad = [(0, ph * per_axis - h), (0, pw * per_axis - w)] + [(0, 0)] * (grid.ndim - 2)
    padded = np.pad(grid, pad, mode="edge")
    patches = [padded[i * ph:(i + 1) * ph, j * pw:(j + 1) * pw]
               for i in range(per_axis) for j in range(per_axis)]
    return patches, ph, pw


def _upsample_tokens(tokens: np.ndarray, height: int, width: int, stride: int) -> np.ndarray:
    """Nearest-neighbor: pixel (r, c) takes token (r // stride, c // stride)."""
    full = np.repeat(np.repeat(tokens, stride, axis=0), stride, axis=1)
    return full[:height, :width]


def extract_features(rgb: np.ndarray, model, per_axis: int, stride: int) -> np.ndarray:
    """(H, W, 3) uint8 image -> (H, W, D) float32 feature grid."""
    img = rgb.astype(np.float32) / 255.0
    h, w = img.shape[:2]
    patches, ph, pw = _partition(img, per_axis)
    embedded = [_upsample_tokens(model.embed_patch(patch), ph, pw, stride)
                for patch in patches]
    rows = [np.concatenate(embedded[i * per_axis:(i + 1) * per_axis], axis=1)
            for i in range(per_axis)]
    full = np.concatenate(rows, axis=0)
    return np.ascontiguousarray(full[:h, :w], dtype=np.float32)


def export_features(job: ExportJob) -> list[dict]:
    """Export every image in the folder; returns the manifest entries."""
    images = discover_images(job.images_dir)
    if not images:
        raise DataError(f"{job.images_dir}: no images found (expected .ppm or .pgm)")
    model = create_feature_model(job.model, stride=job.stride, layer=job.layer)
    model.load()
    out_dir = Path(job.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries: list[dict] = []
    for image_id in sorted(images):
        rgb = load_image(images[image_id])
        grid = extract_features(rgb, model, job.per_axis, job.stride)
        save_tensor(grid, out_dir / f"{image_id}.features.cgf")
        entries.append({
            "image_id": image_id,
            "H": int(grid.shape[0]),
            "W": int(grid.shape[1]),
            "D": int(grid.shape[2]),
            "model": job.model,
            "per_axis": job.per_axis,
        })
    atomic_write_json(out_dir / "manifest.json", entries)
    return entries
