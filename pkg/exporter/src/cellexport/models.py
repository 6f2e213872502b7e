"""Model backends: feature extractors and point-prompt mask proposers.

Two families ship:

* Self-contained backends (``filterbank`` features, ``affinity`` proposals)
  run on plain NumPy with no external weights and are fully deterministic,
  so exports are reproducible byte-for-byte.
* Named neural adapters (``dinov2``/``mae`` features, ``sam`` proposals)
  resolve a cached weights bundle under the weights directory and hand it to
  the model runtime.  When the bundle or runtime is absent they raise
  ``ModelLoadError``, which the CLI reports as a model load failure with a
  nonzero exit — no output is produced from a half-loaded model.

The weights directory is ``$CELLEXPORT_WEIGHTS_DIR`` when set, otherwise
``~/.cache/cellexport``; adapter ``<name>`` expects ``<name>.weights``.
"""

from __future__ import annotations

import importlib
import os
from collections import deque
from pathlib import Path

import numpy as np


class ModelLoadError(RuntimeError):
    """A model backend could not be loaded (missing weights or runtime)."""


def weights_dir() -> Path:
    env = os.environ.get("CELLEXPORT_WEIGHTS_DIR", "")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "cellexport"


def weights_path(name: str) -> Path:
    return weights_dir() / f"{name}.weights"


def _require_weights(name: str) -> Path:
    path = weights_path(name)
    if not path.is_file():
        raise ModelLoadError(
            f"{name}: weights not found at {path} "
            f"(set CELLEXPORT_WEIGHTS_DIR or place the cached bundle there)")
    return path


def _require_runtime(name: str, module: str) -> object:
    try:
        return importlib.import_module(module)
    except ImportError as exc:
        raise ModelLoadError(
            f"{name}: model runtime {module!r} is not installed") from exc


# ---------------------------------------------------------------------------
# Feature backends


def _box_blur(grid: np.ndarray, radius: int) -> np.ndarray:
    """Mean filter with edge replication over a 2-D grid."""
    if radius < 1:
        return grid.astype(np.float32, copy=True)
    padded = np.pad(grid.astype(np.float64), radius, mode="edge")
    size = 2 * radius + 1
    # separable box filter via windowed sums of cumulative sums
    csum = np.cumsum(np.pad(padded, ((1, 0), (0, 0))), axis=0)
    rows = (csum[size:, :] - csum[:-size, :]) / size
    csum = np.cumsum(np.pad(rows, ((0, 0), (1, 0))), axis=1)
    cols = (csum[:, size:] - csum[:, :-size]) / size
    return cols.astype(np.float32)


def _block_stats(plane: np.ndarray, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-token mean and standard deviation over stride x stride blocks."""
    h, w = plane.shape
    th = -(-h // stride)
    tw = -(-w // stride)
    pad = ((0, th * stride - h), (0, tw * stride - w))
    padded = np.pad(plane.astype(np.float64), pad, mode="edge")
    blocks = padded.reshape(th, stride, tw, stride)
    mean = blocks.mean(axis=(1, 3))
    std = blocks.std(axis=(1, 3))
    return mean.astype(np.float32), std.astype(np.float32)


class FilterBankFeatures:
    """Deterministic multi-scale filter-bank features on a token grid.

    Per stride x stride token: mean R/G/B, gray standard deviation, mean
    absolute horizontal/vertical gray gradient, then two box-blurred copies
    of the token gray level (radius 1 and 3) for local context.
    """

    name = "filterbank"
    depth = 8

    def __init__(self, stride: int = 4) -> None:
        if stride < 1:
            raise ValueError(f"stride must be >= 1, got {stride}")
        self.stride = stride

    def load(self) -> None:
        """Self-contained: nothing to fetch."""

    def embed_patch(self, patch: np.ndarray) -> np.ndarray:
        """(h, w, 3) float32 in [0, 1] -> (th, tw, depth) float32 tokens."""
        gray = patch.mean(axis=2)
        gx = np.abs(np.diff(np.pad(gray, ((0, 0), (1, 0)), mode="edge"), axis=1))
        gy = np.abs(np.diff(np.pad(gray, ((1, 0), (0, 0)), mode="edge"), axis=0))
        channels = []
        for band in range(3):
            mean, _ = _block_stats(patch[:, :, band], self.stride)
            channels.append(mean)
        _, gray_std = _block_stats(gray, self.stride)
        channels.append(gray_std)
        channels.append(_block_stats(gx, self.stride)[0])
        channels.append(_block_stats(gy, self.stride)[0])
        token_gray = (channels[0] + channels[1] + channels[2]) / 3.0
        channels.append(_box_blur(token_gray, 1))
        channels.append(_box_blur(token_gray, 3))
        return np.stack(channels, axis=2).astype(np.float32)


class NeuralFeatureAdapter:
    """Adapter for a cached self-supervised encoder run through torch.

    ``load`` resolves the weights bundle and the runtime before any image is
    touched, so a missing model never produces partial output.
    """

    depth = 0  # known only after the checkpoint is loaded

    def __init__(self, name: str, layer: str = "final") -> None:
        self.name = name
        self.layer = layer

    def load(self) -> None:
        path = _require_weights(self.name)
        _require_runtime(self.name, "torch")
        raise ModelLoadError(
            f"{self.name}: cannot interpret weights bundle {path}; install "
            f"the packaged runtime for this encoder and re-run")

    def embed_patch(self, patch: np.ndarray) -> np.ndarray:
        raise ModelLoadError(f"{self.name}: model was never loaded")


class NeuralProposalAdapter:
    """Adapter for a cached promptable mask model run through torch."""

    def __init__(self, name: str) -> None:
        self.name = name

    def load(self) -> None:
        path = _require_weights(self.name)
        _require_runtime(self.name, "torch")
        raise ModelLoadError(
            f"{self.name}: cannot interpret weights bundle {path}; install "
            f"the packaged runtime for this model and re-run")

    def propose(self, rgb: np.ndarray, row: int, col: int) -> np.ndarray:
        raise ModelLoadError(f"{self.name}: model was never loaded")


# ---------------------------------------------------------------------------
# Proposal backends


class AffinityProposer:
    """Color-affinity region growing from the prompt pixel.

    The seed color is the mean over the 3x3 neighborhood of the prompt; the
    proposal is the 4-connected region of pixels whose color distance to the
    seed stays within ``threshold``, grown breadth-first from the prompt in
    a fixed neighbor order so truncation by ``max_size`` is deterministic.
    """

    name = "affinity"

    def __init__(self, threshold: float = 0.12, max_size: int = 0) -> None:
        if threshold <= 0:
            raise ValueError(f"threshold must be > 0, got {threshold}")
        if max_size < 0:
            raise ValueError(f"max_size must be >= 0, got {max_size}")
        self.threshold = threshold
        self.max_size = max_size

    def load(self) -> None:
        """Self-contained: nothing to fetch."""

    def propose(self, rgb: np.ndarray, row: int, col: int) -> np.ndarray:
        img = rgb.astype(np.float32) / 255.0
        h, w = img.shape[:2]
        r0, r1 = max(row - 1, 0), min(row + 2, h)
        c0, c1 = max(col - 1, 0), min(col + 2, w)
        seed = img[r0:r1, c0:c1].reshape(-1, 3).mean(axis=0)
        within = np.linalg.norm(img - seed, axis=2) <= self.threshold
        mask = np.zeros((h, w), dtype=np.uint8)
        mask[row, col] = 1
        queue = deque([(row, col)])
        grown = 1
        limit = self.max_size if self.max_size else h * w
        while queue and grown < limit:
            r, c = queue.popleft()
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                nr, nc = r + dr, c + dc
                if 0 <= nr < h and 0 <= nc < w and not mask[nr, nc] and within[nr, nc]:
                    mask[nr, nc] = 1
                    queue.append((nr, nc))
                    grown += 1
                    if grown >= limit:
                        break
        return mask


# ---------------------------------------------------------------------------
# Registry

FEATURE_MODELS = ("filterbank", "dinov2", "mae")
PROPOSAL_MODELS = ("affinity", "sam")


def create_feature_model(name: str, stride: int = 4, layer: str = "final"):
    if name == "filterbank":
        return FilterBankFeatures(stride=stride)
    if name in FEATURE_MODELS:
        return NeuralFeatureAdapter(name, layer=layer)
    raise ValueError(f"unknown feature model {name!r}, "
                     f"expected one of {', '.join(FEATURE_MODELS)}")


def create_proposal_model(name: str, threshold: float = 0.12, max_size: int = 0):
    if name == "affinity":
        return AffinityProposer(threshold=threshold, max_size=max_size)
    if name in PROPOSAL_MODELS:
        return NeuralProposalAdapter(name)
    raise ValueError(f"unknown proposal model {name!r}, "
                     f"expected one of {', '.join(PROPOSAL_MODELS)}")
