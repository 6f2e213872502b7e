"""Oracle-consistency scoring and pseudo-label assembly.

Each candidate instance is turned into a point prompt at its deepest
interior pixel, the prompt is sent to a mask-proposal oracle, and the
instance's confidence is the IoU between the instance and the proposal.
Per image, an adaptive threshold (mean plus population std of the score
pool) splits instances three ways: confidently real (above threshold),
confidently background (zero overlap), and uncertain (everything else,
omitted from training).  Accepted labels become paired binary and edge
pseudo-masks with a shared ignore channel for the uncertain pixels.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .grids import DataError, load_binary_mask
from .metrics import aji
from .morphology import boundary_edges, center_point

logger = logging.getLogger(__name__)

THRESHOLD_MODES = ("mean_plus_std", "std_over_mean")


class MaskProposalOracle(Protocol):
    """Anything that can turn a point prompt into a binary mask proposal.

    Implementations must be deterministic for a fixed (image, prompt,
    oracle seed) and tolerate concurrent calls with distinct prompts.
    """

    def propose(self, image_id: str, row: int, col: int) -> np.ndarray:
        ...


@dataclass(frozen=True)
class ScoredInstance:
    id: int
    mask: np.ndarray  # (H, W) bool
    prompt: tuple[int, int]
    proposal: np.ndarray  # (H, W) uint8; zeros when the oracle failed
    confidence: float
    label: int  # 1 accepted, 0 certain background, -1 uncertain


@dataclass(frozen=True)
class ThresholdReport:
    delta: float
    mean: float
    std: float
    labels: np.ndarray  # (N,) int8, aligned with the scored instances


@dataclass(frozen=True)
class PseudoLabelPair:
    """Binary and edge training targets with one shared ignore channel."""

    binary: np.ndarray  # (H, W) uint8
    edge: np.ndarray  # (H, W) uint8
    ignore: np.ndarray  # (H, W) bool, applies to both targets


def score_instance(instance: np.ndarray, proposal: np.ndarray) -> float:
    """IoU between an instance mask and an oracle proposal.

    Unlike the both-empty convention in the evaluation metrics, an empty
    union here means the oracle offered nothing for nothing: confidence 0.
    """
    instance = np.asarray(instance) != 0
    proposal = np.asarray(proposal) != 0
    if instance.shape != proposal.shape:
        raise ValueError(
            f"shape mismatch {instance.shape} vs {proposal.shape}")
    union = int((instance | proposal).sum())
    if union == 0:
        return 0.0
    return int((instance & proposal).sum()) / union


def classify_instances(confidences: Sequence[float] | np.ndarray,
                       delta: float) -> np.ndarray:
    """Trichotomy labels: 1 above delta, 0 at exactly zero, -1 between.

    Ties at the threshold are rejected; a zero confidence means the oracle
    saw nothing where the instance sits, which is treated as certain
    background rather than uncertainty.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    labels = np.full(conf.shape, -1, dtype=np.int8)
    labels[conf > delta] = 1
    labels[conf == 0.0] = 0
    return labels


def adaptive_threshold(confidences: Sequence[float] | np.ndarray,
                       mode: str = "mean_plus_std") -> ThresholdReport:
    """Per-image threshold from the score pool itself.

    The default adds the population standard deviation to the mean; the
    ratio variant (std divided by mean) is exposed for experimentation and
    degrades to 0 when every score is 0.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    if conf.size == 0:
        raise ValueError("adaptive_threshold needs at least one confidence")
    if mode not in THRESHOLD_MODES:
        raise ValueError(f"unknown threshold mode {mode!r}; "
                         f"expected one of {THRESHOLD_MODES}")
    mean = float(conf.mean())
    std = float(conf.std())
    if mode == "mean_plus_std":
        delta = mean + std
    else:
        delta = std / mean if mean > 0 else 0.0
    return ThresholdReport(delta=delta, mean=mean, std=std,
                           labels=classify_instances(conf, delta))


def score_image(image_id: str, instances: np.ndarray,
                oracle: MaskProposalOracle, mode: str = "mean_plus_std",
                ) -> tuple[list[ScoredInstance], ThresholdReport]:
    """Score every instance of one image against the oracle.

    An oracle failure for a single prompt is logged and treated as an
    oracle miss (confidence 0, certain background) rather than aborting
    the image.  An empty instance map yields an empty report.
    """
    instances = np.asarray(instances)
    ids = [int(v) for v in np.unique(instances) if v > 0]
    if not ids:
        empty = np.zeros(0, dtype=np.int8)
        return [], ThresholdReport(delta=0.0, mean=0.0, std=0.0, labels=empty)
    masks = []
    prompts = []
    proposals = []
    confidences = []
    for inst_id in ids:
        mask = instances == inst_id
        prompt = center_point(mask.astype(np.uint8))
        try:
            raw = oracle.propose(image_id, prompt[0], prompt[1])
            proposal = (np.asarray(raw) != 0).astype(np.uint8)
            confidence = score_instance(mask, proposal)
        except Exception as exc:  # noqa: BLE001 - any oracle fault is a miss
            logger.warning("oracle failed for %s instance %d at %s: %s",
                           image_id, inst_id, prompt, exc)
            proposal = np.zeros(instances.shape, dtype=np.uint8)
            confidence = 0.0
        masks.append(mask)
        prompts.append(prompt)
        proposals.append(proposal)
        confidences.append(confidence)
    report = adaptive_threshold(confidences, mode=mode)
    scored = [ScoredInstance(id=inst_id, mask=mask, prompt=prompt,
                             proposal=proposal, confidence=float(conf),
                             label=int(label))
              for inst_id, mask, prompt, proposal, conf, label
              in zip(ids, masks, prompts, proposals, confidences,
                     report.labels)]
    return scored, report


def build_pseudo_masks(instances: np.ndarray,
                       labels: Mapping[int, int]) -> PseudoLabelPair:
    """Assemble binary and edge targets from per-instance labels.

    Accepted instances paint binary foreground and their one-pixel inner
    boundary paints edge foreground; uncertain instances are masked out of
    both heads; certain-background instances and everything outside any
    instance supervise background.
    """
    instances = np.asarray(instances)
    binary = np.zeros(instances.shape, dtype=np.uint8)
    edge = np.zeros(instances.shape, dtype=np.uint8)
    ignore = np.zeros(instances.shape, dtype=bool)
    for inst_id in (int(v) for v in np.unique(instances) if v > 0):
        if inst_id not in labels:
            raise ValueError(f"no label for instance {inst_id}")
        label = labels[inst_id]
        mask = instances == inst_id
        if label == 1:
            binary[mask] = 1
            edge[boundary_edges(mask.astype(np.uint8)) != 0] = 1
        elif label == -1:
            ignore[mask] = True
        elif label != 0:
            raise ValueError(f"label for instance {inst_id} must be one of "
                             f"(1, 0, -1), got {label}")
    return PseudoLabelPair(binary=binary, edge=edge, ignore=ignore)


def report_payload(scored: list[ScoredInstance],
                   report: ThresholdReport) -> dict:
    """JSON-ready scoring report for one image."""
    return {
        "instances": [
            {"id": item.id, "prompt": [item.prompt[0], item.prompt[1]],
             "confidence": item.confidence, "label": item.label}
            for item in scored
        ],
        "threshold": {"mean": report.mean, "std": report.std,
                      "delta": report.delta},
    }


@dataclass(frozen=True)
class TopkPoint:
    k_percent: int
    count: int
    aji: float
    random_aji: float


DEFAULT_TOPK = (1, 5, 10, 20, 30, 40, 50, 75, 100)


def _paint(selection: list[ScoredInstance]) -> np.ndarray:
    out = np.zeros(selection[0].mask.shape, dtype=np.int32)
    for rank, item in enumerate(selection, start=1):
        out[item.mask] = rank
    return out


def _matched_gt(selection: list[ScoredInstance], gt: np.ndarray) -> np.ndarray:
    """Ground truth restricted to the best-IoU match of each selection."""
    keep: set[int] = set()
    gt_sizes = np.bincount(gt.ravel())
    for item in selection:
        overlap = np.bincount(gt[item.mask])
        best_id = 0
        best = (0, 1)  # IoU as an exact integer fraction
        area = int(item.mask.sum())
        for gt_id in range(1, overlap.size):
            inter = int(overlap[gt_id])
            if inter == 0:
                continue
            union = int(gt_sizes[gt_id]) + area - inter
            if inter * best[1] > best[0] * union:
                best = (inter, union)
                best_id = gt_id
        if best_id:
            keep.add(best_id)
    restricted = np.where(np.isin(gt, sorted(keep)), gt, 0)
    return restricted.astype(np.int32)


def topk_confidence_curve(scored: list[ScoredInstance], gt: np.ndarray,
                          ks: Sequence[int] = DEFAULT_TOPK,
                          baseline_draws: int = 20,
                          baseline_seed: int = 0) -> list[TopkPoint]:
    """AJI of the top-K% most confident instances vs their matched gt.

    Each selected instance is matched to its best-IoU ground-truth
    instance and AJI is computed against that matched subset, so a perfect
    oracle reaches 1.0 at the top of the curve.  The baseline redraws the
    same K uniformly at random (seeded, averaged over draws).
    """
    if gt is None:
        raise DataError("top-k confidence curve needs ground truth")
    if not scored:
        raise ValueError("no scored instances")
    gt = np.asarray(gt).astype(np.int32)
    order = np.argsort([-item.confidence for item in scored], kind="stable")
    points = []
    for k in ks:
        if not 0 < k <= 100:
            raise ValueError(f"k percent must be in (0, 100], got {k}")
        count = max(1, round(k / 100 * len(scored)))
        top = [scored[i] for i in order[:count]]
        top_aji = aji(_matched_gt(top, gt), _paint(top))
        draws = []
        for draw in range(baseline_draws):
            rng = np.random.default_rng([baseline_seed, k, draw])
            picks = rng.choice(len(scored), size=count, replace=False)
            sample = [scored[i] for i in sorted(picks)]
            draws.append(aji(_matched_gt(sample, gt), _paint(sample)))
        points.append(TopkPoint(k_percent=int(k), count=count,
                                aji=float(top_aji),
                                random_aji=float(np.mean(draws))))
    return points


class CachedOracle:
    """Memoizing wrapper so recursion rounds reuse identical prompts."""

    def __init__(self, inner: MaskProposalOracle) -> None:
        self.inner = inner
        self._cache: dict[tuple[str, int, int], np.ndarray] = {}
        self._lock = threading.Lock()

    def propose(self, image_id: str, row: int, col: int) -> np.ndarray:
        key = (image_id, int(row), int(col))
        with self._lock:
            hit = self._cache.get(key)
        if hit is None:
            hit = np.asarray(self.inner.propose(image_id, row, col))
            with self._lock:
                self._cache[key] = hit
        return hit.copy()


class FileBridgeOracle:
    """Proposals produced out of process, exchanged through files.

    The driver writes prompts.json; an external tool answers each prompt
    with proposals/<image_id>_<row>_<col>.pgm under the same root.  A
    missing proposal is a data error, which image scoring downgrades to an
    oracle miss for that one instance.
    """

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)

    def proposal_path(self, image_id: str, row: int, col: int) -> Path:
        return self.root / "proposals" / f"{image_id}_{row}_{col}.pgm"

    def propose(self, image_id: str, row: int, col: int) -> np.ndarray:
        path = self.proposal_path(image_id, int(row), int(col))
        if not path.exists():
            raise DataError(f"no oracle proposal at {path}")
        return load_binary_mask(path)


def write_prompts(root: str | Path,
                  prompts: Sequence[tuple[str, int, int]]) -> Path:
    """Write the bridge request file listing every prompt to answer."""
    path = Path(root) / "prompts.json"
    payload = [{"image_id": image_id, "row": int(row), "col": int(col)}
               for image_id, row, col in prompts]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path
