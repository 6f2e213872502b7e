"""Two-head per-pixel student and the recursive self-distillation driver.

The student is a shallow classifier over precomputed per-pixel features:
one shared rectified linear trunk feeding a binary-foreground head and an
instance-edge head.  Each round scores the current teacher's instances
against the proposal oracle, assembles pseudo-labels from the accepted
ones, and trains a fresh student with full-batch gradient descent on a
cross-entropy plus Dice objective; the converged student then becomes the
teacher for the next round.  Everything is deterministic under fixed
seeds: forward math runs in float64, parameters live in float32.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .grids import DataError, ImageRecord, load_grid, save_grid
from .metrics import MetricsReport, evaluate, mean_reports
from .morphology import (Marker, center_point, connected_components, dilate,
                         segment_instances, watershed_split)
from .propagation import NumericError, propagate_image
from .scoring import (MaskProposalOracle, PseudoLabelPair,
                      build_pseudo_masks, score_image)

logger = logging.getLogger(__name__)

CE_CLAMP = 1e-7
DICE_EPS = 1.0
SEPARATOR_DILATE = 1.0

_TENSOR_FIELDS = ("trunk_w", "trunk_b", "bin_w", "bin_b", "edge_w", "edge_b")


@dataclass(frozen=True)
class StudentParams:
    """Shared trunk plus two affine heads; all tensors float32."""

    trunk_w: np.ndarray  # (depth, hidden)
    trunk_b: np.ndarray  # (hidden,)
    bin_w: np.ndarray  # (hidden,)
    bin_b: np.ndarray  # (1,)
    edge_w: np.ndarray  # (hidden,)
    edge_b: np.ndarray  # (1,)

    def __post_init__(self) -> None:
        depth, hidden = self.trunk_w.shape
        shapes = {"trunk_b": (hidden,), "bin_w": (hidden,), "bin_b": (1,),
                  "edge_w": (hidden,), "edge_b": (1,)}
        for name, want in shapes.items():
            got = getattr(self, name).shape
            if got != want:
                raise ValueError(f"{name} must have shape {want}, got {got}")
        for name in _TENSOR_FIELDS:
            tensor = getattr(self, name)
            if tensor.dtype != np.float32:
                raise ValueError(f"{name} must be float32, got {tensor.dtype}")
            if not np.isfinite(tensor).all():
                raise ValueError(f"{name} contains non-finite values")

    @property
    def depth(self) -> int:
        return self.trunk_w.shape[0]

    @property
    def hidden(self) -> int:
        return self.trunk_w.shape[1]


@dataclass(frozen=True)
class LossReport:
    total: float
    ce_bin: float
    dice_bin: float
    ce_edge: float
    dice_edge: float
    counted: int  # non-ignore pixels contributing to the losses


@dataclass(frozen=True)
class RoundState:
    """Snapshot after one distillation round (index 0 = untrained seed state)."""

    round_index: int
    params: StudentParams
    accepted: int
    accepted_by_image: dict[str, int] = field(default_factory=dict)
    pseudo: dict[str, PseudoLabelPair] = field(default_factory=dict)
    losses: tuple[LossReport, ...] = ()
    metrics: MetricsReport | None = None


@dataclass(frozen=True)
class DistillConfig:
    rounds: int = 3
    epochs: int = 20
    lr: float = 0.1
    hidden: int = 32
    seed: int = 0
    per_axis: int = 3
    lam: float = 0.1
    tol: float = 1e-6
    max_iter: int = 2000
    min_distance: int = 3
    connectivity: int = 4
    edge_dilate: float = SEPARATOR_DILATE
    threshold_mode: str = "mean_plus_std"
    adjacent_radius: float = 2.0
    adjacent_min_neighbors: int = 1

    def __post_init__(self) -> None:
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")
        if self.per_axis < 1:
            raise ValueError("per_axis must be >= 1")
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.min_distance < 1:
            raise ValueError("min_distance must be >= 1")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")
        if self.edge_dilate < 0:
            raise ValueError("edge_dilate must be >= 0")
        if self.adjacent_radius <= 0:
            raise ValueError("adjacent_radius must be positive")
        if self.adjacent_min_neighbors < 1:
            raise ValueError("adjacent_min_neighbors must be >= 1")


def init_params(depth: int, hidden: int,
                seed: int | Sequence[int] = 0) -> StudentParams:
    """Fresh student; scaled normal trunk, zero-bias heads."""
    if depth < 1 or hidden < 1:
        raise ValueError("depth and hidden must be >= 1")
    rng = np.random.default_rng(seed)
    scale = np.sqrt(2.0 / depth)
    return StudentParams(
        trunk_w=(scale * rng.standard_normal((depth, hidden))).astype(np.float32),
        trunk_b=np.zeros(hidden, dtype=np.float32),
        bin_w=(rng.standard_normal(hidden) / np.sqrt(hidden)).astype(np.float32),
        bin_b=np.zeros(1, dtype=np.float32),
        edge_w=(rng.standard_normal(hidden) / np.sqrt(hidden)).astype(np.float32),
        edge_b=np.zeros(1, dtype=np.float32),
    )


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward_parts(params: StudentParams, flat: np.ndarray):
    x = flat.astype(np.float64)
    pre = x @ params.trunk_w.astype(np.float64) + params.trunk_b.astype(np.float64)
    hidden = np.maximum(pre, 0.0)
    logit_bin = hidden @ params.bin_w.astype(np.float64) + float(params.bin_b[0])
    logit_edge = hidden @ params.edge_w.astype(np.float64) + float(params.edge_b[0])
    return x, pre, hidden, _sigmoid(logit_bin), _sigmoid(logit_edge)


def student_forward(params: StudentParams,
                    features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel foreground and edge probabilities, each (H, W) in (0, 1)."""
    features = np.asarray(features)
    if features.ndim != 3 or features.shape[2] != params.depth:
        raise ValueError(f"features must be (H, W, {params.depth}), "
                         f"got {features.shape}")
    height, width, depth = features.shape
    flat = features.reshape(-1, depth)
    _, _, _, p_bin, p_edge = _forward_parts(params, flat)
    return p_bin.reshape(height, width), p_edge.reshape(height, width)


def _head_terms(p: np.ndarray, y: np.ndarray) -> tuple[float, float, np.ndarray]:
    """CE and Dice over kept pixels plus d(loss)/d(logit) for this head."""
    clamped = np.clip(p, CE_CLAMP, 1.0 - CE_CLAMP)
    count = p.size
    ce = float(-(y * np.log(clamped)
                 + (1.0 - y) * np.log(1.0 - clamped)).sum() / count)
    grad = np.where(p == clamped, p - y, 0.0) / count
    overlap = 2.0 * float((p * y).sum()) + DICE_EPS
    total = float(p.sum()) + float(y.sum()) + DICE_EPS
    dice = 1.0 - overlap / total
    grad = grad + (overlap - 2.0 * y * total) / total ** 2 * (p * (1.0 - p))
    return ce, float(dice), grad


def loss_seg(p_fg: np.ndarray, p_edge: np.ndarray,
             targets: PseudoLabelPair) -> LossReport:
    """CE + Dice per head on non-ignore pixels, summed across heads."""
    report, _ = _loss_from_probs(np.asarray(p_fg), np.asarray(p_edge), targets)
    return report


def _loss_from_probs(p_fg: np.ndarray, p_edge: np.ndarray,
                     targets: PseudoLabelPair):
    if p_fg.shape != targets.binary.shape or p_edge.shape != targets.edge.shape:
        raise ValueError("probability and target shapes disagree")
    keep = ~targets.ignore.ravel()
    counted = int(keep.sum())
    if counted == 0:
        logger.warning("every pixel is ignored; loss and gradients are zero")
        zero = np.zeros(p_fg.size, dtype=np.float64)
        return (LossReport(0.0, 0.0, 0.0, 0.0, 0.0, 0), (zero, zero.copy()))
    y_bin = targets.binary.ravel()[keep].astype(np.float64)
    y_edge = targets.edge.ravel()[keep].astype(np.float64)
    ce_b, dice_b, g_bin = _head_terms(p_fg.ravel()[keep], y_bin)
    ce_e, dice_e, g_edge = _head_terms(p_edge.ravel()[keep], y_edge)
    full_bin = np.zeros(p_fg.size, dtype=np.float64)
    full_edge = np.zeros(p_edge.size, dtype=np.float64)
    full_bin[keep] = g_bin
    full_edge[keep] = g_edge
    report = LossReport(total=ce_b + dice_b + ce_e + dice_e,
                        ce_bin=ce_b, dice_bin=dice_b,
                        ce_edge=ce_e, dice_edge=dice_e, counted=counted)
    return report, (full_bin, full_edge)


def loss_and_grads(params: StudentParams, features: np.ndarray,
                   targets: PseudoLabelPair,
                   ) -> tuple[LossReport, dict[str, np.ndarray]]:
    """Loss report and analytic d(loss)/d(parameter) for every tensor."""
    features = np.asarray(features)
    if features.ndim != 3 or features.shape[2] != params.depth:
        raise ValueError(f"features must be (H, W, {params.depth}), "
                         f"got {features.shape}")
    flat = features.reshape(-1, params.depth)
    x, pre, hidden, p_bin, p_edge = _forward_parts(params, flat)
    shape = targets.binary.shape
    report, (g_bin, g_edge) = _loss_from_probs(
        p_bin.reshape(shape), p_edge.reshape(shape), targets)
    grads = {
        "bin_w": hidden.T @ g_bin,
        "bin_b": np.array([g_bin.sum()]),
        "edge_w": hidden.T @ g_edge,
        "edge_b": np.array([g_edge.sum()]),
    }
    back = (np.outer(g_bin, params.bin_w.astype(np.float64))
            + np.outer(g_edge, params.edge_w.astype(np.float64)))
    back *= pre > 0  # rectifier gate
    grads["trunk_w"] = x.T @ back
    grads["trunk_b"] = back.sum(axis=0)
    return report, grads


def _apply_step(params: StudentParams, grads: Mapping[str, np.ndarray],
                lr: float) -> StudentParams:
    updated = {name: (getattr(params, name).astype(np.float64)
                      - lr * grads[name]).astype(np.float32)
               for name in _TENSOR_FIELDS}
    return StudentParams(**updated)


def train_epoch(params: StudentParams,
                dataset: Sequence[tuple[np.ndarray, PseudoLabelPair]],
                lr: float, seed: int | Sequence[int] = 0,
                ) -> tuple[StudentParams, list[LossReport]]:
    """One full-batch gradient step per image, in a seed-fixed shuffle.

    Returned loss reports are aligned with the dataset order regardless of
    the visit order.  A non-finite loss aborts with a numeric error.
    """
    if lr < 0:
        raise ValueError("lr must be >= 0")
    order = np.random.default_rng(seed).permutation(len(dataset))
    reports: list[LossReport | None] = [None] * len(dataset)
    for idx in order:
        features, targets = dataset[int(idx)]
        report, grads = loss_and_grads(params, features, targets)
        if not np.isfinite(report.total):
            raise NumericError(
                f"non-finite loss {report.total} on image {int(idx)}; "
                f"ce_bin={report.ce_bin} dice_bin={report.dice_bin} "
                f"ce_edge={report.ce_edge} dice_edge={report.dice_edge}")
        params = _apply_step(params, grads, lr)
        reports[int(idx)] = report
    return params, [r for r in reports if r is not None]


def predict_instances(params: StudentParams, features: np.ndarray,
                      edge_dilate: float = SEPARATOR_DILATE,
                      connectivity: int = 4) -> np.ndarray:
    """Instance map from the student: thresholded heads, then watershed.

    Edge activations are dilated into separators; connected components of
    the un-separated foreground provide one marker each, and the watershed
    assigns every foreground pixel to a marker basin.
    """
    p_fg, p_edge = student_forward(params, features)
    binary = (p_fg > 0.5).astype(np.uint8)
    if not binary.any():
        return np.zeros(binary.shape, dtype=np.int32)
    separators = (p_edge > 0.5).astype(np.uint8)
    seeds = binary.copy()
    seeds[dilate(separators, edge_dilate) != 0] = 0
    components = connected_components(seeds, connectivity)
    markers = []
    for comp_id in range(1, int(components.max()) + 1):
        row, col = center_point((components == comp_id).astype(np.uint8))
        markers.append(Marker(row=row, col=col, marker_id=comp_id))
    return watershed_split(binary, markers, connectivity)


def run_round(state: RoundState, dataset: dict[str, list[ImageRecord]],
              oracle: MaskProposalOracle, cfg: DistillConfig) -> RoundState:
    """One distillation round: score the teacher, train a fresh student.

    Round 1 scores Step-1 propagation instances; later rounds score the
    previous student's predictions.  The new student is re-initialized so
    each round distills teacher knowledge instead of accumulating drift.
    """
    train = dataset.get("train", [])
    if not train:
        raise DataError("distillation needs a non-empty train split")
    t = state.round_index + 1
    pseudo: dict[str, PseudoLabelPair] = {}
    accepted_by_image: dict[str, int] = {}
    batch: list[tuple[np.ndarray, PseudoLabelPair]] = []
    for rec in train:
        if state.round_index == 0:
            result = propagate_image(rec.features, rec.seed,
                                     per_axis=cfg.per_axis, lam=cfg.lam,
                                     tol=cfg.tol, max_iter=cfg.max_iter)
            instances = segment_instances(result.mask, cfg.min_distance,
                                          cfg.connectivity)
        else:
            instances = predict_instances(state.params, rec.features,
                                          cfg.edge_dilate, cfg.connectivity)
        scored, report = score_image(rec.image_id, instances, oracle,
                                     mode=cfg.threshold_mode)
        labels = {item.id: item.label for item in scored}
        pair = build_pseudo_masks(instances, labels)
        pseudo[rec.image_id] = pair
        accepted_by_image[rec.image_id] = int((report.labels == 1).sum())
        batch.append((rec.features, pair))
    depth = train[0].features.shape[2]
    params = init_params(depth, cfg.hidden, seed=(cfg.seed, t))
    losses: list[LossReport] = []
    for epoch in range(cfg.epochs):
        params, losses = train_epoch(params, batch, cfg.lr,
                                     seed=(cfg.seed, t, epoch))
    return RoundState(round_index=t, params=params,
                      accepted=sum(accepted_by_image.values()),
                      accepted_by_image=accepted_by_image,
                      pseudo=pseudo, losses=tuple(losses))


@dataclass(frozen=True)
class CoinResult:
    params: StudentParams
    states: tuple[RoundState, ...]
    reports: tuple[MetricsReport, ...]  # index 0 = Step-1-only baseline

    @property
    def accepted_counts(self) -> list[int]:
        return [state.accepted for state in self.states]


def _split_metrics(records: Sequence[ImageRecord],
                   predictions: Mapping[str, np.ndarray],
                   adjacent_radius: float = 2.0,
                   adjacent_min_neighbors: int = 1) -> MetricsReport | None:
    scored = [evaluate(rec.gt, predictions[rec.image_id],
                       adjacent_radius, adjacent_min_neighbors)
              for rec in records if rec.gt is not None]
    if not scored:
        return None
    return mean_reports(scored)


def run_coin(dataset: dict[str, list[ImageRecord]],
             oracle: MaskProposalOracle, cfg: DistillConfig) -> CoinResult:
    """Full pipeline: Step-1 baseline, then cfg.rounds distillation rounds.

    Metrics are computed on the test split (falling back to train when no
    test images exist) after every round; report 0 evaluates the Step-1
    propagation masks alone, so reports has rounds+1 entries whenever
    ground truth is available.
    """
    train = dataset.get("train", [])
    if not train:
        raise DataError("run_coin needs a non-empty train split")
    eval_records = dataset.get("test") or train
    baseline = {}
    for rec in eval_records:
        result = propagate_image(rec.features, rec.seed,
                                 per_axis=cfg.per_axis, lam=cfg.lam,
                                 tol=cfg.tol, max_iter=cfg.max_iter)
        baseline[rec.image_id] = segment_instances(result.mask,
                                                   cfg.min_distance,
                                                   cfg.connectivity)
    reports: list[MetricsReport] = []
    base_report = _split_metrics(eval_records, baseline,
                              cfg.adjacent_radius,
                              cfg.adjacent_min_neighbors)
    if base_report is not None:
        reports.append(base_report)
    depth = train[0].features.shape[2]
    state = RoundState(round_index=0,
                       params=init_params(depth, cfg.hidden,
                                          seed=(cfg.seed, 0)),
                       accepted=0)
    states: list[RoundState] = []
    for _ in range(cfg.rounds):
        state = run_round(state, dataset, oracle, cfg)
        predictions = {rec.image_id: predict_instances(state.params,
                                                       rec.features,
                                                       cfg.edge_dilate,
                                                       cfg.connectivity)
                       for rec in eval_records}
        round_report = _split_metrics(eval_records, predictions,
                                       cfg.adjacent_radius,
                                       cfg.adjacent_min_neighbors)
        if round_report is not None:
            state = replace(state, metrics=round_report)
            reports.append(round_report)
        states.append(state)
    return CoinResult(params=state.params, states=tuple(states),
                      reports=tuple(reports))


def save_checkpoint(params: StudentParams, root: str | Path) -> Path:
    """Write one grid file per tensor plus a manifest; returns the manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name in _TENSOR_FIELDS:
        filename = f"{name}.cgf"
        save_grid(getattr(params, name), root / filename)
        tensors[name] = filename
    manifest = {"format": "student-checkpoint", "version": 1,
                "depth": params.depth, "hidden": params.hidden,
                "tensors": tensors}
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(root: str | Path) -> StudentParams:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != "student-checkpoint":
        raise DataError(f"not a student checkpoint: {manifest_path}")
    tensors = manifest["tensors"]
    loaded = {name: load_grid(root / tensors[name]) for name in _TENSOR_FIELDS}
    return StudentParams(**loaded)
