"""Instance and pixel segmentation quality measures.

All functions take instance maps (int arrays, 0 = background, positive ids)
or binary masks.  Matching is deterministic: ground-truth ids are visited in
ascending order and exact integer arithmetic breaks IoU ties, so relabeling
predictions never changes a score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .morphology import dilate


def _as_instance_map(arr: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"{name} must be integer, got {arr.dtype}")
    if arr.size and arr.min() < 0:
        raise ValueError(f"{name} has negative ids")
    return arr.astype(np.int64)


def _contingency(gt: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """(ng+1) x (np+1) pixel-overlap counts, index 0 = background."""
    ng = int(gt.max())
    npred = int(pred.max())
    idx = gt.ravel() * (npred + 1) + pred.ravel()
    counts = np.bincount(idx, minlength=(ng + 1) * (npred + 1))
    return counts.reshape(ng + 1, npred + 1)


def iou_binary(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two binary masks.  Both empty counts as perfect agreement."""
    a = np.asarray(a) != 0
    b = np.asarray(b) != 0
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def dice_binary(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a) != 0
    b = np.asarray(b) != 0
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def missed_rate(gt_fg: np.ndarray, pred_fg: np.ndarray) -> float:
    """Fraction of true foreground the prediction misses."""
    gt_fg = np.asarray(gt_fg) != 0
    pred_fg = np.asarray(pred_fg) != 0
    denom = int(gt_fg.sum())
    if denom == 0:
        return 0.0
    return int((gt_fg & ~pred_fg).sum()) / denom


def spurious_rate(gt_fg: np.ndarray, pred_fg: np.ndarray) -> float:
    """Fraction of true background the prediction marks as foreground."""
    gt_fg = np.asarray(gt_fg) != 0
    pred_fg = np.asarray(pred_fg) != 0
    denom = int((~gt_fg).sum())
    if denom == 0:
        return 0.0
    return int((pred_fg & ~gt_fg).sum()) / denom


def _pixel_key(pred: np.ndarray, pid: int) -> tuple:
    """Scan-order pixel tuple of one instance, for deterministic tie breaks."""
    return tuple(np.flatnonzero(pred.ravel() == pid).tolist())


def aji(gt: np.ndarray, pred: np.ndarray) -> float:
    """Aggregated Jaccard: greedy per-ground-truth best-IoU matching.

    Ground-truth instances are visited in ascending id; each takes the
    still-unused prediction with the highest IoU (exact fraction compare,
    then the lexicographically smallest pixel set).  Intersections of
    matched pairs accumulate over their unions; unmatched predictions add
    their full size to the denominator.
    """
    gt = _as_instance_map(gt, "gt")
    pred = _as_instance_map(pred, "pred")
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch {gt.shape} vs {pred.shape}")
    cont = _contingency(gt, pred)
    ng, npred = cont.shape[0] - 1, cont.shape[1] - 1
    if ng == 0 and npred == 0:
        return 1.0
    gt_sizes = cont.sum(axis=1)
    pred_sizes = cont.sum(axis=0)
    used = np.zeros(npred + 1, dtype=bool)
    inter_total = 0
    union_total = 0
    for g in range(1, ng + 1):
        best_p = 0
        best_i = 0
        best_u = 1
        for p in range(1, npred + 1):
            if used[p]:
                continue
            i = int(cont[g, p])
            if i == 0:
                continue
            u = int(gt_sizes[g] + pred_sizes[p] - i)
            # compare i/u > best_i/best_u with integers
            diff = i * best_u - best_i * u
            if diff > 0 or (diff == 0 and best_p and
                            _pixel_key(pred, p) < _pixel_key(pred, best_p)):
                best_p, best_i, best_u = p, i, u
        if best_p:
            used[best_p] = True
            inter_total += best_i
            union_total += best_u
        else:
            union_total += int(gt_sizes[g])
    for p in range(1, npred + 1):
        if not used[p]:
            union_total += int(pred_sizes[p])
    if union_total == 0:
        return 1.0
    return inter_total / union_total


@dataclass(frozen=True)
class PanopticResult:
    pq: float
    sq: float
    rq: float
    matched: int
    unmatched_pred: int
    unmatched_gt: int


def panoptic_quality(gt: np.ndarray, pred: np.ndarray) -> PanopticResult:
    """Panoptic quality: pairs with IoU > 0.5 are matches (necessarily
    unique), SQ is their mean IoU, RQ = TP / (TP + FP/2 + FN/2)."""
    gt = _as_instance_map(gt, "gt")
    pred = _as_instance_map(pred, "pred")
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch {gt.shape} vs {pred.shape}")
    cont = _contingency(gt, pred)
    ng, npred = cont.shape[0] - 1, cont.shape[1] - 1
    if ng == 0 and npred == 0:
        return PanopticResult(1.0, 1.0, 1.0, 0, 0, 0)
    gt_sizes = cont.sum(axis=1)
    pred_sizes = cont.sum(axis=0)
    # ids may be sparse; only ids that own pixels count as instances
    n_gt = int((gt_sizes[1:] > 0).sum())
    n_pred = int((pred_sizes[1:] > 0).sum())
    ious = []
    for g in range(1, ng + 1):
        for p in range(1, npred + 1):
            i = int(cont[g, p])
            if i == 0:
                continue
            u = int(gt_sizes[g] + pred_sizes[p] - i)
            if 2 * i > u:  # IoU > 0.5, at most one partner each
                ious.append(i / u)
    tp = len(ious)
    fp = n_pred - tp
    fn = n_gt - tp
    sq = float(np.mean(ious)) if ious else 0.0
    denom = tp + 0.5 * fp + 0.5 * fn
    rq = tp / denom if denom else 0.0
    return PanopticResult(sq * rq, sq, rq, tp, fp, fn)


# ---------------------------------------------------------------------------
# Crowding strata


def adjacent_ids(gt: np.ndarray, radius: float = 2.0,
                 min_neighbors: int = 1) -> set[int]:
    """Ids of ground-truth instances whose dilated masks overlap the dilated
    masks of at least min_neighbors other instances."""
    gt = _as_instance_map(gt, "gt")
    ids = [int(v) for v in np.unique(gt) if v > 0]
    boxes = {}
    grown = {}
    h, w = gt.shape
    pad = int(np.ceil(radius)) + 1
    for i in ids:
        rows, cols = np.nonzero(gt == i)
        boxes[i] = (max(0, rows.min() - pad), min(h, rows.max() + 1 + pad),
                    max(0, cols.min() - pad), min(w, cols.max() + 1 + pad))
        grown[i] = dilate(gt == i, radius).astype(bool)
    counts = {i: 0 for i in ids}
    for a_pos, a in enumerate(ids):
        r0, r1, c0, c1 = boxes[a]
        for b in ids[a_pos + 1:]:
            br0, br1, bc0, bc1 = boxes[b]
            if br0 >= r1 or r0 >= br1 or bc0 >= c1 or c0 >= bc1:
                continue
            if (grown[a] & grown[b]).any():
                counts[a] += 1
                counts[b] += 1
    return {i for i in ids if counts[i] >= min_neighbors}


def _restrict(imap: np.ndarray, keep: set[int]) -> np.ndarray:
    """Keep only the given ids, relabeled 1..k by ascending original id."""
    out = np.zeros_like(imap)
    for new, old in enumerate(sorted(keep), start=1):
        out[imap == old] = new
    return out


def _assign_pred_to_gt(gt: np.ndarray, pred: np.ndarray) -> dict[int, int]:
    """Majority-overlap ground-truth id per prediction (0 if none)."""
    cont = _contingency(gt, pred)
    out = {}
    for p in range(1, cont.shape[1]):
        col = cont[1:, p]
        if col.size == 0 or col.max() == 0:
            out[p] = 0
        else:
            out[p] = int(np.argmax(col)) + 1  # first max = lowest gt id
    return out


@dataclass(frozen=True)
class MetricsBlock:
    aji: float
    pq: float
    sq: float
    rq: float
    iou: float
    dice: float
    fp: float
    fn: float

    def to_dict(self) -> dict:
        return {"aji": self.aji, "pq": self.pq, "sq": self.sq, "rq": self.rq,
                "iou": self.iou, "dice": self.dice, "fp": self.fp, "fn": self.fn}


@dataclass(frozen=True)
class MetricsReport:
    overall: MetricsBlock
    adjacent: MetricsBlock
    non_adjacent: MetricsBlock
    gt_count: int
    pred_count: int
    matched_count: int

    def to_dict(self) -> dict:
        return {
            "overall": self.overall.to_dict(),
            "adjacent": self.adjacent.to_dict(),
            "non_adjacent": self.non_adjacent.to_dict(),
            "counts": {"gt": self.gt_count, "pred": self.pred_count,
                       "matched": self.matched_count},
        }


def _block(gt: np.ndarray, pred: np.ndarray) -> MetricsBlock:
    pan = panoptic_quality(gt, pred)
    return MetricsBlock(
        aji=aji(gt, pred), pq=pan.pq, sq=pan.sq, rq=pan.rq,
        iou=iou_binary(gt > 0, pred > 0), dice=dice_binary(gt > 0, pred > 0),
        fp=spurious_rate(gt > 0, pred > 0), fn=missed_rate(gt > 0, pred > 0))


def evaluate(gt: np.ndarray, pred: np.ndarray, adjacent_radius: float = 2.0,
             adjacent_min_neighbors: int = 1) -> MetricsReport:
    """Full report: overall scores plus crowded / isolated strata.

    Predictions follow their majority-overlap ground-truth instance into a
    stratum; predictions overlapping no ground truth are counted in the
    overall block only.
    """
    gt = _as_instance_map(gt, "gt")
    pred = _as_instance_map(pred, "pred")
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch {gt.shape} vs {pred.shape}")
    adj = adjacent_ids(gt, adjacent_radius, adjacent_min_neighbors)
    all_ids = {int(v) for v in np.unique(gt) if v > 0}
    non = all_ids - adj
    owner = _assign_pred_to_gt(gt, pred)
    pred_adj = {p for p, g in owner.items() if g in adj}
    pred_non = {p for p, g in owner.items() if g in non}
    overall = _block(gt, pred)
    pan = panoptic_quality(gt, pred)
    return MetricsReport(
        overall=overall,
        adjacent=_block(_restrict(gt, adj), _restrict(pred, pred_adj)),
        non_adjacent=_block(_restrict(gt, non), _restrict(pred, pred_non)),
        gt_count=len(all_ids),
        pred_count=len(owner),
        matched_count=pan.matched)


def mean_reports(reports: list[MetricsReport]) -> MetricsReport:
    """Per-field arithmetic mean over per-image reports; counts are summed."""
    if not reports:
        raise ValueError("no reports to average")

    def avg(getter) -> MetricsBlock:
        fields = ["aji", "pq", "sq", "rq", "iou", "dice", "fp", "fn"]
        vals = {f: float(np.mean([getattr(getter(r), f) for r in reports]))
                for f in fields}
        return MetricsBlock(**vals)

    return MetricsReport(
        overall=avg(lambda r: r.overall),
        adjacent=avg(lambda r: r.adjacent),
        non_adjacent=avg(lambda r: r.non_adjacent),
        gt_count=sum(r.gt_count for r in reports),
        pred_count=sum(r.pred_count for r in reports),
        matched_count=sum(r.matched_count for r in reports))
