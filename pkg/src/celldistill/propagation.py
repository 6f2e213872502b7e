"""Seed-to-mask propagation: class prototypes, similarity, transport refine.

The propagation step turns a sparse, conservative seed mask into a
high-sensitivity foreground mask.  Per patch: average the feature vectors
under each seed class into two prototypes, score every pixel by rectified
cosine similarity against both, then rebalance the two per-pixel scores
with an entropic-transport plan whose column marginal is the seed's class
mass.  Multiplying scores by the rescaled plan suppresses over-activated
background pixels while keeping genuinely cell-like pixels, and the
argmax of the rebalanced scores is the propagated mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grids import partition_patches, stitch_patches

MASS_FLOOR = 1e-3
LOG_DOMAIN_BELOW = 0.05


class NumericError(ArithmeticError):
    """Non-finite values where the math guarantees finite ones."""


@dataclass(frozen=True)
class ClassCentroids:
    """Mean feature vector of each class, cell first."""
    cell: np.ndarray
    tissue: np.ndarray


def two_means(vectors: np.ndarray, iterations: int = 10
              ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Plain 2-means: farthest-pair init, fixed Lloyd iterations.

    Returns (centroid_a, centroid_b, assignment) with assignment 0/1 per
    row.  Deterministic: the init pair is the lexicographically first pair
    at maximal squared distance; nearest-centroid ties go to centroid a.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"need a non-empty (n, d) array, got {x.shape}")
    n = x.shape[0]
    if n == 1:
        return x[0].copy(), x[0].copy(), np.zeros(1, dtype=np.int64)
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d2, -np.inf)
    i, j = divmod(int(np.argmax(d2)), n)  # first maximal pair in scan order
    a, b = x[i].copy(), x[j].copy()
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(iterations):
        da = np.sum((x - a) ** 2, axis=1)
        db = np.sum((x - b) ** 2, axis=1)
        assign = (db < da).astype(np.int64)  # ties stay with a
        if assign.all() or not assign.any():
            break  # one cluster emptied, keep previous centroids
        a = x[assign == 0].mean(axis=0)
        b = x[assign == 1].mean(axis=0)
    return a, b, assign


def class_centroids(features: np.ndarray, seed: np.ndarray) -> ClassCentroids:
    """Per-class mean feature vectors from the seed mask.

    cell = mean over seed foreground, tissue = mean over seed background.
    If either class has no pixels the seed carries no split, so a 2-means
    clustering of the features supplies both prototypes instead; the
    smaller cluster plays the cell (cells are the minority class; an even
    split assigns the cluster of the first pixel to tissue).
    """
    features = np.asarray(features, dtype=np.float64)
    seed = np.asarray(seed)
    if features.ndim != 3:
        raise ValueError(f"features must be (H, W, D), got {features.shape}")
    if seed.shape != features.shape[:2]:
        raise ValueError(
            f"seed shape {seed.shape} does not match features {features.shape[:2]}")
    fg = seed != 0
    if fg.any() and not fg.all():
        cell = features[fg].mean(axis=0)
        tissue = features[~fg].mean(axis=0)
        return ClassCentroids(cell=cell, tissue=tissue)
    flat = features.reshape(-1, features.shape[2])
    a, b, assign = two_means(flat)
    size_a = int((assign == 0).sum())
    size_b = int(assign.size - size_a)
    if size_a < size_b:
        return ClassCentroids(cell=a, tissue=b)
    if size_b < size_a:
        return ClassCentroids(cell=b, tissue=a)
    # even split: the cluster holding the first pixel is the tissue
    return ClassCentroids(cell=b, tissue=a) if assign[0] == 0 else \
        ClassCentroids(cell=a, tissue=b)


def similarity_map(features: np.ndarray, centroids: ClassCentroids) -> np.ndarray:
    """Rectified cosine similarity to both prototypes, (H, W, 2) in [0, 1].

    Channel 0 is the cell score, channel 1 the tissue score.  Zero-norm
    feature vectors or prototypes score 0.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3:
        raise ValueError(f"features must be (H, W, D), got {features.shape}")
    out = np.zeros(features.shape[:2] + (2,), dtype=np.float64)
    norms = np.linalg.norm(features, axis=2)
    safe = np.where(norms == 0, 1.0, norms)
    for k, proto in enumerate((centroids.cell, centroids.tissue)):
        proto = np.asarray(proto, dtype=np.float64)
        if proto.shape != (features.shape[2],):
            raise ValueError(
                f"prototype depth {proto.shape} does not match features")
        pnorm = float(np.linalg.norm(proto))
        if pnorm == 0:
            continue
        cos = features @ proto / (safe * pnorm)
        cos[norms == 0] = 0.0
        out[:, :, k] = np.clip(cos, 0.0, 1.0)
    return out


def _floored_mass(cell_fraction: float, floor: float = MASS_FLOOR) -> np.ndarray:
    c = np.array([cell_fraction, 1.0 - cell_fraction], dtype=np.float64)
    c = np.maximum(c, floor)
    return c / c.sum()


def seed_class_mass(seed: np.ndarray, floor: float = MASS_FLOOR) -> np.ndarray:
    """Column marginal from the seed: [fg fraction, bg fraction], floored."""
    seed = np.asarray(seed)
    if seed.size == 0:
        raise ValueError("empty seed")
    return _floored_mass(float((seed != 0).mean()), floor)


def similarity_class_mass(sim: np.ndarray, floor: float = MASS_FLOOR) -> np.ndarray:
    """Column marginal from the similarity argmax (ties count as tissue)."""
    flat = np.asarray(sim, dtype=np.float64).reshape(-1, 2)
    if flat.size == 0:
        raise ValueError("empty similarity map")
    return _floored_mass(float((flat[:, 0] > flat[:, 1]).mean()), floor)


@dataclass
class TransportPlan:
    """Entropic-transport coupling between pixels (rows) and classes (cols)."""
    matrix: np.ndarray  # (n, 2), non-negative, sums to 1
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    lam: float
    converged: bool
    residual_history: list[float] = field(default_factory=list)


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def sinkhorn_plan(sim: np.ndarray, lam: float, tol: float = 1e-6,
                  max_iter: int = 2000, row_marginal: np.ndarray | None = None,
                  col_marginal: np.ndarray | None = None,
                  log_domain: bool | None = None) -> TransportPlan:
    """Entropic-transport plan between pixels and the two classes.

    Minimizes |T * (1 - sim)| - lam * H(T) under the marginals by
    alternating scaling of the kernel exp(-(1 - sim) / lam).  Defaults:
    uniform rows; columns from the similarity argmax mass (callers with a
    trusted prior, like the seed mass, pass col_marginal explicitly).
    Small lam switches to log-domain scaling for stability.  If the
    residual never drops below tol the plan is still returned, flagged
    unconverged.
    """
    if lam <= 0:
        raise ValueError(f"lam must be positive, got {lam}")
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    if max_iter < 1:
        raise ValueError(f"max_iter must be >= 1, got {max_iter}")
    flat = np.asarray(sim, dtype=np.float64).reshape(-1, 2)
    if flat.shape[0] == 0:
        raise ValueError("empty similarity map")
    if not np.isfinite(flat).all():
        raise NumericError("similarity map contains non-finite values")
    n = flat.shape[0]
    r = (np.full(n, 1.0 / n) if row_marginal is None
         else np.asarray(row_marginal, dtype=np.float64).copy())
    c = (similarity_class_mass(flat) if col_marginal is None
         else np.asarray(col_marginal, dtype=np.float64).copy())
    if r.shape != (n,) or c.shape != (2,):
        raise ValueError(f"marginal shapes {r.shape}, {c.shape} do not match "
                         f"a {n}x2 plan")
    if (r <= 0).any() or (c <= 0).any():
        raise ValueError("marginals must be strictly positive")
    if abs(r.sum() - c.sum()) > 1e-9:
        raise ValueError(f"marginals must carry equal mass, "
                         f"got {r.sum()} vs {c.sum()}")
    if log_domain is None:
        log_domain = lam <= LOG_DOMAIN_BELOW
    cost = 1.0 - flat
    history: list[float] = []
    converged = False
    if log_domain:
        log_k = -cost / lam
        log_r = np.log(r)
        log_c = np.log(c)
        log_u = np.zeros(n)
        log_v = np.zeros(2)
        for _ in range(max_iter):
            log_u = log_r - _logsumexp(log_k + log_v[None, :], axis=1)
            log_v = log_c - _logsumexp(log_k.T + log_u[None, :], axis=1)
            plan = np.exp(log_k + log_u[:, None] + log_v[None, :])
            residual = _marginal_residual(plan, r, c)
            history.append(residual)
            if residual < tol:
                converged = True
                break
    else:
        kernel = np.exp(-cost / lam)
        u = np.full(n, 1.0)
        v = np.ones(2)
        for _ in range(max_iter):
            ku = kernel @ v
            kv = kernel.T @ (r / ku)
            u = r / ku
            v = c / kv
            plan = u[:, None] * kernel * v[None, :]
            residual = _marginal_residual(plan, r, c)
            history.append(residual)
            if residual < tol:
                converged = True
                break
        if not np.isfinite(plan).all():
            raise NumericError("transport scaling overflowed; use a larger "
                               "lam or the log-domain path")
    return TransportPlan(matrix=plan, row_marginal=r, col_marginal=c,
                         lam=lam, converged=converged,
                         residual_history=history)


def _marginal_residual(plan: np.ndarray, r: np.ndarray, c: np.ndarray) -> float:
    row_dev = float(np.max(np.abs(plan.sum(axis=1) - r)))
    col_dev = float(np.max(np.abs(plan.sum(axis=0) - c)))
    return max(row_dev, col_dev)


def refine_scores(sim: np.ndarray, plan: TransportPlan) -> np.ndarray:
    """Rescale per-pixel scores by the transport plan.

    refined(i, class) = T(i, class) * n * sim(i, class), clamped to [0, 1];
    n * T turns the plan into a per-pixel multiplier with mean 1 per row,
    so the uniform plan is the identity.
    """
    sim = np.asarray(sim, dtype=np.float64)
    flat = sim.reshape(-1, 2)
    if plan.matrix.shape != flat.shape:
        raise ValueError(f"plan shape {plan.matrix.shape} does not match "
                         f"similarity {flat.shape}")
    refined = np.clip(plan.matrix * flat.shape[0] * flat, 0.0, 1.0)
    return refined.reshape(sim.shape)


def binarize_scores(refined: np.ndarray) -> np.ndarray:
    """Foreground where the cell score strictly beats tissue; ties are
    background (conservative against false positives).  uint8 output."""
    refined = np.asarray(refined)
    if refined.ndim != 3 or refined.shape[2] != 2:
        raise ValueError(f"refined scores must be (H, W, 2), got {refined.shape}")
    return (refined[:, :, 0] > refined[:, :, 1]).astype(np.uint8)


@dataclass(frozen=True)
class PropagationResult:
    mask: np.ndarray  # (H, W) uint8, transport-refined
    scores: np.ndarray  # (H, W, 2) refined scores
    raw_mask: np.ndarray  # (H, W) uint8, similarity argmax before transport
    converged: bool  # all patch plans converged
    patch_iterations: tuple[int, ...] = ()  # sinkhorn sweeps per patch
    patch_residuals: tuple[float, ...] = ()  # final marginal residual per patch


def propagate_image(features: np.ndarray, seed: np.ndarray, per_axis: int = 6,
                    lam: float = 0.1, tol: float = 1e-6,
                    max_iter: int = 2000) -> PropagationResult:
    """Full propagation: per-patch prototypes, similarity, transport, argmax.

    The image is cut into per_axis x per_axis patches; each patch gets its
    own prototypes and its own transport plan whose column marginal is the
    patch's seed class mass, so patches without any seeded cell stay
    background.  Patch results are stitched back to image shape.

    raw_mask on the result is the similarity argmax before transport; it has
    no mass constraint, so it recovers seed dropouts at the price of extra
    false positives that the transport step then suppresses.
    """
    features = np.asarray(features)
    seed = np.asarray(seed)
    if features.ndim != 3:
        raise ValueError(f"features must be (H, W, D), got {features.shape}")
    if seed.shape != features.shape[:2]:
        raise ValueError(
            f"seed shape {seed.shape} does not match features {features.shape[:2]}")
    feat_patches, layout = partition_patches(features, per_axis)
    seed_patches, _ = partition_patches(seed.astype(np.uint8), per_axis)
    refined_patches = []
    sim_patches = []
    all_converged = True
    iterations = []
    residuals = []
    for fp, sp in zip(feat_patches, seed_patches):
        cents = class_centroids(fp, sp)
        sim = similarity_map(fp, cents)
        sim_patches.append(sim)
        plan = sinkhorn_plan(sim, lam, tol=tol, max_iter=max_iter,
                             col_marginal=seed_class_mass(sp))
        all_converged = all_converged and plan.converged
        iterations.append(len(plan.residual_history))
        residuals.append(plan.residual_history[-1]
                         if plan.residual_history else 0.0)
        refined_patches.append(refine_scores(sim, plan))
    scores = stitch_patches(refined_patches, layout)
    raw_scores = stitch_patches(sim_patches, layout)
    return PropagationResult(mask=binarize_scores(scores), scores=scores,
                             raw_mask=binarize_scores(raw_scores),
                             converged=all_converged,
                             patch_iterations=tuple(iterations),
                             patch_residuals=tuple(residuals))
