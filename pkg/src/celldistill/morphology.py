"""Classical grid morphology on binary masks and instance maps.

Determinism contracts, shared by several callers and tests:
  * component labels are assigned 1..N in scan order (row-major);
  * distance transforms are exact Euclidean with out-of-image treated as
    background one step beyond the border;
  * plateau maxima contribute a single marker at the lowest scan-order pixel;
  * argmax-style ties always resolve to the lowest scan-order pixel.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

_OFFSETS = {
    4: ((-1, 0), (1, 0), (0, -1), (0, 1)),
    8: ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)),
}


def _check_binary(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    return mask != 0


def connected_components(mask: np.ndarray, connectivity: int = 4) -> np.ndarray:
    """Label connected foreground regions 1..N in scan order. int32 output."""
    if connectivity not in _OFFSETS:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    fg = _check_binary(mask)
    h, w = fg.shape
    labels = np.zeros((h, w), dtype=np.int32)
    offsets = _OFFSETS[connectivity]
    current = 0
    stack: list[tuple[int, int]] = []
    for r0 in range(h):
        row = fg[r0]
        for c0 in range(w):
            if not row[c0] or labels[r0, c0]:
                continue
            current += 1
            labels[r0, c0] = current
            stack.append((r0, c0))
            while stack:
                r, c = stack.pop()
                for dr, dc in offsets:
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < h and 0 <= cc < w and fg[rr, cc] and not labels[rr, cc]:
                        labels[rr, cc] = current
                        stack.append((rr, cc))
    return labels


# ---------------------------------------------------------------------------
# Exact Euclidean distance transform (two-pass separable)


def _envelope_1d(pos: np.ndarray, height: np.ndarray, n: int) -> np.ndarray:
    """Lower envelope of parabolas (x-pos)^2 + height sampled at 0..n-1."""
    m = len(pos)
    v = np.zeros(m, dtype=np.int64)
    z = np.empty(m + 1, dtype=np.float64)
    z[0], z[1] = -np.inf, np.inf
    k = 0
    for q in range(1, m):
        while True:
            p = v[k]
            s = ((height[q] + pos[q] * pos[q]) - (height[p] + pos[p] * pos[p])) / (
                2.0 * (pos[q] - pos[p]))
            if s <= z[k] and k > 0:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    out = np.empty(n, dtype=np.float64)
    k = 0
    for x in range(n):
        while z[k + 1] < x:
            k += 1
        p = v[k]
        out[x] = (x - pos[p]) ** 2 + height[p]
    return out


def _squared_distance_to_sites(sites: np.ndarray, border_is_site: bool) -> np.ndarray:
    """Exact squared Euclidean distance from every pixel to the nearest site.

    If border_is_site, a virtual ring of sites sits one step outside the
    image.  Pixels with no reachable site get +inf.
    """
    h, w = sites.shape
    big = np.inf
    # vertical pass: per-column distance in rows to the nearest site
    g = np.where(sites, 0.0, big)
    prev = np.zeros(w) if border_is_site else np.full(w, big)
    for i in range(h):
        g[i] = np.minimum(g[i], prev + 1.0)
        prev = g[i]
    prev = np.zeros(w) if border_is_site else np.full(w, big)
    for i in range(h - 1, -1, -1):
        g[i] = np.minimum(g[i], prev + 1.0)
        prev = g[i]
    # horizontal pass: lower envelope of parabolas per row
    out = np.full((h, w), big)
    g2 = g * g
    for i in range(h):
        heights = g2[i]
        finite = np.isfinite(heights)
        pos = np.nonzero(finite)[0].astype(np.int64)
        hgt = heights[finite]
        if border_is_site:
            pos = np.concatenate(([-1], pos, [w]))
            hgt = np.concatenate(([0.0], hgt, [0.0]))
        if len(pos) == 0:
            continue
        out[i] = _envelope_1d(pos, hgt, w)
    return out


def distance_transform(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance of each fg pixel to the nearest background.

    Out-of-image counts as background, so a lone fg pixel at the border has
    distance 1.  Background pixels are 0.  float64 output.
    """
    fg = _check_binary(mask)
    sq = _squared_distance_to_sites(~fg, border_is_site=True)
    sq[~fg] = 0.0
    return np.sqrt(sq)


def dilate(mask: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean dilation: fg plus every pixel within `radius` of fg."""
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    fg = _check_binary(mask)
    if not fg.any():
        return fg.astype(np.uint8)
    sq = _squared_distance_to_sites(fg, border_is_site=False)
    return (sq <= radius * radius + 1e-9).astype(np.uint8)


def boundary_edges(mask: np.ndarray) -> np.ndarray:
    """Fg pixels with at least one 4-neighbor background pixel.

    Out-of-image neighbors count as background, so border fg pixels are
    edges.  Equivalent to an edge detector on a binary image.
    """
    fg = _check_binary(mask)
    padded = np.pad(fg, 1, mode="constant", constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return (fg & ~interior).astype(np.uint8)


def center_point(mask: np.ndarray) -> tuple[int, int]:
    """Deepest interior pixel: argmax of the EDT, ties to lowest scan order."""
    fg = _check_binary(mask)
    rows, cols = np.nonzero(fg)
    if rows.size == 0:
        raise ValueError("center_point of an empty mask")
    r0, r1 = rows.min(), rows.max() + 1
    c0, c1 = cols.min(), cols.max() + 1
    crop = fg[r0:r1, c0:c1]
    dist = distance_transform(crop)
    flat = int(np.argmax(dist))  # argmax returns the first max in scan order
    dr, dc = divmod(flat, crop.shape[1])
    return int(r0 + dr), int(c0 + dc)


# ---------------------------------------------------------------------------
# Markers and watershed


@dataclass(frozen=True)
class Marker:
    row: int
    col: int
    marker_id: int


def _window_max(values: np.ndarray, half: int) -> np.ndarray:
    """Separable sliding max over a (2*half+1)^2 window."""
    out = values
    for axis in (0, 1):
        padded = np.pad(out, [(half, half) if a == axis else (0, 0) for a in (0, 1)],
                        mode="constant", constant_values=-np.inf)
        stacked = [np.take(padded, range(k, k + out.shape[axis]), axis=axis)
                   for k in range(2 * half + 1)]
        out = np.maximum.reduce(stacked)
    return out


def local_maxima_markers(dist: np.ndarray, min_distance: int = 3) -> list[Marker]:
    """Window maxima of a distance map, one marker per plateau, suppressed.

    A pixel is a candidate when it attains the maximum of its
    (2*min_distance+1)^2 window and its value is positive.  Each connected
    plateau of candidates yields one marker at its lowest scan-order pixel.
    Markers strictly closer than min_distance to a kept marker are
    suppressed, keeping the higher value (ties keep the earlier scan order).
    Surviving markers get ids 1..M in scan order.
    """
    if min_distance < 1:
        raise ValueError(f"min_distance must be >= 1, got {min_distance}")
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 2:
        raise ValueError(f"distance map must be 2-D, got {dist.shape}")
    h, w = dist.shape
    cand = (dist > 0) & (dist >= _window_max(dist, min_distance))
    reps: list[tuple[int, int]] = []
    seen = np.zeros((h, w), dtype=bool)
    stack: list[tuple[int, int]] = []
    for r0 in range(h):
        for c0 in range(w):
            if not cand[r0, c0] or seen[r0, c0]:
                continue
            reps.append((r0, c0))
            seen[r0, c0] = True
            stack.append((r0, c0))
            while stack:  # adjacent candidates share the plateau value
                r, c = stack.pop()
                for dr, dc in _OFFSETS[8]:
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < h and 0 <= cc < w and cand[rr, cc] and not seen[rr, cc]:
                        seen[rr, cc] = True
                        stack.append((rr, cc))
    order = sorted(range(len(reps)), key=lambda i: (-dist[reps[i]], reps[i]))
    kept: list[tuple[int, int]] = []
    min_sq = min_distance * min_distance
    for i in order:
        r, c = reps[i]
        if all((r - kr) ** 2 + (c - kc) ** 2 >= min_sq for kr, kc in kept):
            kept.append((r, c))
    kept.sort()
    return [Marker(r, c, i + 1) for i, (r, c) in enumerate(kept)]


def watershed_split(mask: np.ndarray, markers: list[Marker],
                    connectivity: int = 4) -> np.ndarray:
    """Marker-seeded priority flood on the inverted distance transform.

    Every fg pixel ends up labeled (labels partition the fg, bg stays 0).
    Components no marker can reach are appended as whole instances; an
    entirely empty marker set degrades to plain component labeling.
    """
    if connectivity not in _OFFSETS:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    fg = _check_binary(mask)
    h, w = fg.shape
    labels = np.zeros((h, w), dtype=np.int32)
    if not fg.any():
        if markers:
            raise ValueError("markers given for an empty mask")
        return labels
    if not markers:
        return connected_components(fg, connectivity)
    ids = [m.marker_id for m in markers]
    if len(set(ids)) != len(ids):
        raise ValueError("marker ids must be unique")
    dist = distance_transform(fg)
    heap: list[tuple[float, int, int, int, int]] = []
    counter = 0
    for m in markers:
        if not (0 <= m.row < h and 0 <= m.col < w) or not fg[m.row, m.col]:
            raise ValueError(f"marker {m.marker_id} at ({m.row}, {m.col}) "
                             "is not on a foreground pixel")
        labels[m.row, m.col] = m.marker_id
        heapq.heappush(heap, (-dist[m.row, m.col], counter, m.row, m.col, m.marker_id))
        counter += 1
    offsets = _OFFSETS[connectivity]
    while heap:
        _, _, r, c, lab = heapq.heappop(heap)
        for dr, dc in offsets:
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and fg[rr, cc] and not labels[rr, cc]:
                labels[rr, cc] = lab
                heapq.heappush(heap, (-dist[rr, cc], counter, rr, cc, lab))
                counter += 1
    rest = fg & (labels == 0)
    if rest.any():  # components without any marker become whole instances
        extra = connected_components(rest, connectivity)
        labels[rest] = extra[rest] + max(ids)
    return labels


def segment_instances(mask: np.ndarray, min_distance: int = 3,
                      connectivity: int = 4) -> np.ndarray:
    """Binary mask to instances: EDT peaks as markers, then watershed."""
    fg = _check_binary(mask)
    if not fg.any():
        return np.zeros(fg.shape, dtype=np.int32)
    markers = local_maxima_markers(distance_transform(fg), min_distance)
    return watershed_split(fg, markers, connectivity)
