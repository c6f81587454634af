"""Anchor priors from label extents via k-means under a ``1 - IoU`` distance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import yaml

DEFAULT_NUM_ANCHORS = 6
DEFAULT_NUM_SCALES = 3
MAX_ITER = 300


class TooFewLabels(ValueError):
    pass


class NonPositiveExtent(ValueError):
    pass


@dataclass
class AnchorSet:
    """``k`` anchor extents ``(dz, dx, dy)`` in cube voxels, ascending by volume."""

    anchors: np.ndarray
    num_scales: int = DEFAULT_NUM_SCALES
    distortion: float = float("nan")

    def __post_init__(self):
        a = np.asarray(self.anchors, dtype=np.float64).reshape(-1, 3)
        if np.any(a <= 0):
            raise NonPositiveExtent("anchor extents must be positive")
        if len(a) % self.num_scales:
            raise ValueError(f"{len(a)} anchors cannot be split evenly over {self.num_scales} scales")
        self.anchors = a[np.argsort(np.prod(a, axis=1), kind="stable")]

    @property
    def k(self):
        return len(self.anchors)

    @property
    def per_scale(self):
        """List of ``(k / num_scales, 3)`` arrays, smallest anchors on the finest scale."""
        return list(np.split(self.anchors, self.num_scales))

    def to_config(self):
        """Nested lists in model-config layout: one flat ``dz,dx,dy,...`` row per scale."""
        return [[round(float(v), 4) for v in grp.ravel()] for grp in self.per_scale]

    @classmethod
    def from_config(cls, rows):
        rows = [np.asarray(r, dtype=np.float64).ravel() for r in rows]
        if any(len(r) % 3 for r in rows):
            raise ValueError("each anchor row must hold (dz, dx, dy) triples")
        sizes = {len(r) for r in rows}
        if len(sizes) != 1:
            raise ValueError("every scale needs the same number of anchors")
        return cls(np.concatenate(rows).reshape(-1, 3), num_scales=len(rows))


def shape_iou(a, b):
    """IoU of boxes sharing a center; broadcasts over leading dimensions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    inter = np.prod(np.minimum(a, b), axis=-1)
    return inter / (np.prod(a, axis=-1) + np.prod(b, axis=-1) - inter)


def _distances(points, centroids):
    return 1.0 - shape_iou(points[:, None, :], centroids[None, :, :])


def _kmeanspp(points, k, rng):
    n = len(points)
    chosen = [int(rng.integers(n))]
    dmin = _distances(points, points[chosen])[:, 0]
    for _ in range(1, k):
        w = dmin**2
        total = w.sum()
        if total <= 0:
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rest[0])
        else:
            cdf = np.cumsum(w)
            nxt = int(np.searchsorted(cdf, rng.random() * total, side="right"))
            nxt = min(nxt, n - 1)
        chosen.append(nxt)
        dmin = np.minimum(dmin, _distances(points, points[[nxt]])[:, 0])
    return points[chosen].copy()


def _validate(extents, k):
    x = np.asarray(extents, dtype=np.float64).reshape(-1, 3)
    if k < 1 or len(x) < k:
        raise TooFewLabels(f"need at least k={k} label extents, got {len(x)}")
    if np.any(~np.isfinite(x)) or np.any(x <= 0):
        raise NonPositiveExtent("all label extents must be finite and positive")
    # canonical order makes the result independent of input order
    order = np.lexsort((x[:, 2], x[:, 1], x[:, 0]))
    return x[order]


def _lloyd(points, centroids, max_iter):
    best_c, best_d = centroids.copy(), np.inf
    assign = None
    for _ in range(max_iter):
        dist = _distances(points, centroids)
        new_assign = np.argmin(dist, axis=1)
        point_d = dist[np.arange(len(points)), new_assign]
        distortion = float(point_d.mean())
        if distortion < best_d:
            best_c, best_d = centroids.copy(), distortion
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        taken = set()
        for j in range(len(centroids)):
            members = points[assign == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
            else:
                # reseed an empty cluster at the worst-served point
                for idx in np.argsort(-point_d, kind="stable"):
                    if int(idx) not in taken:
                        taken.add(int(idx))
                        centroids[j] = points[idx]
                        break
    return best_c, best_d


def anchor_kmeans(extents, k=DEFAULT_NUM_ANCHORS, seed=0, num_scales=None, max_iter=MAX_ITER, init=None):
    """Cluster label extents into ``k`` anchor priors.

    k-means++ seeding followed by Lloyd iterations with mean updates; the
    lowest-distortion centroid set seen during the iterations is returned.
    """
    points = _validate(extents, k)
    if init is None:
        centroids = _kmeanspp(points, k, np.random.default_rng(seed))
    else:
        centroids = np.asarray(init, dtype=np.float64).reshape(k, 3).copy()
    best_c, best_d = _lloyd(points, centroids, max_iter)
    if num_scales is None:
        num_scales = DEFAULT_NUM_SCALES if k % DEFAULT_NUM_SCALES == 0 else 1
    return AnchorSet(best_c, num_scales=num_scales, distortion=best_d)


def mean_distortion(extents, anchors):
    x = np.asarray(extents, dtype=np.float64).reshape(-1, 3)
    return float(_distances(x, np.asarray(anchors, dtype=np.float64).reshape(-1, 3)).min(axis=1).mean())


def _restart_seed(seed, k, r):
    return int(np.random.SeedSequence([int(seed), int(k), int(r)]).generate_state(1)[0])


def elbow_scan(extents, k_range=range(1, 13), seed=0, restarts=10):
    """Best-of-``restarts`` distortion for each ``k``; returns ``[(k, distortion), ...]``.

    Besides the random restarts, each ``k`` also tries the previous best
    centroids plus the worst-served point, which keeps the curve
    non-increasing.
    """
    points = np.asarray(extents, dtype=np.float64).reshape(-1, 3)
    results = []
    prev = None
    for k in k_range:
        best = None
        candidates = [anchor_kmeans(points, k, seed=_restart_seed(seed, k, r), num_scales=1) for r in range(restarts)]
        if prev is not None and prev.k == k - 1:
            canon = _validate(points, k)
            worst = int(np.argmax(_distances(canon, prev.anchors).min(axis=1)))
            init = np.vstack([prev.anchors, canon[worst]])
            candidates.append(anchor_kmeans(points, k, init=init, num_scales=1))
        for cand in candidates:
            if best is None or cand.distortion < best.distortion:
                best = cand
        results.append((k, best.distortion))
        prev = best
    return results


def extents_in_voxels(boxes, cube_side):
    """Normalized :class:`Box3` extents scaled to cube-voxel units."""
    return np.array([b.extent for b in boxes], dtype=np.float64).reshape(-1, 3) * cube_side


def dump_anchor_yaml(anchor_set, cube_side):
    doc = {
        "cube_side": int(cube_side),
        "num_anchors": anchor_set.k,
        "distortion": round(float(anchor_set.distortion), 6),
        "anchors": anchor_set.to_config(),
    }
    return yaml.safe_dump(doc, sort_keys=False, default_flow_style=None)
