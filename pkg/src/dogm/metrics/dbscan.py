"""Density-based clustering (DBSCAN).

Neighbourhoods are closed balls (``dist <= eps``) and include the point
itself, so a point is core when at least ``min_pts`` points, itself
included, lie within ``eps``. Core points reachable from each other form a
cluster. A border point joins the cluster of its nearest core point (ties go
to the lower input index), which makes the partition independent of the
input order.
"""

from __future__ import annotations

from collections import deque

import numpy as np
from scipy.spatial import cKDTree

NOISE = -1


def dbscan_labels(points, eps: float, min_pts: int) -> np.ndarray:
    """Cluster label per point, ``-1`` for noise; clusters numbered by first core point."""
    if not eps > 0 or min_pts < 1:
        raise ValueError("need eps > 0 and min_pts >= 1")
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels
    pts = pts.reshape(n, -1)
    tree = cKDTree(pts)
    neigh = tree.query_ball_point(pts, r=eps)
    core = np.array([len(nb) >= min_pts for nb in neigh])

    cluster = 0
    for i in range(n):
        if not core[i] or labels[i] != NOISE:
            continue
        labels[i] = cluster
        queue = deque([i])
        while queue:
            j = queue.popleft()
            for k in neigh[j]:
                if core[k] and labels[k] == NOISE:
                    labels[k] = cluster
                    queue.append(k)
        cluster += 1

    for i in np.flatnonzero(~core):
        cands = [k for k in neigh[i] if core[k]]
        if cands:
            d = np.linalg.norm(pts[cands] - pts[i], axis=1)
            best = min(range(len(cands)), key=lambda m: (d[m], cands[m]))
            labels[i] = labels[cands[best]]
    return labels


def dbscan(points, eps: float, min_pts: int) -> list[np.ndarray]:
    """Member index arrays of every cluster (noise dropped)."""
    labels = dbscan_labels(points, eps, min_pts)
    return [np.flatnonzero(labels == c) for c in range(int(labels.max(initial=-1)) + 1)]
