"""Object-level evaluation: cluster dynamic cells, match them to moving boxes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from dogm.loss import DYNAMIC_SPEED
from dogm.metrics.cell import OCC_THRESHOLD
from dogm.metrics.dbscan import dbscan
from dogm.sim.geometry import Box

DBSCAN_EPS = 1.2
DBSCAN_MIN_PTS = 4
VELOCITY_SCALE = 1.0  # seconds; weights velocity against position in the features


def wrap_degrees(a):
    return (np.asarray(a, dtype=np.float64) + 180.0) % 360.0 - 180.0


@dataclass
class Cluster:
    cells: np.ndarray  # (n, 2) col, row
    east: np.ndarray
    north: np.ndarray
    v_e: np.ndarray
    v_n: np.ndarray

    @property
    def size(self) -> int:
        return len(self.v_e)

    @property
    def mean_velocity(self) -> np.ndarray:
        return np.array([self.v_e.mean(), self.v_n.mean()])

    @property
    def mean_speed(self) -> float:
        return float(np.hypot(*self.mean_velocity))

    @property
    def mean_orientation(self) -> float:
        """Direction of the mean velocity, radians."""
        mv = self.mean_velocity
        return math.atan2(mv[1], mv[0])

    @property
    def sigma_vel(self) -> float:
        return float(np.std(np.hypot(self.v_e, self.v_n)))

    @property
    def sigma_ori(self) -> float:
        """Population std of member orientations around the mean, radians."""
        dev = np.deg2rad(wrap_degrees(np.rad2deg(np.arctan2(self.v_n, self.v_e)
                                                  - self.mean_orientation)))
        return float(np.sqrt(np.mean(dev * dev)))


def extract_clusters(pred, eps: float = DBSCAN_EPS, min_pts: int = DBSCAN_MIN_PTS,
                     velocity_scale: float = VELOCITY_SCALE,
                     min_speed: float = DYNAMIC_SPEED) -> list[Cluster]:
    """Cluster occupied dynamic cells of a prediction on (east, north, v_E, v_N)."""
    occ = pred.p_o > OCC_THRESHOLD
    dyn = occ & (np.hypot(pred.v_e, pred.v_n) > DYNAMIC_SPEED)
    rows, cols = np.nonzero(dyn)
    if len(rows) == 0:
        return []
    cs = pred.cell_size or 1.0
    ox, oy = pred.origin or (0.0, 0.0)
    east = ox + (cols + 0.5) * cs
    north = oy + (rows + 0.5) * cs
    ve = np.asarray(pred.v_e[rows, cols], dtype=np.float64)
    vn = np.asarray(pred.v_n[rows, cols], dtype=np.float64)
    feats = np.stack([east, north, velocity_scale * ve, velocity_scale * vn], axis=1)
    out = []
    for idx in dbscan(feats, eps, min_pts):
        c = Cluster(np.stack([cols[idx], rows[idx]], axis=1), east[idx], north[idx], ve[idx], vn[idx])
        if c.mean_speed > min_speed:
            out.append(c)
    return out


def _inflate(box: Box, margin: float) -> Box:
    return Box(box.east, box.north, box.length + 2 * margin, box.width + 2 * margin, box.heading)


@dataclass
class ObjectAccumulator:
    """Running TP/FP/FN counts and per-TP errors over any number of frames."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    err_vel: list = field(default_factory=list)
    err_ori: list = field(default_factory=list)
    sig_vel: list = field(default_factory=list)
    sig_ori: list = field(default_factory=list)

    def add(self, clusters, gt_boxes, label=None, margin: float | None = None):
        """Match one frame.

        ``gt_boxes`` hold ``.box`` and ``.velocity``. Only boxes moving faster
        than the dynamic threshold count; with ``label`` given, a box must also
        cover at least one label-occupied cell to count as missable.
        """
        if margin is None:
            margin = label.cell_size if label is not None else 0.0
        moving = [g for g in gt_boxes if math.hypot(*g.velocity) > DYNAMIC_SPEED]
        if label is not None:
            occ = label.data[..., 0] > 0.5
            r, c = np.nonzero(occ)
            e, n = label.cell_center(c, r)
            moving = [g for g in moving if np.any(_inflate(g.box, margin).contains(e, n))]

        # best cluster per box by number of member cells inside
        claims: dict[int, list[tuple[int, int]]] = {}
        for ci, cl in enumerate(clusters):
            best, best_n = None, 0
            for bi, g in enumerate(moving):
                n_in = int(np.sum(_inflate(g.box, margin).contains(cl.east, cl.north)))
                if n_in > best_n:
                    best, best_n = bi, n_in
            if best is not None and 2 * best_n > cl.size:
                claims.setdefault(best, []).append((best_n, ci))
        matched = set()
        for bi, cand in claims.items():
            _, ci = max(cand, key=lambda t: (t[0], -t[1]))
            matched.add(bi)
            cl = clusters[ci]
            g = moving[bi]
            self.tp += 1
            self.err_vel.append(abs(cl.mean_speed - math.hypot(*g.velocity)))
            gt_ori = math.degrees(math.atan2(g.velocity[1], g.velocity[0]))
            self.err_ori.append(abs(float(wrap_degrees(math.degrees(cl.mean_orientation) - gt_ori))))
            self.sig_vel.append(cl.sigma_vel)
            self.sig_ori.append(math.degrees(cl.sigma_ori))
        self.fp += len(clusters) - len(matched)
        self.fn += len(moving) - len(matched)
        return self

    def result(self) -> dict:
        def mean(v):
            return float(np.mean(v)) if v else None

        return {
            "mae_vel": mean(self.err_vel),
            "mae_ori": mean(self.err_ori),
            "mean_sigma_vel": mean(self.sig_vel),
            "mean_sigma_ori": mean(self.sig_ori),
            "recall": self.tp / (self.tp + self.fn) if self.tp + self.fn else None,
            "precision": self.tp / (self.tp + self.fp) if self.tp + self.fp else None,
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
        }


def object_metrics(clusters, gt_boxes, label=None) -> dict:
    return ObjectAccumulator().add(clusters, gt_boxes, label).result()
