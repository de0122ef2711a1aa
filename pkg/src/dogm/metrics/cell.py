"""Cell-level metrics: static/dynamic mIoU and bucketed end-point error.

Empty sets never score as zero; they come back as ``None``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dogm.grid import GridMap
from dogm.loss import DYNAMIC_SPEED

OCC_THRESHOLD = 0.7
FRAME_DT = 0.1
FAST_SPEED = 3.0


@dataclass
class Confusion:
    """Per-class TP/FP/FN counts; accumulates across frames."""

    static: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))
    dynamic: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))

    def __iadd__(self, other: Confusion) -> Confusion:
        self.static += other.static
        self.dynamic += other.dynamic
        return self

    @staticmethod
    def _iou(c):
        denom = int(c.sum())
        return None if denom == 0 else float(c[0]) / denom

    @property
    def static_iou(self):
        return self._iou(self.static)

    @property
    def dynamic_iou(self):
        return self._iou(self.dynamic)

    def miou(self):
        """Mean of the defined class IoUs; ``None`` when no cell is occupied anywhere."""
        vals = [v for v in (self.static_iou, self.dynamic_iou) if v is not None]
        return None if not vals else float(np.mean(vals))


def _classes(p_o, v_e, v_n, occupied=None):
    occ = (p_o > OCC_THRESHOLD) if occupied is None else occupied.astype(bool)
    dyn = np.hypot(v_e, v_n) > DYNAMIC_SPEED
    return occ & ~dyn, occ & dyn


def confusion(pred_po, pred_ve, pred_vn, label_ve, label_vn, label_mask) -> Confusion:
    ps, pd = _classes(pred_po, pred_ve, pred_vn)
    ls, ld = _classes(None, label_ve, label_vn, occupied=label_mask)

    def counts(p, lab):
        return np.array([np.sum(p & lab), np.sum(p & ~lab), np.sum(~p & lab)], dtype=np.int64)

    return Confusion(counts(ps, ls), counts(pd, ld))


def split_label(label, mask=None):
    """``(v_e, v_n, mask)`` from a label grid/array with channels occupancy, v_e, v_n."""
    data = label.data if isinstance(label, GridMap) else np.asarray(label)
    if mask is None:
        mask = data[..., 0] > 0.5
    return data[..., 1], data[..., 2], np.asarray(mask, dtype=bool)


def static_dynamic_miou(pred, label, mask=None):
    """mIoU over the static and dynamic occupied classes for one frame.

    ``pred`` is a :class:`~dogm.nn.network.DogmOutput`; ``label`` a label grid
    (occupancy, v_e, v_n, ...). Returns ``None`` if neither prediction nor
    label has an occupied cell.
    """
    ve, vn, m = split_label(label, mask)
    return confusion(pred.p_o, pred.v_e, pred.v_n, ve, vn, m).miou()


@dataclass
class EpeAccumulator:
    """Sums of per-cell displacement errors (metres per frame) per bucket."""

    sums: dict = field(default_factory=lambda: {k: 0.0 for k in BUCKETS})
    counts: dict = field(default_factory=lambda: {k: 0 for k in BUCKETS})

    def add(self, pred_ve, pred_vn, label_ve, label_vn, label_mask, dt: float = FRAME_DT):
        err = np.hypot(np.asarray(pred_ve, dtype=np.float64) - label_ve,
                       np.asarray(pred_vn, dtype=np.float64) - label_vn) * dt
        for name, sel in bucket_masks(label_ve, label_vn, label_mask).items():
            self.sums[name] += float(np.sum(err[sel]))
            self.counts[name] += int(np.sum(sel))
        return self

    def __iadd__(self, other: EpeAccumulator) -> EpeAccumulator:
        for k in BUCKETS:
            self.sums[k] += other.sums[k]
            self.counts[k] += other.counts[k]
        return self

    def result(self) -> dict:
        return {f"epe_{k}": (self.sums[k] / self.counts[k] if self.counts[k] else None)
                for k in BUCKETS}


BUCKETS = ("occ", "dyn", "slow", "fast")


def bucket_masks(label_ve, label_vn, label_mask) -> dict[str, np.ndarray]:
    """Cell selections by label speed; ``dyn`` is the union of ``slow`` and ``fast``."""
    occ = np.asarray(label_mask).astype(bool)
    speed = np.hypot(label_ve, label_vn)
    dyn = occ & (speed > DYNAMIC_SPEED)
    return {"occ": occ, "dyn": dyn, "slow": dyn & (speed <= FAST_SPEED),
            "fast": dyn & (speed > FAST_SPEED)}


def epe_buckets(pred_ve, pred_vn, label_ve, label_vn, label_mask,
                dt: float = FRAME_DT) -> dict:
    """Mean end-point error per bucket in metres per frame (``None`` if empty)."""
    return EpeAccumulator().add(pred_ve, pred_vn, label_ve, label_vn, label_mask, dt).result()
