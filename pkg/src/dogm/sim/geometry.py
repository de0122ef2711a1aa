"""Planar geometry for the simulator: rectangles, ray casting, rasterization."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dogm.sensor import traverse


@dataclass(frozen=True)
class Box:
    """Oriented rectangle in the global frame; ``length`` runs along ``heading``."""

    east: float
    north: float
    length: float
    width: float
    heading: float = 0.0

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.heading), math.sin(self.heading)
        hl, hw = self.length / 2.0, self.width / 2.0
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + [self.east, self.north]

    def edges(self) -> np.ndarray:
        """The four sides as an ``(4, 4)`` array of ``(x0, y0, x1, y1)``."""
        p = self.corners()
        return np.hstack([p, np.roll(p, -1, axis=0)])

    def contains(self, east, north) -> np.ndarray:
        c, s = math.cos(self.heading), math.sin(self.heading)
        de = np.asarray(east) - self.east
        dn = np.asarray(north) - self.north
        u = de * c + dn * s
        v = -de * s + dn * c
        return (np.abs(u) <= self.length / 2.0) & (np.abs(v) <= self.width / 2.0)


def ray_cast(segments: np.ndarray, origin, directions: np.ndarray) -> np.ndarray:
    """Distance along each unit direction to the nearest segment (``inf`` if none).

    ``segments`` is ``(M, 4)``, ``directions`` is ``(K, 2)``.
    """
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    k = directions.shape[0]
    segs = np.asarray(segments, dtype=np.float64).reshape(-1, 4)
    if segs.shape[0] == 0:
        return np.full(k, np.inf)
    ox, oy = float(origin[0]), float(origin[1])
    px = segs[:, 0] - ox
    py = segs[:, 1] - oy
    sx = segs[:, 2] - segs[:, 0]
    sy = segs[:, 3] - segs[:, 1]
    dx = directions[:, :1]
    dy = directions[:, 1:]
    denom = dx * sy - dy * sx
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (px * sy - py * sx) / denom
        u = (px * dy - py * dx) / denom
    valid = (denom != 0) & (t > 0) & (u >= 0) & (u <= 1)
    t = np.where(valid, t, np.inf)
    return t.min(axis=1)


def segment_cells(segment, cell_size: float, origin=(0.0, 0.0)) -> np.ndarray:
    """Integer ``(col, row)`` of every cell a segment passes, relative to ``origin``."""
    x0, y0, x1, y1 = segment
    cells = traverse((x0 - origin[0]) / cell_size, (y0 - origin[1]) / cell_size,
                     (x1 - origin[0]) / cell_size, (y1 - origin[1]) / cell_size)
    return np.array(list(cells), dtype=np.int64).reshape(-1, 2)


def box_outline_cells(box: Box, cell_size: float, origin=(0.0, 0.0)) -> np.ndarray:
    cells = [segment_cells(e, cell_size, origin) for e in box.edges()]
    return np.unique(np.vstack(cells), axis=0)


def rasterize_box(box: Box, cell_size: float, origin=(0.0, 0.0)) -> np.ndarray:
    """Cells whose center lies inside ``box``, as ``(col, row)`` pairs."""
    p = box.corners()
    lo = np.floor((p.min(axis=0) - origin) / cell_size).astype(int) - 1
    hi = np.ceil((p.max(axis=0) - origin) / cell_size).astype(int) + 1
    cols, rows = np.meshgrid(np.arange(lo[0], hi[0] + 1), np.arange(lo[1], hi[1] + 1))
    ce = origin[0] + (cols + 0.5) * cell_size
    cn = origin[1] + (rows + 0.5) * cell_size
    inside = box.contains(ce, cn)
    return np.stack([cols[inside], rows[inside]], axis=1)
