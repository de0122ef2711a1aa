"""Inverse sensor model: one 2D range scan to a single-frame occupancy grid."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from dogm.errors import ContractError
from dogm.grid import UNKNOWN, GridMap, Pose2

P_OCC = 0.85
P_FREE = 0.15


@dataclass(frozen=True)
class Beam:
    azimuth: float
    range: float
    hit: bool


@dataclass(frozen=True)
class Scan:
    sensor_pose: Pose2
    beams: tuple[Beam, ...]
    max_range: float

    def __post_init__(self):
        object.__setattr__(self, "beams", tuple(self.beams))
        if not self.max_range > 0:
            raise ContractError("max_range must be positive")
        prev = -math.inf
        for b in self.beams:
            if b.azimuth <= prev:
                raise ContractError("beam azimuths must be strictly increasing")
            prev = b.azimuth
            if b.hit and not 0 < b.range <= self.max_range:
                raise ContractError(f"hit range {b.range} outside (0, max_range]")
            if not b.hit and b.range != self.max_range:
                raise ContractError("beams without a hit must report max_range")

    @property
    def ranges(self) -> np.ndarray:
        return np.array([b.range for b in self.beams])

    @property
    def hits(self) -> np.ndarray:
        return np.array([b.hit for b in self.beams], dtype=bool)


@dataclass(frozen=True)
class GridGeometry:
    width: int
    height: int
    cell_size: float
    origin: tuple[float, float]

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or not self.cell_size > 0:
            raise ContractError(f"degenerate grid geometry {self}")


def traverse(x0: float, y0: float, x1: float, y1: float) -> Iterator[tuple[int, int]]:
    """Yield every unit cell (ix, iy) the segment from (x0, y0) to (x1, y1) passes.

    Coordinates are in cell units. Incremental boundary-crossing walk; the
    last cell yielded is the one containing the end point.
    """
    ix, iy = math.floor(x0), math.floor(y0)
    ex, ey = math.floor(x1), math.floor(y1)
    dx, dy = x1 - x0, y1 - y0
    step_x = 1 if dx > 0 else -1
    step_y = 1 if dy > 0 else -1
    if dx != 0:
        t_dx = abs(1.0 / dx)
        t_x = ((ix + 1 - x0) if dx > 0 else (x0 - ix)) * t_dx
    else:
        t_dx = t_x = math.inf
    if dy != 0:
        t_dy = abs(1.0 / dy)
        t_y = ((iy + 1 - y0) if dy > 0 else (y0 - iy)) * t_dy
    else:
        t_dy = t_y = math.inf
    yield ix, iy
    # Bounded by the Manhattan cell distance; guards against float drift.
    for _ in range(abs(ex - ix) + abs(ey - iy)):
        if ix == ex and iy == ey:
            return
        if t_x < t_y:
            ix += step_x
            t_x += t_dx
        else:
            iy += step_y
            t_y += t_dy
        yield ix, iy


def _clip_to_box(x0, y0, x1, y1, w, h):
    """Liang-Barsky clip of a segment to [0, w] x [0, h]; returns t-range or None."""
    t0, t1 = 0.0, 1.0
    dx, dy = x1 - x0, y1 - y0
    for p, q in ((-dx, x0), (dx, w - x0), (-dy, y0), (dy, h - y0)):
        if p == 0:
            if q < 0:
                return None
            continue
        r = q / p
        if p < 0:
            t0 = max(t0, r)
        else:
            t1 = min(t1, r)
        if t0 > t1:
            return None
    return t0, t1


def measurement_grid(scan: Scan, geometry: GridGeometry, p_occ: float = P_OCC,
                     p_free: float = P_FREE, dtype=np.float32) -> GridMap:
    """Rasterize a scan: free along each beam, occupied at its hit cell."""
    w, h, cs = geometry.width, geometry.height, geometry.cell_size
    free = np.zeros((h, w), dtype=bool)
    occ = np.zeros((h, w), dtype=bool)
    sx = (scan.sensor_pose.east - geometry.origin[0]) / cs
    sy = (scan.sensor_pose.north - geometry.origin[1]) / cs
    for beam in scan.beams:
        ex = sx + beam.range * math.cos(beam.azimuth) / cs
        ey = sy + beam.range * math.sin(beam.azimuth) / cs
        hit_cell = (math.floor(ex), math.floor(ey)) if beam.hit else None
        clip = _clip_to_box(sx, sy, ex, ey, w, h)
        if clip is not None:
            t0, t1 = clip
            ax, ay = sx + t0 * (ex - sx), sy + t0 * (ey - sy)
            bx, by = sx + t1 * (ex - sx), sy + t1 * (ey - sy)
            for ix, iy in traverse(ax, ay, bx, by):
                if 0 <= ix < w and 0 <= iy < h and (ix, iy) != hit_cell:
                    free[iy, ix] = True
        if hit_cell is not None and 0 <= hit_cell[0] < w and 0 <= hit_cell[1] < h:
            occ[hit_cell[1], hit_cell[0]] = True
    out = np.full((h, w, 1), UNKNOWN, dtype=dtype)
    out[free, 0] = p_free
    out[occ, 0] = p_occ
    return GridMap(out, cs, geometry.origin, ("p_z",))


def scan_from_arrays(pose: Pose2, azimuths: Sequence[float], ranges: Sequence[float],
                     hits: Sequence[bool], max_range: float) -> Scan:
    beams = tuple(Beam(float(a), float(r), bool(hh)) for a, r, hh in zip(azimuths, ranges, hits))
    return Scan(pose, beams, max_range)
