"""Georeferenced grid maps, poses and the resolution pyramid.

Layout convention used everywhere in the package: ``data[row, col, channel]``
with columns running east and rows running north, row 0 being the southern
edge. ``origin`` is the global (east, north) position of the lower-left corner
of cell (0, 0).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dogm.errors import ContractError, DataError, GridRangeError

UNKNOWN = 0.5

# Quotients closer than this (in cells) to an integer are snapped before
# flooring, so that e.g. 4.05 / 0.15 lands on 27 and not 26.999...
_INDEX_SNAP = 1e-9


def normalize_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


@dataclass(frozen=True)
class Pose2:
    east: float
    north: float
    heading: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "heading", normalize_angle(float(self.heading)))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.east, self.north])


@dataclass(frozen=True)
class GridIndex:
    i_east: int
    i_north: int
    level: int

    def as_array(self) -> np.ndarray:
        return np.array([self.i_east, self.i_north], dtype=np.int64)


@dataclass(frozen=True)
class LevelPyramid:
    """Cell sizes ``base_cell_size * ratios`` of the network levels.

    ``ratios`` default to the four factor-3 levels; fewer levels are allowed
    for small test networks.
    """

    base_cell_size: float = 0.15
    ratios: tuple[int, ...] = (1, 3, 9, 27)

    def __post_init__(self):
        ratios = tuple(int(r) for r in self.ratios)
        object.__setattr__(self, "ratios", ratios)
        if not self.base_cell_size > 0:
            raise ContractError("base cell size must be positive")
        if not ratios or ratios[0] != 1:
            raise ContractError("ratios must start at 1")
        for prev, cur in zip(ratios, ratios[1:]):
            if cur != 3 * prev:
                raise ContractError(f"ratios must grow by factor 3, got {ratios}")

    @classmethod
    def with_levels(cls, levels: int, base_cell_size: float = 0.15) -> LevelPyramid:
        return cls(base_cell_size, tuple(3**i for i in range(levels)))

    @property
    def levels(self) -> int:
        return len(self.ratios)

    @property
    def coarsest_ratio(self) -> int:
        return self.ratios[-1]

    @property
    def pad_cells(self) -> int:
        # one coarsest cell of placement range plus one spare cell
        return self.ratios[-1] // self.ratios[0] + 1

    def check_level(self, level: int) -> None:
        if not isinstance(level, (int, np.integer)) or not 1 <= level <= self.levels:
            raise ContractError(f"level must be in 1..{self.levels}, got {level!r}")

    def cell_size(self, level: int) -> float:
        self.check_level(level)
        return self.base_cell_size * self.ratios[level - 1]


def _snap_floor(q: float) -> int:
    r = round(q)
    if abs(q - r) < _INDEX_SNAP * max(1.0, abs(q)):
        return int(r)
    return math.floor(q)


def global_index(pose: Pose2, ref: Pose2, pyramid: LevelPyramid, level: int) -> GridIndex:
    """Index of the cell containing the ego position in the global grid of ``level``.

    The finest index is floored from the metric offset; coarser levels are
    derived by integer floor division so that all levels nest exactly.
    """
    pyramid.check_level(level)
    a = pyramid.base_cell_size
    i_e = _snap_floor((pose.east - ref.east) / a)
    i_n = _snap_floor((pose.north - ref.north) / a)
    ratio = pyramid.ratios[level - 1]
    return GridIndex(i_e // ratio, i_n // ratio, level)


@dataclass(frozen=True, eq=False)
class GridMap:
    """Dense ``height x width x channels`` grid with georeferencing.

    The payload is stored read-only; use :meth:`with_data` to derive a new map.
    """

    data: np.ndarray
    cell_size: float
    origin: tuple[float, float] = (0.0, 0.0)
    channel_names: tuple[str, ...] | None = field(default=None)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or min(data.shape) < 1:
            raise ContractError(f"grid data must be HxWxC with positive sizes, got {data.shape}")
        if not self.cell_size > 0:
            raise ContractError("cell_size must be positive")
        data = np.array(data, copy=True)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        if self.channel_names is not None and len(self.channel_names) != data.shape[2]:
            raise ContractError("channel_names length does not match channel count")

    @classmethod
    def filled(cls, width: int, height: int, value: float = UNKNOWN, channels: int = 1,
               cell_size: float = 0.15, origin=(0.0, 0.0), dtype=np.float32) -> GridMap:
        return cls(np.full((height, width, channels), value, dtype=dtype), cell_size, origin)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def channel(self, name_or_index) -> np.ndarray:
        if isinstance(name_or_index, str):
            if self.channel_names is None:
                raise KeyError(name_or_index)
            name_or_index = self.channel_names.index(name_or_index)
        return self.data[:, :, name_or_index]

    def with_data(self, data: np.ndarray, origin=None, channel_names=None) -> GridMap:
        return GridMap(data, self.cell_size, self.origin if origin is None else origin,
                       channel_names)

    def cell_center(self, col, row):
        """Global (east, north) of cell centers; accepts arrays."""
        e = self.origin[0] + (np.asarray(col) + 0.5) * self.cell_size
        n = self.origin[1] + (np.asarray(row) + 0.5) * self.cell_size
        return e, n

    def __eq__(self, other):
        if not isinstance(other, GridMap):
            return NotImplemented
        return (self.cell_size == other.cell_size and self.origin == other.origin
                and self.data.dtype == other.data.dtype
                and np.array_equal(self.data, other.data))

    __hash__ = None


def crop(grid: GridMap, x0: int, y0: int, w: int, h: int) -> GridMap:
    if w < 1 or h < 1 or x0 < 0 or y0 < 0 or x0 + w > grid.width or y0 + h > grid.height:
        raise GridRangeError(
            f"window ({x0}, {y0}, {w}, {h}) outside {grid.width}x{grid.height} grid")
    origin = (grid.origin[0] + x0 * grid.cell_size, grid.origin[1] + y0 * grid.cell_size)
    return GridMap(grid.data[y0:y0 + h, x0:x0 + w], grid.cell_size, origin, grid.channel_names)


def place(canvas_w: int, canvas_h: int, grid: GridMap, offset: tuple[int, int],
          fill: float = UNKNOWN) -> GridMap:
    """Copy ``grid`` into a ``fill``-valued canvas at ``offset`` (cols, rows)."""
    ox, oy = int(offset[0]), int(offset[1])
    if ox < 0 or oy < 0 or ox + grid.width > canvas_w or oy + grid.height > canvas_h:
        raise GridRangeError(
            f"{grid.width}x{grid.height} grid at {offset} does not fit {canvas_w}x{canvas_h}")
    out = np.full((canvas_h, canvas_w, grid.channels), fill, dtype=grid.data.dtype)
    out[oy:oy + grid.height, ox:ox + grid.width] = grid.data
    origin = (grid.origin[0] - ox * grid.cell_size, grid.origin[1] - oy * grid.cell_size)
    return GridMap(out, grid.cell_size, origin, grid.channel_names)


# ---------------------------------------------------------------------------
# DGM1 binary format

DGM1_MAGIC = b"DGM1"
_DGM1_HEADER = struct.Struct("<4sIIIfdd")


def dgm1_bytes(grid: GridMap) -> bytes:
    header = _DGM1_HEADER.pack(DGM1_MAGIC, grid.width, grid.height, grid.channels,
                               grid.cell_size, grid.origin[0], grid.origin[1])
    payload = np.ascontiguousarray(grid.data, dtype="<f4").tobytes()
    return header + payload


def dgm1_from_bytes(buf: bytes) -> GridMap:
    if len(buf) < _DGM1_HEADER.size:
        raise DataError("truncated DGM1 header")
    magic, w, h, c, cell, oe, on = _DGM1_HEADER.unpack_from(buf)
    if magic != DGM1_MAGIC:
        raise DataError(f"bad DGM1 magic {magic!r}")
    expected = _DGM1_HEADER.size + 4 * w * h * c
    if len(buf) != expected:
        raise DataError(f"DGM1 payload size {len(buf)} != expected {expected}")
    data = np.frombuffer(buf, dtype="<f4", offset=_DGM1_HEADER.size).reshape(h, w, c)
    return GridMap(data.astype(np.float32), float(cell), (oe, on))


def write_dgm1(path, grid: GridMap) -> None:
    Path(path).write_bytes(dgm1_bytes(grid))


def read_dgm1(path) -> GridMap:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read grid file {path}: {exc}") from exc
    return dgm1_from_bytes(buf)


def ego_window_origin(pose: Pose2, ref: Pose2, width: int, height: int | None = None,
                      cell_size: float = 0.15) -> tuple[float, float]:
    """Origin of the ego-centred grid window, snapped to the global cell lattice.

    The ego cell sits at column ``width // 2`` and row ``height // 2``.
    """
    height = width if height is None else height
    idx = global_index(pose, ref, LevelPyramid(cell_size, (1,)), 1)
    return (ref.east + (idx.i_east - width // 2) * cell_size,
            ref.north + (idx.i_north - height // 2) * cell_size)
