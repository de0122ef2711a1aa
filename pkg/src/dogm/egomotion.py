"""Ego-motion compensation for the multi-resolution recurrent network.

Translation of the ego vehicle is split in two parts:

* the position of the ego inside its coarsest-level cell is compensated at
  the input, by placing the measurement grid at an offset inside an enlarged
  canvas (input placement);
* whenever the ego crosses into another coarsest-level cell, every recurrent
  state is translated by the matching integer number of cells of its own
  level, all levels at once (state shifting).

Both parts only ever move data by whole cells, so a world-fixed structure
lands on the same state cells as it would for a stationary ego.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from dogm.errors import ContractError
from dogm.grid import UNKNOWN, GridIndex, GridMap, LevelPyramid, Pose2, global_index, place

STATE_FILL = 0.0


@dataclass(frozen=True)
class RecurrentState:
    """Hidden and cell tensor of one ConvLSTM layer, ``(..., H, W, C)``."""

    level: int | None
    hidden: np.ndarray
    cell: np.ndarray

    def __post_init__(self):
        if self.hidden.shape != self.cell.shape:
            raise ContractError("hidden and cell state shapes differ")


@dataclass(frozen=True)
class ShiftPlan:
    p_in: tuple[int, int]
    gd: tuple[tuple[int, int], ...]

    @property
    def gd_coarsest(self) -> tuple[int, int]:
        return self.gd[-1]

    def is_stationary(self) -> bool:
        return all(g == (0, 0) for g in self.gd)


@dataclass(frozen=True)
class CompensationState:
    ref: Pose2
    prev_index: GridIndex | None = None
    pad_cells: int = 28

    @classmethod
    def start(cls, ref: Pose2, pyramid: LevelPyramid) -> CompensationState:
        return cls(ref, None, pyramid.pad_cells)


def plan_step(pose: Pose2, state: CompensationState,
              pyramid: LevelPyramid) -> tuple[ShiftPlan, CompensationState]:
    """Placement offset and per-level state shifts for the next time step."""
    top = pyramid.levels
    ratio = pyramid.coarsest_ratio
    i1 = global_index(pose, state.ref, pyramid, 1).as_array()
    itop = global_index(pose, state.ref, pyramid, top)
    p_in = i1 - itop.as_array() * ratio
    if state.prev_index is None:
        gd_top = np.zeros(2, dtype=np.int64)
    else:
        gd_top = itop.as_array() - state.prev_index.as_array()
    gd = tuple(tuple(int(v) for v in gd_top * (ratio // r)) for r in pyramid.ratios)
    plan = ShiftPlan((int(p_in[0]), int(p_in[1])), gd)
    return plan, replace(state, prev_index=itop)


def place_input(grid: GridMap, plan: ShiftPlan, pad_cells: int = 28,
                fill: float = UNKNOWN) -> GridMap:
    """Enlarge ``grid`` by ``pad_cells`` per axis and put it at ``plan.p_in``."""
    px, py = plan.p_in
    if not (0 <= px < pad_cells and 0 <= py < pad_cells):
        raise ContractError(f"placement offset {plan.p_in} outside [0, {pad_cells})")
    return place(grid.width + pad_cells, grid.height + pad_cells, grid, (px, py), fill)


def shift_state(tensor: np.ndarray, gd, fill: float = STATE_FILL) -> np.ndarray:
    """Translate the spatial payload of ``(..., H, W, C)`` by ``-gd`` cells.

    ``gd = (east, north)``; output cell ``(r, c)`` takes input cell
    ``(r + gd_north, c + gd_east)``. Vacated cells get ``fill``.
    """
    ge, gn = int(gd[0]), int(gd[1])
    h, w = tensor.shape[-3], tensor.shape[-2]
    if ge == 0 and gn == 0:
        return tensor.copy()
    out = np.full_like(tensor, fill)
    if abs(ge) >= w or abs(gn) >= h:
        warnings.warn(f"shift {gd} exceeds state extent {w}x{h}; state cleared",
                      RuntimeWarning, stacklevel=2)
        return out
    src_r = slice(max(gn, 0), h + min(gn, 0))
    dst_r = slice(max(-gn, 0), h + min(-gn, 0))
    src_c = slice(max(ge, 0), w + min(ge, 0))
    dst_c = slice(max(-ge, 0), w + min(-ge, 0))
    out[..., dst_r, dst_c, :] = tensor[..., src_r, src_c, :]
    return out


def shift_all(states, plan: ShiftPlan, pyramid: LevelPyramid | None = None,
              fill: float = STATE_FILL) -> list[RecurrentState]:
    """Shift hidden and cell tensors of every state by its level's grid difference."""
    levels = len(plan.gd) if pyramid is None else pyramid.levels
    out = []
    for st in states:
        if st.level is None or not 1 <= st.level <= levels:
            raise ContractError(f"recurrent state has invalid level tag {st.level!r}")
        gd = plan.gd[st.level - 1]
        if gd == (0, 0):
            out.append(st)
        else:
            out.append(RecurrentState(st.level, shift_state(st.hidden, gd, fill),
                                      shift_state(st.cell, gd, fill)))
    return out
