"""Run a scenario: scans, poses and exact global-frame label grids per step."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from dogm.grid import GridMap, Pose2, ego_window_origin
from dogm.loss import DYNAMIC_SPEED
from dogm.sensor import GridGeometry, Scan, measurement_grid, scan_from_arrays
from dogm.sim.geometry import Box, box_outline_cells, ray_cast, segment_cells
from dogm.sim.scenario import Scenario

LABEL_CHANNELS = ("occupancy", "v_e", "v_n", "dynamic")


@dataclass(frozen=True)
class GroundTruthBox:
    box: Box
    velocity: tuple[float, float]

    @property
    def speed(self) -> float:
        return math.hypot(*self.velocity)


@dataclass(frozen=True)
class Frame:
    step: int
    pose: Pose2
    scan: Scan
    label: GridMap
    measurement: GridMap
    boxes: tuple[GroundTruthBox, ...]


def actor_boxes(scenario: Scenario, step: int) -> list[GroundTruthBox]:
    """Actor rectangles at ``step`` with velocities from the frame-to-frame displacement."""
    dt = scenario.dt
    t = step * dt
    out = []
    for actor in scenario.actors:
        pos, heading = actor.trajectory.state(t)
        if step > 0:
            prev, _ = actor.trajectory.state(t - dt)
            vel = (pos - prev) / dt
        else:
            nxt, _ = actor.trajectory.state(t + dt)
            vel = (nxt - pos) / dt
        if scenario.bounds is not None:
            e0, n0, e1, n1 = scenario.bounds
            clipped = np.clip(pos, [e0, n0], [e1, n1])
            if not np.array_equal(clipped, pos):
                warnings.warn(f"actor left world bounds at step {step}; clipped",
                              RuntimeWarning, stacklevel=2)
                pos = clipped
        box = Box(float(pos[0]), float(pos[1]), actor.length, actor.width, heading)
        out.append(GroundTruthBox(box, (float(vel[0]), float(vel[1]))))
    return out


def ego_pose(scenario: Scenario, step: int) -> Pose2:
    pos, heading = scenario.ego.state(step * scenario.dt)
    return Pose2(float(pos[0]), float(pos[1]), heading)


def _static_cells(scenario: Scenario) -> np.ndarray:
    """Global level-1 cell indices (relative to ``ref``) of all wall cells."""
    cells = [segment_cells(w, scenario.cell_size, scenario.ref) for w in scenario.walls]
    if not cells:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(np.vstack(cells), axis=0)


def label_grid(scenario: Scenario, pose: Pose2, boxes, static_cells=None) -> GridMap:
    """Ground truth in the ego window: occupancy, v_E, v_N, dynamic flag.

    Occupied cells are those a surface passes through: wall segments and
    actor outlines. Independent of the ego position except through the
    window placement.
    """
    w = scenario.grid_width
    cs = scenario.cell_size
    ref = scenario.ref_pose
    origin = ego_window_origin(pose, ref, w, w, cs)
    off = np.array([round((origin[0] - ref.east) / cs), round((origin[1] - ref.north) / cs)])
    data = np.zeros((w, w, 4), dtype=np.float32)
    if static_cells is None:
        static_cells = _static_cells(scenario)
    if len(static_cells):
        rel = static_cells - off
        ok = (rel[:, 0] >= 0) & (rel[:, 0] < w) & (rel[:, 1] >= 0) & (rel[:, 1] < w)
        data[rel[ok, 1], rel[ok, 0], 0] = 1.0
    for gt in boxes:
        cells = box_outline_cells(gt.box, cs, ref.position) - off
        ok = (cells[:, 0] >= 0) & (cells[:, 0] < w) & (cells[:, 1] >= 0) & (cells[:, 1] < w)
        cols, rows = cells[ok, 0], cells[ok, 1]
        data[rows, cols, 0] = 1.0
        data[rows, cols, 1] = gt.velocity[0]
        data[rows, cols, 2] = gt.velocity[1]
        data[rows, cols, 3] = 1.0 if gt.speed > DYNAMIC_SPEED else 0.0
    return GridMap(data, cs, origin, LABEL_CHANNELS)


def cast_scan(scenario: Scenario, pose: Pose2, boxes, rng=None) -> Scan:
    """Noiseless (unless configured) 2D scan; azimuths are in the global frame."""
    sensor = scenario.sensor
    n = sensor.beams
    az = -math.pi + 2.0 * math.pi * (np.arange(n) + 0.5) / n
    dirs = np.stack([np.cos(az), np.sin(az)], axis=1)
    segs = [np.asarray(scenario.walls, dtype=np.float64).reshape(-1, 4)]
    segs += [gt.box.edges() for gt in boxes]
    dist = ray_cast(np.vstack(segs), (pose.east, pose.north), dirs)
    if sensor.noise_sigma > 0:
        if rng is None:
            rng = np.random.default_rng(scenario.seed)
        finite = np.isfinite(dist)
        dist[finite] += rng.normal(0.0, sensor.noise_sigma, size=int(finite.sum()))
        dist[finite] = np.maximum(dist[finite], 1e-3)
    hits = dist <= sensor.max_range
    ranges = np.where(hits, dist, sensor.max_range)
    return scan_from_arrays(pose, az, ranges, hits, sensor.max_range)


def iter_frames(scenario: Scenario):
    """Yield the steps of ``scenario`` one at a time; deterministic for a fixed seed."""
    rng = np.random.default_rng(scenario.seed)
    static = _static_cells(scenario)
    for k in range(scenario.duration):
        pose = ego_pose(scenario, k)
        boxes = actor_boxes(scenario, k)
        scan = cast_scan(scenario, pose, boxes, rng)
        label = label_grid(scenario, pose, boxes, static)
        geom = GridGeometry(label.width, label.height, label.cell_size, label.origin)
        meas = measurement_grid(scan, geom)
        yield Frame(k, pose, scan, label, meas, tuple(boxes))


def simulate(scenario: Scenario) -> list[Frame]:
    return list(iter_frames(scenario))
