"""Bundled scenario families. Each takes a seed; the seed fixes the world."""

from __future__ import annotations

import math

import numpy as np

from dogm.errors import ConfigError
from dogm.sim.scenario import Actor, Scenario, SensorConfig, Trajectory

ROOM_HALF = 5.4  # default room, sized for 80-cell windows
# ego starts on a cell centre so integer-cell motion never touches a boundary
EGO_ORIGIN = (0.075, 0.075)
EGO_STEP_SPEED = 1.5  # one 0.15 m cell per 0.1 s frame


def _rect_walls(e0, n0, e1, n1):
    return [(e0, n0, e1, n0), (e1, n0, e1, n1), (e1, n1, e0, n1), (e0, n1, e0, n0)]


def room_half(grid_width: int, cell_size: float = 0.15, fill: float = 0.45) -> float:
    """Half side of a square room that fits the ego window.

    Walls sit a third of a cell off the lattice so each wall occupies one
    row or column of cells.
    """
    return (math.floor(fill * grid_width) + 1.0 / 3.0) * cell_size


def _pillars(rng, n, half, avoid, duration, clearance=1.0, margin=0.5):
    """Small square pillars clear of every trajectory in ``avoid``."""
    walls = []
    lim = half - margin
    placed = 0
    for _ in range(1000):
        if placed == n:
            break
        c = rng.uniform(-lim, lim, size=2)
        s = rng.uniform(0.15, 0.3)
        if all(np.hypot(*(c - tr.state(k * 0.1)[0])) >= clearance + s
               for tr in avoid for k in range(duration)):
            walls += _rect_walls(c[0] - s, c[1] - s, c[0] + s, c[1] + s)
            placed += 1
    return walls


def _room(rng, pillars=2, half=ROOM_HALF):
    walls = _rect_walls(-half, -half, half, half)
    for _ in range(pillars):
        c = rng.uniform(-3.5, 3.5, size=2)
        while np.hypot(*c) < 1.5:
            c = rng.uniform(-3.5, 3.5, size=2)
        s = rng.uniform(0.3, 0.6)
        walls += _rect_walls(c[0] - s, c[1] - s, c[0] + s, c[1] + s)
    return walls


def _straight_path(rng, duration, speed_range, half=ROOM_HALF, margin=0.8, avoid=(),
                   clearance=1.0):
    """A straight path that stays inside the room for the whole duration.

    ``avoid`` holds trajectories the actor must keep ``clearance`` metres
    away from at every step.
    """
    lim = half - margin
    for _ in range(1000):
        speed = rng.uniform(*speed_range)
        theta = rng.uniform(-math.pi, math.pi)
        start = rng.uniform(-lim, lim, size=2)
        end = start + speed * duration * 0.1 * np.array([math.cos(theta), math.sin(theta)])
        if not np.all(np.abs(end) <= lim):
            continue
        path = Trajectory((tuple(start), tuple(end)), (speed,))
        if all(np.hypot(*(path.state(k * 0.1)[0] - other.state(k * 0.1)[0])) >= clearance
               for other in avoid for k in range(duration)):
            return path
    raise RuntimeError("could not place actor path")


def _ego(rng, moving: bool, duration: int) -> Trajectory:
    if not moving:
        return Trajectory.stationary(*EGO_ORIGIN)
    dirs = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)]
    d = np.array(dirs[int(rng.integers(len(dirs)))], dtype=float)
    half = (duration // 2) * 0.15 * d
    start = np.array(EGO_ORIGIN) - half
    end = start + duration * 0.15 * d
    return Trajectory((tuple(start), tuple(end)), (EGO_STEP_SPEED * float(np.hypot(*d)),))


def one_box(seed: int = 0, moving_ego: bool = False, duration: int = 20, grid_width: int = 80,
            speed_range=(1.5, 3.0), pillars: int = 2) -> Scenario:
    """Room of random size within the window, a few pillars and one small box
    driving a straight line.

    The world depends on ``seed`` only, so the stationary and moving-ego
    variants of a seed observe the same walls and the same box.
    """
    rng = np.random.default_rng(seed)
    half = room_half(grid_width, fill=rng.uniform(0.38, 0.45))
    walls = _rect_walls(-half, -half, half, half)
    egos = [_ego(np.random.default_rng([seed, 1]), m, duration) for m in (False, True)]
    path = _straight_path(rng, duration, speed_range, half, avoid=egos)
    walls += _pillars(rng, pillars, half, (path, *egos), duration)
    return Scenario(walls=tuple(walls), actors=(Actor(0.9, 0.6, path),), ego=egos[int(moving_ego)],
                    sensor=SensorConfig(beams=720, max_range=20.0), duration=duration, seed=seed,
                    grid_width=grid_width, name="moving_ego" if moving_ego else "one_box")


def turning_box(seed: int = 0, moving_ego: bool = False, duration: int = 20,
                grid_width: int = 80) -> Scenario:
    """A box following a quarter circle, the hard case for velocity direction."""
    rng = np.random.default_rng(seed)
    walls = _room(rng, pillars=1)
    radius = rng.uniform(2.5, 3.5)
    speed = rng.uniform(2.0, 3.5)
    start_ang = rng.uniform(-math.pi, math.pi)
    sweep = speed * duration * 0.1 / radius
    angs = start_ang + np.linspace(0.0, sweep, 16)
    pts = [(radius * math.cos(a), radius * math.sin(a)) for a in angs]
    actor = Actor(0.9, 0.6, Trajectory(tuple(pts), (speed,) * (len(pts) - 1)))
    return Scenario(walls=tuple(walls), actors=(actor,),
                    ego=_ego(np.random.default_rng([seed, 1]), moving_ego, duration),
                    duration=duration, seed=seed, grid_width=grid_width, name="turning_box")


def uncovered_wall(seed: int = 0, duration: int = 30, grid_width: int = 80) -> Scenario:
    """Ego drives past an occluder; the wall behind it comes into view."""
    walls = [(3.5, -6.0, 3.5, 6.0)] + _rect_walls(1.0, -1.5, 1.6, 1.5)
    walls += [(-3.0, -6.0, -3.0, 6.0)]
    ego = Trajectory(((0.075, -2.175), (0.075, -2.175 + duration * 0.15)), (EGO_STEP_SPEED,))
    return Scenario(walls=tuple(walls), ego=ego, duration=duration, seed=seed,
                    grid_width=grid_width, name="uncovered_wall")


def crossing_actors(seed: int = 0, moving_ego: bool = False, duration: int = 20,
                    grid_width: int = 80) -> Scenario:
    rng = np.random.default_rng(seed)
    walls = _room(rng, pillars=1)
    s1, s2 = rng.uniform(1.5, 3.5, size=2)
    t = duration * 0.1
    a1 = Actor(0.9, 0.6, Trajectory(((-s1 * t / 2, 0.5), (s1 * t / 2, 0.5)), (s1,)))
    a2 = Actor(0.9, 0.6, Trajectory(((-0.5, s2 * t / 2), (-0.5, -s2 * t / 2)), (s2,)))
    return Scenario(walls=tuple(walls), actors=(a1, a2),
                    ego=_ego(np.random.default_rng([seed, 1]), moving_ego, duration),
                    duration=duration, seed=seed, grid_width=grid_width, name="crossing_actors")


def stationary_ego(seed: int = 0, **kw) -> Scenario:
    return one_box(seed, moving_ego=False, **kw)


def moving_ego(seed: int = 0, **kw) -> Scenario:
    return one_box(seed, moving_ego=True, **kw)


BUNDLED = {
    "one_box": one_box,
    "turning_box": turning_box,
    "uncovered_wall": uncovered_wall,
    "crossing_actors": crossing_actors,
    "stationary_ego": stationary_ego,
    "moving_ego": moving_ego,
}


def bundled(name: str, seed: int = 0, **kw) -> Scenario:
    try:
        factory = BUNDLED[name]
    except KeyError:
        raise ConfigError(f"unknown bundled scenario {name!r}; choose from {sorted(BUNDLED)}")
    return factory(seed, **kw)
