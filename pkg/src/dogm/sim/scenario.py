"""Declarative synthetic worlds and their JSON representation."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field

import numpy as np

from dogm.errors import SchemaError
from dogm.grid import Pose2

SCHEMA_VERSION = 1
DT = 0.1  # 10 Hz sensor rate


@dataclass(frozen=True)
class Trajectory:
    """Piecewise-linear path: leg ``i`` runs from ``waypoints[i]`` to
    ``waypoints[i+1]`` at ``speeds[i]`` m/s. After the last waypoint the
    mover stands still. A single waypoint is a stationary mover."""

    waypoints: tuple[tuple[float, float], ...]
    speeds: tuple[float, ...] = ()
    heading: float | None = None

    def __post_init__(self):
        wps = tuple((float(e), float(n)) for e, n in self.waypoints)
        object.__setattr__(self, "waypoints", wps)
        object.__setattr__(self, "speeds", tuple(float(s) for s in self.speeds))
        if not wps:
            raise SchemaError("trajectory needs at least one waypoint")
        if len(self.speeds) != len(wps) - 1:
            raise SchemaError("trajectory needs one speed per leg")
        if any(s < 0 for s in self.speeds):
            raise SchemaError("speeds must be non-negative")

    @classmethod
    def stationary(cls, east: float, north: float, heading: float = 0.0) -> Trajectory:
        return cls(((east, north),), (), heading)

    def _legs(self):
        t = 0.0
        for i, s in enumerate(self.speeds):
            a = np.array(self.waypoints[i])
            b = np.array(self.waypoints[i + 1])
            length = float(np.linalg.norm(b - a))
            dur = math.inf if s == 0 else length / s
            yield t, dur, a, b, length
            t += dur
            if math.isinf(t):
                return

    def state(self, t: float) -> tuple[np.ndarray, float]:
        """Position and heading at time ``t`` seconds."""
        heading = self.heading if self.heading is not None else 0.0
        pos = np.array(self.waypoints[0])
        for start, dur, a, b, length in self._legs():
            if length > 0:
                heading = math.atan2(b[1] - a[1], b[0] - a[0])
            if t < start + dur:
                frac = 0.0 if length == 0 or math.isinf(dur) else (t - start) / dur
                return a + frac * (b - a), heading
            pos = b
        return pos, heading


@dataclass(frozen=True)
class Actor:
    length: float
    width: float
    trajectory: Trajectory


@dataclass(frozen=True)
class SensorConfig:
    beams: int = 720
    max_range: float = 20.0
    noise_sigma: float = 0.0


@dataclass(frozen=True)
class Scenario:
    walls: tuple[tuple[float, float, float, float], ...] = ()
    actors: tuple[Actor, ...] = ()
    ego: Trajectory = field(default_factory=lambda: Trajectory.stationary(0.0, 0.0))
    sensor: SensorConfig = SensorConfig()
    duration: int = 20
    seed: int = 0
    grid_width: int = 80
    cell_size: float = 0.15
    ref: tuple[float, float] = (0.0, 0.0)
    bounds: tuple[float, float, float, float] | None = None
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "walls", tuple(tuple(float(v) for v in w) for w in self.walls))
        object.__setattr__(self, "actors", tuple(self.actors))
        if self.duration < 1:
            raise SchemaError("duration must be >= 1")
        if self.grid_width < 1 or not self.cell_size > 0:
            raise SchemaError("grid geometry must be positive")
        if any(len(w) != 4 for w in self.walls):
            raise SchemaError("walls are (x0, y0, x1, y1) segments")

    @property
    def dt(self) -> float:
        return DT

    @property
    def ref_pose(self) -> Pose2:
        return Pose2(self.ref[0], self.ref[1])

    def to_dict(self) -> dict:
        def traj(t: Trajectory):
            d = {"waypoints": [list(w) for w in t.waypoints], "speeds": list(t.speeds)}
            if t.heading is not None:
                d["heading"] = t.heading
            return d

        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "walls": [list(w) for w in self.walls],
            "actors": [{"length": a.length, "width": a.width, "trajectory": traj(a.trajectory)}
                       for a in self.actors],
            "ego": traj(self.ego),
            "sensor": {"beams": self.sensor.beams, "max_range": self.sensor.max_range,
                       "noise_sigma": self.sensor.noise_sigma},
            "duration": self.duration,
            "seed": self.seed,
            "grid": {"width": self.grid_width, "cell_size": self.cell_size,
                     "ref": list(self.ref)},
            "bounds": list(self.bounds) if self.bounds is not None else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# parsing


def _line_of(text: str, key: str | None) -> int | None:
    if text is None or key is None:
        return None
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _require(d: dict, key: str, kind, text, ctx: str):
    if not isinstance(d, dict):
        raise SchemaError(f"{ctx} must be an object", _line_of(text, ctx.split(".")[-1]))
    if key not in d:
        raise SchemaError(f"missing required key '{ctx}.{key}'", _line_of(text, ctx.split(".")[-1]))
    val = d[key]
    if kind is float and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    if not isinstance(val, kind) or isinstance(val, bool) and kind is not bool:
        raise SchemaError(f"'{ctx}.{key}' must be {kind.__name__}", _line_of(text, key))
    return val


def _traj(d, text, ctx) -> Trajectory:
    wps = _require(d, "waypoints", list, text, ctx)
    speeds = d.get("speeds", [])
    try:
        return Trajectory(tuple(tuple(w) for w in wps), tuple(speeds), d.get("heading"))
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"bad trajectory in {ctx}: {exc}", _line_of(text, "waypoints")) from exc
    except SchemaError as exc:
        raise SchemaError(f"{ctx}: {exc}", _line_of(text, "waypoints")) from exc


def scenario_from_dict(d: dict, text: str | None = None) -> Scenario:
    if not isinstance(d, dict):
        raise SchemaError("scenario must be a JSON object", 1)
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})",
                          _line_of(text, "schema_version") or 1)
    known = {"schema_version", "name", "walls", "actors", "ego", "sensor", "duration", "seed",
             "grid", "bounds"}
    for key in d:
        if key not in known:
            raise SchemaError(f"unknown key '{key}'", _line_of(text, key))
    grid = _require(d, "grid", dict, text, "scenario")
    sensor = d.get("sensor", {})
    actors = []
    for i, a in enumerate(d.get("actors", [])):
        ctx = f"actors[{i}]"
        actors.append(Actor(_require(a, "length", float, text, ctx),
                            _require(a, "width", float, text, ctx),
                            _traj(_require(a, "trajectory", dict, text, ctx), text, ctx)))
    try:
        return Scenario(
            walls=tuple(tuple(w) for w in d.get("walls", [])),
            actors=tuple(actors),
            ego=_traj(_require(d, "ego", dict, text, "scenario"), text, "ego"),
            sensor=SensorConfig(int(sensor.get("beams", 720)), float(sensor.get("max_range", 20.0)),
                                float(sensor.get("noise_sigma", 0.0))),
            duration=_require(d, "duration", int, text, "scenario"),
            seed=int(d.get("seed", 0)),
            grid_width=_require(grid, "width", int, text, "grid"),
            cell_size=_require(grid, "cell_size", float, text, "grid"),
            ref=tuple(grid.get("ref", (0.0, 0.0))),
            bounds=tuple(d["bounds"]) if d.get("bounds") is not None else None,
            name=str(d.get("name", "custom")),
        )
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"invalid scenario: {exc}") from exc


def scenario_from_json(text: str) -> Scenario:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"malformed JSON: {exc.msg} (column {exc.colno})", exc.lineno) from exc
    return scenario_from_dict(d, text)
