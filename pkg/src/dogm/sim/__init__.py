"""Synthetic 2D worlds with exact ground truth."""

from dogm.sim.bundled import BUNDLED, bundled
from dogm.sim.scenario import Actor, Scenario, SensorConfig, Trajectory, scenario_from_json
from dogm.sim.simulate import Frame, GroundTruthBox, iter_frames, simulate

__all__ = ["Actor", "BUNDLED", "Frame", "GroundTruthBox", "Scenario", "SensorConfig",
           "Trajectory", "bundled", "iter_frames", "scenario_from_json", "simulate"]
