"""File-based pipeline: simulate, train, infer, eval, render.

Every command reads and writes plain files so the stages can run as
separate processes. A *sequence directory* (written by :func:`cmd_simulate`)
holds::

    manifest.json     grid geometry, frame count, the scenario itself
    meas/NNNNNN.dgm1  measurement grids
    labels/NNNNNN.dgm1 label grids (occupancy, v_e, v_n, dynamic)
    poses.jsonl       one line per frame: ego pose and ground-truth boxes
    scans.jsonl       one line per frame: beam ranges and hit flags

:func:`cmd_infer` writes ``dogm/NNNNNN.dgm1`` (p_o, v_e, v_n, p_d) plus its
own manifest into the output directory.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dogm.egomotion import CompensationState, place_input, plan_step, shift_all
from dogm.errors import ConfigError, DataError, NumericError, SchemaError
from dogm.grid import GridMap, Pose2, read_dgm1, write_dgm1
from dogm.loss import LossWeights
from dogm.metrics.report import ReportBuilder, report_json
from dogm.nn.checkpoint import load_checkpoint, save_checkpoint
from dogm.nn.network import OUTPUT_CHANNELS, DogmOutput, NetConfig, Network, step
from dogm.nn.training import Adam, make_batch, make_episode, sample_picks, train_step
from dogm.render import write_render
from dogm.sim.bundled import bundled
from dogm.sim.geometry import Box
from dogm.sim.scenario import Scenario, scenario_from_json
from dogm.sim.simulate import GroundTruthBox, iter_frames

MANIFEST_VERSION = 1
FRAME_NAME = "{:06d}.dgm1"


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path, what: str):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read {what} {path}: {exc}") from exc
    try:
        return json.loads(text), text
    except json.JSONDecodeError as exc:
        raise SchemaError(f"malformed JSON in {path}: {exc.msg}", exc.lineno) from exc


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"output directory {out} is not writable: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# scenarios


def load_scenarios(path, seed: int | None = None, episodes: int = 1) -> list[Scenario]:
    """Scenarios described by a JSON file.

    The file is either a full scenario or a reference to a bundled family::

        {"bundled": "one_box", "seed": 0, "options": {...},
         "variants": [{"moving_ego": false}, {"moving_ego": true}]}

    A family yields ``episodes`` consecutive seeds times every variant. A
    full scenario yields ``episodes`` copies whose seeds (sensor noise)
    count up. ``seed`` overrides the file's seed.
    """
    d, text = _read_json(path, "scenario")
    if isinstance(d, dict) and "bundled" in d:
        unknown = set(d) - {"bundled", "seed", "options", "variants", "schema_version"}
        if unknown:
            raise SchemaError(f"unknown key '{sorted(unknown)[0]}' in scenario reference", None)
        base = int(d.get("seed", 0) if seed is None else seed)
        options = d.get("options", {})
        variants = d.get("variants") or [{}]
        out = []
        for k in range(episodes):
            for v in variants:
                try:
                    out.append(bundled(d["bundled"], base + k, **options, **v))
                except TypeError as exc:
                    raise ConfigError(f"bad options for bundled scenario: {exc}") from exc
        return out
    sc = scenario_from_json(text)
    if seed is not None:
        sc = dataclasses.replace(sc, seed=int(seed))
    return [dataclasses.replace(sc, seed=sc.seed + k) for k in range(episodes)]


def _box_dict(g: GroundTruthBox) -> dict:
    b = g.box
    return {"east": b.east, "north": b.north, "length": b.length, "width": b.width,
            "heading": b.heading, "v_e": float(g.velocity[0]), "v_n": float(g.velocity[1])}


def _box_from_dict(d: dict) -> GroundTruthBox:
    return GroundTruthBox(Box(d["east"], d["north"], d["length"], d["width"], d["heading"]),
                          (d["v_e"], d["v_n"]))


def cmd_simulate(scenario_path, out_dir, seed: int | None = None) -> dict:
    """Render a scenario into a sequence directory; returns the manifest."""
    scenarios = load_scenarios(scenario_path, seed)
    if len(scenarios) != 1:
        raise ConfigError("simulate expects a single scenario")
    return simulate_to_dir(scenarios[0], out_dir)


def simulate_to_dir(sc: Scenario, out_dir) -> dict:
    out = _out_dir(out_dir)
    (out / "meas").mkdir(exist_ok=True)
    (out / "labels").mkdir(exist_ok=True)
    n = 0
    with open(out / "poses.jsonl", "w") as poses, open(out / "scans.jsonl", "w") as scans:
        for f in iter_frames(sc):
            write_dgm1(out / "meas" / FRAME_NAME.format(f.step), f.measurement)
            write_dgm1(out / "labels" / FRAME_NAME.format(f.step), f.label)
            poses.write(json.dumps({"frame": f.step, "east": f.pose.east, "north": f.pose.north,
                                    "heading": f.pose.heading,
                                    "boxes": [_box_dict(b) for b in f.boxes]},
                                   sort_keys=True) + "\n")
            scans.write(json.dumps({"frame": f.step,
                                    "azimuth_0": f.scan.beams[0].azimuth if f.scan.beams else 0.0,
                                    "range": [b.range for b in f.scan.beams],
                                    "hit": [int(b.hit) for b in f.scan.beams]}) + "\n")
            n += 1
    manifest = {
        "schema_version": MANIFEST_VERSION,
        "kind": "sequence",
        "frames": n,
        "grid_width": sc.grid_width,
        "cell_size": sc.cell_size,
        "ref": list(sc.ref),
        "measurements": "meas",
        "labels": "labels",
        "poses": "poses.jsonl",
        "scans": "scans.jsonl",
        "scenario": sc.to_dict(),
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainingConfig:
    iterations: int = 1000
    batch: int = 4
    n_in: int = 12
    tbptt_window: int = 2
    loss_steps: int = 2
    lr: float = 1e-4
    lr_decay_every: int = 100_000
    lr_decay_factor: float = 0.5
    clip_norm: float | None = None
    episodes: int = 8
    rotate: bool = False
    checkpoint_every: int = 0


@dataclass
class RunConfig:
    scenario: Path
    net: NetConfig
    weights: LossWeights = LossWeights()
    training: TrainingConfig = field(default_factory=TrainingConfig)
    seed: int = 0
    output_dir: Path = Path("run")

    def __post_init__(self):
        t = self.training
        if not t.n_in >= t.tbptt_window >= 1:
            raise ConfigError(f"need n_in >= tbptt_window >= 1 (got {t.n_in}, {t.tbptt_window})")
        if not 1 <= t.loss_steps <= t.n_in:
            raise ConfigError("loss_steps must lie in [1, n_in]")
        if t.iterations < 0 or t.batch < 1 or t.episodes < 1:
            raise ConfigError("iterations >= 0, batch >= 1 and episodes >= 1 required")


def _fields(cls, d: dict, where: str) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"'{where}' must be an object")
    unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in '{where}'")
    return d


def load_run_config(path, seed: int | None = None, output_dir=None) -> RunConfig:
    """Parse a run config; relative paths resolve against the config's folder."""
    path = Path(path)
    d, _ = _read_json(path, "run config")
    if not isinstance(d, dict):
        raise SchemaError("run config must be a JSON object", 1)
    allowed = {"schema_version", "scenario", "net", "weights", "training", "seed", "output_dir"}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in run config")
    if "scenario" not in d or "net" not in d:
        raise ConfigError("run config needs 'scenario' and 'net'")
    base = path.parent
    net = d["net"]
    if isinstance(net, str):
        net, _ = _read_json(base / net, "network config")
    net = dict(_fields(NetConfig, net, "net"))
    training = TrainingConfig(**_fields(TrainingConfig, d.get("training", {}), "training"))
    try:
        weights = LossWeights(**_fields(LossWeights, d.get("weights", {}), "weights"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    run_seed = int(d.get("seed", 0) if seed is None else seed)
    net.setdefault("seed", run_seed)
    if "input_size" not in net:
        # derive the canvas from the scenario's grid width
        sc = load_scenarios(base / d["scenario"])[0]
        net["input_size"] = sc.grid_width + 3 ** (len(net.get("level_channels", (0,) * 4)) - 1) + 1
    out = output_dir if output_dir is not None else base / d.get("output_dir", "run")
    return RunConfig(base / d["scenario"], NetConfig.from_dict(net), weights, training,
                     run_seed, Path(out))


def _check_geometry(net_cfg: NetConfig, width: int, cell_size: float) -> None:
    if width != net_cfg.output_size:
        raise ConfigError(f"network predicts {net_cfg.output_size}x{net_cfg.output_size} grids "
                          f"but the data is {width} cells wide")
    if not math.isclose(cell_size, net_cfg.base_cell_size, rel_tol=1e-6):
        raise ConfigError(f"data cell size {cell_size} != network cell size "
                          f"{net_cfg.base_cell_size}")


def cmd_train(config_path, out_dir=None, seed: int | None = None, resume=None,
              log=None) -> dict:
    """Train on episodes simulated from the configured scenario.

    Writes ``checkpoint.dgmw`` and ``loss.csv`` (iteration, lr, loss) into
    the output directory. With ``resume`` the network, optimiser state and
    iteration count come from that checkpoint and ``iterations`` more steps
    run. Non-finite losses raise :class:`NumericError` after writing
    ``diagnostics.json``.
    """
    run = load_run_config(config_path, seed, out_dir)
    t = run.training
    out = _out_dir(run.output_dir)
    if resume is not None:
        ck = load_checkpoint(resume)
        net = ck.network
        if net.config.to_dict() != run.net.to_dict():
            raise ConfigError("checkpoint network config differs from the run config")
        opt = ck.optimizer or Adam(t.lr, decay_every=t.lr_decay_every,
                                   decay_factor=t.lr_decay_factor, clip_norm=t.clip_norm)
    else:
        net = Network(run.net)
        opt = Adam(t.lr, decay_every=t.lr_decay_every, decay_factor=t.lr_decay_factor,
                   clip_norm=t.clip_norm)

    scenarios = load_scenarios(run.scenario, run.seed, t.episodes)
    episodes = []
    for sc in scenarios:
        _check_geometry(net.config, sc.grid_width, sc.cell_size)
        if sc.duration < t.n_in:
            raise ConfigError(f"scenario duration {sc.duration} shorter than n_in {t.n_in}")
        episodes.append(make_episode(list(iter_frames(sc)), sc.ref_pose, net.config.pyramid))

    start = opt.iteration
    rng = np.random.default_rng([run.seed, start])
    log_path = out / "loss.csv"
    fresh = resume is None or not log_path.exists() or log_path.stat().st_size == 0
    losses = []
    with open(log_path, "w" if fresh else "a") as fh:
        if fresh:
            fh.write("iteration,lr,loss\n")
        for _ in range(t.iterations):
            it = opt.iteration
            picks = sample_picks(rng, episodes, t.batch, t.n_in)
            angles = rng.integers(0, 360, size=t.batch) if t.rotate else None
            batch = make_batch(episodes, picks, t.n_in, net.config.pad_cells, t.loss_steps,
                               angles)
            lr = opt.lr_at(it)
            try:
                loss = train_step(net, batch, opt, run.weights, t.tbptt_window, rng)
            except NumericError as exc:
                fh.flush()
                _write_json(out / "diagnostics.json", {"error": str(exc), **exc.diagnostics})
                raise
            losses.append(loss)
            fh.write(f"{it},{lr:.6g},{loss:.8g}\n")
            if log is not None:
                log(it, loss)
            if t.checkpoint_every and (it + 1) % t.checkpoint_every == 0:
                save_checkpoint(out / "checkpoint.dgmw", net, opt)
    save_checkpoint(out / "checkpoint.dgmw", net, opt)
    return {"iterations": opt.iteration, "start": start, "episodes": len(episodes),
            "final_loss": losses[-1] if losses else None,
            "checkpoint": str(out / "checkpoint.dgmw"), "loss_log": str(out / "loss.csv")}


# ---------------------------------------------------------------------------
# inference


def _manifest(seq_dir) -> dict:
    path = Path(seq_dir) / "manifest.json"
    if not path.exists():
        raise DataError(f"{seq_dir} has no manifest.json")
    d, _ = _read_json(path, "manifest")
    return d


def iter_poses(seq_dir, manifest=None):
    manifest = manifest or _manifest(seq_dir)
    with open(Path(seq_dir) / manifest.get("poses", "poses.jsonl")) as fh:
        for line in fh:
            yield json.loads(line)


def cmd_infer(checkpoint, seq_dir, out_dir) -> dict:
    """Run a trained network over a sequence, one frame at a time.

    Only the current measurement grid and the recurrent states carried from
    the previous step are held in memory; outputs go straight to disk.
    """
    net = load_checkpoint(checkpoint).network.eval()
    seq = Path(seq_dir)
    manifest = _manifest(seq)
    _check_geometry(net.config, int(manifest["grid_width"]), float(manifest["cell_size"]))
    pyramid = net.config.pyramid
    out = _out_dir(out_dir)
    (out / "dogm").mkdir(exist_ok=True)
    comp = CompensationState.start(Pose2(*manifest["ref"]), pyramid)
    states = net.initial_states()
    n = 0
    for k, rec in enumerate(iter_poses(seq, manifest)):
        if rec["frame"] != k:
            raise DataError(f"pose record {k} is labelled frame {rec['frame']}")
        meas = read_dgm1(seq / manifest["measurements"] / FRAME_NAME.format(k))
        plan, comp = plan_step(Pose2(rec["east"], rec["north"], rec["heading"]), comp, pyramid)
        states = shift_all(states, plan, pyramid)
        placed = place_input(meas, plan, pyramid.pad_cells)
        pred, states = step(net, placed, states, plan.p_in)
        grid = pred.to_grid()
        if not np.all(np.isfinite(grid.data)):
            raise NumericError(f"non-finite network output at frame {k}", {"frame": k})
        write_dgm1(out / "dogm" / FRAME_NAME.format(k), grid)
        n += 1
    if n != manifest["frames"]:
        raise DataError(f"manifest lists {manifest['frames']} frames, found {n} poses")
    result = {"schema_version": MANIFEST_VERSION, "kind": "dogm", "frames": n,
              "grids": "dogm", "channels": list(OUTPUT_CHANNELS),
              "grid_width": manifest["grid_width"], "cell_size": manifest["cell_size"]}
    _write_json(out / "manifest.json", result)
    return result


# ---------------------------------------------------------------------------
# evaluation


def _frame_files(path, role: str) -> tuple[Path, dict | None]:
    """Directory holding the DGM1 frames for ``role`` ('grids' or 'labels')."""
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"{path} is not a directory")
    mpath = path / "manifest.json"
    if mpath.exists():
        m, _ = _read_json(mpath, "manifest")
        sub = m.get(role) or m.get("grids") or m.get("labels")
        if sub is None:
            raise DataError(f"manifest in {path} names no grid folder")
        return path / sub, m
    return path, None


def _frame_indices(folder: Path) -> set[int]:
    out = set()
    for p in folder.glob("*.dgm1"):
        try:
            out.add(int(p.stem))
        except ValueError:
            continue
    return out


def cmd_eval(pred_dir, label_dir, out_path=None, warmup: int = 0,
             objects: bool = True) -> dict:
    """Compare predictions with labels frame by frame; returns the report.

    ``warmup`` leading frames are skipped. Object metrics need ground-truth
    boxes, which are read from the label sequence's pose file when present.
    """
    pdir, _ = _frame_files(pred_dir, "grids")
    ldir, lman = _frame_files(label_dir, "labels")
    pidx, lidx = _frame_indices(pdir), _frame_indices(ldir)
    if not lidx:
        raise DataError(f"no label frames in {ldir}")
    missing_pred = sorted(lidx - pidx)
    missing_label = sorted(pidx - lidx)
    if missing_pred or missing_label:
        raise DataError(f"frame sets differ: missing predictions {missing_pred}, "
                        f"missing labels {missing_label}")
    boxes = None
    if objects and lman is not None and (Path(label_dir) / lman.get("poses", "")).is_file():
        boxes = iter_poses(label_dir, lman)
    builder = ReportBuilder(with_objects=objects)
    for k in sorted(lidx):
        rec = next(boxes, None) if boxes is not None else None
        if rec is not None and rec["frame"] != k:
            raise DataError(f"pose record for frame {k} is labelled {rec['frame']}")
        if k < warmup:
            continue
        pred = DogmOutput.from_grid(read_dgm1(pdir / FRAME_NAME.format(k)))
        label = read_dgm1(ldir / FRAME_NAME.format(k))
        if label.data.shape[:2] != pred.p_o.shape:
            raise DataError(f"frame {k}: prediction {pred.p_o.shape} vs label "
                            f"{label.data.shape[:2]}")
        gt = [_box_from_dict(b) for b in rec["boxes"]] if rec is not None else []
        builder.add(k, pred, label, gt)
    report = builder.report()
    if out_path is not None:
        Path(out_path).write_text(report_json(report))
    return report


# ---------------------------------------------------------------------------
# rendering


def cmd_render(grid_path, style: str = "occupancy", out_path=None) -> Path:
    grid: GridMap = read_dgm1(grid_path)
    if out_path is None:
        out_path = Path(grid_path).with_suffix(".pgm" if style == "occupancy" else ".ppm")
    return write_render(grid, out_path, style)
