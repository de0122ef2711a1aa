"""Acceptance criteria, one test each, at their stated tolerances.

Each test records a one-line verdict that is printed in the pytest terminal
summary (and by ``python3 tests/test_acceptance.py``).
"""

import math
import sys
import time
import tracemalloc
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import ACCEPTANCE_RESULTS  # noqa: E402
from test_loss import scalar_loss  # noqa: E402
from test_metrics import (  # noqa: E402
    _partition, _random_frame, brute_confusion, brute_dbscan, brute_epe, brute_miou,
)
from test_render import DATA, golden_grid  # noqa: E402

from dogm import pipeline  # noqa: E402
from dogm.egomotion import CompensationState, ShiftPlan, place_input, plan_step, shift_all  # noqa: E402
from dogm.grid import (  # noqa: E402
    GridMap, LevelPyramid, Pose2, dgm1_bytes, dgm1_from_bytes, global_index, read_dgm1,
)
from dogm.loss import composite_loss, huber  # noqa: E402
from dogm.metrics.cell import confusion, epe_buckets  # noqa: E402
from dogm.metrics.dbscan import dbscan  # noqa: E402
from dogm.metrics.report import ReportBuilder  # noqa: E402
from dogm.nn.checkpoint import checkpoint_bytes, checkpoint_from_bytes  # noqa: E402
from dogm.nn.network import (  # noqa: E402
    DogmOutput, NetConfig, Network, Tape, backward, forward_batch, gradcheck_config, step,
)
from dogm.nn.training import Adam  # noqa: E402
from dogm.render import render_grid  # noqa: E402
from dogm.sim import Actor, Scenario, SensorConfig, Trajectory, bundled, iter_frames  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]


def record(num: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS[num] = (bool(ok), detail)
    print(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")


# ---------------------------------------------------------------------------
# 1. ego-motion equivalence

EQ_WIDTH = 134  # 134 + 28 = 162 = 6 coarse cells


def _global_offset(grid: GridMap, ref: Pose2, p_in) -> np.ndarray:
    """Global level-1 (east, north) index of canvas cell (0, 0)."""
    o = np.rint((np.array(grid.origin) - [ref.east, ref.north]) / grid.cell_size).astype(int)
    return o - np.array(p_in)


def _overlap(a_off, b_off, size):
    """Row/col slices of the common global region in two square arrays."""
    lo = np.maximum(a_off, b_off)
    hi = np.minimum(a_off, b_off) + size
    if np.any(hi <= lo):
        return None
    sa = (slice(lo[1] - a_off[1], hi[1] - a_off[1]), slice(lo[0] - a_off[0], hi[0] - a_off[0]))
    sb = (slice(lo[1] - b_off[1], hi[1] - b_off[1]), slice(lo[0] - b_off[0], hi[0] - b_off[0]))
    return lo, hi, sa, sb


def _run_equivalence(seed=0):
    """Stream the paired variants side by side; yield per-step comparisons."""
    net = Network(NetConfig(input_size=EQ_WIDTH + 28, level_channels=(3, 4, 4, 4), kernel_size=1,
                            skip_state_channels=(2, 2, 2), bottleneck_channels=4, dropout=0.0,
                            dtype="float64", seed=seed))
    pyr = net.config.pyramid
    runs = []
    for name in ("stationary_ego", "moving_ego"):
        sc = bundled(name, seed, grid_width=EQ_WIDTH)
        runs.append({"frames": iter_frames(sc), "comp": CompensationState.start(sc.ref_pose, pyr),
                     "states": net.initial_states(), "ref": sc.ref_pose})
    # level-4 blocks (global coarse index) whose whole history lay inside both data windows
    valid = None
    worst_out = 0.0
    exact_inputs = exact_states = True
    compared_cells = 0
    moved = False
    for t in range(bundled("stationary_ego", seed, grid_width=EQ_WIDTH).duration):
        canv, offs, data_win = [], [], []
        for r in runs:
            f = next(r["frames"])
            plan, r["comp"] = plan_step(f.pose, r["comp"], pyr)
            r["states"] = shift_all(r["states"], plan, pyr)
            # ego-independent global-frame input: the label occupancy grid
            meas = GridMap(f.label.data[..., :1].astype(np.float64), f.label.cell_size,
                           f.label.origin)
            placed = place_input(meas, plan, pyr.pad_cells)
            canv.append(placed)
            off = _global_offset(meas, r["ref"], plan.p_in)
            offs.append(off)
            data_win.append((off + plan.p_in, off + plan.p_in + EQ_WIDTH))
            r["plan"] = plan
        moved |= not runs[1]["plan"].is_stationary()
        # both canvases sit on one coarse lattice, offset by a fixed phase
        phase = offs[0] % 27
        assert np.array_equal(offs[1] % 27, phase)

        # compensated inputs: exact on the jointly covered data region
        lo = np.maximum(data_win[0][0], data_win[1][0])
        hi = np.minimum(data_win[0][1], data_win[1][1])
        ia = canv[0].data[lo[1] - offs[0][1]:hi[1] - offs[0][1], lo[0] - offs[0][0]:hi[0] - offs[0][0]]
        ib = canv[1].data[lo[1] - offs[1][1]:hi[1] - offs[1][1], lo[0] - offs[1][0]:hi[0] - offs[1][0]]
        exact_inputs &= bool(np.array_equal(ia, ib))

        # coarse blocks fully inside both data windows at this step
        b_lo, b_hi = -(-(lo - phase) // 27), (hi - phase) // 27
        blocks = {(bx, by) for bx in range(b_lo[0], b_hi[0]) for by in range(b_lo[1], b_hi[1])}
        prev_valid = valid

        # post-shift states: exact on blocks valid over the whole history so far
        if prev_valid:
            for sa_st, sb_st in zip(runs[0]["states"], runs[1]["states"]):
                r = 3 ** (sa_st.level - 1)
                k = 27 // r
                for bx, by in prev_valid:
                    ca = (np.array([bx, by]) * 27 + phase - offs[0]) // r
                    cb = (np.array([bx, by]) * 27 + phase - offs[1]) // r
                    for field in ("hidden", "cell"):
                        va = getattr(sa_st, field)[ca[1]:ca[1] + k, ca[0]:ca[0] + k]
                        vb = getattr(sb_st, field)[cb[1]:cb[1] + k, cb[0]:cb[0] + k]
                        exact_states &= bool(np.array_equal(va, vb))
        valid = blocks if prev_valid is None else prev_valid & blocks

        outs = []
        for r, placed in zip(runs, canv):
            out, r["states"] = step(net, placed, r["states"], r["plan"].p_in)
            outs.append(out)
        for bx, by in valid:
            vals = []
            for out, off, r in zip(outs, offs, runs):
                o = np.array([bx, by]) * 27 + phase - off - np.array(r["plan"].p_in)
                vals.append(out.stacked()[o[1]:o[1] + 27, o[0]:o[0] + 27])
            worst_out = max(worst_out, float(np.max(np.abs(vals[0] - vals[1]))))
            compared_cells += 27 * 27
    return exact_inputs, exact_states, worst_out, len(valid), compared_cells, moved


def test_criterion_1_ego_motion_equivalence():
    t0 = time.perf_counter()
    exact_inputs, exact_states, worst, n_valid, cells, moved = _run_equivalence()
    dt = time.perf_counter() - t0
    ok = exact_inputs and exact_states and worst <= 1e-6 and n_valid > 0 and moved and dt < 120
    record(1, ok, f"inputs exact={exact_inputs} states exact={exact_states} "
                  f"max|dOut|={worst:.2e} on {n_valid} interior coarse cells, {dt:.1f}s")
    assert moved and n_valid > 0
    assert exact_inputs and exact_states
    assert worst <= 1e-6
    assert dt < 120


# ---------------------------------------------------------------------------
# 2. shift-plan algebra

def test_criterion_2_shift_plan_algebra():
    t0 = time.perf_counter()
    pyr = LevelPyramid()
    ref = Pose2(0.0, 0.0)
    rng = np.random.default_rng(2024)
    bad = 0
    steps = 0
    for walk in range(10_000):
        state = CompensationState.start(ref, pyr)
        pos = rng.uniform(-500, 500, size=2)
        prev_p = prev_i1 = None
        for _ in range(int(rng.integers(2, 8))):
            if walk % 2:
                pos = pos + rng.normal(0, 3.0, size=2)
            else:
                pos = pos + rng.integers(-60, 61, size=2) * 0.15
            pose = Pose2(*pos, rng.uniform(-math.pi, math.pi))
            plan, state = plan_step(pose, state, pyr)
            steps += 1
            p = np.array(plan.p_in)
            gd4 = np.array(plan.gd[3])
            i1 = global_index(pose, ref, pyr, 1).as_array()
            ok = bool(np.all((0 <= p) & (p < 27)))
            ok &= all(plan.gd[lvl] == tuple(int(v) for v in gd4 * r)
                      for lvl, r in enumerate((27, 9, 3, 1)))
            if prev_p is not None:
                ok &= bool(np.array_equal(i1 - prev_i1, 27 * gd4 + (p - prev_p)))
            bad += not ok
            prev_p, prev_i1 = p, i1
    dt = time.perf_counter() - t0
    record(2, bad == 0, f"{steps} steps over 10000 walks, {bad} violations, {dt:.1f}s")
    assert bad == 0


# ---------------------------------------------------------------------------
# 3. gradient correctness

def test_criterion_3_gradient_check():
    t0 = time.perf_counter()
    net = Network(gradcheck_config())
    rng = np.random.default_rng(0)
    x = rng.random((3, 1, 12, 12, 1))
    # placement offsets and state shifts at both levels, including negative ones
    plans = [[ShiftPlan((1, 2), ((0, 0), (0, 0)))],
             [ShiftPlan((2, 0), ((3, 0), (1, 0)))],
             [ShiftPlan((0, 1), ((-3, 3), (-1, 1)))]]
    lab = rng.random((3, 1, 8, 8, 4))
    lab[..., 0] = lab[..., 0] > 0.5  # mixes masked and unmasked cells

    def loss():
        out, _ = forward_batch(net, x, plans)
        return sum(composite_loss(out[t], lab[t])[0] for t in (1, 2))

    tape = Tape(3)
    out, _ = forward_batch(net, x, plans, tape=tape)
    grads = backward(net, tape, {t: composite_loss(out[t], lab[t])[1] for t in (1, 2)})
    worst, n = 0.0, 0
    for name, p in net.params.items():
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + 1e-3
            lp = loss()
            p[idx] = old - 1e-3
            lm = loss()
            p[idx] = old
            fd = (lp - lm) / 2e-3
            an = grads[name][idx]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-10))
            n += 1
    dt = time.perf_counter() - t0
    ok = worst < 1e-4 and dt < 300
    record(3, ok, f"{n} parameters, max rel. error {worst:.2e}, {dt:.1f}s")
    assert worst < 1e-4 and dt < 300


# ---------------------------------------------------------------------------
# 4. loss unit values

def test_criterion_4_loss_unit_values():
    checks = []
    checks.append(huber(0.01, 0.02) == 0.5 * 0.01 ** 2 and math.isclose(huber(0.01, 0.02), 5e-5))
    checks.append(huber(0.1, 0.02) == 0.02 * (0.1 - 0.01) and math.isclose(huber(0.1, 0.02), 1.8e-3))
    label = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]])
    pred = label.copy()
    pred[0, 1] = 1.0
    masked, _ = composite_loss(pred, label)
    checks.append(masked == 0.02 and masked == scalar_loss(pred, label))
    rng = np.random.default_rng(4)
    lab = rng.random((6, 6, 4))
    lab[..., 0] = lab[..., 0] > 0.6
    p = rng.random((6, 6, 4))
    base, _ = composite_loss(p, lab)
    free = lab[..., 0] <= 0.7
    q = p.copy()
    q[free, 1] += rng.normal(size=free.sum()) * 10
    q[free, 2] -= 3.0
    moved, _ = composite_loss(q, lab)
    checks.append(moved - base == 0.0)
    record(4, all(checks), f"huber 5e-5 / 1.8e-3, masked velocity 0.02, free-cell perturbation "
                           f"delta {moved - base:.1e}")
    assert all(checks)


# ---------------------------------------------------------------------------
# 5. toy learning

TOY_WARMUP = 4  # frames the recurrent state needs before velocities are observable
HELD_OUT = range(1000, 1010)  # training uses seeds 0..511


def _pooled_eval(ck, scenario_cfg, tmp, name):
    """Infer every held-out episode through the CLI path and pool the counts."""
    builder = ReportBuilder(with_objects=False)
    per_episode = []
    for seed in HELD_OUT:
        seq, pred = tmp / f"seq_{name}_{seed}", tmp / f"pred_{name}_{seed}"
        pipeline.cmd_simulate(scenario_cfg, seq, seed=seed)
        pipeline.cmd_infer(ck, seq, pred)
        per_episode.append(pipeline.cmd_eval(pred, seq, warmup=TOY_WARMUP, objects=False)["aggregate"])
        pdir, _ = pipeline._frame_files(pred, "grids")
        ldir, _ = pipeline._frame_files(seq, "labels")
        for k in sorted(pipeline._frame_indices(ldir)):
            if k >= TOY_WARMUP:
                out = DogmOutput.from_grid(read_dgm1(pdir / pipeline.FRAME_NAME.format(k)))
                builder.add(k, out, read_dgm1(ldir / pipeline.FRAME_NAME.format(k)))
    return builder.report()["aggregate"], per_episode


def test_criterion_5_toy_learning(tmp_path):
    t0 = time.perf_counter()
    cfg = ROOT / "configs" / "toy_train.json"
    res = pipeline.cmd_train(cfg, tmp_path / "run")
    ck = res["checkpoint"]
    still, still_eps = _pooled_eval(ck, ROOT / "configs" / "one_box.json", tmp_path, "still")
    moving, moving_eps = _pooled_eval(ck, ROOT / "configs" / "one_box_moving.json", tmp_path,
                                      "moving")
    dt = time.perf_counter() - t0

    def rel(a, b):
        return abs(a - b) / abs(b) if b else math.inf

    vals = [still["epe_dyn"], still["miou"], moving["epe_dyn"], moving["miou"]]
    defined = all(v is not None for v in vals)
    ok_still = defined and still["epe_dyn"] < 0.05 and still["miou"] > 0.7
    ok_moving = defined and moving["epe_dyn"] < 0.05 and moving["miou"] > 0.7
    ok_rel = defined and rel(moving["epe_dyn"], still["epe_dyn"]) <= 0.1 \
        and rel(moving["miou"], still["miou"]) <= 0.1
    ok = ok_still and ok_moving and ok_rel and res["iterations"] == 2000 and dt < 1800

    def fmt(v):
        return "None" if v is None else f"{v:.4f}"

    print("per-episode (seed, mIoU still/moving, EPE_dyn still/moving):")
    for seed, a, b in zip(HELD_OUT, still_eps, moving_eps):
        print(f"  {seed}: {fmt(a['miou'])}/{fmt(b['miou'])}  {fmt(a['epe_dyn'])}/{fmt(b['epe_dyn'])}")
    record(5, ok, f"held-out seeds {HELD_OUT.start}-{HELD_OUT.stop - 1}: "
                  f"stationary mIoU {fmt(still['miou'])} EPE_dyn {fmt(still['epe_dyn'])} m; "
                  f"moving mIoU {fmt(moving['miou'])} EPE_dyn {fmt(moving['epe_dyn'])} m; "
                  f"{res['iterations']} iterations, {dt / 60:.1f} min")
    assert res["iterations"] == 2000
    assert defined
    assert still["epe_dyn"] < 0.05 and still["miou"] > 0.7
    assert moving["epe_dyn"] < 0.05 and moving["miou"] > 0.7
    assert ok_rel
    assert dt < 1800


# ---------------------------------------------------------------------------
# 6. metric oracles

def test_criterion_6_metric_oracles():
    rng = np.random.default_rng(6)
    cell_bad = 0
    for _ in range(500):
        n = int(rng.integers(1, 12))
        p_o, ve, vn, lve, lvn, lmask = _random_frame(rng, n)
        conf = confusion(p_o, ve, vn, lve, lvn, lmask)
        ref = brute_confusion(p_o, ve, vn, lve, lvn, lmask)
        ok = conf.static.tolist() == ref["s"] and conf.dynamic.tolist() == ref["d"]
        ok &= conf.miou() == brute_miou(ref)
        got, exp = epe_buckets(ve, vn, lve, lvn, lmask), brute_epe(ve, vn, lve, lvn, lmask)
        for k in exp:
            ok &= (got[k] is None) if exp[k] is None else math.isclose(got[k], exp[k], rel_tol=1e-12)
        cell_bad += not ok
    db_bad = 0
    for _ in range(1000):
        n = int(rng.integers(0, 65))
        dim = int(rng.integers(1, 5))
        centers = rng.uniform(-5, 5, size=(int(rng.integers(1, 4)), dim))
        pts = centers[rng.integers(len(centers), size=n)] + rng.normal(0, 1.0, size=(n, dim))
        eps, min_pts = float(rng.uniform(0.3, 2.0)), int(rng.integers(1, 7))
        db_bad += _partition(dbscan(pts, eps, min_pts)) != brute_dbscan(pts, eps, min_pts)
    ok = cell_bad == 0 and db_bad == 0
    record(6, ok, f"cell metrics: {cell_bad}/500 mismatches; DBSCAN: {db_bad}/1000 mismatches")
    assert ok


# ---------------------------------------------------------------------------
# 7. format round trips

def test_criterion_7_round_trips():
    rng = np.random.default_rng(7)
    grid = GridMap(rng.random((17, 23, 4)).astype(np.float32), 0.15, (-3.3, 12.45))
    buf = dgm1_bytes(grid)
    back = dgm1_from_bytes(buf)
    dgm_ok = np.array_equal(back.data, grid.data) and dgm1_bytes(back) == buf \
        and back.origin == grid.origin
    net = Network(gradcheck_config())
    opt = Adam()
    opt.update(net.params, {k: rng.normal(size=v.shape) for k, v in net.params.items()})
    cbuf = checkpoint_bytes(net, opt)
    ck = checkpoint_from_bytes(cbuf)
    ck_ok = checkpoint_bytes(ck.network, ck.optimizer) == cbuf and all(
        np.array_equal(ck.network.params[k], net.params[k]) for k in net.params)
    golden_ok = all(render_grid(golden_grid(), style) == (DATA / name).read_bytes()
                    for style, name in (("occupancy", "golden_occupancy.pgm"),
                                        ("velocity", "golden_velocity.ppm")))
    ok = dgm_ok and ck_ok and golden_ok
    record(7, ok, f"DGM1 bit-exact={dgm_ok}, checkpoint bit-exact={ck_ok}, golden render={golden_ok}")
    assert ok


# ---------------------------------------------------------------------------
# 8. streaming memory

def _long_sequence(path, steps):
    half = 1.7
    walls = ((-half, -half, half, -half), (half, -half, half, half),
             (half, half, -half, half), (-half, half, -half, -half))
    actor = Actor(0.6, 0.45, Trajectory(((-1.0, 0.8), (1.0, 0.8), (-1.0, 0.8)), (1.5, 1.5)))
    ego = Trajectory(((0.075, -0.6), (0.975, -0.6), (0.075, -0.6)), (1.5, 1.5))
    sc = Scenario(walls=walls, actors=(actor,), ego=ego, duration=steps, grid_width=26,
                  sensor=SensorConfig(beams=180))
    pipeline.simulate_to_dir(sc, path)


def _peak_infer(ck, seq, out):
    tracemalloc.start()
    tracemalloc.reset_peak()
    pipeline.cmd_infer(ck, seq, out)
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    return peak


def test_criterion_8_streaming_memory(tmp_path):
    from dogm.nn.checkpoint import save_checkpoint

    net = Network(NetConfig(input_size=54, level_channels=(4, 8, 8, 8), skip_state_channels=(2, 4, 4),
                            bottleneck_channels=8, dropout=0.0))
    save_checkpoint(tmp_path / "net.dgmw", net)
    _long_sequence(tmp_path / "s50", 50)
    _long_sequence(tmp_path / "s500", 500)
    _peak_infer(tmp_path / "net.dgmw", tmp_path / "s50", tmp_path / "warm")  # import/cache warm-up
    p50 = _peak_infer(tmp_path / "net.dgmw", tmp_path / "s50", tmp_path / "o50")
    p500 = _peak_infer(tmp_path / "net.dgmw", tmp_path / "s500", tmp_path / "o500")
    ratio = p500 / p50
    ok = abs(ratio - 1.0) <= 0.10
    record(8, ok, f"peak traced memory 50 steps {p50 / 1e6:.2f} MB, 500 steps {p500 / 1e6:.2f} MB, "
                  f"ratio {ratio:.3f}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
