"""Training utilities: episodes, batches, Adam and one optimisation step."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from dogm.egomotion import CompensationState, ShiftPlan, plan_step
from dogm.errors import ContractError, NumericError
from dogm.grid import UNKNOWN, LevelPyramid
from dogm.loss import LossWeights, composite_loss
from dogm.nn.network import Network, Tape, backward, forward_batch


@dataclass
class Episode:
    """One simulated sequence in array form.

    ``meas`` is ``(T, W, W)``, ``labels`` ``(T, W, W, 4)`` (occupancy, v_e, v_n,
    dynamic); ``p_in`` ``(T, 2)`` and ``top_index`` ``(T, 2)`` hold the
    compensation quantities of every step.
    """

    meas: np.ndarray
    labels: np.ndarray
    p_in: np.ndarray
    top_index: np.ndarray
    stationary: bool = True
    levels: int = 4

    def __len__(self):
        return self.meas.shape[0]

    @classmethod
    def from_frames(cls, frames, ref, pyramid: LevelPyramid) -> Episode:
        state = CompensationState.start(ref, pyramid)
        p_in, tops = [], []
        for f in frames:
            plan, state = plan_step(f.pose, state, pyramid)
            p_in.append(plan.p_in)
            tops.append(state.prev_index.as_array())
        meas = np.stack([f.measurement.data[..., 0] for f in frames]).astype(np.float32)
        labels = np.stack([f.label.data for f in frames]).astype(np.float32)
        tops = np.array(tops)
        return cls(meas, labels, np.array(p_in), tops, bool(np.all(tops == tops[0])),
                   pyramid.levels)

    def plans(self, start: int, length: int) -> list[ShiftPlan]:
        """Plans for a window; compensation restarts at ``start``."""
        ratios = [3 ** (self.levels - 1) // 3**i for i in range(self.levels)]
        out = []
        for t in range(start, start + length):
            if t == start:
                gd_top = np.zeros(2, dtype=np.int64)
            else:
                gd_top = self.top_index[t] - self.top_index[t - 1]
            gd = tuple((int(gd_top[0] * r), int(gd_top[1] * r)) for r in ratios)
            out.append(ShiftPlan((int(self.p_in[t][0]), int(self.p_in[t][1])), gd))
        return out


def make_episode(frames, ref, pyramid: LevelPyramid) -> Episode:
    return Episode.from_frames(frames, ref, pyramid)


def rotate_window(meas: np.ndarray, labels: np.ndarray, angle_deg: int):
    """Rotate a stationary-ego window about the grid centre.

    Measurements are resampled bilinearly (unknown outside), label masks and
    velocities by nearest neighbour; velocity vectors are rotated with the
    grid.
    """
    if angle_deg % 360 == 0:
        return meas, labels
    t, h, w = meas.shape
    th = math.radians(angle_deg)
    c, s = math.cos(th), math.sin(th)
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    yc, xc = (h - 1) / 2.0, (w - 1) / 2.0
    # inverse rotation: output (x, y) samples input at R(-th) (x, y)
    dx, dy = cc - xc, rr - yc
    src_x = c * dx + s * dy + xc
    src_y = -s * dx + c * dy + yc
    coords = np.stack([src_y, src_x])
    m_out = np.empty_like(meas)
    l_out = np.empty_like(labels)
    for k in range(t):
        m_out[k] = ndimage.map_coordinates(meas[k], coords, order=1, mode="constant",
                                           cval=UNKNOWN)
        for ch in range(labels.shape[-1]):
            l_out[k, ..., ch] = ndimage.map_coordinates(labels[k, ..., ch], coords, order=0,
                                                        mode="constant", cval=0.0)
    ve, vn = l_out[..., 1].copy(), l_out[..., 2].copy()
    l_out[..., 1] = c * ve - s * vn
    l_out[..., 2] = s * ve + c * vn
    return m_out, l_out


@dataclass
class Batch:
    inputs: np.ndarray  # (T, B, S, S, 1) placed canvases
    plans: list  # [T][B]
    labels: np.ndarray  # (n_loss, B, W, W, 4)


def make_batch(episodes, picks, n_in: int, pad: int, loss_steps: int = 2,
               angles=None) -> Batch:
    """Assemble windows ``(episode index, start)`` into a batch."""
    if loss_steps > n_in:
        raise ContractError("loss_steps exceeds sequence length")
    first = episodes[picks[0][0]]
    w = first.meas.shape[1]
    size = w + pad
    bsz = len(picks)
    x = np.full((n_in, bsz, size, size, 1), UNKNOWN, dtype=np.float32)
    labels = np.empty((loss_steps, bsz, w, w, 4), dtype=np.float32)
    plans = [[None] * bsz for _ in range(n_in)]
    for b, (ei, start) in enumerate(picks):
        ep = episodes[ei]
        meas = ep.meas[start:start + n_in]
        lab = ep.labels[start:start + n_in]
        if angles is not None and angles[b] and ep.stationary:
            meas, lab = rotate_window(meas, lab, int(angles[b]))
        for t, pl in enumerate(ep.plans(start, n_in)):
            px, py = pl.p_in
            x[t, b, py:py + w, px:px + w, 0] = meas[t]
            plans[t][b] = pl
        labels[:, b] = lab[n_in - loss_steps:]
    return Batch(x, plans, labels)


@dataclass
class Adam:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_every: int = 100_000
    decay_factor: float = 0.5
    clip_norm: float | None = None
    iteration: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def lr_at(self, iteration: int) -> float:
        return self.lr * self.decay_factor ** (iteration // self.decay_every)

    def update(self, params: dict, grads: dict) -> None:
        if self.clip_norm is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > self.clip_norm:
                grads = {k: g * (self.clip_norm / norm) for k, g in grads.items()}
        lr = self.lr_at(self.iteration)
        self.iteration += 1
        t = self.iteration
        b1c = 1.0 - self.beta1**t
        b2c = 1.0 - self.beta2**t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= (lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)).astype(
                params[name].dtype)


def loss_and_grads(net: Network, batch: Batch, weights: LossWeights, tbptt_window: int = 2,
                   rng=None):
    """Forward with a tape, loss over the last label steps, parameter gradients."""
    n_loss = batch.labels.shape[0]
    window = max(tbptt_window, n_loss)
    t_len = batch.inputs.shape[0]
    if window > t_len:
        raise ContractError(f"tbptt window {window} exceeds sequence length {t_len}")
    tape = Tape(window)
    first = t_len - n_loss
    outs, _ = forward_batch(net, batch.inputs, batch.plans, tape=tape, rng=rng,
                            outputs_from=t_len - window)
    total = 0.0
    lgrads = {}
    for j in range(n_loss):
        t = first + j
        loss, g = composite_loss(outs[t - t_len + window], batch.labels[j], weights)
        total += loss / n_loss
        lgrads[t] = g / n_loss
    grads = backward(net, tape, lgrads, tbptt_window=window)
    return total, grads, outs


def train_step(net: Network, batch: Batch, optimizer: Adam, weights: LossWeights = LossWeights(),
               tbptt_window: int = 2, rng=None) -> float:
    """One Adam update; returns the loss before the update."""
    net.train()
    loss, grads, _ = loss_and_grads(net, batch, weights, tbptt_window, rng)
    gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if not (math.isfinite(loss) and math.isfinite(gnorm)):
        bad = sorted(n for n, g in grads.items() if not np.all(np.isfinite(g)))
        raise NumericError(f"non-finite loss {loss} at iteration {optimizer.iteration}",
                           {"iteration": optimizer.iteration, "loss": loss,
                            "grad_norm": gnorm, "non_finite_grads": bad})
    optimizer.update(net.params, grads)
    return loss


def sample_picks(rng, episodes, batch: int, n_in: int):
    picks = []
    for _ in range(batch):
        ei = int(rng.integers(len(episodes)))
        start = int(rng.integers(len(episodes[ei]) - n_in + 1))
        picks.append((ei, start))
    return picks


__all__ = ["Adam", "Batch", "Episode", "loss_and_grads", "make_batch",
           "make_episode", "rotate_window", "sample_picks", "train_step"]
