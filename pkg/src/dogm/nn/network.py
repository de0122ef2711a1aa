"""Recurrent U-Net style network predicting a dynamic occupancy grid map.

Structure, per level ``l = 1..L`` (cell size ``a * 3**(l-1)``):

* encoder: a same-padded convolution per level, levels joined by 3x3
  stride-3 convolutions;
* one ConvLSTM in every skip connection (levels ``1..L-1``) and a two-layer
  ConvLSTM bottleneck on level ``L``;
* two mirrored decoders built from stride-3 transposed convolutions. The
  first ends in the occupancy head ``p_o``; the second in ``v_E, v_N``
  (linear) and the auxiliary dynamic-cell probability ``p_d``.

Everything runs on ``(B, H, W, C)`` numpy arrays. Gradients are written by
hand; :func:`backward` replays a :class:`Tape` recorded during
:func:`forward_sequence`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from dogm.egomotion import RecurrentState, ShiftPlan, shift_state
from dogm.errors import ConfigError, ContractError, DataError
from dogm.grid import GridMap, LevelPyramid
from dogm.nn import layers as L

OUTPUT_CHANNELS = ("p_o", "v_e", "v_n", "p_d")


@dataclass(frozen=True)
class NetConfig:
    input_size: int = 108
    level_channels: tuple[int, ...] = (8, 16, 32, 64)
    kernel_size: int = 3
    skip_state_channels: tuple[int, ...] = (4, 8, 16)
    bottleneck_channels: int = 64
    dropout: float = 0.1
    base_cell_size: float = 0.15
    dtype: str = "float32"
    seed: int = 0
    ceil_mode: bool = False
    activation: str = "leaky_relu"
    occupancy_prior: float = 0.5  # initial p_o; sets the occupancy head bias

    def __post_init__(self):
        object.__setattr__(self, "level_channels", tuple(int(c) for c in self.level_channels))
        object.__setattr__(self, "skip_state_channels",
                           tuple(int(c) for c in self.skip_state_channels))
        self.validate()

    def validate(self) -> None:
        levels = len(self.level_channels)
        if levels < 2:
            raise ConfigError("need at least two network levels")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if len(self.skip_state_channels) != levels - 1:
            raise ConfigError("one skip state channel count per level below the bottleneck")
        for lvl, (s, c) in enumerate(zip(self.skip_state_channels, self.level_channels), 1):
            if not 0 < s < c:
                raise ConfigError(f"skip state channels at level {lvl} must be in (0, {c})")
        if min(self.level_channels) < 1 or self.bottleneck_channels < 1:
            raise ConfigError("channel counts must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.activation not in L.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not 0.0 < self.occupancy_prior < 1.0:
            raise ConfigError("occupancy_prior must be in (0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype}")
        if not self.ceil_mode and self.input_size % (3 ** (levels - 1)):
            raise ConfigError(
                f"input_size {self.input_size} not divisible by {3 ** (levels - 1)}; "
                "enable ceil_mode for such sizes")

    @property
    def levels(self) -> int:
        return len(self.level_channels)

    @property
    def pyramid(self) -> LevelPyramid:
        return LevelPyramid.with_levels(self.levels, self.base_cell_size)

    @property
    def pad_cells(self) -> int:
        return self.pyramid.pad_cells

    @property
    def output_size(self) -> int:
        """Side length of the uncompensated grid the network predicts."""
        return self.input_size - self.pad_cells

    @property
    def working_size(self) -> int:
        """Canvas side actually processed (rounded up to the block size in ceil mode)."""
        block = 3 ** (self.levels - 1)
        return -(-self.input_size // block) * block

    def level_extents(self) -> list[int]:
        return [self.working_size // 3**i for i in range(self.levels)]

    def state_layout(self) -> list[tuple[int, int]]:
        """(level, channels) of every recurrent state in network order."""
        skips = [(lvl, c) for lvl, c in enumerate(self.skip_state_channels, 1)]
        return skips + [(self.levels, self.bottleneck_channels)] * 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["level_channels"] = list(self.level_channels)
        d["skip_state_channels"] = list(self.skip_state_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> NetConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys {sorted(unknown)}")
        return cls(**d)


def gradcheck_config(seed: int = 1) -> NetConfig:
    """Two levels, 12x12 canvas, two channels, 64-bit, no dropout.

    The smooth activation keeps central differences away from kinks.
    """
    return NetConfig(input_size=12, level_channels=(2, 2), skip_state_channels=(1,),
                     bottleneck_channels=2, dropout=0.0, dtype="float64", seed=seed,
                     activation="smooth_leaky_relu")


def toy_config(grid_width: int = 53, seed: int = 0) -> NetConfig:
    """Small four-level network for simulator-scale training."""
    return NetConfig(input_size=grid_width + LevelPyramid.with_levels(4).pad_cells,
                     level_channels=(8, 16, 32, 64), skip_state_channels=(4, 8, 16),
                     bottleneck_channels=64, dropout=0.0, seed=seed, occupancy_prior=0.01)


@dataclass
class DogmOutput:
    """Network prediction; arrays are ``(..., H, W)``."""

    p_o: np.ndarray
    v_e: np.ndarray
    v_n: np.ndarray
    p_d: np.ndarray
    cell_size: float | None = None
    origin: tuple[float, float] | None = None

    def stacked(self) -> np.ndarray:
        return np.stack([self.p_o, self.v_e, self.v_n, self.p_d], axis=-1)

    def to_grid(self) -> GridMap:
        if self.p_o.ndim != 2:
            raise ContractError("only unbatched outputs convert to a grid")
        return GridMap(self.stacked().astype(np.float32), self.cell_size or 1.0,
                       self.origin or (0.0, 0.0), OUTPUT_CHANNELS)

    @classmethod
    def from_grid(cls, grid: GridMap) -> DogmOutput:
        d = grid.data
        if d.shape[-1] < 4:
            raise DataError(f"grid has {d.shape[-1]} channels, a prediction needs 4")
        return cls(d[..., 0], d[..., 1], d[..., 2], d[..., 3], grid.cell_size, grid.origin)

    @classmethod
    def from_stacked(cls, arr: np.ndarray, cell_size=None, origin=None) -> DogmOutput:
        return cls(arr[..., 0], arr[..., 1], arr[..., 2], arr[..., 3], cell_size, origin)


def _param_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    k = cfg.kernel_size
    ch = cfg.level_channels
    shapes: dict[str, tuple[int, ...]] = {}
    for lvl in range(1, cfg.levels + 1):
        c = ch[lvl - 1]
        if lvl > 1:
            shapes[f"enc{lvl}.down.w"] = (3, 3, ch[lvl - 2], c)
            shapes[f"enc{lvl}.down.b"] = (c,)
            cin = c
        else:
            cin = 1
        shapes[f"enc{lvl}.conv.w"] = (k, k, cin, c)
        shapes[f"enc{lvl}.conv.b"] = (c,)
    for name, cin, s in _lstm_specs(cfg):
        shapes[f"{name}.wx"] = (k, k, cin, 4 * s)
        shapes[f"{name}.wh"] = (k, k, s, 4 * s)
        shapes[f"{name}.b"] = (4 * s,)
    for dec in ("dec_occ", "dec_vel"):
        below = cfg.bottleneck_channels
        for lvl in range(cfg.levels - 1, 0, -1):
            c = ch[lvl - 1]
            shapes[f"{dec}{lvl}.up.w"] = (3, 3, below, c)
            shapes[f"{dec}{lvl}.up.b"] = (c,)
            shapes[f"{dec}{lvl}.conv_up.w"] = (k, k, c, c)
            shapes[f"{dec}{lvl}.conv_skip.w"] = (k, k, cfg.skip_state_channels[lvl - 1], c)
            shapes[f"{dec}{lvl}.conv.b"] = (c,)
            below = c
    shapes["head_occ.w"] = (1, 1, ch[0], 1)
    shapes["head_occ.b"] = (1,)
    shapes["head_vel.w"] = (1, 1, ch[0], 3)
    shapes["head_vel.b"] = (3,)
    return shapes


def _lstm_specs(cfg: NetConfig):
    """(name, input channels, state channels) per ConvLSTM, in state order."""
    specs = [(f"skip{lvl}", cfg.level_channels[lvl - 1], s)
             for lvl, s in enumerate(cfg.skip_state_channels, 1)]
    specs.append(("bott_a", cfg.level_channels[-1], cfg.bottleneck_channels))
    specs.append(("bott_b", cfg.bottleneck_channels, cfg.bottleneck_channels))
    return specs


class Network:
    """Parameters plus the configuration they belong to."""

    def __init__(self, config: NetConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self.shapes = _param_shapes(config)
        if params is None:
            params = _init_params(config, self.shapes)
        missing = set(self.shapes) - set(params)
        if missing:
            raise ConfigError(f"missing parameters {sorted(missing)}")
        for name, shape in self.shapes.items():
            if tuple(params[name].shape) != shape:
                raise ConfigError(f"parameter {name} has shape {params[name].shape}, "
                                  f"config expects {shape}")
        self.params = {n: np.asarray(params[n], dtype=self.dtype) for n in self.shapes}
        self.training = False
        self.act, self.act_backward = L.ACTIVATIONS[config.activation]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {n: np.zeros_like(p) for n, p in self.params.items()}

    def initial_states(self, batch: int | None = None) -> list[RecurrentState]:
        ext = self.config.level_extents()
        out = []
        for level, c in self.config.state_layout():
            n = ext[level - 1]
            shape = (n, n, c) if batch is None else (batch, n, n, c)
            z = np.zeros(shape, dtype=self.dtype)
            out.append(RecurrentState(level, z, z.copy()))
        return out

    def train(self, mode: bool = True) -> Network:
        self.training = mode
        return self

    def eval(self) -> Network:
        return self.train(False)


def _init_params(cfg: NetConfig, shapes) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".b"):
            p = np.zeros(shape)
            if name.startswith(("skip", "bott")):
                s = shape[0] // 4
                p[s:2 * s] = 1.0  # forget gate bias
            elif name == "head_occ.b":
                q = cfg.occupancy_prior
                p[:] = np.log(q / (1.0 - q))
        else:
            fan_in = shape[0] * shape[1] * shape[2]
            gain = 1.0 if name.startswith(("skip", "bott", "head")) else 2.0
            if name.endswith("conv_up.w") or name.endswith("conv_skip.w"):
                gain = 1.0  # two summed branches feed one activation
            p = rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)
        params[name] = p.astype(cfg.dtype)
    return params


def init(config: NetConfig) -> Network:
    return Network(config)


# ---------------------------------------------------------------------------
# single step


def _lstm_forward(p, name, x, h, c, mask, cache):
    xd = x if mask is None else x * mask
    zx, colsx = L.conv_forward(xd, p[f"{name}.wx"])
    zh, colsh = L.conv_forward(h, p[f"{name}.wh"])
    z = zx + zh + p[f"{name}.b"]
    s = h.shape[-1]
    i = L.sigmoid(z[..., :s])
    f = L.sigmoid(z[..., s:2 * s])
    o = L.sigmoid(z[..., 2 * s:3 * s])
    g = np.tanh(z[..., 3 * s:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    cache[name] = (colsx, colsh, mask, c, i, f, o, g, tc)
    return h_new, c_new


def _lstm_backward(p, grads, name, dh, dc, cache, need_dx=True):
    colsx, colsh, mask, c_prev, i, f, o, g, tc = cache[name]
    do = dh * tc
    dct = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate([dct * g * i * (1.0 - i),
                         dct * c_prev * f * (1.0 - f),
                         do * o * (1.0 - o),
                         dct * i * (1.0 - g * g)], axis=-1)
    dc_prev = dct * f
    dx, dwx, db = L.conv_backward(dz, colsx, p[f"{name}.wx"], need_dx)
    dh_prev, dwh, _ = L.conv_backward(dz, colsh, p[f"{name}.wh"])
    grads[f"{name}.wx"] += dwx
    grads[f"{name}.wh"] += dwh
    grads[f"{name}.b"] += db
    if dx is not None and mask is not None:
        dx = dx * mask
    return dx, dh_prev, dc_prev


def _decoder_forward(p, dec, bottom, skips, levels, cache, act):
    u = bottom
    for lvl in range(levels - 1, 0, -1):
        zu = L.up3_forward(u, p[f"{dec}{lvl}.up.w"], p[f"{dec}{lvl}.up.b"])
        up = act(zu)
        za, cols_a = L.conv_forward(up, p[f"{dec}{lvl}.conv_up.w"])
        zb, cols_b = L.conv_forward(skips[lvl - 1], p[f"{dec}{lvl}.conv_skip.w"])
        z = za + zb + p[f"{dec}{lvl}.conv.b"]
        cache[f"{dec}{lvl}"] = (u, zu, cols_a, cols_b, z)
        u = act(z)
    return u


def _decoder_backward(p, grads, dec, du, levels, cache, dskips, act_b):
    for lvl in range(1, levels):
        u_below, zu, cols_a, cols_b, z = cache[f"{dec}{lvl}"]
        dz = act_b(du, z)
        grads[f"{dec}{lvl}.conv.b"] += dz.reshape(-1, dz.shape[-1]).sum(axis=0)
        dup, dwa, _ = L.conv_backward(dz, cols_a, p[f"{dec}{lvl}.conv_up.w"])
        dsk, dwb, _ = L.conv_backward(dz, cols_b, p[f"{dec}{lvl}.conv_skip.w"])
        grads[f"{dec}{lvl}.conv_up.w"] += dwa
        grads[f"{dec}{lvl}.conv_skip.w"] += dwb
        dskips[lvl - 1] = dsk if dskips[lvl - 1] is None else dskips[lvl - 1] + dsk
        dzu = act_b(dup, zu)
        du, dw, db = L.up3_backward(dzu, u_below, p[f"{dec}{lvl}.up.w"])
        grads[f"{dec}{lvl}.up.w"] += dw
        grads[f"{dec}{lvl}.up.b"] += db
    return du


def _dropout_masks(net: Network, batch_shape, rng):
    cfg = net.config
    if not net.training or cfg.dropout == 0.0:
        return {}
    if rng is None:
        raise ContractError("training mode with dropout needs an rng")
    ext = cfg.level_extents()
    keep = 1.0 - cfg.dropout
    masks = {}
    for (name, cin, _), (level, _) in zip(_lstm_specs(cfg), cfg.state_layout()):
        n = ext[level - 1]
        m = rng.random((batch_shape, n, n, cin)) < keep
        masks[name] = (m / keep).astype(net.dtype)
    return masks


def step_arrays(net: Network, x: np.ndarray, states: list[RecurrentState], rng=None,
                cache: dict | None = None, need_output: bool = True):
    """One forward step on a batched canvas ``x`` of shape ``(B, S, S, 1)``.

    Returns ``(out, new_states)`` with ``out`` of shape ``(B, S, S, 4)``.
    ``cache``, when given, is filled with everything :func:`_step_backward`
    needs. With ``need_output=False`` the (feed-forward) decoders are
    skipped and ``out`` is ``None``.
    """
    cfg = net.config
    p = net.params
    size = cfg.working_size
    if x.ndim != 4 or x.shape[1:] != (cfg.input_size, cfg.input_size, 1):
        raise ContractError(f"input shape {x.shape} does not match config input "
                            f"{cfg.input_size}")
    if len(states) != len(cfg.state_layout()):
        raise ContractError("wrong number of recurrent states")
    if size != cfg.input_size:
        # ceil mode: extend the canvas with unknown cells to the block size
        extra = size - cfg.input_size
        x = np.pad(x, ((0, 0), (0, extra), (0, extra), (0, 0)), constant_values=0.5)
    x = x.astype(net.dtype, copy=False)
    bsz = x.shape[0]
    for st, (level, c) in zip(states, cfg.state_layout()):
        n = cfg.level_extents()[level - 1]
        if st.level != level or st.hidden.shape != (bsz, n, n, c):
            raise ContractError(f"state for level {level} has shape {st.hidden.shape}, "
                                f"expected {(bsz, n, n, c)}")
    if cache is not None and not need_output:
        raise ContractError("a recorded step must compute its output")
    if cache is None:
        cache = {}
    masks = _dropout_masks(net, bsz, rng)
    act = net.act

    # encoder
    feats = []
    h = x
    for lvl in range(1, cfg.levels + 1):
        zd = xb = None
        if lvl > 1:
            zd, xb = L.down3_forward(h, p[f"enc{lvl}.down.w"], p[f"enc{lvl}.down.b"])
            h = act(zd)
        z, cols = L.conv_forward(h, p[f"enc{lvl}.conv.w"], p[f"enc{lvl}.conv.b"])
        cache[f"enc{lvl}"] = (zd, xb, cols, z)
        h = act(z)
        feats.append(h)

    # recurrent layers
    specs = _lstm_specs(cfg)
    new_states = []
    skips = []
    for (name, _, _), st, lvl in zip(specs[:-2], states[:-2], range(1, cfg.levels)):
        hn, cn = _lstm_forward(p, name, feats[lvl - 1], st.hidden, st.cell,
                               masks.get(name), cache)
        new_states.append(RecurrentState(lvl, hn, cn))
        skips.append(hn)
    sa, sb = states[-2], states[-1]
    ha, ca = _lstm_forward(p, "bott_a", feats[-1], sa.hidden, sa.cell, masks.get("bott_a"), cache)
    hb, cb = _lstm_forward(p, "bott_b", ha, sb.hidden, sb.cell, masks.get("bott_b"), cache)
    new_states += [RecurrentState(cfg.levels, ha, ca), RecurrentState(cfg.levels, hb, cb)]
    if not need_output:
        return None, new_states

    # decoders and heads
    u_occ = _decoder_forward(p, "dec_occ", hb, skips, cfg.levels, cache, act)
    u_vel = _decoder_forward(p, "dec_vel", hb, skips, cfg.levels, cache, act)
    zo, cols_o = L.conv_forward(u_occ, p["head_occ.w"], p["head_occ.b"])
    zv, cols_v = L.conv_forward(u_vel, p["head_vel.w"], p["head_vel.b"])
    p_o = L.sigmoid(zo[..., 0])
    p_d = L.sigmoid(zv[..., 2])
    out = np.stack([p_o, zv[..., 0], zv[..., 1], p_d], axis=-1)
    cache["heads"] = (cols_o, cols_v, p_o, p_d)
    if size != cfg.input_size:
        out = out[:, :cfg.input_size, :cfg.input_size]
    return out, new_states


def _step_backward(net: Network, cache: dict, dout: np.ndarray, dstates, grads):
    """Backpropagate one step.

    ``dout`` is ``(B, S, S, 4)`` w.r.t. the canvas outputs; ``dstates`` are
    ``(dh, dc)`` pairs (or ``None``) w.r.t. the states this step produced.
    Returns ``(dh, dc)`` pairs w.r.t. the states the step consumed.
    """
    cfg = net.config
    p = net.params
    size = cfg.working_size
    if size != cfg.input_size:
        extra = size - cfg.input_size
        dout = np.pad(dout, ((0, 0), (0, extra), (0, extra), (0, 0)))
    act_b = net.act_backward
    cols_o, cols_v, p_o, p_d = cache["heads"]
    dzo = (dout[..., 0] * p_o * (1.0 - p_o))[..., None]
    dzv = np.stack([dout[..., 1], dout[..., 2], dout[..., 3] * p_d * (1.0 - p_d)], axis=-1)
    du_occ, dw, db = L.conv_backward(dzo, cols_o, p["head_occ.w"])
    grads["head_occ.w"] += dw
    grads["head_occ.b"] += db
    du_vel, dw, db = L.conv_backward(dzv, cols_v, p["head_vel.w"])
    grads["head_vel.w"] += dw
    grads["head_vel.b"] += db

    dskips = [None] * (cfg.levels - 1)
    dhb = _decoder_backward(p, grads, "dec_occ", du_occ, cfg.levels, cache, dskips, act_b)
    dhb = dhb + _decoder_backward(p, grads, "dec_vel", du_vel, cfg.levels, cache, dskips, act_b)

    def _state_grad(i, like):
        d = dstates[i] if dstates is not None else None
        if d is None:
            return np.zeros_like(like), np.zeros_like(like)
        return d

    specs = _lstm_specs(cfg)
    n_states = len(specs)
    prev = [None] * n_states
    # bottleneck
    ext_h = cache["bott_b"][4]  # gate tensor, same shape as state
    dh_b, dc_b = _state_grad(n_states - 1, ext_h)
    dxa, dh_prev, dc_prev = _lstm_backward(p, grads, "bott_b", dh_b + dhb, dc_b, cache)
    prev[n_states - 1] = (dh_prev, dc_prev)
    dh_a, dc_a = _state_grad(n_states - 2, cache["bott_a"][4])
    dfeat_top, dh_prev, dc_prev = _lstm_backward(p, grads, "bott_a", dh_a + dxa, dc_a, cache)
    prev[n_states - 2] = (dh_prev, dc_prev)
    dfeats = [None] * cfg.levels
    dfeats[-1] = dfeat_top
    for lvl in range(1, cfg.levels):
        name = specs[lvl - 1][0]
        dh_s, dc_s = _state_grad(lvl - 1, cache[name][4])
        dx, dh_prev, dc_prev = _lstm_backward(p, grads, name, dh_s + dskips[lvl - 1], dc_s, cache)
        prev[lvl - 1] = (dh_prev, dc_prev)
        dfeats[lvl - 1] = dx

    # encoder, top-down
    dh = None
    for lvl in range(cfg.levels, 0, -1):
        zd, xb, cols, z = cache[f"enc{lvl}"]
        g = dfeats[lvl - 1] if dh is None else dfeats[lvl - 1] + dh
        dz = act_b(g, z)
        dh_in, dw, db = L.conv_backward(dz, cols, p[f"enc{lvl}.conv.w"], need_dx=lvl > 1)
        grads[f"enc{lvl}.conv.w"] += dw
        grads[f"enc{lvl}.conv.b"] += db
        if lvl > 1:
            dzd = act_b(dh_in, zd)
            dh, dw, db = L.down3_backward(dzd, xb, p[f"enc{lvl}.down.w"])
            grads[f"enc{lvl}.down.w"] += dw
            grads[f"enc{lvl}.down.b"] += db
    return prev


# ---------------------------------------------------------------------------
# sequences


def _shift_batch(states, plans, levels):
    """Per-sample state shifting for a batch of independent sequences."""
    if all(pl.is_stationary() for pl in plans):
        return states
    out = []
    for st in states:
        if st.level is None or not 1 <= st.level <= levels:
            raise ContractError(f"recurrent state has invalid level tag {st.level!r}")
        h = st.hidden.copy()
        c = st.cell.copy()
        for b, pl in enumerate(plans):
            gd = pl.gd[st.level - 1]
            if gd != (0, 0):
                h[b] = shift_state(st.hidden[b], gd)
                c[b] = shift_state(st.cell[b], gd)
        out.append(RecurrentState(st.level, h, c))
    return out


def _unshift_batch(dstates, plans, layout):
    if all(pl.is_stationary() for pl in plans):
        return dstates
    out = []
    for (dh, dc), (level, _) in zip(dstates, layout):
        dh = dh.copy()
        dc = dc.copy()
        for b, pl in enumerate(plans):
            ge, gn = pl.gd[level - 1]
            if (ge, gn) != (0, 0):
                dh[b] = shift_state(dh[b], (-ge, -gn))
                dc[b] = shift_state(dc[b], (-ge, -gn))
        out.append((dh, dc))
    return out


def crop_outputs(out: np.ndarray, plans, size: int) -> np.ndarray:
    """Cut the uncompensated ``size x size`` window out of each canvas."""
    res = np.empty(out.shape[:1] + (size, size) + out.shape[3:], dtype=out.dtype)
    for b, pl in enumerate(plans):
        px, py = pl.p_in
        res[b] = out[b, py:py + size, px:px + size]
    return res


def uncrop_grads(dcrop: np.ndarray, plans, canvas: int) -> np.ndarray:
    res = np.zeros(dcrop.shape[:1] + (canvas, canvas) + dcrop.shape[3:], dtype=dcrop.dtype)
    size = dcrop.shape[1]
    for b, pl in enumerate(plans):
        px, py = pl.p_in
        res[b, py:py + size, px:px + size] = dcrop[b]
    return res


@dataclass
class Tape:
    """Forward record of the last ``window`` steps of a sequence."""

    window: int
    steps: list = field(default_factory=list)
    length: int = 0

    def __post_init__(self):
        if self.window < 1:
            raise ContractError("tape window must be >= 1")


def forward_batch(net: Network, inputs: np.ndarray, plans, states=None, tape: Tape | None = None,
                  rng=None, outputs_from: int = 0):
    """Run ``T`` steps on ``inputs`` of shape ``(T, B, S, S, 1)``.

    ``plans[t][b]`` is the shift plan of sample ``b`` at step ``t``; it is
    applied to the carried states before the step. Returns
    ``(outputs, states)`` where outputs are cropped, ``(T - k, B, W, W, 4)``
    for the steps ``k = outputs_from .. T-1``; earlier steps only advance the
    recurrent states. Recorded steps always produce outputs.
    """
    cfg = net.config
    t_len, bsz = inputs.shape[:2]
    if len(plans) != t_len or any(len(pl) != bsz for pl in plans):
        raise ContractError("plans do not align with inputs")
    if states is None:
        states = net.initial_states(bsz)
    outs = []
    first_rec = t_len - tape.window if tape is not None else t_len
    if not 0 <= outputs_from <= min(first_rec, t_len):
        raise ContractError(f"outputs_from {outputs_from} must lie in [0, {min(first_rec, t_len)}]")
    for t in range(t_len):
        states = _shift_batch(states, plans[t], cfg.levels)
        cache = {} if t >= first_rec else None
        out, states = step_arrays(net, inputs[t], states, rng, cache, t >= outputs_from)
        if out is not None:
            outs.append(crop_outputs(out, plans[t], cfg.output_size))
        if cache is not None:
            tape.steps.append((cache, plans[t]))
    if tape is not None:
        tape.length = t_len
    if not outs:
        return np.zeros((0, bsz, cfg.output_size, cfg.output_size, 4), net.dtype), states
    return np.stack(outs), states


def backward(net: Network, tape: Tape | None, loss_grads, tbptt_window: int | None = None):
    """Parameter gradients from per-step output gradients.

    ``loss_grads`` maps a step index (negative indices count from the end)
    to the gradient ``(B, W, W, 4)`` w.r.t. that step's cropped outputs.
    Backpropagation runs through the last ``tbptt_window`` steps; gradients
    flowing into older states are dropped.
    """
    if tape is None or not tape.steps:
        raise ContractError("backward needs a tape recorded by forward_sequence")
    window = tape.window if tbptt_window is None else tbptt_window
    if window > len(tape.steps):
        raise ContractError(f"tbptt window {window} exceeds recorded steps {len(tape.steps)}")
    cfg = net.config
    grads = net.zero_grads()
    norm = {}
    for k, g in loss_grads.items():
        k = k + tape.length if k < 0 else k
        norm[k] = g
    dstates = None
    for j in range(len(tape.steps) - 1, len(tape.steps) - 1 - window, -1):
        t = tape.length - len(tape.steps) + j
        cache, plans = tape.steps[j]
        g = norm.get(t)
        if g is None:
            first = cache["heads"][2]
            dout = np.zeros(first.shape + (4,), dtype=net.dtype)
        else:
            dout = uncrop_grads(np.asarray(g, dtype=net.dtype), plans, cfg.input_size)
        prev = _step_backward(net, cache, dout, dstates, grads)
        dstates = _unshift_batch(prev, plans, cfg.state_layout())
    return grads


def step(net: Network, placed: GridMap, states: list[RecurrentState] | None = None,
         p_in=(0, 0)) -> tuple[DogmOutput, list[RecurrentState]]:
    """Single unbatched step on a placed canvas; output cropped at ``p_in``."""
    cfg = net.config
    if states is None:
        states = net.initial_states()
    batched = [RecurrentState(s.level, s.hidden[None], s.cell[None]) for s in states]
    plan = ShiftPlan(tuple(p_in), tuple((0, 0) for _ in range(cfg.levels)))
    out, new = step_arrays(net, placed.data[None], batched)
    out = crop_outputs(out, [plan], cfg.output_size)[0]
    origin = (placed.origin[0] + p_in[0] * placed.cell_size,
              placed.origin[1] + p_in[1] * placed.cell_size)
    new = [RecurrentState(s.level, s.hidden[0], s.cell[0]) for s in new]
    return DogmOutput.from_stacked(out, placed.cell_size, origin), new


def forward_sequence(net: Network, inputs: list[GridMap], plans: list[ShiftPlan],
                     states=None, tape: Tape | None = None) -> list[DogmOutput]:
    """Unbatched sequence: shift states per plan, then step, for every input."""
    if len(inputs) != len(plans):
        raise ContractError(f"{len(inputs)} inputs but {len(plans)} plans")
    if states is not None:
        states = [RecurrentState(s.level, s.hidden[None], s.cell[None]) for s in states]
    x = np.stack([g.data for g in inputs])[:, None]
    outs, _ = forward_batch(net, x, [[pl] for pl in plans], states, tape)
    res = []
    for g, pl, o in zip(inputs, plans, outs):
        origin = (g.origin[0] + pl.p_in[0] * g.cell_size, g.origin[1] + pl.p_in[1] * g.cell_size)
        res.append(DogmOutput.from_stacked(o[0], g.cell_size, origin))
    return res
