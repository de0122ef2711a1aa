"""Static renders of grids as binary PGM/PPM images, north up.

Occupancy is gray scale with black = occupied (p = 1), white = free and
mid-gray = unknown. The velocity style draws cells moving faster than the
dynamic threshold in HSV: hue is the velocity direction (east = 0 degrees,
counter-clockwise, so north = 90), saturation is full and value grows
linearly with speed up to ``SPEED_FULL``.
"""

from __future__ import annotations

import colorsys
import math
from pathlib import Path

import numpy as np

from dogm.errors import ConfigError
from dogm.loss import DYNAMIC_SPEED

SPEED_FULL = 5.0  # m/s rendered at full brightness
STYLES = ("occupancy", "velocity")


def _gray(p_o) -> np.ndarray:
    p = np.clip(np.asarray(p_o, dtype=np.float64), 0.0, 1.0)
    return np.floor(255.0 * (1.0 - p) + 0.5).astype(np.uint8)


def velocity_color(v_e: float, v_n: float) -> tuple[int, int, int]:
    """RGB of one moving cell."""
    speed = math.hypot(v_e, v_n)
    hue = (math.degrees(math.atan2(v_n, v_e)) % 360.0) / 360.0
    rgb = colorsys.hsv_to_rgb(hue, 1.0, min(speed / SPEED_FULL, 1.0))
    return tuple(int(math.floor(255.0 * c + 0.5)) for c in rgb)


def occupancy_image(p_o) -> np.ndarray:
    """(H, W) uint8, image row 0 = northern edge."""
    return _gray(p_o)[::-1]


def velocity_image(p_o, v_e, v_n) -> np.ndarray:
    """(H, W, 3) uint8: gray occupancy with moving cells coloured."""
    g = _gray(p_o)
    img = np.repeat(g[..., None], 3, axis=-1)
    rows, cols = np.nonzero(np.hypot(v_e, v_n) > DYNAMIC_SPEED)
    for r, c in zip(rows, cols):
        img[r, c] = velocity_color(float(v_e[r, c]), float(v_n[r, c]))
    return img[::-1]


def pgm_bytes(img: np.ndarray) -> bytes:
    h, w = img.shape
    return b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def ppm_bytes(img: np.ndarray) -> bytes:
    h, w, _ = img.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def _channel(grid, names, fallback):
    for n in names:
        if n in (grid.channel_names or ()):
            return grid.channel(n)
    if fallback < grid.channels:
        return grid.data[..., fallback]
    raise ConfigError(f"grid has no channel among {names}")


def render_grid(grid, style: str = "occupancy") -> bytes:
    """Encode a grid map as PGM (occupancy) or PPM (velocity)."""
    if style not in STYLES:
        raise ConfigError(f"unknown render style {style!r}; choose from {STYLES}")
    p_o = _channel(grid, ("p_o", "occupancy", "p_z"), 0)
    if style == "occupancy":
        return pgm_bytes(occupancy_image(p_o))
    v_e = _channel(grid, ("v_e",), 1)
    v_n = _channel(grid, ("v_n",), 2)
    return ppm_bytes(velocity_image(p_o, v_e, v_n))


def write_render(grid, path, style: str = "occupancy") -> Path:
    path = Path(path)
    path.write_bytes(render_grid(grid, style))
    return path
