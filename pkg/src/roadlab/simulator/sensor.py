"""Synthetic three-channel LiDAR-like frames.

Columns sample azimuth across a frontal fan (column 0 is leftmost), rows
sample elevation with row ``horizon_row`` level with the sensor. A ray either
meets the flat ground, a vertical border wall of height ``wall_height``, or
nothing (sky). Channel order is (intensity, depth, ambient).
"""
from __future__ import annotations

import math

import numpy as np
from scipy.spatial import cKDTree

from ..datalog import SensorFrame
from ..preprocess import FRAME_HEIGHT, FRAME_WIDTH, encode_depth
from .track import Track
from .vehicle import SimConfig, VehicleState

ROAD_REFLECTANCE = 190.0
OFFROAD_REFLECTANCE = 80.0
WALL_REFLECTANCE = 130.0
WINDOW_BEHIND = 40
WINDOW_AHEAD = 260


def ray_angles(cfg: SimConfig, height: int = FRAME_HEIGHT, width: int = FRAME_WIDTH):
    """(azimuth per column, elevation per row) in radians; azimuth is left-positive."""
    step = math.radians(cfg.fov_deg) / cfg.fan_columns
    az = ((width - 1) / 2.0 - np.arange(width)) * step
    el = (cfg.horizon_row - np.arange(height)) * math.radians(cfg.row_step_deg)
    return az, el


def cast_walls(x: float, y: float, directions: np.ndarray, walls: np.ndarray) -> np.ndarray:
    """Horizontal distance along each direction to the first wall segment, inf if none.

    ``walls`` is ``(S, 2, 2)``: S segments, each a pair of (x, y) endpoints.
    """
    if len(walls) == 0:
        return np.full(len(directions), np.inf)
    dx, dy = np.cos(directions)[:, None], np.sin(directions)[:, None]
    a = walls[:, 0, :]
    e = walls[:, 1, :] - a
    apx, apy = (a[:, 0] - x)[None, :], (a[:, 1] - y)[None, :]
    ex, ey = e[:, 0][None, :], e[:, 1][None, :]
    denom = dx * ey - dy * ex
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (apx * ey - apy * ex) / denom
        u = (apx * dy - apy * dx) / denom
    ok = (denom != 0) & (t > 1e-9) & (u >= 0) & (u <= 1)
    return np.where(ok, t, np.inf).min(axis=1)


def render_scene(x: float, y: float, heading: float, walls: np.ndarray, is_road, rng, cfg: SimConfig,
                 t: float = 0.0, height: int = FRAME_HEIGHT, width: int = FRAME_WIDTH) -> SensorFrame:
    """Render from a pose given wall segments and a road classifier ``is_road(points) -> bool mask``."""
    az, el = ray_angles(cfg, height, width)
    dirs = heading + az
    dwall = cast_walls(x, y, dirs, walls)
    tan_el = np.tan(el)
    with np.errstate(divide="ignore"):
        g = np.where(el < 0, cfg.sensor_height / np.maximum(-tan_el, 1e-300), np.inf)
    ground = g[:, None] < dwall[None, :]
    with np.errstate(invalid="ignore"):
        z = cfg.sensor_height + dwall[None, :] * tan_el[:, None]
    wall = ~ground & np.isfinite(dwall)[None, :] & (z >= 0) & (z <= cfg.wall_height)
    sky = ~ground & ~wall
    horiz = np.where(ground, g[:, None], dwall[None, :])
    dist = np.where(sky, np.inf, horiz / np.cos(el)[:, None])
    depth = encode_depth(dist)

    rows, cols = np.nonzero(ground)
    gd = g[rows]
    pts = np.stack([x + gd * np.cos(dirs[cols]), y + gd * np.sin(dirs[cols])], axis=1)
    road = np.zeros(ground.shape, dtype=bool)
    if len(pts):
        road[rows, cols] = is_road(pts)

    base = np.where(road, ROAD_REFLECTANCE, np.where(ground, OFFROAD_REFLECTANCE,
                                                      np.where(wall, WALL_REFLECTANCE, 0.0)))
    atten = 1.0 - 0.4 * np.minimum(np.where(sky, 0.0, dist), 50.0) / 50.0
    speckle = rng.normal(0.0, 1.0, size=(height, width))
    inten = np.where(sky, 0.0, base * atten + cfg.intensity_noise * speckle)
    amb_noise = rng.normal(0.0, 1.0, size=(height, width))
    amb = cfg.ambient_level + np.where(sky, 30.0, np.where(wall, -15.0, 0.0)) + cfg.ambient_noise * amb_noise

    def to_u8(a):
        return np.clip(np.floor(a + 0.5), 0, 255).astype(np.uint8)

    pixels = np.stack([to_u8(inten), depth, to_u8(amb)], axis=2)
    return SensorFrame(t=t, pixels=pixels, modality="lidar")


def track_walls(track: Track, index: int, cfg: SimConfig) -> np.ndarray:
    """Border wall segments on both sides of the track around vertex ``index``."""
    offset = track.width / 2.0 + cfg.shoulder
    lo = max(0, index - WINDOW_BEHIND)
    hi = min(track.n, index + WINDOW_AHEAD)
    segs = []
    for side in (1.0, -1.0):
        border = track.border(side * offset)[lo:hi]
        if len(border) >= 2:
            segs.append(np.stack([border[:-1], border[1:]], axis=1))
    return np.concatenate(segs) if segs else np.zeros((0, 2, 2))


def render_sensor(state: VehicleState, track: Track, rng, cfg: SimConfig, t: float = 0.0,
                  index: int | None = None) -> SensorFrame:
    if index is None:
        index = track.locate(state.x, state.y)
    half = track.width / 2.0
    lo = max(0, index - WINDOW_BEHIND)
    hi = min(track.n - 1, index + WINDOW_AHEAD)
    tree = cKDTree(track.xy[lo:hi])
    heading = track.seg_heading[lo:hi]
    nrm = np.stack([-np.sin(heading), np.cos(heading)], axis=1)

    def is_road(pts):
        _, j = tree.query(pts)
        lat = np.einsum("ij,ij->i", pts - track.xy[lo:hi][j], nrm[j])
        return np.abs(lat) <= half

    return render_scene(state.x, state.y, state.heading, track_walls(track, index, cfg), is_road, rng, cfg, t=t)
