"""Procedural tracks: a polyline centreline at fixed arc-length spacing."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ..errors import ConfigError, IngestionError
from ..numerics import Rng


@dataclass(frozen=True)
class TrackConfig:
    width: float = 5.0
    spacing: float = 0.5
    kappa_max: float = 0.1
    curvature_amplitude: float = 0.6  # fraction of kappa_max actually used
    min_wavelength: float = 100.0
    max_wavelength: float = 400.0
    n_modes: int = 8
    v_max: float = 14.0
    v_min: float = 4.0
    lateral_accel: float = 2.5
    brake_horizon: float = 25.0

    def __post_init__(self):
        if not 0 <= self.curvature_amplitude <= 1:
            raise ConfigError("curvature_amplitude must lie in [0, 1]")
        if self.width <= 0 or self.spacing <= 0 or self.kappa_max <= 0:
            raise ConfigError("width, spacing and kappa_max must be positive")


@dataclass
class Track:
    xy: np.ndarray  # (n, 2) centreline
    ref_speed: np.ndarray  # (n,) m/s
    width: float = 5.0
    spacing: float = 0.5
    seed: int | None = None
    kappa: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.xy = np.ascontiguousarray(self.xy, dtype=np.float64)
        self.ref_speed = np.ascontiguousarray(self.ref_speed, dtype=np.float64)
        seg = np.diff(self.xy, axis=0)
        self.seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self.seg_heading = np.arctan2(seg[:, 1], seg[:, 0])
        self._cos = np.cos(self.seg_heading).tolist()
        self._sin = np.sin(self.seg_heading).tolist()
        self._x = self.xy[:, 0].tolist()
        self._y = self.xy[:, 1].tolist()
        self._len = self.seg_len.tolist()
        self._speed = self.ref_speed.tolist()

    @property
    def n(self) -> int:
        return len(self.xy)

    @property
    def length(self) -> float:
        return float(np.sum(self.seg_len))

    @cached_property
    def kdtree(self) -> cKDTree:
        return cKDTree(self.xy)

    def border(self, offset: float) -> np.ndarray:
        """Polyline displaced ``offset`` metres to the left (negative: right) of the centreline."""
        cache = self.__dict__.setdefault("_borders", {})
        if offset not in cache:
            h = np.concatenate([self.seg_heading, self.seg_heading[-1:]])
            normal = np.stack([-np.sin(h), np.cos(h)], axis=1)
            cache[offset] = self.xy + offset * normal
        return cache[offset]

    def measured_curvature(self) -> np.ndarray:
        """Heading change per metre between consecutive segments."""
        dh = np.diff(np.unwrap(self.seg_heading))
        return dh / (0.5 * (self.seg_len[:-1] + self.seg_len[1:]))

    def point_at(self, s: float) -> tuple[float, float, float]:
        """(x, y, heading) at arc length ``s``, clamped to the track."""
        s = min(max(s, 0.0), self.length)
        i = min(int(s / self.spacing), self.n - 2)
        u = (s - i * self.spacing) / self._len[i]
        return (self._x[i] + u * (self._x[i + 1] - self._x[i]),
                self._y[i] + u * (self._y[i + 1] - self._y[i]),
                float(self.seg_heading[i]))

    def locate(self, x: float, y: float) -> int:
        """Index of the segment nearest to (x, y), by global search."""
        _, i = self.kdtree.query((x, y))
        return int(min(i, self.n - 2))

    def project(self, x: float, y: float, hint: int | None = None):
        """Returns (segment index, arc length, signed lateral offset, segment heading).

        Lateral offset is positive to the left of the driving direction. With a
        ``hint`` the search walks locally from that segment; otherwise it
        starts from the nearest centreline point.
        """
        i = self.locate(x, y) if hint is None else hint
        last = self.n - 2
        for _ in range(self.n):
            dx, dy = x - self._x[i], y - self._y[i]
            u = dx * self._cos[i] + dy * self._sin[i]
            if u > self._len[i] and i < last:
                i += 1
            elif u < 0 and i > 0:
                i -= 1
            else:
                break
        dx, dy = x - self._x[i], y - self._y[i]
        u = dx * self._cos[i] + dy * self._sin[i]
        lat = -dx * self._sin[i] + dy * self._cos[i]
        return i, i * self.spacing + u, lat, float(self.seg_heading[i])

    def speed_at(self, i: int) -> float:
        return self._speed[i]

    def lateral_offsets(self, pts: np.ndarray) -> np.ndarray:
        """Signed lateral offsets of many points (nearest-vertex segment normal)."""
        _, idx = self.kdtree.query(pts)
        idx = np.minimum(idx, self.n - 2)
        h = self.seg_heading[idx]
        d = pts - self.xy[idx]
        return -d[:, 0] * np.sin(h) + d[:, 1] * np.cos(h)


def _band_limited_curvature(rng: Rng, s: np.ndarray, cfg: TrackConfig) -> np.ndarray:
    k = np.zeros_like(s)
    if cfg.curvature_amplitude == 0:
        return k
    lo, hi = 1.0 / cfg.max_wavelength, 1.0 / cfg.min_wavelength
    freqs = rng.uniform(lo, hi, size=cfg.n_modes)
    phases = rng.uniform(0.0, 2 * math.pi, size=cfg.n_modes)
    amps = rng.normal(0.0, 1.0, size=cfg.n_modes)
    for f, p, a in zip(freqs, phases, amps):
        k += a * np.sin(2 * math.pi * f * s + p)
    peak = np.max(np.abs(k))
    if peak > 0:
        k *= cfg.curvature_amplitude * cfg.kappa_max / peak
    return k


def reference_speed(kappa: np.ndarray, cfg: TrackConfig) -> np.ndarray:
    """Comfortable speed from lateral acceleration, taken as the minimum over the braking horizon."""
    with np.errstate(divide="ignore"):
        v = np.sqrt(cfg.lateral_accel / np.maximum(np.abs(kappa), 1e-9))
    v = np.clip(v, cfg.v_min, cfg.v_max)
    w = max(1, int(round(cfg.brake_horizon / cfg.spacing)))
    padded = np.concatenate([v, np.full(w, v[-1])])
    windows = np.lib.stride_tricks.sliding_window_view(padded, w + 1)
    return windows.min(axis=1)[: len(v)]


def gen_track(seed: int, length: float, cfg: TrackConfig | None = None) -> Track:
    """Integrate band-limited random curvature into a centreline.

    Each step advances exactly ``spacing`` metres along the mean heading of
    the step, so vertex spacing is uniform to rounding error and the turn per
    metre never exceeds ``kappa_max``.
    """
    cfg = cfg or TrackConfig()
    if length < 100:
        raise ConfigError("track length must be at least 100 m")
    n = int(round(length / cfg.spacing)) + 1
    s = np.arange(n) * cfg.spacing
    rng = Rng(seed)
    kappa = _band_limited_curvature(rng, s, cfg)
    dtheta = 0.5 * (kappa[:-1] + kappa[1:]) * cfg.spacing
    theta = np.concatenate([[0.0], np.cumsum(dtheta)])
    mid = theta[:-1] + 0.5 * dtheta
    steps = cfg.spacing * np.stack([np.cos(mid), np.sin(mid)], axis=1)
    xy = np.concatenate([[[0.0, 0.0]], np.cumsum(steps, axis=0)])
    return Track(xy=xy, ref_speed=reference_speed(kappa, cfg), width=cfg.width,
                 spacing=cfg.spacing, seed=seed, kappa=kappa)


def straight_track(length: float = 200.0, width: float = 5.0, speed: float = 10.0, spacing: float = 0.5) -> Track:
    n = int(round(length / spacing)) + 1
    xy = np.stack([np.arange(n) * spacing, np.zeros(n)], axis=1)
    return Track(xy=xy, ref_speed=np.full(n, speed), width=width, spacing=spacing, kappa=np.zeros(n))


def save_track(track: Track, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write("s,x,y,ref_speed\n")
    for i, ((x, y), v) in enumerate(zip(track.xy, track.ref_speed)):
        buf.write(f"{i * track.spacing!r},{float(x)!r},{float(y)!r},{float(v)!r}\n")
    (d / "track.csv").write_text(buf.getvalue())
    meta = {"width": repr(track.width), "spacing": repr(track.spacing), "length": repr(track.length),
            "points": str(track.n), "seed": "" if track.seed is None else str(track.seed)}
    (d / "meta.txt").write_text("".join(f"{k}={v}\n" for k, v in meta.items()))
    return d


def load_track(directory) -> Track:
    from ..datalog import read_meta

    d = Path(directory)
    meta = read_meta(d / "meta.txt")
    path = d / "track.csv"
    if not path.is_file():
        raise IngestionError("missing file", path=path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "s,x,y,ref_speed":
        raise IngestionError("expected header s,x,y,ref_speed", path=path, row=1)
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rows.append([float(v) for v in line.split(",")])
        except ValueError:
            raise IngestionError("unparseable row", path=path, row=lineno) from None
        if len(rows[-1]) != 4:
            raise IngestionError("expected 4 fields", path=path, row=lineno)
    arr = np.array(rows)
    seed = meta.get("seed")
    return Track(xy=arr[:, 1:3], ref_speed=arr[:, 3], width=float(meta.get("width", 5.0)),
                 spacing=float(meta.get("spacing", 0.5)), seed=int(seed) if seed else None)
