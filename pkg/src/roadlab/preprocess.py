"""Sensor frame -> network input.

Raw frames are uint8 ``H x W x C``. LiDAR channels are stored in the order
(intensity, depth, ambient). The network input is float32 ``C x 66 x 258``
(height 66, width 258) with values in [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .datalog import SensorFrame
from .errors import ConfigError, DomainError, GeometryError

OUT_HEIGHT = 66
OUT_WIDTH = 258
DEPTH_MAX = 50.0
CHANNEL_MODES = ("three", "intensity", "depth", "ambient", "rgb")
SINGLE_CHANNEL = {"intensity": 0, "depth": 1, "ambient": 2}

# Simulator frames carry a margin around the default crop so the window can be shifted.
FRAME_HEIGHT = 74
FRAME_WIDTH = 274
CROP_ORIGIN = (4, 8)


def encode_depth(d, depth_max: float = DEPTH_MAX):
    """Map metres to uint8: 0 m -> 255, 50 m -> 0, anything beyond 50 m -> 0.

    Rounds half away from zero. Accepts scalars or arrays; ``inf`` encodes as 0.
    """
    arr = np.asarray(d, dtype=np.float64)
    if np.any(np.isnan(arr)) or np.any(arr < 0):
        raise DomainError("depth must be non-negative")
    with np.errstate(invalid="ignore"):
        lin = 255.0 * (1.0 - arr / depth_max)
    code = np.where(arr > depth_max, 0.0, np.floor(lin + 0.5))
    code = np.clip(code, 0, 255).astype(np.uint8)
    return int(code) if code.ndim == 0 else code


@dataclass(frozen=True)
class Degradation:
    kind: str = "none"  # none | channel_permute | crop_shift | noise
    perm: tuple = (0, 1, 2)
    dx: int = 0
    dy: int = 0
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "channel_permute", "crop_shift", "noise"):
            raise ConfigError(f"unknown degradation {self.kind!r}")
        if self.kind == "channel_permute" and sorted(self.perm) != list(range(len(self.perm))):
            raise ConfigError(f"not a permutation: {self.perm}")
        if self.sigma < 0:
            raise ConfigError("noise sigma must be non-negative")

    @classmethod
    def parse(cls, text: str | None) -> "Degradation":
        """Parse ``none``, ``bgr``, ``perm:2,1,0``, ``shift:dx,dy`` or ``noise:sigma``."""
        if text is None or text in ("", "none"):
            return cls()
        if text == "bgr":
            return cls("channel_permute", perm=(2, 1, 0))
        head, _, arg = text.partition(":")
        try:
            if head == "perm":
                return cls("channel_permute", perm=tuple(int(v) for v in arg.split(",")))
            if head == "shift":
                dx, dy = (int(v) for v in arg.split(","))
                return cls("crop_shift", dx=dx, dy=dy)
            if head == "noise":
                return cls("noise", sigma=float(arg))
        except ValueError:
            pass
        raise ConfigError(f"cannot parse degradation {text!r}")

    def label(self) -> str:
        if self.kind == "channel_permute":
            return "bgr" if self.perm == (2, 1, 0) else "perm:" + ",".join(map(str, self.perm))
        if self.kind == "crop_shift":
            return f"shift:{self.dx},{self.dy}"
        if self.kind == "noise":
            return f"noise:{self.sigma:g}"
        return "none"


@dataclass(frozen=True)
class PreprocConfig:
    depth_max: float = DEPTH_MAX
    out_width: int = OUT_WIDTH
    out_height: int = OUT_HEIGHT
    frame_height: int = FRAME_HEIGHT
    frame_width: int = FRAME_WIDTH
    crop_origin: tuple = CROP_ORIGIN
    channel_mode: str = "three"
    degradation: Degradation = field(default_factory=Degradation)

    def __post_init__(self):
        if self.channel_mode not in CHANNEL_MODES:
            raise ConfigError(f"unknown channel mode {self.channel_mode!r}")
        if (self.out_width, self.out_height) != (OUT_WIDTH, OUT_HEIGHT):
            raise ConfigError("network input is fixed to 258 x 66")
        _check_window(self.crop_origin, self.frame_height, self.frame_width)

    @property
    def channels(self) -> int:
        return 1 if self.channel_mode in SINGLE_CHANNEL else 3


def _check_window(origin, frame_h, frame_w):
    r, c = origin
    if r < 0 or c < 0 or r + OUT_HEIGHT > frame_h or c + OUT_WIDTH > frame_w:
        raise GeometryError(
            f"crop at (row={r}, col={c}) of size {OUT_HEIGHT}x{OUT_WIDTH} leaves the {frame_h}x{frame_w} frame")


def shift_crop(cfg: PreprocConfig, dx: int, dy: int) -> PreprocConfig:
    """Translate the crop window by ``dx`` columns and ``dy`` rows."""
    origin = (cfg.crop_origin[0] + dy, cfg.crop_origin[1] + dx)
    _check_window(origin, cfg.frame_height, cfg.frame_width)
    return replace(cfg, crop_origin=origin)


def downscale_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centres; uint8 in, uint8 out."""
    h, w, _ = pixels.shape
    if (h, w) == (out_h, out_w):
        return pixels

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    img = pixels.astype(np.float64)
    top = img[y0][:, x0] * (1 - fx)[None, :, None] + img[y0][:, x1] * fx[None, :, None]
    bot = img[y1][:, x0] * (1 - fx)[None, :, None] + img[y1][:, x1] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def crop_frame(frame: SensorFrame, cfg: PreprocConfig) -> np.ndarray:
    """Crop (with any crop-shift degradation) and select channels; returns uint8 ``C x 66 x 258``."""
    pixels = frame.pixels
    if frame.modality == "camera" and pixels.shape[:2] != (cfg.frame_height, cfg.frame_width):
        pixels = downscale_bilinear(pixels, cfg.frame_height, cfg.frame_width)
    deg = cfg.degradation
    r, c = cfg.crop_origin
    if deg.kind == "crop_shift":
        r, c = r + deg.dy, c + deg.dx
    h, w, ch = pixels.shape
    if r < 0 or c < 0 or r + OUT_HEIGHT > h or c + OUT_WIDTH > w:
        raise GeometryError(f"crop at (row={r}, col={c}) leaves the {h}x{w} frame")
    win = pixels[r:r + OUT_HEIGHT, c:c + OUT_WIDTH, :]
    if deg.kind == "channel_permute":
        if len(deg.perm) != ch:
            raise ConfigError(f"permutation {deg.perm} does not match {ch} channels")
        win = win[:, :, list(deg.perm)]
    mode = cfg.channel_mode
    if mode in SINGLE_CHANNEL:
        if frame.modality != "lidar" or ch != 3:
            raise ConfigError(f"channel mode {mode!r} needs a 3-channel lidar frame")
        win = win[:, :, SINGLE_CHANNEL[mode]:SINGLE_CHANNEL[mode] + 1]
    elif ch != 3:
        raise ConfigError(f"channel mode {mode!r} needs 3 channels, frame has {ch}")
    elif mode == "rgb" and frame.modality != "camera":
        raise ConfigError("channel mode 'rgb' needs a camera frame")
    return np.ascontiguousarray(win.transpose(2, 0, 1))


def prepare_input(frame: SensorFrame, cfg: PreprocConfig, rng=None) -> np.ndarray:
    x = crop_frame(frame, cfg).astype(np.float32) / np.float32(255.0)
    if cfg.degradation.kind == "noise" and cfg.degradation.sigma > 0:
        if rng is None:
            raise ConfigError("noise degradation needs an rng")
        x = x + rng.normal(0.0, cfg.degradation.sigma, size=x.shape).astype(np.float32)
        x = np.clip(x, 0.0, 1.0, out=x)
    return x


def prepare_batch(frames, cfg: PreprocConfig, rng=None) -> np.ndarray:
    return np.stack([prepare_input(f, cfg, rng) for f in frames])


def inverse_permutation(perm) -> tuple:
    inv = [0] * len(perm)
    for i, p in enumerate(perm):
        inv[p] = i
    return tuple(inv)
