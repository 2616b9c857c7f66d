"""Modified PilotNet: five unpadded convolutions and four linear layers.

Every layer except the last two linear ones is followed by batch norm, and
batch norm always precedes LeakyReLU. The last linear layer has no
activation and outputs the steering-wheel angle in degrees.

With a 66 x 258 input the four stride-2 convolutions leave a 1-pixel-high
map, so the 3x3 fifth convolution cannot fit vertically. Kernels are clamped
per axis to the extent they see (1x3 there), which keeps the filter counts
and gives the chain 31x127 -> 14x62 -> 5x29 -> 1x13 -> 1x11 and a flatten
width of 64 * 11 = 704.

Parameters are stored as float32; all arithmetic runs in float64 and the
output is returned in the parameters' dtype.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CheckpointError, ConfigError, ShapeError, StateError
from .numerics import Rng, load_tensor, save_tensor

BN_KEYS = ("gamma", "beta", "running_mean", "running_var")


@dataclass(frozen=True)
class NetworkConfig:
    conv: tuple = ((24, 5, 2), (24, 5, 2), (24, 5, 2), (48, 5, 2), (64, 3, 1))
    fc: tuple = (100, 50, 10, 1)
    fc_bn_layers: int = 2  # batch norm after the first two linear layers only
    channels: int = 3
    height: int = 66
    width: int = 258
    alpha: float = 0.01
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    output_scale: float = 1.0  # fixed multiplier on the last layer, e.g. to emit degrees

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise ConfigError(f"input channels must be 1 or 3, got {self.channels}")
        if not self.fc or self.fc[-1] != 1:
            raise ConfigError("last linear layer must have one output")
        if not 0 <= self.fc_bn_layers <= len(self.fc):
            raise ConfigError("fc_bn_layers out of range")
        if not self.output_scale > 0:
            raise ConfigError("output_scale must be positive")
        self.conv_geometry()

    def conv_geometry(self) -> list[tuple]:
        """Per conv layer: (in_channels, filters, kh, kw, stride, h_in, w_in, h_out, w_out)."""
        out = []
        c, h, w = self.channels, self.height, self.width
        for filters, k, s in self.conv:
            kh, kw = min(k, h), min(k, w)
            ho, wo = (h - kh) // s + 1, (w - kw) // s + 1
            if ho < 1 or wo < 1:
                raise ConfigError(f"input {self.height}x{self.width} too small for the conv stack")
            out.append((c, filters, kh, kw, s, h, w, ho, wo))
            c, h, w = filters, ho, wo
        return out

    @property
    def flatten_width(self) -> int:
        g = self.conv_geometry()[-1]
        return g[1] * g[7] * g[8]

    def spatial_chain(self) -> list[tuple]:
        return [(g[7], g[8]) for g in self.conv_geometry()]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["conv"] = tuple(tuple(int(v) for v in layer) for layer in d["conv"])
        d["fc"] = tuple(int(v) for v in d["fc"])
        return cls(**d)


def shrunken_config(channels=3, height=12, width=20) -> NetworkConfig:
    """Narrow variant used for finite-difference gradient checks."""
    return NetworkConfig(conv=((3, 5, 2), (3, 5, 2), (3, 5, 2), (4, 5, 2), (4, 3, 1)),
                         fc=(6, 4, 3, 1), channels=channels, height=height, width=width)


@dataclass
class ModelParams:
    cfg: NetworkConfig
    tensors: dict = field(default_factory=dict)

    def trainable(self) -> list[str]:
        return [k for k in self.tensors if not k.endswith(("running_mean", "running_var"))]

    def copy(self, dtype=None) -> "ModelParams":
        return ModelParams(self.cfg, {k: np.array(v, dtype=dtype or v.dtype) for k, v in self.tensors.items()})

    def __getitem__(self, key):
        return self.tensors[key]

    def expected_shapes(self) -> dict:
        return param_shapes(self.cfg)


def layer_names(cfg: NetworkConfig) -> tuple[list[str], list[str]]:
    return [f"conv{i + 1}" for i in range(len(cfg.conv))], [f"fc{i + 1}" for i in range(len(cfg.fc))]


def param_shapes(cfg: NetworkConfig) -> dict:
    shapes = {}
    convs, fcs = layer_names(cfg)
    for name, (cin, f, kh, kw, *_rest) in zip(convs, cfg.conv_geometry()):
        shapes[f"{name}.weight"] = (f, cin, kh, kw)
        shapes[f"{name}.bias"] = (f,)
        for k in BN_KEYS:
            shapes[f"{name}.bn.{k}"] = (f,)
    fan_in = cfg.flatten_width
    for i, (name, width) in enumerate(zip(fcs, cfg.fc)):
        shapes[f"{name}.weight"] = (width, fan_in)
        shapes[f"{name}.bias"] = (width,)
        if i < cfg.fc_bn_layers:
            for k in BN_KEYS:
                shapes[f"{name}.bn.{k}"] = (width,)
        fan_in = width
    return shapes


def init_params(cfg: NetworkConfig, rng: Rng) -> ModelParams:
    """Kaiming fan-in normal weights (LeakyReLU gain), zero biases, identity batch norm."""
    gain2 = 2.0 / (1.0 + cfg.alpha ** 2)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            w = rng.normal(0.0, math.sqrt(gain2 / fan_in), size=shape)
            tensors[name] = w.astype(np.float32)
        elif name.endswith(("gamma", "running_var")):
            tensors[name] = np.ones(shape, np.float32)
        else:
            tensors[name] = np.zeros(shape, np.float32)
    return ModelParams(cfg, tensors)


# --------------------------------------------------------------------------- layer kernels


def _windows(x, kh, kw, s):
    v = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    n, c, ho, wo = v.shape[:4]
    return v.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw), ho, wo


def conv_forward(x, w, b, s):
    """Returns the output and the im2col matrix (reused by the backward pass)."""
    n = x.shape[0]
    f, _, kh, kw = w.shape
    cols, ho, wo = _windows(x, kh, kw, s)
    out = cols @ w.reshape(f, -1).T + b
    return out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2), cols


def conv_backward(x_shape, cols, w, s, dout, need_dx=True):
    n, c, h, wd = x_shape
    f, _, kh, kw = w.shape
    ho, wo = dout.shape[2:]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (w.reshape(f, -1).T @ d2.T).reshape(c, kh, kw, n, ho, wo)
    dx = np.zeros((c, n, h, wd))
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[:, i, j]
    return np.ascontiguousarray(dx.transpose(1, 0, 2, 3)), dw, db


def _bn_axes(x):
    return (0, 2, 3) if x.ndim == 4 else (0,)


def _bc(v, x):
    return v.reshape(1, -1, 1, 1) if x.ndim == 4 else v.reshape(1, -1)


def bn_forward_train(x, gamma, beta, eps):
    axes = _bn_axes(x)
    m = x.size // x.shape[1]
    if m < 2:
        raise ShapeError("train-mode batch norm needs more than one value per channel")
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - _bc(mean, x)) * _bc(inv_std, x)
    return xhat * _bc(gamma, x) + _bc(beta, x), (xhat, inv_std, mean, var, m)


def bn_forward_eval(x, gamma, beta, mean, var, eps):
    inv_std = 1.0 / np.sqrt(var + eps)
    return (x - _bc(mean, x)) * _bc(inv_std * gamma, x) + _bc(beta, x)


def bn_backward(dy, gamma, cache):
    xhat, inv_std, _, _, m = cache
    axes = _bn_axes(dy)
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * _bc(gamma, dy)
    dx = _bc(inv_std / m, dy) * (m * dxhat - _bc(dxhat.sum(axis=axes), dy)
                                  - xhat * _bc((dxhat * xhat).sum(axis=axes), dy))
    return dx, dgamma, dbeta


def leaky_relu(x, alpha):
    return np.where(x > 0, x, alpha * x)


def leaky_relu_grad(x, alpha):
    return np.where(x > 0, 1.0, alpha)


# --------------------------------------------------------------------------- network


class PilotNet:
    """Stateful wrapper: ``forward(mode="train")`` caches what ``backward`` needs."""

    def __init__(self, params: ModelParams):
        self.params = params
        self.cfg = params.cfg
        self._cache = None

    def _p(self, key):
        return self.params.tensors[key].astype(np.float64, copy=False)

    def _check_input(self, x):
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1:] != (cfg.channels, cfg.height, cfg.width):
            raise ShapeError(f"expected N x {cfg.channels} x {cfg.height} x {cfg.width} input, got {x.shape}")

    def forward(self, x, mode="eval", update_stats=True) -> np.ndarray:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = np.asarray(x)
        self._check_input(x)
        cfg = self.cfg
        train = mode == "train"
        h = x.astype(np.float64)
        cache = []
        convs, fcs = layer_names(cfg)
        for name, geo in zip(convs, cfg.conv_geometry()):
            s = geo[4]
            z, cols = conv_forward(h, self._p(f"{name}.weight"), self._p(f"{name}.bias"), s)
            bn_cache = None
            if train:
                a, bn_cache = bn_forward_train(z, self._p(f"{name}.bn.gamma"), self._p(f"{name}.bn.beta"), cfg.bn_eps)
                if update_stats:
                    self._update_running(name, bn_cache)
            else:
                a = bn_forward_eval(z, self._p(f"{name}.bn.gamma"), self._p(f"{name}.bn.beta"),
                                    self._p(f"{name}.bn.running_mean"), self._p(f"{name}.bn.running_var"),
                                    cfg.bn_eps)
            cache.append((name, "conv", (h.shape, cols if train else None), s, bn_cache, a))
            h = leaky_relu(a, cfg.alpha)
        flat_shape = h.shape
        h = h.reshape(h.shape[0], -1)
        for i, name in enumerate(fcs):
            z = h @ self._p(f"{name}.weight").T + self._p(f"{name}.bias")
            last = i == len(fcs) - 1
            bn_cache = None
            a = z
            if i < cfg.fc_bn_layers:
                if train:
                    a, bn_cache = bn_forward_train(z, self._p(f"{name}.bn.gamma"), self._p(f"{name}.bn.beta"),
                                                   cfg.bn_eps)
                    if update_stats:
                        self._update_running(name, bn_cache)
                else:
                    a = bn_forward_eval(z, self._p(f"{name}.bn.gamma"), self._p(f"{name}.bn.beta"),
                                        self._p(f"{name}.bn.running_mean"), self._p(f"{name}.bn.running_var"),
                                        cfg.bn_eps)
            cache.append((name, "fc", h, None, bn_cache, a))
            h = a if last else leaky_relu(a, cfg.alpha)
        if cfg.output_scale != 1.0:
            h = h * cfg.output_scale
        self._cache = (cache, flat_shape) if train else None
        out_dtype = np.float64 if self.params.tensors[f"{fcs[-1]}.weight"].dtype == np.float64 else np.float32
        return h.astype(out_dtype)

    def preactivations(self) -> list:
        """Inputs to every activation from the last train-mode forward."""
        if self._cache is None:
            raise StateError("no cached train-mode forward")
        return [entry[5] for entry in self._cache[0]]

    def _update_running(self, name, bn_cache):
        _, _, mean, var, m = bn_cache
        mom = self.cfg.bn_momentum
        t = self.params.tensors
        rm, rv = f"{name}.bn.running_mean", f"{name}.bn.running_var"
        unbiased = var * (m / (m - 1))
        t[rm] = ((1 - mom) * t[rm].astype(np.float64) + mom * mean).astype(t[rm].dtype)
        t[rv] = ((1 - mom) * t[rv].astype(np.float64) + mom * unbiased).astype(t[rv].dtype)

    def backward(self, upstream) -> dict:
        """Gradients (float64) of ``sum(output * upstream)`` for every trainable tensor."""
        if self._cache is None:
            raise StateError("backward needs a preceding forward(mode='train')")
        cache, flat_shape = self._cache
        cfg = self.cfg
        grads = {}
        g = np.asarray(upstream, dtype=np.float64).reshape(-1, 1) * cfg.output_scale
        n_fc = len(cfg.fc)
        for idx in range(len(cache) - 1, -1, -1):
            name, kind, inp, s, bn_cache, a = cache[idx]
            is_last = kind == "fc" and idx == len(cache) - 1
            if not is_last:
                g = g * leaky_relu_grad(a, cfg.alpha)
            if bn_cache is not None:
                g, grads[f"{name}.bn.gamma"], grads[f"{name}.bn.beta"] = bn_backward(
                    g, self._p(f"{name}.bn.gamma"), bn_cache)
            if kind == "fc":
                w = self._p(f"{name}.weight")
                grads[f"{name}.weight"] = g.T @ inp
                grads[f"{name}.bias"] = g.sum(axis=0)
                g = g @ w
                if idx == len(cache) - n_fc:
                    g = g.reshape(flat_shape)
            else:
                x_shape, cols = inp
                g, grads[f"{name}.weight"], grads[f"{name}.bias"] = conv_backward(
                    x_shape, cols, self._p(f"{name}.weight"), s, g, need_dx=idx > 0)
        return {k: grads[k] for k in self.params.trainable()}


def forward(params: ModelParams, x, mode="eval") -> np.ndarray:
    return PilotNet(params).forward(x, mode)


def predict(params: ModelParams, x, batch_size=64) -> np.ndarray:
    """Eval-mode predictions as a flat float64 vector."""
    net = PilotNet(params)
    out = [net.forward(x[i:i + batch_size], "eval") for i in range(0, len(x), batch_size)]
    return np.concatenate(out).astype(np.float64).ravel() if out else np.zeros(0)


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(params: ModelParams, path) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, t in params.tensors.items():
        fname = f"{name}.tnsr"
        save_tensor(np.asarray(t, dtype=np.float32), d / fname)
        lines.append(f"{name} {'x'.join(str(v) for v in t.shape)} {fname}\n")
    (d / "manifest.txt").write_text("".join(lines))
    cfg_lines = [f"{k}={_cfg_value(v)}\n" for k, v in params.cfg.to_dict().items()]
    (d / "network.txt").write_text("".join(cfg_lines))
    return d


def _cfg_value(v):
    if isinstance(v, tuple):
        return ";".join(",".join(map(str, x)) if isinstance(x, tuple) else str(x) for x in v)
    return repr(v)


def _parse_network(text: str) -> NetworkConfig:
    raw = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
    try:
        return NetworkConfig(
            conv=tuple(tuple(int(v) for v in layer.split(",")) for layer in raw["conv"].split(";")),
            fc=tuple(int(v) for v in raw["fc"].split(";")),
            fc_bn_layers=int(raw["fc_bn_layers"]), channels=int(raw["channels"]),
            height=int(raw["height"]), width=int(raw["width"]), alpha=float(raw["alpha"]),
            bn_momentum=float(raw["bn_momentum"]), bn_eps=float(raw["bn_eps"]),
            output_scale=float(raw.get("output_scale", "1.0")))
    except (KeyError, ValueError, ConfigError) as exc:
        raise CheckpointError(f"bad network.txt: {exc}") from None


def load_checkpoint(path) -> ModelParams:
    d = Path(path)
    manifest = d / "manifest.txt"
    if not manifest.is_file():
        raise CheckpointError(f"no checkpoint manifest at {manifest}")
    if not (d / "network.txt").is_file():
        raise CheckpointError(f"no network.txt in {d}")
    cfg = _parse_network((d / "network.txt").read_text())
    expected = param_shapes(cfg)
    tensors = {}
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise CheckpointError(f"{manifest} line {lineno}: expected 'name extents file'")
        name, extents, fname = parts
        try:
            dims = tuple(int(v) for v in extents.split("x"))
        except ValueError:
            raise CheckpointError(f"{manifest} line {lineno}: bad extents {extents!r}") from None
        fpath = d / fname
        if not fpath.is_file():
            raise CheckpointError(f"missing tensor file {fpath}")
        t = load_tensor(fpath)
        if t.shape != dims:
            raise CheckpointError(f"{name}: file holds {t.shape}, manifest says {dims}")
        if name not in expected:
            raise CheckpointError(f"unexpected tensor {name}")
        if dims != expected[name]:
            raise CheckpointError(f"{name}: extents {dims} do not fit the network ({expected[name]})")
        tensors[name] = t
    missing = [k for k in expected if k not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks {', '.join(missing)}")
    if any(np.any(tensors[k] <= 0) for k in tensors if k.endswith("running_var")):
        raise CheckpointError("running_var must be positive")
    return ModelParams(cfg, {k: tensors[k] for k in expected})
