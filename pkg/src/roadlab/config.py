"""Flat ``section.key=value`` run configuration.

Sections mirror the library's config dataclasses (``train``, ``sim``,
``track``, ``preproc``, ``net``, ``study``) plus ``run`` for the per-command
seed, track count and track length. Unknown keys are rejected. ``resolved()``
renders every key, so a run directory always records the exact settings.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import ConfigError
from .preprocess import Degradation, PreprocConfig
from .simulator import SimConfig, TrackConfig
from .study import StudyConfig
from .trainer import TrainConfig

RUN_DEFAULTS = {"seed": 0, "tracks": 2, "length": 400.0}
NET_DEFAULTS = {"output_scale": 100.0}
# Keys owned by ``run`` or ``net`` rather than their dataclass.
_SKIP = {"train": {"seed"}, "study": {"seed", "n_tracks", "track_length", "output_scale", "channel_mode"},
         "preproc": {"out_width", "out_height", "frame_height", "frame_width"}}
_CLASSES = {"train": TrainConfig, "sim": SimConfig, "track": TrackConfig, "preproc": PreprocConfig,
            "study": StudyConfig}


def _defaults() -> dict:
    out = {"run": dict(RUN_DEFAULTS), "net": dict(NET_DEFAULTS)}
    for sec, cls in _CLASSES.items():
        inst = cls()
        out[sec] = {f.name: getattr(inst, f.name) for f in dataclasses.fields(cls)
                    if f.name not in _SKIP.get(sec, ())}
    return out


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, Degradation):
        return v.label()
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(default, text: str, key: str):
    text = text.strip()
    try:
        if isinstance(default, Degradation):
            return Degradation.parse(text)
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError
            return text.lower() == "true"
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.split(","))
        if default is None:
            return None if text.lower() == "none" else int(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r}") from None


class RunConfig:
    def __init__(self):
        self._values = _defaults()
        self._template = _defaults()

    def keys(self) -> list:
        return [f"{s}.{k}" for s, sec in self._values.items() for k in sec]

    def set(self, key: str, value) -> None:
        sec, _, name = key.partition(".")
        if sec not in self._values or name not in self._values[sec]:
            raise ConfigError(f"unknown config key {key!r}")
        default = self._template[sec][name]
        self._values[sec][name] = _parse(default, value, key) if isinstance(value, str) else value

    def get(self, key: str):
        sec, _, name = key.partition(".")
        try:
            return self._values[sec][name]
        except KeyError:
            raise ConfigError(f"unknown config key {key!r}") from None

    def load_text(self, text: str, source: str = "<config>") -> "RunConfig":
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{source} line {lineno}: expected key=value")
            key, value = line.split("=", 1)
            try:
                self.set(key.strip(), value)
            except ConfigError as exc:
                raise ConfigError(f"{source} line {lineno}: {exc}") from None
        return self

    def load(self, path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        return self.load_text(p.read_text(), str(p))

    def resolved(self) -> str:
        return "".join(f"{s}.{k}={_format(v)}\n" for s, sec in self._values.items() for k, v in sec.items())

    # typed views
    def _build(self, sec, **extra):
        return _CLASSES[sec](**self._values[sec], **extra)

    @property
    def seed(self) -> int:
        return int(self._values["run"]["seed"])

    def train_config(self) -> TrainConfig:
        return self._build("train", seed=self.seed)

    def sim_config(self) -> SimConfig:
        return self._build("sim")

    def track_config(self) -> TrackConfig:
        return self._build("track")

    def preproc_config(self) -> PreprocConfig:
        return self._build("preproc")

    def study_config(self) -> StudyConfig:
        run = self._values["run"]
        return self._build("study", seed=self.seed, n_tracks=int(run["tracks"]), track_length=float(run["length"]),
                           output_scale=float(self._values["net"]["output_scale"]),
                           channel_mode=self._values["preproc"]["channel_mode"])
