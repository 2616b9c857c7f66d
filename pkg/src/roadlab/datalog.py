"""Driving logs, deployment records and the embedded Table VIII fixture.

A DriveLog directory looks like::

    meta.txt            key=value lines; dt_policy and modality are required
    steering_cmd.csv    t,angle_deg   (policy output)
    steering_eff.csv    t,angle_deg   (wheel angle after the actuator)
    trajectory.csv      t,x,y
    interventions.csv   t,odometer_m,cause
    frames/000000.tnsr  uint8 H x W x C, one per policy tick

Frame ``i`` is stamped with the time of ``steering_cmd`` row ``i``.
Steering angles are steering-wheel degrees, positive to the left.
"""
from __future__ import annotations

import csv
import io
import math
import threading
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import IngestionError
from .numerics import load_tensor, save_tensor

MAX_WHEEL_DEG = 720.0
MAX_TRAJ_SPACING = 5.0
DPI_CAP = 10000.0
INTERVENTION_CAUSES = ("lateral_exit", "heading_exit", "external")
MODALITIES = ("lidar", "camera")
LIDAR_CHANNELS = ("intensity", "depth", "ambient")

STEERING_HEADER = ["t", "angle_deg"]
TRAJECTORY_HEADER = ["t", "x", "y"]
INTERVENTION_HEADER = ["t", "odometer_m", "cause"]
TABLE8_HEADER = ["name", "dpi_m", "mae_traj_m", "failure_rate", "w_eff", "w_on",
                 "mae_steer_deg", "w_off", "combined"]


@dataclass(frozen=True)
class SensorFrame:
    t: float
    pixels: np.ndarray  # uint8, H x W x C
    modality: str = "lidar"

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return self.pixels.shape[2]

    def __post_init__(self):
        p = self.pixels
        if p.dtype != np.uint8 or p.ndim != 3 or p.shape[2] not in (1, 3):
            raise ValueError(f"frame pixels must be uint8 HxWx(1|3), got {p.dtype} {p.shape}")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")


@dataclass(frozen=True)
class InterventionEvent:
    t: float
    odometer: float
    cause: str


@dataclass
class DeploymentRecord:
    name: str
    dpi: float
    mae_trajectory: float
    failure_rate: float
    w_effective: float
    w_on_policy: float
    mae_steer: float
    w_off_policy: float
    combined: float = float("nan")

    def validate(self):
        if not (0.0 <= self.dpi <= DPI_CAP):
            raise ValueError(f"{self.name}: dpi {self.dpi} outside [0, {DPI_CAP}]")
        if not (0.0 <= self.failure_rate <= 1.0):
            raise ValueError(f"{self.name}: failure_rate {self.failure_rate} outside [0, 1]")
        return self


class FrameStore(Sequence):
    """Frames of a log, held in memory or read lazily from ``frames/``."""

    def __init__(self, frames=None, directory=None, count=0, times=None, modality="lidar"):
        self._mem = list(frames) if frames is not None else None
        self._dir = Path(directory) if directory is not None else None
        self._count = len(self._mem) if self._mem is not None else count
        self._times = times
        self._modality = modality
        self._cache = {}
        self._lock = threading.Lock()

    def __len__(self):
        return self._count

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        if i < 0:
            i += self._count
        if not 0 <= i < self._count:
            raise IndexError(i)
        if self._mem is not None:
            return self._mem[i]
        with self._lock:
            if i not in self._cache:
                path = self._dir / frame_filename(i)
                pixels = load_tensor(path)
                if pixels.dtype != np.uint8 or pixels.ndim != 3:
                    raise IngestionError(f"frame must be a uint8 HxWxC tensor, got {pixels.dtype} {pixels.shape}",
                                         path=path)
                t = float(self._times[i]) if self._times is not None and i < len(self._times) else float("nan")
                self._cache[i] = SensorFrame(t, pixels, self._modality)
            return self._cache[i]


@dataclass
class DriveLog:
    steering_cmd: np.ndarray  # (n, 2): t, angle_deg
    steering_eff: np.ndarray
    trajectory: np.ndarray  # (n, 3): t, x, y
    interventions: list = field(default_factory=list)
    frames: Sequence = field(default_factory=list)
    dt_policy: float = 0.1
    modality: str = "lidar"
    meta: dict = field(default_factory=dict)

    @property
    def distance(self) -> float:
        if "distance_m" in self.meta:
            return float(self.meta["distance_m"])
        xy = self.trajectory[:, 1:3]
        return float(np.sum(np.hypot(*np.diff(xy, axis=0).T))) if len(xy) > 1 else 0.0


def frame_filename(i: int) -> str:
    return f"{i:06d}.tnsr"


def _fmt(v: float) -> str:
    return repr(float(v))


def _write_rows(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def save_drivelog(log: DriveLog, directory) -> Path:
    d = Path(directory)
    (d / "frames").mkdir(parents=True, exist_ok=True)
    meta = {"dt_policy": _fmt(log.dt_policy), "modality": log.modality}
    meta.update({k: str(v) for k, v in log.meta.items() if k not in meta})
    (d / "meta.txt").write_text("".join(f"{k}={v}\n" for k, v in meta.items()))
    for name, arr in (("steering_cmd.csv", log.steering_cmd), ("steering_eff.csv", log.steering_eff)):
        _write_rows(d / name, STEERING_HEADER, ([_fmt(t), _fmt(a)] for t, a in arr))
    _write_rows(d / "trajectory.csv", TRAJECTORY_HEADER, ([_fmt(v) for v in row] for row in log.trajectory))
    _write_rows(d / "interventions.csv", INTERVENTION_HEADER,
                ([_fmt(e.t), _fmt(e.odometer), e.cause] for e in log.interventions))
    for i in range(len(log.frames)):
        save_tensor(log.frames[i].pixels, d / "frames" / frame_filename(i))
    return d


def _read_table(path: Path, header, converters):
    if not path.is_file():
        raise IngestionError("missing file", path=path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            got = next(reader)
        except StopIteration:
            raise IngestionError("empty file, expected header", path=path, row=1) from None
        if [h.strip() for h in got] != header:
            raise IngestionError(f"header {got} != {header}", path=path, row=1)
        rows = []
        for lineno, raw in enumerate(reader, start=2):
            if not raw:
                continue
            if len(raw) != len(header):
                raise IngestionError(f"expected {len(header)} fields, got {len(raw)}", path=path, row=lineno)
            try:
                row = tuple(conv(v.strip()) for conv, v in zip(converters, raw))
            except ValueError as exc:
                raise IngestionError(f"unparseable value: {exc}", path=path, row=lineno) from None
            rows.append((lineno, row))
    return rows


def _finite(v: str) -> float:
    x = float(v)
    if not math.isfinite(x):
        raise ValueError(f"non-finite {v!r}")
    return x


def _cause(v: str) -> str:
    if v not in INTERVENTION_CAUSES:
        raise ValueError(f"unknown cause {v!r}")
    return v


def _check_monotone(rows, path):
    prev = -math.inf
    for lineno, row in rows:
        if row[0] < prev:
            raise IngestionError(f"time goes backwards ({row[0]} < {prev})", path=path, row=lineno)
        prev = row[0]


def read_meta(path: Path) -> dict:
    if not path.is_file():
        raise IngestionError("missing file", path=path)
    meta = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "=" not in line:
            raise IngestionError(f"expected key=value, got {line!r}", path=path, row=lineno)
        k, v = line.split("=", 1)
        meta[k.strip()] = v.strip()
    return meta


def load_drivelog(directory) -> DriveLog:
    d = Path(directory)
    if not d.is_dir():
        raise IngestionError("not a directory", path=d)
    meta = read_meta(d / "meta.txt")
    for key in ("dt_policy", "modality"):
        if key not in meta:
            raise IngestionError(f"meta.txt lacks {key}", path=d / "meta.txt")
    try:
        dt_policy = _finite(meta.pop("dt_policy"))
    except ValueError as exc:
        raise IngestionError(f"bad dt_policy: {exc}", path=d / "meta.txt") from None
    if dt_policy <= 0:
        raise IngestionError("dt_policy must be positive", path=d / "meta.txt")
    modality = meta.pop("modality")
    if modality not in MODALITIES:
        raise IngestionError(f"unknown modality {modality!r}", path=d / "meta.txt")

    steer = {}
    for name in ("steering_cmd.csv", "steering_eff.csv"):
        rows = _read_table(d / name, STEERING_HEADER, (_finite, _finite))
        _check_monotone(rows, d / name)
        for lineno, (_, a) in rows:
            if abs(a) > MAX_WHEEL_DEG:
                raise IngestionError(f"|angle| {a} exceeds {MAX_WHEEL_DEG}", path=d / name, row=lineno)
        steer[name] = np.array([r for _, r in rows], dtype=np.float64).reshape(-1, 2)

    tpath = d / "trajectory.csv"
    rows = _read_table(tpath, TRAJECTORY_HEADER, (_finite, _finite, _finite))
    _check_monotone(rows, tpath)
    for (_, a), (lineno, b) in zip(rows, rows[1:]):
        if math.hypot(b[1] - a[1], b[2] - a[2]) > MAX_TRAJ_SPACING:
            raise IngestionError(f"trajectory spacing exceeds {MAX_TRAJ_SPACING} m", path=tpath, row=lineno)
    traj = np.array([r for _, r in rows], dtype=np.float64).reshape(-1, 3)

    ipath = d / "interventions.csv"
    rows = _read_table(ipath, INTERVENTION_HEADER, (_finite, _finite, _cause))
    _check_monotone(rows, ipath)
    events = [InterventionEvent(*r) for _, r in rows]

    fdir = d / "frames"
    count = 0
    if fdir.is_dir():
        names = sorted(p.name for p in fdir.glob("*.tnsr"))
        expected = [frame_filename(i) for i in range(len(names))]
        if names != expected:
            missing = sorted(set(expected) - set(names)) or sorted(set(names) - set(expected))
            raise IngestionError(f"frame files are not contiguous near {missing[0]}", path=fdir)
        count = len(names)
    frames = FrameStore(directory=fdir, count=count, times=steer["steering_cmd.csv"][:, 0], modality=modality)
    return DriveLog(steering_cmd=steer["steering_cmd.csv"], steering_eff=steer["steering_eff.csv"],
                    trajectory=traj, interventions=events, frames=frames, dt_policy=dt_policy,
                    modality=modality, meta=meta)


# --------------------------------------------------------------------------- deployments


def _record_from_row(row: dict) -> DeploymentRecord:
    return DeploymentRecord(
        name=row["name"], dpi=float(row["dpi_m"]), mae_trajectory=float(row["mae_traj_m"]),
        failure_rate=float(row["failure_rate"]), w_effective=float(row["w_eff"]),
        w_on_policy=float(row["w_on"]), mae_steer=float(row["mae_steer_deg"]),
        w_off_policy=float(row["w_off"]), combined=float(row["combined"]),
    ).validate()


def read_deployments_csv(source) -> list[DeploymentRecord]:
    text = Path(source).read_text() if not hasattr(source, "read") else source.read()
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != TABLE8_HEADER:
        raise IngestionError(f"columns {reader.fieldnames} != {TABLE8_HEADER}", path=source, row=1)
    out = []
    for lineno, row in enumerate(reader, start=2):
        try:
            out.append(_record_from_row(row))
        except (TypeError, ValueError) as exc:
            raise IngestionError(str(exc), path=source, row=lineno) from None
    return out


def write_deployments_csv(records, path) -> None:
    rows = ([r.name] + [_fmt(v) for v in (r.dpi, r.mae_trajectory, r.failure_rate, r.w_effective,
                                          r.w_on_policy, r.mae_steer, r.w_off_policy, r.combined)]
            for r in records)
    _write_rows(Path(path), TABLE8_HEADER, rows)


def load_table8_fixture() -> list[DeploymentRecord]:
    """The 17 deployments of Table VIII, values verbatim (failure rate as a fraction)."""
    text = resources.files("roadlab.data").joinpath("table8.csv").read_text()
    return read_deployments_csv(io.StringIO(text))


def record_columns(records) -> dict:
    names = [f.name for f in fields(DeploymentRecord) if f.name != "name"]
    return {n: np.array([getattr(r, n) for r in records], dtype=np.float64) for n in names}


def record_as_dict(r: DeploymentRecord) -> dict:
    return asdict(r)
