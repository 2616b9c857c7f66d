"""Correlation study between off-policy metrics and distance per intervention.

Two entry points. ``reproduce_table3`` recomputes the published correlations
from the embedded 17-deployment fixture. ``run_study`` builds a fresh
deployment table in simulation: it collects demonstrations, trains a policy,
deploys it under graded input degradations and matches each deployment with
an off-policy evaluation on held-out demonstrations from the same tracks.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .datalog import DeploymentRecord, DriveLog, load_table8_fixture, record_columns, write_deployments_csv
from .errors import ConfigError, DegenerateInputError, RoadlabError, ShapeError
from .metrics import (PermutationResult, combined_score, pearson, permutation_test_corr_diff,
                      summarize_on_policy, whiteness)
from .numerics import Rng, derive_seed
from .pilotnet import ModelParams, NetworkConfig, PilotNet
from .preprocess import Degradation, PreprocConfig, crop_frame, prepare_input
from .simulator import (NetworkPolicy, ReferencePolicy, SimConfig, Track, TrackConfig, gen_track, run_episode)
from .trainer import Dataset, TrainConfig, train

log = logging.getLogger(__name__)

METRICS = ("mae_trajectory", "failure_rate", "w_on_policy", "w_effective", "w_off_policy", "mae_steer", "combined")


# --------------------------------------------------------------------------- correlation table


@dataclass(frozen=True)
class CorrelationTable:
    """Pearson r of each metric against DpI. Metrics with zero variance map to NaN."""

    entries: dict
    n: int

    def __post_init__(self):
        for k, v in self.entries.items():
            if not (math.isnan(v) or -1.0 <= v <= 1.0):
                raise ValueError(f"correlation {k}={v} outside [-1, 1]")

    def __getitem__(self, key):
        return self.entries[key]

    @property
    def degenerate(self) -> list:
        return [k for k in METRICS if math.isnan(self.entries[k])]

    def rows(self):
        return [(k, self.entries[k]) for k in METRICS]

    def to_csv(self, path) -> None:
        text = "metric,r\n" + "".join(f"{k},{v!r}\n" for k, v in self.rows())
        Path(path).write_text(text)


def correlation_table(records, combined=None) -> CorrelationTable:
    cols = record_columns(records)
    if combined is not None:
        cols["combined"] = np.asarray(combined, dtype=np.float64)
    dpi = cols["dpi"]
    if len(dpi) >= 2 and np.all(dpi == dpi[0]):
        raise DegenerateInputError("DpI is identical across deployments; correlations are undefined")
    entries = {}
    for k in METRICS:
        try:
            entries[k] = pearson(dpi, cols[k])
        except DegenerateInputError:
            entries[k] = float("nan")
    return CorrelationTable(entries, len(dpi))


def reproduce_table3() -> CorrelationTable:
    """Correlations over the embedded fixture, using its printed combined column."""
    return correlation_table(load_table8_fixture())


# --------------------------------------------------------------------------- off-policy evaluation


def _check_compatible(params: ModelParams, log_: DriveLog, cfg: PreprocConfig):
    if params.cfg.channels != cfg.channels:
        raise ConfigError(f"model expects {params.cfg.channels} channels, preprocessing yields {cfg.channels}")
    if cfg.channel_mode == "rgb" and log_.modality != "camera":
        raise ConfigError("rgb preprocessing needs a camera log")
    if cfg.channel_mode != "rgb" and log_.modality != "lidar":
        raise ConfigError(f"channel mode {cfg.channel_mode!r} needs a lidar log")


def predict_log(params: ModelParams, log_: DriveLog, cfg: PreprocConfig, rng=None, batch_size: int = 64):
    _check_compatible(params, log_, cfg)
    if len(log_.frames) != len(log_.steering_eff):
        raise ShapeError(f"{len(log_.frames)} frames but {len(log_.steering_eff)} steering rows")
    if cfg.degradation.kind == "noise" and rng is None:
        rng = Rng(0)
    net = PilotNet(params)
    out = []
    for i in range(0, len(log_.frames), batch_size):
        x = np.stack([prepare_input(f, cfg, rng) for f in log_.frames[i:i + batch_size]])
        out.append(np.asarray(net.forward(x, "eval"), dtype=np.float64).ravel())
    return np.concatenate(out) if out else np.zeros(0)


def off_policy_eval(params: ModelParams, validation_log: DriveLog, preproc_cfg: PreprocConfig, rng=None):
    """(MAE against the logged effective steering, whiteness of the predictions)."""
    pred = predict_log(params, validation_log, preproc_cfg, rng)
    human = validation_log.steering_eff[:, 1]
    return float(np.mean(np.abs(pred - human))), whiteness(pred, validation_log.dt_policy)


def off_policy_eval_pooled(params, logs, preproc_cfg, rng=None):
    """Off-policy metrics pooled over several logs (frame-weighted MAE, RMS over all differences)."""
    abs_err, sq, n_diff = [], 0.0, 0
    for lg in logs:
        pred = predict_log(params, lg, preproc_cfg, rng)
        abs_err.append(np.abs(pred - lg.steering_eff[:, 1]))
        if len(pred) >= 2:
            sq += whiteness(pred, lg.dt_policy) ** 2 * (len(pred) - 1)
            n_diff += len(pred) - 1
    return float(np.mean(np.concatenate(abs_err))), math.sqrt(sq / n_diff)


# --------------------------------------------------------------------------- demonstrations


def collect(track: Track, sim_cfg: SimConfig, seed: int) -> DriveLog:
    """Demonstration drive at full reference speed with perturbed pure pursuit, frames recorded."""
    cfg = replace(sim_cfg, speed_fraction=1.0)
    return run_episode(ReferencePolicy(cfg, cfg.driver_noise, cfg.driver_noise_tau), track, cfg, seed,
                       record_frames=True)


def logs_to_dataset(logs, preproc_cfg: PreprocConfig) -> Dataset:
    inputs = [crop_frame(f, preproc_cfg) for lg in logs for f in lg.frames]
    targets = np.concatenate([lg.steering_eff[:, 1] for lg in logs])
    return Dataset(np.stack(inputs), targets)


# --------------------------------------------------------------------------- study


@dataclass(frozen=True)
class StudyCondition:
    cid: str
    policy_id: str = "base"
    degradation: Degradation = field(default_factory=Degradation)
    seed: int = 0

    @property
    def label(self) -> str:
        return f"{self.cid} {self.policy_id} {self.degradation.label()}"


@dataclass(frozen=True)
class StudyConfig:
    seed: int = 0
    n_tracks: int = 2
    track_length: float = 400.0
    collect_tracks: int = 4
    collect_length: float = 400.0
    channel_mode: str = "three"
    output_scale: float = 100.0
    max_epochs: int = 8
    patience: int = 3
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    n_perm: int = 10_000
    workers: int | None = None

    def __post_init__(self):
        if self.n_tracks < 2:
            raise ConfigError("a study needs at least two tracks per condition")
        if self.collect_tracks < 2:
            raise ConfigError("need at least two demonstration tracks (one is held for validation)")

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, weight_decay=self.weight_decay, batch_size=self.batch_size,
                           max_epochs=self.max_epochs, patience=self.patience,
                           seed=derive_seed(self.seed, 5))


def default_conditions(seed: int = 0) -> list[StudyCondition]:
    """Graded deployment-time degradations of one trained policy."""
    specs = ["none", "noise:0.05", "noise:0.1", "noise:0.2", "noise:0.3", "noise:0.45",
             "shift:6,0", "shift:-8,2", "bgr"]
    return [StudyCondition(f"c{i:02d}", "base", Degradation.parse(s), seed) for i, s in enumerate(specs)]


def worker_count(requested: int | None = None) -> int:
    env = os.environ.get("RC_THREADS")
    cap = os.cpu_count() or 1
    if env:
        try:
            cap = max(1, int(env))
        except ValueError:
            raise ConfigError(f"RC_THREADS must be an integer, got {env!r}") from None
    return max(1, min(cap, requested or cap))


@dataclass
class ConditionResult:
    condition: StudyCondition
    record: DeploymentRecord | None
    fault: str | None = None


@dataclass
class StudyResult:
    records: list
    table: CorrelationTable | None
    permutation: PermutationResult | None
    faulted: list
    notes: list = field(default_factory=list)
    history: list = field(default_factory=list)


def _eval_tracks(cfg: StudyConfig, track_cfg: TrackConfig):
    return [gen_track(derive_seed(cfg.seed, 2, i) % (2 ** 32), cfg.track_length, track_cfg) for i in range(cfg.n_tracks)]


def train_policy(cfg: StudyConfig, sim_cfg: SimConfig, track_cfg: TrackConfig, preproc: PreprocConfig):
    """Collect demonstrations and train one policy. Returns (params, history)."""
    logs = []
    for i in range(cfg.collect_tracks):
        tr = gen_track(derive_seed(cfg.seed, 1, i) % (2 ** 32), cfg.collect_length, track_cfg)
        logs.append(collect(tr, sim_cfg, derive_seed(cfg.seed, 1, i, 0)))
    train_set = logs_to_dataset(logs[:-1], preproc)
    val_set = logs_to_dataset(logs[-1:], preproc)
    net_cfg = NetworkConfig(channels=preproc.channels, output_scale=cfg.output_scale)
    return train(train_set, val_set, net_cfg, cfg.train_config())


def _run_condition(cond: StudyCondition, index: int, params: ModelParams, tracks, human_trajs, ref_logs,
                   cfg: StudyConfig, sim_cfg: SimConfig, preproc: PreprocConfig) -> ConditionResult:
    pre = replace(preproc, degradation=cond.degradation)
    try:
        logs = []
        for j, tr in enumerate(tracks):
            lg = run_episode(NetworkPolicy(params, pre, cond.cid), tr, sim_cfg,
                             derive_seed(cfg.seed, 3, cond.seed, index, j))
            if "fault" in lg.meta:
                return ConditionResult(cond, None, f"track {j}: {lg.meta['fault']}")
            logs.append(lg)
        summary = summarize_on_policy(logs, human_trajs, sim_cfg.dt_policy)
        mae, w_off = off_policy_eval_pooled(params, ref_logs, pre, Rng(derive_seed(cfg.seed, 4, cond.seed, index)))
    except RoadlabError as exc:
        return ConditionResult(cond, None, f"{type(exc).__name__}: {exc}")
    rec = DeploymentRecord(cond.label, summary.dpi, summary.mae_trajectory, summary.failure_rate,
                           summary.w_effective, summary.w_on_policy, mae, w_off).validate()
    return ConditionResult(cond, rec)


def run_study(conditions, cfg: StudyConfig, sim_cfg: SimConfig | None = None, track_cfg: TrackConfig | None = None,
              policies: dict | None = None) -> StudyResult:
    """Deploy every condition and correlate its metrics with DpI.

    ``policies`` maps policy ids to trained parameters; missing ids are trained
    here from fresh demonstrations (ids are trained in sorted order, each with
    its own seed).
    """
    conditions = list(conditions)
    if len(conditions) < 8:
        raise ConfigError("a study needs at least 8 conditions")
    sim_cfg = sim_cfg or SimConfig()
    track_cfg = track_cfg or TrackConfig()
    preproc = PreprocConfig(channel_mode=cfg.channel_mode)
    policies = dict(policies or {})
    history = []
    for k, pid in enumerate(sorted({c.policy_id for c in conditions})):
        if pid not in policies:
            sub = replace(cfg, seed=derive_seed(cfg.seed, 6, k) % (2 ** 32)) if k else cfg
            policies[pid], hist = train_policy(sub, sim_cfg, track_cfg, preproc)
            history.extend((pid,) + row for row in hist)

    tracks = _eval_tracks(cfg, track_cfg)
    ref_cfg = replace(sim_cfg, speed_fraction=1.0)
    human_trajs = [run_episode(ReferencePolicy(ref_cfg), tr, ref_cfg, 0).trajectory[:, 1:3] for tr in tracks]
    ref_logs = [collect(tr, sim_cfg, derive_seed(cfg.seed, 2, j, 0)) for j, tr in enumerate(tracks)]

    workers = worker_count(cfg.workers)

    def job(item):
        i, cond = item
        return _run_condition(cond, i, policies[cond.policy_id], tracks, human_trajs, ref_logs, cfg, sim_cfg,
                              preproc)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, enumerate(conditions)))
    else:
        results = [job(item) for item in enumerate(conditions)]

    records = [r.record for r in results if r.record is not None]
    faulted = [(r.condition.label, r.fault) for r in results if r.record is None]
    notes = []
    table = perm = None
    if len(records) >= 3:
        cols = record_columns(records)
        try:
            comb = combined_score(cols["mae_steer"], cols["w_off_policy"])
            for rec, c in zip(records, comb):
                rec.combined = float(c)
        except DegenerateInputError as exc:
            notes.append(f"combined score undefined: {exc}")
        table = correlation_table(records)
        try:
            cols = record_columns(records)
            perm = permutation_test_corr_diff(cols["combined"], cols["mae_steer"], cols["dpi"], cfg.n_perm,
                                              derive_seed(cfg.seed, 7) % (2 ** 32))
        except (DegenerateInputError, ConfigError) as exc:
            notes.append(f"permutation test skipped: {exc}")
    else:
        notes.append(f"only {len(records)} conditions completed; correlations need at least 3")
    return StudyResult(records, table, perm, faulted, notes, history)


# --------------------------------------------------------------------------- outputs


def _num(v: float, digits: int = 4) -> str:
    return "nan" if math.isnan(v) else f"{v:.{digits}f}"


def render_report(result: StudyResult, cfg: StudyConfig) -> str:
    lines = ["# Synthetic correlation study", "",
             f"Master seed {cfg.seed}; {cfg.n_tracks} tracks of {cfg.track_length:g} m per condition; "
             f"{len(result.records)} completed deployments, {len(result.faulted)} faulted.", "",
             "## Deployments", "",
             "| name | DpI (m) | MAE traj (m) | failure rate | W_eff | W_on | MAE steer | W_off | combined |",
             "|---|---|---|---|---|---|---|---|---|"]
    for r in result.records:
        lines.append(f"| {r.name} | {r.dpi:.1f} | {r.mae_trajectory:.4f} | {r.failure_rate:.4f} | "
                     f"{r.w_effective:.2f} | {r.w_on_policy:.2f} | {r.mae_steer:.3f} | {r.w_off_policy:.2f} | "
                     f"{_num(r.combined)} |")
    lines += ["", "## Pearson r against DpI", "", "| metric | r |", "|---|---|"]
    if result.table is not None:
        lines += [f"| {k} | {_num(v)} |" for k, v in result.table.rows()]
    if result.permutation is not None:
        p = result.permutation
        lines += ["", "## Combined score vs steering MAE", "",
                  f"Reconstructed resampling test ({p.method}, {p.n_perm} draws): observed |r_combined| - |r_mae| = "
                  f"{p.observed:.4f}, mean effect {p.mean_effect:.4f}, p = {p.p_value:.4f}."]
    if result.faulted:
        lines += ["", "## Faulted conditions", ""] + [f"- {name}: {why}" for name, why in result.faulted]
    if result.notes:
        lines += ["", "## Notes", ""] + [f"- {n}" for n in result.notes]
    return "\n".join(lines) + "\n"


def write_study_outputs(result: StudyResult, cfg: StudyConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_deployments_csv(result.records, out / "deployments.csv")
    if result.table is not None:
        result.table.to_csv(out / "correlations.csv")
    (out / "study_report.md").write_text(render_report(result, cfg))
    return out


def summary_rows(result: StudyResult) -> list:
    rows = [("deployments", len(result.records)), ("faulted", len(result.faulted))]
    if result.table is not None:
        rows += [(f"r_{k}", v) for k, v in result.table.rows()]
    if result.permutation is not None:
        rows += [("perm_mean_effect", result.permutation.mean_effect), ("perm_p", result.permutation.p_value)]
    return rows


__all__ = ["METRICS", "CorrelationTable", "correlation_table", "reproduce_table3", "off_policy_eval",
           "off_policy_eval_pooled", "predict_log", "collect", "logs_to_dataset", "StudyCondition", "StudyConfig",
           "default_conditions", "run_study", "StudyResult", "render_report", "write_study_outputs",
           "summary_rows", "train_policy", "worker_count"]
