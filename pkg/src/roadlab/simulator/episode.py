"""Closed-loop episodes with the intervention-and-reset protocol."""
from __future__ import annotations

import logging
import math

import numpy as np

from ..datalog import DriveLog, InterventionEvent
from ..errors import SimulationFault
from ..numerics import Rng
from .driver import Observation, Policy
from .sensor import render_sensor
from .track import Track
from .vehicle import MAX_WHEEL_DEG, SimConfig, VehicleState, step, wrap_angle

log = logging.getLogger(__name__)


def start_state(track: Track, cfg: SimConfig) -> VehicleState:
    x, y, h = track.point_at(0.0)
    return VehicleState(x, y, h, 0.0, cfg.speed_fraction * track.speed_at(0), 0.0)


def run_episode(policy: Policy, track: Track, cfg: SimConfig, seed: int, record_frames: bool = False) -> DriveLog:
    """Drive ``policy`` from the start of ``track`` until ``end_margin`` before its end.

    All three logged series share the tick timestamps. Row k of
    ``steering_cmd`` is the command issued at tick k, row k of
    ``steering_eff`` is the wheel angle the actuator reached by the end of
    that tick, and row k of ``trajectory`` is the pose at tick k.

    A non-finite command aborts the episode; the partial log is returned with
    ``meta["fault"]`` set.
    """
    rng = Rng(seed)
    frame_rng, policy_rng = rng.child(0), rng.child(1)
    policy.reset(policy_rng)
    state = start_state(track, cfg)
    idx, s, _, _ = track.project(state.x, state.y, 0)
    s_end = track.length - cfg.end_margin
    n_sub = cfg.substeps
    lat_thr = cfg.intervention_lateral
    head_thr = math.radians(cfg.intervention_heading)
    max_ticks = int(math.ceil(3.0 * track.length / (cfg.speed_fraction * max(1e-3, float(track.ref_speed.min())))
                              / cfg.dt_policy))
    cmds, effs, traj, frames, events = [], [], [], [], []
    max_lat = 0.0
    fault = None
    k = 0
    while s < s_end and k < max_ticks:
        t = k * cfg.dt_policy
        st, ix, tk = state, idx, t
        obs = Observation(t, state, track, idx,
                          lambda st=st, ix=ix, tk=tk, kk=k: render_sensor(st, track, frame_rng.child(kk), cfg, tk, ix))
        cmd = float(policy(obs))
        if not math.isfinite(cmd):
            fault = f"non-finite command at t={t!r}"
            log.warning("episode aborted: %s", fault)
            break
        cmd = min(MAX_WHEEL_DEG, max(-MAX_WHEEL_DEG, cmd))
        if record_frames:
            frames.append(obs.frame)
        cmds.append((t, cmd))
        traj.append((t, state.x, state.y))
        for j in range(n_sub):
            v = cfg.speed_fraction * track.speed_at(idx)
            state = step(state, cmd, cfg, speed=v)
            idx, s, lat, seg_h = track.project(state.x, state.y, idx)
            herr = wrap_angle(state.heading - seg_h)
            if abs(lat) > lat_thr or abs(herr) > head_thr:
                cause = "lateral_exit" if abs(lat) > lat_thr else "heading_exit"
                events.append(InterventionEvent(t + (j + 1) * cfg.dt_sim, state.odometer, cause))
                cx, cy = state.x + lat * math.sin(seg_h), state.y - lat * math.cos(seg_h)
                state = VehicleState(cx, cy, seg_h, 0.0, v, state.odometer)
                idx, s, lat, _ = track.project(cx, cy, idx)
            max_lat = max(max_lat, abs(lat))
        effs.append((t, state.steering_wheel))
        k += 1
    else:
        if k >= max_ticks:
            raise SimulationFault(f"episode exceeded {max_ticks} ticks without finishing")
    meta = {"distance_m": repr(state.odometer), "track_seed": "" if track.seed is None else str(track.seed),
            "seed": str(seed), "policy": getattr(policy, "name", "policy"), "interventions": str(len(events)),
            "max_lateral_m": repr(max_lat)}
    if fault:
        meta["fault"] = fault
    return DriveLog(
        steering_cmd=np.array(cmds, dtype=np.float64).reshape(-1, 2),
        steering_eff=np.array(effs, dtype=np.float64).reshape(-1, 2),
        trajectory=np.array(traj, dtype=np.float64).reshape(-1, 3),
        interventions=events, frames=frames, dt_policy=cfg.dt_policy, modality="lidar", meta=meta)
