"""Policies that can drive the simulated vehicle."""
from __future__ import annotations

import math

import numpy as np

from ..errors import LostError
from .track import Track
from .vehicle import MAX_WHEEL_DEG, SimConfig, VehicleState


def reference_driver(state: VehicleState, track: Track, cfg: SimConfig, index: int | None = None) -> float:
    """Pure-pursuit wheel command in degrees (left-positive)."""
    i, s, lat, _ = track.project(state.x, state.y, index)
    if abs(lat) > 2 * track.width:
        raise LostError(f"vehicle {abs(lat):.2f} m from the centreline")
    look = max(5.0, 1.0 * state.speed)
    tx, ty, _ = track.point_at(s + look)
    dx, dy = tx - state.x, ty - state.y
    dist = math.hypot(dx, dy)
    if dist < 1e-9:
        return 0.0
    alpha = math.atan2(dy, dx) - state.heading
    delta = math.atan2(2.0 * cfg.wheelbase * math.sin(alpha), dist)
    wheel = math.degrees(delta) * cfg.steering_ratio
    return min(MAX_WHEEL_DEG, max(-MAX_WHEEL_DEG, wheel))


class Observation:
    """What a policy sees at one tick. The frame is rendered on first access."""

    __slots__ = ("t", "state", "track", "index", "_render", "_frame")

    def __init__(self, t, state, track, index, render):
        self.t, self.state, self.track, self.index = t, state, track, index
        self._render = render
        self._frame = None

    @property
    def frame(self):
        if self._frame is None:
            self._frame = self._render()
        return self._frame


class Policy:
    """Base policy: ``reset`` once per episode, then called once per tick."""

    name = "policy"

    def reset(self, rng) -> None:
        pass

    def __call__(self, obs: Observation) -> float:  # pragma: no cover - interface
        raise NotImplementedError


class ReferencePolicy(Policy):
    """Pure pursuit, optionally perturbed by Ornstein-Uhlenbeck wheel noise."""

    name = "reference"

    def __init__(self, cfg: SimConfig, noise: float = 0.0, tau: float = 1.0):
        self.cfg, self.noise, self.tau = cfg, noise, tau
        self._rng = None
        self._ou = 0.0

    def reset(self, rng) -> None:
        self._rng, self._ou = rng, 0.0

    def __call__(self, obs: Observation) -> float:
        cmd = reference_driver(obs.state, obs.track, self.cfg, obs.index)
        if self.noise > 0:
            a = math.exp(-self.cfg.dt_policy / self.tau)
            self._ou = a * self._ou + self.noise * math.sqrt(1 - a * a) * float(self._rng.normal())
            cmd += self._ou
        return cmd


class ConstantPolicy(Policy):
    def __init__(self, value: float = 0.0):
        self.value = value
        self.name = f"constant:{value:g}"

    def __call__(self, obs: Observation) -> float:
        return self.value


class FramePolicy(Policy):
    """Adapts a plain ``frame -> degrees`` function."""

    def __init__(self, fn, name: str = "frame"):
        self.fn, self.name = fn, name

    def __call__(self, obs: Observation) -> float:
        return self.fn(obs.frame)


class NetworkPolicy(Policy):
    """Runs a trained network on each preprocessed frame."""

    def __init__(self, params, preproc_cfg, name: str = "network"):
        from ..pilotnet import PilotNet

        self.net = PilotNet(params)
        self.preproc = preproc_cfg
        self.name = name
        self._rng = None

    def reset(self, rng) -> None:
        self._rng = rng

    def __call__(self, obs: Observation) -> float:
        from ..preprocess import prepare_input

        x = prepare_input(obs.frame, self.preproc, self._rng)
        return float(np.asarray(self.net.forward(x[None], "eval")).ravel()[0])
