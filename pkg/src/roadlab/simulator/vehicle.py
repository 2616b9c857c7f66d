"""Kinematic bicycle with a rate-limited steering actuator."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

from ..errors import ConfigError, SimulationFault

MAX_WHEEL_DEG = 720.0


@dataclass(frozen=True)
class SimConfig:
    wheelbase: float = 2.79
    steering_ratio: float = 14.7
    actuator_rate_limit: float = 400.0  # wheel deg/s
    dt_sim: float = 0.01
    dt_policy: float = 0.1
    speed_fraction: float = 0.8
    intervention_lateral: float = 1.5
    intervention_heading: float = 90.0
    end_margin: float = 20.0  # episode stops this far before the track end
    # sensor
    sensor_height: float = 1.9
    wall_height: float = 1.5
    shoulder: float = 2.0  # off-road strip between road edge and border wall
    fov_deg: float = 90.0
    fan_columns: int = 258
    horizon_row: int = 12
    row_step_deg: float = 0.35
    intensity_noise: float = 12.0
    ambient_level: float = 110.0
    ambient_noise: float = 45.0
    # demonstrator perturbation (wheel degrees, Ornstein-Uhlenbeck)
    driver_noise: float = 15.0  # used when collecting demonstrations
    driver_noise_tau: float = 1.0

    def __post_init__(self):
        ratio = self.dt_policy / self.dt_sim
        if self.dt_sim <= 0 or self.dt_policy <= 0 or abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ConfigError("dt_policy must be a positive integer multiple of dt_sim")
        if not 0 < self.speed_fraction <= 1:
            raise ConfigError("speed_fraction must lie in (0, 1]")
        for name in ("wheelbase", "steering_ratio", "actuator_rate_limit", "intervention_lateral",
                     "intervention_heading", "sensor_height", "wall_height", "fov_deg", "row_step_deg"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if min(self.intensity_noise, self.ambient_noise, self.driver_noise, self.shoulder) < 0:
            raise ConfigError("noise levels and shoulder must be non-negative")

    @property
    def substeps(self) -> int:
        return int(round(self.dt_policy / self.dt_sim))

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass(frozen=True, slots=True)
class VehicleState:
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0
    steering_wheel: float = 0.0
    speed: float = 0.0
    odometer: float = 0.0


def step(state: VehicleState, wheel_cmd: float, cfg: SimConfig, dt: float | None = None,
         speed: float | None = None) -> VehicleState:
    """Advance one simulation step of ``dt`` (default ``cfg.dt_sim``) seconds.

    The wheel first slews toward the command, then the pose follows the exact
    arc for the new road-wheel angle.
    """
    if not math.isfinite(wheel_cmd):
        raise SimulationFault(f"non-finite steering command {wheel_cmd!r}")
    dt = cfg.dt_sim if dt is None else dt
    v = state.speed if speed is None else speed
    target = min(MAX_WHEEL_DEG, max(-MAX_WHEEL_DEG, wheel_cmd))
    lim = cfg.actuator_rate_limit * dt
    wheel = state.steering_wheel + min(lim, max(-lim, target - state.steering_wheel))
    curv = math.tan(math.radians(wheel / cfg.steering_ratio)) / cfg.wheelbase
    ds = v * dt
    h0 = state.heading
    dh = curv * ds
    if abs(dh) < 1e-9:
        c, s = math.cos(h0 + 0.5 * dh), math.sin(h0 + 0.5 * dh)
        x, y = state.x + ds * c, state.y + ds * s
    else:
        r = 1.0 / curv
        x = state.x + r * (math.sin(h0 + dh) - math.sin(h0))
        y = state.y - r * (math.cos(h0 + dh) - math.cos(h0))
    return VehicleState(x, y, h0 + dh, wheel, v, state.odometer + ds)


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi
