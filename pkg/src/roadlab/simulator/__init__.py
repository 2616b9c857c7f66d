"""Closed-loop driving world: tracks, vehicle, sensor, drivers and episodes."""
from .driver import (ConstantPolicy, FramePolicy, NetworkPolicy, Observation, Policy, ReferencePolicy,
                     reference_driver)
from .episode import run_episode, start_state
from .sensor import cast_walls, ray_angles, render_scene, render_sensor, track_walls
from .track import Track, TrackConfig, gen_track, load_track, save_track, straight_track
from .vehicle import MAX_WHEEL_DEG, SimConfig, VehicleState, step, wrap_angle

__all__ = [
    "ConstantPolicy", "FramePolicy", "NetworkPolicy", "Observation", "Policy", "ReferencePolicy",
    "reference_driver", "run_episode", "start_state", "cast_walls", "ray_angles", "render_scene",
    "render_sensor", "track_walls", "Track", "TrackConfig", "gen_track", "load_track", "save_track",
    "straight_track", "MAX_WHEEL_DEG", "SimConfig", "VehicleState", "step", "wrap_angle",
]
