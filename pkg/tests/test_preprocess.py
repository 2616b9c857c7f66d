import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from roadlab.datalog import SensorFrame
from roadlab.errors import ConfigError, DomainError, GeometryError
from roadlab.preprocess import (Degradation, PreprocConfig, crop_frame, downscale_bilinear, encode_depth,
                                inverse_permutation, prepare_batch, prepare_input, shift_crop)
from roadlab.numerics import Rng


def _frame(h=74, w=274, seed=0, modality="lidar"):
    px = np.random.default_rng(seed).integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    return SensorFrame(0.0, px, modality)


@pytest.mark.parametrize("d,code", [(0, 255), (60, 0), (10, 204), (20, 153), (50, 0), (float("inf"), 0)])
def test_encode_depth_values(d, code):
    assert encode_depth(d) == code


def test_encode_depth_rounds_half_away_from_zero():
    # 255 * (1 - d/50) = 254.5 at d = 50/510
    assert encode_depth(50 / 510) == 255
    assert encode_depth(0.1) == 254  # 254.49


def test_encode_depth_rejects_negative_and_nan():
    with pytest.raises(DomainError):
        encode_depth(-0.1)
    with pytest.raises(DomainError):
        encode_depth(float("nan"))


@given(st.lists(st.floats(0, 200, allow_nan=False), min_size=2, max_size=50))
def test_encode_depth_monotone(ds):
    ds = np.sort(np.array(ds))
    codes = encode_depth(ds).astype(int)
    assert np.all(np.diff(codes) <= 0)


def test_identity_crop_on_exact_size_frame():
    f = _frame(66, 258)
    cfg = PreprocConfig(frame_height=66, frame_width=258, crop_origin=(0, 0))
    x = prepare_input(f, cfg)
    assert x.shape == (3, 66, 258) and x.dtype == np.float32
    assert np.array_equal(x, f.pixels.transpose(2, 0, 1).astype(np.float32) / np.float32(255))


def test_default_crop_takes_centre_window():
    f = _frame()
    x = crop_frame(f, PreprocConfig())
    assert np.array_equal(x, f.pixels[4:70, 8:266].transpose(2, 0, 1))


@pytest.mark.parametrize("mode,ch", [("intensity", 0), ("depth", 1), ("ambient", 2)])
def test_single_channel_selection(mode, ch):
    f = _frame()
    x = prepare_input(f, PreprocConfig(channel_mode=mode))
    assert x.shape == (1, 66, 258)
    assert np.array_equal(x[0], f.pixels[4:70, 8:266, ch].astype(np.float32) / np.float32(255))


def test_bgr_on_rgb_frame_swaps_first_and_last():
    f = _frame(66, 258, modality="camera")
    base = dict(frame_height=66, frame_width=258, crop_origin=(0, 0), channel_mode="rgb")
    x = prepare_input(f, PreprocConfig(**base))
    y = prepare_input(f, PreprocConfig(**base, degradation=Degradation.parse("bgr")))
    assert np.array_equal(y[0], x[2]) and np.array_equal(y[2], x[0]) and np.array_equal(y[1], x[1])


def test_permute_happens_before_selection():
    f = _frame()
    deg = Degradation("channel_permute", perm=(2, 1, 0))
    x = prepare_input(f, PreprocConfig(channel_mode="intensity", degradation=deg))
    assert np.array_equal(x[0], f.pixels[4:70, 8:266, 2].astype(np.float32) / np.float32(255))


@given(st.permutations([0, 1, 2]))
def test_permutation_then_inverse_is_identity(perm):
    f = _frame(seed=3)
    once = crop_frame(f, PreprocConfig(degradation=Degradation("channel_permute", perm=tuple(perm))))
    back = SensorFrame(0.0, np.ascontiguousarray(once.transpose(1, 2, 0)), "lidar")
    cfg = PreprocConfig(frame_height=66, frame_width=258, crop_origin=(0, 0),
                        degradation=Degradation("channel_permute", perm=inverse_permutation(perm)))
    assert np.array_equal(crop_frame(back, cfg), crop_frame(f, PreprocConfig()))


def test_shift_crop():
    cfg = PreprocConfig()
    assert shift_crop(cfg, 0, 0) == cfg
    assert shift_crop(cfg, 1, 0).crop_origin == (4, 9)
    assert shift_crop(cfg, 0, -2).crop_origin == (2, 8)
    with pytest.raises(GeometryError):
        shift_crop(cfg, 9, 0)
    with pytest.raises(GeometryError):
        shift_crop(cfg, 0, -5)


def test_crop_shift_degradation_matches_shifted_origin():
    f = _frame(seed=5)
    a = crop_frame(f, PreprocConfig(degradation=Degradation.parse("shift:3,-1")))
    b = crop_frame(f, shift_crop(PreprocConfig(), 3, -1))
    assert np.array_equal(a, b)
    with pytest.raises(GeometryError):
        crop_frame(f, PreprocConfig(degradation=Degradation.parse("shift:20,0")))


def test_window_must_fit():
    with pytest.raises(GeometryError):
        PreprocConfig(frame_height=60)
    with pytest.raises(ConfigError):
        PreprocConfig(out_width=200)


def test_camera_frames_are_downscaled():
    f = SensorFrame(0.0, np.full((148, 548, 3), 77, np.uint8), "camera")
    x = crop_frame(f, PreprocConfig(channel_mode="rgb"))
    assert x.shape == (3, 66, 258) and np.all(x == 77)


def test_bilinear_halving_averages_pairs():
    px = np.zeros((2, 4, 1), np.uint8)
    px[:, 1::2] = 100
    out = downscale_bilinear(px, 1, 2)
    assert out.shape == (1, 2, 1) and np.all(out == 50)


def test_mode_modality_mismatch():
    cam = _frame(modality="camera")
    with pytest.raises(ConfigError):
        prepare_input(cam, PreprocConfig(channel_mode="depth"))
    with pytest.raises(ConfigError):
        prepare_input(_frame(), PreprocConfig(channel_mode="rgb"))


def test_noise_degradation_needs_rng_and_stays_in_range():
    cfg = PreprocConfig(degradation=Degradation.parse("noise:0.3"))
    with pytest.raises(ConfigError):
        prepare_input(_frame(), cfg)
    a = prepare_input(_frame(), cfg, Rng(1))
    b = prepare_input(_frame(), cfg, Rng(1))
    assert np.array_equal(a, b) and a.min() >= 0 and a.max() <= 1


@given(hnp.arrays(np.uint8, (74, 274, 3)), st.sampled_from(["three", "intensity", "depth", "ambient"]),
       st.integers(-8, 8), st.integers(-4, 4))
def test_output_contract(px, mode, dx, dy):
    cfg = PreprocConfig(channel_mode=mode, degradation=Degradation("crop_shift", dx=dx, dy=dy))
    x = prepare_input(SensorFrame(0.0, px, "lidar"), cfg)
    assert x.shape == (cfg.channels, 66, 258)
    assert x.min() >= 0.0 and x.max() <= 1.0


def test_degradation_parse_and_label():
    for text in ["none", "bgr", "shift:2,-1", "noise:0.1", "perm:1,0,2"]:
        assert Degradation.parse(text).label() == text
    for bad in ["blur", "shift:1", "noise:x", "perm:0,0,1"]:
        with pytest.raises(ConfigError):
            Degradation.parse(bad)


def test_prepare_batch_stacks():
    xs = prepare_batch([_frame(seed=i) for i in range(3)], PreprocConfig())
    assert xs.shape == (3, 3, 66, 258)
