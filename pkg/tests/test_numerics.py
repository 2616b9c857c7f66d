import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from roadlab.errors import FormatError, ShapeError
from roadlab.numerics import (Rng, decode_tensor, derive_seed, encode_tensor, load_tensor, matmul, save_tensor,
                              tmean, tsum)

GOLDEN = Path(__file__).parent / "golden" / "rng_seed42.txt"


def test_zero_1x1_f32_file_is_header_plus_four_zero_bytes(tmp_path):
    # magic 4 + version/dtype/rank 3 + two u32 extents 8 = 15 header bytes
    path = tmp_path / "z.tnsr"
    save_tensor(np.zeros((1, 1), np.float32), path)
    data = path.read_bytes()
    assert len(data) == 15 + 4
    assert data[:4] == b"TNSR" and data[4:7] == bytes([1, 1, 2])
    assert struct.unpack("<II", data[7:15]) == (1, 1)
    assert data[15:] == bytes(4)


def test_header_layout_little_endian():
    buf = encode_tensor(np.arange(6, dtype=np.uint8).reshape(2, 3))
    assert buf[:4] == b"TNSR"
    assert buf[4] == 1 and buf[5] == 2 and buf[6] == 2
    assert struct.unpack("<2I", buf[7:15]) == (2, 3)
    assert buf[15:] == bytes(range(6))


shapes = hnp.array_shapes(min_dims=1, max_dims=4, min_side=1, max_side=5)


@given(hnp.arrays(np.float32, shapes, elements=st.floats(-1e6, 1e6, width=32)))
def test_f32_round_trip(arr):
    out = decode_tensor(encode_tensor(arr))
    assert out.dtype == np.float32 and out.shape == arr.shape
    assert np.array_equal(out, arr)


@given(hnp.arrays(np.uint8, shapes))
def test_u8_round_trip(arr):
    out = decode_tensor(encode_tensor(arr))
    assert out.dtype == np.uint8 and np.array_equal(out, arr)


def test_file_round_trip(tmp_path):
    arr = np.random.default_rng(0).normal(size=(3, 4, 5)).astype(np.float32)
    save_tensor(arr, tmp_path / "a.tnsr")
    assert np.array_equal(load_tensor(tmp_path / "a.tnsr"), arr)
    assert not list(tmp_path.glob("*.part"))


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],                     # magic
    lambda b: b[:4] + bytes([9]) + b[5:],          # version
    lambda b: b[:5] + bytes([7]) + b[6:],          # dtype
    lambda b: b[:-1],                              # truncated payload
    lambda b: b[:9],                               # truncated header
    lambda b: b[:6] + bytes([0]) + b[7:],          # rank 0
])
def test_corrupt_headers_rejected(mutate):
    buf = encode_tensor(np.ones((2, 2), np.float32))
    with pytest.raises(FormatError):
        decode_tensor(mutate(buf))


def test_zero_extent_rejected():
    buf = bytearray(encode_tensor(np.ones((1, 1), np.float32)))
    buf[7:11] = struct.pack("<I", 0)
    with pytest.raises(FormatError):
        decode_tensor(bytes(buf))


def test_unsupported_dtype_rejected():
    with pytest.raises(FormatError):
        encode_tensor(np.ones(3, np.int64))


def test_matmul_accumulates_in_double():
    a = np.full((1, 4096), 1e-4, np.float32)
    b = np.ones((4096, 1), np.float32)
    out = matmul(a, b)
    assert out.dtype == np.float32
    assert abs(float(out[0, 0]) - 4096 * float(np.float32(1e-4))) < 1e-6
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3), np.float32), np.ones((2, 3), np.float32))


def test_reductions():
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    assert float(tsum(x)) == 15.0
    assert np.allclose(tmean(x, axis=0), [1.5, 2.5, 3.5])


def test_rng_golden_stream():
    lines = [ln.split() for ln in GOLDEN.read_text().splitlines() if not ln.startswith("#")]
    raw = [int(v) for k, v in lines if k == "raw"]
    rnd = [float(v) for k, v in lines if k == "random"]
    child = [int(v) for k, v in lines if k == "child3"]
    r = Rng(42)
    assert [int(v) for v in r.raw(len(raw))] == raw
    assert [float(v) for v in r.random(len(rnd))] == rnd
    assert [int(v) for v in Rng(42).child(3).raw(len(child))] == child


def test_children_are_order_independent():
    a = Rng(5).child(2).raw(3)
    root = Rng(5)
    root.child(0)
    root.raw(10)
    assert np.array_equal(root.child(2).raw(3), a)
    assert not np.array_equal(Rng(5).child(1).raw(3), a)


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(0, 1, 2) == derive_seed(0, 1, 2)
    assert len({derive_seed(0, 1, i) for i in range(100)}) == 100
    assert 0 <= derive_seed(3, 4) < 2 ** 63


def test_negative_seed_rejected():
    with pytest.raises(ValueError):
        Rng(-1)


def test_matmul_hand_cases():
    x = np.arange(9, dtype=np.float32).reshape(3, 3)
    assert np.array_equal(matmul(np.eye(3, dtype=np.float32), x), x)
    assert np.array_equal(matmul(np.array([[1, 2], [3, 4]], np.float32), np.array([[0], [1]], np.float32)),
                          np.array([[2], [4]], np.float32))


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(7, 5)).astype(np.float32)
    b = rng.normal(size=(5, 3)).astype(np.float32)
    ref = np.zeros((7, 3))
    for i in range(7):
        for j in range(3):
            acc = 0.0
            for p in range(5):
                acc += float(a[i, p]) * float(b[p, j])
            ref[i, j] = acc
    assert np.max(np.abs(matmul(a, b) - ref)) < 1e-6


@given(st.integers(0, 2 ** 32 - 1))
def test_matmul_associative(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.normal(size=(8, 8)).astype(np.float32) for _ in range(3))
    left = matmul(matmul(a, b), c).astype(np.float64)
    right = matmul(a, matmul(b, c)).astype(np.float64)
    assert np.linalg.norm(left - right) <= 1e-4 * np.linalg.norm(left)


@given(hnp.arrays(np.float32, st.integers(1, 200), elements=st.floats(-1e3, 1e3, width=32)))
def test_reductions_match_sequential_oracle(arr):
    acc = 0.0
    for v in arr:
        acc += float(v)
    s = float(tsum(arr))
    assert abs(s - acc) <= 1e-6 * max(1.0, abs(acc)) + 1e-6 * float(np.sum(np.abs(arr.astype(np.float64))))
    assert abs(float(tmean(arr)) - acc / len(arr)) <= 1e-6 * max(1.0, abs(acc / len(arr))) + 1e-4
