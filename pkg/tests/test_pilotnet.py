import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from _gradcheck import TOL, check_seed
from roadlab.errors import CheckpointError, ConfigError, ShapeError, StateError
from roadlab.numerics import Rng
from roadlab.pilotnet import (NetworkConfig, PilotNet, bn_backward, bn_forward_train, conv_backward, conv_forward,
                              forward, init_params, leaky_relu, leaky_relu_grad, load_checkpoint, param_shapes,
                              save_checkpoint, shrunken_config)


def _fd(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        o = x[i]
        x[i] = o + h
        fp = f()
        x[i] = o - h
        fm = f()
        x[i] = o
        g[i] = (fp - fm) / (2 * h)
    return g


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def test_default_chain_and_flatten_width():
    cfg = NetworkConfig()
    assert cfg.spatial_chain() == [(31, 127), (14, 62), (5, 29), (1, 13), (1, 11)]
    assert cfg.flatten_width == 704
    assert cfg.conv_geometry()[-1][2:4] == (1, 3)  # conv5 kernel clamped in height


@pytest.mark.parametrize("c", [1, 3])
def test_param_shapes(c):
    shapes = param_shapes(NetworkConfig(channels=c))
    assert shapes["conv1.weight"] == (24, c, 5, 5)
    assert shapes["conv4.weight"] == (48, 24, 5, 5)
    assert shapes["fc1.weight"] == (100, 704)
    assert "fc2.bn.gamma" in shapes and "fc3.bn.gamma" not in shapes and "fc4.bn.gamma" not in shapes


def test_bad_configs():
    with pytest.raises(ConfigError):
        NetworkConfig(channels=2)
    with pytest.raises(ConfigError):
        NetworkConfig(fc=(10, 5))
    with pytest.raises(ConfigError):
        NetworkConfig(output_scale=0)


def test_batch_of_two_gives_two_outputs():
    p = init_params(NetworkConfig(), Rng(0))
    x = np.random.default_rng(0).random((2, 3, 66, 258), dtype=np.float32)
    out = forward(p, x)
    assert out.shape == (2, 1) and out.dtype == np.float32
    with pytest.raises(ShapeError):
        forward(p, x[:, :1])


def test_zero_input_gives_zero_output_in_eval():
    p = init_params(NetworkConfig(), Rng(1))
    assert np.all(forward(p, np.zeros((1, 3, 66, 258), np.float32)) == 0.0)


def test_init_determinism_and_law():
    a = init_params(NetworkConfig(), Rng(4))
    b = init_params(NetworkConfig(), Rng(4))
    assert all(np.array_equal(a[k], b[k]) for k in a.tensors)
    sigma = np.sqrt(2.0 / (1.0 + 0.01 ** 2) / 75)
    for seed in range(10):
        w = init_params(NetworkConfig(), Rng(seed))["conv1.weight"]
        assert abs(w.mean()) < 3 * sigma / np.sqrt(w.size)
        assert abs(w.std() / sigma - 1) < 0.1
    assert np.all(a["conv1.bias"] == 0) and np.all(a["conv1.bn.gamma"] == 1) and np.all(a["fc1.bn.beta"] == 0)


def test_eval_forward_is_pure():
    p = init_params(shrunken_config(), Rng(2))
    x = np.random.default_rng(2).random((3, 3, 12, 20))
    before = {k: v.copy() for k, v in p.tensors.items()}
    assert np.array_equal(forward(p, x), forward(p, x))
    assert all(np.array_equal(before[k], p[k]) for k in before)


@pytest.mark.parametrize("seed", range(3))
def test_full_network_gradients(seed):
    worst, checked, skipped = check_seed(seed)
    assert checked > 400
    assert worst < TOL


def test_conv_gradients_in_isolation():
    r = np.random.default_rng(0)
    x = r.normal(size=(2, 2, 9, 11))
    w = r.normal(size=(3, 2, 3, 5))
    b = r.normal(size=3)
    up = r.normal(size=conv_forward(x, w, b, 2)[0].shape)
    _, cols = conv_forward(x, w, b, 2)
    dx, dw, db = conv_backward(x.shape, cols, w, 2, up)
    obj = lambda: float(np.sum(conv_forward(x, w, b, 2)[0] * up))
    for ana, arr in ((dx, x), (dw, w), (db, b)):
        assert _rel(ana, _fd(obj, arr)) < 1e-7


@pytest.mark.parametrize("shape", [(6, 4), (3, 2, 3, 4)])
def test_bn_gradients_in_isolation(shape):
    r = np.random.default_rng(1)
    x = r.normal(size=shape)
    gamma, beta = r.normal(size=shape[1]), r.normal(size=shape[1])
    up = r.normal(size=shape)
    _, cache = bn_forward_train(x, gamma, beta, 1e-5)
    dx, dg, db = bn_backward(up, gamma, cache)
    obj = lambda: float(np.sum(bn_forward_train(x, gamma, beta, 1e-5)[0] * up))
    for ana, arr in ((dx, x), (dg, gamma), (db, beta)):
        assert _rel(ana, _fd(obj, arr)) < 1e-6


def test_linear_and_activation_gradients_in_isolation():
    r = np.random.default_rng(2)
    x, w, b = r.normal(size=(4, 5)), r.normal(size=(3, 5)), r.normal(size=3)
    up = r.normal(size=(4, 3))
    obj = lambda: float(np.sum((x @ w.T + b) * up))
    assert _rel(up.T @ x, _fd(obj, w)) < 1e-8
    assert _rel(up.sum(0), _fd(obj, b)) < 1e-8
    z = np.array([-2.0, -0.5, 0.5, 2.0])
    num = _fd(lambda: float(np.sum(leaky_relu(z, 0.01))), z)
    assert np.allclose(num, leaky_relu_grad(z, 0.01), atol=1e-9)


def test_leaky_relu_slope():
    assert leaky_relu_grad(np.array([-3.0]), 0.01)[0] == 0.01
    assert leaky_relu(np.array([-3.0]), 0.01)[0] == pytest.approx(-0.03)


def test_zero_upstream_gives_zero_grads():
    p = init_params(shrunken_config(), Rng(3))
    net = PilotNet(p)
    net.forward(np.random.default_rng(3).normal(size=(4, 3, 12, 20)), "train")
    grads = net.backward(np.zeros((4, 1)))
    assert set(grads) == set(p.trainable())
    assert all(np.all(g == 0) for g in grads.values())


def test_backward_without_forward_raises():
    net = PilotNet(init_params(shrunken_config(), Rng(0)))
    with pytest.raises(StateError):
        net.backward(np.ones((1, 1)))
    net.forward(np.zeros((2, 3, 12, 20)), "eval")
    with pytest.raises(StateError):
        net.backward(np.ones((2, 1)))


@given(st.integers(8, 16), st.integers(0, 1000))
def test_train_mode_bn_normalizes(batch, seed):
    p = init_params(shrunken_config(), Rng(seed))
    net = PilotNet(p)
    net.forward(np.random.default_rng(seed).normal(size=(batch, 3, 12, 20)), "train", update_stats=False)
    for name, kind, _, _, bn_cache, _ in net._cache[0]:
        if bn_cache is None:
            continue
        xhat = bn_cache[0]
        axes = (0, 2, 3) if xhat.ndim == 4 else (0,)
        var = xhat.var(axis=axes)
        assert np.all(np.abs(xhat.mean(axis=axes)) < 1e-4)
        # eps shrinks the variance slightly below one for near-constant channels
        raw_var = bn_cache[3]
        assert np.all(np.abs(var - raw_var / (raw_var + 1e-5)) < 1e-4)
        assert np.all(np.abs(var[raw_var > 1e-2] - 1) < 1e-3)


def test_running_stats_update():
    p = init_params(shrunken_config(), Rng(0))
    net = PilotNet(p)
    net.forward(np.random.default_rng(0).normal(2.0, 1.0, size=(8, 3, 12, 20)), "train")
    assert not np.all(p["conv1.bn.running_mean"] == 0)
    assert np.all(p["conv1.bn.running_var"] > 0)


def test_checkpoint_round_trip(tmp_path):
    cfg = shrunken_config()
    p = init_params(cfg, Rng(7))
    x = np.random.default_rng(7).random((3, 3, 12, 20))
    save_checkpoint(p, tmp_path / "ck")
    q = load_checkpoint(tmp_path / "ck")
    assert q.cfg == cfg
    assert all(np.array_equal(p[k], q[k]) and q[k].dtype == np.float32 for k in p.tensors)
    assert np.array_equal(forward(p, x), forward(q, x))


def test_checkpoint_keeps_output_scale(tmp_path):
    p = init_params(NetworkConfig(channels=1, output_scale=100.0), Rng(0))
    save_checkpoint(p, tmp_path / "ck")
    assert load_checkpoint(tmp_path / "ck").cfg.output_scale == 100.0


def test_tampered_extents_rejected(tmp_path):
    save_checkpoint(init_params(shrunken_config(), Rng(0)), tmp_path / "ck")
    m = tmp_path / "ck" / "manifest.txt"
    m.write_text(m.read_text().replace("conv1.weight 3x3x5x5", "conv1.weight 3x3x5x4"))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck")


def test_missing_tensor_rejected(tmp_path):
    save_checkpoint(init_params(shrunken_config(), Rng(0)), tmp_path / "ck")
    (tmp_path / "ck" / "fc2.bias.tnsr").unlink()
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nothing")
