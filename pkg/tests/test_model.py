import copy

import numpy as np
import pytest

from sparsebp import autodiff as ad
from sparsebp.autodiff import Parameter, Tensor
from sparsebp.geometry import circle_mask, radon_forward, uniform_angles
from sparsebp.model import (
    N_LAYERS,
    CheckpointError,
    SensorCalibration,
    generator_forward,
    init_params,
    load_checkpoint,
    projector_forward,
    save_checkpoint,
)

from conftest import rel_error


def test_architecture_layout():
    params, calib = init_params(4, 0, width=8)
    assert len(params.layers) == N_LAYERS == 17
    assert params.layers[0].kernel.shape == (8, 4, 3, 3)
    assert params.layers[-1].kernel.shape == (1, 8, 3, 3)
    for i, layer in enumerate(params.layers):
        assert (layer.bn is not None) == (0 < i < 16)
        assert layer.bias.data.shape == (layer.kernel.shape[0],)
    assert calib.w.data.shape == (4,)


def test_default_width_is_64():
    params, _ = init_params(2, 0)
    assert params.width == 64
    assert all(layer.kernel.shape[0] == 64 for layer in params.layers[:-1])


def test_init_is_deterministic():
    a, _ = init_params(3, 42, width=8)
    b, _ = init_params(3, 42, width=8)
    for p, q in zip(a.parameters(), b.parameters()):
        assert p.data.tobytes() == q.data.tobytes()
    c, _ = init_params(3, 43, width=8)
    assert not np.array_equal(a.layers[0].kernel.data, c.layers[0].kernel.data)


@pytest.mark.parametrize("trainable", [False, True])
def test_init_calibration_is_identity(trainable):
    params, calib = init_params(5, 0, width=4, calib_trainable=trainable)
    np.testing.assert_array_equal(calib.w.data, 1.0)
    np.testing.assert_array_equal(calib.b.data, 0.0)
    assert calib.trainable is trainable
    for layer in params.layers:
        np.testing.assert_array_equal(layer.bias.data, 0.0)
        if layer.gamma is not None:
            np.testing.assert_array_equal(layer.gamma.data, 1.0)
            np.testing.assert_array_equal(layer.beta.data, 0.0)


def test_first_layer_he_std():
    n = 18  # 64 * 18 * 9 = 10368 samples
    params, _ = init_params(n, 1)
    k = params.layers[0].kernel.data
    assert k.size >= 10_000
    assert abs(k.std() / np.sqrt(2 / (9 * n)) - 1) <= 0.2


def test_frozen_calibration_is_forced_to_identity():
    calib = SensorCalibration(Parameter(np.full(3, 2.0)), Parameter(np.ones(3)), trainable=False)
    np.testing.assert_array_equal(calib.w.data, 1.0)
    np.testing.assert_array_equal(calib.b.data, 0.0)
    assert not calib.w.requires_grad


# generator ------------------------------------------------------------------


def test_zero_stack_gives_zero_output():
    params, _ = init_params(3, 0, width=8)
    out = generator_forward(np.zeros((2, 3, 16, 16)), params)
    assert np.all(out.data == 0)


@pytest.mark.parametrize("n,side", [(1, 32), (2, 64), (4, 32), (3, 128)])
def test_generator_output_shape(n, side, rng):
    params, _ = init_params(n, 0, width=4 if side == 128 else 8)
    out = generator_forward(rng.normal(size=(1, n, side, side)), params)
    assert out.shape == (1, 1, side, side)
    assert np.all(out.data[0, 0][~circle_mask(side)] == 0)


def test_generator_full_width_shape(rng):
    params, _ = init_params(2, 0)
    assert generator_forward(rng.normal(size=(1, 2, 32, 32)), params).shape == (1, 1, 32, 32)


def test_generator_channel_mismatch(rng):
    params, _ = init_params(2, 0, width=4)
    with pytest.raises(ad.ShapeError):
        generator_forward(rng.normal(size=(1, 3, 8, 8)), params)


def test_last_layer_is_linear(rng):
    params, _ = init_params(2, 3, width=8)
    out = generator_forward(rng.normal(size=(2, 2, 16, 16)), params)
    assert out.data.min() < 0 < out.data.max()


def test_eval_needs_running_stats(rng):
    params, _ = init_params(2, 0, width=4)
    x = rng.normal(size=(2, 2, 8, 8))
    with pytest.raises(RuntimeError):
        generator_forward(x, params, "eval")
    generator_forward(x, params, "train")
    generator_forward(x, params, "eval")


def test_generator_kernel_gradient_full_width(rng):
    """Sum of the output w.r.t. a sample of first-layer weights, N=8, n=2."""
    x = rng.normal(size=(1, 2, 8, 8))
    params, _ = init_params(2, 5)
    trial = copy.deepcopy(params)
    ad.backward(ad.tsum(generator_forward(x, trial)))
    analytic = trial.layers[0].kernel.grad
    kernel = params.layers[0].kernel.data
    eps = 1e-6
    picks = [tuple(rng.integers(0, s) for s in kernel.shape) for _ in range(12)]
    num, ana = [], []
    for idx in picks:
        vals = []
        for sign in (1, -1):
            probe = copy.deepcopy(params)
            probe.layers[0].kernel.data[idx] += sign * eps
            vals.append(generator_forward(x, probe).data.sum())
        num.append((vals[0] - vals[1]) / (2 * eps))
        ana.append(analytic[idx])
    assert rel_error(np.array(num), np.array(ana)) <= 1e-3


def test_every_parameter_receives_gradient(rng):
    n, side = 3, 12
    params, calib = init_params(n, 2, width=6, calib_trainable=True)
    recon = generator_forward(rng.normal(size=(2, n, side, side)), params)
    pred = projector_forward(recon, uniform_angles(n), calib)
    target = rng.normal(size=pred.shape)
    ad.backward(ad.mean(ad.square(pred - target)))
    for p in params.parameters() + calib.parameters():
        assert p.grad is not None and np.any(p.grad != 0), p.name


# projector ------------------------------------------------------------------


def test_identity_projector_equals_radon(rng):
    img = rng.random((16, 16)) * circle_mask(16)
    angles = uniform_angles(5)
    pred = projector_forward(img, angles, SensorCalibration.identity(5))
    np.testing.assert_array_equal(pred.data[0], radon_forward(img, angles).data)


def test_affine_projection_of_zero_image():
    calib = SensorCalibration(Parameter(np.full(4, 2.0)), Parameter(np.full(4, 5.0)), trainable=True)
    pred = projector_forward(np.zeros((10, 10)), uniform_angles(4), calib)
    np.testing.assert_array_equal(pred.data, 5.0)


def test_projector_batch_shape(rng):
    pred = projector_forward(rng.normal(size=(3, 1, 8, 8)), uniform_angles(2), SensorCalibration.identity(2))
    assert pred.shape == (3, 2, 8)


def test_projector_calibration_length_mismatch():
    with pytest.raises(ad.ShapeError):
        projector_forward(np.zeros((8, 8)), uniform_angles(3), SensorCalibration.identity(2))


def test_projector_gradients_match_fd(rng):
    side, n = 16, 4
    angles = uniform_angles(n)
    img = rng.normal(size=(side, side))
    w, b = rng.normal(size=n), rng.normal(size=n)
    weights = rng.normal(size=(1, n, side, side)).sum(axis=2)

    def value(img_, w_, b_):
        calib = SensorCalibration(Parameter(w_.copy()), Parameter(b_.copy()), trainable=True)
        return float((projector_forward(img_, angles, calib).data * weights).sum())

    x = Tensor(img.copy(), requires_grad=True)
    calib = SensorCalibration(Parameter(w.copy()), Parameter(b.copy()), trainable=True)
    ad.backward(ad.tsum(ad.mul(projector_forward(x, angles, calib), weights)))

    eps = 1e-6
    for (r, c) in [(8, 8), (3, 10), (12, 5)]:
        up, dn = img.copy(), img.copy()
        up[r, c] += eps
        dn[r, c] -= eps
        num = (value(up, w, b) - value(dn, w, b)) / (2 * eps)
        assert abs(num - x.grad[r, c]) <= 1e-6 * max(abs(num), 1e-12)
    for i in range(n):
        e = np.zeros(n)
        e[i] = eps
        num_w = (value(img, w + e, b) - value(img, w - e, b)) / (2 * eps)
        num_b = (value(img, w, b + e) - value(img, w, b - e)) / (2 * eps)
        assert abs(num_w - calib.w.grad[i]) <= 1e-6 * max(abs(num_w), 1e-12)
        assert abs(num_b - calib.b.grad[i]) <= 1e-6 * max(abs(num_b), 1e-12)


def test_sum_gradient_w_r_t_pixel(rng):
    side, n = 16, 4
    angles = uniform_angles(n)
    img = rng.random((side, side))
    x = Tensor(img.copy(), requires_grad=True)
    ad.backward(ad.tsum(projector_forward(x, angles, SensorCalibration.identity(n))))
    eps = 1e-6
    up, dn = img.copy(), img.copy()
    up[7, 9] += eps
    dn[7, 9] -= eps
    num = (radon_forward(up, angles).data.sum() - radon_forward(dn, angles).data.sum()) / (2 * eps)
    assert abs(num - x.grad[7, 9]) / abs(num) <= 1e-6


# checkpoints ----------------------------------------------------------------


def _trained_like(n=3, width=4, seed=0):
    params, calib = init_params(n, seed, width=width, calib_trainable=True)
    generator_forward(np.random.default_rng(seed).normal(size=(2, n, 8, 8)), params)
    calib.w.data = np.array([1.1, 0.9, 1.3])
    calib.b.data = np.array([0.1, -0.2, 0.0])
    return params, calib


def test_checkpoint_roundtrip_bitwise(tmp_path):
    params, calib = _trained_like()
    save_checkpoint(tmp_path / "m.ckpt", params, calib, side=8)
    p2, c2, side = load_checkpoint(tmp_path / "m.ckpt")
    assert side == 8 and c2.trainable
    for a, b in zip(params.parameters() + calib.parameters(), p2.parameters() + c2.parameters()):
        assert a.data.tobytes() == b.data.tobytes()
    for s1, s2 in zip(params.bn_states(), p2.bn_states()):
        assert s1.running_mean.tobytes() == s2.running_mean.tobytes()
        assert s1.running_var.tobytes() == s2.running_var.tobytes()


def test_checkpoint_layout(tmp_path):
    params, calib = init_params(2, 0, width=4)
    save_checkpoint(tmp_path / "m.ckpt", params, calib, side=16)
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:5] == b"SPRJ1"
    assert np.frombuffer(raw[5:21], dtype="<u4").tolist() == [2, 16, 17, 4]
    count = sum(p.data.size for p in params.parameters()) + 2 * sum(s.channels for s in params.bn_states()) + 4
    assert len(raw) == 21 + 8 * count
    p2, c2, _ = load_checkpoint(tmp_path / "m.ckpt")
    assert not c2.trainable
    assert not any(s.initialized for s in p2.bn_states())


@pytest.mark.parametrize("damage", ["magic", "truncate", "trailing"])
def test_checkpoint_corruption(tmp_path, damage):
    params, calib = _trained_like()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, calib, side=8)
    raw = path.read_bytes()
    raw = {"magic": b"XXXXX" + raw[5:], "truncate": raw[:-3], "trailing": raw + b"\0"}[damage]
    path.write_bytes(raw)
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(path)
    assert "m.ckpt" in str(err.value)
