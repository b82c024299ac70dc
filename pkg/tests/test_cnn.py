import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fibermd.cnn import (
    CHECKPOINT_MAGIC, ConvBlock, ConvNet, NetworkConfig, backward, conv2d_backward,
    conv2d_forward, forward, maxpool2, maxpool2_backward, maxpool2_forward, mse_loss,
    read_checkpoint, relu, sigmoid, write_checkpoint,
)
from fibermd.errors import FormatError, OddDimension, ShapeMismatch
from fibermd.fiber_modes import SIM_FIBER, basis_for
from fibermd.field_synth import decode_label, synth_batch
from fibermd.training import TrainConfig, train


def loop_conv(x, w, b):
    """Direct nested-loop same-padded cross-correlation (NCHW)."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    xp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
    xp[:, :, p:p + h, p:p + wd] = x
    out = np.zeros((n, o, h, wd))
    for i in range(n):
        for oc in range(o):
            for r in range(h):
                for s in range(wd):
                    acc = b[oc]
                    for ic in range(c):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[i, ic, r + u, s + v] * w[oc, ic, u, v]
                    out[i, oc, r, s] = acc
    return out


def tiny_config(output_dim=3):
    # two convs on an 8x8 input, one pooled
    return NetworkConfig(8, (ConvBlock(1, 2), ConvBlock(1, 3)), (4,), output_dim)


def central_difference(fn, arr, eps=1e-6):
    grad = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + eps
        up = fn()
        arr[idx] = old - eps
        down = fn()
        arr[idx] = old
        grad[idx] = (up - down) / (2 * eps)
    return grad


def assert_grad_close(analytic, numeric, rel=1e-4, floor=1e-6):
    err = np.abs(analytic - numeric)
    assert np.all(err <= rel * np.abs(numeric) + floor), err.max()


# ---------------------------------------------------------------------------
# layers


def test_identity_1x1_conv():
    x = np.random.default_rng(0).standard_normal((2, 3, 5, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    out, _ = conv2d_forward(x, w, np.zeros(3))
    np.testing.assert_array_equal(out, x)


def test_impulse_gives_plateau():
    x = np.zeros((1, 1, 7, 7))
    x[0, 0, 3, 3] = 1
    out, _ = conv2d_forward(x, np.ones((1, 1, 3, 3)), np.zeros(1))
    expected = np.zeros((7, 7))
    expected[2:5, 2:5] = 1
    np.testing.assert_array_equal(out[0, 0], expected)


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv_matches_loop_oracle(k):
    rng = np.random.default_rng(k)
    x = rng.standard_normal((2, 2, 5, 5))
    w = rng.standard_normal((3, 2, k, k))
    b = rng.standard_normal(3)
    out, _ = conv2d_forward(x, w, b)
    np.testing.assert_allclose(out, loop_conv(x, w, b), atol=1e-12)


def test_conv_shape_errors():
    x = np.zeros((1, 2, 5, 5))
    with pytest.raises(ShapeMismatch):
        conv2d_forward(x, np.zeros((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeMismatch):
        conv2d_forward(x, np.zeros((1, 2, 2, 2)), np.zeros(1))
    with pytest.raises(ShapeMismatch):
        conv2d_forward(x, np.zeros((1, 2, 3, 3)), np.zeros(2))


def test_conv_backward_finite_difference():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    probe = rng.standard_normal((2, 3, 5, 5))

    def f():
        return float(np.sum(conv2d_forward(x, w, b)[0] * probe))

    _, cache = conv2d_forward(x, w, b)
    dx, dw, db = conv2d_backward(probe, cache)
    assert_grad_close(dx, central_difference(f, x))
    assert_grad_close(dw, central_difference(f, w))
    assert_grad_close(db, central_difference(f, b))


def test_maxpool_examples():
    np.testing.assert_array_equal(maxpool2(np.array([[[[1., 2.], [3., 4.]]]])), [[[[4.]]]])
    out = maxpool2(np.full((1, 2, 6, 4), 7.0))
    assert out.shape == (1, 2, 3, 2) and np.all(out == 7.0)
    with pytest.raises(OddDimension):
        maxpool2(np.zeros((1, 1, 5, 4)))


def test_maxpool_gradient_routes_to_argmax():
    rng = np.random.default_rng(4)
    x = rng.permutation(64).astype(float).reshape(1, 1, 8, 8)  # distinct values, no ties
    probe = rng.standard_normal((1, 1, 4, 4))
    out, cache = maxpool2_forward(x)
    dx = maxpool2_backward(probe, cache)
    numeric = central_difference(lambda: float(np.sum(maxpool2(x) * probe)), x, eps=1e-3)
    np.testing.assert_allclose(dx, numeric, atol=1e-9)
    assert np.count_nonzero(dx) == 16


def test_maxpool_tie_goes_to_first():
    x = np.ones((1, 1, 2, 2))
    _, cache = maxpool2_forward(x)
    dx = maxpool2_backward(np.ones((1, 1, 1, 1)), cache)
    np.testing.assert_array_equal(dx[0, 0], [[1, 0], [0, 0]])


def test_activations():
    np.testing.assert_array_equal(relu(np.array([-1.0, 2.0])), [0.0, 2.0])
    assert sigmoid(np.array([0.0]))[0] == 0.5
    s = sigmoid(np.array([-800.0, -30.0, 30.0, 800.0]))
    assert np.all(np.isfinite(s)) and np.all(s >= 0) and np.all(s <= 1)
    assert s[1] > 0 and s[2] < 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=20))
def test_sigmoid_open_interval(xs):
    s = sigmoid(np.array(xs))
    assert np.all((s > 0) & (s < 1))


def test_mse_examples():
    y = np.array([[0.2, 0.4]])
    assert mse_loss(y, y)[0] == 0
    loss, grad = mse_loss(np.array([[1.0, 0.0]]), np.zeros((1, 2)))
    assert loss == 1.0
    np.testing.assert_array_equal(grad, [[2.0, 0.0]])
    with pytest.raises(ShapeMismatch):
        mse_loss(np.zeros((2, 3)), np.zeros((2, 2)))


def test_mse_gradient_finite_difference():
    rng = np.random.default_rng(5)
    out = rng.random((4, 5))
    lab = rng.random((4, 5))
    _, grad = mse_loss(out, lab)
    numeric = central_difference(lambda: mse_loss(out, lab)[0], out)
    np.testing.assert_allclose(grad, numeric, rtol=1e-6, atol=1e-10)


# ---------------------------------------------------------------------------
# network


def test_zero_weights_output_half():
    net = ConvNet.zeros(tiny_config())
    out = net(np.random.default_rng(0).random((3, 8, 8)))
    assert np.all(out == 0.5)


def test_identical_images_identical_rows():
    net = ConvNet.initialize(tiny_config(), np.random.default_rng(0))
    img = np.random.default_rng(1).random((8, 8))
    out = net(np.stack([img] * 4))
    assert np.all(out == out[0])


def test_forward_shape_and_range():
    cfg = NetworkConfig.compact(3, 32)
    net = ConvNet.initialize(cfg, np.random.default_rng(0))
    out = forward(cfg, net.params, np.random.default_rng(1).random((2, 32, 32)))
    assert out.shape == (2, 5)
    assert np.all((out > 0) & (out < 1))
    with pytest.raises(ShapeMismatch):
        net(np.zeros((2, 16, 16)))


def test_full_gradient_finite_difference():
    cfg = tiny_config()
    rng = np.random.default_rng(6)
    net = ConvNet.initialize(cfg, rng).astype(np.float64)
    for p in net.params:
        p += 0.1 * rng.standard_normal(p.shape)  # nonzero biases too
    images = rng.random((3, 8, 8))
    labels = rng.random((3, 3))
    grads = backward(cfg, net.params, images, labels)
    for p, g in zip(net.params, grads):
        assert_grad_close(g, central_difference(lambda: net.loss(images, labels), p))


def test_unused_output_row_has_zero_gradient():
    cfg = tiny_config()
    net = ConvNet.initialize(cfg, np.random.default_rng(7)).astype(np.float64)
    images = np.random.default_rng(8).random((4, 8, 8))
    labels = np.random.default_rng(9).random((4, 3))
    labels[:, 1] = net(images)[:, 1]
    _, grads = net.loss_and_grads(images, labels)
    assert np.all(grads[-2][1] == 0) and grads[-1][1] == 0


def test_single_sgd_step_descends():
    cfg = tiny_config()
    net = ConvNet.initialize(cfg, np.random.default_rng(10)).astype(np.float64)
    images = np.random.default_rng(11).random((8, 8, 8))
    labels = np.random.default_rng(12).random((8, 3))
    before, grads = net.loss_and_grads(images, labels)
    net.sgd_step(grads, 1e-3)
    assert net.loss(images, labels) < before


def test_sgd_rejects_nonfinite():
    net = ConvNet.zeros(tiny_config())
    grads = [np.zeros_like(p) for p in net.params]
    grads[0][0, 0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        net.sgd_step(grads, 0.1)


def test_overfit_small_fixed_set():
    basis = basis_for(SIM_FIBER, 16, 3)
    images, labels, _ = synth_batch(basis, np.random.default_rng(0), 32)
    cfg = NetworkConfig(16, (ConvBlock(1, 8), ConvBlock(1, 16)), (64,), 5)
    net = ConvNet.initialize(cfg, np.random.default_rng(1))
    loss = np.inf
    for _ in range(4000):
        loss, grads = net.loss_and_grads(images, labels)
        if loss < 1e-3:
            break
        net.sgd_step(grads, 1.0)
    assert loss < 1e-3


def test_network_outputs_always_decode():
    cfg = NetworkConfig.compact(3, 32)
    net = ConvNet.initialize(cfg, np.random.default_rng(2))
    for row in net(np.random.default_rng(3).random((8, 32, 32))):
        w, mags = decode_label(row)
        assert w.sum() == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# presets


def test_paper_preset_structure():
    cfg = NetworkConfig.paper(3)
    assert cfg.spatial_sizes() == [64, 32, 16, 8, 4]
    assert [b.conv_count for b in cfg.blocks] == [2, 2, 3, 3, 3]
    assert [b.out_channels for b in cfg.blocks] == [64, 128, 256, 512, 512]
    shapes = cfg.param_shapes()
    assert shapes[0] == (64, 1, 3, 3)
    assert shapes[-4] == (1024, 4 * 4 * 512)
    assert shapes[-2] == (5, 1024)
    assert cfg.output_dim == 5
    with pytest.raises(ValueError):
        NetworkConfig.paper(3, 224)


def test_paper_preset_forward_and_spot_gradient():
    cfg = NetworkConfig.paper(3)
    rng = np.random.default_rng(0)
    net = ConvNet.initialize(cfg, rng)
    images = rng.random((1, 128, 128))
    labels = rng.random((1, 5))
    out = net(images)
    assert out.shape == (1, 5) and np.all((out > 0) & (out < 1))
    net64 = net.astype(np.float64)
    _, grads = net64.loss_and_grads(images, labels)
    assert all(np.all(np.isfinite(g)) and g.shape == p.shape for g, p in zip(grads, net64.params))
    # spot-check output bias and a first-FC weight entry by central differences
    eps = 1e-6
    for k, idx in ((-1, (2,)), (-4, (7, 100)), (0, (5, 0, 1, 1))):
        p = net64.params[k]
        old = p[idx]
        p[idx] = old + eps
        up = net64.loss(images, labels)
        p[idx] = old - eps
        down = net64.loss(images, labels)
        p[idx] = old
        assert_grad_close(grads[k][idx], (up - down) / (2 * eps))


def test_compact_preset():
    cfg = NetworkConfig.compact(3)
    assert cfg.input_resolution == 64 and cfg.spatial_sizes() == [32, 16, 8]
    assert cfg.fc_layers == (128,) and cfg.output_dim == 5
    assert NetworkConfig.preset("compact", 5).output_dim == 9
    with pytest.raises(ValueError):
        NetworkConfig.preset("huge", 3)


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(8, (ConvBlock(1, 2),), (), 4)
    with pytest.raises(OddDimension):
        NetworkConfig(6, (ConvBlock(1, 2), ConvBlock(1, 2)), (), 3)
    with pytest.raises(ShapeMismatch):
        ConvNet(tiny_config(), [])


# ---------------------------------------------------------------------------
# training


def small_training_setup(seed=0, epochs=2):
    basis = basis_for(SIM_FIBER, 16, 3)
    cfg = NetworkConfig(16, (ConvBlock(1, 4), ConvBlock(1, 8)), (16,), 5)
    tc = TrainConfig(samples_per_epoch=128, batch_size=32, epochs=epochs,
                     lr_schedule=((0, 0.05),), seed=seed, holdout_size=4)
    return basis, cfg, tc


def test_training_deterministic():
    basis, cfg, tc = small_training_setup()
    a, ha = train(basis, cfg, tc)
    b, hb = train(basis, cfg, tc)
    for p, q in zip(a.params, b.params):
        np.testing.assert_array_equal(p, q)
    assert [r.loss for r in ha] == [r.loss for r in hb]


def test_training_seed_changes_weights():
    basis, cfg, tc = small_training_setup()
    a, _ = train(basis, cfg, tc)
    b, _ = train(basis, cfg, TrainConfig(**{**tc.__dict__, "seed": 1}))
    assert not np.array_equal(a.params[0], b.params[0])


def test_training_loss_falls_over_epochs():
    basis = basis_for(SIM_FIBER, 32, 3)
    cfg = NetworkConfig.compact(3, 32)
    tc = TrainConfig(samples_per_epoch=640, batch_size=64, epochs=5,
                     lr_schedule=((0, 0.01),), seed=0, holdout_size=0)
    _, history = train(basis, cfg, tc)
    assert len(history) == 5 and [r.epoch for r in history] == [1, 2, 3, 4, 5]
    assert history[4].loss < history[0].loss


def test_training_history_callback_and_mismatch():
    basis, cfg, tc = small_training_setup(epochs=1)
    seen = []
    train(basis, cfg, tc, on_epoch=seen.append)
    assert len(seen) == 1 and 0 <= seen[0].holdout_correlation <= 1
    from fibermd.errors import DimensionMismatch
    with pytest.raises(DimensionMismatch):
        train(basis_for(SIM_FIBER, 16, 5), cfg, tc)


def test_learning_rate_schedule():
    tc = TrainConfig.paper()
    assert tc.learning_rate(0) == 0.01 and tc.learning_rate(19) == 0.01
    assert tc.learning_rate(20) == 0.001 and tc.learning_rate(29) == 0.001
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule=((0, 0.0),))


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip(tmp_path):
    net = ConvNet.initialize(NetworkConfig.compact(5, 32), np.random.default_rng(0))
    path = tmp_path / "net.fmdc"
    write_checkpoint(net, path)
    raw = path.read_bytes()
    assert raw[:4] == CHECKPOINT_MAGIC and raw[4:6] == b"\x01\x00"
    back = read_checkpoint(path)
    assert back.config == net.config
    for p, q in zip(net.params, back.params):
        np.testing.assert_array_equal(p, q)
    buf = io.BytesIO()
    write_checkpoint(net, buf)
    assert buf.getvalue() == raw


def test_checkpoint_truncation_names_offset():
    net = ConvNet.initialize(tiny_config(), np.random.default_rng(0))
    buf = io.BytesIO()
    write_checkpoint(net, buf)
    raw = buf.getvalue()
    for cut in (2, 5, 20, len(raw) - 1):
        with pytest.raises(FormatError, match="byte"):
            read_checkpoint(raw[:cut])


def test_checkpoint_rejects_bad_magic_and_trailing():
    net = ConvNet.initialize(tiny_config(), np.random.default_rng(0))
    buf = io.BytesIO()
    write_checkpoint(net, buf)
    raw = buf.getvalue()
    with pytest.raises(FormatError, match="magic"):
        read_checkpoint(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="trailing"):
        read_checkpoint(raw + b"\0")
    with pytest.raises(FormatError, match="version"):
        read_checkpoint(raw[:4] + b"\x09\x00" + raw[6:])
