"""Training loop: loss/optimizer oracles, attainability, determinism."""

import math

import numpy as np
import pytest

from quantnoise import autodiff as ad
from quantnoise import models as M
from quantnoise.errors import ConfigError, NumericError
from quantnoise.rng import RngStream
from quantnoise.training import (
    AdamState, TrainConfig, adam_step, cosine_lr, cross_entropy, train,
)


def naive_cross_entropy(logits, labels):
    total = 0.0
    for i in range(logits.shape[0]):
        row = logits[i].astype(np.float64)
        mx = row.max()
        denom = np.sum(np.exp(row - mx))
        total += -(row[labels[i]] - mx - np.log(denom))
    return total / logits.shape[0]


def test_cross_entropy_uniform_logits():
    logits = ad.leaf(np.zeros((4, 10), dtype=np.float32))
    loss = cross_entropy(logits, np.array([1, 2, 3, 4]))
    assert abs(float(loss.value) - math.log(10)) < 1e-6


def test_cross_entropy_confident_logits():
    logits = np.full((3, 10), -50.0, dtype=np.float32)
    labels = np.array([0, 5, 9])
    logits[np.arange(3), labels] = 50.0
    loss = cross_entropy(ad.leaf(logits), labels)
    assert float(loss.value) < 1e-6


def test_cross_entropy_matches_naive_reference():
    s = RngStream(90)
    logits = s.gaussian((32, 10), 0.0, 3.0)
    labels = s.integers(32, 10)
    loss = cross_entropy(ad.leaf(logits), labels)
    assert abs(float(loss.value) - naive_cross_entropy(logits, labels)) < 1e-6


def test_adam_zero_gradient_keeps_params():
    params = {"w": np.array([1.0, -2.0], dtype=np.float32)}
    state = AdamState.init(params)
    before = params["w"].copy()
    adam_step(params, {"w": np.zeros(2, dtype=np.float32)}, state, lr=0.1)
    assert np.array_equal(params["w"], before)
    # pre-existing moments decay toward zero under a zero gradient
    state.m["w"][:] = 0.5
    state.v["w"][:] = 0.25
    adam_step(params, {"w": np.zeros(2, dtype=np.float32)}, state, lr=0.0)
    assert np.all(state.m["w"] == np.float32(0.45))
    assert np.all(state.v["w"] < 0.25)


def test_adam_single_step_closed_form():
    g = np.array([0.3, -2.0, 1e-4], dtype=np.float32)
    params = {"w": np.zeros(3, dtype=np.float32)}
    state = AdamState.init(params)
    lr, eps = 0.01, 1e-8
    adam_step(params, {"w": g}, state, lr=lr, eps=eps)
    expect = -lr * g / (np.abs(g) + eps)
    assert np.allclose(params["w"], expect, rtol=1e-5)


def test_cosine_endpoints():
    assert cosine_lr(1e-3, 0, 100) == 1e-3
    assert abs(cosine_lr(1e-3, 50, 100) - 5e-4) < 1e-12
    assert abs(cosine_lr(1e-3, 100, 100)) < 1e-12


def _blobs(n=200, seed=1):
    """Well-separated 10-class points embedded as 1x4x4 images."""
    s = RngStream(seed)
    labels = np.arange(n) % 10
    centers = s.derive(1).uniform((10, 16)) * 3.0
    x = centers[labels] + s.derive(2).gaussian((n, 16), 0.0, 0.10,
                                               dtype=np.float64)
    images = np.clip(x / 3.0, 0.0, 1.0).reshape(n, 1, 4, 4).astype(np.float32)
    return images, labels.astype(np.int64)


def _tiny_mlp():
    layers = (
        M._mk("flat", "flatten", [M.INPUT]),
        M._mk("fc1", "linear", ["flat"], units=32),
        M._mk("relu1", "relu", ["fc1"]),
        M._mk("fc2", "linear", ["relu1"], units=10),
    )
    return M.ModelSpec("tinymlp", (1, 4, 4), 10, layers, "fc2")


def test_separable_problem_reaches_full_train_accuracy():
    images, labels = _blobs()
    cfg = TrainConfig(epochs=20, batch_size=32, lr=1e-2, seed=3)
    res = train(_tiny_mlp(), images, labels, images, labels, cfg)
    assert res.history.train_acc[-1] == 1.0


def test_training_bit_deterministic():
    images, labels = _blobs(120, seed=2)
    cfg = TrainConfig(epochs=3, batch_size=32, lr=1e-3, seed=11,
                      sigma_train=0.2)
    r1 = train(_tiny_mlp(), images, labels, images, labels, cfg)
    r2 = train(_tiny_mlp(), images, labels, images, labels, cfg)
    assert r1.history.train_loss == r2.history.train_loss
    assert r1.history.test_acc == r2.history.test_acc
    for k in r1.params:
        assert np.array_equal(r1.params[k], r2.params[k])


def test_noisy_training_at_sigma_zero_equals_plain():
    images, labels = _blobs(120, seed=4)
    cfg0 = TrainConfig(epochs=3, batch_size=32, lr=1e-3, seed=5, sigma_train=0.0)
    res0 = train(_tiny_mlp(), images, labels, images, labels, cfg0)
    res1 = train(_tiny_mlp(), images, labels, images, labels, cfg0)
    for k in res0.params:
        assert np.array_equal(res0.params[k], res1.params[k])
    assert res0.history.test_acc_noisy == res0.history.test_acc


def test_nan_loss_aborts_with_diagnostic():
    images, labels = _blobs(64, seed=6)
    cfg = TrainConfig(epochs=2, batch_size=32, lr=1e30, seed=7)
    with pytest.raises(NumericError):
        train(_tiny_mlp(), images, labels, images, labels, cfg)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(sigma_train=-1.0)


def test_history_lengths_match_epochs():
    images, labels = _blobs(60, seed=8)
    cfg = TrainConfig(epochs=4, batch_size=16, lr=1e-3, seed=9)
    res = train(_tiny_mlp(), images, labels, images, labels, cfg)
    h = res.history
    for field in (h.epoch, h.lr, h.train_loss, h.train_acc, h.test_acc,
                  h.test_acc_noisy):
        assert len(field) == 4


def test_quantized_training_keeps_float_weights_and_freezes():
    from quantnoise.quantizer import QuantSettings
    images, labels = _blobs(60, seed=10)
    cfg = TrainConfig(epochs=2, batch_size=16, lr=1e-3, seed=12,
                      quant=QuantSettings(bit_width=8))
    res = train(_tiny_mlp(), images, labels, images, labels, cfg)
    assert res.quantset is not None and res.quantset.frozen
    for v in res.params.values():
        assert v.dtype == np.float32
    # stored weights are full precision: most are off the 8-bit grid
    w = res.params["fc1.w"]
    from quantnoise.quantizer import fake_quantize_array
    cfgw = res.quantset.weight_config("fc1", w)
    assert not np.array_equal(fake_quantize_array(w, cfgw), w)


def test_grid_aware_init_for_constant_scaling():
    """Constant-scale training sizes the first layer for the grid; the
    network must not sit at a constant output after epoch one."""
    from quantnoise.quantizer import QuantSettings
    images, labels = _blobs(200, seed=14)
    big = TrainConfig(epochs=40, batch_size=32, lr=3e-3, seed=15,
                      quant=QuantSettings(bit_width=8, scaling="constant",
                                          constant_scale=8.0))
    res = train(_tiny_mlp(), images, labels, images, labels, big)
    assert res.history.train_acc[-1] > 0.5    # escaped the dead-grid trap

    # calibrated mode keeps plain Kaiming init (no rescale path)
    cal = TrainConfig(epochs=10, batch_size=32, lr=3e-3, seed=15,
                      quant=QuantSettings(bit_width=8))
    res2 = train(_tiny_mlp(), images, labels, images, labels, cal)
    assert res2.history.test_acc[-1] > 0.5


def test_warm_start_from_existing_params():
    images, labels = _blobs(120, seed=20)
    cfg1 = TrainConfig(epochs=3, batch_size=32, lr=1e-2, seed=21)
    first = train(_tiny_mlp(), images, labels, images, labels, cfg1)
    cfg2 = TrainConfig(epochs=2, batch_size=32, lr=1e-3, seed=22,
                       sigma_train=0.1)
    resumed = train(_tiny_mlp(), images, labels, images, labels, cfg2,
                    init_params=first.params)
    # warm start must help relative to 2 epochs from scratch
    scratch = train(_tiny_mlp(), images, labels, images, labels, cfg2)
    assert resumed.history.test_acc[-1] >= scratch.history.test_acc[-1]
    # and be deterministic
    again = train(_tiny_mlp(), images, labels, images, labels, cfg2,
                  init_params=first.params)
    for k in resumed.params:
        assert np.array_equal(resumed.params[k], again.params[k])
    with pytest.raises(ConfigError):
        train(_tiny_mlp(), images, labels, images, labels, cfg2,
              init_params={"wrong.w": np.zeros(3, dtype=np.float32)})
