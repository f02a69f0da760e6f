"""Quantizer contracts: scalar-oracle equivalence, STE, calibration."""

import numpy as np
import pytest

from quantnoise import autodiff as ad
from quantnoise import models as M
from quantnoise.errors import ConfigError, NumericError
from quantnoise.quantizer import (
    CONSTANT, PER_CHANNEL, CalibState, QuantConfig, QuantSettings,
    calibrate_update, dequantize, fake_quantize, fake_quantize_array,
    grid_limits, make_quantizers, quantize, scale_from_range, ste_mask,
)
from quantnoise.rng import RngStream


def scalar_fake_quant(x, s, z, q_min, q_max):
    """Direct per-scalar transcription of the affine quantization map.

    Independent oracle: pure Python float64 arithmetic, round half to
    even via the float round() builtin.
    """
    q = round(float(x) / s) + z
    q = min(max(q, q_min), q_max)
    return np.float32(s * (q - z))


def test_scale_from_range_examples():
    assert abs(scale_from_range(-1.0, 1.0, 8) - 2.0 / 255.0) < 1e-12
    for b in (2, 4, 8):
        assert scale_from_range(0.0, 2.0 ** b - 1, b) == 1.0
    assert scale_from_range(-8.0, 7.9375, 8) == 0.0625
    with pytest.raises(ConfigError):
        scale_from_range(1.0, 1.0, 8)


def test_grid_limits():
    assert grid_limits(8, signed=False) == (0, 255)
    assert grid_limits(8, signed=True) == (-128, 127)
    assert grid_limits(4, signed=True) == (-8, 7)
    assert grid_limits(4, signed=True, narrow=True) == (-7, 7)


def test_quantize_examples():
    cfg8 = QuantConfig(bit_width=8, signed=True, symmetric=True, scale=0.5)
    assert quantize(np.array([1.0], dtype=np.float32), cfg8)[0] == 2
    cfg4 = QuantConfig(bit_width=4, signed=True, symmetric=True, scale=0.5)
    assert quantize(np.array([100.0], dtype=np.float32), cfg4)[0] == 7
    assert quantize(np.array([-0.26], dtype=np.float32), cfg8)[0] == -1


def test_quantize_rejects_non_finite():
    cfg = QuantConfig(bit_width=8, signed=True, symmetric=True, scale=0.5)
    with pytest.raises(NumericError):
        quantize(np.array([np.nan], dtype=np.float32), cfg)


def test_dequantize_examples():
    cfg = QuantConfig(bit_width=8, signed=True, symmetric=True, scale=0.5)
    assert dequantize(np.array([2]), cfg)[0] == 1.0
    assert dequantize(np.array([7]), cfg)[0] == 3.5
    assert dequantize(np.array([0]), cfg)[0] == 0.0
    with pytest.raises(ConfigError):
        dequantize(np.array([400]), cfg)


def test_config_invariants():
    with pytest.raises(ConfigError):   # symmetric demands z = 0
        QuantConfig(bit_width=8, signed=True, symmetric=True, scale=1.0,
                    zero_point=3)
    with pytest.raises(ConfigError):   # z inside the grid
        QuantConfig(bit_width=4, signed=False, symmetric=False, scale=1.0,
                    zero_point=99)
    with pytest.raises(ConfigError):
        QuantConfig(bit_width=1, signed=True, symmetric=True, scale=1.0)
    with pytest.raises(ConfigError):
        QuantConfig(bit_width=8, signed=True, symmetric=True, scale=-2.0)


def test_fake_quantize_scalar_example():
    cfg = QuantConfig(bit_width=8, signed=True, symmetric=True, scale=0.5)
    out = fake_quantize_array(np.array([0.26], dtype=np.float32), cfg)
    assert out[0] == np.float32(0.5)
    assert abs(out[0] - 0.26) <= 0.25 + 1e-9   # rounding error <= s/2


def test_fake_quantize_idempotent():
    stream = RngStream(50)
    for cfg in [
        QuantConfig(bit_width=8, signed=True, symmetric=True, scale=0.37),
        QuantConfig.from_range(-0.3, 4.7, 4, signed=False),
        QuantConfig.from_range(0.0, 1.0, 2, signed=False),
    ]:
        x = stream.gaussian((1000,), 0.0, 3.0)
        once = fake_quantize_array(x, cfg)
        twice = fake_quantize_array(once, cfg)
        assert np.array_equal(once, twice)


def test_fake_quantize_matches_scalar_oracle():
    stream = RngStream(51)
    for b in (2, 3, 4, 8):
        for signed in (True, False):
            for symmetric in (True, False):
                if symmetric:
                    if not signed:
                        continue
                    cfg = QuantConfig(bit_width=b, signed=True, symmetric=True,
                                      scale=0.23)
                else:
                    cfg = QuantConfig.from_range(-1.2 if signed else 0.0,
                                                 2.6, b, signed=signed)
                q_min, q_max = cfg.q_limits
                x = stream.gaussian((4000,), 0.0, 2.0)
                got = fake_quantize_array(x, cfg)
                ref = np.array([scalar_fake_quant(v, float(cfg.scale),
                                                  int(cfg.zero_point),
                                                  q_min, q_max)
                                for v in x], dtype=np.float32)
                assert np.array_equal(got, ref), (b, signed, symmetric)


def test_fake_quantize_output_within_clip_range():
    stream = RngStream(52)
    cfg = QuantConfig.from_range(-0.7, 1.9, 4, signed=False)
    x = stream.gaussian((5000,), 0.0, 5.0)
    out = fake_quantize_array(x, cfg)
    q = quantize(x, cfg)
    q_min, q_max = cfg.q_limits
    assert q.min() >= q_min and q.max() <= q_max
    assert out.min() >= cfg.alpha - 1e-7 and out.max() <= cfg.beta + 1e-7


def test_rounding_error_bound_inside_range():
    stream = RngStream(53)
    cfg = QuantConfig(bit_width=8, signed=True, symmetric=True, scale=0.1)
    x = np.clip(stream.gaussian((5000,), 0.0, 2.0),
                cfg.alpha, cfg.beta).astype(np.float32)
    out = fake_quantize_array(x, cfg)
    assert np.max(np.abs(out.astype(np.float64) - x)) <= 0.05 + 1e-7


def test_monotonicity():
    stream = RngStream(54)
    cfg = QuantConfig.from_range(-1.0, 1.5, 3, signed=True)
    x = np.sort(stream.gaussian((2000,), 0.0, 2.0))
    out = fake_quantize_array(x, cfg)
    assert np.all(np.diff(out) >= 0)


def test_odd_symmetry_on_narrow_grid():
    stream = RngStream(55)
    cfg = QuantConfig(bit_width=4, signed=True, symmetric=True, scale=0.3,
                      narrow=True)
    x = stream.gaussian((3000,), 0.0, 2.0)
    pos = fake_quantize_array(x, cfg)
    neg = fake_quantize_array(-x, cfg)
    assert np.array_equal(neg, -pos)


def test_ste_gradient_inside_outside():
    cfg = QuantConfig(bit_width=4, signed=True, symmetric=True, scale=0.5)
    # beta = 3.5, alpha = -4.0
    x = ad.leaf(np.array([0.26, 100.0, -100.0, 3.5, -4.0], dtype=np.float32))
    y = fake_quantize(x, cfg)
    (g,) = ad.grad(ad.sum_all(y), [x])
    assert np.array_equal(g, np.array([1, 0, 0, 1, 1], dtype=np.float32))


def test_ste_mask_is_exactly_binary():
    stream = RngStream(56)
    cfg = QuantConfig.from_range(-0.5, 0.5, 8, signed=True)
    x = stream.gaussian((10**4,), 0.0, 1.0)
    m = ste_mask(x, cfg)
    inside = (x.astype(np.float64) >= cfg.alpha) & (x.astype(np.float64) <= cfg.beta)
    assert np.array_equal(m, inside.astype(np.float32))


def test_per_channel_weight_config():
    stream = RngStream(57)
    w = stream.gaussian((4, 3, 3, 3), 0.0, 1.0)
    cfg = QuantConfig.symmetric_from_tensor(w, 8, channel_axis=0)
    assert cfg.granularity == PER_CHANNEL
    maxabs = np.abs(w).max(axis=(1, 2, 3))
    assert np.allclose(cfg.scale, maxabs / 127.0)
    out = fake_quantize_array(w, cfg)
    # per-channel: each channel obeys its own bound
    for f in range(4):
        assert np.max(np.abs(out[f] - w[f])) <= cfg.scale[f] / 2 + 1e-7


def test_calibrate_update_examples():
    st = CalibState(momentum=0.0)
    calibrate_update(st, np.array([-1.0, 2.0], dtype=np.float32))
    calibrate_update(st, np.array([-0.5, 1.0], dtype=np.float32))
    assert (st.running_min, st.running_max) == (-0.5, 1.0)  # momentum 0 replaces

    st1 = CalibState(momentum=1.0)
    calibrate_update(st1, np.array([0.0, 1.0], dtype=np.float32))
    calibrate_update(st1, np.array([-9.0, 9.0], dtype=np.float32))
    assert (st1.running_min, st1.running_max) == (0.0, 1.0)  # momentum 1 freezes

    st9 = CalibState(momentum=0.9, running_min=0.0, running_max=1.0,
                     initialized=True)
    calibrate_update(st9, np.array([-1.0, 3.0], dtype=np.float32))
    assert abs(st9.running_min - (-0.1)) < 1e-12
    assert abs(st9.running_max - 1.2) < 1e-12


def test_calibrate_update_after_freeze_rejected():
    st = CalibState()
    st.update(np.array([0.0, 1.0], dtype=np.float32)).freeze()
    with pytest.raises(ConfigError):
        st.update(np.array([0.0, 2.0], dtype=np.float32))


def test_make_quantizers_lenet_counts():
    model = M.build_lenet5()
    qs = make_quantizers(model, QuantSettings(bit_width=8))
    conv_sites = [k for k, v in qs.weight_plan.items() if v == 0]
    linear_sites = [k for k, v in qs.weight_plan.items() if v is None]
    assert len(conv_sites) == 2
    assert len(linear_sites) == 3
    assert len(qs.act_states) == 4      # one per relu site


def test_make_quantizers_constant_512():
    model = M.build_lenet5()
    qs = make_quantizers(model, QuantSettings(bit_width=8, scaling=CONSTANT,
                                              constant_scale=512.0))
    for layer in model.layers:
        if layer.kind == "relu":
            cfg = qs.activation_config(layer.id)
            assert cfg.scale == 512.0
            assert cfg.zero_point == 0
            assert cfg.signed


def test_make_quantizers_uniform_bit_width():
    model = M.build_lenet5()
    qs = make_quantizers(model, QuantSettings(bit_width=4))
    for layer in model.layers:
        if layer.kind == "conv":
            w = RngStream(1).gaussian((6, 3, 5, 5), 0.0, 0.1)
            assert qs.weight_config(layer.id, w).bit_width == 4
            break
    st = list(qs.act_states.values())[0]
    st.update(np.array([0.0, 1.0], dtype=np.float32))
    assert st.to_config(4).bit_width == 4


def test_calibrated_activation_includes_zero():
    st = CalibState()
    st.update(np.array([0.5, 2.0], dtype=np.float32))
    cfg = st.to_config(8)
    assert not cfg.signed
    assert cfg.alpha <= 0.0 <= cfg.beta
    assert cfg.beta >= 2.0 - 1e-6


def test_quantizer_state_roundtrip():
    model = M.build_lenet5()
    qs = make_quantizers(model, QuantSettings(bit_width=8))
    for st in qs.act_states.values():
        st.update(np.array([0.0, 3.0], dtype=np.float32))
    qs.freeze()
    d = qs.state_dict()
    qs2 = type(qs).from_state_dict(d)
    assert qs2.state_dict() == d
