"""Uniform fake quantization with a straight-through estimator.

The mapping is the classic affine grid

    q   = clamp(round(x / s) + z, q_min, q_max)
    x~  = s * (q - z)

with round-half-to-even (deterministic and unbiased), signed or unsigned
integer grids, symmetric (z = 0) or asymmetric ranges, per-tensor or
per-channel scales, and two ways of choosing the activation scale:

* constant scaling: one fixed step size `s` shared by all activation
  quantizers, z = 0 on the signed grid;
* calibrated scaling: each activation tensor owns a running min/max
  (EMA, momentum 0.99) observed during training and frozen for eval,
  mapped to the unsigned asymmetric grid.

Weight quantizers are always symmetric signed and recalibrate from the
current absolute maximum on every forward (weights move during QAT):
per output channel for convolutions, per tensor for linear layers.

Gradients use the clipped straight-through estimator: identity inside
the clip range [alpha, beta], zero outside.

All quantization arithmetic runs in float64 and casts back to the input
dtype, so results are deterministic and match a scalar transcription of
the defining formulas bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from quantnoise.autodiff import CustomRule, Node, apply_custom
from quantnoise.errors import ConfigError, NumericError

PER_TENSOR = "per_tensor"
PER_CHANNEL = "per_channel"

ScaleLike = Union[float, np.ndarray]


def grid_limits(bit_width: int, signed: bool, narrow: bool = False) -> tuple[int, int]:
    """Integer grid [q_min, q_max] for a bit width.

    narrow=True drops the most negative signed code, giving the
    symmetric grid [-(2^(b-1)-1), 2^(b-1)-1].
    """
    if signed:
        lo = -(1 << (bit_width - 1))
        if narrow:
            lo += 1
        return lo, (1 << (bit_width - 1)) - 1
    return 0, (1 << bit_width) - 1


def scale_from_range(alpha: float, beta: float, bit_width: int) -> float:
    """Step size for mapping the real range [alpha, beta] onto 2^b levels."""
    if not beta > alpha:
        raise ConfigError(f"invalid range: beta={beta} must exceed alpha={alpha}")
    if bit_width < 2:
        raise ConfigError(f"bit_width must be >= 2, got {bit_width}")
    return (beta - alpha) / (2 ** bit_width - 1)


def zero_point_from_range(alpha: float, beta: float, bit_width: int,
                          signed: bool) -> int:
    """Integer zero point placing `alpha` at q_min on the asymmetric grid."""
    q_min, q_max = grid_limits(bit_width, signed)
    s = scale_from_range(alpha, beta, bit_width)
    z = int(np.rint(q_min - alpha / s))
    return int(np.clip(z, q_min, q_max))


@dataclass(frozen=True)
class QuantConfig:
    """One fully resolved quantizer.

    `scale`/`zero_point` are scalars for per-tensor granularity or 1-D
    arrays of per-channel values (channel axis `channel_axis`).
    """
    bit_width: int
    signed: bool
    symmetric: bool
    scale: ScaleLike
    zero_point: Union[int, np.ndarray] = 0
    granularity: str = PER_TENSOR
    channel_axis: int = 0
    narrow: bool = False

    def __post_init__(self):
        if self.bit_width < 2:
            raise ConfigError(f"bit_width must be >= 2, got {self.bit_width}")
        if self.granularity not in (PER_TENSOR, PER_CHANNEL):
            raise ConfigError(f"unknown granularity {self.granularity!r}")
        s = np.asarray(self.scale, dtype=np.float64)
        if np.any(s <= 0):
            raise ConfigError("scale must be positive")
        z = np.asarray(self.zero_point)
        if self.symmetric and np.any(z != 0):
            raise ConfigError("symmetric quantization requires zero_point 0")
        q_min, q_max = self.q_limits
        if np.any(z < q_min) or np.any(z > q_max):
            raise ConfigError(
                f"zero_point {self.zero_point} outside grid [{q_min}, {q_max}]")

    @property
    def q_limits(self) -> tuple[int, int]:
        return grid_limits(self.bit_width, self.signed, self.narrow)

    @property
    def alpha(self) -> ScaleLike:
        q_min, _ = self.q_limits
        return (q_min - np.asarray(self.zero_point)) * np.asarray(self.scale, np.float64)

    @property
    def beta(self) -> ScaleLike:
        _, q_max = self.q_limits
        return (q_max - np.asarray(self.zero_point)) * np.asarray(self.scale, np.float64)

    @classmethod
    def constant(cls, scale: float, bit_width: int) -> "QuantConfig":
        """Constant-scaling activation quantizer: z = 0 on the signed grid."""
        return cls(bit_width=bit_width, signed=True, symmetric=True,
                   scale=float(scale))

    @classmethod
    def from_range(cls, alpha: float, beta: float, bit_width: int,
                   signed: bool) -> "QuantConfig":
        """Asymmetric quantizer covering [alpha, beta]."""
        s = scale_from_range(alpha, beta, bit_width)
        z = zero_point_from_range(alpha, beta, bit_width, signed)
        return cls(bit_width=bit_width, signed=signed, symmetric=False,
                   scale=s, zero_point=z)

    @classmethod
    def symmetric_from_tensor(cls, w: np.ndarray, bit_width: int,
                              channel_axis: Optional[int] = None,
                              narrow: bool = False) -> "QuantConfig":
        """Symmetric signed quantizer from max|w| (per channel if axis given)."""
        _, q_max = grid_limits(bit_width, True, narrow)
        if channel_axis is None:
            m = float(np.max(np.abs(w))) if w.size else 0.0
            scale = max(m, 1e-12) / q_max
            return cls(bit_width=bit_width, signed=True, symmetric=True,
                       scale=scale, narrow=narrow)
        axes = tuple(i for i in range(w.ndim) if i != channel_axis)
        m = np.max(np.abs(w), axis=axes).astype(np.float64)
        scale = np.maximum(m, 1e-12) / q_max
        return cls(bit_width=bit_width, signed=True, symmetric=True,
                   scale=scale, granularity=PER_CHANNEL,
                   channel_axis=channel_axis, narrow=narrow)


def _param_view(value, cfg: QuantConfig, ndim: int):
    """Reshape a per-channel parameter vector for broadcasting, or pass
    a scalar through unchanged."""
    arr = np.asarray(value, dtype=np.float64)
    if cfg.granularity == PER_TENSOR:
        return arr
    shape = [1] * ndim
    shape[cfg.channel_axis] = -1
    return arr.reshape(shape)


def quantize(x: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    """Map real values onto the integer grid (int64).

    q = clamp(round(x/s) + z, q_min, q_max), round half to even.
    """
    if not np.all(np.isfinite(x)):
        raise NumericError("quantize received non-finite input")
    q_min, q_max = cfg.q_limits
    s = _param_view(cfg.scale, cfg, x.ndim)
    z = _param_view(cfg.zero_point, cfg, x.ndim)
    q = np.rint(x.astype(np.float64) / s) + z
    return np.clip(q, q_min, q_max).astype(np.int64)


def dequantize(q: np.ndarray, cfg: QuantConfig, dtype=np.float32) -> np.ndarray:
    """Inverse map: s * (q - z). Rejects codes outside the grid."""
    q_min, q_max = cfg.q_limits
    if np.any(q < q_min) or np.any(q > q_max):
        raise ConfigError(f"quantized code outside grid [{q_min}, {q_max}]")
    s = _param_view(cfg.scale, cfg, np.ndim(q))
    z = _param_view(cfg.zero_point, cfg, np.ndim(q))
    return (s * (np.asarray(q, dtype=np.float64) - z)).astype(dtype)


def fake_quantize_array(x: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    """dequantize(quantize(x)) in one pass, returned in x's dtype."""
    return dequantize(quantize(x, cfg), cfg, dtype=x.dtype)


def ste_mask(x: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    """Clipped-STE gradient mask: 1 where alpha <= x <= beta, else 0."""
    a = _param_view(cfg.alpha, cfg, x.ndim)
    b = _param_view(cfg.beta, cfg, x.ndim)
    x64 = x.astype(np.float64)
    return ((x64 >= a) & (x64 <= b)).astype(x.dtype)


def fake_quantize(x: Node, cfg: QuantConfig) -> Node:
    """Differentiable fake quantization node (clipped STE backward)."""
    rule = CustomRule(
        forward=lambda v: fake_quantize_array(v, cfg),
        backward=lambda up, ins, out: (up * ste_mask(ins[0], cfg),),
    )
    return apply_custom(rule, x)


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

@dataclass
class CalibState:
    """Running min/max of one activation site (EMA over training batches).

    The first observed batch initializes the extrema directly; afterwards
    m <- momentum * m + (1 - momentum) * batch_extremum. Once frozen the
    state never changes (eval uses frozen state).
    """
    momentum: float = 0.99
    running_min: float = 0.0
    running_max: float = 0.0
    initialized: bool = False
    frozen: bool = False

    def update(self, observed: np.ndarray) -> "CalibState":
        if self.frozen:
            raise ConfigError("calibration update on a frozen state")
        lo = float(np.min(observed))
        hi = float(np.max(observed))
        if not self.initialized:
            self.running_min, self.running_max = lo, hi
            self.initialized = True
        else:
            m = self.momentum
            self.running_min = m * self.running_min + (1.0 - m) * lo
            self.running_max = m * self.running_max + (1.0 - m) * hi
        return self

    def freeze(self) -> "CalibState":
        self.frozen = True
        return self

    def to_config(self, bit_width: int) -> QuantConfig:
        """Unsigned asymmetric quantizer over the calibrated range.

        The range is widened to include 0 so that real zero is always
        representable (post-ReLU activations have running_min ~ 0).
        """
        lo = min(self.running_min, 0.0)
        hi = max(self.running_max, lo + 1e-12)
        return QuantConfig.from_range(lo, hi, bit_width, signed=False)


def calibrate_update(state: CalibState, observed: np.ndarray) -> CalibState:
    """EMA update of running extrema (module-level spelling of update)."""
    return state.update(observed)


# ---------------------------------------------------------------------------
# model-level quantizer assignment
# ---------------------------------------------------------------------------

CONSTANT = "constant"
CALIBRATED = "calibrated"


@dataclass(frozen=True)
class QuantSettings:
    """Global quantization choices applied uniformly across a model."""
    bit_width: int = 8
    scaling: str = CALIBRATED          # constant | calibrated
    constant_scale: float = 1.0
    momentum: float = 0.99
    quantize_input: bool = False

    def __post_init__(self):
        if self.scaling not in (CONSTANT, CALIBRATED):
            raise ConfigError(f"unknown scaling mode {self.scaling!r}")
        if self.bit_width < 2:
            raise ConfigError(f"bit_width must be >= 2, got {self.bit_width}")
        if self.constant_scale <= 0:
            raise ConfigError("constant_scale must be positive")


@dataclass
class QuantizerSet:
    """Per-site quantizers for one model: weight templates plus activation
    quantizer state, keyed by layer id."""
    settings: QuantSettings
    weight_plan: dict = field(default_factory=dict)   # layer id -> channel_axis|None
    act_states: dict = field(default_factory=dict)    # site id -> CalibState
    frozen: bool = False

    def weight_config(self, layer_id: str, w: np.ndarray) -> QuantConfig:
        axis = self.weight_plan[layer_id]
        return QuantConfig.symmetric_from_tensor(w, self.settings.bit_width,
                                                 channel_axis=axis)

    def activation_config(self, site_id: str) -> QuantConfig:
        if self.settings.scaling == CONSTANT:
            return QuantConfig.constant(self.settings.constant_scale,
                                        self.settings.bit_width)
        return self.act_states[site_id].to_config(self.settings.bit_width)

    def observe(self, site_id: str, value: np.ndarray) -> None:
        if self.settings.scaling == CALIBRATED and not self.frozen:
            self.act_states[site_id].update(value)

    def freeze(self) -> None:
        self.frozen = True
        for st in self.act_states.values():
            if not st.frozen:
                st.freeze()

    def state_dict(self) -> dict:
        return {
            "settings": {
                "bit_width": self.settings.bit_width,
                "scaling": self.settings.scaling,
                "constant_scale": self.settings.constant_scale,
                "momentum": self.settings.momentum,
                "quantize_input": self.settings.quantize_input,
            },
            "weight_plan": dict(self.weight_plan),
            "act_states": {
                k: {"momentum": v.momentum, "running_min": v.running_min,
                    "running_max": v.running_max, "initialized": v.initialized,
                    "frozen": v.frozen}
                for k, v in sorted(self.act_states.items())
            },
            "frozen": self.frozen,
        }

    @classmethod
    def from_state_dict(cls, d: dict) -> "QuantizerSet":
        qs = cls(settings=QuantSettings(**d["settings"]),
                 weight_plan=dict(d["weight_plan"]), frozen=d["frozen"])
        for k, v in d["act_states"].items():
            qs.act_states[k] = CalibState(**v)
        return qs


def make_quantizers(model_spec, settings: QuantSettings) -> QuantizerSet:
    """Assign quantizers across a model, mirroring common QAT practice:

    * conv weights: per-channel (output channel axis), symmetric signed;
    * linear weights: per-tensor, symmetric signed;
    * activations: per-tensor, one quantizer after every ReLU (plus the
      network input when `quantize_input` is set) — unsigned asymmetric
      when calibrated, z = 0 signed grid when constant scaling.
    """
    qs = QuantizerSet(settings=settings)
    for layer in model_spec.layers:
        if layer.kind == "conv":
            qs.weight_plan[layer.id] = 0
        elif layer.kind == "linear":
            qs.weight_plan[layer.id] = None
        elif layer.kind == "relu":
            qs.act_states[layer.id] = CalibState(momentum=settings.momentum)
    if settings.quantize_input:
        qs.act_states["__input__"] = CalibState(momentum=settings.momentum)
    return qs
