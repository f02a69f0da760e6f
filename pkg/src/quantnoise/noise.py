"""Noise models and their placement inside a network.

The primary model is forward-only additive Gaussian noise on activations:
a fresh draw `a + eps, eps ~ N(0, sigma^2 I)` on every forward pass, with
the gradient passing through unchanged (the perturbation is treated as a
constant, exactly like the straight-through idea). Two weight-perturbation
models from the resistive-memory literature are included as evaluation-time
variants: additive Gaussian on weights, and multiplicative log-normal
(`w * e^lambda, lambda ~ N(0, sigma^2)`), which preserves weight signs.

Injection sites: one site after every compute layer's output — conv,
linear, relu, and pooling each count as one site; flatten, subsample,
dropout and skip-joins do not. `include_input` optionally prepends the
network input as a site (off by default). Global placement applies the
same sigma at every site; single-layer placement applies sigma at exactly
one site and zero elsewhere.

Stream discipline (fixed): the stream id for a draw is
mix64(tag, sigma_index, repeat_index, site_index), so any sweep cell is
reproducible independently of scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from quantnoise.autodiff import CustomRule, Node, apply_custom
from quantnoise.errors import ConfigError
from quantnoise.rng import RngStream

ADDITIVE_ACTIVATION = "additive_activation"
ADDITIVE_WEIGHT = "additive_weight"
LOGNORMAL_WEIGHT = "lognormal_weight"

_MODELS = (ADDITIVE_ACTIVATION, ADDITIVE_WEIGHT, LOGNORMAL_WEIGHT)

GLOBAL = "global"


@dataclass(frozen=True)
class NoiseSpec:
    """Noise model + placement + intensity.

    placement is "global" or an integer index into the model's injection
    site list (single-layer probing). sigma = 0 makes every model an
    exact identity.
    """
    model: str = ADDITIVE_ACTIVATION
    sigma: float = 0.0
    placement: Union[str, int] = GLOBAL

    def __post_init__(self):
        if self.model not in _MODELS:
            raise ConfigError(f"unknown noise model {self.model!r}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if isinstance(self.placement, str) and self.placement != GLOBAL:
            raise ConfigError(f"placement must be 'global' or a site index, "
                              f"got {self.placement!r}")
        if self.model != ADDITIVE_ACTIVATION and self.placement != GLOBAL:
            raise ConfigError("single-layer placement is only defined for "
                              "the additive activation model")


@dataclass(frozen=True)
class Site:
    """One noise-injection position."""
    index: int
    layer_id: str
    kind: str
    branch: str = "main"   # main | skip

    def describe(self) -> str:
        tag = f" [{self.branch}]" if self.branch != "main" else ""
        return f"{self.index:3d}  {self.layer_id:<24s} {self.kind}{tag}"


_SITE_KINDS = ("conv", "linear", "relu", "maxpool", "avgpool", "softmax")


def enumerate_injection_sites(model_spec, include_input: bool = False) -> list[Site]:
    """Deterministic site list in graph (definition) order."""
    sites: list[Site] = []
    if include_input:
        sites.append(Site(0, "__input__", "input"))
    for layer in model_spec.layers:
        if layer.kind in _SITE_KINDS:
            sites.append(Site(len(sites), layer.id, layer.kind,
                              branch=layer.branch))
    return sites


def site_sigmas(spec: NoiseSpec, n_sites: int) -> np.ndarray:
    """Per-site sigma vector implied by the placement."""
    if spec.placement == GLOBAL:
        return np.full(n_sites, spec.sigma, dtype=np.float64)
    idx = int(spec.placement)
    if not 0 <= idx < n_sites:
        raise ConfigError(
            f"single-layer site index {idx} out of range; valid sites are "
            f"0..{n_sites - 1}")
    out = np.zeros(n_sites, dtype=np.float64)
    out[idx] = spec.sigma
    return out


def inject_activation(a: Node, sigma: float, stream: RngStream) -> Node:
    """Forward-only additive Gaussian noise node.

    Fresh draw per call (the stream advances); backward is the identity.
    sigma = 0 returns the input node unchanged (bit-exact identity).
    """
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return a
    eps = stream.gaussian(a.value.shape, 0.0, sigma, dtype=a.value.dtype)
    rule = CustomRule(
        forward=lambda v: v + eps,
        backward=lambda up, ins, out: (up,),
    )
    return apply_custom(rule, a)


def perturb_weights_additive(w: np.ndarray, sigma: float,
                             stream: RngStream) -> np.ndarray:
    """w + dw, dw ~ N(0, sigma^2 I); fresh draw per call; w unchanged."""
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return w.copy()
    return w + stream.gaussian(w.shape, 0.0, sigma, dtype=w.dtype)


def perturb_weights_lognormal(w: np.ndarray, sigma: float,
                              stream: RngStream) -> np.ndarray:
    """Memristance-drift style w * e^lambda, lambda ~ N(0, sigma^2).

    Every weight keeps its sign (e^lambda > 0).
    """
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    lam = stream.gaussian(w.shape, 0.0, sigma, dtype=np.float64)
    return (w.astype(np.float64) * np.exp(lam)).astype(w.dtype)
