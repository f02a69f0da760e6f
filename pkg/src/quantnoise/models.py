"""Architecture definitions and the layer-graph executor.

Models are small DAGs of layer specs (conv / linear / relu / pooling /
dropout / flatten / subsample / add) compiled to autodiff nodes at each
forward pass, with fake-quantizers and noise-injection sites attached at
configured positions. None of the architectures contain batch
normalization.

Stride-2 convolutions never appear: the conv kernel requires integral
output sizes, so every resolution change goes through pooling (main
branches) or pure subsampling (skip branches, where subsample + 1x1
conv is arithmetic-identical to the usual stride-2 1x1 conv).

Weight init is Kaiming-style fan-in scaling, fixed here: conv and linear
weights draw from N(0, sqrt(2 / fan_in)); biases start at zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from quantnoise import autodiff as ad
from quantnoise import kernels
from quantnoise.errors import ConfigError, NumericError, ShapeError
from quantnoise.noise import enumerate_injection_sites, inject_activation, site_sigmas
from quantnoise.quantizer import QuantizerSet, fake_quantize
from quantnoise.rng import TAG_INIT, RngStream

INPUT = "__input__"

_KINDS = ("conv", "linear", "relu", "maxpool", "avgpool", "dropout",
          "flatten", "add", "subsample2", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    """One graph node: kind plus kind-specific hyperparameters."""
    id: str
    kind: str
    inputs: tuple[str, ...]
    args: tuple = ()            # sorted (key, value) pairs
    branch: str = "main"

    def arg(self, key, default=None):
        for k, v in self.args:
            if k == key:
                return v
        return default


def _mk(id_, kind, inputs, branch="main", **args):
    if kind not in _KINDS:
        raise ConfigError(f"unknown layer kind {kind!r}")
    items = tuple(sorted(args.items()))
    return LayerSpec(id=id_, kind=kind, inputs=tuple(inputs), args=items,
                     branch=branch)


@dataclass(frozen=True)
class ModelSpec:
    """A named acyclic layer graph with one input and one output.

    Shape-checked at construction: invalid graphs never exist.
    """
    name: str
    input_shape: tuple[int, int, int]     # (C, H, W)
    num_classes: int
    layers: tuple[LayerSpec, ...]         # topological (definition) order
    output_id: str
    meta: tuple = ()

    def __post_init__(self):
        validate_model(self)

    def layer(self, id_: str) -> LayerSpec:
        for l in self.layers:
            if l.id == id_:
                return l
        raise KeyError(id_)


def validate_model(model: ModelSpec) -> dict[str, tuple]:
    """Check graph structure and infer per-layer output shapes (no batch).

    Returns {layer_id: shape tuple}. Raises ShapeError/ConfigError on any
    inconsistency (dangling inputs, shape mismatches at joins, multiple
    sinks, cycles by construction of the ordered layer list).
    """
    shapes: dict[str, tuple] = {INPUT: tuple(model.input_shape)}
    consumed: set[str] = set()
    ids = {INPUT}
    for l in model.layers:
        if l.id in ids:
            raise ConfigError(f"duplicate layer id {l.id!r}")
        for src in l.inputs:
            if src not in ids:
                raise ConfigError(
                    f"layer {l.id!r} references {src!r} before definition")
            consumed.add(src)
        shapes[l.id] = _infer_shape(l, [shapes[s] for s in l.inputs])
        ids.add(l.id)
    sinks = [l.id for l in model.layers if l.id not in consumed]
    if sinks != [model.output_id]:
        raise ConfigError(f"graph must have exactly the output as its single "
                          f"sink, found {sinks}")
    out_shape = shapes[model.output_id]
    if out_shape != (model.num_classes,):
        raise ShapeError(f"output shape {out_shape} != ({model.num_classes},)")
    return shapes


def _infer_shape(l: LayerSpec, in_shapes: list[tuple]) -> tuple:
    kind = l.kind
    n_in = {"add": 2}.get(kind, 1)
    if len(in_shapes) != n_in:
        raise ConfigError(f"layer {l.id!r} ({kind}) takes {n_in} inputs, "
                          f"got {len(in_shapes)}")
    s = in_shapes[0]
    if kind == "conv":
        if len(s) != 3:
            raise ShapeError(f"conv {l.id!r} needs [C,H,W] input, got {s}")
        c, h, w = s
        k, st, p = l.arg("kernel"), l.arg("stride", 1), l.arg("padding", 0)
        oh = kernels._conv_out_size(h, k, st, p)
        ow = kernels._conv_out_size(w, k, st, p)
        return (l.arg("out_channels"), oh, ow)
    if kind == "linear":
        if len(s) != 1:
            raise ShapeError(f"linear {l.id!r} needs flat input, got {s}")
        return (l.arg("units"),)
    if kind in ("relu", "dropout", "softmax"):
        return s
    if kind == "maxpool":
        c, h, w = s
        k = l.arg("kernel")
        st = l.arg("stride", k)
        p = l.arg("padding", 0)
        return (c, (h + 2 * p - k) // st + 1, (w + 2 * p - k) // st + 1)
    if kind == "avgpool":
        c, h, w = s
        oh, ow = l.arg("output_size")
        return (c, oh, ow)
    if kind == "flatten":
        return (int(np.prod(s)),)
    if kind == "subsample2":
        c, h, w = s
        return (c, (h + 1) // 2, (w + 1) // 2)
    if kind == "add":
        if in_shapes[0] != in_shapes[1]:
            raise ShapeError(f"add {l.id!r} joins incompatible shapes "
                             f"{in_shapes[0]} vs {in_shapes[1]}")
        return s
    raise ConfigError(f"unknown layer kind {kind!r}")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def param_shapes(model: ModelSpec) -> dict[str, tuple]:
    """Parameter name -> shape, in deterministic layer order."""
    shapes = validate_model(model)
    out: dict[str, tuple] = {}
    for l in model.layers:
        if l.kind == "conv":
            c_in = shapes[l.inputs[0]][0]
            k = l.arg("kernel")
            out[f"{l.id}.w"] = (l.arg("out_channels"), c_in, k, k)
            if l.arg("bias", True):
                out[f"{l.id}.b"] = (l.arg("out_channels"),)
        elif l.kind == "linear":
            n_in = shapes[l.inputs[0]][0]
            out[f"{l.id}.w"] = (n_in, l.arg("units"))
            if l.arg("bias", True):
                out[f"{l.id}.b"] = (l.arg("units"),)
    return out


def init_params(model: ModelSpec, stream: RngStream,
                dtype=np.float32) -> dict[str, np.ndarray]:
    """Kaiming fan-in init: w ~ N(0, sqrt(2/fan_in)), b = 0."""
    params: dict[str, np.ndarray] = {}
    for idx, (name, shape) in enumerate(param_shapes(model).items()):
        sub = stream.derive(TAG_INIT, idx)
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            std = float(np.sqrt(2.0 / fan_in))
            params[name] = sub.gaussian(shape, 0.0, std, dtype=dtype)
    return params


def first_compute_output_std(model: ModelSpec, params: dict,
                             batch: np.ndarray) -> float:
    """Std of the first conv/linear layer's output on a probe batch.

    Used by constant-scale quantized training to size its grid-aware
    init; only parameter-free layers (flatten/subsample/pooling) may
    precede the first compute layer in our architectures.
    """
    x = np.ascontiguousarray(batch)
    for l in model.layers:
        if l.kind == "conv":
            y = kernels.conv2d(x, params[f"{l.id}.w"], l.arg("stride", 1),
                               l.arg("padding", 0))
            return float(y.std())
        if l.kind == "linear":
            y = kernels.matmul(x, params[f"{l.id}.w"])
            return float(y.std())
        if l.kind == "flatten":
            x = kernels.flatten(x)
        elif l.kind == "subsample2":
            x = kernels.subsample2(x)
        elif l.kind == "maxpool":
            x, _ = kernels.maxpool(x, l.arg("kernel"),
                                   l.arg("stride", l.arg("kernel")),
                                   l.arg("padding", 0))
        elif l.kind == "avgpool":
            x = kernels.avgpool(x, tuple(l.arg("output_size")))
        else:
            raise ConfigError(f"layer {l.id!r} ({l.kind}) precedes the first "
                              f"compute layer; cannot size grid-aware init")
    raise ConfigError("model has no conv/linear layer")


def count_params(model: ModelSpec) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(model).values())


def count_flops(model: ModelSpec) -> int:
    """Multiply-accumulate count per sample (bias terms included)."""
    shapes = validate_model(model)
    total = 0
    for l in model.layers:
        if l.kind == "conv":
            c_in = shapes[l.inputs[0]][0]
            f, oh, ow = shapes[l.id]
            k = l.arg("kernel")
            per_out = c_in * k * k + (1 if l.arg("bias", True) else 0)
            total += oh * ow * f * per_out
        elif l.kind == "linear":
            n_in = shapes[l.inputs[0]][0]
            total += l.arg("units") * (n_in + (1 if l.arg("bias", True) else 0))
    return total


# ---------------------------------------------------------------------------
# forward execution
# ---------------------------------------------------------------------------

@dataclass
class NoiseRuntime:
    """Per-forward noise wiring: per-site sigmas and a stream per site."""
    sigmas: np.ndarray                      # one sigma per site
    stream_for_site: "callable"             # site index -> RngStream
    include_input: bool = False
    order: str = "quant_then_noise"         # or "noise_then_quant"

    @classmethod
    def for_model(cls, model: ModelSpec, spec, stream_factory,
                  include_input: bool = False, order: str = "quant_then_noise"):
        sites = enumerate_injection_sites(model, include_input=include_input)
        return cls(sigmas=site_sigmas(spec, len(sites)),
                   stream_for_site=stream_factory,
                   include_input=include_input, order=order)


def forward(model: ModelSpec, params: dict[str, np.ndarray], batch: np.ndarray,
            train: bool = False, quant: Optional[QuantizerSet] = None,
            noise: Optional[NoiseRuntime] = None,
            dropout_stream: Optional[RngStream] = None):
    """Execute the graph; returns (logits array, param Node dict).

    Training mode enables dropout and calibration updates; eval mode is
    deterministic given (weights, input, noise streams). Raises
    NumericError if the logits contain non-finite values.
    """
    if batch.ndim != 4 or batch.shape[1:] != tuple(model.input_shape):
        raise ShapeError(f"batch shape {batch.shape} does not match model "
                         f"input {model.input_shape}")
    pnodes = {name: ad.leaf(v) for name, v in params.items()}
    site_idx = 0

    def maybe_site(node: ad.Node, layer_id: str, is_quant_site: bool) -> ad.Node:
        nonlocal site_idx
        this_site = site_idx
        site_idx += 1

        def apply_quant(n: ad.Node) -> ad.Node:
            if quant is None or not is_quant_site:
                return n
            if train:
                quant.observe(layer_id, n.value)
            return fake_quantize(n, quant.activation_config(layer_id))

        def apply_noise(n: ad.Node) -> ad.Node:
            if noise is None or noise.sigmas[this_site] == 0.0:
                return n
            return inject_activation(n, float(noise.sigmas[this_site]),
                                     noise.stream_for_site(this_site))

        if noise is not None and noise.order == "noise_then_quant":
            return apply_quant(apply_noise(node))
        return apply_noise(apply_quant(node))

    x = ad.leaf(np.ascontiguousarray(batch))
    if quant is not None and quant.settings.quantize_input:
        if train:
            quant.observe(INPUT, x.value)
        x = fake_quantize(x, quant.activation_config(INPUT))
    if noise is not None and noise.include_input:
        x = maybe_site(x, INPUT, is_quant_site=False)

    values: dict[str, ad.Node] = {INPUT: x}
    for l in model.layers:
        ins = [values[s] for s in l.inputs]
        kind = l.kind
        if kind == "conv":
            w = pnodes[f"{l.id}.w"]
            if quant is not None:
                w = fake_quantize(w, quant.weight_config(l.id, w.value))
            y = ad.conv2d(ins[0], w, l.arg("stride", 1), l.arg("padding", 0))
            if l.arg("bias", True):
                y = _add_channel_bias(y, pnodes[f"{l.id}.b"])
            y = maybe_site(y, l.id, is_quant_site=False)
        elif kind == "linear":
            w = pnodes[f"{l.id}.w"]
            if quant is not None:
                w = fake_quantize(w, quant.weight_config(l.id, w.value))
            y = ad.matmul(ins[0], w)
            if l.arg("bias", True):
                y = ad.add_bias(y, pnodes[f"{l.id}.b"])
            y = maybe_site(y, l.id, is_quant_site=False)
        elif kind == "relu":
            y = maybe_site(ad.relu(ins[0]), l.id, is_quant_site=True)
        elif kind == "maxpool":
            y = ad.maxpool(ins[0], l.arg("kernel"), l.arg("stride", l.arg("kernel")),
                           l.arg("padding", 0))
            y = maybe_site(y, l.id, is_quant_site=False)
        elif kind == "avgpool":
            y = maybe_site(ad.avgpool(ins[0], tuple(l.arg("output_size"))),
                           l.id, is_quant_site=False)
        elif kind == "dropout":
            if train:
                if dropout_stream is None:
                    raise ConfigError("dropout in training mode needs a stream")
                y = ad.dropout(ins[0], float(l.arg("p")), dropout_stream)
            else:
                y = ins[0]
        elif kind == "flatten":
            y = ad.flatten(ins[0])
        elif kind == "subsample2":
            y = ad.subsample2(ins[0])
        elif kind == "add":
            y = ad.add(ins[0], ins[1])
        elif kind == "softmax":
            y = maybe_site(ad.softmax(ins[0]), l.id, is_quant_site=False)
        else:  # pragma: no cover - guarded by validate_model
            raise ConfigError(f"unknown layer kind {kind!r}")
        values[l.id] = y

    logits = values[model.output_id]
    if not np.all(np.isfinite(logits.value)):
        raise NumericError(f"non-finite logits in forward of {model.name!r}")
    return logits, pnodes


def _add_channel_bias(x: ad.Node, b: ad.Node) -> ad.Node:
    """[N,F,H,W] + [F]: the explicit channel-broadcast companion of add_bias."""
    xv, bv = x.value, b.value
    if xv.ndim != 4 or bv.ndim != 1 or xv.shape[1] != bv.shape[0]:
        raise ShapeError(f"channel bias expects [N,F,H,W]+[F], got "
                         f"{xv.shape}+{bv.shape}")
    v = xv + bv[None, :, None, None]

    def vjp(up):
        g = kernels.reduce_sum(kernels.reduce_sum(kernels.reduce_sum(up, 3), 2), 0)
        return up, g

    return ad.Node(v, (x, b), vjp)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def _scaled(value: int, scale: float, lo: int = 1) -> int:
    return max(lo, int(round(value * scale)))


def build_lenet5() -> ModelSpec:
    """LeNet-5 modernized for 3x32x32 inputs: ReLU activations, 10 classes.

    Parameter count ~0.062 M, ~0.66 M MACs per sample.
    """
    L = []
    L.append(_mk("conv1", "conv", [INPUT], out_channels=6, kernel=5))
    L.append(_mk("relu1", "relu", ["conv1"]))
    L.append(_mk("pool1", "maxpool", ["relu1"], kernel=2))
    L.append(_mk("conv2", "conv", ["pool1"], out_channels=16, kernel=5))
    L.append(_mk("relu2", "relu", ["conv2"]))
    L.append(_mk("pool2", "maxpool", ["relu2"], kernel=2))
    L.append(_mk("flat", "flatten", ["pool2"]))
    L.append(_mk("fc1", "linear", ["flat"], units=120))
    L.append(_mk("relu3", "relu", ["fc1"]))
    L.append(_mk("fc2", "linear", ["relu3"], units=84))
    L.append(_mk("relu4", "relu", ["fc2"]))
    L.append(_mk("fc3", "linear", ["relu4"], units=10))
    return ModelSpec("lenet5", (3, 32, 32), 10, tuple(L), "fc3")


_VGG11_STAGES = ((64,), (128,), (256, 256), (512, 512), (512, 512))


def build_vgg11() -> ModelSpec:
    """VGG-11 with its original classifier (4096-wide, 50% dropout),
    adapted to 3x32x32 and 10 classes; no batch norm."""
    L = []
    prev = INPUT
    i = 0
    for si, stage in enumerate(_VGG11_STAGES):
        for ch in stage:
            i += 1
            L.append(_mk(f"conv{i}", "conv", [prev], out_channels=ch,
                         kernel=3, padding=1))
            L.append(_mk(f"relu{i}", "relu", [f"conv{i}"]))
            prev = f"relu{i}"
        L.append(_mk(f"pool{si + 1}", "maxpool", [prev], kernel=2))
        prev = f"pool{si + 1}"
    L.append(_mk("avgpool", "avgpool", [prev], output_size=(7, 7)))
    L.append(_mk("flat", "flatten", ["avgpool"]))
    L.append(_mk("fc1", "linear", ["flat"], units=4096))
    L.append(_mk("relu_fc1", "relu", ["fc1"]))
    L.append(_mk("drop1", "dropout", ["relu_fc1"], p=0.5))
    L.append(_mk("fc2", "linear", ["drop1"], units=4096))
    L.append(_mk("relu_fc2", "relu", ["fc2"]))
    L.append(_mk("drop2", "dropout", ["relu_fc2"], p=0.5))
    L.append(_mk("fc3", "linear", ["drop2"], units=10))
    return ModelSpec("vgg11", (3, 32, 32), 10, tuple(L), "fc3")


def _basic_block(L: list, name: str, prev: str, in_ch: int, out_ch: int,
                 downsample: bool, skips: bool) -> str:
    """Residual basic block; returns the id of the block output.

    Resolution changes use pooling/subsampling so that every conv stays
    stride 1 (integral-output contract). The skip path carries at most
    one compute layer (the 1x1 projection).
    """
    r = prev
    if downsample:
        L.append(_mk(f"{name}_pool", "avgpool", [r],
                     output_size=_half_hw(L, r)))
        r = f"{name}_pool"
    L.append(_mk(f"{name}_conv1", "conv", [r], out_channels=out_ch,
                 kernel=3, padding=1))
    L.append(_mk(f"{name}_relu1", "relu", [f"{name}_conv1"]))
    L.append(_mk(f"{name}_conv2", "conv", [f"{name}_relu1"],
                 out_channels=out_ch, kernel=3, padding=1))
    res = f"{name}_conv2"
    if not skips:
        L.append(_mk(f"{name}_relu2", "relu", [res]))
        return f"{name}_relu2"
    sk = prev
    if downsample:
        L.append(_mk(f"{name}_sub", "subsample2", [sk], branch="skip"))
        sk = f"{name}_sub"
    if downsample or in_ch != out_ch:
        L.append(_mk(f"{name}_proj", "conv", [sk], out_channels=out_ch,
                     kernel=1, bias=False, branch="skip"))
        sk = f"{name}_proj"
    L.append(_mk(f"{name}_add", "add", [res, sk]))
    L.append(_mk(f"{name}_relu2", "relu", [f"{name}_add"]))
    return f"{name}_relu2"


def _half_hw(L: list, prev_id: str) -> tuple[int, int]:
    # replay shape inference over the fragment built so far
    shapes = {INPUT: (3, 32, 32)}
    for l in L:
        shapes[l.id] = _infer_shape(l, [shapes[s] for s in l.inputs])
    shp = shapes[prev_id]
    return (shp[1] // 2, shp[2] // 2)


def _build_resnet(name: str, stem_ch: int, stage_channels: tuple,
                  stage_blocks: tuple, skips: bool, stem_kernel: int,
                  stem_pools: int, meta: tuple) -> ModelSpec:
    L = []
    pad = stem_kernel // 2
    L.append(_mk("conv1", "conv", [INPUT], out_channels=stem_ch,
                 kernel=stem_kernel, padding=pad))
    L.append(_mk("relu1", "relu", ["conv1"]))
    prev = "relu1"
    for p in range(stem_pools):
        L.append(_mk(f"stem_pool{p + 1}", "maxpool", [prev], kernel=2))
        prev = f"stem_pool{p + 1}"
    in_ch = stem_ch
    for si, (ch, blocks) in enumerate(zip(stage_channels, stage_blocks)):
        for bi in range(blocks):
            downsample = si > 0 and bi == 0
            prev = _basic_block(L, f"s{si + 1}b{bi + 1}", prev, in_ch, ch,
                                downsample, skips)
            in_ch = ch
    L.append(_mk("gap", "avgpool", [prev], output_size=(1, 1)))
    L.append(_mk("flat", "flatten", ["gap"]))
    L.append(_mk("fc", "linear", ["flat"], units=10))
    return ModelSpec(name, (3, 32, 32), 10, tuple(L), "fc", meta=meta)


def build_resnet18() -> ModelSpec:
    """ResNet-18 adapted to 3x32x32/10 classes, no batch norm.

    Stem: 5x5 conv + two 2x2 max pools (stride-1 stand-in for the usual
    strided stem); four stages of two basic blocks at 64..512 channels
    with identity or projected skips. ~11.2 M params, ~39 M MACs.
    """
    return _build_resnet("resnet18", 64, (64, 128, 256, 512), (2, 2, 2, 2),
                         skips=True, stem_kernel=5, stem_pools=2, meta=())


def build_mini(name: str, width_scale: float = 1.0, depth_scale: float = 1.0,
               skips: bool = True) -> ModelSpec:
    """Structurally faithful shrunken variants for desk-scale runs.

    width_scale multiplies channel/unit counts; depth_scale multiplies
    per-stage conv counts (minimum one). (1, 1) reproduces the full
    builder exactly. `skips=False` builds the skip-less twin of the
    resnet (identical stacked layers, no join).
    """
    if name not in ("lenet", "vgg", "resnet"):
        raise ConfigError(f"unknown architecture {name!r}")
    meta = (("width_scale", width_scale), ("depth_scale", depth_scale),
            ("skips", skips))
    if (width_scale, depth_scale) == (1.0, 1.0):
        if name == "lenet":
            return build_lenet5()
        if name == "vgg":
            return build_vgg11()
        if skips:
            return build_resnet18()

    w = width_scale
    if name == "lenet":
        L = []
        L.append(_mk("conv1", "conv", [INPUT], out_channels=_scaled(6, w),
                     kernel=5))
        L.append(_mk("relu1", "relu", ["conv1"]))
        L.append(_mk("pool1", "maxpool", ["relu1"], kernel=2))
        L.append(_mk("conv2", "conv", ["pool1"], out_channels=_scaled(16, w),
                     kernel=5))
        L.append(_mk("relu2", "relu", ["conv2"]))
        L.append(_mk("pool2", "maxpool", ["relu2"], kernel=2))
        L.append(_mk("flat", "flatten", ["pool2"]))
        L.append(_mk("fc1", "linear", ["flat"], units=_scaled(120, w)))
        L.append(_mk("relu3", "relu", ["fc1"]))
        L.append(_mk("fc2", "linear", ["relu3"], units=_scaled(84, w)))
        L.append(_mk("relu4", "relu", ["fc2"]))
        L.append(_mk("fc3", "linear", ["relu4"], units=10))
        return ModelSpec("mini-lenet", (3, 32, 32), 10, tuple(L), "fc3",
                         meta=meta)

    if name == "vgg":
        L = []
        prev = INPUT
        i = 0
        for si, stage in enumerate(_VGG11_STAGES):
            n_convs = max(1, round(len(stage) * depth_scale))
            ch = _scaled(stage[0], w, lo=4)
            for _ in range(n_convs):
                i += 1
                L.append(_mk(f"conv{i}", "conv", [prev], out_channels=ch,
                             kernel=3, padding=1))
                L.append(_mk(f"relu{i}", "relu", [f"conv{i}"]))
                prev = f"relu{i}"
            L.append(_mk(f"pool{si + 1}", "maxpool", [prev], kernel=2))
            prev = f"pool{si + 1}"
        L.append(_mk("gap", "avgpool", [prev], output_size=(1, 1)))
        L.append(_mk("flat", "flatten", ["gap"]))
        L.append(_mk("fc", "linear", ["flat"], units=10))
        return ModelSpec("mini-vgg", (3, 32, 32), 10, tuple(L), "fc", meta=meta)

    # resnet
    blocks = tuple(max(1, round(2 * depth_scale)) for _ in range(4))
    chans = tuple(_scaled(c, w, lo=4) for c in (64, 128, 256, 512))
    return _build_resnet("mini-resnet" if skips else "mini-resnet-noskip",
                         chans[0], chans, blocks, skips=skips,
                         stem_kernel=3, stem_pools=1, meta=meta)


BUILDERS = {
    "lenet5": build_lenet5,
    "vgg11": build_vgg11,
    "resnet18": build_resnet18,
}


def build_model(model_id: str, width_scale: float = 1.0,
                depth_scale: float = 1.0, skips: bool = True) -> ModelSpec:
    """CLI-facing dispatch: full names or mini-<family> with scales."""
    if model_id in BUILDERS:
        return BUILDERS[model_id]()
    if model_id.startswith("mini-"):
        fam = model_id[len("mini-"):]
        if fam.endswith("-noskip"):
            fam = fam[:-len("-noskip")]
            skips = False
        return build_mini(fam, width_scale, depth_scale, skips)
    raise ConfigError(f"unknown model id {model_id!r}; known: "
                      f"{sorted(BUILDERS)} or mini-lenet/mini-vgg/mini-resnet")


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def model_to_dict(model: ModelSpec) -> dict:
    return {
        "format": 1,
        "name": model.name,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "output_id": model.output_id,
        "meta": [list(kv) for kv in model.meta],
        "layers": [
            {"id": l.id, "kind": l.kind, "inputs": list(l.inputs),
             "branch": l.branch, "args": [list(kv) for kv in l.args]}
            for l in model.layers
        ],
    }


def model_from_dict(d: dict) -> ModelSpec:
    if d.get("format") != 1:
        raise ConfigError(f"unsupported model format {d.get('format')!r}")

    def _freeze(v):
        return tuple(v) if isinstance(v, list) else v

    layers = tuple(
        LayerSpec(id=ld["id"], kind=ld["kind"], inputs=tuple(ld["inputs"]),
                  branch=ld["branch"],
                  args=tuple((k, _freeze(v)) for k, v in ld["args"]))
        for ld in d["layers"]
    )
    return ModelSpec(name=d["name"], input_shape=tuple(d["input_shape"]),
                     num_classes=d["num_classes"], layers=layers,
                     output_id=d["output_id"],
                     meta=tuple((k, _freeze(v)) for k, v in d["meta"]))
