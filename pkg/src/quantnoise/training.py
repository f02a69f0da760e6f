"""Supervised training: plain, quantization-aware, noisy, or both.

The loop is Adam with cosine learning-rate decay over epochs
(eta_e = eta_0 * (1 + cos(pi * e / E)) / 2, e zero-based), mean-over-batch
cross entropy, no weight decay or other regularization (dropout only where
the architecture specifies it). With sigma_train > 0, forward-only additive
Gaussian noise is active at every injection site during every training
forward, with fresh draws per step; with quantization on, fake quantizers
(STE backward) are active and activation calibration updates happen in
training mode only. Weights always stay stored in full precision.

Everything is reproducible: the same TrainConfig.seed yields a
bit-identical TrainHistory, and data order never depends on scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from quantnoise import autodiff as ad
from quantnoise import models as M
from quantnoise.errors import ConfigError, NumericError
from quantnoise.noise import ADDITIVE_ACTIVATION, GLOBAL, NoiseSpec
from quantnoise.quantizer import QuantizerSet, QuantSettings, make_quantizers
from quantnoise.rng import (
    TAG_DROPOUT, TAG_MONITOR_NOISE, TAG_SHUFFLE, TAG_TRAIN_NOISE, RngStream,
)

cross_entropy = ad.cross_entropy


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run.

    Paper-faithful defaults are lr=1e-3, batch_size=128, epochs=500;
    desk-scale presets override epochs and dataset size.
    """
    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    sigma_train: float = 0.0
    quant: Optional[QuantSettings] = None
    seed: int = 0
    eval_batch: int = 256
    include_input_site: bool = False
    monitor_noisy: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.sigma_train < 0:
            raise ConfigError(f"sigma_train must be >= 0, got {self.sigma_train}")


@dataclass
class TrainHistory:
    """Per-epoch trajectory; all lists share the epoch count."""
    epoch: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    test_acc: list = field(default_factory=list)
    test_acc_noisy: list = field(default_factory=list)

    def rows(self):
        return zip(self.epoch, self.lr, self.train_loss, self.train_acc,
                   self.test_acc, self.test_acc_noisy)


@dataclass
class TrainResult:
    params: dict
    quantset: Optional[QuantizerSet]
    history: TrainHistory


def cosine_lr(lr0: float, epoch: int, total_epochs: int) -> float:
    """eta_0 at epoch 0, eta_0/2 at T/2, 0 at T (epochs are zero-based)."""
    return lr0 * (1.0 + math.cos(math.pi * epoch / total_epochs)) / 2.0


@dataclass
class AdamState:
    """First/second moment estimates with bias-correction step count."""
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def init(cls, params: dict) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One in-place Adam update with bias correction."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for k, p in params.items():
        g = grads[k]
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * (g * g)
        mhat = state.m[k] / p.dtype.type(bc1)
        vhat = state.v[k] / p.dtype.type(bc2)
        params[k] = p - p.dtype.type(lr) * mhat / (np.sqrt(vhat) + p.dtype.type(eps))


def _scale_aware_rescale(model, params, train_images, cfg) -> None:
    """Size the first compute layer for the training-time perturbations.

    Two perturbation scales demand activations well above them: a
    constant quantization step s (values below s/2 all quantize to
    zero) and training noise sigma (the signal must dominate the
    injected noise for gradients to carry information). A freshly
    initialized network sits at O(1) activations and, under a coarse
    grid or strong noise, only escapes by random walk, which needs far
    more steps than a desk-scale budget; at full scale the same
    adaptation happens through hundreds of epochs of weight growth.
    Scaling the first conv/linear weights so the layer's output std is
    ~2x the dominant perturbation scale starts training inside the
    informative regime. Never shrinks (targets below the standard init
    std leave the parameters untouched).
    """
    target = float(cfg.sigma_train)
    if cfg.quant is not None and cfg.quant.scaling == "constant":
        target = max(target, cfg.quant.constant_scale)
    if target <= 0:
        return
    probe = train_images[:min(256, train_images.shape[0])]
    std = M.first_compute_output_std(model, params, probe)
    gamma = max(1.0, 2.0 * target / max(std, 1e-9))
    if gamma > 1.0:
        for l in model.layers:
            if l.kind in ("conv", "linear"):
                params[f"{l.id}.w"] = (params[f"{l.id}.w"]
                                       * np.float32(gamma))
                break


def _train_noise_runtime(model, cfg: TrainConfig, master: RngStream,
                         global_step: int):
    if cfg.sigma_train == 0:
        return None
    spec = NoiseSpec(ADDITIVE_ACTIVATION, cfg.sigma_train, GLOBAL)
    return M.NoiseRuntime.for_model(
        model, spec,
        lambda site: master.derive(TAG_TRAIN_NOISE, global_step, site),
        include_input=cfg.include_input_site)


def evaluate(model, params, images: np.ndarray, labels: np.ndarray,
             quant: Optional[QuantizerSet] = None,
             noise: Optional[M.NoiseRuntime] = None,
             eval_batch: int = 256) -> float:
    """Accuracy of argmax(logits) over a dataset, deterministic batching."""
    n = images.shape[0]
    if n == 0:
        raise ConfigError("evaluate called with an empty dataset")
    correct = 0
    for lo in range(0, n, eval_batch):
        hi = min(lo + eval_batch, n)
        logits, _ = M.forward(model, params, images[lo:hi], train=False,
                              quant=quant, noise=noise)
        pred = np.argmax(logits.value, axis=1)
        correct += int(np.sum(pred == labels[lo:hi]))
    return correct / n


def train(model, train_images: np.ndarray, train_labels: np.ndarray,
          test_images: np.ndarray, test_labels: np.ndarray,
          cfg: TrainConfig, log=None,
          init_params: Optional[dict] = None) -> TrainResult:
    """Run the full loop; returns trained params, quantizers, history.

    `init_params` warm-starts from existing weights (fine-tuning /
    progressive noise exposure); fresh runs draw Kaiming init from the
    seed and, under constant-scale quantization or noisy training,
    rescale the first compute layer for the perturbation scale.
    Aborts with NumericError (epoch, batch, lr in the message) if the
    loss goes NaN.
    """
    master = RngStream(cfg.seed)
    if init_params is None:
        params = M.init_params(model, master)
        _scale_aware_rescale(model, params, train_images, cfg)
    else:
        expected = set(M.param_shapes(model))
        if set(init_params) != expected:
            raise ConfigError("init_params do not match the model's "
                              "parameter set")
        params = {k: np.array(v, dtype=np.float32) for k, v in
                  init_params.items()}
    quantset = make_quantizers(model, cfg.quant) if cfg.quant else None
    state = AdamState.init(params)
    history = TrainHistory()
    n = train_images.shape[0]
    if n == 0:
        raise ConfigError("training set is empty")
    global_step = 0
    for epoch in range(cfg.epochs):
        lr_e = cosine_lr(cfg.lr, epoch, cfg.epochs)
        perm = master.derive(TAG_SHUFFLE, epoch).permutation(n)
        loss_sum = 0.0
        correct = 0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            xb, yb = train_images[idx], train_labels[idx]
            noise_rt = _train_noise_runtime(model, cfg, master, global_step)
            drop_stream = master.derive(TAG_DROPOUT, global_step)
            logits, pnodes = M.forward(model, params, xb, train=True,
                                       quant=quantset, noise=noise_rt,
                                       dropout_stream=drop_stream)
            loss = ad.cross_entropy(logits, yb)
            if not np.isfinite(loss.value):
                raise NumericError(
                    f"NaN/Inf loss at epoch {epoch}, batch {lo // cfg.batch_size}, "
                    f"lr {lr_e:.3e}")
            names = list(params)
            gs = ad.grad(loss, [pnodes[k] for k in names])
            adam_step(params, dict(zip(names, gs)), state, lr_e,
                      cfg.beta1, cfg.beta2, cfg.eps)
            loss_sum += float(loss.value) * len(idx)
            correct += int(np.sum(np.argmax(logits.value, axis=1) == yb))
            global_step += 1
        test_acc = evaluate(model, params, test_images, test_labels,
                            quant=quantset, eval_batch=cfg.eval_batch)
        if cfg.monitor_noisy and cfg.sigma_train > 0:
            spec = NoiseSpec(ADDITIVE_ACTIVATION, cfg.sigma_train, GLOBAL)
            mon = M.NoiseRuntime.for_model(
                model, spec,
                lambda site: master.derive(TAG_MONITOR_NOISE, epoch, site),
                include_input=cfg.include_input_site)
            noisy_acc = evaluate(model, params, test_images, test_labels,
                                 quant=quantset, noise=mon,
                                 eval_batch=cfg.eval_batch)
        else:
            noisy_acc = test_acc
        history.epoch.append(epoch)
        history.lr.append(lr_e)
        history.train_loss.append(loss_sum / n)
        history.train_acc.append(correct / n)
        history.test_acc.append(test_acc)
        history.test_acc_noisy.append(noisy_acc)
        if log:
            log(f"epoch {epoch:3d}  lr {lr_e:.2e}  loss {loss_sum / n:.4f}  "
                f"train_acc {correct / n:.3f}  test_acc {test_acc:.3f}  "
                f"test_acc_noisy {noisy_acc:.3f}")
    if quantset is not None:
        quantset.freeze()
    return TrainResult(params=params, quantset=quantset, history=history)
