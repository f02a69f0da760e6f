"""Datasets, checkpoints, and result files with byte-deterministic formats.

On-disk formats (all little-endian, no timestamps inside data files):

* Checkpoint (.qnckpt, format version 1):
  ``b"QNCKPT1\\n"`` + uint64 header length + canonical JSON header
  (model spec, quantizer state, train-config snapshot, seed, array
  name/shape/offset table) + 64-byte-aligned raw float32 arrays +
  uint32 CRC-32 of header+payload. Loading validates magic, version,
  table consistency and the checksum; any corrupted byte is reported.

* Sweep CSV columns (exact): sigma, repeat, accuracy, seed, model_id,
  quant_mode, scale_factor, bit_width, noise_model, placement.
  Floats are written with ``repr`` (shortest round-trip, locale
  independent); quant_mode is off/constant/calibrated, scale_factor is
  the constant scale or "dynamic"/"none", bit_width is the integer bit
  width or "fp32".

* Fit summary: canonical JSON (sorted keys) with mu, s, da, a_min,
  mu_std, covariance, diagnostics, and caller metadata.

CIFAR-10 loading expects the standard binary batches (3073-byte records:
one label byte + 3072 channel-major pixel bytes). MNIST loading reads the
IDX format. `synthetic_cifar10` writes a procedurally generated 10-class
stand-in in the exact CIFAR-10 binary layout for desk-scale runs where
the real dataset is not on disk.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from quantnoise import models as M
from quantnoise.errors import ConfigError, DataError
from quantnoise.metric import LogisticFit, SweepResult
from quantnoise.quantizer import QuantizerSet
from quantnoise.rng import TAG_SUBSET, RngStream

CHECKPOINT_MAGIC = b"QNCKPT1\n"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """Images in [0,1], shape [N,C,H,W] float32; integer labels."""
    images: np.ndarray
    labels: np.ndarray
    split: str
    num_classes: int = 10

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] == 0:
            raise DataError(f"images must be non-empty [N,C,H,W], got "
                            f"{self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError("labels length does not match image count")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError(f"labels outside [0, {self.num_classes})")

    @property
    def n(self) -> int:
        return int(self.images.shape[0])


_CIFAR_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
_CIFAR_TEST = ["test_batch.bin"]
_CIFAR_RECORD = 3073


def _read_cifar_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % _CIFAR_RECORD != 0:
        raise DataError(f"{path}: size {raw.size} is not a multiple of "
                        f"{_CIFAR_RECORD}-byte CIFAR-10 records")
    rec = raw.reshape(-1, _CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataError(f"{path}: label byte {labels.max()} > 9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def _cifar_dir(root: str) -> str:
    sub = os.path.join(root, "cifar-10-batches-bin")
    return sub if os.path.isdir(sub) else root


def load_cifar10(root: str) -> tuple[Dataset, Dataset]:
    """(train, test) from standard binary batches; pixels scaled by 1/255."""
    d = _cifar_dir(root)
    for name in _CIFAR_TRAIN + _CIFAR_TEST:
        if not os.path.exists(os.path.join(d, name)):
            raise DataError(f"missing CIFAR-10 batch file {name} under {d}")
    tr = [_read_cifar_file(os.path.join(d, n)) for n in _CIFAR_TRAIN]
    te = [_read_cifar_file(os.path.join(d, n)) for n in _CIFAR_TEST]
    train = Dataset(np.concatenate([t[0] for t in tr]),
                    np.concatenate([t[1] for t in tr]), "train")
    test = Dataset(np.concatenate([t[0] for t in te]),
                   np.concatenate([t[1] for t in te]), "test")
    return train, test


_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


def load_mnist_idx(root: str, split: str = "train") -> Dataset:
    """IDX-format reader (desk-scale substitute dataset).

    Expects `<prefix>-images-idx3-ubyte` / `<prefix>-labels-idx1-ubyte`
    under `root`, prefix "train" or "t10k".
    """
    prefix = {"train": "train", "test": "t10k", "t10k": "t10k"}.get(split)
    if prefix is None:
        raise ConfigError(f"unknown MNIST split {split!r}")
    ip = os.path.join(root, f"{prefix}-images-idx3-ubyte")
    lp = os.path.join(root, f"{prefix}-labels-idx1-ubyte")
    with open(ip, "rb") as f:
        magic, n, h, w = struct.unpack(">IIII", f.read(16))
        if magic != _IDX_IMAGES_MAGIC:
            raise DataError(f"{ip}: bad IDX image magic 0x{magic:08x}")
        buf = f.read()
    if len(buf) != n * h * w:
        raise DataError(f"{ip}: truncated image payload")
    images = (np.frombuffer(buf, dtype=np.uint8)
              .reshape(n, 1, h, w).astype(np.float32) / 255.0)
    with open(lp, "rb") as f:
        magic, nl = struct.unpack(">II", f.read(8))
        if magic != _IDX_LABELS_MAGIC:
            raise DataError(f"{lp}: bad IDX label magic 0x{magic:08x}")
        lbuf = f.read()
    if nl != n:
        raise DataError(f"IDX image/label counts differ: {n} vs {nl}")
    if len(lbuf) != nl:
        raise DataError(f"{lp}: truncated label payload")
    labels = np.frombuffer(lbuf, dtype=np.uint8).astype(np.int64)
    return Dataset(images, labels, split)


def subset(dataset: Dataset, n: int, seed: int) -> Dataset:
    """Deterministic stratified sample with equal per-class counts (+-1)."""
    if not 0 < n <= dataset.n:
        raise DataError(f"subset size {n} outside 1..{dataset.n}")
    k = dataset.num_classes
    stream = RngStream(seed, TAG_SUBSET)
    chosen = []
    for c in range(k):
        want = n // k + (1 if c < n % k else 0)
        idx_c = np.flatnonzero(dataset.labels == c)
        if len(idx_c) < want:
            raise DataError(f"class {c} has only {len(idx_c)} samples, "
                            f"need {want}")
        perm = stream.derive(c).permutation(len(idx_c))
        chosen.append(idx_c[perm[:want]])
    idx = np.concatenate(chosen)
    order = stream.derive(k).permutation(len(idx))
    idx = idx[order]
    return Dataset(np.ascontiguousarray(dataset.images[idx]),
                   np.ascontiguousarray(dataset.labels[idx]),
                   dataset.split, dataset.num_classes)


# ---------------------------------------------------------------------------
# synthetic CIFAR-format stand-in
# ---------------------------------------------------------------------------

_CLASS_COLORS = np.array([
    [1.00, 0.15, 0.15], [0.15, 1.00, 0.15], [0.20, 0.35, 1.00],
    [1.00, 0.95, 0.15], [1.00, 0.20, 1.00], [0.15, 0.95, 1.00],
    [1.00, 0.55, 0.10], [0.55, 0.25, 1.00], [0.45, 1.00, 0.55],
    [0.95, 0.75, 0.55],
])


def _synthetic_images(stream: RngStream, labels: np.ndarray) -> np.ndarray:
    """Oriented color gratings with heavy per-image jitter; uint8 [N,3,32,32].

    Class k sets the grating orientation (pi*k/10), a cycle count
    (3 + k mod 3) and a color template. Orientation/frequency jitter,
    random phase and polarity, color desaturation, an illumination
    gradient and pixel noise vary per image, keeping desk-scale test
    accuracy in the same regime as small CNNs on natural images.
    """
    n = len(labels)
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float64) / 32.0

    def grating(lbl, jitter_stream, phase_stream):
        theta = (np.pi * lbl / 10.0
                 + jitter_stream.gaussian((n,), 0.0, 0.16, dtype=np.float64))
        cycles = (3.0 + (lbl % 3)
                  + jitter_stream.uniform((n,)) - 0.5)
        phase = phase_stream.uniform((n,)) * 2 * np.pi
        proj = (np.cos(theta)[:, None, None] * xx[None] +
                np.sin(theta)[:, None, None] * yy[None])
        return np.sin(2 * np.pi * cycles[:, None, None] * proj
                      + phase[:, None, None])

    # target grating plus a distractor from another class that can rival
    # (occasionally exceed) the target's amplitude: classes overlap, so a
    # small CNN cannot reach perfect accuracy
    distractor = (labels + 1
                  + stream.derive(1).integers(n, 9)).astype(np.int64) % 10
    amp_t = 0.14 + 0.30 * stream.derive(2).uniform((n,))
    amp_d = amp_t * (0.55 + 0.60 * stream.derive(3).uniform((n,)))
    polarity = np.where(stream.derive(4).uniform((n,)) < 0.5, 1.0, -1.0)
    base = 0.5 + (amp_t * polarity)[:, None, None] * grating(
        labels, stream.derive(5), stream.derive(6))
    base = base + amp_d[:, None, None] * grating(
        distractor, stream.derive(7), stream.derive(8))
    gx = stream.derive(9).uniform((n,)) * 0.5 - 0.25
    gy = stream.derive(10).uniform((n,)) * 0.5 - 0.25
    desat = 0.45 + 0.50 * stream.derive(11).uniform((n,))
    noise = stream.derive(12).gaussian((n, 3, 32, 32), 0.0, 0.18,
                                       dtype=np.float64)
    illum = gx[:, None, None] * xx[None] + gy[:, None, None] * yy[None]
    color = _CLASS_COLORS[labels] * (1.0 - desat[:, None]) \
        + 0.6 * desat[:, None]
    img = (base[:, None, :, :] * (0.35 + 0.65 * color[:, :, None, None])
           + illum[:, None, :, :] + noise)
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def synthetic_cifar10(root: str, n_train: int = 10000, n_test: int = 2000,
                      seed: int = 20240901) -> str:
    """Write a synthetic 10-class dataset in CIFAR-10 binary layout.

    Returns the directory containing the batch files. Balanced classes;
    deterministic for a given seed. Intended as a desk-scale stand-in
    when the real CIFAR-10 is not available locally.
    """
    os.makedirs(root, exist_ok=True)
    stream = RngStream(seed, 0xC1FA)

    def make_split(count: int, tag: int) -> tuple[np.ndarray, np.ndarray]:
        labels = np.arange(count, dtype=np.int64) % 10
        order = stream.derive(tag).permutation(count)
        labels = labels[order]
        images = _synthetic_images(stream.derive(tag, 1), labels)
        return images, labels

    tr_images, tr_labels = make_split(n_train, 100)
    te_images, te_labels = make_split(n_test, 200)
    per = -(-n_train // 5)  # records per training batch file (last may be short)
    for i in range(5):
        lo, hi = i * per, min((i + 1) * per, n_train)
        _write_cifar_file(os.path.join(root, f"data_batch_{i + 1}.bin"),
                          tr_images[lo:hi], tr_labels[lo:hi])
    _write_cifar_file(os.path.join(root, "test_batch.bin"),
                      te_images, te_labels)
    return root


def _write_cifar_file(path: str, images: np.ndarray, labels: np.ndarray):
    rec = np.empty((len(labels), _CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = labels.astype(np.uint8)
    rec[:, 1:] = images.reshape(len(labels), -1)
    rec.tofile(path)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(path: str, model: M.ModelSpec, params: dict,
                    quantset: QuantizerSet | None = None,
                    train_config: dict | None = None, seed: int = 0) -> None:
    names = list(params)
    arrays = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype=np.float32)
        blob = arr.astype("<f4").tobytes()
        arrays.append({"name": name, "shape": list(arr.shape),
                       "dtype": "<f4", "offset": offset, "nbytes": len(blob)})
        pad = (-len(blob)) % 64
        blobs.append(blob + b"\0" * pad)
        offset += len(blob) + pad
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model": M.model_to_dict(model),
        "quantizers": quantset.state_dict() if quantset is not None else None,
        "train_config": train_config,
        "seed": seed,
        "arrays": arrays,
        "payload_nbytes": offset,
    }
    hb = _canonical_json(header)
    payload = b"".join(blobs)
    crc = zlib.crc32(hb + payload) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(hb)))
        f.write(hb)
        f.write(payload)
        f.write(struct.pack("<I", crc))


def load_checkpoint(path: str):
    """Returns (model, params, quantset_or_None, header_dict).

    Validates magic, version, the array table, and the CRC-32 checksum.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 12 or \
            not blob.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path}: not a quantnoise checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", blob, off)
    off += 8
    if off + hlen + 4 > len(blob):
        raise DataError(f"{path}: truncated checkpoint header")
    hb = blob[off:off + hlen]
    off += hlen
    try:
        header = json.loads(hb.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: corrupt checkpoint header ({e})") from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version "
                        f"{header.get('format_version')!r}")
    payload_nbytes = header["payload_nbytes"]
    if off + payload_nbytes + 4 != len(blob):
        raise DataError(f"{path}: truncated or oversized checkpoint payload")
    payload = blob[off:off + payload_nbytes]
    (crc_stored,) = struct.unpack_from("<I", blob, off + payload_nbytes)
    crc = zlib.crc32(hb + payload) & 0xFFFFFFFF
    if crc != crc_stored:
        raise DataError(f"{path}: checksum mismatch (stored 0x{crc_stored:08x}, "
                        f"computed 0x{crc:08x}); file is corrupted")
    model = M.model_from_dict(header["model"])
    expected = M.param_shapes(model)
    params = {}
    for ent in header["arrays"]:
        name, shape = ent["name"], tuple(ent["shape"])
        if ent["dtype"] != "<f4":
            raise DataError(f"{path}: unsupported array dtype {ent['dtype']}")
        nbytes = int(np.prod(shape)) * 4
        if nbytes != ent["nbytes"] or ent["offset"] + nbytes > payload_nbytes:
            raise DataError(f"{path}: array table inconsistent for {name!r}")
        if name not in expected or tuple(expected[name]) != shape:
            raise DataError(f"{path}: array {name!r} does not match the "
                            f"model's parameter shapes")
        arr = np.frombuffer(payload, dtype="<f4", count=int(np.prod(shape)),
                            offset=ent["offset"]).reshape(shape)
        params[name] = np.ascontiguousarray(arr)
    if set(params) != set(expected):
        raise DataError(f"{path}: parameter set does not match the model")
    qs = header.get("quantizers")
    quantset = QuantizerSet.from_state_dict(qs) if qs is not None else None
    return model, params, quantset, header


# ---------------------------------------------------------------------------
# CSV / fit summaries
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = ("sigma", "repeat", "accuracy", "seed", "model_id",
                 "quant_mode", "scale_factor", "bit_width", "noise_model",
                 "placement")


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_sweep_csv(path: str, sweep: SweepResult) -> None:
    md = sweep.metadata
    fixed = [str(md.get("seed", 0)), str(md.get("model_id", "unknown")),
             str(md.get("quant_mode", "off")),
             str(md.get("scale_factor", "none")),
             str(md.get("bit_width", "fp32")),
             str(md.get("noise_model", "additive_activation")),
             str(md.get("placement", "global"))]
    with open(path, "w", newline="") as f:
        f.write(",".join(SWEEP_COLUMNS) + "\n")
        for sigma, rep, acc in sweep.rows():
            f.write(",".join([_fmt(sigma), str(rep), _fmt(acc)] + fixed) + "\n")


def read_sweep_csv(path: str, n_eval: int = 1000) -> SweepResult:
    """Re-parse a sweep CSV.

    The CSV carries no evaluation-set size, so the standard-deviation
    floor defaults to 1/(2*1000); pass `n_eval` to override (cmd_fit
    exposes --n-eval).
    """
    with open(path, "r", newline="") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    if not lines or lines[0].split(",") != list(SWEEP_COLUMNS):
        raise DataError(f"{path}: missing or wrong sweep CSV header")
    cells = {}
    meta = {}
    for lineno, ln in enumerate(lines[1:], start=2):
        parts = ln.split(",")
        if len(parts) != len(SWEEP_COLUMNS):
            raise DataError(f"{path}: line {lineno}: expected "
                            f"{len(SWEEP_COLUMNS)} fields, got {len(parts)}")
        try:
            sigma = float(parts[0])
            rep = int(parts[1])
            acc = float(parts[2])
        except ValueError as e:
            raise DataError(f"{path}: line {lineno}: {e}") from None
        cells[(sigma, rep)] = acc
        meta = {"seed": int(parts[3]), "model_id": parts[4],
                "quant_mode": parts[5], "scale_factor": parts[6],
                "bit_width": parts[7], "noise_model": parts[8],
                "placement": parts[9]}
    sigmas = sorted({s for s, _ in cells})
    reps = sorted({r for _, r in cells})
    acc = np.full((len(sigmas), len(reps)), np.nan)
    for (s, r), a in cells.items():
        acc[sigmas.index(s), r] = a
    if np.any(np.isnan(acc)):
        raise DataError(f"{path}: missing (sigma, repeat) cells")
    return SweepResult(sigmas=np.array(sigmas), repeats=len(reps),
                       accuracy=acc, n_eval=max(int(n_eval), 1),
                       metadata=meta)


def fit_to_dict(fit: LogisticFit, metadata: dict | None = None) -> dict:
    return {
        "format": 1,
        "mu": fit.mu, "s": fit.s, "da": fit.da, "a_min": fit.a_min,
        "a_max": fit.a_max, "mu_std": fit.mu_std,
        "covariance": [[float(v) for v in row] for row in fit.cov],
        "diagnostics": {"sse": fit.sse, "iterations": fit.iterations,
                        "converged": fit.converged},
        "metadata": dict(metadata or {}),
    }


def write_fit_summary(path: str, fit: LogisticFit,
                      metadata: dict | None = None) -> None:
    with open(path, "w") as f:
        f.write(json.dumps(fit_to_dict(fit, metadata), sort_keys=True,
                           indent=2))
        f.write("\n")


def read_fit_summary(path: str) -> dict:
    with open(path) as f:
        d = json.load(f)
    if d.get("format") != 1:
        raise DataError(f"{path}: unsupported fit summary format")
    return d


HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "test_acc",
                   "test_acc_noisy")


def write_history_csv(path: str, history) -> None:
    with open(path, "w", newline="") as f:
        f.write(",".join(HISTORY_COLUMNS) + "\n")
        for row in history.rows():
            f.write(",".join(_fmt(v) if isinstance(v, float) else str(v)
                             for v in row) + "\n")


def read_history_csv(path: str) -> list[dict]:
    with open(path, newline="") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    if not lines or lines[0].split(",") != list(HISTORY_COLUMNS):
        raise DataError(f"{path}: missing or wrong history CSV header")
    out = []
    for ln in lines[1:]:
        parts = ln.split(",")
        out.append({"epoch": int(parts[0]), "lr": float(parts[1]),
                    "train_loss": float(parts[2]),
                    "train_acc": float(parts[3]),
                    "test_acc": float(parts[4]),
                    "test_acc_noisy": float(parts[5])})
    return out
