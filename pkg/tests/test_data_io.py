"""File formats: CIFAR/MNIST readers, subset, checkpoints, CSV round trips."""

import json
import os
import struct

import numpy as np
import pytest

from quantnoise import data as D
from quantnoise import models as M
from quantnoise.errors import DataError
from quantnoise.metric import SweepResult, fit_midpoint, logistic
from quantnoise.quantizer import QuantSettings, make_quantizers
from quantnoise.rng import RngStream
from quantnoise.training import TrainHistory


# ---------------------------------------------------------------------------
# CIFAR-10 binary format
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def cifar_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cifar")
    D.synthetic_cifar10(str(root), n_train=250, n_test=50, seed=1)
    return str(root)


def test_cifar_loader_shapes_and_range(cifar_dir):
    train, test = D.load_cifar10(cifar_dir)
    assert train.images.shape == (250, 3, 32, 32)
    assert test.images.shape == (50, 3, 32, 32)
    assert train.images.min() >= 0.0 and train.images.max() <= 1.0
    assert train.labels.min() >= 0 and train.labels.max() <= 9


def test_cifar_first_record_label_matches_raw_byte(cifar_dir):
    path = os.path.join(cifar_dir, "data_batch_1.bin")
    with open(path, "rb") as f:
        first = f.read(3073)
    train, _ = D.load_cifar10(cifar_dir)
    assert train.labels[0] == first[0]
    # first image red plane starts at byte 1, channel-major
    expect = np.frombuffer(first[1:], dtype=np.uint8).reshape(3, 32, 32)
    assert np.array_equal(train.images[0], expect.astype(np.float32) / 255.0)


def test_cifar_wrong_size_rejected(tmp_path, cifar_dir):
    import shutil
    broken = tmp_path / "broken"
    shutil.copytree(cifar_dir, broken)
    with open(broken / "data_batch_2.bin", "ab") as f:
        f.write(b"\x00" * 10)
    with pytest.raises(DataError):
        D.load_cifar10(str(broken))


def test_cifar_bad_label_rejected(tmp_path, cifar_dir):
    import shutil
    broken = tmp_path / "badlabel"
    shutil.copytree(cifar_dir, broken)
    path = broken / "test_batch.bin"
    blob = bytearray(path.read_bytes())
    blob[0] = 77
    path.write_bytes(bytes(blob))
    with pytest.raises(DataError):
        D.load_cifar10(str(broken))


def test_cifar_missing_file_rejected(tmp_path):
    with pytest.raises(DataError):
        D.load_cifar10(str(tmp_path))


@pytest.mark.skipif(not os.environ.get("QUANTNOISE_CIFAR10"),
                    reason="real CIFAR-10 not configured")
def test_real_cifar_counts():
    train, test = D.load_cifar10(os.environ["QUANTNOISE_CIFAR10"])
    assert train.n == 50000
    assert test.n == 10000


# ---------------------------------------------------------------------------
# MNIST IDX format
# ---------------------------------------------------------------------------

def _write_idx(tmp, n=7):
    imgs = (np.arange(n * 28 * 28) % 251).astype(np.uint8)
    labels = (np.arange(n) % 10).astype(np.uint8)
    with open(os.path.join(tmp, "train-images-idx3-ubyte"), "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        f.write(imgs.tobytes())
    with open(os.path.join(tmp, "train-labels-idx1-ubyte"), "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(labels.tobytes())
    return imgs, labels


def test_mnist_idx_roundtrip(tmp_path):
    imgs, labels = _write_idx(str(tmp_path))
    ds = D.load_mnist_idx(str(tmp_path), "train")
    assert ds.images.shape == (7, 1, 28, 28)
    assert np.array_equal(ds.labels, labels)
    # checksum of the first image against an independent byte-level read
    with open(tmp_path / "train-images-idx3-ubyte", "rb") as f:
        f.seek(16)
        raw0 = np.frombuffer(f.read(28 * 28), dtype=np.uint8)
    assert np.array_equal(ds.images[0, 0].reshape(-1),
                          raw0.astype(np.float32) / 255.0)


def test_mnist_header_count_respected(tmp_path):
    _write_idx(str(tmp_path), n=5)
    assert D.load_mnist_idx(str(tmp_path), "train").n == 5


def test_mnist_rejects_cifar_file(tmp_path, cifar_dir):
    import shutil
    shutil.copy(os.path.join(cifar_dir, "data_batch_1.bin"),
                tmp_path / "train-images-idx3-ubyte")
    shutil.copy(os.path.join(cifar_dir, "data_batch_1.bin"),
                tmp_path / "train-labels-idx1-ubyte")
    with pytest.raises(DataError):
        D.load_mnist_idx(str(tmp_path), "train")


# ---------------------------------------------------------------------------
# subset
# ---------------------------------------------------------------------------

def test_subset_full_is_permutation(cifar_dir):
    train, _ = D.load_cifar10(cifar_dir)
    sub = D.subset(train, train.n, seed=9)
    assert sorted(sub.labels.tolist()) == sorted(train.labels.tolist())
    assert sub.images.sum() == pytest.approx(train.images.sum(), rel=1e-6)


def test_subset_balanced_and_deterministic(cifar_dir):
    train, _ = D.load_cifar10(cifar_dir)
    a = D.subset(train, 95, seed=3)
    b = D.subset(train, 95, seed=3)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.images, b.images)
    hist = np.bincount(a.labels, minlength=10)
    assert hist.max() - hist.min() <= 1
    c = D.subset(train, 95, seed=4)
    assert not np.array_equal(a.labels, c.labels)


def test_subset_size_validation(cifar_dir):
    train, _ = D.load_cifar10(cifar_dir)
    with pytest.raises(DataError):
        D.subset(train, 0, seed=1)
    with pytest.raises(DataError):
        D.subset(train, train.n + 1, seed=1)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _small_checkpoint(tmp_path, fname="m.qnckpt"):
    model = M.build_mini("lenet", 0.5, 1.0)
    params = M.init_params(model, RngStream(40))
    qs = make_quantizers(model, QuantSettings(bit_width=8))
    for st in qs.act_states.values():
        st.update(np.array([0.0, 2.5], dtype=np.float32))
    qs.freeze()
    path = str(tmp_path / fname)
    D.save_checkpoint(path, model, params, qs,
                      train_config={"epochs": 3, "lr": 1e-3}, seed=40)
    return path, model, params, qs


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    path, model, params, qs = _small_checkpoint(tmp_path)
    model2, params2, qs2, header = D.load_checkpoint(path)
    assert model2 == model
    assert set(params2) == set(params)
    for k in params:
        assert np.array_equal(params2[k], params[k])
        assert params2[k].dtype == np.float32
    assert qs2.state_dict() == qs.state_dict()
    assert header["seed"] == 40


def test_checkpoint_save_load_save_identical_bytes(tmp_path):
    path, model, params, qs = _small_checkpoint(tmp_path)
    model2, params2, qs2, header = D.load_checkpoint(path)
    path2 = str(tmp_path / "again.qnckpt")
    D.save_checkpoint(path2, model2, params2, qs2,
                      train_config=header["train_config"],
                      seed=header["seed"])
    assert open(path, "rb").read() == open(path2, "rb").read()


def test_checkpoint_corruption_detected(tmp_path):
    path, *_ = _small_checkpoint(tmp_path)
    blob = bytearray(open(path, "rb").read())
    blob[len(blob) // 2] ^= 0xFF
    open(path, "wb").write(bytes(blob))
    with pytest.raises(DataError, match="checksum|corrupt"):
        D.load_checkpoint(path)


def test_checkpoint_truncation_detected(tmp_path):
    path, *_ = _small_checkpoint(tmp_path)
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:-20])
    with pytest.raises(DataError):
        D.load_checkpoint(path)


def test_checkpoint_version_checked(tmp_path):
    path, *_ = _small_checkpoint(tmp_path)
    blob = bytearray(open(path, "rb").read())
    hlen = struct.unpack_from("<Q", blob, 8)[0]
    header = json.loads(blob[16:16 + hlen].decode())
    header["format_version"] = 99
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    # keep lengths equal so only the version changes
    with pytest.raises(DataError):
        rebuilt = blob[:8] + struct.pack("<Q", len(hb)) + hb + blob[16 + hlen:]
        open(path, "wb").write(bytes(rebuilt))
        D.load_checkpoint(path)


def test_checkpoint_magic_checked(tmp_path):
    path = str(tmp_path / "junk.qnckpt")
    open(path, "wb").write(b"this is not a checkpoint at all")
    with pytest.raises(DataError):
        D.load_checkpoint(path)


def test_checkpoint_golden_header_layout(tmp_path):
    """Freeze the on-disk header contract for format version 1."""
    model = M.build_mini("lenet", 0.5, 1.0)
    params = {k: np.zeros(s, dtype=np.float32)
              for k, s in M.param_shapes(model).items()}
    path = str(tmp_path / "golden.qnckpt")
    D.save_checkpoint(path, model, params, None, None, seed=7)
    blob = open(path, "rb").read()
    assert blob[:8] == b"QNCKPT1\n"
    hlen = struct.unpack_from("<Q", blob, 8)[0]
    header = json.loads(blob[16:16 + hlen].decode())
    assert header["format_version"] == 1
    assert header["seed"] == 7
    names = [a["name"] for a in header["arrays"]]
    assert names == list(M.param_shapes(model))
    assert all(a["dtype"] == "<f4" for a in header["arrays"])
    assert all(a["offset"] % 64 == 0 for a in header["arrays"])


# ---------------------------------------------------------------------------
# sweep CSV / fit summary / history
# ---------------------------------------------------------------------------

def _sweep_for_csv():
    sigmas = np.geomspace(0.05, 2.0, 8)
    acc = np.clip(logistic(sigmas, 0.4, 0.1, 0.3, 0.1)[:, None]
                  + np.linspace(-0.01, 0.01, 3)[None, :], 0, 1)
    return SweepResult(sigmas=sigmas, repeats=3, accuracy=acc, n_eval=500,
                       metadata={"seed": 5, "model_id": "mini-lenet",
                                 "quant_mode": "constant", "scale_factor": 2.0,
                                 "bit_width": 8,
                                 "noise_model": "additive_activation",
                                 "placement": "global"})


def test_sweep_csv_header_exact(tmp_path):
    path = str(tmp_path / "sweep.csv")
    D.write_sweep_csv(path, _sweep_for_csv())
    first = open(path).readline().rstrip("\n")
    assert first == ("sigma,repeat,accuracy,seed,model_id,quant_mode,"
                     "scale_factor,bit_width,noise_model,placement")


def test_sweep_csv_roundtrip(tmp_path):
    path = str(tmp_path / "sweep.csv")
    sweep = _sweep_for_csv()
    D.write_sweep_csv(path, sweep)
    again = D.read_sweep_csv(path, n_eval=500)
    assert np.array_equal(again.sigmas, sweep.sigmas)
    assert np.array_equal(again.accuracy, sweep.accuracy)
    assert again.metadata["model_id"] == "mini-lenet"
    assert again.metadata["bit_width"] == "8"


def test_sweep_csv_malformed_line_reported(tmp_path):
    path = str(tmp_path / "sweep.csv")
    D.write_sweep_csv(path, _sweep_for_csv())
    lines = open(path).read().splitlines()
    lines[3] = "not,a,number" + ",x" * 7
    open(path, "w").write("\n".join(lines) + "\n")
    with pytest.raises(DataError, match="line 4"):
        D.read_sweep_csv(path)


def test_sweep_csv_wrong_header_rejected(tmp_path):
    path = str(tmp_path / "sweep.csv")
    open(path, "w").write("sigma,repeat\n0.1,0\n")
    with pytest.raises(DataError):
        D.read_sweep_csv(path)


def test_fit_summary_roundtrip(tmp_path):
    fit = fit_midpoint(_sweep_for_csv())
    path = str(tmp_path / "fit.json")
    D.write_fit_summary(path, fit, metadata={"model_id": "mini-lenet",
                                             "peak_accuracy": 0.7})
    d = D.read_fit_summary(path)
    assert d["mu"] == fit.mu
    assert d["mu_std"] == fit.mu_std
    assert d["metadata"]["peak_accuracy"] == 0.7
    assert np.array_equal(np.array(d["covariance"]), fit.cov)


def test_history_csv_roundtrip(tmp_path):
    h = TrainHistory(epoch=[0, 1], lr=[1e-3, 5e-4],
                     train_loss=[2.3, 1.9], train_acc=[0.2, 0.4],
                     test_acc=[0.25, 0.4], test_acc_noisy=[0.2, 0.35])
    path = str(tmp_path / "history.csv")
    D.write_history_csv(path, h)
    rows = D.read_history_csv(path)
    assert rows[1] == {"epoch": 1, "lr": 5e-4, "train_loss": 1.9,
                       "train_acc": 0.4, "test_acc": 0.4,
                       "test_acc_noisy": 0.35}


def test_write_is_byte_deterministic(tmp_path):
    a, b = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
    D.write_sweep_csv(a, _sweep_for_csv())
    D.write_sweep_csv(b, _sweep_for_csv())
    assert open(a, "rb").read() == open(b, "rb").read()
