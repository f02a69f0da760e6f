"""Command-line pipeline: train, sweep, fit, compare, sites, report.

Every command takes an optional JSON config (--config) whose fields can
be overridden by flags; the fully resolved configuration is written
verbatim into the output directory before any work starts, and every
command supports --dry-run (validate + print config, do nothing).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure, 5 fit non-convergence.

Dataset resolution: kind "cifar10" reads the standard binary batches
from --dataset-root or $QUANTNOISE_CIFAR10; kind "synthetic" (default
for desk presets) generates a deterministic CIFAR-format stand-in on
first use. Two invocations with the same effective config and seed
produce byte-identical CSV artifacts for any --workers value.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import tempfile

import numpy as np

from quantnoise import data as D
from quantnoise import models as M
from quantnoise import report as R
from quantnoise.errors import (
    ConfigError, DataError, FitConvergenceError, NumericError,
    QuantNoiseError,
)
from quantnoise.metric import (
    fit_midpoint, log_sigma_grid, noise_sweep, pareto_report,
)
from quantnoise.noise import GLOBAL, enumerate_injection_sites
from quantnoise.quantizer import QuantSettings
from quantnoise.training import TrainConfig, train

EXIT_CODES = {
    ConfigError: 2,
    DataError: 3,
    NumericError: 4,
    FitConvergenceError: 5,
}

ENV_CIFAR = "QUANTNOISE_CIFAR10"

DEFAULT_CONFIG = {
    "model": {"id": "mini-lenet", "width_scale": 1.0, "depth_scale": 1.0},
    "dataset": {"kind": "synthetic", "root": None,
                "train_size": 5000, "test_size": 1000},
    "train": {"epochs": 20, "batch_size": 128, "lr": 1e-3,
              "sigma_train": 0.0, "seed": 0},
    "quant": None,
    "sweep": {"sigma_min": 0.01, "sigma_max": 8.0, "points": 20,
              "include_zero": False, "repeats": 10, "workers": 1,
              "placement": "global", "noise_model": "additive_activation",
              "eval_size": 1000, "seed": 0},
}

PRESETS = {
    # desk scale: runs in minutes on a laptop CPU
    "desk-lenet": {},
    "desk-tiny": {
        "model": {"id": "mini-lenet", "width_scale": 0.5},
        "dataset": {"train_size": 1000, "test_size": 300},
        "train": {"epochs": 3},
        "sweep": {"points": 5, "repeats": 3, "sigma_max": 4.0,
                  "eval_size": 300},
    },
    "desk-resnet-mini": {
        "model": {"id": "mini-resnet", "width_scale": 0.25,
                  "depth_scale": 0.5},
        "dataset": {"train_size": 3000, "test_size": 800},
        "train": {"epochs": 12},
        "sweep": {"points": 12, "repeats": 8, "sigma_max": 6.0,
                  "eval_size": 600},
    },
    "desk-vgg-mini": {
        "model": {"id": "mini-vgg", "width_scale": 0.25, "depth_scale": 0.5},
        "dataset": {"train_size": 3000, "test_size": 800},
        "train": {"epochs": 12},
        "sweep": {"points": 12, "repeats": 8, "sigma_max": 6.0,
                  "eval_size": 600},
    },
    # paper scale: full CIFAR-10 and 500 epochs; documented as long-running
    "paper-lenet5": {
        "model": {"id": "lenet5"},
        "dataset": {"kind": "cifar10", "train_size": 50000,
                    "test_size": 10000},
        "train": {"epochs": 500},
        "sweep": {"eval_size": 10000},
    },
    "paper-vgg11": {
        "model": {"id": "vgg11"},
        "dataset": {"kind": "cifar10", "train_size": 50000,
                    "test_size": 10000},
        "train": {"epochs": 500, "lr": 1e-4},
        "sweep": {"eval_size": 10000},
    },
    "paper-resnet18": {
        "model": {"id": "resnet18"},
        "dataset": {"kind": "cifar10", "train_size": 50000,
                    "test_size": 10000},
        "train": {"epochs": 500, "lr": 1e-2},
        "sweep": {"eval_size": 10000},
    },
}


def _deep_update(base: dict, patch: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in patch.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(args) -> dict:
    """Merge defaults <- preset <- --config file <- command-line flags."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if getattr(args, "preset", None):
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; available: "
                              f"{', '.join(sorted(PRESETS))}")
        cfg = _deep_update(cfg, PRESETS[args.preset])
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                file_cfg = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {args.config} is not valid JSON: {e}")
        cfg = _deep_update(cfg, file_cfg)
    flag_map = {
        "model": ("model", "id"), "width_scale": ("model", "width_scale"),
        "depth_scale": ("model", "depth_scale"),
        "dataset_kind": ("dataset", "kind"), "dataset_root": ("dataset", "root"),
        "train_size": ("dataset", "train_size"),
        "test_size": ("dataset", "test_size"),
        "epochs": ("train", "epochs"), "batch_size": ("train", "batch_size"),
        "lr": ("train", "lr"), "sigma_train": ("train", "sigma_train"),
        "seed": ("train", "seed"),
        "sigma_min": ("sweep", "sigma_min"), "sigma_max": ("sweep", "sigma_max"),
        "sigma_points": ("sweep", "points"),
        "include_zero": ("sweep", "include_zero"),
        "repeats": ("sweep", "repeats"), "workers": ("sweep", "workers"),
        "placement": ("sweep", "placement"),
        "noise_model": ("sweep", "noise_model"),
        "eval_size": ("sweep", "eval_size"),
        "sweep_seed": ("sweep", "seed"),
    }
    for flag, (sec, key) in flag_map.items():
        val = getattr(args, flag, None)
        if val is not None:
            cfg[sec][key] = val
    quant_mode = getattr(args, "quant", None)
    if quant_mode is not None:
        if quant_mode == "off":
            cfg["quant"] = None
        else:
            q = cfg.get("quant") or {}
            q["scaling"] = quant_mode
            cfg["quant"] = q
    if cfg.get("quant") is not None:
        q = cfg["quant"]
        if getattr(args, "bits", None) is not None:
            q["bit_width"] = args.bits
        if getattr(args, "constant_scale", None) is not None:
            q["constant_scale"] = args.constant_scale
        q.setdefault("bit_width", 8)
        q.setdefault("scaling", "calibrated")
        q.setdefault("constant_scale", 1.0)
        q.setdefault("quantize_input", False)
    return cfg


def quant_settings_from(cfg: dict) -> QuantSettings | None:
    q = cfg.get("quant")
    if q is None:
        return None
    return QuantSettings(bit_width=int(q["bit_width"]), scaling=q["scaling"],
                         constant_scale=float(q["constant_scale"]),
                         quantize_input=bool(q.get("quantize_input", False)))


def quant_metadata(cfg: dict) -> dict:
    q = cfg.get("quant")
    if q is None:
        return {"quant_mode": "off", "scale_factor": "none",
                "bit_width": "fp32"}
    scale = (repr(float(q["constant_scale"])) if q["scaling"] == "constant"
             else "dynamic")
    return {"quant_mode": q["scaling"], "scale_factor": scale,
            "bit_width": str(q["bit_width"])}


def load_dataset(cfg: dict):
    ds = cfg["dataset"]
    kind = ds.get("kind", "synthetic")
    root = ds.get("root") or os.environ.get(ENV_CIFAR)
    if kind == "cifar10":
        if not root:
            raise ConfigError(
                "dataset kind 'cifar10' needs --dataset-root or "
                f"${ENV_CIFAR} pointing at the binary batches")
        if not os.path.isdir(root):
            raise ConfigError(f"dataset root {root!r} does not exist")
        train_ds, test_ds = D.load_cifar10(root)
    elif kind == "synthetic":
        pool_train = int(ds.get("pool_train", 25000))
        pool_test = int(ds.get("pool_test", 5000))
        if not root:
            root = os.path.join(
                tempfile.gettempdir(),
                f"quantnoise-synthetic-cifar10-{pool_train}-{pool_test}")
        marker = os.path.join(root, "test_batch.bin")
        if not os.path.exists(marker):
            D.synthetic_cifar10(root, n_train=pool_train, n_test=pool_test)
        train_ds, test_ds = D.load_cifar10(root)
    elif kind == "mnist":
        if not root:
            raise ConfigError("dataset kind 'mnist' needs --dataset-root")
        train_ds = D.load_mnist_idx(root, "train")
        test_ds = D.load_mnist_idx(root, "t10k")
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    seed = int(cfg["train"]["seed"])
    if ds.get("train_size") and ds["train_size"] < train_ds.n:
        train_ds = D.subset(train_ds, int(ds["train_size"]), seed=seed + 1)
    if ds.get("test_size") and ds["test_size"] < test_ds.n:
        test_ds = D.subset(test_ds, int(ds["test_size"]), seed=seed + 2)
    return train_ds, test_ds


def build_model_from(cfg: dict) -> M.ModelSpec:
    m = cfg["model"]
    return M.build_model(m["id"], float(m.get("width_scale", 1.0)),
                         float(m.get("depth_scale", 1.0)),
                         bool(m.get("skips", True)))


def write_effective_config(out_dir: str, cfg: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "effective_config.json"), "w") as f:
        json.dump(cfg, f, sort_keys=True, indent=2)
        f.write("\n")


def parse_placement(text):
    if text == GLOBAL:
        return GLOBAL
    if isinstance(text, int):
        return text
    if text.startswith("single:"):
        try:
            return int(text.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad placement {text!r}; use 'global' or "
                              f"'single:<index>'")
    raise ConfigError(f"bad placement {text!r}; use 'global' or 'single:<index>'")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = resolve_config(args)
    model = build_model_from(cfg)
    tc = cfg["train"]
    train_cfg = TrainConfig(
        epochs=int(tc["epochs"]), batch_size=int(tc["batch_size"]),
        lr=float(tc["lr"]), sigma_train=float(tc["sigma_train"]),
        quant=quant_settings_from(cfg), seed=int(tc["seed"]))
    if args.dry_run:
        print(json.dumps(cfg, sort_keys=True, indent=2))
        return 0
    write_effective_config(args.out, cfg)
    train_ds, test_ds = load_dataset(cfg)
    log = (lambda msg: print(msg, flush=True)) if args.verbose else None
    init_params = None
    if getattr(args, "init_checkpoint", None):
        init_model, init_params, _, _ = D.load_checkpoint(args.init_checkpoint)
        if init_model != model:
            raise ConfigError("--init-checkpoint was trained on a different "
                              "architecture")
    result = train(model, train_ds.images, train_ds.labels,
                   test_ds.images, test_ds.labels, train_cfg, log=log,
                   init_params=init_params)
    D.write_history_csv(os.path.join(args.out, "history.csv"), result.history)
    D.save_checkpoint(os.path.join(args.out, "checkpoint.qnckpt"), model,
                      result.params, result.quantset, train_config=tc,
                      seed=int(tc["seed"]))
    print(f"trained {model.name}: final test accuracy "
          f"{result.history.test_acc[-1]:.4f}; artifacts in {args.out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    sw = cfg["sweep"]
    placement = parse_placement(sw["placement"])
    if args.dry_run:
        print(json.dumps(cfg, sort_keys=True, indent=2))
        return 0
    model, params, quantset, header = D.load_checkpoint(args.checkpoint)
    sites = enumerate_injection_sites(model)
    if placement != GLOBAL and not 0 <= placement < len(sites):
        listing = "\n".join("  " + s.describe() for s in sites)
        raise ConfigError(
            f"single-layer index {placement} out of range; valid sites for "
            f"{model.name}:\n{listing}")
    write_effective_config(args.out, cfg)
    _, test_ds = load_dataset(cfg)
    eval_size = int(sw.get("eval_size") or test_ds.n)
    if eval_size < test_ds.n:
        test_ds = D.subset(test_ds, eval_size, seed=int(sw["seed"]) + 3)
    grid = log_sigma_grid(float(sw["sigma_min"]), float(sw["sigma_max"]),
                          int(sw["points"]), bool(sw["include_zero"]))
    meta = {"model_id": model.name, "seed": int(sw["seed"]),
            "noise_model": sw["noise_model"], "placement": str(sw["placement"])}
    qhdr = header.get("quantizers")
    qview = None if qhdr is None else {
        "bit_width": qhdr["settings"]["bit_width"],
        "scaling": qhdr["settings"]["scaling"],
        "constant_scale": qhdr["settings"]["constant_scale"],
    }
    meta.update(quant_metadata({"quant": qview}))
    sweep = noise_sweep(model, params, grid, int(sw["repeats"]),
                        test_ds.images, test_ds.labels, quantset=quantset,
                        noise_model=sw["noise_model"], placement=placement,
                        seed=int(sw["seed"]), workers=int(sw["workers"]),
                        metadata=meta)
    D.write_sweep_csv(os.path.join(args.out, "sweep.csv"), sweep)
    print(f"swept {model.name} over {len(grid)} sigmas x {sw['repeats']} "
          f"repeats; wrote {os.path.join(args.out, 'sweep.csv')}")
    return 0


def cmd_fit(args) -> int:
    if args.dry_run:
        print(json.dumps({"sweep": args.sweep, "out": args.out,
                          "n_eval": args.n_eval}, indent=2, sort_keys=True))
        return 0
    sweep = D.read_sweep_csv(args.sweep, n_eval=args.n_eval)
    fit = fit_midpoint(sweep)
    meta = dict(sweep.metadata)
    meta["peak_accuracy"] = float(np.max(sweep.means()))
    D.write_fit_summary(args.out, fit, metadata=meta)
    print(f"mu = {fit.mu:.6g} +- {fit.mu_std:.3g}  (s={fit.s:.4g}, "
          f"da={fit.da:.4g}, a_min={fit.a_min:.4g}); wrote {args.out}")
    return 0


def cmd_compare(args) -> int:
    if args.dry_run:
        print(json.dumps({"fits": args.fits, "out": args.out}, indent=2,
                         sort_keys=True))
        return 0
    entries = []
    for path in args.fits:
        d = D.read_fit_summary(path)

        class _F:  # minimal fit view for the report
            mu = d["mu"]
            mu_std = d["mu_std"]
        label = d["metadata"].get("label") or d["metadata"].get(
            "model_id", os.path.basename(path))
        qm = d["metadata"].get("quant_mode", "off")
        if qm != "off":
            label += f" {qm}:{d['metadata'].get('scale_factor')}" \
                     f"@{d['metadata'].get('bit_width')}b"
        entries.append((label, float(d["metadata"].get("peak_accuracy", 0.0)),
                        _F()))
    rows = pareto_report(entries)
    with open(args.out, "w", newline="") as f:
        f.write("label,peak_accuracy,mu,mu_std,pareto_front\n")
        for r in rows:
            f.write(f"{r.label},{r.peak_accuracy!r},{r.mu!r},{r.mu_std!r},"
                    f"{int(r.on_front)}\n")
    for r in rows:
        star = "*" if r.on_front else " "
        print(f"{star} {r.label:<40s} acc={r.peak_accuracy:.4f} "
              f"mu={r.mu:.4g} +- {r.mu_std:.3g}")
    print(f"wrote {args.out}")
    return 0


def cmd_sites(args) -> int:
    cfg = resolve_config(args)
    model = build_model_from(cfg)
    if args.dry_run:
        print(json.dumps(cfg["model"], sort_keys=True, indent=2))
        return 0
    sites = enumerate_injection_sites(model,
                                      include_input=args.include_input)
    print(f"{model.name}: {len(sites)} injection sites")
    for s in sites:
        print("  " + s.describe())
    return 0


def cmd_report(args) -> int:
    if args.dry_run:
        print(json.dumps({"sweep": args.sweep, "fit": args.fit,
                          "compare": args.compare, "history": args.history,
                          "out": args.out}, indent=2, sort_keys=True))
        return 0
    os.makedirs(args.out, exist_ok=True)
    wrote = []
    if args.sweep:
        sweep = D.read_sweep_csv(args.sweep, n_eval=args.n_eval)
        fit_dict = D.read_fit_summary(args.fit) if args.fit else None
        wrote.append(R.plot_sweep(sweep, fit_dict,
                                  os.path.join(args.out, "degradation.png")))
    if args.compare:
        rows = _read_compare_csv(args.compare)
        wrote.append(R.plot_tradeoff(rows,
                                     os.path.join(args.out, "tradeoff.png")))
    if args.history:
        rows = D.read_history_csv(args.history)
        wrote.append(R.plot_history(rows,
                                    os.path.join(args.out, "training.png")))
    if not wrote:
        raise ConfigError("report needs at least one of --sweep/--compare/"
                          "--history")
    for w in wrote:
        print(f"wrote {w}")
    return 0


def _read_compare_csv(path):
    from quantnoise.metric import TradeoffRow
    with open(path, newline="") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    if not lines or lines[0] != "label,peak_accuracy,mu,mu_std,pareto_front":
        raise DataError(f"{path}: not a comparison CSV")
    rows = []
    for ln in lines[1:]:
        label, acc, mu, mu_std, front = ln.rsplit(",", 4)
        rows.append(TradeoffRow(label, float(acc), float(mu),
                                float(mu_std), bool(int(front))))
    return rows


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--preset", help=f"named preset: {', '.join(sorted(PRESETS))}")
    p.add_argument("--dry-run", action="store_true",
                   help="validate configuration and exit without computing")
    p.add_argument("--model", help="model id (lenet5, vgg11, resnet18, "
                                   "mini-lenet, mini-vgg, mini-resnet[-noskip])")
    p.add_argument("--width-scale", dest="width_scale", type=float)
    p.add_argument("--depth-scale", dest="depth_scale", type=float)
    p.add_argument("--dataset-kind", dest="dataset_kind",
                   choices=["cifar10", "synthetic", "mnist"])
    p.add_argument("--dataset-root", dest="dataset_root",
                   help=f"dataset directory (or ${ENV_CIFAR})")
    p.add_argument("--train-size", dest="train_size", type=int)
    p.add_argument("--test-size", dest="test_size", type=int)
    p.add_argument("--seed", type=int)


def _add_quant(p):
    p.add_argument("--quant", choices=["off", "constant", "calibrated"],
                   help="quantization mode (default off)")
    p.add_argument("--bits", type=int, help="uniform bit width")
    p.add_argument("--constant-scale", dest="constant_scale", type=float,
                   help="shared activation scaling factor (constant mode)")


def _add_sweep_flags(p):
    p.add_argument("--sigma-min", dest="sigma_min", type=float)
    p.add_argument("--sigma-max", dest="sigma_max", type=float)
    p.add_argument("--sigma-points", dest="sigma_points", type=int)
    p.add_argument("--include-zero", dest="include_zero", action="store_const",
                   const=True, default=None,
                   help="prepend a sigma = 0 anchor point")
    p.add_argument("--repeats", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--placement", help="'global' or 'single:<site index>'")
    p.add_argument("--noise-model", dest="noise_model",
                   choices=["additive_activation", "additive_weight",
                            "lognormal_weight"])
    p.add_argument("--eval-size", dest="eval_size", type=int)
    p.add_argument("--sweep-seed", dest="sweep_seed", type=int)


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="quantnoise",
        description="Train small CNNs with quantization/noise and measure "
                    "robustness via the midpoint noise level.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_common(p)
    _add_quant(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--sigma-train", dest="sigma_train", type=float)
    p.add_argument("--init-checkpoint", dest="init_checkpoint",
                   help="warm-start weights from an existing checkpoint")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="noise-sweep a trained checkpoint")
    _add_common(p)
    _add_sweep_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fit", help="fit the midpoint noise level to a sweep")
    p.add_argument("--sweep", required=True, help="sweep.csv path")
    p.add_argument("--out", required=True, help="fit summary JSON path")
    p.add_argument("--n-eval", dest="n_eval", type=int, default=1000,
                   help="evaluation-set size used for the std floor")
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("compare", help="tabulate fits with Pareto flags")
    p.add_argument("--fits", nargs="+", required=True)
    p.add_argument("--out", required=True, help="comparison CSV path")
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sites", help="list noise-injection sites of a model")
    _add_common(p)
    p.add_argument("--include-input", dest="include_input",
                   action="store_true")
    p.set_defaults(func=cmd_sites)

    p = sub.add_parser("report", help="render figures for existing results")
    p.add_argument("--sweep", help="sweep.csv to plot")
    p.add_argument("--fit", help="fit summary JSON to overlay")
    p.add_argument("--compare", help="comparison CSV to plot")
    p.add_argument("--history", help="history.csv to plot")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-eval", dest="n_eval", type=int, default=1000)
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_report)

    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except QuantNoiseError as e:
        for cls, code in EXIT_CODES.items():
            if isinstance(e, cls):
                print(f"error ({cls.__name__}): {e}", file=sys.stderr)
                return code
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error (DataError): {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
