"""Command-line interface: train, eval, sweep, landscape.

Configuration is a single flat JSON document; CLI flags override config
keys. Every artifact carries the resolved config fingerprint so runs
can be reproduced exactly. Exit codes: 0 success, 2 config error,
3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import losses
from .data import ADTask, load_idx_dir, load_mvtec_category, make_one_class_task, truncate_batch
from .errors import ConfigError, DataError, NumericError
from .evaluation import evaluate_task
from .landscape import loss_grid, random_direction, reconstruction_loss_fn, sharpness_index
from .model import AEConfig, build_autoencoder
from .optim import OptimizerConfig, TrainConfig, load_checkpoint, save_checkpoint, train

DEFAULTS = {
    # dataset
    "dataset": None,
    "mnist_dir": None,
    "normal_class": 0,
    "mvtec_root": None,
    "mvtec_category": None,
    "image_size": 0,  # 0 picks the dataset default (32 mnist, 256 mvtec)
    "channels": 0,  # 0 picks the dataset default (1 mnist, 3 mvtec)
    "train_limit": None,
    # model
    "depth": 4,
    "kernel_size": 3,
    "base_width": 0,
    "leaky_slope": 0.2,
    "patches": 1,
    # training
    "loss": "l2",
    "epsilon": losses.DEFAULT_EPSILON,
    "reduction": "sum",
    "optimizer": "adam",
    "learning_rate": 1e-3,
    "momentum": 0.0,
    "rho": 0.9,
    "beta1": 0.9,
    "beta2": 0.999,
    "opt_eps": 1e-8,
    "batch_size": 128,
    "epochs": 10,
    "seed": 0,
    "shuffle": True,
    "score_aggregate": "mean",
    "out": None,
    # sweep axes (None -> singleton axis from the base key)
    "losses": None,
    "optimizers": None,
    "batch_sizes": None,
    "seeds": None,
    # landscape
    "landscape_resolution": 51,
    "landscape_span": 1.0,
    "landscape_dims": 2,
    "landscape_samples": 1024,
    "landscape_normalization": "filter",
    "direction_seed": 0,
}


def load_config(path=None, overrides=None):
    """Merge defaults < config file < CLI overrides into one flat dict."""
    cfg = dict(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}", field="config")
        try:
            loaded = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}", field="config")
        if not isinstance(loaded, dict):
            raise ConfigError("config document must be a flat JSON object", field="config")
        for key, value in loaded.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}", field=key)
            cfg[key] = value
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    return cfg


def fingerprint(cfg):
    """Stable hash of the resolved configuration."""
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _dataset_defaults(cfg):
    cfg = dict(cfg)
    if cfg["dataset"] == "mnist":
        cfg["image_size"] = cfg["image_size"] or 32
        cfg["channels"] = cfg["channels"] or 1
    elif cfg["dataset"] == "mvtec":
        cfg["image_size"] = cfg["image_size"] or 256
        cfg["channels"] = cfg["channels"] or 3
    return cfg


def validate_dataset(cfg):
    if cfg["dataset"] not in ("mnist", "mvtec"):
        raise ConfigError(f"must be 'mnist' or 'mvtec', got {cfg['dataset']!r}", field="dataset")
    if cfg["dataset"] == "mnist":
        if not cfg["mnist_dir"]:
            raise ConfigError("required for dataset 'mnist'", field="mnist_dir")
        if not Path(cfg["mnist_dir"]).is_dir():
            raise ConfigError(f"no such directory: {cfg['mnist_dir']}", field="mnist_dir")
    else:
        if not cfg["mvtec_root"]:
            raise ConfigError("required for dataset 'mvtec'", field="mvtec_root")
        if not Path(cfg["mvtec_root"]).is_dir():
            raise ConfigError(f"no such directory: {cfg['mvtec_root']}", field="mvtec_root")
        if not cfg["mvtec_category"]:
            raise ConfigError("required for dataset 'mvtec'", field="mvtec_category")


def build_task(cfg):
    cfg = _dataset_defaults(cfg)
    validate_dataset(cfg)
    size = int(cfg["image_size"])
    if cfg["dataset"] == "mnist":
        train_set, test_set = load_idx_dir(cfg["mnist_dir"])
        native = train_set.images.shape[2:]
        task = make_one_class_task(
            train_set,
            test_set,
            cfg["normal_class"],
            image_size=None if native == (size, size) else (size, size),
        )
    else:
        task = load_mvtec_category(
            cfg["mvtec_root"], cfg["mvtec_category"], (size, size), int(cfg["channels"])
        )
    if cfg["train_limit"]:
        task = ADTask(task.name, truncate_batch(task.train, int(cfg["train_limit"])), task.test)
    return task


def ae_config(cfg):
    cfg = _dataset_defaults(cfg)
    size = int(cfg["image_size"])
    return AEConfig(
        depth=int(cfg["depth"]),
        input_channels=int(cfg["channels"]),
        input_size=(size, size),
        kernel_size=int(cfg["kernel_size"]),
        base_width=int(cfg["base_width"]),
        leaky_slope=float(cfg["leaky_slope"]),
        patches=int(cfg["patches"]),
    )


def train_config(cfg):
    return TrainConfig(
        epochs=int(cfg["epochs"]),
        batch_size=int(cfg["batch_size"]),
        seed=int(cfg["seed"]),
        loss=cfg["loss"],
        optimizer=OptimizerConfig(
            kind=cfg["optimizer"],
            learning_rate=float(cfg["learning_rate"]),
            momentum=float(cfg["momentum"]),
            rho=float(cfg["rho"]),
            beta1=float(cfg["beta1"]),
            beta2=float(cfg["beta2"]),
            eps=float(cfg["opt_eps"]),
        ),
        epsilon=float(cfg["epsilon"]),
        reduction=cfg["reduction"],
        shuffle=bool(cfg["shuffle"]),
    )


def _require_out(cfg):
    if not cfg["out"]:
        raise ConfigError("output directory is required", field="out")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg):
    out = _require_out(cfg)
    cfg = _dataset_defaults(cfg)
    fp = fingerprint(cfg)
    task = build_task(cfg)
    model = build_autoencoder(ae_config(cfg), seed=int(cfg["seed"]))
    history = train(model, task.train, train_config(cfg))
    save_checkpoint(out, model, history.optimizer, history, experiment={"fingerprint": fp})
    (out / "experiment.json").write_text(json.dumps({"fingerprint": fp, "config": cfg}, indent=2, sort_keys=True))
    print(f"loss_kind={cfg['loss']}")
    print(f"final_loss={history.loss_per_epoch[-1]!r}")
    return 0


def cmd_eval(cfg, checkpoint):
    checkpoint = Path(checkpoint)
    model, _, _ = load_checkpoint(checkpoint)
    exp_path = checkpoint / "experiment.json"
    if not exp_path.exists():
        raise ConfigError(f"checkpoint has no experiment.json: {checkpoint}", field="checkpoint")
    experiment = json.loads(exp_path.read_text())
    run_cfg = dict(experiment["config"])
    # dataset location keys may be overridden (e.g. data moved between runs)
    for key in ("mnist_dir", "mvtec_root", "mvtec_category", "out"):
        if cfg.get(key):
            run_cfg[key] = cfg[key]
    out = Path(run_cfg["out"]) if run_cfg.get("out") else checkpoint
    out.mkdir(parents=True, exist_ok=True)
    task = build_task(run_cfg)
    report = evaluate_task(
        model,
        task,
        fingerprint={"config_hash": experiment["fingerprint"]},
        aggregate=run_cfg.get("score_aggregate", "mean"),
    )
    report.save(out / "report.json")
    print(f"auroc={report.auroc!r}")
    return 0


SWEEP_FIELDS = ["task", "loss", "optimizer", "batch_size", "seed", "auroc", "status", "fingerprint"]


def _sweep_axes(cfg):
    axes = {
        "loss": cfg["losses"] if cfg["losses"] is not None else [cfg["loss"]],
        "optimizer": cfg["optimizers"] if cfg["optimizers"] is not None else [cfg["optimizer"]],
        "batch_size": cfg["batch_sizes"] if cfg["batch_sizes"] is not None else [cfg["batch_size"]],
        "seed": cfg["seeds"] if cfg["seeds"] is not None else [cfg["seed"]],
    }
    for name, values in axes.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep axis must be a nonempty list, got {values!r}", field=name)
    return axes


def _read_sweep_rows(path):
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_sweep(cfg):
    out = _require_out(cfg)
    cfg = _dataset_defaults(cfg)
    axes = _sweep_axes(cfg)
    validate_dataset(cfg)

    results_path = out / "results.csv"
    existing = _read_sweep_rows(results_path)
    done = {(r["task"], r["loss"], r["optimizer"], r["batch_size"], r["seed"]) for r in existing}

    task = build_task(cfg)
    new_file = not results_path.exists()
    with open(results_path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        if new_file:
            writer.writeheader()
        for loss in axes["loss"]:
            for optimizer in axes["optimizer"]:
                for batch_size in axes["batch_size"]:
                    for seed in axes["seed"]:
                        key = (task.name, str(loss), str(optimizer), str(batch_size), str(seed))
                        if key in done:
                            continue
                        cell = dict(cfg)
                        cell.update(loss=loss, optimizer=optimizer, batch_size=batch_size, seed=seed)
                        row = {
                            "task": task.name,
                            "loss": loss,
                            "optimizer": optimizer,
                            "batch_size": batch_size,
                            "seed": seed,
                            "fingerprint": fingerprint(cell),
                        }
                        try:
                            model = build_autoencoder(ae_config(cell), seed=int(seed))
                            train(model, task.train, train_config(cell))
                            report = evaluate_task(model, task, aggregate=cell["score_aggregate"])
                            row.update(auroc=repr(report.auroc), status="ok")
                        except Exception as exc:  # cell failures must not abort the sweep
                            row.update(auroc="", status=f"error: {exc}")
                        writer.writerow(row)
                        fh.flush()

    _write_aggregate(results_path, out / "aggregate.csv")
    print(f"sweep_results={results_path}")
    return 0


def _write_aggregate(results_path, aggregate_path):
    rows = [r for r in _read_sweep_rows(results_path) if r["status"] == "ok"]
    cells = {}
    for r in rows:
        cells.setdefault((r["task"], r["loss"], r["optimizer"], r["batch_size"]), []).append(
            float(r["auroc"])
        )
    with open(aggregate_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "loss", "optimizer", "batch_size", "auroc_mean", "n_seeds"])
        for key in sorted(cells):
            values = cells[key]
            writer.writerow(list(key) + [repr(float(np.mean(values))), len(values)])


def _landscape_directions(model, cfg):
    seeds = [int(cfg["direction_seed"])]
    if int(cfg["landscape_dims"]) == 2:
        seeds.append(int(cfg["direction_seed"]) + 1)
    return [random_direction(model, s, cfg["landscape_normalization"]) for s in seeds]


def cmd_landscape(cfg, checkpoint, paired=None):
    out = _require_out(cfg)
    checkpoint = Path(checkpoint)
    model, _, _ = load_checkpoint(checkpoint)
    exp_path = checkpoint / "experiment.json"
    if not exp_path.exists():
        raise ConfigError(f"checkpoint has no experiment.json: {checkpoint}", field="checkpoint")
    experiment = json.loads(exp_path.read_text())
    run_cfg = dict(experiment["config"])
    for key in ("mnist_dir", "mvtec_root"):
        if cfg.get(key):
            run_cfg[key] = cfg[key]

    task = build_task(run_cfg)
    samples = min(int(cfg["landscape_samples"]), len(task.train))
    pixels = task.train.pixels.data[:samples]

    def grid_for(m, run_exp):
        loss_fn = reconstruction_loss_fn(
            run_exp["config"]["loss"], run_exp["config"]["epsilon"], run_exp["config"]["reduction"]
        )
        dirs = _landscape_directions(m, cfg)
        return loss_grid(
            m,
            loss_fn,
            pixels,
            dirs[0],
            dirs[1] if len(dirs) > 1 else None,
            span=float(cfg["landscape_span"]),
            resolution=int(cfg["landscape_resolution"]),
            metadata={
                "fingerprint": run_exp["fingerprint"],
                "loss": run_exp["config"]["loss"],
                "samples": samples,
            },
        )

    grid = grid_for(model, experiment)
    grid.to_csv(out / "landscape.csv")
    meta = dict(grid.metadata)
    meta["sharpness"] = sharpness_index(grid)

    if paired is not None:
        paired = Path(paired)
        paired_model, _, _ = load_checkpoint(paired)
        paired_exp_path = paired / "experiment.json"
        if not paired_exp_path.exists():
            raise ConfigError(f"checkpoint has no experiment.json: {paired}", field="paired")
        paired_exp = json.loads(paired_exp_path.read_text())
        if paired_model.config != model.config:
            raise ConfigError(
                "paired checkpoints have different architectures", field="paired"
            )
        paired_grid = grid_for(paired_model, paired_exp)
        paired_grid.to_csv(out / "landscape_paired.csv")
        meta["paired_sharpness"] = sharpness_index(paired_grid)
        meta["paired_loss"] = paired_exp["config"]["loss"]
        meta["paired_fingerprint"] = paired_exp["fingerprint"]

    (out / "landscape_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    print(f"center_loss={meta['center_loss']!r}")
    print(f"sharpness={meta['sharpness']!r}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    parser = argparse.ArgumentParser(prog="lampad", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--loss", help="loss spec: l2|l1|ssim with optional .lamp suffix")
        p.add_argument("--optimizer", help="sgd|rmsprop|adam")
        p.add_argument("--batch-size", type=int, dest="batch_size")
        p.add_argument("--epochs", type=int)

    p_train = sub.add_parser("train", help="train one model and write a checkpoint")
    common(p_train)

    p_eval = sub.add_parser("eval", help="score a checkpoint's task and print AUROC")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)

    p_sweep = sub.add_parser("sweep", help="run a loss/optimizer/batch-size/seed grid")
    common(p_sweep)

    p_land = sub.add_parser("landscape", help="export a loss-landscape grid CSV")
    common(p_land)
    p_land.add_argument("--checkpoint", required=True)
    p_land.add_argument("--paired", help="second checkpoint sharing direction seeds")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = {
        key: getattr(args, key, None)
        for key in ("out", "seed", "loss", "optimizer", "batch_size", "epochs")
    }
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        if args.command == "landscape":
            return cmd_landscape(cfg, args.checkpoint, args.paired)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
