"""Experiment runner: YAML config in, CSV reports and checkpoints out.

Verbs: train, evaluate, attack, diagnose-masking, sweep-capacity, blackbox,
compare. A config plus a seed fully determines a run (single-threaded).
Exit codes: 2 for config/schema violations, 3 for runtime aborts.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import blackbox as bb
from . import detection
from .attacks import AttackConfig, masking_diagnostics
from .checkpoint import load_params, restore_params, save_params
from .data import Dataset, SyntheticSpec, generate_synthetic, load_idx
from .layers import (Activation, Conv2d, DAEConfig, Dense, Flatten, fortify)
from .training import (TrainConfig, evaluate, train, write_epoch_log)

DATA_DIR_ENV = "FORTNET_DATA_DIR"
REPORT_CSV_HEADER = "# fortnet report v1"


class SchemaError(ValueError):
    """Config violates the schema; message carries the offending key path."""


# ---------------------------------------------------------------------------
# config schema
# ---------------------------------------------------------------------------

_LAYER_KEYS = {
    "conv": {"type", "filters", "kernel", "stride", "padding"},
    "dense": {"type", "units"},
    "activation": {"type", "kind", "slope"},
    "relu": {"type"},
    "leaky_relu": {"type", "slope"},
    "tanh": {"type"},
    "flatten": {"type"},
}

_SCHEMA = {
    "dataset": {"source", "images", "labels", "test_images", "test_labels",
                "train_limit", "test_limit", "synthetic"},
    "model": {"layers", "input_shape", "fortified_positions", "dae"},
    "attack": {"kind", "epsilon", "alpha", "steps", "random_start",
               "clip_min", "clip_max"},
    "training": {"lambda_rec", "lambda_adv", "epochs", "batch_size", "lr"},
    "run": {"seeds", "out_dir"},
    "masking": {"enabled", "eval_limit", "unbounded_steps"},
    "detection": {"enabled", "capacities", "spaces", "percentile",
                  "dae_epochs", "eval_limit"},
    "blackbox": {"enabled", "holdout_size", "rounds", "jacobian_lambda",
                 "lr", "epochs_per_round", "eval_limit"},
}

_SYNTHETIC_KEYS = {"kind", "n_per_class", "dimension", "noise", "seed",
                   "separation", "radii"}
_DAE_KEYS = {"sigma", "activation", "bottleneck_factor"}


def _check_keys(mapping: dict, allowed: set, path: str) -> None:
    if not isinstance(mapping, dict):
        raise SchemaError(f"{path}: expected a mapping")
    for key in mapping:
        if key not in allowed:
            raise SchemaError(f"{path}.{key}: unknown key")


def validate_config(config: dict) -> None:
    _check_keys(config, set(_SCHEMA), "config")
    for section, allowed in _SCHEMA.items():
        if section in config:
            _check_keys(config[section], allowed, section)
    model = config.get("model", {})
    for i, layer in enumerate(model.get("layers", [])):
        if not isinstance(layer, dict) or "type" not in layer:
            raise SchemaError(f"model.layers[{i}]: expected a mapping with 'type'")
        kind = layer["type"]
        if kind not in _LAYER_KEYS:
            raise SchemaError(f"model.layers[{i}].type: unknown layer {kind!r}")
        _check_keys(layer, _LAYER_KEYS[kind], f"model.layers[{i}]")
    if "synthetic" in config.get("dataset", {}):
        _check_keys(config["dataset"]["synthetic"], _SYNTHETIC_KEYS,
                    "dataset.synthetic")
    if "dae" in model:
        _check_keys(model["dae"], _DAE_KEYS, "model.dae")


def load_config(path) -> dict:
    with open(path) as f:
        config = yaml.safe_load(f)
    if config is None:
        config = {}
    validate_config(config)
    return config


def config_hash(config: dict) -> str:
    canonical = yaml.safe_dump(config, sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def _data_path(p) -> str:
    base = os.environ.get(DATA_DIR_ENV)
    path = Path(p)
    if base and not path.is_absolute():
        return str(Path(base) / path)
    return str(path)


def build_datasets(dataset_cfg: dict):
    source = dataset_cfg.get("source", "synthetic")
    if source == "idx":
        train_set = load_idx(_data_path(dataset_cfg["images"]),
                             _data_path(dataset_cfg["labels"]),
                             limit=dataset_cfg.get("train_limit"))
        test_set = load_idx(_data_path(dataset_cfg["test_images"]),
                            _data_path(dataset_cfg["test_labels"]),
                            limit=dataset_cfg.get("test_limit"),
                            split="test")
        return train_set, test_set
    if source == "digits":
        return load_digits_dataset(dataset_cfg.get("train_limit"),
                                   dataset_cfg.get("test_limit"))
    if source == "synthetic":
        spec = SyntheticSpec(**dataset_cfg.get("synthetic", {}))
        full = generate_synthetic(spec)
        n_test = max(1, len(full) // 5)
        order = np.random.default_rng(spec.seed + 1).permutation(len(full))
        train_idx, test_idx = order[:-n_test], order[-n_test:]
        train_set = Dataset(full.images[train_idx], full.labels[train_idx],
                            full.num_classes, "train")
        test_set = Dataset(full.images[test_idx], full.labels[test_idx],
                           full.num_classes, "test")
        return train_set, test_set
    raise SchemaError(f"dataset.source: unknown source {source!r}")


def load_digits_dataset(train_limit=None, test_limit=None):
    """Small real handwritten-digit corpus (8x8, bundled with scikit-learn),
    the stand-in when full MNIST IDX files are not available."""
    from sklearn.datasets import load_digits

    raw = load_digits()
    images = raw.images[:, None, :, :] / 16.0
    labels = raw.target
    order = np.random.default_rng(12345).permutation(len(labels))
    images, labels = images[order], labels[order]
    n_test = len(labels) // 6
    train_images, test_images = images[:-n_test], images[-n_test:]
    train_labels, test_labels = labels[:-n_test], labels[-n_test:]
    if train_limit:
        train_images, train_labels = (train_images[:train_limit],
                                      train_labels[:train_limit])
    if test_limit:
        test_images, test_labels = test_images[:test_limit], test_labels[:test_limit]
    return (Dataset(train_images, train_labels, 10, "train"),
            Dataset(test_images, test_labels, 10, "test"))


def build_base_layers(model_cfg: dict, rng: np.random.Generator):
    input_shape = tuple(model_cfg["input_shape"])
    layers = []
    shape = input_shape
    for spec in model_cfg["layers"]:
        kind = spec["type"]
        if kind == "conv":
            layer = Conv2d(shape[0], spec["filters"], spec["kernel"],
                           spec.get("stride", 1), spec.get("padding", 0), rng)
        elif kind == "dense":
            layer = Dense(shape[0], spec["units"], rng)
        elif kind == "activation":
            layer = Activation(spec["kind"], spec.get("slope", 0.01))
        elif kind in ("relu", "tanh"):
            layer = Activation(kind)
        elif kind == "leaky_relu":
            layer = Activation("leaky_relu", spec.get("slope", 0.01))
        elif kind == "flatten":
            layer = Flatten()
        else:  # pragma: no cover - schema validation rejects this earlier
            raise SchemaError(f"unknown layer type {kind!r}")
        shape = layer.output_shape(shape)
        layers.append(layer)
    return layers, input_shape


def build_network(model_cfg: dict, seed: int):
    rng = np.random.default_rng(seed)
    layers, input_shape = build_base_layers(model_cfg, rng)
    dae_cfg_raw = model_cfg.get("dae", {})
    dae_config = DAEConfig(
        sigma=dae_cfg_raw.get("sigma", 0.01),
        activation_kind=dae_cfg_raw.get("activation", "leaky_relu"),
        bottleneck_factor=dae_cfg_raw.get("bottleneck_factor", 0.5),
    )
    positions = model_cfg.get("fortified_positions", [])
    return fortify(layers, positions, dae_config, input_shape, rng)


def build_attack(attack_cfg: dict | None) -> AttackConfig | None:
    if not attack_cfg:
        return None
    return AttackConfig(
        epsilon=attack_cfg["epsilon"],
        alpha=attack_cfg.get("alpha", 0.01),
        steps=attack_cfg.get("steps", 1),
        random_start=attack_cfg.get("random_start", False),
        clip_min=attack_cfg.get("clip_min", 0.0),
        clip_max=attack_cfg.get("clip_max", 1.0),
        kind=attack_cfg.get("kind", "fgsm"),
    )


def build_train_config(config: dict, seed: int) -> TrainConfig:
    t = config.get("training", {})
    dae = config.get("model", {}).get("dae", {})
    return TrainConfig(
        lambda_rec=t.get("lambda_rec", 0.01),
        lambda_adv=t.get("lambda_adv", 0.01),
        epochs=t.get("epochs", 5),
        batch_size=t.get("batch_size", 128),
        seed=seed,
        attack=build_attack(config.get("attack")),
        lr=t.get("lr", 0.001),
        dae_sigma=dae.get("sigma", 0.01),
    )


# ---------------------------------------------------------------------------
# experiment phases
# ---------------------------------------------------------------------------

def run_experiment(config_path, overrides: dict | None = None) -> dict:
    """Train/evaluate/diagnose per the config; returns the report dict and
    writes report.csv, epochs_<seed>.csv, checkpoint_<seed>.npz and, when
    enabled, masking.csv / detection.csv / blackbox.csv."""
    config = load_config(config_path)
    overrides = overrides or {}
    if overrides.get("epsilon") is not None and "attack" in config:
        config["attack"]["epsilon"] = overrides["epsilon"]
    if overrides.get("seed") is not None:
        config.setdefault("run", {})["seeds"] = [overrides["seed"]]
    out_dir = Path(overrides.get("out")
                   or config.get("run", {}).get("out_dir", "runs/latest"))
    out_dir.mkdir(parents=True, exist_ok=True)

    started = time.monotonic()
    train_set, test_set = build_datasets(config.get("dataset", {}))
    attack_cfg = build_attack(config.get("attack"))
    seeds = config.get("run", {}).get("seeds", [1, 2, 3])

    per_seed = []
    nets = {}
    for seed in seeds:
        net = build_network(config["model"], seed)
        train_cfg = build_train_config(config, seed)
        metrics = train(net, train_set, train_cfg)
        write_epoch_log(out_dir / f"epochs_{seed}.csv", metrics)
        save_params(out_dir / f"checkpoint_{seed}.npz", net.params())
        result = evaluate(net, test_set, attack_cfg)
        per_seed.append({"seed": seed,
                         "clean_accuracy": result["clean_accuracy"],
                         "adversarial_accuracy": result["adversarial_accuracy"]})
        nets[seed] = net

    report = {
        "config_hash": config_hash(config),
        "attack": _attack_signature(config.get("attack")),
        "per_seed": per_seed,
        "median_clean_accuracy": statistics.median(
            r["clean_accuracy"] for r in per_seed),
        "median_adversarial_accuracy": (
            statistics.median(r["adversarial_accuracy"] for r in per_seed)
            if attack_cfg is not None else None),
    }

    median_seed = seeds[len(seeds) // 2]
    net = nets[median_seed]

    masking_cfg = config.get("masking", {})
    if masking_cfg.get("enabled") and attack_cfg is not None:
        limit = masking_cfg.get("eval_limit", 500)
        masking = masking_diagnostics(
            net, test_set.images[:limit], test_set.labels[:limit], attack_cfg,
            unbounded_steps=masking_cfg.get("unbounded_steps", 100))
        masking.to_csv(out_dir / "masking.csv")
        report["masking_all_passed"] = masking.all_passed

    detection_cfg = config.get("detection", {})
    if detection_cfg.get("enabled"):
        points = []
        for space in detection_cfg.get("spaces", ["hidden", "input"]):
            points += detection.capacity_sweep(
                train_set, detection_cfg.get("capacities", [64, 16, 4]),
                space, attack_cfg or AttackConfig(epsilon=0.3, kind="fgsm"),
                seed=seeds[0],
                dae_epochs=detection_cfg.get("dae_epochs", 10))
        detection.write_sweep_csv(out_dir / "detection.csv", points)
        report["detection_points"] = [
            (p.capacity, p.space, p.ratio) for p in points]

    blackbox_cfg = config.get("blackbox", {})
    if blackbox_cfg.get("enabled"):
        report["blackbox"] = run_blackbox_phase(net, test_set, attack_cfg,
                                                blackbox_cfg, out_dir,
                                                seed=seeds[0])

    report["wall_clock_seconds"] = time.monotonic() - started
    _write_report_csv(out_dir / "report.csv", report)
    return report


def run_blackbox_phase(net, test_set, attack_cfg, blackbox_cfg, out_dir,
                       seed: int) -> dict:
    cfg = bb.SubstituteConfig(
        holdout_size=blackbox_cfg.get("holdout_size", 150),
        augmentation_rounds=blackbox_cfg.get("rounds", 6),
        jacobian_lambda=blackbox_cfg.get("jacobian_lambda", 0.1),
        lr=blackbox_cfg.get("lr", 0.003),
        epochs_per_round=blackbox_cfg.get("epochs_per_round", 10),
    )
    flat = test_set.flat_images()
    holdout = flat[: cfg.holdout_size]
    eval_limit = blackbox_cfg.get("eval_limit", 500)
    x_eval = flat[cfg.holdout_size : cfg.holdout_size + eval_limit]
    y_eval = test_set.labels[cfg.holdout_size : cfg.holdout_size + eval_limit]

    flat_target = _FlatInputModel(net, test_set.images.shape[1:])
    oracle = bb.Oracle(flat_target)
    substitute, history = bb.train_substitute(oracle, holdout, cfg,
                                              test_set.num_classes, seed=seed)
    results = bb.transfer_attack(substitute, flat_target, attack_cfg
                                 or AttackConfig(epsilon=0.3, kind="fgsm"),
                                 x_eval, y_eval)
    bb.write_blackbox_csv(out_dir / "blackbox.csv", history, results)
    results["final_set_size"] = history[-1]["set_size"]
    results["oracle_queries"] = oracle.query_count
    return results


class _FlatInputModel:
    """Adapter: flat substrate inputs against a (possibly conv) target."""

    def __init__(self, net, image_shape):
        self._net = net
        self._shape = tuple(image_shape)

    def __call__(self, x):
        return self._net(x.reshape((x.shape[0],) + self._shape))


def _attack_signature(attack_cfg: dict | None) -> str:
    if not attack_cfg:
        return "none"
    cfg = build_attack(attack_cfg)
    return (f"{cfg.kind},eps={cfg.epsilon},alpha={cfg.alpha},steps={cfg.steps},"
            f"rs={int(cfg.random_start)},clip={cfg.clip_min}:{cfg.clip_max}")


def _write_report_csv(path, report: dict) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([REPORT_CSV_HEADER])
        writer.writerow(["config_hash", report["config_hash"]])
        writer.writerow(["attack", report["attack"]])
        writer.writerow(["seed", "clean_accuracy", "adversarial_accuracy"])
        for row in report["per_seed"]:
            writer.writerow([row["seed"], repr(row["clean_accuracy"]),
                             repr(row["adversarial_accuracy"])])
        writer.writerow(["median", repr(report["median_clean_accuracy"]),
                         repr(report["median_adversarial_accuracy"])])


def read_report_csv(path) -> dict:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][0] != REPORT_CSV_HEADER:
        raise ValueError(f"{path}: not a fortnet report")
    report = {"config_hash": rows[1][1], "attack": rows[2][1], "per_seed": []}
    for row in rows[4:]:
        entry = {"seed": row[0],
                 "clean_accuracy": None if row[1] == "None" else float(row[1]),
                 "adversarial_accuracy":
                     None if row[2] == "None" else float(row[2])}
        if row[0] == "median":
            report["median_clean_accuracy"] = entry["clean_accuracy"]
            report["median_adversarial_accuracy"] = entry["adversarial_accuracy"]
        else:
            report["per_seed"].append(entry)
    return report


def compare_runs(report_paths) -> list:
    """Side-by-side medians for two or more run reports. Refuses to compare
    runs whose attack configurations differ."""
    if len(report_paths) < 2:
        raise ValueError("need at least two reports to compare")
    reports = [read_report_csv(p) for p in report_paths]
    attacks = {r["attack"] for r in reports}
    if len(attacks) > 1:
        raise ValueError(
            f"incompatible attack configs across reports: {sorted(attacks)}"
        )
    table = []
    for path, r in zip(report_paths, reports):
        table.append({
            "report": str(path),
            "median_clean_accuracy": r["median_clean_accuracy"],
            "median_adversarial_accuracy": r["median_adversarial_accuracy"],
        })
    return table


# ---------------------------------------------------------------------------
# command-line front end
# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("config", help="path to the YAML experiment config")
    p.add_argument("--seed", type=int, help="override the run seed list")
    p.add_argument("--epsilon", type=float, help="override attack epsilon")
    p.add_argument("--out", help="override the output directory")


def _overrides(args):
    return {"seed": args.seed, "epsilon": args.epsilon, "out": args.out}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fortnet")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in ("train", "evaluate", "attack", "diagnose-masking",
                 "sweep-capacity", "blackbox"):
        _add_common(sub.add_parser(verb))
    cmp_parser = sub.add_parser("compare")
    cmp_parser.add_argument("reports", nargs="+")

    args = parser.parse_args(argv)
    try:
        if args.verb == "compare":
            table = compare_runs(args.reports)
            for row in table:
                print(f"{row['report']}: clean={row['median_clean_accuracy']} "
                      f"adv={row['median_adversarial_accuracy']}")
            return 0
        config = load_config(args.config)
    except (SchemaError, FileNotFoundError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    overrides = _overrides(args)
    # each verb enables just its phase on top of train/evaluate
    if args.verb == "evaluate":
        config.setdefault("training", {})["epochs"] = 0
    elif args.verb == "diagnose-masking":
        config.setdefault("masking", {})["enabled"] = True
    elif args.verb == "sweep-capacity":
        config.setdefault("detection", {})["enabled"] = True
    elif args.verb == "blackbox":
        config.setdefault("blackbox", {})["enabled"] = True
    elif args.verb == "attack":
        config.setdefault("training", {})

    try:
        tmp = Path(overrides.get("out") or
                   config.get("run", {}).get("out_dir", "runs/latest"))
        tmp.mkdir(parents=True, exist_ok=True)
        patched = tmp / "effective_config.yaml"
        with open(patched, "w") as f:
            yaml.safe_dump(config, f, sort_keys=True)
        report = run_experiment(patched, overrides)
    except Exception as exc:
        print(f"runtime abort during {args.verb}: {exc}", file=sys.stderr)
        return 3
    print(f"report written to {tmp / 'report.csv'} "
          f"(clean={report['median_clean_accuracy']}, "
          f"adv={report['median_adversarial_accuracy']})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
