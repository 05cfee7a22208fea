"""Command-line front end: train, eval, profile, noise-eval, gradcheck.

Configuration is a nested YAML file; flag overrides use dotted paths
(``--set model.time_steps=16``) and win over file values. Unknown keys are
rejected with the nearest valid key. All outputs land under
``<out_root>/<run_id>/``.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import difflib
import json
import os
import sys

import numpy as np
import yaml

from . import autodiff as ad
from . import data as data_mod
from . import profiler as prof
from .model import ModelConfig, VideoSpikeNet, load_checkpoint, save_checkpoint, variant_config
from .neurons import NeuronConfig
from .training import TrainConfig, evaluate, fit

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

DEFAULTS = {
    "run": {
        "run_id": None,  # defaults to the command name
        "out_root": "out",
        "seed": 0,
    },
    "model": {
        "variant": "tiny",
        "time_steps": 8,
        "norm_mode": "tdbn",
        "neuron_kind": "PLIF",
        "use_local_pathway": True,
        "surrogate_alpha": 4.0,
        "checkpoint": None,
    },
    "train": {
        "epochs": 30,
        "batch_size": 16,
        "base_lr": 1e-3,
        "warmup_epochs": 3,
        "weight_decay": 1e-2,
        "grad_clip": 5.0,
    },
    "data": {
        "path": None,  # load a saved container instead of generating
        "classes": 8,
        "num_train": 320,
        "num_test": 128,
        "height": 32,
        "width": 32,
        "seed": 1,
    },
    "noise": {
        "gaussian": [0.0, 0.1, 0.5, 1.0],
        "salt_pepper": [0.1, 0.2, 0.3],
        "seed": 7,
    },
    "gradcheck": {
        "tolerance": 1e-4,
    },
}


class ConfigError(ValueError):
    pass


def _merge_checked(base, incoming, path=""):
    out = copy.deepcopy(base)
    for key, value in incoming.items():
        full = f"{path}.{key}" if path else key
        if key not in base:
            hint = difflib.get_close_matches(key, base.keys(), n=1)
            suffix = f"; did you mean {path + '.' if path else ''}{hint[0]!r}?" if hint else ""
            raise ConfigError(f"unknown config key {full!r}{suffix}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{full}: expected a mapping, got {type(value).__name__}")
            out[key] = _merge_checked(base[key], value, full)
        else:
            out[key] = _coerce(full, base[key], value)
    return out


def _coerce(full, default, value):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{full}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{full}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{full}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{full}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{full}: expected a list, got {value!r}")
        return value
    return value


def _apply_override(tree, dotted, raw):
    value = yaml.safe_load(raw)
    keys = dotted.split(".")
    sub = {}
    node = sub
    for key in keys[:-1]:
        node[key] = {}
        node = node[key]
    node[keys[-1]] = value
    return _merge_checked(tree, sub)


def parse_config(config_path=None, overrides=()):
    """Resolve defaults + file + dotted overrides into a validated tree."""
    resolved = copy.deepcopy(DEFAULTS)
    if config_path:
        with open(config_path) as fh:
            file_cfg = yaml.safe_load(fh) or {}
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must contain a mapping")
        resolved = _merge_checked(resolved, file_cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        dotted, raw = item.split("=", 1)
        resolved = _apply_override(resolved, dotted, raw)
    return resolved


def _model_config(cfg) -> ModelConfig:
    m = cfg["model"]
    neuron = NeuronConfig(kind=m["neuron_kind"], surrogate_alpha=m["surrogate_alpha"])
    return variant_config(
        m["variant"],
        time_steps=m["time_steps"],
        norm_mode=m["norm_mode"],
        use_local_pathway=m["use_local_pathway"],
        neuron=neuron,
        in_height=cfg["data"]["height"],
        in_width=cfg["data"]["width"],
        num_classes=cfg["data"]["classes"],
    ) if m["variant"] == "tiny" else variant_config(
        m["variant"],
        time_steps=m["time_steps"],
        norm_mode=m["norm_mode"],
        neuron=neuron,
    )


def _train_config(cfg) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        epochs=t["epochs"], batch_size=t["batch_size"], base_lr=t["base_lr"],
        warmup_epochs=t["warmup_epochs"], weight_decay=t["weight_decay"],
        grad_clip=t["grad_clip"], seed=cfg["run"]["seed"],
    )


def _load_datasets(cfg):
    d = cfg["data"]
    if d["path"]:
        ds = data_mod.load_dataset(d["path"])
        split = len(ds) - min(len(ds) // 4, len(ds) - 1)
        train = data_mod.ClipDataset(ds.clips[:split], ds.labels[:split], ds.seed, ds.class_defs)
        test = data_mod.ClipDataset(ds.clips[split:], ds.labels[split:], ds.seed, ds.class_defs)
        return train, test
    T = cfg["model"]["time_steps"]
    train = data_mod.gen_moving_patterns(d["seed"], classes=d["classes"], num=d["num_train"],
                                         T=T, H=d["height"], W=d["width"])
    test = data_mod.gen_moving_patterns(d["seed"] + 1, classes=d["classes"], num=d["num_test"],
                                        T=T, H=d["height"], W=d["width"])
    return train, test


def _out_dir(cfg, command):
    root = os.environ.get("SPIKEVID_OUT_ROOT", cfg["run"]["out_root"])
    run_id = cfg["run"]["run_id"] or command
    path = os.path.join(root, run_id)
    os.makedirs(path, exist_ok=True)
    return path


def _echo_config(cfg, out_dir):
    with open(os.path.join(out_dir, "config.resolved"), "w") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)


def emit_metrics(records, out_dir, csv_fields=("epoch", "train_loss", "top1")):
    """JSON-lines stream plus a CSV summary with deterministic field order."""
    jsonl = os.path.join(out_dir, "metrics.jsonl")
    with open(jsonl, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    summary = os.path.join(out_dir, "summary.csv")
    with open(summary, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(csv_fields)
        for rec in records:
            if all(f in rec for f in csv_fields):
                writer.writerow([rec[f] for f in csv_fields])
    return jsonl, summary


def _build_or_load_model(cfg):
    checkpoint = cfg["model"]["checkpoint"]
    if checkpoint:
        return load_checkpoint(checkpoint)
    return VideoSpikeNet(_model_config(cfg), seed=cfg["run"]["seed"])


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg, out_dir):
    train_ds, test_ds = _load_datasets(cfg)
    model = VideoSpikeNet(_model_config(cfg), seed=cfg["run"]["seed"])
    tcfg = _train_config(cfg)
    records = []

    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)

    def on_epoch(metrics):
        rec = metrics.to_record()
        records.append(rec)
        print(f"epoch {metrics.epoch:3d}  loss {metrics.train_loss:.4f}  "
              f"top1 {metrics.top1:.4f}  lr {metrics.lr:.2e}", flush=True)

    fit(model, train_ds.clips, train_ds.labels, tcfg,
        test_clips=test_ds.clips, test_labels=test_ds.labels, callback=on_epoch)
    save_checkpoint(model, os.path.join(ckpt_dir, "final.ckpt"))
    emit_metrics(records, out_dir)
    return EXIT_OK


def cmd_eval(cfg, out_dir):
    _, test_ds = _load_datasets(cfg)
    model = _build_or_load_model(cfg)
    top1 = evaluate(model, test_ds.clips, test_ds.labels, cfg["train"]["batch_size"])
    print(f"top1 {top1:.4f}")
    emit_metrics([{"top1": top1, "num_clips": len(test_ds)}], out_dir,
                 csv_fields=("top1", "num_clips"))
    return EXIT_OK


def cmd_profile(cfg, out_dir):
    _, test_ds = _load_datasets(cfg)
    model = _build_or_load_model(cfg)
    profile_dir = os.path.join(out_dir, "profile")
    table = prof.build_cost_table(model, test_ds.clips,
                                  batch_size=cfg["train"]["batch_size"], exact=True)
    summary = prof.total_energy(table)
    rates, traces = prof.record_firing_rates(model, test_ds.clips,
                                             batch_size=cfg["train"]["batch_size"])
    taus = {name: layer.effective_tau() for name, layer in model.spiking_layers()}
    prof.write_profile(table, summary, profile_dir)
    with open(os.path.join(profile_dir, "firing_rates.json"), "w") as fh:
        json.dump({"rates": rates, "traces": traces, "taus": taus}, fh,
                  indent=2, sort_keys=True)
    print(f"energy {summary['energy_mJ']:.6f} mJ "
          f"(dense counterpart {summary['ann_energy_mJ']:.6f} mJ)")
    emit_metrics([summary], out_dir, csv_fields=("energy_mJ", "ann_energy_mJ"))
    return EXIT_OK


def cmd_noise_eval(cfg, out_dir):
    _, test_ds = _load_datasets(cfg)
    model = _build_or_load_model(cfg)
    batch = cfg["train"]["batch_size"]
    noise_seed = cfg["noise"]["seed"]
    rows = []
    clean = evaluate(model, test_ds.clips, test_ds.labels, batch)
    rows.append({"noise": "null", "level": None, "top1": clean})
    for a in cfg["noise"]["gaussian"]:
        if a == 0:
            rows.append({"noise": "gaussian", "level": float(a), "top1": clean})
            continue
        noisy = data_mod.add_gaussian_noise(test_ds.clips, a, noise_seed)
        rows.append({"noise": "gaussian", "level": float(a),
                     "top1": evaluate(model, noisy, test_ds.labels, batch)})
    for p in cfg["noise"]["salt_pepper"]:
        if p == 0:
            rows.append({"noise": "salt_pepper", "level": float(p), "top1": clean})
            continue
        noisy = data_mod.add_salt_pepper(test_ds.clips, p, noise_seed)
        rows.append({"noise": "salt_pepper", "level": float(p),
                     "top1": evaluate(model, noisy, test_ds.labels, batch)})
    emit_metrics(rows, out_dir, csv_fields=("noise", "level", "top1"))
    # wide table: one row of accuracies under the noise-condition header
    with open(os.path.join(out_dir, "noise_table.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["null"] + [f"gaussian_a={r['level']}" for r in rows if r["noise"] == "gaussian"]
        header += [f"salt_pepper_P={r['level']}" for r in rows if r["noise"] == "salt_pepper"]
        values = [rows[0]["top1"]] + [r["top1"] for r in rows[1:]]
        writer.writerow(header)
        writer.writerow([f"{v:.4f}" for v in values])
    for r in rows:
        print(f"{r['noise']:>12} {str(r['level']):>5}: top1 {r['top1']:.4f}")
    return EXIT_OK


def cmd_gradcheck(cfg, out_dir):
    from .verification import run_gradient_checks

    tol = cfg["gradcheck"]["tolerance"]
    reports = run_gradient_checks(seed=cfg["run"]["seed"], tol=tol)
    records = []
    worst = 0.0
    for name, rep in reports.items():
        records.append({"check": name, "max_rel_err": rep.max_rel_err, "passed": rep.passed})
        worst = max(worst, rep.max_rel_err)
        print(f"{name:<40} max_rel_err {rep.max_rel_err:.3e}  "
              f"{'ok' if rep.passed else 'FAIL'}")
    emit_metrics(records, out_dir, csv_fields=("check", "max_rel_err", "passed"))
    if any(not rep.passed for rep in reports.values()):
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "profile": cmd_profile,
    "noise-eval": cmd_noise_eval,
    "gradcheck": cmd_gradcheck,
}


def run(command, config_path=None, overrides=()):
    try:
        cfg = parse_config(config_path, overrides)
    except (ConfigError, FileNotFoundError, yaml.YAMLError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        out_dir = _out_dir(cfg, command)
        _echo_config(cfg, out_dir)
        return COMMANDS[command](cfg, out_dir)
    except (data_mod.DatasetError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ArithmeticError, ad.ShapeError, ValueError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="spikevid",
        description="Spiking video transformer: training, profiling, and checks",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY.PATH=VALUE", help="override a config value")
    args = parser.parse_args(argv)
    return run(args.command, args.config, args.overrides)


if __name__ == "__main__":
    sys.exit(main())
