"""Command-line entry point reproducing the experiment pipeline.

One executable with subcommands (train, eval, attack, gen-features,
confusion, activation-map) driven by an INI-style config file plus
override flags.  Every run writes its fully resolved config into the
output directory, and all artifacts are written atomically, so a run
directory is self-describing and reproducible from its own config.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
from pathlib import Path

import numpy as np

from . import attacks, data_io, feature_gen, metrics
from .errors import ConfigError, GcapsError
from .io_utils import atomic_write_text, write_pgm
from .model import CapsNet, ModelConfig, desk_config, full_config, tiny_config
from .trainer import TrainSpec, load_checkpoint, save_checkpoint, train

DATA_DIR_ENV = "GCAPS_DATA_DIR"

DEFAULTS = {
    "data": {
        "dir": "",
        "dataset_name": "mnist",
        "train_images": "train-images-idx3-ubyte",
        "train_labels": "train-labels-idx1-ubyte",
        "test_images": "t10k-images-idx3-ubyte",
        "test_labels": "t10k-labels-idx1-ubyte",
        "train_limit": "0",
        "test_limit": "0",
        "num_classes": "10",
    },
    "model": {
        "preset": "full",
        "routing": "sda",
        "iterations": "3",
    },
    "train": {
        "steps": "5000",
        "batch_size": "16",
        "learning_rate": "1e-3",
        "optimizer": "adam",
        "adversarial": "false",
        "eval_every": "500",
        "eval_examples": "256",
        "checkpoint_every": "0",
        "attack_epsilon": "0.3",
        "attack_step_size": "0.01",
        "attack_steps": "40",
        "attack_random_start": "true",
        "attack_warmup": "0",
    },
    "attack": {
        "kind": "pgd",
        "epsilons": "0.1,0.3,0.5",
        "step_size": "0.01",
        "steps": "40",
        "random_start": "true",
        "examples": "1000",
    },
    "eval": {
        "metrics_examples": "1000",
    },
    "gen": {
        "layer": "output",
        "capsules": "all",
        "step_size": "0.01",
        "l1_weight": "1e-5",
        "iterations": "1000",
        "restarts": "60",
        "keep_best": "5",
        "save_restarts": "false",
    },
    "map": {
        "examples": "64",
    },
    "run": {
        "seed": "0",
        "out": "runs/out",
        "checkpoint": "",
        "class_filter": "0",
        "threads": "1",
    },
}

_MODEL_PRESETS = {"full": full_config, "desk": desk_config, "tiny": tiny_config}


def build_config(args) -> configparser.ConfigParser:
    cfg = configparser.ConfigParser(interpolation=None)
    cfg.read_dict(DEFAULTS)
    if args.config:
        if not Path(args.config).exists():
            raise ConfigError(f"config file not found: {args.config}")
        cfg.read(args.config)
    # Flag overrides beat file values.
    if args.seed is not None:
        cfg.set("run", "seed", str(args.seed))
    if args.out is not None:
        cfg.set("run", "out", args.out)
    if args.checkpoint is not None:
        cfg.set("run", "checkpoint", args.checkpoint)
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError(f"--threads must be >= 1, got {args.threads}")
        cfg.set("run", "threads", str(args.threads))
    if args.routing is not None:
        cfg.set("model", "routing", args.routing)
    if args.class_filter is not None:
        cfg.set("run", "class_filter", str(args.class_filter))
    if getattr(args, "adversarial", False):
        cfg.set("train", "adversarial", "true")
    if args.epsilon is not None:
        cfg.set("attack", "epsilons", str(args.epsilon))
        cfg.set("train", "attack_epsilon", str(args.epsilon))
    return cfg


def model_config_from(cfg: configparser.ConfigParser) -> ModelConfig:
    section = cfg["model"]
    preset = section.get("preset", "full")
    if preset not in _MODEL_PRESETS:
        raise ConfigError(f"unknown model preset '{preset}'")
    base = _MODEL_PRESETS[preset]()
    overrides = {}
    for name in base.__dataclass_fields__:
        if name in section:
            raw = section.get(name)
            overrides[name] = raw if name == "routing" else int(raw)
    from dataclasses import replace
    return replace(base, **overrides)


def _data_path(cfg, key: str) -> Path:
    root = cfg.get("data", "dir") or os.environ.get(DATA_DIR_ENV, ".")
    path = Path(root) / cfg.get("data", key)
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    if not path.exists():
        raise ConfigError(f"dataset file not found: {path} "
                          f"(set [data] dir or ${DATA_DIR_ENV})")
    return path


def load_split(cfg, split: str) -> data_io.Dataset:
    ds = data_io.load_idx(_data_path(cfg, f"{split}_images"),
                          _data_path(cfg, f"{split}_labels"),
                          name=cfg.get("data", "dataset_name"),
                          num_classes=cfg.getint("data", "num_classes"))
    limit = cfg.getint("data", f"{split}_limit")
    if limit > 0:
        ds = data_io.subset(ds, limit)
    return ds


def write_resolved_config(cfg, out_dir: Path) -> None:
    lines = []
    for section in cfg.sections():
        lines.append(f"[{section}]")
        for key, value in cfg.items(section):
            lines.append(f"{key} = {value}")
        lines.append("")
    atomic_write_text(out_dir / "config.resolved.cfg", "\n".join(lines))


def _require_checkpoint(cfg) -> CapsNet:
    path = cfg.get("run", "checkpoint")
    if not path:
        raise ConfigError("this subcommand needs --checkpoint (or [run] checkpoint)")
    model, _, _ = load_checkpoint(path)
    return model


def _out_dir(cfg) -> Path:
    out = Path(cfg.get("run", "out"))
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out)
    return out


# -- subcommands --------------------------------------------------------------

def cmd_train(cfg) -> int:
    out = _out_dir(cfg)
    seed = cfg.getint("run", "seed")
    train_set = load_split(cfg, "train")
    test_set = load_split(cfg, "test")
    model_cfg = model_config_from(cfg)
    t = cfg["train"]
    spec = TrainSpec(
        steps=t.getint("steps"),
        batch_size=t.getint("batch_size"),
        learning_rate=t.getfloat("learning_rate"),
        optimizer=t.get("optimizer"),
        adversarial=t.getboolean("adversarial"),
        attack=attacks.AttackSpec(
            kind="pgd",
            epsilon=t.getfloat("attack_epsilon"),
            step_size=t.getfloat("attack_step_size"),
            steps=t.getint("attack_steps"),
            random_start=t.getboolean("attack_random_start"),
        ) if t.getboolean("adversarial") else None,
        attack_warmup=t.getint("attack_warmup"),
        seed=seed,
        eval_every=t.getint("eval_every"),
        eval_examples=t.getint("eval_examples"),
        checkpoint_every=t.getint("checkpoint_every") or None,
    )
    model = CapsNet(model_cfg, seed=seed)
    result = train(model, train_set, spec, eval_set=test_set,
                   log_path=out / "run_log.csv", checkpoint_dir=out, quiet=False)
    save_checkpoint(out / "model.gcaps", model, step=result.final_step, seed=seed)
    print(f"trained {spec.steps} steps; checkpoint at {out / 'model.gcaps'}")
    return 0


def _routing_records(model, dataset, limit: int):
    images = dataset.images[:limit] if limit > 0 else dataset.images
    return {layer: metrics.collect_record(model, images, layer=layer)
            for layer in ("hidden", "output")}


def cmd_eval(cfg) -> int:
    out = _out_dir(cfg)
    model = _require_checkpoint(cfg)
    test_set = load_split(cfg, "test")
    dataset_name = test_set.name
    algorithm = model.config.routing
    class_filter = cfg.getint("run", "class_filter")
    limit = cfg.getint("eval", "metrics_examples")
    acc = metrics.accuracy(model, test_set)
    rows = []
    for classes, ds in (("all", test_set),
                        (str(class_filter), data_io.filter_class(test_set, class_filter))):
        records = _routing_records(model, ds, limit=limit)
        for layer, record in records.items():
            rows.append((dataset_name, algorithm, classes, layer,
                         repr(metrics.t_score(record)), repr(metrics.d_score(record)),
                         repr(acc), repr(metrics.parent_uniqueness(record))))
    metrics.write_metrics_csv(out / "metrics.csv", rows)
    print(f"accuracy {acc:.4f}; metrics written to {out / 'metrics.csv'}")
    return 0


def cmd_attack(cfg) -> int:
    out = _out_dir(cfg)
    model = _require_checkpoint(cfg)
    test_set = load_split(cfg, "test")
    a = cfg["attack"]
    limit = a.getint("examples")
    epsilons = [float(v) for v in a.get("epsilons").split(",") if v.strip()]
    rows = []
    for eps in epsilons:
        spec = attacks.AttackSpec(kind=a.get("kind"), epsilon=eps,
                                  step_size=a.getfloat("step_size"),
                                  steps=a.getint("steps"),
                                  random_start=a.getboolean("random_start"))
        acc = attacks.robust_accuracy(model, test_set, spec,
                                      seed=cfg.getint("run", "seed"), limit=limit)
        rows.append((test_set.name, model.config.routing, spec.kind, repr(eps), repr(acc)))
        print(f"{spec.kind} epsilon={eps}: accuracy {acc:.4f}")
    attacks.write_robustness_csv(out / "robustness.csv", rows)
    return 0


def cmd_gen_features(cfg) -> int:
    out = _out_dir(cfg)
    model = _require_checkpoint(cfg)
    g = cfg["gen"]
    layer = g.get("layer")
    caps_value = g.get("capsules")
    if caps_value == "all":
        size = model.config.output_caps if layer == "output" else model.config.hidden_caps
        capsules = list(range(size))
    else:
        capsules = [int(v) for v in caps_value.split(",") if v.strip()]
    rows = []
    for capsule in capsules:
        spec = feature_gen.GenSpec(
            layer=layer, capsule=capsule,
            step_size=g.getfloat("step_size"), l1_weight=g.getfloat("l1_weight"),
            iterations=g.getint("iterations"), restarts=g.getint("restarts"),
            keep_best=g.getint("keep_best"), seed=cfg.getint("run", "seed"))
        result = feature_gen.generate(model, spec)
        write_pgm(out / f"feature_{layer}_{capsule:02d}.pgm", result.image)
        if g.getboolean("save_restarts"):
            for r, img in enumerate(result.restart_images):
                write_pgm(out / f"feature_{layer}_{capsule:02d}_restart{r:02d}.pgm", img)
        rows.append((layer, capsule, repr(result.activation), repr(result.loss)))
        print(f"capsule {capsule}: activation {result.activation:.3f} loss {result.loss:.4f}")
    feature_gen.write_generation_csv(out / "generated_activations.csv", rows)
    return 0


def cmd_confusion(cfg) -> int:
    out = _out_dir(cfg)
    model = _require_checkpoint(cfg)
    test_set = load_split(cfg, "test")
    counts = metrics.confusion_matrix(model, test_set)
    metrics.write_confusion_csv(out / "confusion.csv", counts)
    acc = np.trace(counts) / counts.sum()
    print(f"confusion matrix written; accuracy {acc:.4f}")
    return 0


def cmd_activation_map(cfg) -> int:
    out = _out_dir(cfg)
    model = _require_checkpoint(cfg)
    test_set = load_split(cfg, "test")
    class_filter = cfg.get("run", "class_filter")
    suffix = "all"
    if class_filter != "":
        test_set = data_io.filter_class(test_set, int(class_filter))
        suffix = f"class{class_filter}"
    count = cfg.getint("map", "examples")
    record = metrics.collect_record(model, test_set.images[:count], layer="hidden")
    write_pgm(out / f"activation_map_{suffix}.pgm", record.activations)
    print(f"activation map over {record.activations.shape[0]} examples written")
    return 0


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file; flags override its values")
    p.add_argument("--seed", type=int, default=None, help="root random seed")
    p.add_argument("--out", default=None, help="output directory for artifacts")
    p.add_argument("--checkpoint", default=None, help="model checkpoint path")
    p.add_argument("--routing", choices=("sda", "rba"), default=None)
    p.add_argument("--epsilon", type=float, default=None,
                   help="attack radius override (single value)")
    p.add_argument("--class-filter", dest="class_filter", type=int, default=None)
    p.add_argument("--threads", type=int, default=None,
                   help="worker cap; 1 guarantees bit-reproducibility")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gcaps",
        description="Capsule networks with scaled-distance-agreement routing: "
                    "training, structural metrics, attacks and feature generation.")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "train": (cmd_train, "train a model (ERM, or ERM under attack with --adversarial)"),
        "eval": (cmd_eval, "accuracy plus T/D/parent-uniqueness metrics CSV"),
        "attack": (cmd_attack, "robust accuracy over an epsilon grid"),
        "gen-features": (cmd_gen_features, "activation-maximization images per capsule"),
        "confusion": (cmd_confusion, "confusion matrix CSV"),
        "activation-map": (cmd_activation_map, "hidden-layer activation heat map PGM"),
    }
    for name, (fn, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        _add_common_flags(p)
        if name == "train":
            p.add_argument("--adversarial", action="store_true",
                           help="train on PGD-perturbed batches")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = build_config(args)
        return args.fn(cfg)
    except GcapsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
