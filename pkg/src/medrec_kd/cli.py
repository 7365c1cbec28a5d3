"""Command-line pipeline: synth, prompts, teacher-mock, train, eval, inspect.

Settings resolve as built-in defaults, then an optional JSON ``--config``
file, then explicit flags. The resolved settings are echoed into every
artifact. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from .checkpoint import (CheckpointError, load_checkpoint, load_teacher_head, read_checkpoint,
                         save_checkpoint, save_teacher_head)
from .distill import (DistillConfig, FeatureFileError, load_teacher_features, mock_teacher,
                      save_teacher_features)
from .ehr import (DatasetError, ProfileSchema, SynthConfig, generate_synthetic, load_dataset,
                  load_vocabs, save_dataset, save_vocabs, split_by_patient, SYNTH_SCHEMA)
from .metrics import MetricError, evaluate
from .model import ConfigError, StudentConfig
from .ndgrad import NonFiniteError
from .prompts import PromptError, export_lines
from .trainer import ABLATIONS, TrainConfig, TrainingError, train_student

logger = logging.getLogger("medrec_kd")

DATASET_FILE = "dataset.jsonl"
MANIFEST_FILE = "split.json"
SPLITS = ("train", "validation", "test")

DEFAULTS = {
    "seed": 0,
    "patients": 200,
    "max_visits": 4,
    "dh": 128,
    "sigma": 0.1,
    "alpha": 0.4,
    "beta": 0.005,
    "tau": 1.0,
    "denominator": "as-written",
    "lr": 5e-4,
    "batch": 4,
    "epochs": 30,
    "ablate": [],
    "gamma": 0.5,
    "d": 64,
    "layers": 1,
    "heads": 4,
    "rounds": 10,
    "frac": 0.8,
}


class UsageError(Exception):
    pass


def resolve_config(config_path: Optional[str], flags: dict) -> dict:
    """defaults <- config file <- flags that were given explicitly."""
    cfg = dict(DEFAULTS)
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as f:
                loaded = json.load(f)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config file {config_path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(loaded)
    cfg.update({k: v for k, v in flags.items() if k in DEFAULTS and v is not None})
    cfg["ablate"] = sorted(set(cfg["ablate"]))
    bad = [a for a in cfg["ablate"] if a not in ABLATIONS]
    if bad:
        raise UsageError(f"unknown ablation {bad[0]!r}; choose from {', '.join(ABLATIONS)}")
    return cfg


# ---------------------------------------------------------------- helpers

def _load_data(data_dir):
    d = Path(data_dir)
    vocabs = load_vocabs(d)
    with open(d / MANIFEST_FILE, encoding="utf-8") as f:
        manifest = json.load(f)
    schema = ProfileSchema.from_dict(manifest["profile_schema"])
    records = load_dataset(d / DATASET_FILE, vocabs, schema)
    split = split_by_patient(records, manifest["seed"], len(vocabs.medication), manifest["patients"])
    return vocabs, schema, split


def _dump_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _student_config(vocabs, schema, cfg: dict) -> StudentConfig:
    return StudentConfig(*vocabs.sizes, profile_cardinalities=schema.cardinalities,
                         d_e=cfg["d"], d_t=cfg["d"], n_set_layers=cfg["layers"],
                         n_visit_layers=cfg["layers"], n_heads=cfg["heads"], gamma=cfg["gamma"],
                         d_h=cfg["dh"],
                         shared_visit_encoder="split-visit-encoder" not in cfg["ablate"],
                         seed=cfg["seed"])


# ---------------------------------------------------------------- commands

def cmd_synth(args, cfg) -> int:
    if cfg["patients"] < 10:
        raise UsageError("--patients must be at least 10 (the 8:1:1 split needs them)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocabs, records = generate_synthetic(SynthConfig(n_patients=cfg["patients"],
                                                     max_visits=cfg["max_visits"],
                                                     seed=cfg["seed"]))
    split = split_by_patient(records, cfg["seed"], len(vocabs.medication))
    save_vocabs(vocabs, out)
    save_dataset(records, out / DATASET_FILE, vocabs, SYNTH_SCHEMA)
    _dump_json({"seed": cfg["seed"], "patients": split.patients,
                "profile_schema": SYNTH_SCHEMA.to_dict(), "config": cfg}, out / MANIFEST_FILE)
    print(f"wrote {len(records)} patients ({len(split.train)}/{len(split.validation)}/"
          f"{len(split.test)} train/val/test samples) to {out}")
    return 0


def cmd_prompts(args, cfg) -> int:
    vocabs, _, split = _load_data(args.data)
    samples = [s for name in SPLITS for s in split[name]] if args.split == "all" else split[args.split]
    with open(args.out, "w", encoding="utf-8", newline="\n") as f:
        for line in export_lines(samples, vocabs):
            f.write(line + "\n")
    print(f"wrote {len(samples)} prompts to {args.out}")
    return 0


def cmd_teacher_mock(args, cfg) -> int:
    if cfg["sigma"] < 0:
        raise UsageError("--sigma must be >= 0")
    if cfg["dh"] < 1:
        raise UsageError("--dh must be >= 1")
    _, _, split = _load_data(args.data)
    samples = [s for name in SPLITS for s in split[name]]
    store = mock_teacher(samples, d_h=cfg["dh"], noise_sigma=cfg["sigma"], seed=cfg["seed"],
                         gamma=cfg["gamma"])
    save_teacher_features(store, args.out)
    if args.head_out:
        save_teacher_head(store.head, args.head_out)
    print(f"wrote {len(store)} teacher features (d_h={store.d_h}) to {args.out}")
    return 0


def cmd_train(args, cfg) -> int:
    vocabs, schema, split = _load_data(args.data)
    train_config = TrainConfig(lr=cfg["lr"], batch_size=cfg["batch"], max_epochs=cfg["epochs"],
                               seed=cfg["seed"], ablation=frozenset(cfg["ablate"]),
                               distill=DistillConfig(cfg["alpha"], cfg["beta"], cfg["tau"],
                                                     cfg["denominator"]))
    store = None
    if train_config.uses_teacher:
        if not args.teacher:
            raise UsageError("--teacher is required unless --ablate no-kd or --alpha 0")
        store = load_teacher_features(args.teacher)
        if args.teacher_head:
            store.head = load_teacher_head(args.teacher_head)
    student_config = _student_config(vocabs, schema, cfg)
    model, report = train_student(split, store, student_config, train_config)
    save_checkpoint(model, args.out, cfg)
    report_path = args.report or f"{args.out}.report.json"
    _dump_json({"config": cfg, "train": report.to_dict(include_timing=args.timing)}, report_path)
    print(f"best epoch {report.best_epoch}: validation PRAUC "
          f"{report.val_prauc[report.best_epoch]:.4f}" if split.validation else "trained")
    print(f"wrote checkpoint {args.out} and report {report_path}")
    return 0


def cmd_eval(args, cfg) -> int:
    vocabs, schema, split = _load_data(args.data)
    ckpt_cfg = read_checkpoint(args.checkpoint).config
    stored = ckpt_cfg.get("student", {})
    expected = dict(stored, n_diag=vocabs.sizes[0], n_proc=vocabs.sizes[1], n_med=vocabs.sizes[2],
                    profile_cardinalities=list(schema.cardinalities))
    model = load_checkpoint(args.checkpoint, StudentConfig.from_dict(expected))
    gamma = args.gamma if args.gamma is not None else model.config.gamma
    samples = [s for name in SPLITS for s in split[name]] if args.split == "all" else split[args.split]
    report = evaluate(model, samples, gamma=gamma, rounds=cfg["rounds"], frac=cfg["frac"],
                      seed=cfg["seed"])
    report.config = {"eval": cfg, "train": ckpt_cfg.get("run", {}), "split": args.split}
    sys.stdout.write(report.format_table())
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as f:
            f.write(report.to_json())
    return 0


def cmd_inspect(args, cfg) -> int:
    with open(args.path, "rb") as f:
        magic = f.read(4)
    if magic == b"LDRF":
        store = load_teacher_features(args.path)
        print(json.dumps({"kind": "teacher_features", "d_h": store.d_h, "count": len(store)},
                         indent=2))
        return 0
    ckpt = read_checkpoint(args.path)
    n = sum(int(a.size) for a in ckpt.tensors.values())
    print(json.dumps({"config": ckpt.config, "n_tensors": len(ckpt.tensors), "n_params": n,
                      "tensors": {k: list(a.shape) for k, a in ckpt.tensors.items()}},
                     indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------- parser

def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with setting overrides")
    common.add_argument("--seed", type=int, help="random seed (default 0)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    parser = argparse.ArgumentParser(prog="medrec-kd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic EHR cohort")
    p.add_argument("--patients", type=_positive_int, help="number of patients (default 200)")
    p.add_argument("--max-visits", dest="max_visits", type=_positive_int,
                   help="maximum visits per patient (default 4)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prompts", parents=[common], help="render teacher prompts for a split")
    p.add_argument("--data", required=True, help="dataset directory written by synth")
    p.add_argument("--split", default="train", choices=SPLITS + ("all",))
    p.add_argument("--out", required=True, help="output file (sample_id TAB json string)")
    p.set_defaults(func=cmd_prompts)

    p = sub.add_parser("teacher-mock", parents=[common], help="write mock teacher features")
    p.add_argument("--data", required=True, help="dataset directory written by synth")
    p.add_argument("--dh", type=int, help="teacher hidden size (default 128)")
    p.add_argument("--sigma", type=float, help="feature noise std (default 0.1)")
    p.add_argument("--gamma", type=float, help="teacher head threshold (default 0.5)")
    p.add_argument("--out", required=True, help="output feature file")
    p.add_argument("--head-out", dest="head_out", help="also write the teacher head here")
    p.set_defaults(func=cmd_teacher_mock)

    p = sub.add_parser("train", parents=[common], help="train the student")
    p.add_argument("--data", required=True, help="dataset directory written by synth")
    p.add_argument("--teacher", help="teacher feature file (needed unless KD is off)")
    p.add_argument("--teacher-head", dest="teacher_head",
                   help="teacher head file for output-level KD (fitted if absent)")
    p.add_argument("--alpha", type=float, help="feature distillation weight (default 0.4)")
    p.add_argument("--beta", type=float, help="profile alignment weight (default 0.005)")
    p.add_argument("--tau", type=float, help="alignment temperature (default 1.0)")
    p.add_argument("--denominator", choices=("as-written", "standard-infonce"),
                   help="alignment denominator (default as-written)")
    p.add_argument("--lr", type=float, help="Adam learning rate (default 5e-4)")
    p.add_argument("--batch", type=int, help="batch size (default 4)")
    p.add_argument("--epochs", type=_positive_int, help="training epochs (default 30)")
    p.add_argument("--ablate", action="append", choices=ABLATIONS,
                   help="disable a component; repeatable")
    p.add_argument("--gamma", type=float, help="recommendation threshold (default 0.5)")
    p.add_argument("--d", type=_positive_int, help="embedding and transformer width (default 64)")
    p.add_argument("--layers", type=_positive_int, help="transformer layers (default 1)")
    p.add_argument("--heads", type=_positive_int, help="attention heads (default 4)")
    p.add_argument("--dh", type=int, help="teacher hidden size (default 128)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--report", help="report path (default <out>.report.json)")
    p.add_argument("--timing", action="store_true", help="include wall time in the report")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="bootstrap evaluation of a checkpoint")
    p.add_argument("--data", required=True, help="dataset directory written by synth")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=SPLITS + ("all",))
    p.add_argument("--rounds", type=_positive_int, help="bootstrap rounds (default 10)")
    p.add_argument("--frac", type=float, help="fraction drawn per round (default 0.8)")
    p.add_argument("--gamma", type=float, help="threshold (default: the checkpoint's)")
    p.add_argument("--out", help="write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", parents=[common], help="describe a checkpoint or feature file")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


RUNTIME_ERRORS = (OSError, DatasetError, FeatureFileError, CheckpointError, TrainingError,
                  NonFiniteError, ConfigError, PromptError, MetricError, KeyError, ValueError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, vars(args))
        return args.func(args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"medrec-kd {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as exc:
        print(f"medrec-kd {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
