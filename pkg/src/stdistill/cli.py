"""Command-line entry point wiring every module into reproducible runs.

Commands:
  synth      generate a synthetic cross-modal dataset
  train      train the student (modes: std, std-hidden, baseline)
  eval       evaluate a checkpoint, optionally with noise at a given SNR
  sweep      noise-robustness grid (SNR x seed) as CSV
  gradcheck  run the full finite-difference verification suite

Anything that affects results lives in the JSON config; flags only select
commands, paths and seeds. Exit codes: 0 success, 1 validation error,
2 runtime or numerical error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

from .data import SynthSpec, load_dataset, synthesize_dataset
from .distill import DistillConfig
from .encoder import EncoderConfig
from .errors import (CheckpointError, ConfigError, DataError, StdistillError)
from .gradchecks import full_suite
from .training import (TrainConfig, evaluate, init_student, load_checkpoint,
                       save_checkpoint, train)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

MODE_WEIGHTS = {"std": None, "std-hidden": "drop-att", "baseline": "intent-only"}


def _reject_unknown(section: str, doc: dict, allowed: set[str]) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")


def _dataclass_from(section: str, doc: dict, cls, **extra):
    fields = {f.name for f in dataclasses.fields(cls)}
    _reject_unknown(section, doc, fields)
    try:
        return cls(**{**doc, **extra})
    except TypeError as err:
        raise ConfigError(f"bad {section} section: {err}") from err


@dataclasses.dataclass
class RunConfig:
    """Fully resolved experiment configuration (echoed to the output dir)."""
    seed: int
    out_dir: str
    train_dataset: str
    test_dataset: str
    student: EncoderConfig
    distill: DistillConfig
    train: TrainConfig

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as err:
            raise ConfigError(f"config {path} is not valid JSON: {err}") from err
        _reject_unknown("config", doc, {"seed", "out_dir", "dataset", "student",
                                        "distill", "train"})
        dataset = doc.get("dataset", {})
        _reject_unknown("dataset", dataset, {"train", "test"})
        for key in ("train", "test"):
            if key not in dataset:
                raise ConfigError(f"dataset.{key} path is required")
        student = _dataclass_from("student", doc.get("student", {}), EncoderConfig)
        ddoc = dict(doc.get("distill", {}))
        if "layer_map" in ddoc:
            ddoc["layer_map"] = [tuple(p) for p in ddoc["layer_map"]]
        distill = _dataclass_from("distill", ddoc, DistillConfig)
        tdoc = dict(doc.get("train", {}))
        tdoc.setdefault("seed", int(doc.get("seed", 0)))
        tcfg = _dataclass_from("train", tdoc, TrainConfig)
        return cls(seed=int(doc.get("seed", 0)), out_dir=str(doc.get("out_dir", "runs")),
                   train_dataset=str(dataset["train"]), test_dataset=str(dataset["test"]),
                   student=student, distill=distill, train=tcfg)

    def resolved(self) -> dict:
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "dataset": {"train": self.train_dataset, "test": self.test_dataset},
            "student": dataclasses.asdict(self.student),
            "distill": {**dataclasses.asdict(self.distill),
                        "layer_map": [list(p) for p in self.distill.layer_map]},
            "train": dataclasses.asdict(self.train),
        }


def apply_mode(dcfg: DistillConfig, mode: str) -> DistillConfig:
    """std keeps the configured weights; std-hidden zeroes the attention
    weight; baseline zeroes both distillation weights."""
    if mode not in MODE_WEIGHTS:
        raise ConfigError(f"unknown mode {mode!r}")
    doc = dataclasses.asdict(dcfg)
    doc["layer_map"] = list(dcfg.layer_map)
    if mode == "std-hidden":
        doc["alpha2"] = 0.0
    elif mode == "baseline":
        doc["alpha2"] = 0.0
        doc["alpha3"] = 0.0
    return DistillConfig(**doc)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    spec_doc = {}
    if args.synth_config:
        spec_doc = json.loads(Path(args.synth_config).read_text())
    allowed = {f.name for f in dataclasses.fields(SynthSpec)}
    _reject_unknown("synth config", spec_doc, allowed)
    if "teacher" in spec_doc:
        spec_doc["teacher"] = _dataclass_from("synth teacher", spec_doc["teacher"],
                                              EncoderConfig)
    for key in ("lt_range", "ls_range"):
        if key in spec_doc:
            spec_doc[key] = tuple(spec_doc[key])
    spec_doc["n_classes"] = args.classes
    spec_doc["n_train"] = args.train_n
    spec_doc["n_test"] = args.test_n
    spec = SynthSpec(**spec_doc)
    info = synthesize_dataset(out, seed=args.seed, spec=spec)
    print(json.dumps(info, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.from_file(args.config)
    dcfg = apply_mode(cfg.distill, args.mode)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = cfg.resolved()
    resolved["distill"] = {**resolved["distill"],
                           "alpha2": dcfg.alpha2, "alpha3": dcfg.alpha3}
    resolved["mode"] = args.mode
    (out / "config.json").write_text(json.dumps(resolved, indent=1, sort_keys=True) + "\n")

    train_ds = load_dataset(cfg.train_dataset)
    test_ds = load_dataset(cfg.test_dataset)
    model = init_student(cfg.student, dcfg, train_ds.n_classes, seed=cfg.seed,
                         intent_pool=cfg.train.intent_pool)
    records = train(train_ds, model, cfg.train, log_path=out / "train_log.jsonl")
    ckpt = save_checkpoint(out / "checkpoint", model, step=records[-1]["step"],
                           seed=cfg.seed, extra={"mode": args.mode})
    result = {
        "mode": args.mode,
        "seed": cfg.seed,
        "epochs": len(records),
        "alpha": [dcfg.alpha1, dcfg.alpha2, dcfg.alpha3],
        "final_train_accuracy": records[-1]["train_accuracy"],
        "test_accuracy": evaluate(test_ds, model).accuracy,
        "checkpoint": str(ckpt),
    }
    (out / "result.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    result = evaluate(dataset, model, snr_db=args.snr, noise_seed=args.noise_seed)
    record = {"checkpoint": str(args.checkpoint), "dataset": str(args.dataset),
              "snr_db": args.snr, **result.as_record()}
    print(json.dumps(record, sort_keys=True))
    if args.out:
        Path(args.out).write_text(json.dumps(record, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_sweep(args) -> int:
    snrs = [float(s) for s in args.snrs.split(",") if s.strip() != ""]
    if not snrs:
        raise ConfigError("sweep needs at least one SNR level")
    if args.seeds < 1:
        raise ConfigError("sweep needs at least one seed")
    model, _, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    lines = ["snr_db,seed,accuracy"]
    for snr in snrs:
        for seed in range(args.seeds):
            res = evaluate(dataset, model, snr_db=snr, noise_seed=seed)
            lines.append(f"{snr:g},{seed},{res.accuracy:.6f}")
    csv = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(csv)
    print(csv, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    started = time.time()
    reports = full_suite(seed=args.seed)
    failures = 0
    for r in reports:
        print(r)
        failures += 0 if r.passed else 1
    elapsed = time.time() - started
    print(f"{len(reports) - failures}/{len(reports)} checks passed "
          f"in {elapsed:.1f}s")
    return EXIT_OK if failures == 0 else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stdistill",
        description="Train and evaluate a distilled speech transformer "
                    "intent classifier.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--train-n", type=int, default=512)
    p.add_argument("--test-n", type=int, default=128)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true",
                   help="overwrite a non-empty output directory")
    p.add_argument("--synth-config", default=None,
                   help="JSON file with generation knobs (teacher size, noise)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a student model")
    p.add_argument("--config", required=True, help="RunConfig JSON path")
    p.add_argument("--mode", choices=sorted(MODE_WEIGHTS), default="std")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--snr", type=float, default=None,
                   help="inject noise at this SNR (dB); omit for clean")
    p.add_argument("--noise-seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="SNR x seed robustness grid (CSV)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--snrs", default="15,10,5,0")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (ConfigError, DataError, CheckpointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except StdistillError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
