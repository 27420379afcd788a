"""Command-line orchestration: phantom generation, training, inference,
evaluation and reporting.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 training failure.
Progress lines go to standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .errors import CavsegError, ConfigError, IoFailure, TrainingFailure
from .evalstat import (
    SequenceConfig,
    compare_report,
    dice,
    format_report_table,
    jaccard,
    MetricRecord,
    read_metrics_csv,
    train_val_split,
    write_boxplot_csv,
    write_metrics_csv,
    write_summary_json,
)
from .experiment import ExperimentConfig, derive_seed, load_cases, run_experiment
from .model import UNetConfig
from .phantom import PhantomConfig, generate_dataset
from .pipeline import (
    InferenceConfig,
    SamplerConfig,
    TrainConfig,
    largest_component,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)
from .volgrid import load_mask, save_nifti

log = logging.getLogger("cavseg")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_TRAINING = 4


def _load_json(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return doc


def _resolve_sequence_config(value) -> SequenceConfig:
    if isinstance(value, SequenceConfig):
        return value
    name = str(value).upper()
    aliases = {"T1": "T1_ONLY", "T1C": "T1C_ONLY", "T2": "T2_ONLY",
               "FLAIR": "FLAIR_ONLY", "ALL": "ALL_FOUR"}
    name = aliases.get(name, name)
    try:
        return SequenceConfig(name)
    except ValueError as exc:
        raise ConfigError(f"unknown sequence configuration {value!r}") from exc


# ---------------------------------------------------------------------------
# subcommands

def cmd_phantom_gen(args) -> int:
    doc = _load_json(args.config)
    n_patients = int(doc.pop("n_patients", 0))
    timepoints = [int(t) for t in doc.pop("timepoints_per_patient", [])]
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg = PhantomConfig.from_dict(doc)
    manifest_path, entries = generate_dataset(cfg, n_patients, timepoints, args.out)
    log.info("wrote %d cases under %s", len(entries), args.out)
    print(len(entries))
    return EXIT_OK


def cmd_experiment(args) -> int:
    doc = _load_json(args.config)
    if args.seed is not None:
        doc["master_seed"] = args.seed
    cfg = ExperimentConfig.from_dict(doc)
    out_dir = args.out or cfg.out_dir
    if not out_dir:
        raise ConfigError("an output directory is required (--out or config out_dir)")
    report = run_experiment(cfg, out_dir, jobs=args.jobs)
    print(format_report_table(report))
    return EXIT_OK


def cmd_train(args) -> int:
    doc = _load_json(args.config)
    if "manifest" not in doc:
        raise ConfigError("train config needs a 'manifest' path")
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    sc = _resolve_sequence_config(doc.get("sequences", "ALL_FOUR"))
    model_cfg = UNetConfig.from_dict(
        {"in_channels": sc.in_channels, **doc.get("model", {}),
         "seed": derive_seed(seed, "model")}
    )
    model_cfg = replace(model_cfg, in_channels=sc.in_channels)
    sampler_cfg = replace(
        SamplerConfig.from_dict(doc.get("sampler", {})), seed=derive_seed(seed, "sampler")
    )
    train_cfg = replace(
        TrainConfig.from_dict(doc.get("train", {})), seed=derive_seed(seed, "train")
    )
    cases = load_cases(doc["manifest"])
    by_id = {c.case_id: c for c in cases}
    train_ids = doc.get("train_case_ids")
    val_ids = doc.get("val_case_ids")
    if train_ids is None or val_ids is None:
        train_ids, val_ids = train_val_split(sorted(by_id), seed=derive_seed(seed, "split"))
    missing = [i for i in list(train_ids) + list(val_ids) if i not in by_id]
    if missing:
        raise ConfigError(f"case ids not in manifest: {missing}")
    try:
        result = train(
            [by_id[i] for i in train_ids], [by_id[i] for i in val_ids],
            sc.sequences, model_cfg, sampler_cfg, train_cfg,
            log=lambda msg: log.info("%s", msg),
        )
    except (ConfigError, IoFailure):
        raise
    except Exception as exc:
        raise TrainingFailure(f"training failed: {exc}") from exc
    out = args.out or "."
    save_checkpoint(result.checkpoint, out)
    log.info("checkpoint saved to %s", out)
    print(f"best_val_jaccard={result.checkpoint.best_val_jaccard!r} "
          f"at_iteration={result.checkpoint.iteration_of_best}")
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    icfg = InferenceConfig.from_dict(_load_json(args.config)) if args.config else InferenceConfig()
    cases = load_cases(args.manifest, require_masks=False)
    if args.case:
        wanted = set(args.case)
        cases = [c for c in cases if c.case_id in wanted]
        missing = wanted - {c.case_id for c in cases}
        if missing:
            raise ConfigError(f"case ids not in manifest: {sorted(missing)}")
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    for case in cases:
        prob, mask = predict(ckpt, case, None, icfg)
        if not args.no_cc:
            mask = largest_component(mask, icfg.connectivity)
        save_nifti(mask, out_dir / f"{case.case_id}_mask.nii.gz")
        if args.probs:
            save_nifti(prob, out_dir / f"{case.case_id}_prob.nii.gz")
        log.info("predicted %s (%d foreground voxels)", case.case_id, mask.count())
    print(len(cases))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cases = load_cases(args.manifest)
    sc = _resolve_sequence_config(args.label)
    pred_dir = Path(args.pred)
    records = []
    for case in sorted(cases, key=lambda c: c.case_id):
        path = pred_dir / f"{case.case_id}_mask.nii.gz"
        if not path.exists():
            path = pred_dir / f"{case.case_id}_mask.nii"
        if not path.exists():
            raise IoFailure(f"no prediction found for case {case.case_id!r} in {pred_dir}")
        mask = load_mask(path)
        records.append(
            MetricRecord(
                case_id=case.case_id, patient_id=case.patient_id,
                sequence_config=sc, fold=args.fold,
                dice=dice(mask, case.mask), jaccard=jaccard(mask, case.mask),
            )
        )
    out = args.out or "metrics.csv"
    write_metrics_csv(records, out)
    log.info("wrote %d metric rows to %s", len(records), out)
    print(len(records))
    return EXIT_OK


def cmd_report(args) -> int:
    records = read_metrics_csv(args.metrics)
    report = compare_report(records)
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    write_summary_json(report, out_dir / "summary.json")
    write_boxplot_csv(report, out_dir / "boxplot.csv")
    print(format_report_table(report))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cavseg",
        description="Volumetric cavity segmentation experiments: phantom data, "
        "cross-validated U-Net training, evaluation, and comparison reports.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--jobs", type=int, default=1, help="parallel units")

    p = sub.add_parser("phantom-gen", help="generate a synthetic dataset + manifest")
    common(p)
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("experiment", help="run the cross-validated comparison")
    common(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("train", help="train one model")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="segment cases with a checkpoint")
    common(p, config_required=False)
    p.add_argument("--ckpt", required=True, help="checkpoint directory or ckpt.json")
    p.add_argument("--manifest", required=True, help="case manifest")
    p.add_argument("--case", action="append", help="restrict to these case ids")
    p.add_argument("--probs", action="store_true", help="also write probability volumes")
    p.add_argument("--no-cc", action="store_true", help="skip the component filter")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score prediction masks against a manifest")
    common(p, config_required=False)
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred", required=True, help="directory of predicted masks")
    p.add_argument("--label", default="ALL_FOUR", help="config label for the CSV rows")
    p.add_argument("--fold", type=int, default=-1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="summary statistics + significance table")
    common(p, config_required=False)
    p.add_argument("--metrics", required=True, help="metrics.csv path")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingFailure as exc:
        log.error("training failure: %s", exc)
        return EXIT_TRAINING
    except (IoFailure, OSError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except (CavsegError, ValueError, KeyError, TypeError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG


def entrypoint() -> None:
    sys.exit(main())
