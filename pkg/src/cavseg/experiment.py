"""Cross-validated multi-configuration experiment runner.

An experiment is a grid of (sequence configuration, fold) units. Each unit
trains on the non-test folds (with an internal 80/20 train/val carve-out),
predicts the held-out fold with the connected-component post-filter, and
records per-case DICE/Jaccard. Units are resumable: a completed unit leaves a
checkpoint, a metrics file and a sentinel carrying the unit's content hash, so
reruns skip it and still aggregate byte-identical outputs.

Seed derivation: every unit seed is the first 8 bytes of
sha256("cavseg:<master>:<config name>:<fold>") (little-endian, top bit
cleared); sub-seeds append a role tag. Partial reruns therefore match full
runs exactly.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError, IoFailure, TrainingFailure
from .evalstat import (
    ComparisonReport,
    MetricRecord,
    SequenceConfig,
    compare_report,
    dice,
    jaccard,
    make_folds,
    train_val_split,
    write_metrics_csv,
    write_summary_json,
)
from .model import UNetConfig
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
from .volgrid import Case, load_case, load_manifest

log = logging.getLogger("cavseg")

ALL_SEQUENCE_CONFIGS = tuple(SequenceConfig)


def derive_seed(*parts) -> int:
    """Deterministic 63-bit seed from sha256 over the joined parts."""
    text = "cavseg:" + ":".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


@dataclass(frozen=True)
class ExperimentConfig:
    manifest: str
    out_dir: str | None = None
    sequence_configs: tuple[SequenceConfig, ...] = ALL_SEQUENCE_CONFIGS
    n_folds: int = 5
    fold_mode: str = "by-volume"
    master_seed: int = 0
    model: UNetConfig = field(default_factory=UNetConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def validate(self) -> None:
        if not self.sequence_configs:
            raise ConfigError("at least one sequence configuration is required")
        if self.n_folds < 2:
            raise ConfigError("n_folds must be >= 2")
        if self.fold_mode not in ("by-volume", "by-patient"):
            raise ConfigError(f"unknown fold_mode {self.fold_mode!r}")
        self.sampler.validate()
        self.train.validate()
        self.inference.validate()

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if "manifest" not in d:
            raise ConfigError("experiment config needs a 'manifest' path")
        seq_names = d.get("sequence_configs")
        if seq_names is None:
            seqs = ALL_SEQUENCE_CONFIGS
        else:
            try:
                seqs = tuple(SequenceConfig(str(s)) for s in seq_names)
            except ValueError as exc:
                raise ConfigError(f"unknown sequence config in {seq_names}") from exc
        cfg = cls(
            manifest=str(d["manifest"]),
            out_dir=d.get("out_dir"),
            sequence_configs=seqs,
            n_folds=int(d.get("n_folds", 5)),
            fold_mode=str(d.get("fold_mode", "by-volume")),
            master_seed=int(d.get("master_seed", 0)),
            model=UNetConfig.from_dict({"in_channels": 1, **d.get("model", {})}),
            sampler=SamplerConfig.from_dict(d.get("sampler", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
            inference=InferenceConfig.from_dict(d.get("inference", {})),
        )
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class UnitSpec:
    """One (sequence configuration, fold) training unit, fully resolved."""

    sequence_config: SequenceConfig
    fold: int
    model: UNetConfig
    sampler: SamplerConfig
    train: TrainConfig
    inference: InferenceConfig
    split_seed: int
    test_ids: tuple[str, ...]
    rest_ids: tuple[str, ...]

    @property
    def name(self) -> str:
        return f"{self.sequence_config.value}_f{self.fold}"

    def content_hash(self, manifest_sha: str) -> str:
        doc = {
            "config": self.sequence_config.value,
            "fold": self.fold,
            "model": self.model.to_dict(),
            "sampler": self.sampler.to_dict(),
            "train": self.train.to_dict(),
            "inference": self.inference.to_dict(),
            "split_seed": self.split_seed,
            "test_ids": list(self.test_ids),
            "rest_ids": list(self.rest_ids),
            "manifest_sha": manifest_sha,
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def build_units(cfg: ExperimentConfig, cases: list[Case]) -> list[UnitSpec]:
    split = make_folds(
        [(c.case_id, c.patient_id) for c in cases],
        n_folds=cfg.n_folds,
        mode=cfg.fold_mode,
        seed=cfg.master_seed,
    )
    all_ids = sorted(c.case_id for c in cases)
    units = []
    for sc in cfg.sequence_configs:
        for fold in range(cfg.n_folds):
            unit_seed = derive_seed(cfg.master_seed, sc.value, fold)
            test_ids = tuple(split.fold_case_ids(fold))
            rest_ids = tuple(i for i in all_ids if i not in set(test_ids))
            units.append(
                UnitSpec(
                    sequence_config=sc,
                    fold=fold,
                    model=replace(
                        cfg.model,
                        in_channels=sc.in_channels,
                        seed=derive_seed(unit_seed, "model"),
                    ),
                    sampler=replace(cfg.sampler, seed=derive_seed(unit_seed, "sampler")),
                    train=replace(cfg.train, seed=derive_seed(unit_seed, "train")),
                    inference=cfg.inference,
                    split_seed=derive_seed(unit_seed, "split"),
                    test_ids=test_ids,
                    rest_ids=rest_ids,
                )
            )
    return units


def _run_unit(unit: UnitSpec, cases_by_id: dict[str, Case], unit_dir: Path,
              manifest_sha: str) -> list[MetricRecord]:
    sentinel = unit_dir / "DONE.json"
    metrics_path = unit_dir / "metrics.json"
    content = unit.content_hash(manifest_sha)
    if sentinel.exists() and metrics_path.exists():
        try:
            done = json.loads(sentinel.read_text())
        except (OSError, json.JSONDecodeError):
            done = {}
        if done.get("content_hash") == content:
            log.info("unit %s: complete, skipped", unit.name)
            return _read_unit_metrics(metrics_path)
    unit_dir.mkdir(parents=True, exist_ok=True)
    train_ids, val_ids = train_val_split(unit.rest_ids, seed=unit.split_seed)
    train_cases = [cases_by_id[i] for i in train_ids]
    val_cases = [cases_by_id[i] for i in val_ids]
    try:
        result = train(
            train_cases, val_cases, unit.sequence_config.sequences,
            unit.model, unit.sampler, unit.train,
        )
        save_checkpoint(result.checkpoint, unit_dir)
        ckpt = load_checkpoint(unit_dir)  # metrics always come from the stored bytes
        records = []
        for case_id in unit.test_ids:
            case = cases_by_id[case_id]
            _, mask = predict(ckpt, case, unit.sequence_config.sequences, unit.inference)
            mask = largest_component(mask, unit.inference.connectivity)
            records.append(
                MetricRecord(
                    case_id=case_id,
                    patient_id=case.patient_id,
                    sequence_config=unit.sequence_config,
                    fold=unit.fold,
                    dice=dice(mask, case.mask),
                    jaccard=jaccard(mask, case.mask),
                )
            )
    except (ConfigError, IoFailure):
        raise
    except Exception as exc:
        raise TrainingFailure(f"unit {unit.name} failed: {exc}") from exc
    _write_unit_metrics(records, metrics_path)
    sentinel.write_text(json.dumps({"content_hash": content}, indent=2) + "\n")
    log.info(
        "unit %s: best_val_jaccard=%.4f at iter %d, %d test cases",
        unit.name, result.checkpoint.best_val_jaccard,
        result.checkpoint.iteration_of_best, len(records),
    )
    return records


def _write_unit_metrics(records: list[MetricRecord], path: Path) -> None:
    rows = [
        {
            "case_id": r.case_id,
            "patient_id": r.patient_id,
            "config": r.sequence_config.value,
            "fold": r.fold,
            "dice": r.dice,
            "jaccard": r.jaccard,
        }
        for r in sorted(records, key=lambda r: r.case_id)
    ]
    path.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")


def _read_unit_metrics(path: Path) -> list[MetricRecord]:
    rows = json.loads(path.read_text())
    return [
        MetricRecord(
            case_id=row["case_id"],
            patient_id=row["patient_id"],
            sequence_config=SequenceConfig(row["config"]),
            fold=int(row["fold"]),
            dice=float(row["dice"]),
            jaccard=float(row["jaccard"]),
        )
        for row in rows
    ]


def load_cases(manifest_path: str | Path, require_masks: bool = True) -> list[Case]:
    entries = load_manifest(manifest_path)
    cases = [load_case(e) for e in entries]
    if require_masks:
        missing = [c.case_id for c in cases if c.mask is None]
        if missing:
            raise ConfigError(f"cases without masks cannot be used: {missing}")
    return cases


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path, jobs: int = 1) -> ComparisonReport:
    """Execute all units, then aggregate metrics.csv + summary.json in out_dir.

    Aggregation always re-reads the per-unit metric files, so resumed and
    fresh runs emit byte-identical outputs.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_sha = hashlib.sha256(Path(cfg.manifest).read_bytes()).hexdigest()
    cases = load_cases(cfg.manifest)
    cases_by_id = {c.case_id: c for c in cases}
    units = build_units(cfg, cases)
    units_dir = out_dir / "units"

    def run_one(unit: UnitSpec) -> list[MetricRecord]:
        return _run_unit(unit, cases_by_id, units_dir / unit.name, manifest_sha)

    records: list[MetricRecord] = []
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for result in pool.map(run_one, units):
                records.extend(result)
    else:
        for unit in units:
            records.extend(run_one(unit))

    write_metrics_csv(records, out_dir / "metrics.csv")
    report = compare_report(records)
    write_summary_json(report, out_dir / "summary.json")
    return report
