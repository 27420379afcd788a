"""Overlap metrics, cross-validation splits, the exact Wilcoxon signed-rank
test, box-plot statistics, and the multi-configuration comparison report."""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    AllZeroDifferences,
    EmptyInput,
    IoFailure,
    LengthMismatch,
    ShapeMismatch,
    TooFewCases,
    UnpairedRecords,
)
from .volgrid import LabelMask, SequenceId


class SequenceConfig(enum.Enum):
    """The five channel selections under comparison."""

    T1_ONLY = "T1_ONLY"
    T1C_ONLY = "T1C_ONLY"
    T2_ONLY = "T2_ONLY"
    FLAIR_ONLY = "FLAIR_ONLY"
    ALL_FOUR = "ALL_FOUR"

    @property
    def sequences(self) -> tuple[SequenceId, ...]:
        if self is SequenceConfig.ALL_FOUR:
            return SequenceId.canonical_order()
        return ({
            SequenceConfig.T1_ONLY: SequenceId.T1,
            SequenceConfig.T1C_ONLY: SequenceId.T1C,
            SequenceConfig.T2_ONLY: SequenceId.T2,
            SequenceConfig.FLAIR_ONLY: SequenceId.FLAIR,
        }[self],)

    @property
    def in_channels(self) -> int:
        return len(self.sequences)


# ---------------------------------------------------------------------------
# overlap metrics

def _counts(a: LabelMask, b: LabelMask) -> tuple[int, int, int]:
    if a.dims != b.dims:
        raise ShapeMismatch(f"mask dims {a.dims} vs {b.dims}")
    am = a.data > 0
    bm = b.data > 0
    inter = int((am & bm).sum())
    return inter, int(am.sum()), int(bm.sum())


def dice(a: LabelMask, b: LabelMask) -> float:
    """2|A∩B| / (|A|+|B|); 1.0 when both masks are empty."""
    inter, na, nb = _counts(a, b)
    if na + nb == 0:
        return 1.0
    return 2.0 * inter / (na + nb)


def jaccard(a: LabelMask, b: LabelMask) -> float:
    """|A∩B| / |A∪B|; 1.0 when both masks are empty."""
    inter, na, nb = _counts(a, b)
    union = na + nb - inter
    if union == 0:
        return 1.0
    return inter / union


# ---------------------------------------------------------------------------
# fold construction

@dataclass(frozen=True)
class FoldSplit:
    n_folds: int
    assignment: dict[str, int]  # case_id -> fold index
    mode: str

    def fold_case_ids(self, fold: int) -> list[str]:
        return sorted(cid for cid, f in self.assignment.items() if f == fold)

    def fold_sizes(self) -> list[int]:
        sizes = [0] * self.n_folds
        for f in self.assignment.values():
            sizes[f] += 1
        return sizes


def make_folds(cases, n_folds: int = 5, mode: str = "by-volume", seed: int = 0) -> FoldSplit:
    """Assign cases to disjoint folds.

    ``cases`` is a sequence of (case_id, patient_id) pairs. by-volume mode
    shuffles and deals so fold sizes differ by at most one; by-patient mode
    keeps each patient's cases together and greedily balances volume counts,
    placing the largest patients first.
    """
    pairs = [(str(c), str(p)) for c, p in cases]
    if n_folds < 1 or n_folds > len(pairs):
        raise TooFewCases(f"cannot make {n_folds} folds from {len(pairs)} cases")
    if len({c for c, _ in pairs}) != len(pairs):
        raise ValueError("case ids must be unique")
    rng = np.random.default_rng(seed)
    assignment: dict[str, int] = {}
    if mode == "by-volume":
        order = list(pairs)
        rng.shuffle(order)
        n = len(order)
        base, extra = divmod(n, n_folds)
        start = 0
        for fold in range(n_folds):
            size = base + (1 if fold < extra else 0)
            for cid, _ in order[start : start + size]:
                assignment[cid] = fold
            start += size
    elif mode == "by-patient":
        groups: dict[str, list[str]] = {}
        for cid, pid in pairs:
            groups.setdefault(pid, []).append(cid)
        if len(groups) < n_folds:
            raise TooFewCases(f"cannot make {n_folds} folds from {len(groups)} patients")
        patients = list(groups)
        rng.shuffle(patients)
        patients.sort(key=lambda p: -len(groups[p]))  # stable: ties keep shuffled order
        loads = [0] * n_folds
        for pid in patients:
            fold = int(np.argmin(loads))
            for cid in groups[pid]:
                assignment[cid] = fold
            loads[fold] += len(groups[pid])
    else:
        raise ValueError(f"unknown fold mode {mode!r}")
    return FoldSplit(n_folds=n_folds, assignment=assignment, mode=mode)


def train_val_split(case_ids, seed: int = 0) -> tuple[list[str], list[str]]:
    """Deterministic 80/20 split after a seeded shuffle; val gets max(1, round(0.2 n))."""
    ids = [str(c) for c in case_ids]
    if len(ids) < 2:
        raise TooFewCases("need at least two cases to split into train and val")
    rng = np.random.default_rng(seed)
    order = list(ids)
    rng.shuffle(order)
    n_val = max(1, int(np.floor(0.2 * len(order) + 0.5)))
    return order[n_val:], order[:n_val]


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank

@dataclass(frozen=True)
class WilcoxonResult:
    n_effective: int
    statistic: float  # W = min(W+, W-)
    p_two_sided: float
    method: str  # "exact" | "normal-approximation"


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_cdf_at(doubled_ranks: list[int], w2: int) -> float:
    """P(2*W+ <= w2) under uniform random signs, by subset-sum counting.

    Average ranks are half-integers, so doubling makes every rank an integer
    and the distribution of 2*W+ lives on {0..sum}. The count table enumerates
    all 2^n sign assignments exactly.
    """
    total = sum(doubled_ranks)
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        counts[r:] += counts[: total + 1 - r].copy()
    w2 = min(w2, total)
    if w2 < 0:
        return 0.0
    return float(counts[: w2 + 1].sum()) / 2.0 ** len(doubled_ranks)


def wilcoxon_signed_rank(a, b, exact_limit: int = 25) -> WilcoxonResult:
    """Two-sided paired signed-rank test with classical zero-exclusion.

    Ties in |d| get average ranks; W = min(W+, W-). For n_eff <= exact_limit
    the p-value is exact (equivalent to enumerating all 2^n sign assignments);
    beyond that a normal approximation with tie-corrected variance and 0.5
    continuity correction is used. p is clamped to (0, 1].
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 1:
        raise LengthMismatch(f"need equal-length 1D samples, got {x.shape} vs {y.shape}")
    d = x - y
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        raise AllZeroDifferences("all paired differences are zero")
    ranks = _average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if n <= exact_limit:
        doubled = [int(round(2.0 * r)) for r in ranks]
        p = 2.0 * _exact_cdf_at(doubled, int(round(2.0 * w)))
        method = "exact"
    else:
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        tie_term = float((tie_counts**3 - tie_counts).sum()) / 48.0
        var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
        z = (w - mean + 0.5) / math.sqrt(var)
        p = 2.0 * 0.5 * math.erfc(-z / math.sqrt(2.0))
        method = "normal-approximation"
    p = min(1.0, p)
    p = max(p, np.nextafter(0.0, 1.0))
    return WilcoxonResult(n_effective=n, statistic=w, p_two_sided=p, method=method)


# ---------------------------------------------------------------------------
# box-plot statistics

@dataclass(frozen=True)
class BoxStats:
    median: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "median": self.median,
            "q1": self.q1,
            "q3": self.q3,
            "whisker_low": self.whisker_low,
            "whisker_high": self.whisker_high,
            "outliers": list(self.outliers),
        }


def box_stats(values) -> BoxStats:
    """Quartiles by linear interpolation on sorted order statistics; whiskers
    at the most extreme data inside [q1 - 1.5 IQR, q3 + 1.5 IQR], the rest
    reported as outliers."""
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size == 0:
        raise EmptyInput("box_stats needs at least one value")
    q1, med, q3 = np.percentile(vals, [25.0, 50.0, 75.0])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = vals[(vals >= lo_fence) & (vals <= hi_fence)]
    outliers = vals[(vals < lo_fence) | (vals > hi_fence)]
    return BoxStats(
        median=float(med),
        q1=float(q1),
        q3=float(q3),
        whisker_low=float(inside.min()),
        whisker_high=float(inside.max()),
        outliers=tuple(sorted(float(v) for v in outliers)),
    )


# ---------------------------------------------------------------------------
# comparison report

@dataclass(frozen=True)
class MetricRecord:
    case_id: str
    patient_id: str
    sequence_config: SequenceConfig
    fold: int
    dice: float
    jaccard: float

    def __post_init__(self):
        if not (0.0 <= self.dice <= 1.0 and 0.0 <= self.jaccard <= 1.0):
            raise ValueError(f"metrics outside [0, 1]: dice={self.dice}, jaccard={self.jaccard}")


@dataclass(frozen=True)
class PairwiseTest:
    config: str
    n_effective: int | None
    statistic: float | None
    p: float | None
    stars: str
    method: str


@dataclass(frozen=True)
class ComparisonReport:
    per_config: dict[str, BoxStats]
    best_config: str
    tests: tuple[PairwiseTest, ...]
    n_cases: int


def significance_stars(p: float | None) -> str:
    if p is None:
        return "n/a"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


def compare_report(records: list[MetricRecord]) -> ComparisonReport:
    """Per-config box stats of DICE, the best (highest-median) config, and
    pairwise signed-rank tests of the best against every other config on
    case-paired DICE values. Configurations must cover identical case sets.
    """
    if not records:
        raise EmptyInput("no metric records")
    by_config: dict[str, dict[str, float]] = {}
    for r in records:
        by_config.setdefault(r.sequence_config.value, {})[r.case_id] = r.dice
    case_sets = {name: frozenset(vals) for name, vals in by_config.items()}
    reference = next(iter(case_sets.values()))
    for name, cs in case_sets.items():
        if cs != reference:
            raise UnpairedRecords(
                f"config {name} covers {len(cs)} cases, expected the same "
                f"{len(reference)} cases as the others"
            )
    case_order = sorted(reference)
    stats = {name: box_stats([vals[c] for c in case_order]) for name, vals in by_config.items()}
    best = max(sorted(stats), key=lambda name: stats[name].median)
    tests = []
    for name in sorted(by_config):
        if name == best:
            continue
        a = [by_config[best][c] for c in case_order]
        b = [by_config[name][c] for c in case_order]
        try:
            res = wilcoxon_signed_rank(a, b)
            tests.append(
                PairwiseTest(
                    config=name,
                    n_effective=res.n_effective,
                    statistic=res.statistic,
                    p=res.p_two_sided,
                    stars=significance_stars(res.p_two_sided),
                    method=res.method,
                )
            )
        except AllZeroDifferences:
            tests.append(
                PairwiseTest(config=name, n_effective=0, statistic=None, p=None,
                             stars="n/a", method="undefined")
            )
    return ComparisonReport(
        per_config=stats, best_config=best, tests=tuple(tests), n_cases=len(case_order)
    )


# ---------------------------------------------------------------------------
# serialization

METRICS_HEADER = ["case_id", "patient_id", "fold", "config", "dice", "jaccard"]


def write_metrics_csv(records: list[MetricRecord], path: str | Path) -> None:
    rows = sorted(records, key=lambda r: (r.sequence_config.value, r.fold, r.case_id))
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(METRICS_HEADER)
            for r in rows:
                writer.writerow(
                    [r.case_id, r.patient_id, r.fold, r.sequence_config.value,
                     repr(r.dice), repr(r.jaccard)]
                )
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_metrics_csv(path: str | Path) -> list[MetricRecord]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    records = []
    for row in rows:
        records.append(
            MetricRecord(
                case_id=row["case_id"],
                patient_id=row["patient_id"],
                sequence_config=SequenceConfig(row["config"]),
                fold=int(row["fold"]),
                dice=float(row["dice"]),
                jaccard=float(row["jaccard"]),
            )
        )
    return records


def report_to_dict(report: ComparisonReport) -> dict:
    return {
        "n_cases": report.n_cases,
        "best_config": report.best_config,
        "configs": {name: bs.to_dict() for name, bs in sorted(report.per_config.items())},
        "tests": [
            {
                "config": t.config,
                "n_eff": t.n_effective,
                "W": t.statistic,
                "p": t.p,
                "stars": t.stars,
                "method": t.method,
            }
            for t in report.tests
        ],
    }


def write_summary_json(report: ComparisonReport, path: str | Path) -> None:
    try:
        Path(path).write_text(json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def write_boxplot_csv(report: ComparisonReport, path: str | Path) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["config", "median", "q1", "q3", "whisker_low", "whisker_high", "outliers"])
            for name in sorted(report.per_config):
                bs = report.per_config[name]
                writer.writerow(
                    [name, repr(bs.median), repr(bs.q1), repr(bs.q3),
                     repr(bs.whisker_low), repr(bs.whisker_high),
                     " ".join(repr(o) for o in bs.outliers)]
                )
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def format_report_table(report: ComparisonReport) -> str:
    """Plain-text summary: per-config quartiles plus significance against the best."""
    lines = [
        f"{'config':<12} {'median':>8} {'q1':>8} {'q3':>8} {'n_out':>6}  vs best",
        "-" * 58,
    ]
    ordered = sorted(report.per_config, key=lambda n: -report.per_config[n].median)
    test_by_config = {t.config: t for t in report.tests}
    for name in ordered:
        bs = report.per_config[name]
        if name == report.best_config:
            mark = "(best)"
        else:
            t = test_by_config.get(name)
            if t is None or t.p is None:
                mark = "n/a"
            else:
                mark = f"p={t.p:.4g} {t.stars}".rstrip()
        lines.append(
            f"{name:<12} {bs.median:>8.4f} {bs.q1:>8.4f} {bs.q3:>8.4f} "
            f"{len(bs.outliers):>6d}  {mark}"
        )
    return "\n".join(lines)
