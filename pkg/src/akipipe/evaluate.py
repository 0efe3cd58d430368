"""Classification metrics with explicit nan conventions and bootstrap CIs.

Precision is nan when nothing is predicted positive, NPV is nan when
nothing is predicted negative, and F1 collapses to 0 when precision is
nan; these conventions make degenerate all-one-class predictors
report honestly instead of erroring. AUC uses the rank (Mann-Whitney)
formulation with half credit for ties, which equals the trapezoidal
ROC area. Confidence intervals come from a seeded nonparametric
percentile bootstrap over notes; resamples on which a metric is
undefined are skipped.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import AllResamplesUndefined, LengthMismatch, SingleClassData

METRIC_NAMES = ("auc", "precision", "recall", "f1", "specificity", "npv")
REPORT_COLUMNS = {
    "auc": "AUC",
    "precision": "Precision/PPV",
    "recall": "Recall/Sensitivity",
    "f1": "F1",
    "specificity": "SPC",
    "npv": "NPV",
}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(
    labels: Sequence[int], probabilities: Sequence[float], threshold: float
) -> ConfusionCounts:
    """Count outcomes with ``probability >= threshold`` read as positive."""
    y = np.asarray(labels)
    p = np.asarray(probabilities)
    if y.shape != p.shape:
        raise LengthMismatch(f"labels {y.shape} vs probabilities {p.shape}")
    pred = p >= threshold
    truth = y == 1
    return ConfusionCounts(
        tp=int(np.count_nonzero(pred & truth)),
        fp=int(np.count_nonzero(pred & ~truth)),
        tn=int(np.count_nonzero(~pred & ~truth)),
        fn=int(np.count_nonzero(~pred & truth)),
    )


@dataclass(frozen=True)
class ClassificationMetrics:
    precision: float
    recall: float
    f1: float
    specificity: float
    npv: float


def _ratio(numerator: int, denominator: int) -> float:
    return numerator / denominator if denominator else float("nan")


def metrics(counts: ConfusionCounts) -> ClassificationMetrics:
    """Threshold metrics from a confusion table, nan where undefined."""
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    specificity = _ratio(counts.tn, counts.tn + counts.fp)
    npv = _ratio(counts.tn, counts.tn + counts.fn)
    if math.isnan(precision) or precision + recall == 0:
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return ClassificationMetrics(precision, recall, f1, specificity, npv)


def auc(labels: Sequence[int], scores: Sequence[float]) -> float:
    """Probability a random positive outscores a random negative (ties 0.5)."""
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(np.count_nonzero(y == 1))
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassData(f"need both classes, got {n_pos} positives of {len(y)}")
    ranks = rankdata(s, method="average")
    pos_rank_sum = float(ranks[y == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def bootstrap_ci(
    labels: Sequence[int],
    scores: Sequence[float],
    metric_fn: Callable[[np.ndarray, np.ndarray], float],
    n_resamples: int = 1000,
    alpha: float = 0.05,
    seed: int = 0,
) -> tuple[float, float]:
    """Percentile bootstrap interval for one metric over notes.

    Resamples with replacement, recomputes the metric, and skips
    resamples where it is undefined (nan or single-class).
    """
    if n_resamples < 100:
        raise ValueError("n_resamples must be >= 100")
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    rng = np.random.default_rng(seed)
    values = []
    for _ in range(n_resamples):
        idx = rng.integers(0, len(y), size=len(y))
        try:
            value = metric_fn(y[idx], s[idx])
        except SingleClassData:
            continue
        if not math.isnan(value):
            values.append(value)
    if not values:
        raise AllResamplesUndefined("metric undefined on every bootstrap resample")
    low, high = np.percentile(values, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return float(low), float(high)


@dataclass(frozen=True)
class MetricValue:
    value: float
    ci_low: float
    ci_high: float


@dataclass(frozen=True)
class MetricReport:
    auc: MetricValue
    precision: MetricValue
    recall: MetricValue
    f1: MetricValue
    specificity: MetricValue
    npv: MetricValue

    def get(self, name: str) -> MetricValue:
        return getattr(self, name)


def _metric_functions(threshold: float) -> dict[str, Callable]:
    def threshold_metric(field: str):
        def fn(y, s):
            return getattr(metrics(confusion(y, s, threshold)), field)

        return fn

    return {
        "auc": auc,
        "precision": threshold_metric("precision"),
        "recall": threshold_metric("recall"),
        "f1": threshold_metric("f1"),
        "specificity": threshold_metric("specificity"),
        "npv": threshold_metric("npv"),
    }


def metric_report(
    labels: Sequence[int],
    probabilities: Sequence[float],
    threshold: float = 0.5,
    n_resamples: int = 1000,
    alpha: float = 0.05,
    seed: int = 0,
) -> MetricReport:
    """Point estimates plus bootstrap CIs for the whole metric suite.

    A metric whose value is nan (or whose every resample is undefined)
    reports a (nan, nan) interval.
    """
    functions = _metric_functions(threshold)
    values: dict[str, MetricValue] = {}
    for name, fn in functions.items():
        point = fn(np.asarray(labels), np.asarray(probabilities, dtype=np.float64))
        try:
            low, high = bootstrap_ci(
                labels, probabilities, fn, n_resamples=n_resamples, alpha=alpha,
                seed=seed,
            )
        except AllResamplesUndefined:
            low, high = float("nan"), float("nan")
        if math.isnan(point):
            low, high = float("nan"), float("nan")
        values[name] = MetricValue(float(point), low, high)
    return MetricReport(**values)


@dataclass(frozen=True)
class RenderedReport:
    text: str
    csv_text: str
    json_text: str


def _format_value(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.3f}"


def _format_cell(mv: MetricValue) -> str:
    return f"{_format_value(mv.value)} ({_format_value(mv.ci_low)}-{_format_value(mv.ci_high)})"


def render_report(reports: Mapping[tuple[str, str], MetricReport]) -> RenderedReport:
    """Render metric reports keyed by (model, setting) in three formats.

    Text: one row per model/setting with ``value (low-high)`` cells at
    three decimals, nan printed as ``nan (nan-nan)``. CSV: long format
    ``model,setting,metric,value,ci_low,ci_high``. JSON mirrors the CSV
    with nan serialized as null.
    """
    if not reports:
        raise ValueError("no reports to render")

    header = ["Setting", "Model"] + [REPORT_COLUMNS[m] for m in METRIC_NAMES]
    rows = []
    for (model, setting), report in reports.items():
        rows.append([setting, model] + [_format_cell(report.get(m)) for m in METRIC_NAMES])
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = [
        "  ".join(cell.ljust(widths[i]) for i, cell in enumerate(header)).rstrip(),
        "  ".join("-" * w for w in widths),
    ]
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
    text = "\n".join(lines) + "\n"

    # The text table is the 3-decimal display; CSV and JSON keep full
    # precision (nan spelled out in CSV, null in JSON).
    csv_lines = ["model,setting,metric,value,ci_low,ci_high"]
    json_obj: dict = {}
    for (model, setting), report in reports.items():
        for name in METRIC_NAMES:
            mv = report.get(name)
            csv_lines.append(
                f"{model},{setting},{name},{mv.value!r},{mv.ci_low!r},{mv.ci_high!r}"
            )
            entry = json_obj.setdefault(model, {}).setdefault(setting, {})
            entry[name] = {
                "value": None if math.isnan(mv.value) else mv.value,
                "ci_low": None if math.isnan(mv.ci_low) else mv.ci_low,
                "ci_high": None if math.isnan(mv.ci_high) else mv.ci_high,
            }
    return RenderedReport(
        text=text,
        csv_text="\n".join(csv_lines) + "\n",
        json_text=json.dumps(json_obj, indent=2, sort_keys=True) + "\n",
    )
