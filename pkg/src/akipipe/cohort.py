"""KDIGO cohort labeling, exclusions, splitting, and corpus probes.

A stay is labeled AKI when either serum-creatinine condition holds
inside the detection window: a rise of at least 0.3 mg/dL between two
measurements at most 48 h apart, or any measurement at or above 1.5x
the baseline (the minimum value in the first ICU day). Both thresholds
are inclusive. The module also applies history/keyword exclusions,
splits stays into train/validation/test with per-split note prevalence
close to the overall one, and hosts two corpus-level analyses: a
bag-of-words logistic probe that scores how separable two note corpora
are, and per-word Pearson correlations against corpus membership.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import NoBaselineMeasurement, UnbalanceableSplit
from .ingest import CreatinineSeries, IcuStay, NoteDocument, split_sentences
from .rng import derive_seed

logger = logging.getLogger(__name__)

HISTORY_EXCLUSION_FLAGS = frozenset({"AKI", "CKD"})

DEFAULT_EXCLUSION_KEYWORDS = (
    "aki",
    "arf",
    "esrd",
    "ckd",
    "renal failure",
    "kidney injury",
    "kidney failure",
    "dialysis",
    "hemodialysis",
    "crrt",
)

SPLIT_NAMES = ("train", "validation", "test")


@dataclass(frozen=True)
class CohortConfig:
    creatinine_required_within_h: float = 72.0
    baseline_window_h: float = 24.0
    cond1_delta_mgdl: float = 0.3
    cond1_window_h: float = 48.0
    cond2_ratio: float = 1.5
    detection_window_h: float = 72.0
    note_window_h: float = 24.0
    exclusion_keywords: tuple[str, ...] = DEFAULT_EXCLUSION_KEYWORDS

    def __post_init__(self) -> None:
        for name in (
            "creatinine_required_within_h",
            "baseline_window_h",
            "cond1_window_h",
            "detection_window_h",
            "note_window_h",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.cond1_delta_mgdl <= 0:
            raise ValueError("cond1_delta_mgdl must be > 0")
        if self.cond2_ratio <= 1:
            raise ValueError("cond2_ratio must be > 1")


@dataclass(frozen=True)
class KdigoLabel:
    stay_id: str
    is_aki: bool
    met_cond1: bool
    met_cond2: bool
    trigger_time_h: float | None
    baseline_mgdl: float


@dataclass(frozen=True)
class ExclusionRecord:
    stay_id: str
    reason: str


@dataclass
class CohortMember:
    stay: IcuStay
    label: KdigoLabel
    notes: list[NoteDocument]


@dataclass
class Cohort:
    members: list[CohortMember]
    exclusions: list[ExclusionRecord]

    def prevalence(self) -> float:
        """Fraction of AKI notes among all prediction notes."""
        total = sum(len(m.notes) for m in self.members)
        aki = sum(len(m.notes) for m in self.members if m.label.is_aki)
        return aki / total if total else float("nan")


def baseline_creatinine(series: CreatinineSeries, config: CohortConfig) -> float:
    """Minimum creatinine within the baseline window (first ICU day)."""
    window = [m.value_mgdl for m in series if 0 <= m.time_h <= config.baseline_window_h]
    if not window:
        raise NoBaselineMeasurement(
            f"no creatinine measurement within {config.baseline_window_h} h"
        )
    return min(window)


def label_stay(series: CreatinineSeries, config: CohortConfig) -> KdigoLabel:
    """Apply both serum-creatinine conditions to one stay's series.

    Condition 1: some pair of measurements at most ``cond1_window_h``
    apart rises by at least ``cond1_delta_mgdl`` (later minus earlier).
    Condition 2: some measurement reaches ``cond2_ratio`` times the
    baseline (minimum value in the first ICU day). Both thresholds are
    inclusive, and only measurements inside the detection window
    participate.

    Args:
        series: one stay's creatinine measurements, any order.
        config: window lengths and thresholds.

    Returns:
        A :class:`KdigoLabel`; ``trigger_time_h`` is the earliest
        measurement time at which either condition is satisfied, or
        None for non-AKI stays.

    Raises:
        NoBaselineMeasurement: nothing measured in the baseline window.
    """
    window = sorted(
        (m for m in series if m.time_h <= config.detection_window_h),
        key=lambda m: m.time_h,
    )
    baseline = baseline_creatinine(window, config)
    stay_id = window[0].stay_id

    times = np.array([m.time_h for m in window])
    values = np.array([m.value_mgdl for m in window])

    cond1_trigger: float | None = None
    for j in range(len(window)):
        earlier = (times < times[j]) & (times[j] - times <= config.cond1_window_h)
        if np.any(values[j] - values[earlier] >= config.cond1_delta_mgdl):
            cond1_trigger = float(times[j])
            break

    cond2_trigger: float | None = None
    hits = np.nonzero(values >= config.cond2_ratio * baseline)[0]
    if hits.size:
        cond2_trigger = float(times[hits[0]])

    met_cond1 = cond1_trigger is not None
    met_cond2 = cond2_trigger is not None
    triggers = [t for t in (cond1_trigger, cond2_trigger) if t is not None]
    return KdigoLabel(
        stay_id=stay_id,
        is_aki=met_cond1 or met_cond2,
        met_cond1=met_cond1,
        met_cond2=met_cond2,
        trigger_time_h=min(triggers) if triggers else None,
        baseline_mgdl=baseline,
    )


def _keyword_patterns(keywords: Sequence[str]) -> list[tuple[str, re.Pattern]]:
    return [
        (kw, re.compile(r"(?<!\w)" + re.escape(kw) + r"(?!\w)", re.IGNORECASE))
        for kw in keywords
    ]


def apply_exclusions(
    stays: Sequence[IcuStay],
    notes: Sequence[NoteDocument],
    config: CohortConfig,
) -> tuple[list[IcuStay], list[ExclusionRecord]]:
    """Drop stays with prior kidney disease or kidney-dysfunction mentions.

    A stay is excluded when its history flags intersect {AKI, CKD} or
    when any of its notes inside the note window contains an exclusion
    keyword as a whole word (case-insensitive). One record per excluded
    stay, first matching reason wins.
    """
    patterns = _keyword_patterns(config.exclusion_keywords)
    notes_by_stay: dict[str, list[NoteDocument]] = {}
    for note in notes:
        if 0 <= note.chart_time_h <= config.note_window_h:
            notes_by_stay.setdefault(note.stay_id, []).append(note)

    included: list[IcuStay] = []
    report: list[ExclusionRecord] = []
    for stay in stays:
        flags = {f.upper() for f in stay.history_flags}
        if flags & HISTORY_EXCLUSION_FLAGS:
            report.append(ExclusionRecord(stay.stay_id, "history"))
            continue
        keyword_hit = None
        for note in notes_by_stay.get(stay.stay_id, []):
            for kw, pattern in patterns:
                if pattern.search(note.text):
                    keyword_hit = kw
                    break
            if keyword_hit:
                break
        if keyword_hit:
            report.append(ExclusionRecord(stay.stay_id, f"keyword:{keyword_hit}"))
        else:
            included.append(stay)
    return included, report


def select_cohort(
    stays: Sequence[IcuStay],
    creatinine: Mapping[str, CreatinineSeries],
    notes: Sequence[NoteDocument],
    config: CohortConfig,
) -> Cohort:
    """Assemble the labeled cohort.

    Keeps stays with at least one creatinine measurement inside the
    required window, not excluded, with at least one note inside the
    note window and a computable baseline; attaches the KDIGO label and
    the stay's prediction notes. Every dropped stay appears in the
    exclusion report with its reason.
    """
    report: list[ExclusionRecord] = []
    with_creatinine: list[IcuStay] = []
    for stay in stays:
        series = creatinine.get(stay.stay_id, [])
        if any(0 <= m.time_h <= config.creatinine_required_within_h for m in series):
            with_creatinine.append(stay)
        else:
            report.append(ExclusionRecord(stay.stay_id, "no_creatinine_in_window"))

    included, exclusion_report = apply_exclusions(with_creatinine, notes, config)
    report.extend(exclusion_report)

    notes_by_stay: dict[str, list[NoteDocument]] = {}
    for note in notes:
        if 0 <= note.chart_time_h <= config.note_window_h:
            notes_by_stay.setdefault(note.stay_id, []).append(note)

    members: list[CohortMember] = []
    for stay in included:
        stay_notes = notes_by_stay.get(stay.stay_id, [])
        if not stay_notes:
            report.append(ExclusionRecord(stay.stay_id, "no_notes_in_window"))
            continue
        try:
            label = label_stay(creatinine[stay.stay_id], config)
        except NoBaselineMeasurement:
            report.append(ExclusionRecord(stay.stay_id, "no_baseline"))
            continue
        members.append(CohortMember(stay=stay, label=label, notes=stay_notes))
    logger.info("cohort: %d stays kept, %d dropped", len(members), len(report))
    return Cohort(members=members, exclusions=report)


SplitAssignment = dict[str, str]


def split_dataset(
    cohort: Cohort,
    fractions: tuple[float, float, float] = (0.56, 0.14, 0.30),
    seed: int = 0,
    max_attempts: int = 100,
    prevalence_tolerance: float = 0.03,
) -> SplitAssignment:
    """Assign each stay to train/validation/test.

    Assignment is by stay, so all notes of a stay land in the same
    split. Candidate shuffles are drawn until every split's AKI note
    prevalence is within ``prevalence_tolerance`` of the overall one;
    after ``max_attempts`` failures an :class:`UnbalanceableSplit` is
    raised. Deterministic given the seed.
    """
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be positive and sum to 1")
    members = cohort.members
    n = len(members)
    if n == 0:
        raise UnbalanceableSplit("empty cohort")

    total_notes = sum(len(m.notes) for m in members)
    total_aki = sum(len(m.notes) for m in members if m.label.is_aki)
    overall = total_aki / total_notes

    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    n_val = min(n_val, n - n_train)
    boundaries = (n_train, n_train + n_val)

    for attempt in range(max_attempts):
        rng = np.random.default_rng(derive_seed(seed, f"split-attempt-{attempt}"))
        order = rng.permutation(n)
        groups = (
            order[: boundaries[0]],
            order[boundaries[0] : boundaries[1]],
            order[boundaries[1] :],
        )
        ok = True
        for group in groups:
            g_notes = sum(len(members[i].notes) for i in group)
            g_aki = sum(len(members[i].notes) for i in group if members[i].label.is_aki)
            if g_notes == 0 or abs(g_aki / g_notes - overall) > prevalence_tolerance:
                ok = False
                break
        if ok:
            assignment: SplitAssignment = {}
            for name, group in zip(SPLIT_NAMES, groups):
                for i in group:
                    assignment[members[i].stay.stay_id] = name
            return assignment
    raise UnbalanceableSplit(
        f"no balanced split within {max_attempts} attempts "
        f"(overall prevalence {overall:.4f}, tolerance {prevalence_tolerance})"
    )


@dataclass(frozen=True)
class CorpusStats:
    note_count: int
    sentence_count: int
    token_count: int


def corpus_stats(notes: Sequence[NoteDocument], vocab) -> CorpusStats:
    """Count notes, sentences, and WordPiece tokens over a corpus."""
    from .tokenizer import tokenize

    sentence_count = 0
    token_count = 0
    for note in notes:
        sentence_count += len(split_sentences(note.text, note.note_id))
        token_count += len(tokenize(note.text, vocab))
    return CorpusStats(len(notes), sentence_count, token_count)


@dataclass(frozen=True)
class ProbeConfig:
    """Settings for the bag-of-words logistic separability probe."""

    n_folds: int = 5
    iterations: int = 300
    learning_rate: float = 1.0
    l2_penalty: float = 1e-3
    seed: int = 0


def _presence_matrix(texts: Sequence[str], vocabulary: Sequence[str]) -> np.ndarray:
    index = {w: i for i, w in enumerate(vocabulary)}
    X = np.zeros((len(texts), len(vocabulary)))
    for row, text in enumerate(texts):
        for word in set(text.split()):
            col = index.get(word)
            if col is not None:
                X[row, col] = 1.0
    return X


def _train_logistic(
    X: np.ndarray, y: np.ndarray, iterations: int, lr: float, l2: float
) -> tuple[np.ndarray, float]:
    n, d = X.shape
    w = np.zeros(d)
    b = 0.0
    for _ in range(iterations):
        z = X @ w + b
        p = 1.0 / (1.0 + np.exp(-z))
        residual = p - y
        grad_w = X.T @ residual / n + l2 * w
        grad_b = float(np.mean(residual))
        w -= lr * grad_w
        b -= lr * grad_b
    return w, b


def distinguish_corpora(
    corpus_a: Sequence[str], corpus_b: Sequence[str], config: ProbeConfig = ProbeConfig()
) -> float:
    """Mean cross-validated accuracy of a linear probe separating two corpora.

    Trains a bag-of-words (binary presence) logistic-regression
    classifier by full-batch gradient descent under ``n_folds``-fold
    cross-validation; corpus A is the positive class. Deterministic
    given the config seed.
    """
    if not corpus_a or not corpus_b:
        raise ValueError("both corpora must be non-empty")
    texts = list(corpus_a) + list(corpus_b)
    y = np.concatenate([np.ones(len(corpus_a)), np.zeros(len(corpus_b))])
    vocabulary = sorted({w for t in texts for w in t.split()})
    X = _presence_matrix(texts, vocabulary)

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(texts))
    folds = np.array_split(order, config.n_folds)
    accuracies = []
    for k, held_out in enumerate(folds):
        if held_out.size == 0:
            continue
        train_idx = np.concatenate([f for i, f in enumerate(folds) if i != k])
        w, b = _train_logistic(
            X[train_idx], y[train_idx], config.iterations, config.learning_rate,
            config.l2_penalty,
        )
        p = 1.0 / (1.0 + np.exp(-(X[held_out] @ w + b)))
        accuracies.append(float(np.mean((p >= 0.5) == y[held_out])))
    return float(np.mean(accuracies))


@dataclass(frozen=True)
class WordCorrelation:
    word: str
    pearson_r: float
    support: int


def word_correlations(
    corpus_a: Sequence[str], corpus_b: Sequence[str]
) -> list[WordCorrelation]:
    """Pearson correlation of per-note word presence with corpus membership.

    Membership is 1 for corpus A. Words with zero presence variance
    (present in every note or in none) are excluded; the result is
    sorted by correlation descending, ties broken by word.
    """
    if not corpus_a or not corpus_b:
        raise ValueError("both corpora must be non-empty")
    texts = list(corpus_a) + list(corpus_b)
    y = np.concatenate([np.ones(len(corpus_a)), np.zeros(len(corpus_b))])
    vocabulary = sorted({w for t in texts for w in t.split()})
    X = _presence_matrix(texts, vocabulary)

    y_centered = y - y.mean()
    y_norm = float(np.sqrt(np.sum(y_centered**2)))
    results = []
    for col, word in enumerate(vocabulary):
        x = X[:, col]
        support = int(x.sum())
        x_centered = x - x.mean()
        x_norm = float(np.sqrt(np.sum(x_centered**2)))
        if x_norm == 0.0 or y_norm == 0.0:
            continue
        r = float(np.dot(x_centered, y_centered) / (x_norm * y_norm))
        results.append(WordCorrelation(word, r, support))
    results.sort(key=lambda wc: (-wc.pearson_r, wc.word))
    return results
