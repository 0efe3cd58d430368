"""Loading, cleaning, and synthesis of the three ICU input tables.

The pipeline consumes three CSV tables: ICU stays, serum-creatinine
measurements (hours since ICU admission, mg/dL), and clinical notes.
This module parses and validates them, cleans note text, splits notes
into sentences, and can generate seeded synthetic corpora with a
planted label signal for desk-scale experiments.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DuplicateStayId,
    InvalidSpec,
    MissingColumn,
    NegativeTime,
    NonPositiveValue,
    UnparseableTimestamp,
)

STAYS_COLUMNS = ("stay_id", "patient_id", "intime", "history_flags")
CREATININE_COLUMNS = ("stay_id", "time_hours", "value_mgdl")
NOTES_COLUMNS = ("note_id", "stay_id", "chart_time_hours", "category", "text")

_DEID_BRACKETS = re.compile(r"\[\*\*.*?\*\*\]", re.DOTALL)
_WHITESPACE = re.compile(r"\s+")
_BLANK_LINES = re.compile(r"\n\s*\n")
_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


@dataclass(frozen=True)
class IcuStay:
    stay_id: str
    patient_id: str
    intime: datetime
    history_flags: frozenset[str] = frozenset()


@dataclass(frozen=True)
class CreatinineMeasurement:
    stay_id: str
    time_h: float
    value_mgdl: float


# A stay's creatinine series is its time-sorted measurement list.
CreatinineSeries = list[CreatinineMeasurement]


@dataclass(frozen=True)
class NoteDocument:
    note_id: str
    stay_id: str
    chart_time_h: float
    category: str
    text: str


@dataclass(frozen=True)
class Sentence:
    note_id: str
    index: int
    text: str


def _open_reader(path: str | Path, required: Sequence[str]) -> tuple[csv.DictReader, object]:
    handle = open(path, "r", encoding="utf-8", newline="")
    reader = csv.DictReader(handle)
    fields = reader.fieldnames or []
    missing = [c for c in required if c not in fields]
    if missing:
        handle.close()
        raise MissingColumn(f"{path}: missing column(s) {', '.join(missing)}")
    return reader, handle


def load_stays(path: str | Path) -> list[IcuStay]:
    """Load the ICU stays table.

    ``history_flags`` is a ``;``-separated set of prior-condition codes
    (for example ``CKD;AKI``) and may be empty. Duplicate ``stay_id``
    rows are rejected.
    """
    reader, handle = _open_reader(path, STAYS_COLUMNS)
    stays: list[IcuStay] = []
    seen: set[str] = set()
    with handle:
        for row in reader:
            stay_id = row["stay_id"].strip()
            if stay_id in seen:
                raise DuplicateStayId(f"{path}: duplicate stay_id {stay_id!r}")
            seen.add(stay_id)
            raw_time = row["intime"].strip()
            try:
                intime = datetime.fromisoformat(raw_time)
            except ValueError as exc:
                raise UnparseableTimestamp(
                    f"{path}: stay {stay_id!r}: bad intime {raw_time!r}"
                ) from exc
            flags = frozenset(
                part.strip() for part in row["history_flags"].split(";") if part.strip()
            )
            stays.append(IcuStay(stay_id, row["patient_id"].strip(), intime, flags))
    return stays


def load_creatinine(path: str | Path) -> dict[str, CreatinineSeries]:
    """Load creatinine measurements grouped by stay, time-sorted ascending."""
    reader, handle = _open_reader(path, CREATININE_COLUMNS)
    series: dict[str, CreatinineSeries] = {}
    with handle:
        for row in reader:
            stay_id = row["stay_id"].strip()
            time_h = float(row["time_hours"])
            value = float(row["value_mgdl"])
            if not np.isfinite(time_h) or time_h < 0:
                raise NegativeTime(
                    f"{path}: stay {stay_id!r}: time must be finite and >= 0, got {time_h}"
                )
            if not np.isfinite(value) or value <= 0:
                raise NonPositiveValue(
                    f"{path}: stay {stay_id!r}: creatinine must be > 0 mg/dL, got {value}"
                )
            series.setdefault(stay_id, []).append(
                CreatinineMeasurement(stay_id, time_h, value)
            )
    for measurements in series.values():
        measurements.sort(key=lambda m: m.time_h)
    return series


def load_notes(path: str | Path, uncased: bool = True) -> tuple[list[NoteDocument], int]:
    """Load the notes table, cleaning each text on the way in.

    Notes whose text is empty after cleaning are dropped; the second
    return value counts them.
    """
    reader, handle = _open_reader(path, NOTES_COLUMNS)
    notes: list[NoteDocument] = []
    dropped = 0
    with handle:
        for row in reader:
            cleaned = clean_text(row["text"], uncased=uncased)
            if not cleaned:
                dropped += 1
                continue
            notes.append(
                NoteDocument(
                    note_id=row["note_id"].strip(),
                    stay_id=row["stay_id"].strip(),
                    chart_time_h=float(row["chart_time_hours"]),
                    category=row["category"].strip(),
                    text=cleaned,
                )
            )
    return notes, dropped


def write_stays(stays: Iterable[IcuStay], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(STAYS_COLUMNS)
        for stay in stays:
            writer.writerow(
                [
                    stay.stay_id,
                    stay.patient_id,
                    stay.intime.isoformat(sep=" "),
                    ";".join(sorted(stay.history_flags)),
                ]
            )


def write_creatinine(series: Mapping[str, CreatinineSeries], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(CREATININE_COLUMNS)
        for stay_id in series:
            for m in series[stay_id]:
                writer.writerow([m.stay_id, repr(m.time_h), repr(m.value_mgdl)])


def write_notes(notes: Iterable[NoteDocument], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(NOTES_COLUMNS)
        for note in notes:
            writer.writerow(
                [note.note_id, note.stay_id, repr(note.chart_time_h), note.category, note.text]
            )


def clean_text(raw: str, uncased: bool = True) -> str:
    """Normalize raw note text.

    De-identification placeholders of the form ``[** ... **]`` are
    removed, whitespace runs collapse to single spaces, and the text is
    lowercased unless ``uncased`` is False. Idempotent.
    """
    text = _DEID_BRACKETS.sub(" ", raw)
    text = _WHITESPACE.sub(" ", text).strip()
    if uncased:
        text = text.lower()
    return text


def split_sentences(text: str, note_id: str = "") -> list[Sentence]:
    """Split cleaned text into sentences.

    Splits after sentence-final punctuation (``.``, ``!``, ``?``)
    followed by whitespace, and on blank lines. Empty fragments are
    dropped; indices are contiguous from 0 in original order.
    """
    fragments: list[str] = []
    for block in _BLANK_LINES.split(text):
        fragments.extend(_SENTENCE_END.split(block))
    sentences = []
    for fragment in fragments:
        stripped = fragment.strip()
        if stripped:
            sentences.append(Sentence(note_id=note_id, index=len(sentences), text=stripped))
    return sentences


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters for the seeded synthetic corpus generator.

    Positive stays get a creatinine series planted to satisfy exactly
    one KDIGO condition (chosen uniformly) and notes enriched in
    ``signal_tokens`` at ``signal_rate``; negative stays satisfy
    neither condition and never emit signal tokens.
    """

    n_stays: int
    prevalence: float
    signal_tokens: tuple[str, ...] = ("oliguria", "hypotension", "lasix", "contrast")
    vocab_size: int = 50
    seed: int = 0
    signal_rate: float = 0.25
    notes_per_stay: tuple[int, int] = (1, 2)
    sentences_per_note: tuple[int, int] = (2, 5)
    words_per_sentence: tuple[int, int] = (4, 10)


@dataclass
class SyntheticCorpus:
    stays: list[IcuStay]
    creatinine: dict[str, CreatinineSeries]
    notes: list[NoteDocument]
    # Generator's own plan, for cross-checking against the labeler.
    intended_labels: dict[str, bool] = field(default_factory=dict)
    intended_condition: dict[str, int] = field(default_factory=dict)


def _validate_spec(spec: SyntheticSpec) -> int:
    if spec.n_stays <= 0:
        raise InvalidSpec("n_stays must be positive")
    if not 0.0 < spec.prevalence < 1.0:
        raise InvalidSpec("prevalence must lie in (0, 1)")
    if spec.vocab_size <= 0:
        raise InvalidSpec("vocab_size must be positive")
    if not 0.0 <= spec.signal_rate <= 1.0:
        raise InvalidSpec("signal_rate must lie in [0, 1]")
    if spec.signal_rate > 0 and not spec.signal_tokens:
        raise InvalidSpec("signal_rate > 0 requires signal_tokens")
    n_pos = int(round(spec.n_stays * spec.prevalence))
    if n_pos == 0 or n_pos == spec.n_stays:
        raise InvalidSpec(
            f"prevalence {spec.prevalence} rounds to a single-class corpus for "
            f"{spec.n_stays} stays"
        )
    return n_pos


def _negative_series(rng: np.random.Generator, stay_id: str) -> CreatinineSeries:
    # Values stay inside a 0.08 mg/dL band above a base >= 0.7, so no
    # pair rises by 0.3 and no value reaches 1.5x the first-day minimum.
    base = round(float(rng.uniform(0.7, 1.1)), 2)
    count = int(rng.integers(3, 6))
    times = [round(float(rng.uniform(1.0, 20.0)), 1)]
    times += [round(float(t), 1) for t in rng.uniform(1.0, 70.0, size=count - 1)]
    values = [round(base + float(j), 2) for j in rng.uniform(0.0, 0.08, size=count)]
    return sorted(
        (CreatinineMeasurement(stay_id, t, v) for t, v in zip(times, values)),
        key=lambda m: m.time_h,
    )


def _positive_series(
    rng: np.random.Generator, stay_id: str, condition: int
) -> CreatinineSeries:
    t0 = round(float(rng.uniform(1.0, 18.0)), 1)
    if condition == 1:
        # Absolute rise >= 0.3 within 48 h, ratio kept below 1.5.
        base = round(float(rng.uniform(0.8, 1.1)), 2)
        t1 = round(t0 + float(rng.uniform(6.0, 28.0)), 1)
        v1 = round(base + float(rng.uniform(0.31, 0.38)), 2)
    else:
        # Ratio >= 1.5x baseline with total rise below 0.3.
        base = round(float(rng.uniform(0.40, 0.48)), 2)
        t1 = round(t0 + float(rng.uniform(6.0, 40.0)), 1)
        v1 = round(1.5 * base + float(rng.uniform(0.01, 0.04)), 2)
    return [
        CreatinineMeasurement(stay_id, t0, base),
        CreatinineMeasurement(stay_id, t1, v1),
    ]


def _note_text(
    rng: np.random.Generator, spec: SyntheticSpec, background: Sequence[str], positive: bool
) -> str:
    n_sentences = int(rng.integers(spec.sentences_per_note[0], spec.sentences_per_note[1] + 1))
    sentences = []
    for _ in range(n_sentences):
        n_words = int(rng.integers(spec.words_per_sentence[0], spec.words_per_sentence[1] + 1))
        words = []
        for _ in range(n_words):
            if positive and spec.signal_rate > 0 and rng.random() < spec.signal_rate:
                words.append(spec.signal_tokens[int(rng.integers(len(spec.signal_tokens)))])
            else:
                words.append(background[int(rng.integers(len(background)))])
        sentences.append(" ".join(words) + ".")
    return " ".join(sentences)


def generate_synthetic_corpus(spec: SyntheticSpec) -> SyntheticCorpus:
    """Generate a deterministic synthetic (stays, creatinine, notes) triple.

    The number of positive stays is ``round(n_stays * prevalence)``.
    Output is byte-identical for identical specs.
    """
    n_pos = _validate_spec(spec)
    rng = np.random.default_rng(spec.seed)
    width = max(4, len(str(spec.n_stays)))
    background = [f"w{i:03d}" for i in range(spec.vocab_size)]
    base_time = datetime(2019, 1, 1, 0, 0)

    positive_ids = set(rng.choice(spec.n_stays, size=n_pos, replace=False).tolist())
    corpus = SyntheticCorpus(stays=[], creatinine={}, notes=[])
    for i in range(spec.n_stays):
        stay_id = f"s{i:0{width}d}"
        positive = i in positive_ids
        corpus.intended_labels[stay_id] = positive
        corpus.stays.append(
            IcuStay(
                stay_id=stay_id,
                patient_id=f"p{i:0{width}d}",
                intime=base_time + timedelta(minutes=i),
                history_flags=frozenset(),
            )
        )
        if positive:
            condition = 1 + int(rng.integers(2))
            corpus.intended_condition[stay_id] = condition
            corpus.creatinine[stay_id] = _positive_series(rng, stay_id, condition)
        else:
            corpus.intended_condition[stay_id] = 0
            corpus.creatinine[stay_id] = _negative_series(rng, stay_id)
        n_notes = int(rng.integers(spec.notes_per_stay[0], spec.notes_per_stay[1] + 1))
        for k in range(n_notes):
            corpus.notes.append(
                NoteDocument(
                    note_id=f"n{i:0{width}d}_{k}",
                    stay_id=stay_id,
                    chart_time_h=round(float(rng.uniform(1.0, 23.0)), 1),
                    category="nursing",
                    text=_note_text(rng, spec, background, positive),
                )
            )
    return corpus


def write_corpus(corpus: SyntheticCorpus, out_dir: str | Path) -> dict[str, Path]:
    """Write a synthetic corpus in the three standard CSV schemas."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "stays": out / "stays.csv",
        "creatinine": out / "creatinine.csv",
        "notes": out / "notes.csv",
    }
    write_stays(corpus.stays, paths["stays"])
    write_creatinine(corpus.creatinine, paths["creatinine"])
    write_notes(corpus.notes, paths["notes"])
    return paths
