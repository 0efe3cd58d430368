"""Command-line pipeline: synth, cohort, pretrain, finetune, evaluate, visualize.

One TOML configuration file drives every stage; flags override. The
global seed fans out to per-stage seeds (stage name hashed with the
seed) so stages are independently reproducible; identical config and
seed give bitwise-identical artifacts. Logs go to stderr, artifact
paths to stdout.

Exit codes: 0 success, 2 input/schema error, 3 empty or unsplittable
cohort, 4 non-finite loss, 5 single-class data, 6 checkpoint missing
or unreadable.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import __version__
from .attnviz import visualize_note
from .cohort import (
    Cohort,
    CohortConfig,
    ProbeConfig,
    corpus_stats,
    distinguish_corpora,
    select_cohort,
    split_dataset,
    word_correlations,
)
from .encoder import (
    ModelConfig,
    ParameterSet,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .errors import (
    AkipipeError,
    CorruptCheckpoint,
    DuplicateStayId,
    DuplicateToken,
    IncompatibleArchitecture,
    InvalidSpec,
    MissingColumn,
    MissingSpecialToken,
    NegativeTime,
    NonFiniteLoss,
    NonPositiveValue,
    ShapeMismatch,
    SingleClassData,
    UnbalanceableSplit,
    UnparseableTimestamp,
)
from .evaluate import metric_report, render_report
from .finetune import (
    FinetuneConfig,
    FinetunedModel,
    finetune_loop,
    predict,
    write_training_log,
)
from .ingest import (
    NoteDocument,
    SyntheticSpec,
    generate_synthetic_corpus,
    load_creatinine,
    load_notes,
    load_stays,
    split_sentences,
    write_corpus,
)
from .pretrain import MaskingConfig, PretrainConfig, pretrain_loop, write_loss_curve
from .rng import derive_seed
from .tokenizer import Vocabulary, build_test_vocab, load_vocab, save_vocab

logger = logging.getLogger("akipipe")

SCHEMA_ERRORS = (
    MissingColumn,
    UnparseableTimestamp,
    DuplicateStayId,
    NonPositiveValue,
    NegativeTime,
    MissingSpecialToken,
    DuplicateToken,
    InvalidSpec,
)
CHECKPOINT_ERRORS = (CorruptCheckpoint, ShapeMismatch, IncompatibleArchitecture)


class CommandError(AkipipeError):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class PathsConfig:
    stays: str = "stays.csv"
    creatinine: str = "creatinine.csv"
    notes: str = "notes.csv"
    vocab: str = "vocab.txt"
    output_dir: str = "out"


@dataclass(frozen=True)
class ModelSettings:
    """Encoder architecture; vocab_size comes from the vocabulary file."""

    num_layers: int = 2
    num_heads: int = 2
    hidden_dim: int = 32
    ff_dim: int = 64
    max_position: int = 512
    type_vocab: int = 2
    dropout_rate: float = 0.1
    init_std: float = 0.02

    def to_model_config(self, vocab_size: int, seed: int) -> ModelConfig:
        return ModelConfig(
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            hidden_dim=self.hidden_dim,
            ff_dim=self.ff_dim,
            vocab_size=vocab_size,
            max_position=self.max_position,
            type_vocab=self.type_vocab,
            dropout_rate=self.dropout_rate,
            init_std=self.init_std,
            seed=seed,
        )


@dataclass(frozen=True)
class EvaluateSettings:
    n_resamples: int = 1000
    alpha: float = 0.05
    threshold: float = 0.5


@dataclass(frozen=True)
class SynthSettings:
    n_stays: int = 200
    prevalence: float = 0.17
    signal_tokens: tuple[str, ...] = ("oliguria", "hypotension", "lasix", "contrast")
    vocab_size: int = 50
    signal_rate: float = 0.25


@dataclass
class PipelineConfig:
    seed: int = 0
    uncased: bool = True
    split_fractions: tuple[float, float, float] = (0.56, 0.14, 0.30)
    paths: PathsConfig = field(default_factory=PathsConfig)
    cohort: CohortConfig = field(default_factory=CohortConfig)
    model: ModelSettings = field(default_factory=ModelSettings)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    evaluate: EvaluateSettings = field(default_factory=EvaluateSettings)
    synth: SynthSettings = field(default_factory=SynthSettings)


_SECTION_TYPES = {
    "paths": PathsConfig,
    "cohort": CohortConfig,
    "model": ModelSettings,
    "pretrain": PretrainConfig,
    "masking": MaskingConfig,
    "finetune": FinetuneConfig,
    "probe": ProbeConfig,
    "evaluate": EvaluateSettings,
    "synth": SynthSettings,
}
_TOP_LEVEL_KEYS = {"seed", "uncased", "split_fractions"}

# Sections whose seed field follows the global seed unless set explicitly.
_SEEDED_SECTIONS = {"pretrain", "masking", "finetune", "probe"}


def _build_section(name: str, cls, table: dict, global_seed: int):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(table) - set(fields)
    if unknown:
        raise CommandError(2, f"config section [{name}] has unknown keys: {sorted(unknown)}")
    values = dict(table)
    for key, f in fields.items():
        if key in values and f.type in ("tuple[str, ...]", "tuple[float, float, float]"):
            values[key] = tuple(values[key])
    if name in _SEEDED_SECTIONS and "seed" not in values:
        values["seed"] = derive_seed(global_seed, name)
    return cls(**values)


def load_pipeline_config(path: str | Path | None) -> PipelineConfig:
    """Read the TOML config; absent sections use defaults."""
    data: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as handle:
                data = tomllib.load(handle)
        except FileNotFoundError:
            raise CommandError(2, f"config file not found: {path}")
        except tomllib.TOMLDecodeError as exc:
            raise CommandError(2, f"config file {path}: {exc}")
    unknown = set(data) - _TOP_LEVEL_KEYS - set(_SECTION_TYPES)
    if unknown:
        raise CommandError(2, f"config has unknown keys: {sorted(unknown)}")
    seed = int(data.get("seed", 0))
    config = PipelineConfig(
        seed=seed,
        uncased=bool(data.get("uncased", True)),
        split_fractions=tuple(data.get("split_fractions", (0.56, 0.14, 0.30))),
    )
    for name, cls in _SECTION_TYPES.items():
        if name in data:
            setattr(config, name, _build_section(name, cls, data[name], seed))
        elif name in _SEEDED_SECTIONS:
            section = getattr(config, name)
            setattr(
                config, name,
                dataclasses.replace(section, seed=derive_seed(seed, name)),
            )
    return config


def _out_dir(config: PipelineConfig) -> Path:
    out = Path(config.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_file(path: str | Path, kind: str, code: int = 2) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CommandError(code, f"{kind} not found: {p}")
    return p


def _load_tables(config: PipelineConfig):
    stays = load_stays(_require_file(config.paths.stays, "stays table"))
    creatinine = load_creatinine(_require_file(config.paths.creatinine, "creatinine table"))
    notes, dropped = load_notes(
        _require_file(config.paths.notes, "notes table"), uncased=config.uncased
    )
    if dropped:
        logger.info("dropped %d notes empty after cleaning", dropped)
    return stays, creatinine, notes


def _load_vocab(config: PipelineConfig) -> Vocabulary:
    return load_vocab(_require_file(config.paths.vocab, "vocabulary file"))


# --- cohort artifacts ---


def _cohort_csv_path(config: PipelineConfig) -> Path:
    return _out_dir(config) / "cohort.csv"


def _write_cohort_csv(cohort: Cohort, assignment: dict[str, str], path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["stay_id", "label", "met_cond1", "met_cond2", "trigger_time_h",
             "baseline_mgdl", "split"]
        )
        for member in cohort.members:
            label = member.label
            writer.writerow(
                [
                    member.stay.stay_id,
                    int(label.is_aki),
                    int(label.met_cond1),
                    int(label.met_cond2),
                    "" if label.trigger_time_h is None else repr(label.trigger_time_h),
                    repr(label.baseline_mgdl),
                    assignment[member.stay.stay_id],
                ]
            )


@dataclass
class CohortRow:
    stay_id: str
    label: int
    split: str


def _read_cohort_csv(path: str | Path) -> list[CohortRow]:
    rows = []
    with open(_require_file(path, "cohort file"), "r", encoding="utf-8", newline="") as handle:
        for record in csv.DictReader(handle):
            rows.append(
                CohortRow(record["stay_id"], int(record["label"]), record["split"])
            )
    return rows


def _split_notes(
    rows: Sequence[CohortRow], notes: Sequence[NoteDocument], config: PipelineConfig,
    split: str,
) -> tuple[list[NoteDocument], list[int]]:
    by_stay = {row.stay_id: row for row in rows}
    kept, labels = [], []
    for note in notes:
        row = by_stay.get(note.stay_id)
        if row is None or row.split != split:
            continue
        if 0 <= note.chart_time_h <= config.cohort.note_window_h:
            kept.append(note)
            labels.append(row.label)
    return kept, labels


def _cohort_notes(
    rows: Sequence[CohortRow], notes: Sequence[NoteDocument], config: PipelineConfig
) -> list[NoteDocument]:
    ids = {row.stay_id for row in rows}
    return [
        n for n in notes
        if n.stay_id in ids and 0 <= n.chart_time_h <= config.cohort.note_window_h
    ]


# --- commands ---


def cmd_synth(args, config: PipelineConfig) -> int:
    settings = config.synth
    spec = SyntheticSpec(
        n_stays=args.n_stays if args.n_stays is not None else settings.n_stays,
        prevalence=args.prevalence if args.prevalence is not None else settings.prevalence,
        signal_tokens=(
            tuple(args.signal_tokens.split(",")) if args.signal_tokens
            else settings.signal_tokens
        ),
        vocab_size=args.vocab_size if args.vocab_size is not None else settings.vocab_size,
        signal_rate=args.signal_rate if args.signal_rate is not None else settings.signal_rate,
        seed=derive_seed(config.seed, "synth"),
    )
    corpus = generate_synthetic_corpus(spec)
    out = _out_dir(config)
    paths = write_corpus(corpus, out)
    vocab = build_test_vocab(
        [note.text for note in corpus.notes],
        target_size=5 + spec.vocab_size + len(spec.signal_tokens),
    )
    vocab_path = out / "vocab.txt"
    save_vocab(vocab, vocab_path)
    n_pos = sum(corpus.intended_labels.values())
    logger.info(
        "synth: %d stays (%d positive), %d notes, vocab %d",
        spec.n_stays, n_pos, len(corpus.notes), len(vocab),
    )
    for path in (*paths.values(), vocab_path):
        print(path)
    return 0


def _print_cohort_summary(cohort: Cohort, assignment: dict[str, str]) -> None:
    rows = []
    totals = {"notes": 0, "aki": 0}
    for split in ("train", "validation", "test"):
        notes = sum(
            len(m.notes) for m in cohort.members if assignment[m.stay.stay_id] == split
        )
        aki = sum(
            len(m.notes)
            for m in cohort.members
            if assignment[m.stay.stay_id] == split and m.label.is_aki
        )
        rows.append((split, notes, aki))
        totals["notes"] += notes
        totals["aki"] += aki
    rows.append(("overall", totals["notes"], totals["aki"]))
    print(f"{'split':<12}{'notes':>8}{'aki':>8}{'non-aki':>9}  prevalence")
    for name, notes, aki in rows:
        prevalence = 100.0 * aki / notes if notes else float("nan")
        print(f"{name:<12}{notes:>8}{aki:>8}{notes - aki:>9}  {prevalence:.2f}%")


def cmd_cohort(args, config: PipelineConfig) -> int:
    stays, creatinine, notes = _load_tables(config)
    cohort = select_cohort(stays, creatinine, notes, config.cohort)
    if not cohort.members:
        raise CommandError(3, "cohort is empty after selection")
    try:
        assignment = split_dataset(
            cohort, fractions=config.split_fractions, seed=derive_seed(config.seed, "split")
        )
    except UnbalanceableSplit as exc:
        raise CommandError(3, str(exc))
    out = _out_dir(config)
    cohort_path = out / "cohort.csv"
    _write_cohort_csv(cohort, assignment, cohort_path)
    exclusions_path = out / "exclusions.csv"
    with open(exclusions_path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["stay_id", "reason"])
        for record in cohort.exclusions:
            writer.writerow([record.stay_id, record.reason])
    _print_cohort_summary(cohort, assignment)
    print(cohort_path)
    print(exclusions_path)
    return 0


def cmd_corpus_stats(args, config: PipelineConfig) -> int:
    _, _, notes = _load_tables(config)
    vocab = _load_vocab(config)
    rows = _read_cohort_csv(args.cohort or _cohort_csv_path(config))
    corpus = _cohort_notes(rows, notes, config)
    stats = corpus_stats(corpus, vocab)
    print(f"notes={stats.note_count}")
    print(f"sentences={stats.sentence_count}")
    print(f"tokens={stats.token_count}")
    return 0


def _read_note_texts(path: str | Path, uncased: bool) -> list[str]:
    notes, _ = load_notes(_require_file(path, "notes table"), uncased=uncased)
    return [n.text for n in notes]


def cmd_distinguish(args, config: PipelineConfig) -> int:
    corpus_a = _read_note_texts(args.corpus_a, config.uncased)
    corpus_b = _read_note_texts(args.corpus_b, config.uncased)
    accuracy = distinguish_corpora(corpus_a, corpus_b, config.probe)
    print(f"accuracy={accuracy:.4f}")
    return 0


def cmd_word_corr(args, config: PipelineConfig) -> int:
    corpus_a = _read_note_texts(args.corpus_a, config.uncased)
    corpus_b = _read_note_texts(args.corpus_b, config.uncased)
    ranked = word_correlations(corpus_a, corpus_b)
    out = _out_dir(config) / "word_correlations.csv"
    with open(out, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["word", "pearson_r", "support"])
        for wc in ranked:
            writer.writerow([wc.word, repr(wc.pearson_r), wc.support])
    print(out)
    return 0


def _load_init_checkpoint(path: str | Path) -> ParameterSet:
    _require_file(path, "checkpoint", code=6)
    return load_checkpoint(path).params


def cmd_pretrain(args, config: PipelineConfig) -> int:
    _, _, notes = _load_tables(config)
    vocab = _load_vocab(config)
    rows = _read_cohort_csv(args.cohort or _cohort_csv_path(config))
    corpus_notes = sorted(_cohort_notes(rows, notes, config), key=lambda n: n.note_id)
    corpus = [
        [s.text for s in split_sentences(n.text, n.note_id)] for n in corpus_notes
    ]
    model_config = config.model.to_model_config(
        vocab_size=len(vocab), seed=derive_seed(config.seed, "model-init")
    )
    init = _load_init_checkpoint(args.init) if args.init else None
    out = _out_dir(config) / "pretrain"
    result = pretrain_loop(
        corpus, vocab, model_config, config.pretrain, config.masking,
        init=init, out_dir=out, resume=args.resume,
    )
    curve_path = out / "loss_curve.csv"
    write_loss_curve(result.curve, curve_path)
    if result.curve:
        last = result.curve[-1]
        logger.info("final losses: mlm %.4f nsp %.4f", last.mlm_loss, last.nsp_loss)
    print(result.final_checkpoint)
    print(curve_path)
    return 0


def cmd_finetune(args, config: PipelineConfig) -> int:
    _, _, notes = _load_tables(config)
    vocab = _load_vocab(config)
    rows = _read_cohort_csv(args.cohort or _cohort_csv_path(config))
    finetune_config = config.finetune
    if args.strategy:
        finetune_config = dataclasses.replace(finetune_config, strategy=args.strategy)
    if args.doc_mode:
        finetune_config = dataclasses.replace(finetune_config, doc_mode=args.doc_mode)
    if args.epochs is not None:
        finetune_config = dataclasses.replace(finetune_config, epochs=args.epochs)

    train_notes, train_labels = _split_notes(rows, notes, config, "train")
    val_notes, val_labels = _split_notes(rows, notes, config, "validation")
    if args.init:
        init = _load_init_checkpoint(args.init)
    else:
        model_config = config.model.to_model_config(
            vocab_size=len(vocab), seed=derive_seed(config.seed, "model-init")
        )
        init = init_params(model_config, heads=())
        logger.info("no --init checkpoint: fine-tuning from random initialization")
    result = finetune_loop(
        init, train_notes, train_labels, val_notes, val_labels, vocab, finetune_config
    )
    if finetune_config.strategy == "static":
        logger.info("static strategy: encoder tensors frozen, linear head trained")
    out = _out_dir(config) / "finetune"
    out.mkdir(parents=True, exist_ok=True)
    tag = f"{finetune_config.strategy}_{finetune_config.doc_mode}"
    model_path = out / f"model_{tag}.ckpt"
    save_checkpoint(
        result.model.params, model_path,
        meta={"stage": "finetune", "finetune": dataclasses.asdict(finetune_config)},
    )
    log_path = out / f"training_log_{tag}.csv"
    write_training_log(result.log, log_path)
    logger.info("best validation AUC: %.4f", result.best_val_auc)
    print(model_path)
    print(log_path)
    return 0


def _model_from_checkpoint(path: str | Path, vocab: Vocabulary) -> FinetunedModel:
    _require_file(path, "checkpoint", code=6)
    checkpoint = load_checkpoint(path)
    meta = checkpoint.meta.get("finetune")
    finetune_config = FinetuneConfig(**meta) if meta else FinetuneConfig()
    return FinetunedModel(params=checkpoint.params, vocab=vocab, config=finetune_config)


def cmd_evaluate(args, config: PipelineConfig) -> int:
    _, _, notes = _load_tables(config)
    vocab = _load_vocab(config)
    rows = _read_cohort_csv(args.cohort or _cohort_csv_path(config))
    test_notes, test_labels = _split_notes(rows, notes, config, "test")
    if not test_notes:
        raise CommandError(3, "test split has no notes")

    if args.dummy:
        constant = 1.0 if args.dummy == "all-positive" else 0.0
        probabilities = [constant] * len(test_notes)
        model_name = args.model_name or "dummy"
        setting_name = args.setting_name or args.dummy
        threshold = config.evaluate.threshold
    else:
        if not args.checkpoint:
            raise CommandError(6, "evaluate requires --checkpoint or --dummy")
        model = _model_from_checkpoint(args.checkpoint, vocab)
        probabilities = [predict(model, note) for note in test_notes]
        model_name = args.model_name or "model"
        setting_name = (
            args.setting_name
            or f"{model.config.strategy}+{model.config.doc_mode}"
        )
        threshold = model.config.decision_threshold

    report = metric_report(
        test_labels, probabilities,
        threshold=threshold,
        n_resamples=config.evaluate.n_resamples,
        alpha=config.evaluate.alpha,
        seed=derive_seed(config.seed, "bootstrap"),
    )
    rendered = render_report({(model_name, setting_name): report})
    out = _out_dir(config) / "evaluate"
    out.mkdir(parents=True, exist_ok=True)
    predictions_path = out / "predictions.csv"
    with open(predictions_path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["note_id", "stay_id", "probability", "hard_label"])
        for note, probability in zip(test_notes, probabilities):
            writer.writerow(
                [note.note_id, note.stay_id, repr(float(probability)),
                 int(probability >= threshold)]
            )
    (out / "report.txt").write_text(rendered.text, encoding="utf-8")
    (out / "report.csv").write_text(rendered.csv_text, encoding="utf-8")
    (out / "report.json").write_text(rendered.json_text, encoding="utf-8")
    sys.stdout.write(rendered.text)
    print(predictions_path)
    print(out / "report.csv")
    return 0


def cmd_visualize(args, config: PipelineConfig) -> int:
    _, _, notes = _load_tables(config)
    vocab = _load_vocab(config)
    rows = _read_cohort_csv(args.cohort or _cohort_csv_path(config))
    labels = {row.stay_id: row.label for row in rows}
    target = next((n for n in notes if n.note_id == args.note_id), None)
    if target is None or target.stay_id not in labels:
        raise CommandError(2, f"note not found in cohort: {args.note_id}")
    model = _model_from_checkpoint(args.checkpoint, vocab)
    out = _out_dir(config) / "viz"
    out.mkdir(parents=True, exist_ok=True)
    html_path = out / f"{args.note_id}.html"
    csv_path = out / f"{args.note_id}.csv" if args.csv else None
    visualize_note(
        model, target, html_path,
        true_label=labels[target.stay_id], csv_path=csv_path,
    )
    print(html_path)
    if csv_path is not None:
        print(csv_path)
    return 0


# --- parser ---


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="akipipe",
        description="ICU clinical-notes pipeline for early AKI prediction",
    )
    parser.add_argument("--version", action="version", version=f"akipipe {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--output-dir", help="override paths.output_dir")
    common.add_argument(
        "--verbose", "-v", action="store_true", help="debug logging to stderr"
    )

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--n-stays", type=int, help="override synth.n_stays")
    p.add_argument("--prevalence", type=float, help="override synth.prevalence")
    p.add_argument("--signal-tokens", help="comma-separated override of synth.signal_tokens")
    p.add_argument("--signal-rate", type=float, help="override synth.signal_rate")
    p.add_argument("--vocab-size", type=int, help="override synth.vocab_size")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser(
        "cohort", parents=[common], help="label, exclude, and split the cohort"
    )
    p.set_defaults(func=cmd_cohort)

    p = sub.add_parser(
        "corpus-stats", parents=[common], help="note/sentence/token counts"
    )
    p.add_argument("--cohort", help="cohort CSV (default: <output_dir>/cohort.csv)")
    p.set_defaults(func=cmd_corpus_stats)

    p = sub.add_parser(
        "distinguish", parents=[common],
        help="linear-probe separability of two note corpora",
    )
    p.add_argument("--corpus-a", required=True, help="notes CSV, positive corpus")
    p.add_argument("--corpus-b", required=True, help="notes CSV, negative corpus")
    p.set_defaults(func=cmd_distinguish)

    p = sub.add_parser(
        "word-corr", parents=[common],
        help="per-word Pearson correlation with corpus membership",
    )
    p.add_argument("--corpus-a", required=True, help="notes CSV, positive corpus")
    p.add_argument("--corpus-b", required=True, help="notes CSV, negative corpus")
    p.set_defaults(func=cmd_word_corr)

    p = sub.add_parser("pretrain", parents=[common], help="MLM+NSP pre-training")
    p.add_argument("--cohort", help="cohort CSV (default: <output_dir>/cohort.csv)")
    p.add_argument("--init", help="checkpoint to further pre-train from")
    p.add_argument("--resume", help="checkpoint to resume (with optimizer state)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common], help="train the AKI classifier")
    p.add_argument("--cohort", help="cohort CSV (default: <output_dir>/cohort.csv)")
    p.add_argument("--init", help="pre-trained checkpoint (omit for random init)")
    p.add_argument(
        "--strategy", choices=("sbs", "ds", "us", "weight", "static"),
        help="override finetune.strategy",
    )
    p.add_argument(
        "--doc-mode", choices=("truncating", "pooling"), help="override finetune.doc_mode"
    )
    p.add_argument("--epochs", type=int, help="override finetune.epochs")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", parents=[common], help="metrics on the test split")
    p.add_argument("--cohort", help="cohort CSV (default: <output_dir>/cohort.csv)")
    p.add_argument("--checkpoint", help="fine-tuned model checkpoint")
    p.add_argument(
        "--dummy", choices=("all-positive", "all-negative"),
        help="evaluate a constant predictor instead of a model",
    )
    p.add_argument("--model-name", help="row label in the report")
    p.add_argument("--setting-name", help="setting label in the report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser(
        "visualize", parents=[common], help="attention highlight HTML for one note"
    )
    p.add_argument("--cohort", help="cohort CSV (default: <output_dir>/cohort.csv)")
    p.add_argument("--checkpoint", required=True, help="fine-tuned model checkpoint")
    p.add_argument("--note-id", required=True, help="note to render")
    p.add_argument("--csv", action="store_true", help="also write a word,score CSV")
    p.set_defaults(func=cmd_visualize)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_pipeline_config(args.config)
        if args.seed is not None:
            # --seed wins over the config file; stage seeds re-derive.
            config.seed = args.seed
            for name in _SEEDED_SECTIONS:
                section = getattr(config, name)
                setattr(
                    config, name,
                    dataclasses.replace(section, seed=derive_seed(args.seed, name)),
                )
        if args.output_dir:
            config.paths = dataclasses.replace(config.paths, output_dir=args.output_dir)
        return args.func(args, config)
    except CommandError as exc:
        logger.error("%s", exc)
        return exc.code
    except FileNotFoundError as exc:
        logger.error("%s", exc)
        return 2
    except SCHEMA_ERRORS as exc:
        logger.error("%s", exc)
        return 2
    except NonFiniteLoss as exc:
        logger.error("non-finite loss: %s", exc)
        return 4
    except SingleClassData as exc:
        logger.error("single-class data: %s", exc)
        return 5
    except CHECKPOINT_ERRORS as exc:
        logger.error("checkpoint error: %s", exc)
        return 6


if __name__ == "__main__":
    sys.exit(main())
