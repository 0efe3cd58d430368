"""Classifier fine-tuning under imbalance strategies and document modes.

Strategies: ``sbs`` (stratified batches + class-weighted loss), ``ds``
(majority down-sampling), ``us`` (minority up-sampling with
replacement), ``weight`` (class-weighted loss on plain batches), and
``static`` (frozen encoder, linear head on precomputed note
embeddings). Document modes: ``truncating`` encodes the first 512
pieces of a note; ``pooling`` encodes each sentence at length 32 and
takes the element-wise maximum over sentence embeddings (notes with
more than ``max_sentences`` sentences are subsampled, order
preserved). Validation AUC is computed every ``eval_every_batches``
batches and at each epoch end; the snapshot with the best value wins.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import (
    ParameterSet,
    backward,
    forward_batch,
    import_initialization,
    make_batch,
)
from .errors import SingleClassData
from .evaluate import auc
from .ingest import NoteDocument, split_sentences
from .optim import AdamState, adam_step, init_adam
from .rng import derive_seed
from .tokenizer import TokenizedSequence, Vocabulary, encode_single

logger = logging.getLogger(__name__)

STRATEGIES = ("sbs", "ds", "us", "weight", "static")
DOC_MODES = ("truncating", "pooling")
EMBEDDING_SOURCES = ("pooled", "mean")

TRUNCATING_MAX_SEQ_LEN = 512
POOLING_MAX_SEQ_LEN = 32


@dataclass(frozen=True)
class FinetuneConfig:
    strategy: str = "sbs"
    doc_mode: str = "truncating"
    batch_size: int = 4
    epochs: int = 5
    eval_every_batches: int = 500
    max_seq_len: int | None = None
    max_sentences: int = 180
    learning_rate: float = 3e-5
    decision_threshold: float = 0.5
    seed: int = 0
    sbs_minority_per_batch: int | None = None
    embedding_source: str = "pooled"

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.doc_mode not in DOC_MODES:
            raise ValueError(f"doc_mode must be one of {DOC_MODES}")
        if self.embedding_source not in EMBEDDING_SOURCES:
            raise ValueError(f"embedding_source must be one of {EMBEDDING_SOURCES}")
        if self.strategy == "sbs" and self.batch_size < 2:
            raise ValueError("sbs requires batch_size >= 2")
        if self.batch_size < 1 or self.max_sentences < 1:
            raise ValueError("batch_size and max_sentences must be >= 1")
        if self.epochs < 0 or self.eval_every_batches < 1:
            raise ValueError("epochs must be >= 0, eval_every_batches >= 1")

    @property
    def effective_max_seq_len(self) -> int:
        if self.max_seq_len is not None:
            return self.max_seq_len
        return TRUNCATING_MAX_SEQ_LEN if self.doc_mode == "truncating" else POOLING_MAX_SEQ_LEN


@dataclass
class NoteEmbedding:
    vector: np.ndarray
    provenance: str
    contributing_sentence_per_dim: np.ndarray | None = None


# --- sampling ---


def _class_indices(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(minority indices, majority indices); both classes required."""
    labels = np.asarray(labels)
    ones = np.nonzero(labels == 1)[0]
    zeros = np.nonzero(labels == 0)[0]
    if len(ones) == 0 or len(zeros) == 0:
        raise SingleClassData("both classes must be present")
    if len(ones) <= len(zeros):
        return ones, zeros
    return zeros, ones


def stratified_batches(
    labels: Sequence[int],
    batch_size: int,
    seed: int,
    minority_per_batch: int | None = None,
) -> list[np.ndarray]:
    """Index batches with a guaranteed minority presence in every batch.

    Each batch holds ``m = max(1, round(batch_size * minority
    prevalence))`` minority indices (overridable) and fills the rest
    with majority indices. The majority is consumed exactly once per
    epoch; minority indices recycle, reshuffled per pass.
    """
    labels = np.asarray(labels)
    minority, majority = _class_indices(labels)
    prevalence = len(minority) / len(labels)
    m = minority_per_batch
    if m is None:
        m = max(1, int(math.floor(batch_size * prevalence + 0.5)))
    if not 1 <= m < batch_size:
        raise ValueError(f"minority_per_batch {m} must lie in [1, batch_size)")

    rng = np.random.default_rng(seed)
    majority_order = rng.permutation(majority)
    per_batch_majority = batch_size - m

    minority_pool: list[int] = []
    batches = []
    for start in range(0, len(majority_order), per_batch_majority):
        chunk = majority_order[start : start + per_batch_majority]
        picks = []
        for _ in range(m):
            if not minority_pool:
                minority_pool = list(rng.permutation(minority))
            picks.append(minority_pool.pop())
        batches.append(np.concatenate([chunk, np.array(picks, dtype=np.int64)]))
    return batches


def downsample(labels: Sequence[int], seed: int) -> np.ndarray:
    """Drop random majority indices (without replacement) to balance."""
    minority, majority = _class_indices(np.asarray(labels))
    rng = np.random.default_rng(seed)
    kept = rng.choice(majority, size=len(minority), replace=False)
    return np.sort(np.concatenate([minority, kept]))


def upsample(labels: Sequence[int], seed: int) -> np.ndarray:
    """Repeat random minority indices (with replacement) to balance."""
    minority, majority = _class_indices(np.asarray(labels))
    rng = np.random.default_rng(seed)
    extra = rng.choice(minority, size=len(majority), replace=True)
    return np.sort(np.concatenate([majority, extra]))


def class_weights(labels: Sequence[int]) -> dict[int, float]:
    """Inverse-frequency weights ``w_c = N / (2 * n_c)``."""
    labels = np.asarray(labels)
    _class_indices(labels)  # both classes required
    n = len(labels)
    return {c: n / (2.0 * int(np.count_nonzero(labels == c))) for c in (0, 1)}


# --- note encoding / embedding ---


def _note_text(note: NoteDocument | str) -> str:
    return note.text if isinstance(note, NoteDocument) else note


def _note_id(note: NoteDocument | str) -> str:
    return note.note_id if isinstance(note, NoteDocument) else ""


def sentence_sample_indices(
    n_sentences: int, max_sentences: int, seed: int, note_id: str
) -> list[int]:
    """Order-preserving subsample of sentence indices, seeded per note."""
    if n_sentences <= max_sentences:
        return list(range(n_sentences))
    rng = np.random.default_rng(derive_seed(seed, f"sentence-sample:{note_id}"))
    picked = rng.choice(n_sentences, size=max_sentences, replace=False)
    return sorted(int(i) for i in picked)


def note_sequences(
    note: NoteDocument | str, vocab: Vocabulary, config: FinetuneConfig
) -> list[TokenizedSequence]:
    """Encoder inputs for one note under the configured document mode."""
    text = _note_text(note)
    length = config.effective_max_seq_len
    if config.doc_mode == "truncating":
        return [encode_single(text, vocab, length)]
    sentences = [s.text for s in split_sentences(text)] or [""]
    keep = sentence_sample_indices(
        len(sentences), config.max_sentences, config.seed, _note_id(note)
    )
    return [encode_single(sentences[i], vocab, length) for i in keep]


def _sequence_embeddings(out, batch, source: str) -> np.ndarray:
    if source == "pooled":
        return out.pooled
    mask = batch.attention_mask.astype(out.hidden.dtype)
    total = (out.hidden * mask[:, :, None]).sum(axis=1)
    return total / mask.sum(axis=1, keepdims=True)


def embed_note_truncating(
    params: ParameterSet,
    note: NoteDocument | str,
    vocab: Vocabulary,
    max_seq_len: int = TRUNCATING_MAX_SEQ_LEN,
    embedding_source: str = "pooled",
) -> NoteEmbedding:
    """Whole-note embedding from the first ``max_seq_len`` pieces."""
    seq = encode_single(_note_text(note), vocab, max_seq_len)
    batch = make_batch([seq], params.config)
    out, _ = forward_batch(params, batch)
    vector = _sequence_embeddings(out, batch, embedding_source)[0]
    return NoteEmbedding(vector=vector, provenance="truncating")


def embed_note_pooling(
    params: ParameterSet,
    note: NoteDocument | str,
    vocab: Vocabulary,
    config: FinetuneConfig,
) -> NoteEmbedding:
    """Element-wise maximum over per-sentence embeddings.

    Sentences are encoded one at a time so the result is bitwise
    invariant to sentence order and duplication; the provenance array
    records, per dimension, which sentence supplied the maximum.
    """
    seqs = note_sequences(note, vocab, config)
    rows = []
    for seq in seqs:
        batch = make_batch([seq], params.config)
        out, _ = forward_batch(params, batch)
        rows.append(_sequence_embeddings(out, batch, config.embedding_source)[0])
    stacked = np.stack(rows, axis=0)
    argmax = stacked.argmax(axis=0)
    return NoteEmbedding(
        vector=stacked.max(axis=0),
        provenance="pooling",
        contributing_sentence_per_dim=argmax,
    )


def embed_note(
    params: ParameterSet,
    note: NoteDocument | str,
    vocab: Vocabulary,
    config: FinetuneConfig,
) -> NoteEmbedding:
    if config.doc_mode == "truncating":
        return embed_note_truncating(
            params, note, vocab, config.effective_max_seq_len, config.embedding_source
        )
    return embed_note_pooling(params, note, vocab, config)


def _embed_notes_grouped(
    params: ParameterSet,
    note_seqs: Sequence[Sequence[TokenizedSequence]],
    source: str,
    chunk_size: int | None = None,
) -> np.ndarray:
    """Batched inference-path embeddings for many notes at once."""
    flat = [seq for group in note_seqs for seq in group]
    if chunk_size is None:
        # Attention scores are B x heads x T x T; keep chunks around a
        # few hundred MB even at 512 positions.
        length = max(1, len(flat[0]))
        chunk_size = max(8, min(256, (1 << 23) // (length * length)))
    rows = []
    for start in range(0, len(flat), chunk_size):
        chunk = flat[start : start + chunk_size]
        batch = make_batch(chunk, params.config)
        out, _ = forward_batch(params, batch)
        rows.append(_sequence_embeddings(out, batch, source))
    per_seq = np.concatenate(rows, axis=0)
    vectors = np.empty((len(note_seqs), per_seq.shape[1]), dtype=per_seq.dtype)
    cursor = 0
    for i, group in enumerate(note_seqs):
        block = per_seq[cursor : cursor + len(group)]
        vectors[i] = block.max(axis=0)
        cursor += len(group)
    return vectors


# --- heads and losses ---


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _head_probabilities(params: ParameterSet, embeddings: np.ndarray) -> np.ndarray:
    logits = embeddings @ params.tensors["classifier.weight"] + params.tensors["classifier.bias"]
    return np.exp(_log_softmax(logits))[:, 1]


def _weighted_ce_and_dlogits(
    logits: np.ndarray, labels: np.ndarray, weights: np.ndarray
) -> tuple[float, np.ndarray]:
    n = len(labels)
    logp = _log_softmax(logits)
    loss = float(-(weights * logp[np.arange(n), labels]).mean())
    d_logits = np.exp(logp)
    d_logits[np.arange(n), labels] -= 1.0
    d_logits *= (weights / n)[:, None]
    return loss, d_logits


def static_train(
    embeddings: np.ndarray,
    labels: Sequence[int],
    iterations: int = 500,
    learning_rate: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch logistic training of a linear head on frozen embeddings."""
    labels = np.asarray(labels)
    _class_indices(labels)
    X = np.asarray(embeddings, dtype=np.float64)
    n, d = X.shape
    W = np.zeros((d, 2))
    b = np.zeros(2)
    uniform = np.ones(n)
    for _ in range(iterations):
        logits = X @ W + b
        _, d_logits = _weighted_ce_and_dlogits(logits, labels, uniform)
        W -= learning_rate * (X.T @ d_logits)
        b -= learning_rate * d_logits.sum(axis=0)
    return W, b


# --- fine-tuning loop ---


@dataclass(frozen=True)
class TrainLogRow:
    step: int
    train_loss: float
    val_auc: float | None
    snapshot_taken: bool


@dataclass
class FinetunedModel:
    params: ParameterSet
    vocab: Vocabulary
    config: FinetuneConfig


@dataclass
class FinetuneResult:
    model: FinetunedModel
    log: list[TrainLogRow]
    best_val_auc: float


def write_training_log(log: Sequence[TrainLogRow], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["step", "train_loss", "val_auc", "snapshot_taken"])
        for row in log:
            writer.writerow(
                [
                    row.step,
                    repr(row.train_loss),
                    "" if row.val_auc is None else repr(row.val_auc),
                    int(row.snapshot_taken),
                ]
            )


def _epoch_batches(
    labels: np.ndarray, config: FinetuneConfig, epoch: int
) -> list[np.ndarray]:
    seed = derive_seed(config.seed, f"batches-epoch-{epoch}")
    if config.strategy == "sbs":
        return stratified_batches(
            labels, config.batch_size, seed, config.sbs_minority_per_batch
        )
    if config.strategy in ("ds", "us"):
        pool = downsample(labels, seed) if config.strategy == "ds" else upsample(labels, seed)
        order = np.random.default_rng(
            derive_seed(config.seed, f"order-epoch-{epoch}")
        ).permutation(pool)
    else:  # weight, static
        order = np.random.default_rng(seed).permutation(len(labels))
    return [
        order[i : i + config.batch_size] for i in range(0, len(order), config.batch_size)
    ]


def _strategy_weights(labels: np.ndarray, config: FinetuneConfig) -> dict[int, float]:
    if config.strategy in ("sbs", "weight"):
        return class_weights(labels)
    return {0: 1.0, 1: 1.0}


def _train_step_full(
    params: ParameterSet,
    adam: AdamState,
    note_seqs: Sequence[Sequence[TokenizedSequence]],
    labels: np.ndarray,
    weights: np.ndarray,
    config: FinetuneConfig,
    dropout_seed: int,
) -> float:
    """One end-to-end update: encoder + pooling + classifier head."""
    t = params.tensors
    flat = [seq for group in note_seqs for seq in group]
    group_sizes = [len(group) for group in note_seqs]
    batch = make_batch(flat, params.config)
    out, trace = forward_batch(
        params, batch, train_mode=True, dropout_seed=dropout_seed, keep_trace=True
    )
    per_seq = _sequence_embeddings(out, batch, config.embedding_source)

    n_notes = len(note_seqs)
    H = per_seq.shape[1]
    note_emb = np.empty((n_notes, H), dtype=per_seq.dtype)
    argmaxes = []
    cursor = 0
    for i, size in enumerate(group_sizes):
        block = per_seq[cursor : cursor + size]
        note_emb[i] = block.max(axis=0)
        argmaxes.append(cursor + block.argmax(axis=0))
        cursor += size

    logits = note_emb @ t["classifier.weight"] + t["classifier.bias"]
    loss, d_logits = _weighted_ce_and_dlogits(logits, labels, weights)
    d_note = d_logits @ t["classifier.weight"].T

    d_seq = np.zeros_like(per_seq)
    dims = np.arange(H)
    for i in range(n_notes):
        np.add.at(d_seq, (argmaxes[i], dims), d_note[i])

    if config.embedding_source == "pooled":
        grads = backward(params, trace, d_hidden=None, d_pooled=d_seq)
    else:
        mask = batch.attention_mask.astype(per_seq.dtype)
        scale = (mask / mask.sum(axis=1, keepdims=True))[:, :, None]
        grads = backward(params, trace, d_hidden=d_seq[:, None, :] * scale, d_pooled=None)
    grads["classifier.weight"] += note_emb.T @ d_logits
    grads["classifier.bias"] += d_logits.sum(axis=0)
    adam_step(params, grads, adam, config.learning_rate)
    return loss


def _train_step_head_only(
    params: ParameterSet,
    adam: AdamState,
    embeddings: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray,
    config: FinetuneConfig,
) -> float:
    t = params.tensors
    logits = embeddings @ t["classifier.weight"] + t["classifier.bias"]
    loss, d_logits = _weighted_ce_and_dlogits(logits, labels, weights)
    grads = {
        "classifier.weight": (embeddings.T @ d_logits).astype(t["classifier.weight"].dtype),
        "classifier.bias": d_logits.sum(axis=0).astype(t["classifier.bias"].dtype),
    }
    adam_step(params, grads, adam, config.learning_rate)
    return loss


def finetune_loop(
    init: ParameterSet,
    train_notes: Sequence[NoteDocument],
    train_labels: Sequence[int],
    val_notes: Sequence[NoteDocument],
    val_labels: Sequence[int],
    vocab: Vocabulary,
    config: FinetuneConfig,
) -> FinetuneResult:
    """Train the AKI classifier and return the best-validation snapshot.

    The classifier head is freshly initialized on top of ``init``
    (whose encoder tensors are copied). Under ``static`` the encoder is
    never touched: note embeddings are precomputed once and only the
    head trains. Fully reproducible given the config seed.
    """
    train_labels = np.asarray(train_labels)
    val_labels = np.asarray(val_labels)
    if len(train_notes) == 0 or len(val_notes) == 0:
        raise ValueError("train and validation splits must be non-empty")
    _class_indices(train_labels)
    _class_indices(val_labels)

    params, _ = import_initialization(
        init.config, init, heads=("classifier",),
        seed=derive_seed(config.seed, "classifier-init"),
    )
    weights_by_class = _strategy_weights(train_labels, config)
    weight_vector = np.array([weights_by_class[int(y)] for y in train_labels])

    train_seqs = [note_sequences(n, vocab, config) for n in train_notes]
    val_seqs = [note_sequences(n, vocab, config) for n in val_notes]

    static = config.strategy == "static"
    if static:
        frozen_train = _embed_notes_grouped(params, train_seqs, config.embedding_source)
        frozen_val = _embed_notes_grouped(params, val_seqs, config.embedding_source)

    adam = init_adam(params)
    best_params = params.copy()
    best_val = float("-inf")
    took_snapshot = False
    log: list[TrainLogRow] = []
    step = 0

    def validation_auc() -> float:
        if static:
            probs = _head_probabilities(params, frozen_val)
        else:
            emb = _embed_notes_grouped(params, val_seqs, config.embedding_source)
            probs = _head_probabilities(params, emb)
        return auc(val_labels, probs)

    for epoch in range(config.epochs):
        batches = _epoch_batches(train_labels, config, epoch)
        for bi, batch_idx in enumerate(batches):
            step += 1
            y = train_labels[batch_idx]
            w = weight_vector[batch_idx]
            if static:
                loss = _train_step_head_only(
                    params, adam, frozen_train[batch_idx], y, w, config
                )
            else:
                loss = _train_step_full(
                    params, adam, [train_seqs[i] for i in batch_idx], y, w, config,
                    dropout_seed=derive_seed(config.seed, f"dropout-step-{step}"),
                )
            val: float | None = None
            snapshot = False
            if step % config.eval_every_batches == 0 or bi == len(batches) - 1:
                val = validation_auc()
                if val > best_val:
                    best_val = val
                    best_params = params.copy()
                    took_snapshot = True
                    snapshot = True
                logger.info(
                    "epoch %d step %d: loss %.4f val auc %.4f%s",
                    epoch, step, loss, val, " *" if snapshot else "",
                )
            log.append(TrainLogRow(step, loss, val, snapshot))

    if not took_snapshot:
        best_params = params
        best_val = float("nan")
    model = FinetunedModel(params=best_params, vocab=vocab, config=config)
    return FinetuneResult(model=model, log=log, best_val_auc=best_val)


def predict(model: FinetunedModel, note: NoteDocument | str) -> float:
    """AKI probability for one note, deterministic given the model."""
    embedding = embed_note(model.params, note, model.vocab, model.config)
    return float(_head_probabilities(model.params, embedding.vector[None, :])[0])
