"""Per-token salience from attention maps, rendered as HTML highlights.

Salience of a token is the head-averaged attention that the final
layer's [CLS] position pays to it. In pooling mode each sentence is
scored the same way and scaled by its contribution fraction: the share
of note-embedding dimensions whose maximum it supplied. WordPiece
scores merge back to word scores by maximum, and the word scores are
min-max normalized to [0, 1] before rendering.
"""

from __future__ import annotations

import html
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import ParameterSet, forward
from .errors import IoError
from .finetune import (
    FinetunedModel,
    embed_note_pooling,
    note_sequences,
    predict,
    sentence_sample_indices,
)
from .ingest import NoteDocument, split_sentences
from .tokenizer import Vocabulary, basic_tokenize, encode_single, wordpiece


@dataclass
class SalienceMap:
    tokens: list[str]
    scores: list[float]


@dataclass
class VizMetadata:
    note_id: str
    probability: float
    true_label: int | None = None


def _normalize(scores: list[float]) -> list[float]:
    if not scores:
        return []
    low = min(scores)
    high = max(scores)
    if high > low:
        return [(s - low) / (high - low) for s in scores]
    if high > 0:
        return [1.0] * len(scores)
    return [0.0] * len(scores)


def _word_scores(
    params: ParameterSet,
    vocab: Vocabulary,
    text: str,
    max_seq_len: int,
    layer: int,
    head: int | None,
) -> tuple[list[str], list[float]]:
    """Raw [CLS]-attention score per word that survives truncation."""
    words = basic_tokenize(text, uncased=vocab.uncased)
    word_of_piece: list[int] = []
    for wi, word in enumerate(words):
        word_of_piece.extend([wi] * len(wordpiece(word, vocab)))
    word_of_piece = word_of_piece[: max_seq_len - 2]
    if not word_of_piece:
        return [], []

    seq = encode_single(text, vocab, max_seq_len)
    out = forward(params, [seq])[0]
    attn = out.attentions[layer]
    cls_row = attn.mean(axis=0)[0] if head is None else attn[head][0]

    n_words = word_of_piece[-1] + 1
    scores = [0.0] * n_words
    for offset, wi in enumerate(word_of_piece):
        scores[wi] = max(scores[wi], float(cls_row[1 + offset]))
    return words[:n_words], scores


def attention_salience(
    model: FinetunedModel,
    note: NoteDocument | str,
    doc_mode: str | None = None,
    layer: int = -1,
    head: int | None = None,
) -> SalienceMap:
    """Word-level salience for one note under the model's document mode."""
    config = model.config
    mode = doc_mode or config.doc_mode
    text = note.text if isinstance(note, NoteDocument) else note
    note_id = note.note_id if isinstance(note, NoteDocument) else ""

    if mode == "truncating":
        words, scores = _word_scores(
            model.params, model.vocab, text, config.effective_max_seq_len, layer, head
        )
        return SalienceMap(tokens=words, scores=_normalize(scores))

    sentences = [s.text for s in split_sentences(text)] or [""]
    keep = sentence_sample_indices(
        len(sentences), config.max_sentences, config.seed, note_id
    )
    embedding = embed_note_pooling(model.params, note, model.vocab, config)
    contributions = embedding.contributing_sentence_per_dim
    hidden = len(embedding.vector)

    all_words: list[str] = []
    all_scores: list[float] = []
    for position, sentence_index in enumerate(keep):
        fraction = float(np.count_nonzero(contributions == position)) / hidden
        words, scores = _word_scores(
            model.params, model.vocab, sentences[sentence_index],
            config.effective_max_seq_len, layer, head,
        )
        all_words.extend(words)
        all_scores.extend(s * fraction for s in scores)
    return SalienceMap(tokens=all_words, scores=_normalize(all_scores))


_PAGE = """<!DOCTYPE html>
<html>
<head>
<meta charset="utf-8">
<title>note {note_id}</title>
</head>
<body style="font-family: sans-serif; max-width: 60em; margin: 2em auto; line-height: 1.8;">
<h2>note {note_id}</h2>
<p>predicted probability: {probability} &middot; true label: {label}</p>
<p>{body}</p>
</body>
</html>
"""


def render_html(salience: SalienceMap, metadata: VizMetadata, path: str | Path) -> None:
    """Write a self-contained highlight page (inline styles only).

    Each word sits in a span whose background opacity equals its
    salience score; output bytes are deterministic for equal inputs.
    """
    spans = []
    for word, score in zip(salience.tokens, salience.scores):
        spans.append(
            f'<span style="background-color: rgba(255, 140, 0, {score:.4f})">'
            f"{html.escape(word)}</span>"
        )
    label = "?" if metadata.true_label is None else str(metadata.true_label)
    page = _PAGE.format(
        note_id=html.escape(metadata.note_id),
        probability=f"{metadata.probability:.4f}",
        label=html.escape(label),
        body=" ".join(spans),
    )
    try:
        Path(path).write_text(page, encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def salience_csv(salience: SalienceMap) -> str:
    lines = ["word,score"]
    for word, score in zip(salience.tokens, salience.scores):
        escaped = '"' + word.replace('"', '""') + '"' if "," in word or '"' in word else word
        lines.append(f"{escaped},{score:.6f}")
    return "\n".join(lines) + "\n"


def visualize_note(
    model: FinetunedModel,
    note: NoteDocument,
    out_path: str | Path,
    true_label: int | None = None,
    csv_path: str | Path | None = None,
) -> SalienceMap:
    """Full pipeline for one note: salience, prediction, HTML (and CSV)."""
    salience = attention_salience(model, note)
    probability = predict(model, note)
    render_html(
        salience,
        VizMetadata(note_id=note.note_id, probability=probability, true_label=true_label),
        out_path,
    )
    if csv_path is not None:
        try:
            Path(csv_path).write_text(salience_csv(salience), encoding="utf-8")
        except OSError as exc:
            raise IoError(f"cannot write {csv_path}: {exc}") from exc
    return salience
