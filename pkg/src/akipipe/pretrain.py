"""Masked-language-model and next-sentence-prediction pre-training.

Training examples pair adjacent sentences (half the time swapping in a
sentence from another note), mask 15% of non-special tokens with the
80/10/10 mask/random/keep split, and optimize the summed MLM + NSP
cross-entropy with a moment-based (Adam) update. The loop is
deterministic given its seeds, checkpoints periodically with optimizer
state, and can resume from any checkpoint with an identical
continuation.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import (
    ImportReport,
    ModelConfig,
    ParameterSet,
    backward,
    forward_batch,
    import_initialization,
    init_params,
    load_checkpoint,
    make_batch,
    save_checkpoint,
)
from .errors import InsufficientCorpus, NonFiniteLoss
from .optim import AdamState, adam_step, init_adam
from .rng import derive_seed
from .tokenizer import TokenizedSequence, Vocabulary, encode_pair

logger = logging.getLogger(__name__)

IGNORE_INDEX = -1
IS_NEXT = 1
NOT_NEXT = 0

PRETRAIN_HEADS = ("mlm", "nsp")


@dataclass(frozen=True)
class MaskingConfig:
    select_rate: float = 0.15
    mask_fraction: float = 0.8
    random_fraction: float = 0.1
    keep_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.select_rate < 1.0:
            raise ValueError("select_rate must lie in (0, 1)")
        total = self.mask_fraction + self.random_fraction + self.keep_fraction
        if abs(total - 1.0) > 1e-9:
            raise ValueError("mask/random/keep fractions must sum to 1")


@dataclass(frozen=True)
class SentencePair:
    sent_a: str
    sent_b: str
    is_next: bool


@dataclass(frozen=True)
class PretrainExample:
    seq: TokenizedSequence
    mlm_targets: tuple[int, ...]  # original id at selected positions, else IGNORE_INDEX
    nsp_label: int                # IS_NEXT or NOT_NEXT


@dataclass(frozen=True)
class PretrainConfig:
    max_seq_len: int = 128
    batch_size: int = 8
    epochs: int = 1
    learning_rate: float = 3e-5
    seed: int = 0
    checkpoint_every: int = 200

    def __post_init__(self) -> None:
        if min(self.max_seq_len, self.batch_size, self.checkpoint_every) < 1:
            raise ValueError("max_seq_len, batch_size, checkpoint_every must be >= 1")
        if self.epochs < 0 or self.learning_rate <= 0:
            raise ValueError("epochs must be >= 0 and learning_rate > 0")


def create_nsp_pairs(
    notes_sentences: Sequence[Sequence[str]], seed: int
) -> list[SentencePair]:
    """Build sentence pairs for the next-sentence objective.

    For every adjacent pair inside a note the true successor is kept
    with probability 0.5; otherwise a uniformly random sentence from a
    different note replaces it. With a single-note corpus the
    replacement falls back to a non-adjacent sentence of the same note
    and, failing that, keeps the true successor.
    """
    lengths = [len(s) for s in notes_sentences]
    total = sum(lengths)
    starts = np.cumsum([0] + lengths[:-1]) if lengths else np.array([], dtype=int)
    flat: list[str] = [s for note in notes_sentences for s in note]
    if not any(n >= 2 for n in lengths):
        raise InsufficientCorpus("no note has two consecutive sentences")

    rng = np.random.default_rng(seed)
    pairs: list[SentencePair] = []
    for ni, sentences in enumerate(notes_sentences):
        own = lengths[ni]
        for i in range(own - 1):
            if rng.random() < 0.5:
                pairs.append(SentencePair(sentences[i], sentences[i + 1], True))
                continue
            if total > own:
                r = int(rng.integers(total - own))
                if r >= starts[ni]:
                    r += own
                pairs.append(SentencePair(sentences[i], flat[r], False))
                continue
            candidates = [j for j in range(own) if abs(j - i) > 1]
            if candidates:
                j = candidates[int(rng.integers(len(candidates)))]
                pairs.append(SentencePair(sentences[i], sentences[j], False))
            else:
                pairs.append(SentencePair(sentences[i], sentences[i + 1], True))
    return pairs


def apply_masking(
    seq: TokenizedSequence,
    vocab: Vocabulary,
    config: MaskingConfig,
    rng: np.random.Generator | None = None,
) -> PretrainExample:
    """Mask tokens for the MLM objective; specials are never selected.

    Each non-special position is selected independently at
    ``select_rate`` (at least one forced). A selected position becomes
    [MASK], a random non-special id, or stays unchanged per the
    configured fractions; its original id is recorded as the target.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    special_ids = vocab.special_ids
    candidates = [
        i
        for i, (token_id, m) in enumerate(zip(seq.ids, seq.attention_mask))
        if m == 1 and token_id not in special_ids
    ]
    if not candidates:
        raise ValueError("sequence has no maskable (non-special) token")
    picks = rng.random(len(candidates)) < config.select_rate
    selected = [c for c, hit in zip(candidates, picks) if hit]
    if not selected:
        selected = [candidates[int(rng.integers(len(candidates)))]]

    non_special_ids = [i for i in range(len(vocab)) if i not in special_ids]
    ids = list(seq.ids)
    tokens = list(seq.tokens)
    targets = [IGNORE_INDEX] * len(seq)
    mask_cut = config.mask_fraction
    random_cut = config.mask_fraction + config.random_fraction
    for pos in selected:
        targets[pos] = ids[pos]
        roll = rng.random()
        if roll < mask_cut:
            ids[pos] = vocab.mask_id
            tokens[pos] = vocab.token_of(vocab.mask_id)
        elif roll < random_cut:
            new_id = non_special_ids[int(rng.integers(len(non_special_ids)))]
            ids[pos] = new_id
            tokens[pos] = vocab.token_of(new_id)
        # else: keep the original token
    masked = TokenizedSequence(
        ids=tuple(ids),
        tokens=tuple(tokens),
        attention_mask=seq.attention_mask,
        segment_ids=seq.segment_ids,
    )
    return PretrainExample(seq=masked, mlm_targets=tuple(targets), nsp_label=IS_NEXT)


def build_example(
    pair: SentencePair,
    vocab: Vocabulary,
    max_seq_len: int,
    masking: MaskingConfig,
    rng: np.random.Generator | None = None,
) -> PretrainExample:
    seq = encode_pair(pair.sent_a, pair.sent_b, vocab, max_seq_len)
    example = apply_masking(seq, vocab, masking, rng=rng)
    return PretrainExample(
        seq=example.seq,
        mlm_targets=example.mlm_targets,
        nsp_label=IS_NEXT if pair.is_next else NOT_NEXT,
    )


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def pretrain_losses_and_grads(
    params: ParameterSet,
    examples: Sequence[PretrainExample],
    train_mode: bool = False,
    dropout_seed: int = 0,
    with_grads: bool = True,
) -> tuple[float, float, dict[str, np.ndarray] | None]:
    """Summed-objective losses and (optionally) exact gradients.

    MLM loss is the mean cross-entropy over selected positions; NSP
    loss the mean two-class cross-entropy on the pooled output.
    """
    if not examples:
        raise ValueError("empty batch")
    t = params.tensors
    batch = make_batch([e.seq for e in examples], params.config)
    out, trace = forward_batch(
        params, batch, train_mode=train_mode, dropout_seed=dropout_seed,
        keep_trace=with_grads,
    )

    targets = np.full(batch.ids.shape, IGNORE_INDEX, dtype=np.int64)
    for b, example in enumerate(examples):
        targets[b, : len(example.mlm_targets)] = example.mlm_targets
    sel_b, sel_t = np.nonzero(targets != IGNORE_INDEX)
    sel_ids = targets[sel_b, sel_t]
    hidden_sel = out.hidden[sel_b, sel_t]
    mlm_logits = hidden_sel @ t["mlm.weight"] + t["mlm.bias"]
    mlm_logp = _log_softmax(mlm_logits)
    n_sel = len(sel_ids)
    mlm_loss = float(-mlm_logp[np.arange(n_sel), sel_ids].mean())

    nsp_labels = np.array([e.nsp_label for e in examples], dtype=np.int64)
    nsp_logits = out.pooled @ t["nsp.weight"] + t["nsp.bias"]
    nsp_logp = _log_softmax(nsp_logits)
    n = len(examples)
    nsp_loss = float(-nsp_logp[np.arange(n), nsp_labels].mean())

    if not (np.isfinite(mlm_loss) and np.isfinite(nsp_loss)):
        raise NonFiniteLoss(f"mlm={mlm_loss}, nsp={nsp_loss}")
    if not with_grads:
        return mlm_loss, nsp_loss, None

    d_mlm_logits = np.exp(mlm_logp)
    d_mlm_logits[np.arange(n_sel), sel_ids] -= 1.0
    d_mlm_logits /= n_sel
    d_hidden = np.zeros_like(out.hidden)
    d_hidden[sel_b, sel_t] = d_mlm_logits @ t["mlm.weight"].T

    d_nsp_logits = np.exp(nsp_logp)
    d_nsp_logits[np.arange(n), nsp_labels] -= 1.0
    d_nsp_logits /= n
    d_pooled = d_nsp_logits @ t["nsp.weight"].T

    grads = backward(params, trace, d_hidden, d_pooled)
    grads["mlm.weight"] += hidden_sel.T @ d_mlm_logits
    grads["mlm.bias"] += d_mlm_logits.sum(axis=0)
    grads["nsp.weight"] += out.pooled.T @ d_nsp_logits
    grads["nsp.bias"] += d_nsp_logits.sum(axis=0)
    return mlm_loss, nsp_loss, grads


def pretrain_step(
    params: ParameterSet,
    opt_state: AdamState,
    examples: Sequence[PretrainExample],
    learning_rate: float,
    train_mode: bool = True,
    dropout_seed: int = 0,
) -> tuple[float, float]:
    """One optimizer update on a batch; params update in place."""
    mlm_loss, nsp_loss, grads = pretrain_losses_and_grads(
        params, examples, train_mode=train_mode, dropout_seed=dropout_seed
    )
    adam_step(params, grads, opt_state, learning_rate)
    return mlm_loss, nsp_loss


@dataclass(frozen=True)
class LossRow:
    step: int
    mlm_loss: float
    nsp_loss: float

    @property
    def total(self) -> float:
        return self.mlm_loss + self.nsp_loss


@dataclass
class PretrainResult:
    params: ParameterSet
    curve: list[LossRow]
    import_report: ImportReport | None
    final_checkpoint: Path | None


def write_loss_curve(curve: Sequence[LossRow], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["step", "mlm_loss", "nsp_loss", "total"])
        for row in curve:
            writer.writerow([row.step, repr(row.mlm_loss), repr(row.nsp_loss), repr(row.total)])


def _adam_to_tensors(state: AdamState) -> dict[str, np.ndarray]:
    tensors = {}
    for name, m in state.m.items():
        tensors[f"adam.m.{name}"] = m
    for name, v in state.v.items():
        tensors[f"adam.v.{name}"] = v
    return tensors


def _adam_from_tensors(
    params: ParameterSet, extra: dict[str, np.ndarray], step: int
) -> AdamState:
    state = init_adam(params)
    state.step = step
    for name in params.tensors:
        if f"adam.m.{name}" in extra:
            state.m[name] = extra[f"adam.m.{name}"]
            state.v[name] = extra[f"adam.v.{name}"]
    return state


def pretrain_loop(
    notes_sentences: Sequence[Sequence[str]],
    vocab: Vocabulary,
    model_config: ModelConfig,
    config: PretrainConfig,
    masking: MaskingConfig,
    init: ParameterSet | None = None,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    max_steps: int | None = None,
) -> PretrainResult:
    """Run MLM+NSP pre-training over the note corpus.

    ``init`` continues from existing parameters (further pre-training;
    missing task heads are initialized and reported); ``resume``
    restores parameters, optimizer moments, and position from a
    checkpoint written by this loop, reproducing the uninterrupted run
    bit for bit. ``max_steps`` caps the total step count across epochs.
    """
    import_report: ImportReport | None = None
    start_epoch = 0
    start_batch = 0
    step = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        params = ckpt.params
        adam = _adam_from_tensors(params, ckpt.extra_tensors, ckpt.meta["adam_step"])
        step = ckpt.meta["step"]
        start_epoch = ckpt.meta["epoch"]
        start_batch = ckpt.meta["batch_in_epoch"] + 1
        logger.info("resuming at step %d (epoch %d)", step, start_epoch)
    elif init is not None:
        params, import_report = import_initialization(
            model_config, init, heads=PRETRAIN_HEADS,
            seed=derive_seed(config.seed, "import-heads"),
        )
        adam = init_adam(params)
        logger.info(
            "further pre-training: %d tensors copied, %d initialized",
            len(import_report.copied), len(import_report.initialized),
        )
    else:
        params = init_params(model_config, heads=PRETRAIN_HEADS)
        adam = init_adam(params)

    pairs = create_nsp_pairs(notes_sentences, derive_seed(config.seed, "nsp-pairs"))
    encoded = [encode_pair(p.sent_a, p.sent_b, vocab, config.max_seq_len) for p in pairs]

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    curve: list[LossRow] = []
    done = max_steps is not None and step >= max_steps
    for epoch in range(start_epoch, config.epochs):
        if done:
            break
        mask_rng = np.random.default_rng(derive_seed(config.seed, f"mask-epoch-{epoch}"))
        examples = []
        for pair, seq in zip(pairs, encoded):
            masked = apply_masking(seq, vocab, masking, rng=mask_rng)
            examples.append(
                PretrainExample(
                    seq=masked.seq,
                    mlm_targets=masked.mlm_targets,
                    nsp_label=IS_NEXT if pair.is_next else NOT_NEXT,
                )
            )
        order = np.random.default_rng(
            derive_seed(config.seed, f"order-epoch-{epoch}")
        ).permutation(len(examples))
        batches = [
            order[i : i + config.batch_size]
            for i in range(0, len(order), config.batch_size)
        ]
        first_batch = start_batch if epoch == start_epoch else 0
        for bi in range(first_batch, len(batches)):
            if max_steps is not None and step >= max_steps:
                done = True
                break
            batch_examples = [examples[i] for i in batches[bi]]
            step += 1
            mlm_loss, nsp_loss = pretrain_step(
                params, adam, batch_examples, config.learning_rate,
                dropout_seed=derive_seed(config.seed, f"dropout-step-{step}"),
            )
            curve.append(LossRow(step, mlm_loss, nsp_loss))
            if step % 50 == 0:
                logger.info(
                    "step %d: mlm %.4f nsp %.4f", step, mlm_loss, nsp_loss
                )
            if out_path is not None and step % config.checkpoint_every == 0:
                save_checkpoint(
                    params,
                    out_path / f"step{step:06d}.ckpt",
                    extra_tensors=_adam_to_tensors(adam),
                    meta={
                        "stage": "pretrain",
                        "step": step,
                        "epoch": epoch,
                        "batch_in_epoch": bi,
                        "adam_step": adam.step,
                    },
                )

    final_path = None
    if out_path is not None:
        final_path = out_path / "final.ckpt"
        save_checkpoint(
            params, final_path,
            meta={"stage": "pretrain", "step": step, "epochs": config.epochs},
        )
    return PretrainResult(
        params=params, curve=curve, import_report=import_report,
        final_checkpoint=final_path,
    )
