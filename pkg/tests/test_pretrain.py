from __future__ import annotations

import math

import numpy as np
import pytest

from akipipe.encoder import ModelConfig, init_params
from akipipe.errors import InsufficientCorpus, NonFiniteLoss
from akipipe.optim import init_adam
from akipipe.pretrain import (
    IGNORE_INDEX,
    IS_NEXT,
    NOT_NEXT,
    MaskingConfig,
    PretrainConfig,
    apply_masking,
    build_example,
    create_nsp_pairs,
    pretrain_loop,
    pretrain_losses_and_grads,
    pretrain_step,
)
from akipipe.tokenizer import SPECIAL_TOKENS, Vocabulary, encode_pair, encode_single


@pytest.fixture(scope="module")
def vocab():
    words = tuple(f"w{i:02d}" for i in range(20)) + (".",)
    return Vocabulary(SPECIAL_TOKENS + words)


@pytest.fixture(scope="module")
def model_config(vocab):
    return ModelConfig(
        num_layers=2, num_heads=2, hidden_dim=16, ff_dim=32,
        vocab_size=len(vocab), max_position=32, dropout_rate=0.0, seed=5,
    )


def toy_corpus(n_notes=10, sentences_per_note=4, rng_seed=0):
    rng = np.random.default_rng(rng_seed)
    notes = []
    for _ in range(n_notes):
        sentences = []
        for _ in range(sentences_per_note):
            words = [f"w{int(rng.integers(20)):02d}" for _ in range(5)]
            sentences.append(" ".join(words) + ".")
        notes.append(sentences)
    return notes


class TestCreateNspPairs:
    def test_label_frequencies(self):
        notes = toy_corpus(n_notes=500, sentences_per_note=21)
        pairs = create_nsp_pairs(notes, seed=42)
        assert len(pairs) == 500 * 20
        frac = sum(p.is_next for p in pairs) / len(pairs)
        assert abs(frac - 0.5) <= 0.02

    def test_deterministic(self):
        notes = toy_corpus(n_notes=5)
        assert create_nsp_pairs(notes, seed=7) == create_nsp_pairs(notes, seed=7)

    def test_single_two_sentence_note_is_next_only(self):
        pairs = create_nsp_pairs([["a b.", "c d."]], seed=0)
        assert len(pairs) == 1
        assert pairs[0].is_next

    def test_single_note_not_next_uses_non_adjacent_sentence(self):
        sentences = ["s0.", "s1.", "s2.", "s3.", "s4."]
        pairs = create_nsp_pairs([sentences], seed=1)
        for pair in pairs:
            if not pair.is_next:
                i = sentences.index(pair.sent_a)
                j = sentences.index(pair.sent_b)
                assert abs(j - i) > 1

    def test_not_next_comes_from_other_note(self):
        notes = toy_corpus(n_notes=6, sentences_per_note=3, rng_seed=3)
        origin = {s: ni for ni, note in enumerate(notes) for s in note}
        pairs = create_nsp_pairs(notes, seed=3)
        assert any(not p.is_next for p in pairs)
        for pair in pairs:
            if not pair.is_next:
                assert origin[pair.sent_a] != origin[pair.sent_b]

    def test_insufficient_corpus(self):
        with pytest.raises(InsufficientCorpus):
            create_nsp_pairs([["only one."], ["again one."]], seed=0)


class TestApplyMasking:
    def test_full_selection_full_masking(self, vocab):
        seq = encode_single("w00 w01 w02 w03", vocab, max_seq_len=10)
        config = MaskingConfig(
            select_rate=0.999999, mask_fraction=1.0, random_fraction=0.0, keep_fraction=0.0
        )
        example = apply_masking(seq, vocab, config, rng=np.random.default_rng(0))
        for i, (token_id, m) in enumerate(zip(example.seq.ids, seq.attention_mask)):
            if m == 1 and seq.ids[i] not in vocab.special_ids:
                assert token_id == vocab.mask_id
                assert example.mlm_targets[i] == seq.ids[i]

    def test_specials_never_selected(self, vocab):
        seq = encode_pair("w00 w01.", "w02 w03.", vocab, max_seq_len=16)
        config = MaskingConfig(select_rate=0.999999)
        example = apply_masking(seq, vocab, config, rng=np.random.default_rng(1))
        for i, token_id in enumerate(seq.ids):
            if token_id in vocab.special_ids:
                assert example.mlm_targets[i] == IGNORE_INDEX

    def test_selection_rate(self, vocab):
        config = MaskingConfig(select_rate=0.15)
        rng = np.random.default_rng(11)
        text = " ".join(f"w{i % 20:02d}" for i in range(60))
        seq = encode_single(text, vocab, max_seq_len=64)
        selected = 0
        candidates = 0
        for _ in range(200):
            example = apply_masking(seq, vocab, config, rng=rng)
            selected += sum(t != IGNORE_INDEX for t in example.mlm_targets)
            candidates += sum(
                1 for i, m in zip(seq.ids, seq.attention_mask)
                if m == 1 and i not in vocab.special_ids
            )
        assert abs(selected / candidates - 0.15) <= 0.01

    def test_at_least_one_selected(self, vocab):
        seq = encode_single("w00", vocab, max_seq_len=6)
        config = MaskingConfig(select_rate=0.01)
        rng = np.random.default_rng(2)
        for _ in range(50):
            example = apply_masking(seq, vocab, config, rng=rng)
            assert sum(t != IGNORE_INDEX for t in example.mlm_targets) >= 1

    def test_masking_preserves_mask_and_segments(self, vocab):
        seq = encode_pair("w00 w01.", "w02.", vocab, max_seq_len=12)
        example = apply_masking(seq, vocab, MaskingConfig(), rng=np.random.default_rng(4))
        assert example.seq.attention_mask == seq.attention_mask
        assert example.seq.segment_ids == seq.segment_ids

    def test_mask_random_keep_split(self, vocab):
        config = MaskingConfig(select_rate=0.9)
        rng = np.random.default_rng(9)
        text = " ".join(f"w{i % 20:02d}" for i in range(40))
        seq = encode_single(text, vocab, max_seq_len=48)
        masked = kept = randomized = 0
        for _ in range(300):
            example = apply_masking(seq, vocab, config, rng=rng)
            for i, target in enumerate(example.mlm_targets):
                if target == IGNORE_INDEX:
                    continue
                if example.seq.ids[i] == vocab.mask_id:
                    masked += 1
                elif example.seq.ids[i] == target:
                    kept += 1
                else:
                    randomized += 1
        total = masked + kept + randomized
        assert abs(masked / total - 0.8) <= 0.02
        assert abs(randomized / total - 0.1) <= 0.02
        # "keep" includes random draws that landed on the original id.
        assert abs(kept / total - 0.1) <= 0.02


class TestLosses:
    def _examples(self, vocab, n=8, seed=0):
        rng = np.random.default_rng(seed)
        pairs = create_nsp_pairs(toy_corpus(n_notes=6, rng_seed=seed), seed=seed)
        return [
            build_example(p, vocab, 24, MaskingConfig(), rng=rng) for p in pairs[:n]
        ]

    def test_fresh_heads_near_uniform_baselines(self, vocab, model_config):
        params = init_params(model_config, heads=("mlm", "nsp"))
        examples = self._examples(vocab)
        mlm_loss, nsp_loss, _ = pretrain_losses_and_grads(
            params, examples, with_grads=False
        )
        assert abs(mlm_loss - math.log(len(vocab))) / math.log(len(vocab)) <= 0.05
        assert abs(nsp_loss - math.log(2.0)) / math.log(2.0) <= 0.05

    def test_non_finite_loss_raises(self, vocab, model_config):
        params = init_params(model_config, heads=("mlm", "nsp"))
        params.tensors["mlm.bias"][:] = np.nan
        with pytest.raises(NonFiniteLoss):
            pretrain_losses_and_grads(params, self._examples(vocab), with_grads=False)

    def test_gradients_match_finite_differences(self, vocab, model_config, rng):
        params = init_params(model_config, heads=("mlm", "nsp")).astype(np.float64)
        examples = self._examples(vocab, n=4)
        _, _, grads = pretrain_losses_and_grads(params, examples)

        def total_loss(p):
            mlm, nsp, _ = pretrain_losses_and_grads(p, examples, with_grads=False)
            return mlm + nsp

        names = sorted(params.tensors)
        h = 1e-5
        checked = 0
        for _ in range(40):
            name = names[int(rng.integers(len(names)))]
            flat = int(rng.integers(params.tensors[name].size))
            index = np.unravel_index(flat, params.tensors[name].shape)
            perturbed = params.copy()
            perturbed.tensors[name][index] += h
            up = total_loss(perturbed)
            perturbed.tensors[name][index] -= 2 * h
            down = total_loss(perturbed)
            fd = (up - down) / (2 * h)
            analytic = float(grads[name][index])
            # denominator floor absorbs the FD roundoff on tiny gradients
            rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-5)
            assert rel <= 1e-4, f"{name}{index}: analytic {analytic}, fd {fd}"
            checked += 1
        assert checked >= 20

    def test_training_reduces_loss(self, vocab, model_config):
        params = init_params(model_config, heads=("mlm", "nsp"))
        adam = init_adam(params)
        examples = self._examples(vocab, n=16, seed=3)
        first = pretrain_losses_and_grads(params, examples, with_grads=False)
        start = first[0] + first[1]
        for step in range(60):
            pretrain_step(params, adam, examples, learning_rate=1e-3, dropout_seed=step)
        last = pretrain_losses_and_grads(params, examples, with_grads=False)
        assert last[0] + last[1] < start


class TestPretrainLoop:
    def test_zero_epochs_returns_init_unchanged(self, vocab, model_config):
        init = init_params(model_config, heads=("mlm", "nsp"))
        result = pretrain_loop(
            toy_corpus(), vocab, model_config,
            PretrainConfig(max_seq_len=24, epochs=0), MaskingConfig(), init=init,
        )
        assert result.curve == []
        for name, tensor in init.tensors.items():
            assert np.array_equal(result.params.tensors[name], tensor)

    def test_further_pretraining_reports_copied_tensors(self, vocab, model_config):
        init = init_params(model_config, heads=())
        result = pretrain_loop(
            toy_corpus(), vocab, model_config,
            PretrainConfig(max_seq_len=24, epochs=0), MaskingConfig(), init=init,
        )
        assert result.import_report is not None
        assert sorted(result.import_report.copied) == sorted(init.tensors)
        assert "mlm.weight" in result.import_report.initialized

    def test_resume_matches_uninterrupted_run(self, vocab, model_config, tmp_path):
        corpus = toy_corpus(n_notes=6)
        config = PretrainConfig(
            max_seq_len=24, batch_size=4, epochs=2, learning_rate=1e-3,
            seed=9, checkpoint_every=3,
        )
        masking = MaskingConfig(seed=9)

        straight = pretrain_loop(
            corpus, vocab, model_config, config, masking, out_dir=tmp_path / "straight"
        )
        checkpoints = sorted((tmp_path / "straight").glob("step*.ckpt"))
        assert checkpoints, "expected periodic checkpoints"
        resumed = pretrain_loop(
            corpus, vocab, model_config, config, masking, resume=checkpoints[0]
        )
        for name in straight.params.tensors:
            assert np.array_equal(
                straight.params.tensors[name], resumed.params.tensors[name]
            ), name
        straight_tail = [r for r in straight.curve if r.step > resumed.curve[0].step - 1]
        assert [r.mlm_loss for r in resumed.curve] == [r.mlm_loss for r in straight_tail]

    def test_loop_deterministic(self, vocab, model_config):
        corpus = toy_corpus(n_notes=5)
        config = PretrainConfig(max_seq_len=24, batch_size=4, epochs=1, seed=3)
        a = pretrain_loop(corpus, vocab, model_config, config, MaskingConfig())
        b = pretrain_loop(corpus, vocab, model_config, config, MaskingConfig())
        assert [r.mlm_loss for r in a.curve] == [r.mlm_loss for r in b.curve]
        for name in a.params.tensors:
            assert np.array_equal(a.params.tensors[name], b.params.tensors[name])
