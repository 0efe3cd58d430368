"""Acceptance criteria for the whole pipeline.

Each test prints one pass/fail line (run with ``pytest -s`` to see them
all); tolerances are fixed here and nowhere else.
"""

from __future__ import annotations

import itertools
import math
import time
from pathlib import Path

import numpy as np
import pytest

from akipipe.cli import main as cli_main
from akipipe.cohort import (
    CohortConfig,
    ProbeConfig,
    distinguish_corpora,
    label_stay,
    select_cohort,
    split_dataset,
)
from akipipe.encoder import ModelConfig, init_params
from akipipe.evaluate import auc, metric_report, metrics, confusion, render_report
from akipipe.finetune import (
    FinetuneConfig,
    embed_note_pooling,
    finetune_loop,
    predict,
    stratified_batches,
)
from akipipe.ingest import (
    CreatinineMeasurement,
    NoteDocument,
    SyntheticSpec,
    generate_synthetic_corpus,
    split_sentences,
)
from akipipe.optim import init_adam
from akipipe.pretrain import (
    MaskingConfig,
    PretrainConfig,
    build_example,
    create_nsp_pairs,
    pretrain_loop,
    pretrain_losses_and_grads,
    pretrain_step,
)
from akipipe.tokenizer import Vocabulary, build_test_vocab

COHORT_CONFIG = CohortConfig()


def report(criterion: str, ok: bool, detail: str) -> None:
    print(f"[{criterion}] {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"{criterion}: {detail}"


def series(points):
    return [CreatinineMeasurement("s", t, v) for t, v in points]


def brute_force_conditions(points, config=COHORT_CONFIG):
    window = sorted((t, v) for t, v in points if t <= config.detection_window_h)
    baseline_values = [v for t, v in window if 0 <= t <= config.baseline_window_h]
    baseline = min(baseline_values)
    cond1 = any(
        t2 > t1 and t2 - t1 <= config.cond1_window_h and v2 - v1 >= config.cond1_delta_mgdl
        for (t1, v1), (t2, v2) in itertools.product(window, window)
    )
    cond2 = any(v >= config.cond2_ratio * baseline for _, v in window)
    return cond1, cond2


def test_c1_kdigo_labeler_matches_brute_force():
    rng = np.random.default_rng(101)
    start = time.monotonic()
    checked = 0
    while checked < 10_000:
        n = int(rng.integers(1, 7))
        times = np.round(rng.uniform(0, 80, size=n), 1).tolist()
        values = (rng.integers(1, 80, size=n) * 0.05).tolist()
        points = list(zip(times, values))
        if not any(0 <= t <= 24 for t, _ in points):
            continue
        label = label_stay(series(points), COHORT_CONFIG)
        cond1, cond2 = brute_force_conditions(points)
        assert (label.met_cond1, label.met_cond2) == (cond1, cond2), points
        assert label.is_aki == (cond1 or cond2)
        checked += 1
    elapsed = time.monotonic() - start
    report(
        "C1", elapsed < 10.0,
        f"labeler agreed with brute force on {checked} random series in {elapsed:.1f}s",
    )


def test_c2_threshold_conventions_are_inclusive():
    via_cond1 = label_stay(series([(1, 1.0), (30, 1.3)]), COHORT_CONFIG)
    via_cond2 = label_stay(series([(1, 1.0), (40, 1.5)]), COHORT_CONFIG)
    negative = label_stay(series([(1, 1.0), (60, 1.2)]), COHORT_CONFIG)
    ok = (
        via_cond1.is_aki and via_cond1.met_cond1
        and via_cond2.is_aki and via_cond2.met_cond2
        and not negative.is_aki
    )
    report("C2", ok, "0.3 mg/dL and 1.5x boundaries label AKI; 1.2 stays non-AKI")


def _gradient_check_setup():
    words = tuple(f"w{i:02d}" for i in range(40)) + (".",)
    vocab = Vocabulary(("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]") + words)
    config = ModelConfig(
        num_layers=2, num_heads=2, hidden_dim=16, ff_dim=32,
        vocab_size=len(vocab), max_position=16, dropout_rate=0.0, seed=17,
    )
    params = init_params(config, heads=("mlm", "nsp"), dtype=np.float64)
    rng = np.random.default_rng(3)
    notes = []
    for _ in range(4):
        sentences = []
        for _ in range(3):
            picks = [f"w{int(rng.integers(40)):02d}" for _ in range(4)]
            sentences.append(" ".join(picks) + ".")
        notes.append(sentences)
    pairs = create_nsp_pairs(notes, seed=5)[:4]
    mask_rng = np.random.default_rng(7)
    examples = [
        build_example(p, vocab, 16, MaskingConfig(seed=7), rng=mask_rng) for p in pairs
    ]
    return params, examples


def test_c3_gradient_check_200_parameters():
    start = time.monotonic()
    params, examples = _gradient_check_setup()
    _, _, grads = pretrain_losses_and_grads(params, examples)

    def total_loss(p):
        mlm, nsp, _ = pretrain_losses_and_grads(p, examples, with_grads=False)
        return mlm + nsp

    rng = np.random.default_rng(23)
    names = sorted(params.tensors)
    h = 1e-5
    worst = 0.0
    for _ in range(200):
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
        # Denominator floor 1e-5: the central difference itself carries
        # ~1e-10 of float64 roundoff (eps * |loss| / 2h), so below this
        # scale only absolute agreement is measurable.
        rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-5)
        assert rel <= 1e-4, f"{name}{index}: analytic {analytic} vs fd {fd} (rel {rel:.2e})"
        worst = max(worst, rel)
    elapsed = time.monotonic() - start
    report(
        "C3", elapsed < 60.0,
        f"200 sampled parameters, max relative error {worst:.2e} in {elapsed:.1f}s",
    )


def test_c4_pretraining_loss_baselines_and_decrease():
    start = time.monotonic()
    rng = np.random.default_rng(41)
    notes = []
    for _ in range(25):
        sentences = []
        for _ in range(3):
            picks = [f"w{int(rng.integers(30)):02d}" for _ in range(5)]
            sentences.append(" ".join(picks) + ".")
        notes.append(sentences)
    vocab = build_test_vocab(
        [" ".join(note) for note in notes], target_size=40
    )
    config = ModelConfig(
        num_layers=2, num_heads=2, hidden_dim=32, ff_dim=64,
        vocab_size=len(vocab), max_position=32, dropout_rate=0.0, seed=2,
    )
    params = init_params(config, heads=("mlm", "nsp"))

    pairs = create_nsp_pairs(notes, seed=11)[:50]
    mask_rng = np.random.default_rng(13)
    examples = [
        build_example(p, vocab, 32, MaskingConfig(seed=13), rng=mask_rng) for p in pairs
    ]
    mlm0, nsp0, _ = pretrain_losses_and_grads(params, examples[:10], with_grads=False)
    ln_v = math.log(len(vocab))
    ln_2 = math.log(2.0)
    baseline_ok = abs(mlm0 - ln_v) / ln_v <= 0.05 and abs(nsp0 - ln_2) / ln_2 <= 0.05

    start_total = None
    adam = init_adam(params)
    batch_size = 10
    for step in range(200):
        batch = [examples[(step * batch_size + i) % len(examples)] for i in range(batch_size)]
        mlm, nsp = pretrain_step(params, adam, batch, learning_rate=1e-3, dropout_seed=step)
        if step == 0:
            start_total = mlm + nsp
    mlm_end, nsp_end, _ = pretrain_losses_and_grads(params, examples, with_grads=False)
    decreased = mlm_end + nsp_end < start_total
    elapsed = time.monotonic() - start
    report(
        "C4",
        baseline_ok and decreased and elapsed < 300.0,
        f"first-batch mlm {mlm0:.3f} (ln V {ln_v:.3f}), nsp {nsp0:.4f} (ln 2 {ln_2:.4f}); "
        f"loss {start_total:.3f} -> {mlm_end + nsp_end:.3f} after 200 steps in {elapsed:.1f}s",
    )


def test_c5_metric_conventions_match_reported_values():
    labels = [1] * 858 + [0] * 4142
    all_positive = metrics(confusion(labels, [1.0] * 5000, 0.5))
    all_negative = metrics(confusion(labels, [0.0] * 5000, 0.5))
    checks = [
        f"{all_positive.precision:.3f}" == "0.172",
        all_positive.recall == 1.0,
        all_positive.specificity == 0.0,
        f"{all_positive.f1:.3f}" == "0.293",
        math.isnan(all_positive.npv),
        math.isnan(all_negative.precision),
        all_negative.recall == 0.0,
        all_negative.f1 == 0.0,
        all_negative.specificity == 1.0,
        f"{all_negative.npv:.3f}" == "0.828",
    ]
    full_report = metric_report(labels, [1.0] * 5000, n_resamples=200, seed=0)
    rendered = render_report({("dummy", "all-positive"): full_report})
    checks.append("nan (nan-nan)" in rendered.text)
    report(
        "C5", all(checks),
        "858/5000 all-positive and all-negative predictors reproduce the "
        "0.172/0.293/0.828 values and nan conventions",
    )


def test_c6_auc_matches_exhaustive_enumeration():
    rng = np.random.default_rng(61)
    for case in range(1000):
        n = int(rng.integers(2, 13))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = (rng.integers(0, 5, size=n) / 4.0)  # coarse grid: many ties
        positives = scores[labels == 1]
        negatives = scores[labels == 0]
        credit = sum(
            1.0 if p > q else 0.5 if p == q else 0.0
            for p, q in itertools.product(positives, negatives)
        )
        expected = credit / (len(positives) * len(negatives))
        got = auc(labels, scores)
        assert got == pytest.approx(expected, abs=1e-12), (labels, scores)
    report("C6", True, "1000 random datasets (<=12 notes) match pair enumeration exactly")


def _pooling_fixture():
    words = tuple(f"w{i:02d}" for i in range(30)) + (".",)
    vocab = Vocabulary(("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]") + words)
    config = ModelConfig(
        num_layers=2, num_heads=2, hidden_dim=32, ff_dim=64,
        vocab_size=len(vocab), max_position=16, dropout_rate=0.0, seed=3,
    )
    params = init_params(config)
    finetune_config = FinetuneConfig(
        strategy="weight", doc_mode="pooling", max_seq_len=16, seed=5
    )
    return params, vocab, finetune_config


def test_c7_pooling_invariant_to_permutation_and_duplication():
    params, vocab, config = _pooling_fixture()
    rng = np.random.default_rng(71)
    worst = 0.0
    for i in range(100):
        n_sentences = int(rng.integers(2, 6))
        sentences = []
        for _ in range(n_sentences):
            picks = [f"w{int(rng.integers(30)):02d}" for _ in range(int(rng.integers(3, 7)))]
            sentences.append(" ".join(picks) + ".")
        note = NoteDocument(f"n{i}", "s", 1.0, "nursing", " ".join(sentences))
        base = embed_note_pooling(params, note, vocab, config)

        order = rng.permutation(n_sentences)
        permuted_text = " ".join(sentences[j] for j in order)
        permuted = embed_note_pooling(
            params, NoteDocument(f"n{i}", "s", 1.0, "nursing", permuted_text), vocab, config
        )
        dup_index = int(rng.integers(n_sentences))
        duplicated_text = " ".join(sentences + [sentences[dup_index]])
        duplicated = embed_note_pooling(
            params, NoteDocument(f"n{i}", "s", 1.0, "nursing", duplicated_text), vocab, config
        )
        worst = max(
            worst,
            float(np.max(np.abs(base.vector - permuted.vector))),
            float(np.max(np.abs(base.vector - duplicated.vector))),
        )
    report("C7", worst == 0.0, f"100 random notes, max absolute deviation {worst}")


def test_c8_stratified_batches_guarantees():
    rng = np.random.default_rng(81)
    for run in range(50):
        labels = (rng.random(120) < 0.17).astype(int)
        if labels.sum() == 0:
            labels[0] = 1
        batches = stratified_batches(labels, batch_size=4, seed=run)
        majority = np.nonzero(labels == 0)[0]
        seen = []
        for batch in batches:
            batch_labels = labels[batch]
            assert np.count_nonzero(batch_labels == 1) >= 1, f"run {run}: no minority"
            seen.extend(i for i in batch.tolist() if labels[i] == 0)
        assert sorted(seen) == sorted(majority.tolist()), f"run {run}: majority coverage"
    report(
        "C8", True,
        "50 seeded runs at prevalence 0.17, batch 4: >=1 minority per batch, "
        "each majority index exactly once",
    )


def _synthetic_splits(spec: SyntheticSpec, split_seed: int = 5):
    corpus = generate_synthetic_corpus(spec)
    cohort = select_cohort(corpus.stays, corpus.creatinine, corpus.notes, COHORT_CONFIG)
    assignment = split_dataset(cohort, seed=split_seed)
    vocab = build_test_vocab(
        [n.text for n in corpus.notes],
        target_size=5 + spec.vocab_size + len(spec.signal_tokens),
    )
    splits: dict[str, tuple[list, list]] = {"train": ([], []), "validation": ([], []), "test": ([], [])}
    for member in cohort.members:
        notes, labels = splits[assignment[member.stay.stay_id]]
        for note in member.notes:
            notes.append(note)
            labels.append(int(member.label.is_aki))
    return splits, vocab


MICRO_MODEL = dict(num_layers=2, num_heads=2, hidden_dim=32, ff_dim=64, max_position=32)


def test_c9_end_to_end_smoke_reaches_auc_090():
    start = time.monotonic()
    spec = SyntheticSpec(
        n_stays=1000, prevalence=0.17, seed=9, signal_rate=0.3,
        notes_per_stay=(1, 1), vocab_size=50,
    )
    splits, vocab = _synthetic_splits(spec)
    model_config = ModelConfig(vocab_size=len(vocab), dropout_rate=0.1, seed=1, **MICRO_MODEL)
    init = init_params(model_config, heads=())
    config = FinetuneConfig(
        strategy="sbs", doc_mode="pooling", batch_size=4, epochs=5,
        eval_every_batches=500, learning_rate=2e-3, seed=3,
    )
    result = finetune_loop(
        init, *splits["train"], *splits["validation"], vocab, config
    )
    test_notes, test_labels = splits["test"]
    probabilities = [predict(result.model, note) for note in test_notes]
    test_auc = auc(test_labels, probabilities)
    elapsed = time.monotonic() - start
    ok = test_auc >= 0.90 and elapsed < 600.0
    report(
        "C9", ok,
        f"1000-note synthetic corpus, sbs+pooling: held-out AUC {test_auc:.4f} "
        f"in {elapsed:.0f}s",
    )


def test_c10_pretraining_does_not_hurt():
    start = time.monotonic()
    spec = SyntheticSpec(
        n_stays=400, prevalence=0.17, seed=10, signal_rate=0.12,
        notes_per_stay=(1, 1), vocab_size=40,
    )
    splits, vocab = _synthetic_splits(spec)
    train_notes, train_labels = splits["train"]
    corpus_sentences = [
        [s.text for s in split_sentences(n.text, n.note_id)]
        for n in sorted(
            splits["train"][0] + splits["validation"][0] + splits["test"][0],
            key=lambda n: n.note_id,
        )
    ]

    def finetune_auc(init_params_set, seed):
        config = FinetuneConfig(
            strategy="sbs", doc_mode="pooling", batch_size=4, epochs=2,
            eval_every_batches=500, learning_rate=1e-3, seed=seed,
        )
        result = finetune_loop(
            init_params_set, train_notes, train_labels, *splits["validation"],
            vocab, config,
        )
        test_notes, test_labels = splits["test"]
        probabilities = [predict(result.model, note) for note in test_notes]
        return auc(test_labels, probabilities)

    pretrained_scores = []
    random_scores = []
    for seed in (1, 2, 3):
        model_config = ModelConfig(
            vocab_size=len(vocab), dropout_rate=0.1, seed=seed, **MICRO_MODEL
        )
        pretrain_config = PretrainConfig(
            max_seq_len=32, batch_size=8, epochs=100, learning_rate=3e-4, seed=seed,
        )
        result = pretrain_loop(
            corpus_sentences, vocab, model_config, pretrain_config,
            MaskingConfig(seed=seed), max_steps=500,
        )
        pretrained_scores.append(finetune_auc(result.params, seed))
        random_scores.append(finetune_auc(init_params(model_config, heads=()), seed))

    mean_pretrained = float(np.mean(pretrained_scores))
    mean_random = float(np.mean(random_scores))
    elapsed = time.monotonic() - start
    report(
        "C10", mean_pretrained >= mean_random,
        f"mean held-out AUC over 3 seeds: pre-trained {mean_pretrained:.4f} vs "
        f"random init {mean_random:.4f} in {elapsed:.0f}s",
    )


def test_c11_corpus_distinguisher_sanity():
    rng = np.random.default_rng(111)
    corpus_a = [
        " ".join(rng.choice([f"a{i}" for i in range(30)], size=10).tolist())
        for _ in range(100)
    ]
    corpus_b = [
        " ".join(rng.choice([f"b{i}" for i in range(30)], size=10).tolist())
        for _ in range(100)
    ]
    disjoint = distinguish_corpora(corpus_a, corpus_b, ProbeConfig(seed=0))

    words = [f"w{i}" for i in range(50)]
    pool = [" ".join(rng.choice(words, size=12).tolist()) for _ in range(600)]
    in_band = 0
    for seed in range(50):
        shuffled = np.random.default_rng(seed).permutation(600)
        half_a = [pool[i] for i in shuffled[:300]]
        half_b = [pool[i] for i in shuffled[300:]]
        accuracy = distinguish_corpora(
            half_a, half_b, ProbeConfig(seed=seed, l2_penalty=1e-2)
        )
        if 0.45 <= accuracy <= 0.55:
            in_band += 1
    ok = disjoint >= 0.99 and in_band >= 45
    report(
        "C11", ok,
        f"disjoint-vocabulary accuracy {disjoint:.3f}; label-shuffled in [0.45, 0.55] "
        f"for {in_band}/50 seeds",
    )


CONFIG_TEMPLATE = """\
seed = 4

[paths]
stays = "{base}/stays.csv"
creatinine = "{base}/creatinine.csv"
notes = "{base}/notes.csv"
vocab = "{base}/vocab.txt"
output_dir = "{base}"

[model]
num_layers = 2
num_heads = 2
hidden_dim = 16
ff_dim = 32
max_position = 24

[pretrain]
max_seq_len = 24
batch_size = 8
epochs = 1
learning_rate = 0.001
checkpoint_every = 50

[finetune]
strategy = "sbs"
doc_mode = "pooling"
batch_size = 4
epochs = 1
eval_every_batches = 20
max_seq_len = 16
learning_rate = 0.002

[evaluate]
n_resamples = 200

[synth]
n_stays = 60
prevalence = 0.25
vocab_size = 30
signal_rate = 0.4
"""


def test_c12_cli_rerun_is_bitwise_identical(tmp_path):
    start = time.monotonic()

    def run_all(base: Path) -> dict[str, bytes]:
        base.mkdir(parents=True, exist_ok=True)
        config = base / "config.toml"
        config.write_text(CONFIG_TEMPLATE.format(base=base), encoding="utf-8")
        for argv in (
            ["synth"],
            ["cohort"],
            ["pretrain"],
            ["finetune", "--init", str(base / "pretrain" / "final.ckpt")],
            ["evaluate", "--checkpoint", str(base / "finetune" / "model_sbs_pooling.ckpt")],
        ):
            assert cli_main([*argv, "--config", str(config)]) == 0, argv
        return {
            str(p.relative_to(base)): p.read_bytes()
            for p in sorted(base.rglob("*"))
            if p.is_file() and p.name != "config.toml"
        }

    first = run_all(tmp_path / "run1")
    second = run_all(tmp_path / "run2")
    identical = first.keys() == second.keys() and all(
        first[name] == second[name] for name in first
    )
    elapsed = time.monotonic() - start
    report(
        "C12", identical,
        f"synth/cohort/pretrain/finetune/evaluate rerun produced "
        f"{len(first)} bitwise-identical artifacts in {elapsed:.0f}s",
    )
