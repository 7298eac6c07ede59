"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criterion 11 needs the official data files; point ``RECAM_DATA_DIR`` at a
directory holding ``Task_1_*.jsonl`` / ``Task_2_*.jsonl`` to run it.
"""

import contextlib
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from recam.augment import IdentityTranslator, TranslationCache, augment_split
from recam.backends import EncoderBackend, parameter_checksum
from recam.config import TECHNIQUES, TOKEN_SCHEMES, RunConfig
from recam.dataset import Example, find_split_file, load_jsonl
from recam.evaluate import run_ablation, run_token_sweep, run_transfer
from recam.losses import SmoothingConfig, cross_entropy, smooth_labels, uncertainty_combine
from recam.model import ClassifierHead, score_candidates
from recam.ranker import HashedRandomEmbedder, OneHotEmbedder, rank, similarity
from recam.textprep import EncodedInstance, WordTokenizer, encode_example, wrap_concept
from recam.train import build_model, compute_loss, make_batch, prepare_features, train

from helpers import FIXTURES, desk_config, file_tree, run_pipeline


@pytest.fixture
def criterion(capsys):
    """Run the body and print a PASS/FAIL line for criterion ``n`` either way."""

    @contextlib.contextmanager
    def run(n, title):
        start = time.perf_counter()
        try:
            yield
        except BaseException as e:
            if isinstance(e, pytest.skip.Exception):
                with capsys.disabled():
                    print(f"\nSKIP criterion {n:>2}: {title} ({e})")
                raise
            with capsys.disabled():
                print(f"\nFAIL criterion {n:>2}: {title} ({type(e).__name__}: {e})")
            raise
        with capsys.disabled():
            print(f"\nPASS criterion {n:>2}: {title} [{time.perf_counter() - start:.1f}s]")

    return run


def _texts(split):
    return [t for ex in split for t in (ex.article, ex.question, *ex.options)]


def test_criterion_01_loss_algebra(criterion):
    with criterion(1, "loss algebra against hand-computed values"):
        assert np.max(np.abs(smooth_labels(1, 5, SmoothingConfig(0.1)) - [0.02, 0.92, 0.02, 0.02, 0.02])) <= 1e-9
        assert np.max(np.abs(smooth_labels(3, 5, SmoothingConfig(0.0)) - [0, 0, 0, 1, 0])) <= 1e-9
        onehot = [0, 1, 0, 0, 0]
        assert abs(cross_entropy(onehot, onehot) - 0.0) <= 1e-9
        assert abs(cross_entropy([0.2] * 5, onehot) - math.log(5)) <= 1e-9
        sm = smooth_labels(1, 5)
        assert abs(cross_entropy(sm, sm) - (-(0.92 * math.log(0.92) + 4 * 0.02 * math.log(0.02)))) <= 1e-9
        assert abs(uncertainty_combine(2.0, 2.0, 1.0, 0.0) - (1 / math.e + 1 + 1)) <= 1e-9
        lv = torch.tensor(0.0, dtype=torch.float64, requires_grad=True)
        uncertainty_combine(torch.tensor(2.0, dtype=torch.float64), 2.0, lv, 0.0).backward()
        assert abs(float(lv.grad)) <= 1e-9

        rng = np.random.default_rng(1)
        for _ in range(1000):
            l1, l2 = rng.uniform(0, 10, 2)
            s1, s2 = rng.uniform(0.1, 5, 2)
            # written in terms of the standard deviations themselves
            expected = l1 / (2 * s1**2) + l2 / (2 * s2**2) + math.log(s1**2 * s2**2)
            got = uncertainty_combine(l1, l2, math.log(s1**2), math.log(s2**2))
            assert abs(got - expected) <= 1e-9 * max(1.0, abs(expected))


def _gradient_check(siamese: bool, rng: np.random.Generator) -> float:
    split = load_jsonl(FIXTURES / "overfit8.jsonl", "train")
    cfg = desk_config(siamese=siamese, special_tokens=True, label_smoothing=True, head_init="normal")
    tok = WordTokenizer.from_texts(_texts(split))
    model = build_model(cfg, tok).double().train()
    if model.uncertainty is not None:
        with torch.no_grad():
            model.uncertainty.log_var1.fill_(0.2)
            model.uncertainty.log_var2.fill_(-0.3)
    feats = prepare_features(split, tok, cfg)[:2]
    batch, labels = make_batch(feats, model.pad_id, siamese)
    params = [p for p in model.parameters() if p.requires_grad]

    def loss_value() -> float:
        with torch.no_grad():
            return float(compute_loss(model, batch, labels, cfg)[0])

    model.zero_grad()
    compute_loss(model, batch, labels, cfg)[0].backward()
    grads = [p.grad.detach().clone() for p in params]
    eps = 1e-5
    worst = 0.0

    # random directions over every parameter at once
    for _ in range(4):
        dirs = [torch.from_numpy(rng.standard_normal(tuple(p.shape))).to(p.dtype) for p in params]
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
        with torch.no_grad():
            for p, d in zip(params, dirs):
                p.add_(eps * d)
        plus = loss_value()
        with torch.no_grad():
            for p, d in zip(params, dirs):
                p.sub_(2 * eps * d)
        minus = loss_value()
        with torch.no_grad():
            for p, d in zip(params, dirs):
                p.add_(eps * d)
        numeric = (plus - minus) / (2 * eps)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8))

    # the largest single coordinates of each parameter tensor
    for p, g in zip(params, grads):
        flat = g.flatten()
        for idx in torch.topk(flat.abs(), min(2, flat.numel())).indices.tolist():
            if abs(float(flat[idx])) < 1e-7:
                continue
            view = p.data.view(-1)
            old = float(view[idx])
            view[idx] = old + eps
            plus = loss_value()
            view[idx] = old - eps
            minus = loss_value()
            view[idx] = old
            numeric = (plus - minus) / (2 * eps)
            analytic = float(flat[idx])
            worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric)))
    return worst


def test_criterion_02_gradient_check(criterion):
    with criterion(2, "end-to-end gradients match central differences (plain and siamese)"):
        start = time.perf_counter()
        rng = np.random.default_rng(2)
        plain = _gradient_check(False, rng)
        siamese = _gradient_check(True, rng)
        assert plain <= 1e-3, f"plain relative error {plain:.2e}"
        assert siamese <= 1e-3, f"siamese relative error {siamese:.2e}"
        assert time.perf_counter() - start < 60


def test_criterion_03_overfit_and_zero_lr(criterion):
    with criterion(3, "tiny backend overfits 8 examples; lr=0 stays at tie-break chance"):
        split = load_jsonl(FIXTURES / "overfit8.jsonl", "train")
        start = time.perf_counter()
        ckpt = train(split, split, desk_config(epochs=50))
        assert ckpt.dev_accuracy == 1.0
        assert time.perf_counter() - start < 120

        cfg = desk_config(learning_rate=0.0, epochs=3)
        reference = build_model(cfg, WordTokenizer.from_texts(_texts(split)))
        still = train(split, split, cfg, tokenizer=WordTokenizer.from_texts(_texts(split)))
        assert parameter_checksum(still.model) == parameter_checksum(reference)
        # uniform scores -> candidate 0 every time -> share of label-0 examples
        chance = sum(ex.label == 0 for ex in split) / len(split)
        assert still.dev_accuracy == chance
        assert all(h["dev_accuracy"] == chance for h in still.history)


class _OneHotBackend(EncoderBackend):
    """First-token state is the one-hot of the token at position 1."""

    def __init__(self):
        super().__init__()
        self.hidden_size = 5

    def encode(self, input_ids, attention_mask=None):
        out = torch.zeros(*input_ids.shape, 5, dtype=torch.float64)
        out[:, 0] = torch.nn.functional.one_hot(input_ids[:, 1], 5).double()
        return out


def test_criterion_04_score_properties(criterion):
    with criterion(4, "softmax normalization, shift invariance, permutation equivariance"):
        rng = np.random.default_rng(4)
        backend = _OneHotBackend()
        insts = [EncodedInstance("x", i, (0, i, 0), None, 0) for i in range(5)]
        head = ClassifierHead(5).double()
        for _ in range(1000):
            logits = rng.normal(0, rng.uniform(0.1, 20), 5)
            shift = rng.normal(0, 50)
            perm = rng.permutation(5)
            with torch.no_grad():
                head.out.weight.copy_(torch.from_numpy(logits)[None])
                head.out.bias.zero_()
                scores = score_candidates(insts, backend, head).scores
                assert abs(float(scores.sum()) - 1) <= 1e-6 and bool((scores >= 0).all())
                head.out.bias.fill_(shift)
                shifted = score_candidates(insts, backend, head).scores
                assert int(shifted.argmax()) == int(scores.argmax())
                head.out.bias.zero_()
                permuted = score_candidates([insts[j] for j in perm], backend, head).scores
                assert torch.allclose(permuted, scores[torch.from_numpy(perm)], atol=1e-12)


def test_criterion_05_ranking_oracle(criterion):
    with criterion(5, "rank() equals a stable sort of per-sentence similarities"):
        rng = np.random.default_rng(5)
        words = list("abcdefgh")
        for trial in range(500):
            emb = HashedRandomEmbedder(dim=int(rng.integers(2, 9)), seed=trial)
            n = int(rng.integers(1, 7))
            sents = [" ".join(rng.choice(words, int(rng.integers(1, 5)))).capitalize() + "." for _ in range(n)]
            if rng.random() < 0.3 and n > 1:
                sents[-1] = sents[0]  # exact duplicate -> genuine tie
            question = " ".join(rng.choice(words, int(rng.integers(1, 5))))
            out = rank(" ".join(sents), question, emb)
            oracle_scores = [similarity(question, s, emb) for s in sents]
            oracle_order = [int(i) for i in np.argsort(-np.asarray(oracle_scores), kind="stable")]
            assert list(out.order) == oracle_order
            assert np.allclose(out.scores, oracle_scores, rtol=0, atol=1e-12)

        article = "Cats sleep a lot. Dogs bark at night. The market fell today."
        assert rank(article, "The market fell today.", OneHotEmbedder()).order[0] == 2
        assert rank("Same here. Same here. Same here.", "q", OneHotEmbedder()).order == (0, 1, 2)


def test_criterion_06_similarity_math(criterion):
    with criterion(6, "one-hot similarity worked cases"):
        emb = OneHotEmbedder()
        assert abs(similarity("a b", "a b", emb) - 1.0) <= 1e-12
        assert abs(similarity("a b", "c d", emb) - 0.0) <= 1e-12
        assert abs(similarity("a b", "a c", emb) - 0.5) <= 1e-12
        assert abs(similarity("a b", "a c", emb, recall_only=True) - 0.5) <= 1e-12


def _contains(seq, sub):
    return any(seq[i:i + len(sub)] == sub for i in range(len(seq) - len(sub) + 1))


def test_criterion_07_truncation(criterion):
    with criterion(7, "long passages cut to exactly 200 with question and answer intact"):
        rng = np.random.default_rng(7)
        vocab = ["the", "price", "rose", "<e>", "</e>", "@placeholder", "growth", "x", ".", "#"]
        tok = WordTokenizer.from_texts(vocab)
        for scheme in TOKEN_SCHEMES:
            cfg = RunConfig(special_tokens=scheme != "none", special_token_scheme=scheme if scheme != "none" else "<e>")
            tok_s = WordTokenizer.from_dict(tok.to_dict())
            tok_s.add_special_tokens(cfg.scheme.tokens)
            for q_len in (0, 20, 150):
                q = " ".join(rng.choice(vocab[:3], q_len)) + " @placeholder"
                options = tuple(" ".join(rng.choice(vocab[:3] + ["growth"], int(rng.integers(1, 6)))) for _ in range(5))
                # passages full of marker look-alikes and placeholders
                passage = " ".join(rng.choice(vocab, 5000))
                ex = Example("long", passage, q, options, 0)
                for inst in encode_example(ex, passage, tok_s, cfg):
                    ids = list(inst.joint_ids)
                    assert len(ids) == 200
                    assert inst.truncated_subwords > 0
                    q_ids = tok_s.encode(q)
                    assert ids[1:1 + len(q_ids)] == q_ids
                    a_ids = tok_s.encode(wrap_concept(options[inst.candidate_index], cfg.scheme))
                    start = 1 + len(q_ids) + len(tok_s.sep_block)
                    assert ids[start:start + len(a_ids)] == a_ids
                    assert _contains(ids, a_ids)


def test_criterion_08_back_translation_contract(criterion, tmp_path):
    with criterion(8, "identity back translation, untouched fields, cache probe"):
        split = load_jsonl(FIXTURES / "data1" / "train.jsonl", "train")
        cache = TranslationCache(tmp_path / "cache")
        first = IdentityTranslator()
        out = augment_split(split, first, cache=cache)
        assert len(out) == len(split)
        for orig, new in zip(split, out):
            assert new.article == orig.article
            assert new.question.encode() == orig.question.encode()
            assert [o.encode() for o in new.options] == [o.encode() for o in orig.options]
            assert new.label == orig.label
        assert first.calls > 0
        probe = IdentityTranslator()
        augment_split(split, probe, cache=TranslationCache(tmp_path / "cache"))
        assert probe.calls == 0


def test_criterion_09_pipeline_determinism(criterion, tmp_path, monkeypatch):
    with criterion(9, "two end-to-end runs produce byte-identical outputs"):
        a, b = tmp_path / "a", tmp_path / "b"
        a.mkdir()
        b.mkdir()
        run_pipeline(a, monkeypatch)
        run_pipeline(b, monkeypatch)
        ta, tb = file_tree(a / "run"), file_tree(b / "run")
        assert len(ta) > 5
        assert sorted(ta) == sorted(tb)
        assert [k for k in ta if ta[k] != tb[k]] == []


def test_criterion_10_harness_shapes(criterion):
    with criterion(10, "ablation has 7 rows, token sweep 6, transfer is a full 2x2"):
        load = lambda d, sub: {n: load_jsonl(FIXTURES / d / f"{n}.jsonl", n, subtask=sub)
                               for n in ("train", "trial", "dev", "test")}
        data1, data2 = load("data1", "imperceptibility"), load("data2", "nonspecificity")
        cfg = desk_config(epochs=1)
        ablation = run_ablation(cfg, TECHNIQUES, data1, translator=IdentityTranslator())
        assert len(ablation.rows) == 7
        assert all(r["status"] == "ok" and 0 <= r["dev_acc"] <= 1 for r in ablation.rows)
        sweep = run_token_sweep(cfg, data1)
        assert [r["scheme"] for r in sweep.rows] == ["<e>", "<#>", "<$>", "#", "$", "none"]
        assert all(r["status"] == "ok" for r in sweep.rows)
        c1 = train(data1["train"], data1["dev"], cfg)
        c2 = train(data2["train"], data2["dev"], cfg.replace(subtask="nonspecificity"))
        matrix = run_transfer({"imperceptibility": c1, "nonspecificity": c2},
                              {"imperceptibility": data1["test"], "nonspecificity": data2["test"]})
        assert matrix.complete


OFFICIAL_COUNTS = {
    "imperceptibility": {"train": 3227, "dev": 837, "test": 2025},
    "nonspecificity": {"train": 3318, "dev": 851, "test": 2017},
}


def test_criterion_11_official_counts(criterion):
    with criterion(11, "official split sizes"):
        root = os.environ.get("RECAM_DATA_DIR")
        if not root or not Path(root).is_dir():
            pytest.skip("RECAM_DATA_DIR not set; official data absent")
        for subtask, counts in OFFICIAL_COUNTS.items():
            for split, n in counts.items():
                path = find_split_file(root, split, subtask)
                if path is None:
                    pytest.skip(f"no {split} file for {subtask} under {root}")
                assert len(load_jsonl(path, split, subtask)) == n, f"{subtask}/{split}"
