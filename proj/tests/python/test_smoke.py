"""Smoke tests for the _qglab extension module."""

import math

import pytest

import _qglab as qg


def test_tokenizer_roundtrip():
    vocab = qg.Vocab.train(["the cat sat on the mat the cat sat"], 400, num_sentinels=10)
    assert vocab.size == 400
    ids = vocab.encode("the cat sat")
    assert ids
    assert all(i >= 3 for i in ids)
    assert vocab.decode(ids) == "the cat sat"
    assert vocab.sentinel_id(0) == 399


def test_vocab_save_load(tmp_path):
    vocab = qg.Vocab.train(["alpha beta alpha beta"], 320, num_sentinels=8)
    path = str(tmp_path / "vocab.txt")
    vocab.save(path)
    loaded = qg.Vocab.load(path)
    assert loaded.content_hash() == vocab.content_hash()
    assert loaded.encode("alpha beta") == vocab.encode("alpha beta")


def test_bleu_oracles():
    r = qg.corpus_bleu(["the the the the"], ["the cat sat down"], max_n=1)
    assert r.cumulative[0] == pytest.approx(25.0, abs=1e-6)
    r = qg.corpus_bleu(["the cat"], ["the cat sat down"], max_n=1)
    assert r.cumulative[0] == pytest.approx(100.0 * math.exp(-1.0), abs=1e-6)
    r = qg.corpus_bleu(["a perfect match of five words"], ["a perfect match of five words"])
    assert all(b == pytest.approx(100.0) for b in r.cumulative)


def test_squad_f1():
    assert qg.squad_f1("e f g", ["f g h"]) == pytest.approx(2.0 / 3.0)
    assert qg.squad_f1("The Answer!", ["answer"]) == pytest.approx(1.0)
    assert qg.squad_normalize("An apple a day") == ["apple", "day"]


def test_ngram_lm():
    lm = qg.NGramLM.train(["a b c", "a b d"], order=2, discount=0.5)
    assert lm.perplexity(["a b c"]) > 1.0
    uni = qg.NGramLM.uniform(["w1", "w2", "w3"])
    assert uni.perplexity(["w1 w2"]) == pytest.approx(5.0)  # 3 words + unk + end


def test_diversity_and_grammar():
    assert qg.distinct_n(["a a a a"], 1) == pytest.approx(0.25)
    assert qg.diversity(["a b", "a b"]) == pytest.approx((0.5 + 0.5) / 2)
    assert qg.grammar_errors("What is DNA?") == 0
    assert qg.grammar_errors("what is dna") == 2


def test_span_corrupt_reconstruction():
    ids = list(range(10, 40))
    src, tgt = qg.span_corrupt(
        ids, mask_ratio=0.15, mean_span_len=3.0, vocab_size=512, num_sentinels=100, seed=9
    )
    assert tgt[-1] == 1  # ends with EOS
    first_sentinel = 512 - 100
    rebuilt, ti = [], 0
    for tok in src:
        if tok >= first_sentinel:
            assert tgt[ti] == tok
            ti += 1
            while ti < len(tgt) and tgt[ti] < first_sentinel and tgt[ti] != 1:
                rebuilt.append(tgt[ti])
                ti += 1
        else:
            rebuilt.append(tok)
    assert rebuilt == ids


def test_format_example():
    src, tgt = qg.format_example("Water boils.", "water", "What boils?", "qg-v1")
    assert src == "generate question: answer: water context: Water boils."
    assert tgt == "What boils?"


def test_compare_reports_pattern():
    import json

    def row(bleu, f1, ppl, div, gram):
        return json.dumps(
            {
                "bleu1": bleu[0], "bleu2": bleu[1], "bleu3": bleu[2], "bleu4": bleu[3],
                "f1": f1, "perplexity": ppl, "diversity": div, "grammar_error_rate": gram,
                "n_examples": 1, "eval_split_hash": "s", "decode_config_hash": "d",
                "metric_config_hash": "m", "grammar_backend": "rules-v1", "plan_hash": "p",
                "bleu_precisions": [], "notes": {},
            }
        )

    leaf = row([27.07, 20.22, 17.17, 16.46], 30.90, 30.82, 0.735, 0.102)
    eduqg = row([29.19, 21.69, 18.03, 16.76], 33.18, 34.36, 0.749, 0.122)
    text = qg.compare_reports(leaf, eduqg, "Leaf", "EduQG")
    assert "Leaf" in text and "EduQG" in text
    assert "*29.190*" in text  # EduQG better on BLEU-1
    assert "*30.820*" in text  # Leaf better on perplexity
