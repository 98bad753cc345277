import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppked import metrics
from ppked.errors import DataError

FIXTURE = json.loads((Path(__file__).parent / "fixtures" / "caption_metrics.json").read_text())
KEYS = ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider")


@pytest.mark.parametrize("sample", ["single", "multi"])
def test_matches_toolkit_fixture(sample):
    if sample == "single":
        pairs, expected = FIXTURE["pairs"], FIXTURE["expected"]
        refs = [p["reference"] for p in pairs]
    else:
        pairs, expected = FIXTURE["multi"]["pairs"], FIXTURE["multi"]["expected"]
        refs = [p["references"] for p in pairs]
    got = metrics.evaluate_all([p["candidate"] for p in pairs], refs)
    for key in KEYS:
        assert abs(got[key] - expected[key]) < 1e-4, key


def test_identical_corpus_cider_matches_fixture():
    refs = [p["reference"] for p in FIXTURE["pairs"]]
    assert metrics.cider(refs, refs) == pytest.approx(FIXTURE["identical_cider"], abs=1e-4)


def test_rouge_small_pair_matches_fixture():
    f = FIXTURE["rouge_small"]
    assert abs(metrics.rouge_l([f["candidate"]], [f["reference"]]) - f["rouge_l"]) < 1e-6


def test_bleu_identity_is_one():
    assert metrics.bleu(["a b c d e"], ["a b c d e"]) == [1.0, 1.0, 1.0, 1.0]


def test_bleu_disjoint_is_zero():
    assert metrics.bleu(["a b c d"], ["w x y z"]) == [0.0, 0.0, 0.0, 0.0]


def test_bleu_hand_case():
    b = metrics.bleu(["a b c d"], ["a b c e"])
    assert b[0] == 0.75
    assert b[1] == math.sqrt(0.75 * (2 / 3))


def test_brevity_penalty():
    b = metrics.bleu(["a b"], ["a b c d"])
    assert b[0] == pytest.approx(math.exp(1 - 4 / 2))


def test_empty_candidate_scores_zero():
    assert metrics.bleu([""], ["a b"]) == [0.0] * 4
    assert metrics.rouge_l([""], ["a b"]) == 0.0


def test_rouge_identity_and_disjoint():
    assert metrics.rouge_l(["x y z"], ["x y z"]) == pytest.approx(1.0)
    assert metrics.rouge_l(["x y z"], ["a b"]) == 0.0


def test_cider_disjoint_is_zero():
    assert metrics.cider(["a b c", "d e f"], ["x y z", "u v w"]) == 0.0


def test_cider_single_document_is_defined():
    assert metrics.cider(["a b c"], ["a b c"]) == 0.0


def test_mismatched_lengths():
    with pytest.raises(DataError):
        metrics.bleu(["a"], ["a", "b"])


def test_auc_perfect_and_hand_example():
    assert metrics.roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    # positives 0.35, 0.8, 0.4 vs negatives 0.1, 0.4, 0.9: 1 + 2 + 1.5 wins out of 9
    assert metrics.roc_auc([0.1, 0.4, 0.35, 0.8, 0.4, 0.9], [0, 0, 1, 1, 1, 0]) == 0.5


def test_auc_null_case_is_near_half():
    rng = np.random.default_rng(0)
    assert abs(metrics.roc_auc(rng.random(20000), rng.random(20000) < 0.3) - 0.5) < 0.02


def test_auc_single_class_is_an_error():
    with pytest.raises(DataError, match="AUC undefined"):
        metrics.roc_auc([0.1, 0.2], [1, 1])


def test_table_mentions_meteor():
    table = metrics.format_table({k: 0.5 for k in KEYS})
    assert "METEOR: not implemented" in table


words = st.lists(st.sampled_from("a b c d e f".split()), min_size=1, max_size=8)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(words, words), min_size=2, max_size=6), st.randoms())
def test_metrics_invariant_to_pair_order(pairs, rnd):
    cands, refs = [c for c, _ in pairs], [r for _, r in pairs]
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = metrics.evaluate_all(cands, refs)
    b = metrics.evaluate_all([c for c, _ in shuffled], [r for _, r in shuffled])
    for key in KEYS:
        assert a[key] == pytest.approx(b[key], abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(words)
def test_appending_a_matching_token_never_lowers_bleu1(ref):
    for n in range(1, len(ref)):
        assert metrics.bleu([ref[:n + 1]], [ref])[0] >= metrics.bleu([ref[:n]], [ref])[0]
