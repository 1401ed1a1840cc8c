import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from colearn.data import gen_synthetic
from colearn.metrics import (bleu_stats, corpus_bleu, exact_match, hidden_similarity,
                             repeated_token_pct)
from colearn.model import DualDecoderModel, ModelConfig


def test_perfect_match_is_100():
    assert corpus_bleu([[1, 2, 3, 4, 5]], [[1, 2, 3, 4, 5]]) == pytest.approx(100.0)


def test_brevity_penalty_case():
    # every n-gram precision is 1, brevity penalty exp(1 - 5/4)
    hyp, ref = ["a", "b", "c", "d"], ["a", "b", "c", "d", "e"]
    assert bleu_stats([hyp], [ref]) == ([4, 3, 2, 1], [4, 3, 2, 1], 4, 5)
    want = 100 * math.exp(-0.25)
    assert abs(corpus_bleu([hyp], [ref]) - want) < 1e-9
    assert abs(corpus_bleu([hyp], [ref]) - 77.88) < 0.01


def test_disjoint_without_smoothing_is_zero():
    assert corpus_bleu([[1, 2, 3, 4]], [[5, 6, 7, 8]], smoothing=False) == 0.0


def test_smoothing_replaces_zero_counts():
    hyp, ref = [1, 2, 9, 3], [1, 2, 3, 4]
    # unigram 3/4, bigram 1/3, trigram 0 -> 1/2 / 2, 4-gram 0 -> 1/4 / 1
    want = 100 * math.exp((math.log(3 / 4) + math.log(1 / 3) + math.log(0.25) + math.log(0.25)) / 4)
    assert abs(corpus_bleu([hyp], [ref]) - want) < 1e-9
    assert corpus_bleu([hyp], [ref], smoothing=False) == 0.0


def test_clipped_counts():
    matches, totals, _, _ = bleu_stats([[7, 7, 7, 7]], [[7, 8, 9, 10]])
    assert matches[0] == 1 and totals[0] == 4


def test_bleu_errors():
    with pytest.raises(ValueError):
        corpus_bleu([], [])
    with pytest.raises(ValueError):
        corpus_bleu([[1]], [[1], [2]])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.lists(st.integers(4, 9), min_size=1, max_size=8),
                          st.lists(st.integers(4, 9), min_size=1, max_size=8)),
                min_size=1, max_size=6),
       st.randoms(use_true_random=False))
def test_bleu_is_order_invariant_and_bounded(pairs, rnd):
    hyps, refs = [h for h, _ in pairs], [r for _, r in pairs]
    score = corpus_bleu(hyps, refs)
    assert 0.0 <= score <= 100.0 + 1e-9
    order = list(range(len(pairs)))
    rnd.shuffle(order)
    assert corpus_bleu([hyps[i] for i in order], [refs[i] for i in order]) == pytest.approx(score)


@pytest.mark.parametrize("hyps,want", [([["a", "a", "b"]], 100 / 3), ([["a", "b", "c"]], 0.0),
                                       ([["x", "x", "x", "x"]], 75.0), ([["q"]], 0.0),
                                       ([["a", "a"], ["b", "c"]], 25.0)])
def test_repeated_token_pct(hyps, want):
    assert repeated_token_pct(hyps) == want


def test_exact_match():
    assert exact_match([[1, 2], [3]], [[1, 2], [4]]) == 0.5


def test_hidden_similarity_near_zero_at_init_and_bounded():
    corpus = gen_synthetic("lexicon", 200, 24, (4, 12), np.random.default_rng(0))
    m = DualDecoderModel(ModelConfig(vocab_size=24, max_len=16), seed=0)
    sim = hidden_similarity(m, corpus)
    assert sum(len(t) + 1 for t in corpus.targets) >= 1000
    assert abs(sim) < 0.2
    assert hidden_similarity(m, corpus) == sim


def test_hidden_similarity_stays_in_cosine_range():
    m = DualDecoderModel(ModelConfig(vocab_size=12, d_model=16, d_hidden=32, n_heads=2,
                                     n_enc_layers=1, n_dec_layers=1, max_len=10,
                                     ar_pe="sinusoidal", nar_pe="sinusoidal"), seed=0)
    sim_random = hidden_similarity(m, gen_synthetic("copy", 20, 12, (2, 6), np.random.default_rng(1)))
    assert -1.0 <= sim_random <= 1.0
