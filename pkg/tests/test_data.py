from collections import Counter

import numpy as np
import pytest

from colearn.data import (Batch, DistillStats, ParallelCorpus, Vocab, batch_by_tokens, distill,
                          gen_splits, gen_synthetic, lexicon_target, read_lines)
from colearn.decoding import DecodeConfig
from colearn.model import BOS, EOS, MASK, PAD, DualDecoderModel, ModelConfig
from colearn.masking import MaskPlan


def test_task_rules():
    rng = np.random.default_rng(0)
    copy = gen_synthetic("copy", 20, 12, (2, 6), rng)
    assert all(s == t for s, t in copy.pairs)
    rev = gen_synthetic("reverse", 20, 12, (2, 6), rng)
    assert all(s[::-1] == t for s, t in rev.pairs)


def test_lexicon_rule_by_hand():
    mapping = {v: v + 4 for v in range(4, 10)}
    assert lexicon_target([5, 6, 7, 8], mapping) == [10, 9, 12, 11]
    assert lexicon_target([5, 6, 7], mapping) == [10, 9, 11]


def test_lexicon_mapping_is_bijective_and_shared_by_splits():
    train, valid = gen_splits("lexicon", (200, 50), 16, (1, 6), np.random.default_rng(1))
    image = {}
    for corpus in (train, valid):
        for s, t in corpus.pairs:
            back = list(t)
            for i in range(0, len(back) - 1, 2):
                back[i], back[i + 1] = back[i + 1], back[i]
            for a, b in zip(s, back):
                assert image.setdefault(a, b) == b
    assert len(set(image.values())) == len(image)


def test_generation_is_seed_deterministic_and_bounded():
    a = gen_synthetic("lexicon", 30, 10, (3, 7), np.random.default_rng(5))
    b = gen_synthetic("lexicon", 30, 10, (3, 7), np.random.default_rng(5))
    assert a.pairs == b.pairs
    for s, t in a.pairs:
        assert 3 <= len(s) <= 7 and len(s) == len(t)
        assert min(s) >= 4 and max(s) < 10


@pytest.mark.parametrize("kwargs", [dict(task="shuffle"), dict(vocab_size=7),
                                    dict(len_range=(0, 4)), dict(len_range=(5, 3)),
                                    dict(len_range=(2, 31)), dict(n_pairs=0)])
def test_generation_errors(kwargs):
    args = dict(task="copy", n_pairs=5, vocab_size=10, len_range=(2, 4))
    args.update(kwargs)
    with pytest.raises(ValueError):
        gen_synthetic(args["task"], args["n_pairs"], args["vocab_size"], args["len_range"],
                      np.random.default_rng(0), max_len=32)


def test_vocab_roundtrip_and_files(tmp_path):
    corpus = gen_synthetic("reverse", 25, 14, (1, 8), np.random.default_rng(2))
    v = corpus.vocab
    for s, t in corpus.pairs:
        assert v.encode(v.decode(s)) == s and v.encode(v.decode(t)) == t
    corpus.save(tmp_path / "toy")
    v.save(tmp_path / "vocab.txt")
    v2 = Vocab.load(tmp_path / "vocab.txt")
    assert v2.itos == v.itos
    again = ParallelCorpus.load(tmp_path / "toy", v2)
    assert again.pairs == corpus.pairs
    assert read_lines(tmp_path / "toy.src", v2) == corpus.sources
    with pytest.raises(ValueError, match="unknown token"):
        v.encode(["99"])


def test_corpus_rejects_bad_pairs():
    v = Vocab.integers(10)
    with pytest.raises(ValueError):
        ParallelCorpus([([], [4])], v)
    with pytest.raises(ValueError):
        ParallelCorpus([([4, MASK], [4])], v)
    with pytest.raises(ValueError):
        ParallelCorpus([([4], [10])], v)
    with pytest.raises(ValueError):
        Vocab(["a", "<pad>"])


def test_batching_examples():
    v = Vocab.integers(10)
    one = ParallelCorpus([([4, 5], [6])], v)
    assert [b.size for b in batch_by_tokens(one, 10)] == [1]
    four = ParallelCorpus([([4] * 5, [5] * 5)] * 4, v)
    assert [b.size for b in batch_by_tokens(four, 10)] == [2, 2]
    with pytest.raises(ValueError, match="sentence 0"):
        batch_by_tokens(four, 4)


def test_batching_partitions_corpus_and_respects_budget():
    corpus = gen_synthetic("lexicon", 300, 20, (1, 12), np.random.default_rng(3))
    for shuffle in (False, True):
        batches = batch_by_tokens(corpus, 40, np.random.default_rng(0), shuffle=shuffle)
        seen = Counter(i for b in batches for i in b.indices)
        assert seen == Counter(range(len(corpus)))
        tokens = 0
        for b in batches:
            assert int(np.maximum(b.src_len, b.tgt_len).sum()) <= 40
            for row, n in zip(b.tgt, b.tgt_len):
                assert np.all(row[n:] == PAD) and np.all(row[:n] != PAD)
            tokens += int((b.tgt != PAD).sum())
        assert tokens == sum(len(t) for t in corpus.targets)


def test_batch_views():
    b = Batch.from_pairs([([4, 5, 6], [7, 8]), ([4], [9, 10, 11])])
    np.testing.assert_array_equal(b.gold(), [[7, 8, EOS, PAD], [9, 10, 11, EOS]])
    np.testing.assert_array_equal(b.ar_input(), [[BOS, 7, 8, PAD], [BOS, 9, 10, 11]])
    plans = [MaskPlan(2, (1,), (0,), (0,)), MaskPlan(3, (), (0, 1, 2), (0, 1, 2))]
    np.testing.assert_array_equal(b.nar_input(plans), [[MASK, 8, EOS, PAD], [MASK, MASK, MASK, EOS]])
    np.testing.assert_array_equal(b.real_mask(), [[1, 1, 1, 0], [1, 1, 1, 1]])
    np.testing.assert_array_equal(b.token_mask(), [[1, 1, 0, 0], [1, 1, 1, 0]])


def test_distill_contract():
    corpus = gen_synthetic("copy", 12, 10, (2, 5), np.random.default_rng(4))
    teacher = DualDecoderModel(ModelConfig(vocab_size=10, d_model=8, d_hidden=16, n_heads=1,
                                           n_enc_layers=1, n_dec_layers=1, max_len=8,
                                           dropout=0.0), seed=0)
    stats = DistillStats()
    out = distill(teacher, corpus, DecodeConfig(beam_size=2, max_decode_len=7), stats)
    assert len(out) == len(corpus)
    assert out.sources == corpus.sources
    assert all(0 < len(t) <= 7 for t in out.targets)
    assert stats.n_empty + stats.n_truncated >= 0
