import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from colearn.masking import (MaskPlan, cmlm_mask, disco_contexts, fixed_ratio_mask,
                             select_confidence)


def _partitions(plan):
    return (set(plan.observed) | set(plan.masked) == set(range(plan.n_target))
            and not set(plan.observed) & set(plan.masked))


def test_plan_rejects_overlap():
    with pytest.raises(ValueError):
        MaskPlan(3, (0, 1), (1, 2), (1, 2))
    with pytest.raises(ValueError):
        MaskPlan(3, (0,), (1,), ())


def test_cmlm_single_position():
    p = cmlm_mask(1, np.random.default_rng(0))
    assert p.masked == (0,) and p.observed == ()


def test_cmlm_mean_mask_size():
    rng = np.random.default_rng(0)
    sizes = [len(cmlm_mask(8, rng).masked) for _ in range(100_000)]
    assert abs(np.mean(sizes) - 4.5) < 0.05


def test_cmlm_position_marginal():
    n = 6
    rng = np.random.default_rng(1)
    counts = np.zeros(n)
    draws = 60_000
    for _ in range(draws):
        counts[list(cmlm_mask(n, rng).masked)] += 1
    expected = (n + 1) / (2 * n)
    np.testing.assert_allclose(counts / draws, expected, rtol=0.01)


def test_cmlm_mutual_equals_masked_and_reproducible():
    a = cmlm_mask(9, np.random.default_rng(4))
    b = cmlm_mask(9, np.random.default_rng(4))
    assert a == b and a.mutual == a.masked


def test_partition_holds_for_every_generator():
    rng = np.random.default_rng(2)
    for _ in range(10_000):
        n = int(rng.integers(1, 13))
        kind = int(rng.integers(3))
        if kind == 0:
            plan = cmlm_mask(n, rng)
        elif kind == 1:
            plan = fixed_ratio_mask(n, float(rng.random()), rng)
        else:
            plan = disco_contexts(n, rng)
        assert _partitions(plan)


def test_fixed_ratio_sizes():
    rng = np.random.default_rng(0)
    assert fixed_ratio_mask(5, 1.0, rng).masked == (0, 1, 2, 3, 4)
    assert len(fixed_ratio_mask(6, 0.5, rng).masked) == 3
    assert len(fixed_ratio_mask(10, 0.01, rng).masked) == 1
    empty = fixed_ratio_mask(4, 0.0, rng)
    assert empty.masked == () and empty.mutual == ()
    for bad in (-0.1, 1.5):
        with pytest.raises(ValueError):
            fixed_ratio_mask(4, bad, rng)


def test_disco_contexts():
    rng = np.random.default_rng(3)
    plan = disco_contexts(6, rng)
    assert plan.mutual == tuple(range(6))
    for i, ctx in enumerate(plan.contexts):
        assert i not in ctx
    two = disco_contexts(2, rng)
    assert set(two.contexts[0]) <= {1} and set(two.contexts[1]) <= {0}
    again = disco_contexts(6, np.random.default_rng(3))
    assert again.contexts == plan.contexts


# ---------------------------------------------------------------- confidence selection

AR = [0.9, 0.1, 0.5, 0.4]
NAR = [0.8, 0.2, 0.3, 0.6]
FULL = MaskPlan(4, (), (0, 1, 2, 3), (0, 1, 2, 3))


def test_low_inter_worked_example():
    assert select_confidence(FULL, AR, NAR, "low-inter", 0.5).mutual == (1, 2)


def test_high_inter_worked_example():
    assert select_confidence(FULL, AR, NAR, "high-inter", 0.5).mutual == (0, 3)


def test_union_strategies_by_hand():
    # max scores [.9, .2, .5, .6] -> top two {0, 3}; min scores [.8, .1, .3, .4] -> bottom two {1, 2}
    assert select_confidence(FULL, AR, NAR, "high-union", 0.5).mutual == (0, 3)
    assert select_confidence(FULL, AR, NAR, "low-union", 0.5).mutual == (1, 2)


def test_all_is_identity():
    assert select_confidence(FULL, AR, NAR, "all") is FULL


def test_ties_prefer_lower_index():
    plan = MaskPlan(4, (), (0, 1, 2, 3), (0, 1, 2, 3))
    flat = [0.5] * 4
    assert select_confidence(plan, flat, flat, "high-inter", 0.5).mutual == (0, 1)


def test_selection_errors_and_empty():
    with pytest.raises(ValueError):
        select_confidence(FULL, AR, NAR, "median")
    with pytest.raises(ValueError):
        select_confidence(FULL, AR, NAR, "high-inter", 0.0)
    with pytest.raises(ValueError):
        select_confidence(FULL, AR[:3], NAR, "high-inter")
    with pytest.raises(ValueError):
        select_confidence(FULL, AR, NAR, "random")
    empty = MaskPlan(3, (0, 1, 2), (), ())
    assert select_confidence(empty, [], [], "high-inter").mutual == ()


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12), st.floats(0.05, 1.0), st.integers(0, 2 ** 31),
       st.sampled_from(["random", "high-inter", "high-union", "low-inter", "low-union"]))
def test_selection_size(n, fraction, seed, strategy):
    rng = np.random.default_rng(seed)
    plan = cmlm_mask(n, rng)
    m = len(plan.mutual)
    out = select_confidence(plan, rng.random(m), rng.random(m), strategy, fraction, rng)
    assert len(out.mutual) == math.ceil(fraction * m)
    assert set(out.mutual) <= set(plan.mutual)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2 ** 31))
def test_high_and_low_halves_are_complementary(half, seed):
    rng = np.random.default_rng(seed)
    n = 2 * half
    plan = MaskPlan(n, (), tuple(range(n)), tuple(range(n)))
    ar, nar = rng.random(n), rng.random(n)
    for hi, lo in (("high-inter", "low-union"), ("high-union", "low-inter")):
        a = set(select_confidence(plan, ar, nar, hi, 0.5).mutual)
        b = set(select_confidence(plan, ar, nar, lo, 0.5).mutual)
        assert a | b == set(range(n)) and not a & b
