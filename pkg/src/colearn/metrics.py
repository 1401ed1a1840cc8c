"""Evaluation metrics: corpus BLEU, repeated-token percentage, AR/NAR state similarity."""

from __future__ import annotations

import math
from collections import Counter

import numpy as np

from . import tensorcore as tc


def _ngrams(seq, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu_stats(hypotheses, references, max_n: int = 4):
    """Clipped n-gram matches, n-gram totals, hypothesis and reference lengths."""
    if len(hypotheses) != len(references):
        raise ValueError("hypothesis and reference counts differ")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(0, len(hyp) - n + 1)
    return matches, totals, hyp_len, ref_len


def corpus_bleu(hypotheses, references, max_n: int = 4, smoothing: bool = True) -> float:
    """Corpus BLEU in [0, 100].

    With ``smoothing`` the k-th zero n-gram count is replaced by 1/2^k.
    """
    if len(hypotheses) == 0:
        raise ValueError("empty hypothesis set")
    matches, totals, hyp_len, ref_len = bleu_stats(hypotheses, references, max_n)
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    k = 0
    for m, t in zip(matches, totals):
        if m == 0:
            if not smoothing or t == 0:
                return 0.0
            k += 1
            log_p += math.log((1.0 / 2 ** k) / t)
        else:
            log_p += math.log(m / t)
    bp = min(0.0, 1.0 - ref_len / hyp_len)
    return 100.0 * math.exp(bp + log_p / max_n)


def repeated_token_pct(hypotheses) -> float:
    """Percentage of tokens identical to their left neighbour."""
    repeats = total = 0
    for hyp in hypotheses:
        hyp = list(hyp)
        total += len(hyp)
        repeats += sum(1 for a, b in zip(hyp, hyp[1:]) if a == b)
    return 100.0 * repeats / total if total else 0.0


def exact_match(hypotheses, references) -> float:
    pairs = list(zip(hypotheses, references))
    return sum(list(h) == list(r) for h, r in pairs) / len(pairs)


def hidden_similarity(model, corpus, mask_ratio: float = 0.5, seed: int = 0,
                      batch_budget: int = 512) -> float:
    """Mean cosine between AR and NAR decoder states over all real target positions.

    AR states are teacher-forced; the NAR input is masked at a fixed ratio.
    """
    from .data import batch_by_tokens
    from .masking import fixed_ratio_mask

    rng = np.random.default_rng(seed)
    total = 0.0
    count = 0
    for batch in batch_by_tokens(corpus, batch_budget):
        plans = [fixed_ratio_mask(int(n), mask_ratio, rng) for n in batch.tgt_len]
        E_ar = model.encode(batch.src, side="ar")
        E_nar = E_ar if model.config.share_encoder else model.encode(batch.src, side="nar")
        H_ar = model.ar_states(E_ar, batch.ar_input(), src=batch.src).data
        H_nar = model.nar_states(E_nar, batch.nar_input(plans), src=batch.src).data
        real = batch.real_mask()
        a, b = H_ar[real], H_nar[real]
        num = (a * b).sum(axis=-1)
        den = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1) + tc.COS_FLOOR
        total += float((num / den).sum())
        count += int(real.sum())
    return total / count if count else 0.0
