"""Inference: length-normalised beam search for the AR decoder and iterative
mask-predict with a length beam for the NAR decoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import BOS, EOS, MASK, N_SPECIAL, PAD

AR_BANNED = (PAD, BOS, MASK)


@dataclass
class DecodeConfig:
    beam_size: int = 4
    length_beam: int = 5
    nar_iterations: int = 10
    max_decode_len: int = 31
    alpha: float = 1.0

    def __post_init__(self):
        for f in ("beam_size", "length_beam", "nar_iterations", "max_decode_len"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.length_beam > self.max_decode_len:
            raise ValueError("length_beam cannot exceed max_decode_len")


StepFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def beam_search(step_fn: StepFn, n_sentences: int, beam_size: int, max_len: int,
                alpha: float = 1.0, bos: int = BOS, eos: int = EOS,
                banned=AR_BANNED) -> list[tuple[list[int], float, bool]]:
    """Batched beam search over a next-token scorer.

    ``step_fn(prefixes [R, t], sentence_ids [R])`` returns log-probabilities
    [R, V] for the token following each prefix (prefixes start with ``bos``).
    Hypotheses are ranked by ``sum log p / length ** alpha`` with ties going
    to the lexicographically smaller token sequence.  Returns, per sentence,
    ``(tokens without eos, score, finished)``.
    """
    live: list[list[tuple[tuple[int, ...], float]]] = [[((), 0.0)] for _ in range(n_sentences)]
    done: list[list[tuple[tuple[int, ...], float, bool]]] = [[] for _ in range(n_sentences)]
    active = set(range(n_sentences))

    def norm(tokens, score):
        return score / (len(tokens) ** alpha)

    for t in range(max_len):
        rows = [(s, toks, sc) for s in sorted(active) for toks, sc in live[s]]
        if not rows:
            break
        prefixes = np.array([(bos,) + toks for _, toks, _ in rows], dtype=np.int64)
        sent_ids = np.array([s for s, _, _ in rows], dtype=np.int64)
        logp = np.array(step_fn(prefixes, sent_ids), dtype=np.float64)
        logp[:, list(banned)] = -np.inf
        k_cand = min(2 * beam_size, logp.shape[1])
        top = np.argsort(-logp, axis=1, kind="stable")[:, :k_cand]
        cands: dict[int, list] = {s: [] for s in active}
        for r, (s, toks, sc) in enumerate(rows):
            for tok in top[r]:
                lp = logp[r, tok]
                if not np.isfinite(lp):
                    continue
                cands[s].append((toks + (int(tok),), sc + float(lp)))
        last_step = t == max_len - 1
        for s in list(active):
            # finished hypotheses keep competing for beam slots
            pool = [(toks, sc, "old") for toks, sc, _ in done[s]]
            pool += [(toks, sc, "new" if toks[-1] == eos else "live") for toks, sc in cands[s]]
            pool.sort(key=lambda c: (-norm(c[0], c[1]), c[0]))
            pool = pool[:beam_size]
            done[s] += [(toks, sc, True) for toks, sc, kind in pool if kind == "new"]
            live[s] = [(toks, sc) for toks, sc, kind in pool if kind == "live"]
            if not live[s]:
                active.discard(s)
            elif last_step:
                done[s] += [(toks, sc, False) for toks, sc in live[s]]
                live[s] = []
                active.discard(s)
    results = []
    for s in range(n_sentences):
        best = min(done[s], key=lambda c: (-norm(c[0], c[1]), c[0]))
        toks, sc, fin = best
        hyp = list(toks[:-1]) if fin and toks and toks[-1] == eos else list(toks)
        results.append((hyp, norm(toks, sc), bool(fin and toks[-1] == eos)))
    return results


def greedy_search(step_fn: StepFn, n_sentences: int, max_len: int, bos: int = BOS,
                  eos: int = EOS, banned=AR_BANNED) -> list[list[int]]:
    out: list[list[int]] = [[] for _ in range(n_sentences)]
    active = list(range(n_sentences))
    for _ in range(max_len):
        if not active:
            break
        prefixes = np.array([[bos] + out[s] for s in active], dtype=np.int64)
        logp = np.array(step_fn(prefixes, np.array(active)), dtype=np.float64)
        logp[:, list(banned)] = -np.inf
        nxt = np.argmax(logp, axis=1)
        still = []
        for s, tok in zip(active, nxt):
            if tok == eos:
                continue
            out[s].append(int(tok))
            still.append(s)
        active = still
    return out


def _pad_sources(sources) -> np.ndarray:
    width = max(len(s) for s in sources)
    src = np.full((len(sources), width), PAD, dtype=np.int64)
    for i, s in enumerate(sources):
        src[i, :len(s)] = s
    return src


def ar_step_fn(model, sources) -> StepFn:
    """Next-token scorer for the model's AR decoder (encodes the sources once)."""
    src = _pad_sources(sources)
    E = model.encode(src, side="ar").data

    def step(prefixes, sent_ids):
        from .tensorcore import Tensor
        H = model.ar_states(Tensor(E[sent_ids]), prefixes, src=src[sent_ids])
        last = Tensor(H.data[:, -1])
        return model.output_logprobs(last, "ar").data

    return step


def beam_search_batch(model, sources, config: DecodeConfig | None = None):
    """AR beam search for a list of source sentences."""
    config = config or DecodeConfig(max_decode_len=model.config.max_len - 1)
    if not sources:
        return []
    step = ar_step_fn(model, sources)
    return beam_search(step, len(sources), config.beam_size,
                       min(config.max_decode_len, model.config.max_len), config.alpha)


def remask_count(n: int, total_iters: int, t: int) -> int:
    """Tokens to re-mask after iteration ``t`` of ``total_iters``: floor(n (T - t) / T)."""
    if not 1 <= t <= total_iters:
        raise ValueError(f"iteration {t} outside 1..{total_iters}")
    return (n * (total_iters - t)) // total_iters


def mask_predict_batch(model, sources, config: DecodeConfig | None = None,
                       lengths=None, return_all: bool = False):
    """Iterative mask-predict for a list of sources.

    Each source is decoded at its ``length_beam`` most likely lengths (or at
    the given ``lengths``); the candidate with the best mean token
    log-probability wins.  Returns ``(tokens, score)`` per source.
    """
    from .tensorcore import Tensor

    config = config or DecodeConfig(max_decode_len=model.config.max_len - 1)
    if not sources:
        return []
    src = _pad_sources(sources)
    S = len(sources)
    side = "nar"
    E = model.encode(src, side=side)
    if lengths is None:
        cap = min(config.max_decode_len, model.config.max_len)
        logits = model.predict_length(E, src=src).data[:, :cap]
        order = np.argsort(-logits, axis=1, kind="stable")[:, :config.length_beam]
        cand_len = order + 1
    else:
        cand_len = np.asarray(lengths, dtype=np.int64).reshape(S, -1)
    k = cand_len.shape[1]
    rows = np.repeat(np.arange(S), k)
    L = cand_len.reshape(-1)
    R = L.size
    width = int(L.max()) + 1
    pos = np.arange(width)[None, :]
    real = pos < L[:, None]
    tokens = np.where(real, MASK, PAD)
    tokens[np.arange(R), L] = EOS
    conf = np.zeros((R, width))
    masked = real.copy()
    E_rep = Tensor(E.data[rows])
    src_rep = src[rows]
    T = config.nar_iterations
    for t in range(1, T + 1):
        H = model.nar_states(E_rep, tokens, src=src_rep)
        logp = model.output_logprobs(H, "nar").data.astype(np.float64)
        logp[..., :N_SPECIAL] = -np.inf
        best = logp.argmax(axis=-1)
        best_lp = np.take_along_axis(logp, best[..., None], axis=-1)[..., 0]
        tokens = np.where(masked, best, tokens)
        conf = np.where(masked, best_lp, conf)
        if t == T:
            break
        n_remask = (L * (T - t)) // T
        ranked = np.where(real, conf, np.inf)
        order = np.argsort(ranked, axis=1, kind="stable")
        rank = np.empty_like(order)
        np.put_along_axis(rank, order, np.arange(width)[None, :].repeat(R, 0), axis=1)
        masked = real & (rank < n_remask[:, None])
        tokens = np.where(masked, MASK, tokens)
    score = np.where(real, conf, 0.0).sum(axis=1) / L
    results = []
    for s in range(S):
        cand = [(score[s * k + j], j) for j in range(k)]
        j = max(cand, key=lambda c: (c[0], -c[1]))[1]
        r = s * k + j
        hyp = tokens[r, :L[r]].tolist()
        if return_all:
            results.append((hyp, float(score[r]),
                            [(tokens[s * k + i, :L[s * k + i]].tolist(), float(score[s * k + i]))
                             for i in range(k)]))
        else:
            results.append((hyp, float(score[r])))
    return results


def mask_predict(model, source, config: DecodeConfig | None = None):
    """Single-sentence convenience wrapper around :func:`mask_predict_batch`."""
    return mask_predict_batch(model, [list(source)], config)[0]


def decode_corpus(model, sources, mode: str, config: DecodeConfig | None = None,
                  chunk: int = 256) -> list[list[int]]:
    """Hypotheses for every source using ``mode`` in {"ar", "nar"}."""
    out: list[list[int]] = []
    for i in range(0, len(sources), chunk):
        part = sources[i:i + chunk]
        if mode == "ar":
            out += [h for h, _, _ in beam_search_batch(model, part, config)]
        elif mode == "nar":
            out += [h for h, _ in mask_predict_batch(model, part, config)]
        else:
            raise ValueError(f"unknown decoding mode {mode!r}")
    return out
