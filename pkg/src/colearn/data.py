"""Toy parallel corpora, vocabulary, token-budget batching and sequence-level distillation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .masking import MaskPlan
from .model import BOS, EOS, MASK, N_SPECIAL, PAD

log = logging.getLogger(__name__)

SPECIAL_SYMBOLS = ("<pad>", "<bos>", "<eos>", "<mask>")
TASKS = ("copy", "reverse", "lexicon")


class Vocab:
    """String <-> id table with the four special ids reserved at 0..3."""

    def __init__(self, symbols):
        symbols = list(symbols)
        if set(symbols) & set(SPECIAL_SYMBOLS):
            raise ValueError("special symbols cannot appear in the vocabulary")
        self.itos = list(SPECIAL_SYMBOLS) + symbols
        self.stoi = {s: i for i, s in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate vocabulary symbols")

    @classmethod
    def integers(cls, vocab_size: int) -> "Vocab":
        """Vocabulary whose symbol for id ``v`` is ``str(v)``."""
        return cls(str(v) for v in range(N_SPECIAL, vocab_size))

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens) -> list[int]:
        try:
            return [self.stoi[t] for t in tokens]
        except KeyError as e:
            raise ValueError(f"unknown token {e.args[0]!r}") from None

    def decode(self, ids) -> list[str]:
        return [self.itos[int(i)] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos[N_SPECIAL:]) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        return cls(s for s in lines if s)


@dataclass
class ParallelCorpus:
    pairs: list[tuple[list[int], list[int]]]
    vocab: Vocab

    def __post_init__(self):
        for k, (s, t) in enumerate(self.pairs):
            if not s or not t:
                raise ValueError(f"pair {k} has an empty side")
            for seq in (s, t):
                if min(seq) < N_SPECIAL or max(seq) >= len(self.vocab):
                    raise ValueError(f"pair {k} holds a special or out-of-range id")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def sources(self) -> list[list[int]]:
        return [s for s, _ in self.pairs]

    @property
    def targets(self) -> list[list[int]]:
        return [t for _, t in self.pairs]

    def save(self, prefix) -> None:
        """Write ``prefix.src`` / ``prefix.tgt``, one space-separated sentence per line."""
        prefix = str(prefix)
        for side, seqs in (("src", self.sources), ("tgt", self.targets)):
            lines = (" ".join(self.vocab.decode(s)) for s in seqs)
            Path(f"{prefix}.{side}").write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, prefix, vocab: Vocab) -> "ParallelCorpus":
        prefix = str(prefix)
        src = read_lines(f"{prefix}.src", vocab)
        tgt = read_lines(f"{prefix}.tgt", vocab)
        if len(src) != len(tgt):
            raise ValueError(f"{prefix}: {len(src)} source vs {len(tgt)} target lines")
        return cls(list(zip(src, tgt)), vocab)


def read_lines(path, vocab: Vocab) -> list[list[int]]:
    text = Path(path).read_text(encoding="utf-8")
    return [vocab.encode(line.split()) for line in text.splitlines() if line.strip()]


def lexicon_target(src, mapping: dict[int, int]) -> list[int]:
    """Map every token through ``mapping`` then swap adjacent pairs at even offsets."""
    out = [mapping[t] for t in src]
    for i in range(0, len(out) - 1, 2):
        out[i], out[i + 1] = out[i + 1], out[i]
    return out


def lexicon_mapping(vocab_size: int, rng: np.random.Generator) -> dict[int, int]:
    ids = np.arange(N_SPECIAL, vocab_size)
    return dict(zip(ids.tolist(), rng.permutation(ids).tolist()))


def gen_synthetic(task: str, n_pairs: int, vocab_size: int, len_range: tuple[int, int],
                  rng: np.random.Generator, max_len: int = 32,
                  mapping: dict[int, int] | None = None) -> ParallelCorpus:
    """Random source sentences with a deterministic target rule.

    For ``lexicon`` the dictionary is drawn from ``rng`` unless given.
    """
    lo, hi = len_range
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    if vocab_size < 8:
        raise ValueError("vocab_size must be at least 8")
    if not 1 <= lo <= hi <= max_len - 2:
        raise ValueError(f"length range {len_range} must satisfy 1 <= min <= max <= {max_len - 2}")
    if n_pairs < 1:
        raise ValueError("n_pairs must be positive")
    if task == "lexicon" and mapping is None:
        mapping = lexicon_mapping(vocab_size, rng)
    pairs = []
    for _ in range(n_pairs):
        n = int(rng.integers(lo, hi + 1))
        src = rng.integers(N_SPECIAL, vocab_size, size=n).tolist()
        if task == "copy":
            tgt = list(src)
        elif task == "reverse":
            tgt = src[::-1]
        else:
            tgt = lexicon_target(src, mapping)
        pairs.append((src, tgt))
    return ParallelCorpus(pairs, Vocab.integers(vocab_size))


def gen_splits(task: str, sizes, vocab_size: int, len_range: tuple[int, int],
               rng: np.random.Generator, max_len: int = 32) -> list[ParallelCorpus]:
    """Several corpora (e.g. train/valid) drawn under one shared lexicon."""
    mapping = lexicon_mapping(vocab_size, rng) if task == "lexicon" else None
    return [gen_synthetic(task, n, vocab_size, len_range, rng, max_len, mapping) for n in sizes]


@dataclass
class Batch:
    """Padded source/target id matrices for a group of sentence pairs.

    ``tgt`` holds the real target tokens only; decoder views add <bos>/<eos>.
    """

    indices: list[int]
    src: np.ndarray
    src_len: np.ndarray
    tgt: np.ndarray
    tgt_len: np.ndarray
    plans: list[MaskPlan] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.indices)

    @classmethod
    def from_pairs(cls, pairs, indices=None) -> "Batch":
        pairs = list(pairs)
        src_len = np.array([len(s) for s, _ in pairs])
        tgt_len = np.array([len(t) for _, t in pairs])
        src = np.full((len(pairs), src_len.max()), PAD, dtype=np.int64)
        tgt = np.full((len(pairs), tgt_len.max()), PAD, dtype=np.int64)
        for b, (s, t) in enumerate(pairs):
            src[b, :len(s)] = s
            tgt[b, :len(t)] = t
        return cls(list(indices) if indices is not None else list(range(len(pairs))),
                   src, src_len, tgt, tgt_len)

    def real_mask(self) -> np.ndarray:
        """[B, N+1] True on real target tokens plus <eos>."""
        n = self.tgt.shape[1] + 1
        return np.arange(n)[None, :] <= self.tgt_len[:, None]

    def token_mask(self) -> np.ndarray:
        """[B, N+1] True on real target tokens only."""
        n = self.tgt.shape[1] + 1
        return np.arange(n)[None, :] < self.tgt_len[:, None]

    def gold(self) -> np.ndarray:
        """Targets with <eos> appended: [B, N+1]."""
        out = np.concatenate([self.tgt, np.full((self.size, 1), PAD)], axis=1)
        out[np.arange(self.size), self.tgt_len] = EOS
        return out

    def ar_input(self) -> np.ndarray:
        """<bos>-shifted decoder input aligned with :meth:`gold`."""
        out = np.concatenate([np.full((self.size, 1), BOS), self.tgt], axis=1)
        return out

    def nar_input(self, plans=None) -> np.ndarray:
        """Gold targets (with <eos>) where masked positions carry [M]."""
        plans = self.plans if plans is None else plans
        out = self.gold()
        for b, plan in enumerate(plans):
            if plan.masked:
                out[b, list(plan.masked)] = MASK
        return out

    def mask_matrix(self, plans=None, attr: str = "masked") -> np.ndarray:
        plans = self.plans if plans is None else plans
        out = np.zeros((self.size, self.tgt.shape[1] + 1), dtype=bool)
        for b, plan in enumerate(plans):
            idx = list(getattr(plan, attr))
            if idx:
                out[b, idx] = True
        return out

    def disco_context_matrix(self, plans=None) -> np.ndarray:
        """[B, N+1, N+1] visibility for DisCo plans; <eos> is visible to every position."""
        plans = self.plans if plans is None else plans
        n = self.tgt.shape[1] + 1
        out = np.zeros((self.size, n, n), dtype=bool)
        for b, plan in enumerate(plans):
            for i, ctx in enumerate(plan.contexts):
                if ctx:
                    out[b, i, list(ctx)] = True
            out[b, :self.tgt_len[b], self.tgt_len[b]] = True
        return out


def batch_by_tokens(corpus: ParallelCorpus, budget: int, rng: np.random.Generator | None = None,
                    shuffle: bool = False) -> list[Batch]:
    """Length-sorted greedy batches with sum(max(len_src, len_tgt)) <= budget."""
    sizes = np.array([max(len(s), len(t)) for s, t in corpus.pairs])
    too_long = np.flatnonzero(sizes > budget)
    if too_long.size:
        k = int(too_long[0])
        raise ValueError(f"sentence {k} (length {sizes[k]}) exceeds the token budget {budget}")
    order = np.arange(len(corpus))
    if shuffle:
        if rng is None:
            raise ValueError("shuffling needs a generator")
        order = rng.permutation(order)
    order = order[np.argsort(sizes[order], kind="stable")]
    groups: list[list[int]] = []
    cur: list[int] = []
    used = 0
    for i in order.tolist():
        if cur and used + sizes[i] > budget:
            groups.append(cur)
            cur, used = [], 0
        cur.append(i)
        used += int(sizes[i])
    if cur:
        groups.append(cur)
    if shuffle:
        groups = [groups[j] for j in rng.permutation(len(groups))]
    return [Batch.from_pairs((corpus.pairs[i] for i in g), g) for g in groups]


@dataclass
class DistillStats:
    n_empty: int = 0
    n_truncated: int = 0


def distill(teacher, corpus: ParallelCorpus, decode_config=None,
            stats: DistillStats | None = None) -> ParallelCorpus:
    """Replace targets by the teacher's beam-search outputs.

    ``teacher`` is a model or a checkpoint path.  Empty hypotheses fall back
    to the original target; over-long ones are cut at ``max_len - 1``.
    """
    from .checkpoint import load_checkpoint
    from .decoding import DecodeConfig, beam_search_batch

    if not hasattr(teacher, "params"):
        teacher = load_checkpoint(teacher).model
    cfg = decode_config or DecodeConfig(max_decode_len=teacher.config.max_len - 1)
    stats = stats if stats is not None else DistillStats()
    limit = teacher.config.max_len - 1
    hyps = beam_search_batch(teacher, corpus.sources, cfg)
    pairs = []
    for (src, tgt), (hyp, _, finished) in zip(corpus.pairs, hyps):
        if not finished or len(hyp) > limit:
            if len(hyp) > limit or not finished:
                stats.n_truncated += 1
            hyp = hyp[:limit]
        if not hyp:
            stats.n_empty += 1
            hyp = list(tgt)
        pairs.append((list(src), list(hyp)))
    if stats.n_empty or stats.n_truncated:
        log.info("distillation: %d empty, %d truncated hypotheses", stats.n_empty, stats.n_truncated)
    return ParallelCorpus(pairs, corpus.vocab)
