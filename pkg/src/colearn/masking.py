"""Target-side masking plans and confidence-based selection of mutual-learning tokens."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

STRATEGIES = ("all", "random", "high-inter", "high-union", "low-inter", "low-union")


@dataclass(frozen=True)
class MaskPlan:
    """Partition of target positions ``0..n_target-1`` into observed / masked sets.

    ``mutual`` is the subset used for token-level mutual learning.  For
    DisCo-style plans ``contexts[i]`` lists the positions visible to
    position ``i``.  The AR side always conditions on ``y_<t``.
    """

    n_target: int
    observed: tuple[int, ...]
    masked: tuple[int, ...]
    mutual: tuple[int, ...]
    contexts: tuple[tuple[int, ...], ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        obs, msk = set(self.observed), set(self.masked)
        if obs & msk or obs | msk != set(range(self.n_target)):
            raise ValueError("observed and masked sets must partition the target positions")

    def masked_array(self) -> np.ndarray:
        out = np.zeros(self.n_target, dtype=bool)
        out[list(self.masked)] = True
        return out

    def mutual_array(self) -> np.ndarray:
        out = np.zeros(self.n_target, dtype=bool)
        out[list(self.mutual)] = True
        return out

    def with_mutual(self, mutual) -> "MaskPlan":
        return MaskPlan(self.n_target, self.observed, self.masked,
                        tuple(sorted(int(i) for i in mutual)), self.contexts)


def _plan(n_target: int, masked) -> MaskPlan:
    masked = tuple(sorted(int(i) for i in masked))
    observed = tuple(i for i in range(n_target) if i not in set(masked))
    return MaskPlan(n_target, observed, masked, masked)


def cmlm_mask(n_target: int, rng: np.random.Generator) -> MaskPlan:
    """Mask ``n ~ Uniform{1..n_target}`` positions drawn without replacement."""
    if n_target < 1:
        raise ValueError("n_target must be at least 1")
    n = int(rng.integers(1, n_target + 1))
    return _plan(n_target, rng.choice(n_target, size=n, replace=False))


def fixed_ratio_mask(n_target: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1], got {ratio}")
    if n_target < 1:
        raise ValueError("n_target must be at least 1")
    if ratio == 0.0:
        return _plan(n_target, ())
    n = min(n_target, max(1, round(ratio * n_target)))
    return _plan(n_target, rng.choice(n_target, size=n, replace=False))


def disco_contexts(n_target: int, rng: np.random.Generator) -> MaskPlan:
    """Independent random observed context per position; every position is predicted."""
    if n_target < 1:
        raise ValueError("n_target must be at least 1")
    contexts = []
    for i in range(n_target):
        others = np.array([j for j in range(n_target) if j != i], dtype=np.int64)
        size = int(rng.integers(0, n_target))
        chosen = rng.choice(others, size=size, replace=False) if size else []
        contexts.append(tuple(sorted(int(j) for j in chosen)))
    everything = tuple(range(n_target))
    return MaskPlan(n_target, (), everything, everything, tuple(contexts))


def select_confidence(plan: MaskPlan, conf_ar, conf_nar, strategy: str = "all",
                      fraction: float = 0.5, rng: np.random.Generator | None = None) -> MaskPlan:
    """Reduce the mutual-learning set by gold-token confidence.

    ``conf_ar`` / ``conf_nar`` are aligned with ``plan.mutual``.  Ties keep
    the lower position index first.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    positions = np.asarray(plan.mutual, dtype=np.int64)
    if strategy == "all" or positions.size == 0:
        return plan
    k = math.ceil(fraction * positions.size)
    if strategy == "random":
        if rng is None:
            raise ValueError("random selection needs a generator")
        return plan.with_mutual(rng.choice(positions, size=k, replace=False))
    ar = np.asarray(conf_ar, dtype=np.float64)
    nar = np.asarray(conf_nar, dtype=np.float64)
    if ar.shape != positions.shape or nar.shape != positions.shape:
        raise ValueError("confidence arrays must align with the mutual-learning set")
    if strategy in ("high-inter", "low-union"):
        score = np.minimum(ar, nar)
    else:
        score = np.maximum(ar, nar)
    # One ranking (score descending, lower index first on ties) serves both
    # ends, so high-* and low-* halves over the same scores are complements.
    ranked = np.lexsort((np.arange(positions.size), -score))
    chosen = ranked[:k] if strategy.startswith("high") else ranked[positions.size - k:]
    return plan.with_mutual(positions[chosen])
