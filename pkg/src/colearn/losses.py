"""Training objectives: multi-task NLL, token-level mutual KL, sequence-level
contrastive loss, hybrid-teacher terms, and their weighted composition.

Distributions enter as log-probabilities of shape [B, N, V] (a single
sentence [N, V] is also accepted).  Position sets are boolean masks with the
leading shape of the distribution; every mean divides by the number of
selected tokens in the whole batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

LENGTH_WEIGHT = 0.1

_REQUIRED = {
    "dcmcl": (("ml_ar", "ml_nar"), ("tml_ar", "tml_nar"), ("scl_ar", "scl_nar")),
    "dcmcl_hyb": (("ml_ar", "ml_nar", "ml_hyb"), ("tml_ar_hyb", "tml_nar_hyb"),
                  ("scl_ar_hyb", "scl_nar_hyb")),
}


def _zero(like: Tensor | None = None) -> Tensor:
    return Tensor(np.zeros((), dtype=np.float64 if like is None else like.dtype))


def _position_weights(positions, shape: tuple[int, ...]) -> np.ndarray:
    positions = np.asarray(positions)
    if positions.dtype == bool:
        if positions.shape != shape:
            raise ValueError(f"position mask shape {positions.shape} != {shape}")
        return positions
    mask = np.zeros(shape, dtype=bool)
    if positions.size:
        if len(shape) != 1:
            raise ValueError("index lists are only accepted for single sentences")
        mask[positions.astype(np.int64)] = True
    return mask


def _weighted_mean(values: Tensor, mask: np.ndarray) -> Tensor:
    total = int(mask.sum())
    if total == 0:
        return _zero(values)
    w = mask.astype(values.dtype) / total
    return tc.sum(tc.mul(values, w))


def nll(logp: Tensor, gold, positions, smoothing: float = 0.1) -> Tensor:
    """Label-smoothed NLL averaged over the selected positions.

    Per token: ``(1 - eps) * -log p(gold) + eps * mean_v(-log p(v))``.
    """
    gold = np.asarray(gold, dtype=np.int64)
    mask = _position_weights(positions, gold.shape)
    if not mask.any():
        return _zero(logp)
    gold_lp = tc.gather_logprobs(logp, np.where(mask, gold, 0))
    if smoothing:
        per_token = tc.add(tc.scale(gold_lp, -(1.0 - smoothing)),
                           tc.scale(tc.mean(logp, axis=-1), -smoothing))
    else:
        per_token = tc.scale(gold_lp, -1.0)
    return _weighted_mean(per_token, mask)


def hybrid_nll(logp_hyb: Tensor | None, gold, real, smoothing: float = 0.1) -> Tensor:
    """Hybrid-teacher NLL over every real target position."""
    if logp_hyb is None:
        raise ValueError("hybrid teacher is disabled")
    return nll(logp_hyb, gold, real, smoothing)


def tml_pair(logp_ar: Tensor, logp_nar: Tensor, mutual) -> tuple[Tensor, Tensor]:
    """Two-direction token-level KL on the mutual-learning positions.

    ``tml_ar`` = mean KL(stopgrad(p_nar) || p_ar), ``tml_nar`` the reverse.
    """
    mask = _position_weights(mutual, logp_ar.shape[:-1])
    if not mask.any():
        return _zero(logp_ar), _zero(logp_nar)
    kl_ar = tc.kl_log_rows(logp_nar, logp_ar, detach_p=True)
    kl_nar = tc.kl_log_rows(logp_ar, logp_nar, detach_p=True)
    return _weighted_mean(kl_ar, mask), _weighted_mean(kl_nar, mask)


def tml_to_target(logp_student: Tensor, logp_target: Tensor, mutual) -> Tensor:
    """Mean KL(stopgrad(target) || student) on the mutual-learning positions."""
    mask = _position_weights(mutual, logp_student.shape[:-1])
    if not mask.any():
        return _zero(logp_student)
    return _weighted_mean(tc.kl_log_rows(logp_target, logp_student, detach_p=True), mask)


def mean_pool(H: Tensor, real: np.ndarray | None = None) -> Tensor:
    """Average states over non-padding positions: [B, N, d] -> [B, d]."""
    if H.data.ndim == 2:
        H = tc.reshape(H, (1,) + H.shape)
    B, N = H.shape[0], H.shape[1]
    if real is None:
        real = np.ones((B, N), dtype=bool)
    real = np.asarray(real, dtype=bool).reshape(B, N)
    w = real / real.sum(axis=1, keepdims=True)
    return tc.sum(tc.mul(H, w[..., None].astype(H.dtype)), axis=1)


def contrastive(anchors: Tensor, targets: Tensor) -> Tensor:
    """In-batch contrastive loss: row b's positive is target b, the rest negatives."""
    B = anchors.shape[0]
    if B == 0:
        raise ValueError("contrastive loss needs at least one sentence")
    sim = tc.cosine_matrix(anchors, targets)
    diag = tc.gather_logprobs(tc.log_softmax(sim), np.arange(B))
    return tc.scale(tc.mean(diag), -1.0)


def scl_pair(h_ar: Tensor, h_nar: Tensor) -> tuple[Tensor, Tensor]:
    """Symmetric contrastive pair on sentence vectors [B, d] (no detachment)."""
    if h_ar.shape[0] == 0:
        raise ValueError("contrastive loss needs at least one sentence")
    sim = tc.cosine_matrix(h_ar, h_nar)
    idx = np.arange(h_ar.shape[0])
    scl_ar = tc.scale(tc.mean(tc.gather_logprobs(tc.log_softmax(sim), idx)), -1.0)
    scl_nar = tc.scale(tc.mean(tc.gather_logprobs(tc.log_softmax(tc.transpose(sim)), idx)), -1.0)
    return scl_ar, scl_nar


def length_loss(length_logits: Tensor, lengths) -> Tensor:
    """Cross-entropy of the length head against gold lengths (class k = length k+1)."""
    lengths = np.asarray(lengths, dtype=np.int64)
    lp = tc.log_softmax(length_logits)
    picked = tc.gather_logprobs(lp, lengths - 1)
    return tc.scale(tc.mean(picked), -1.0)


@dataclass
class LossBundle:
    components: dict[str, Tensor]
    lambda_tml: float
    lambda_scl: float
    mode: str
    total: Tensor
    weights: dict[str, float] = field(default_factory=dict)

    def values(self) -> dict[str, float]:
        out = {k: float(v.data) for k, v in self.components.items()}
        out["total"] = float(self.total.data)
        return out


def compose(components: dict[str, Tensor], lambda_tml: float = 1.0, lambda_scl: float = 1.0,
            mode: str = "dcmcl") -> LossBundle:
    """Weighted objective: NLL terms + lambda_tml * TML terms + lambda_scl * SCL terms.

    TML/SCL components may be omitted only when their weight is zero.  An
    optional ``len`` component is added with weight 0.1.
    """
    if mode not in _REQUIRED:
        raise ValueError(f"unknown mode {mode!r}")
    if lambda_tml < 0 or lambda_scl < 0:
        raise ValueError("loss weights must be nonnegative")
    ml, tml, scl = _REQUIRED[mode]
    weights: dict[str, float] = {}
    for names, w in ((ml, 1.0), (tml, lambda_tml), (scl, lambda_scl)):
        for name in names:
            if name not in components:
                if w == 0.0:
                    continue
                raise KeyError(f"missing loss component {name!r} for mode {mode!r}")
            weights[name] = w
    if "len" in components:
        weights["len"] = LENGTH_WEIGHT
    total = None
    for name, w in weights.items():
        term = components[name] if w == 1.0 else tc.scale(components[name], w)
        total = term if total is None else tc.add(total, term)
    return LossBundle(dict(components), lambda_tml, lambda_scl, mode, total, weights)
