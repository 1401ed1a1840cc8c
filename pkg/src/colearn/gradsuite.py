"""Finite-difference checks of every training objective on a tiny model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Batch, gen_synthetic
from .model import ModelConfig
from .tensorcore import GradCheckReport, Tape

TINY_MODEL = dict(vocab_size=8, d_model=8, d_hidden=16, n_heads=1, n_enc_layers=1,
                  n_dec_layers=1, max_len=8, dropout=0.0)


@dataclass
class SuiteResult:
    reports: dict[str, GradCheckReport]

    @property
    def max_rel(self) -> float:
        return max(r.max_rel for r in self.reports.values())

    def worst(self) -> tuple[str, GradCheckReport]:
        return max(self.reports.items(), key=lambda kv: kv[1].max_rel)


def _check_mode(trainer, batch, plans, mode: str, eps: float, max_per_leaf, rng) -> dict:
    """All components of one objective share the perturbed forward passes."""
    params = trainer.model.params
    trainer.pinned_targets = {}

    def bundle():
        return trainer.forward_losses(batch, plans, train=False)

    names = list(bundle().components) + ["total"]

    def values() -> np.ndarray:
        b = bundle()
        v = np.array([float(b.components[n].data) for n in names[:-1]] + [float(b.total.data)])
        if not np.all(np.isfinite(v)):
            raise FloatingPointError("non-finite objective")
        return v

    analytic = []
    for name in names:
        params.zero_grad()
        with Tape() as tape:
            b = bundle()
            out = b.total if name == "total" else b.components[name]
        if out.requires_grad:
            tape.backward(out)
        analytic.append(params.grad_flat.copy())
    analytic = np.stack(analytic, axis=1)  # [n_params, n_objectives]

    flat = params.flat
    idx: list[int] = []
    for pname in params.names():
        o, s = params.offsets[pname]
        chosen = np.arange(s)
        if max_per_leaf is not None and s > max_per_leaf:
            chosen = np.sort(rng.choice(s, max_per_leaf, replace=False))
        idx.extend((o + chosen).tolist())
    max_rel = np.zeros(len(names))
    max_abs = np.zeros(len(names))
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = values()
        flat[i] = orig - eps
        fm = values()
        flat[i] = orig
        num = (fp - fm) / (2 * eps)
        err = np.abs(analytic[i] - num)
        max_abs = np.maximum(max_abs, err)
        max_rel = np.maximum(max_rel, err / np.maximum(1e-8, np.abs(analytic[i]) + np.abs(num)))
    trainer.pinned_targets = None
    return {f"{mode}:{n}": GradCheckReport(float(r), float(a), len(idx))
            for n, r, a in zip(names, max_rel, max_abs)}


def run_suite(model_overrides: dict | None = None, seed: int = 0, eps: float = 1e-3,
              max_per_leaf: int | None = None, batch_size: int = 2,
              modes=("dcmcl", "dcmcl_hyb")) -> SuiteResult:
    """Check each loss component and the full objective of every mode.

    Stop-gradient targets are pinned to their unperturbed values so that the
    finite differences see the same surrogate the tape differentiates.
    ``max_per_leaf`` samples that many entries per parameter tensor
    (``None`` checks every entry).
    """
    from .trainer import Trainer, TrainConfig, make_plans

    rng = np.random.default_rng(seed)
    cfg = ModelConfig(**{**TINY_MODEL, **(model_overrides or {})})
    corpus = gen_synthetic("lexicon", batch_size, cfg.vocab_size, (2, min(5, cfg.max_len - 2)), rng,
                           max_len=cfg.max_len)
    batch = Batch.from_pairs(corpus.pairs, list(range(batch_size)))
    reports: dict[str, GradCheckReport] = {}
    for mode in modes:
        tcfg = TrainConfig(seed=seed, use_hybrid=mode == "dcmcl_hyb")
        trainer = Trainer(cfg, tcfg, corpus)
        plans = make_plans(batch, tcfg, np.random.default_rng(seed + 1))
        reports.update(_check_mode(trainer, batch, plans, mode, eps, max_per_leaf,
                                   np.random.default_rng(seed)))
    return SuiteResult(reports)
