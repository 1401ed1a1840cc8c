"""Toy lexicon-translation experiments behind the directional acceptance checks.

Per seed, four models are trained on the same data: the joint model, an
NAR-only and an AR-only baseline, and the joint model with the contrastive
term switched off.  Every model is the average of its best validation
checkpoints, then scored on a held-out test split.
"""

from __future__ import annotations

import dataclasses
import time

import numpy as np

from colearn.data import gen_splits
from colearn.decoding import DecodeConfig, decode_corpus
from colearn.metrics import exact_match, hidden_similarity
from colearn.model import DualDecoderModel, ModelConfig
from colearn.trainer import TrainConfig, Trainer, evaluate_model

SEEDS = (1, 2, 3, 4, 5)
SPLITS = (2000, 200, 200)  # train, validation (checkpoint selection), test
LENGTHS = (4, 12)
MODEL = ModelConfig(vocab_size=24)
TRAIN = TrainConfig(max_steps=3000, peak_lr=1e-3, batch_tokens=128)
EARLY_STEP = 1000
RUNS = {
    "joint": {},
    "nar_only": {"tasks": "nar"},
    "ar_only": {"tasks": "ar"},
    "joint_no_scl": {"use_scl": False},
}


def data_for(seed: int):
    return gen_splits("lexicon", SPLITS, MODEL.vocab_size, LENGTHS,
                      np.random.default_rng(10_000 + seed))


def length_accuracy(model, corpus) -> float:
    """Share of sentences whose most likely predicted length is the gold length."""
    from colearn.data import batch_by_tokens

    hits = 0
    for batch in batch_by_tokens(corpus, 512):
        logits = model.predict_length(model.encode(batch.src, side="nar"), src=batch.src).data
        hits += int((logits.argmax(-1) + 1 == batch.tgt_len).sum())
    return hits / len(corpus)


def run_seed(seed: int, runs=RUNS) -> dict:
    train, valid, test = data_for(seed)
    decode = DecodeConfig(max_decode_len=MODEL.max_len - 1)
    out: dict = {"seed": seed}
    out["init_similarity"] = hidden_similarity(DualDecoderModel(MODEL, seed=seed), test)
    for name, overrides in runs.items():
        cfg = dataclasses.replace(TRAIN, seed=seed, **overrides)
        trainer = Trainer(MODEL, cfg, train, valid, decode)
        t0 = time.perf_counter()
        result = trainer.fit()
        seconds = time.perf_counter() - t0
        scores = evaluate_model(result.model, test, decode, tasks=cfg.tasks)
        if name == "joint":
            one_shot = decode_corpus(result.model, test.sources, "nar",
                                     dataclasses.replace(decode, nar_iterations=1))
            scores["exact_nar_t1"] = exact_match(one_shot, test.targets)
            scores["length_accuracy"] = length_accuracy(result.model, test)
        # diagnostics: validation NAR BLEU part-way through training, and the
        # unaveraged final weights, to separate learning speed and checkpoint
        # selection from the end result
        early = [h for h in result.history if h["step"] == EARLY_STEP]
        if early and "bleu_nar" in early[0]:
            scores["valid_nar_early"] = early[0]["bleu_nar"]
        if name == "joint":
            scores["last_bleu_ar"] = evaluate_model(result.last_model, test, decode, tasks="ar",
                                                    similarity=False)["bleu_ar"]
        out[name] = {"seconds": seconds, **scores}
    return out
