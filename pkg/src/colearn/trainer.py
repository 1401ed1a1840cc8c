"""Joint AR/NAR training: loss assembly per configuration, Adam with warmup and
inverse-sqrt decay, global-norm clipping, best-k tracking and checkpoint averaging."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import losses
from . import tensorcore as tc
from .checkpoint import Checkpoint, OptimizerState, load_checkpoint, save_checkpoint
from .data import Batch, ParallelCorpus, batch_by_tokens
from .decoding import DecodeConfig, decode_corpus
from .masking import STRATEGIES, cmlm_mask, disco_contexts, fixed_ratio_mask, select_confidence
from .metrics import corpus_bleu, exact_match, hidden_similarity, repeated_token_pct
from .model import DualDecoderModel, ModelConfig
from .tensorcore import Tape, Tensor

log = logging.getLogger(__name__)

DIRECTIONS = ("mutual", "nar->ar", "ar->nar", "none")
TASKS = ("both", "ar", "nar")
MASK_STRATEGIES = ("cmlm", "ratio", "disco")


@dataclass
class TrainConfig:
    lambda_tml: float = 1.0
    lambda_scl: float = 1.0
    use_tml: bool = True
    use_scl: bool = True
    use_hybrid: bool = False
    tasks: str = "both"
    distill_direction: str = "mutual"
    frozen_teacher: str | None = None
    scl_hyb_detach: bool = True
    mask_strategy: str = "cmlm"
    mask_ratio: float = 0.5
    confidence_strategy: str = "all"
    confidence_fraction: float = 0.5
    label_smoothing: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    peak_lr: float = 5e-4
    warmup_steps: int = 400
    clip_norm: float = 3.0
    max_steps: int = 3000
    eval_every: int = 200
    batch_tokens: int = 128
    keep_best_k: int = 5
    seed: int = 1
    checkpoint_dir: str | None = None
    precision: str = "float64"

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be at least 1")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.lambda_tml < 0 or self.lambda_scl < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.distill_direction not in DIRECTIONS:
            raise ValueError(f"distill_direction must be one of {DIRECTIONS}")
        if self.tasks not in TASKS:
            raise ValueError(f"tasks must be one of {TASKS}")
        if self.mask_strategy not in MASK_STRATEGIES:
            raise ValueError(f"mask_strategy must be one of {MASK_STRATEGIES}")
        if self.confidence_strategy not in STRATEGIES:
            raise ValueError(f"confidence_strategy must be one of {STRATEGIES}")
        if self.precision not in ("float64", "float32"):
            raise ValueError("precision must be float64 or float32")
        if self.keep_best_k < 1:
            raise ValueError("keep_best_k must be positive")

    @property
    def tml_directions(self) -> tuple[bool, bool]:
        """(AR learns from NAR, NAR learns from AR)."""
        if not self.use_tml or self.tasks != "both":
            return False, False
        d = self.distill_direction
        return d in ("mutual", "nar->ar"), d in ("mutual", "ar->nar")


def lr_at(step: int, peak: float, warmup: int) -> float:
    """Linear warmup to ``peak`` then inverse-square-root decay."""
    if step < 1:
        raise ValueError("step must be at least 1")
    return peak * min(step / warmup, math.sqrt(warmup / step))


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class StepResult:
    step: int
    losses: dict[str, float]
    grad_norm: float
    clipped_norm: float
    lr: float


@dataclass
class TrainResult:
    model: DualDecoderModel
    last_model: DualDecoderModel
    history: list[dict] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)


def make_plans(batch: Batch, config: TrainConfig, rng: np.random.Generator):
    n = batch.tgt_len.tolist()
    if config.mask_strategy == "cmlm":
        return [cmlm_mask(k, rng) for k in n]
    if config.mask_strategy == "ratio":
        return [fixed_ratio_mask(k, config.mask_ratio, rng) for k in n]
    return [disco_contexts(k, rng) for k in n]


class Trainer:
    def __init__(self, model_config: ModelConfig, config: TrainConfig,
                 train: ParallelCorpus, valid: ParallelCorpus | None = None,
                 decode_config: DecodeConfig | None = None, out_dir=None):
        if config.use_hybrid and not model_config.hybrid_enabled:
            model_config = ModelConfig(**{**model_config.to_dict(), "hybrid_enabled": True})
        if config.mask_strategy == "disco" and model_config.nar_variant != "disco":
            model_config = ModelConfig(**{**model_config.to_dict(), "nar_variant": "disco"})
        self.model_config = model_config
        self.config = config
        self.train_corpus = train
        self.valid_corpus = valid
        self.decode_config = decode_config or DecodeConfig(max_decode_len=model_config.max_len - 1)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        init_seq, data_seq, drop_seq = np.random.SeedSequence(config.seed).spawn(3)
        dtype = np.float32 if config.precision == "float32" else np.float64
        self.model = DualDecoderModel(model_config, seed=np.random.default_rng(init_seq), dtype=dtype)
        self.data_rng = np.random.default_rng(data_seq)
        self.dropout_rng = np.random.default_rng(drop_seq)
        self.model.dropout_rng = self.dropout_rng
        size = self.model.params.flat.size
        self.m = np.zeros(size, dtype=dtype)
        self.v = np.zeros(size, dtype=dtype)
        self._tmp = np.empty(size, dtype=dtype)
        self.step = 0
        self.teacher: DualDecoderModel | None = None
        # When a dict, stop-gradient targets are recorded on first use and
        # replayed afterwards (finite-difference checks need them constant).
        self.pinned_targets: dict[str, np.ndarray] | None = None
        if config.frozen_teacher:
            self.teacher = load_checkpoint(config.frozen_teacher).model

    # ------------------------------------------------------------ losses

    def forward_losses(self, batch: Batch, plans=None, train: bool = True) -> losses.LossBundle:
        cfg = self.config
        model = self.model
        plans = plans if plans is not None else batch.plans
        eps = cfg.label_smoothing
        gold = batch.gold()
        real = batch.real_mask()
        use_ar = cfg.tasks in ("both", "ar")
        use_nar = cfg.tasks in ("both", "nar")
        comps: dict[str, Tensor] = {}
        zero = Tensor(np.zeros((), dtype=model.dtype))

        E_ar = model.encode(batch.src, train=train, side="ar") if use_ar or model.config.share_encoder else None
        if use_nar:
            E_nar = E_ar if model.config.share_encoder else model.encode(batch.src, train=train, side="nar")
        H_ar = H_nar = logp_ar = logp_nar = None
        if use_ar:
            H_ar = model.ar_states(E_ar, batch.ar_input(), src=batch.src, train=train)
            logp_ar = model.output_logprobs(H_ar, "ar")
            comps["ml_ar"] = losses.nll(logp_ar, gold, real, eps)
        else:
            comps["ml_ar"] = zero
        nar_in = batch.nar_input(plans)
        if use_nar:
            contexts = batch.disco_context_matrix(plans) if cfg.mask_strategy == "disco" else None
            H_nar = model.nar_states(E_nar, nar_in, src=batch.src, train=train,
                                     contexts=contexts, y_full=gold)
            logp_nar = model.output_logprobs(H_nar, "nar")
            comps["ml_nar"] = losses.nll(logp_nar, gold, batch.mask_matrix(plans, "masked"), eps)
            comps["len"] = losses.length_loss(model.predict_length(E_nar, src=batch.src), batch.tgt_len)
        else:
            comps["ml_nar"] = zero

        lam_tml = cfg.lambda_tml if cfg.use_tml and cfg.tasks == "both" else 0.0
        lam_scl = cfg.lambda_scl if cfg.use_scl and cfg.tasks == "both" else 0.0
        if cfg.tasks != "both":
            return losses.compose(comps, 0.0, 0.0, "dcmcl")

        mutual_plans = self._select_mutual(plans, gold, logp_ar, logp_nar)
        mutual = batch.mask_matrix(mutual_plans, "mutual")
        if cfg.use_hybrid:
            H_hyb = model.hybrid_states(H_ar, H_nar)
            logp_hyb = model.output_logprobs(H_hyb, "hyb")
            comps["ml_hyb"] = losses.hybrid_nll(logp_hyb, gold, real, eps)
            if lam_tml:
                target = self._pinned("logp_hyb", logp_hyb)
                comps["tml_ar_hyb"] = losses.tml_to_target(logp_ar, target, mutual)
                comps["tml_nar_hyb"] = losses.tml_to_target(logp_nar, target, mutual)
            if lam_scl:
                h_hyb = losses.mean_pool(H_hyb, real)
                if cfg.scl_hyb_detach:
                    h_hyb = self._pinned("h_hyb", h_hyb.detach())
                comps["scl_ar_hyb"] = losses.contrastive(losses.mean_pool(H_ar, real), h_hyb)
                comps["scl_nar_hyb"] = losses.contrastive(losses.mean_pool(H_nar, real), h_hyb)
            return losses.compose(comps, lam_tml, lam_scl, "dcmcl_hyb")

        to_ar, to_nar = cfg.tml_directions
        if lam_tml:
            target_for_ar, target_for_nar = logp_nar, logp_ar
            if self.teacher is not None:
                target_for_ar, target_for_nar = self._teacher_logprobs(batch, nar_in)
            target_for_ar = self._pinned("target_for_ar", target_for_ar)
            target_for_nar = self._pinned("target_for_nar", target_for_nar)
            comps["tml_ar"] = losses.tml_to_target(logp_ar, target_for_ar, mutual) if to_ar else zero
            comps["tml_nar"] = losses.tml_to_target(logp_nar, target_for_nar, mutual) if to_nar else zero
        if lam_scl:
            comps["scl_ar"], comps["scl_nar"] = losses.scl_pair(
                losses.mean_pool(H_ar, real), losses.mean_pool(H_nar, real))
        return losses.compose(comps, lam_tml, lam_scl, "dcmcl")

    def _pinned(self, key: str, t: Tensor) -> Tensor:
        if self.pinned_targets is None:
            return t
        if key not in self.pinned_targets:
            self.pinned_targets[key] = t.data.copy()
        return Tensor(self.pinned_targets[key])

    def _teacher_logprobs(self, batch: Batch, nar_in: np.ndarray):
        t = self.teacher
        E = t.encode(batch.src)
        E_nar = E if t.config.share_encoder else t.encode(batch.src, side="nar")
        lp_ar = t.output_logprobs(t.ar_states(E, batch.ar_input(), src=batch.src), "ar")
        lp_nar = t.output_logprobs(t.nar_states(E_nar, nar_in, src=batch.src), "nar")
        return Tensor(lp_nar.data.astype(self.model.dtype)), Tensor(lp_ar.data.astype(self.model.dtype))

    def _select_mutual(self, plans, gold, logp_ar, logp_nar):
        cfg = self.config
        if cfg.confidence_strategy == "all":
            return plans
        out = []
        for b, plan in enumerate(plans):
            pos = np.asarray(plan.mutual, dtype=np.int64)
            g = gold[b, pos]
            conf_ar = np.exp(logp_ar.data[b, pos, g])
            conf_nar = np.exp(logp_nar.data[b, pos, g])
            out.append(select_confidence(plan, conf_ar, conf_nar, cfg.confidence_strategy,
                                         cfg.confidence_fraction, self.data_rng))
        return out

    # ------------------------------------------------------------ optimisation

    def train_step(self, batch: Batch, plans=None) -> StepResult:
        cfg = self.config
        params = self.model.params
        if plans is None:
            plans = make_plans(batch, cfg, self.data_rng)
        params.zero_grad()
        with Tape() as tape:
            bundle = self.forward_losses(batch, plans, train=True)
        values = bundle.values()
        if not all(math.isfinite(v) for v in values.values()):
            raise NonFiniteLoss(f"non-finite loss at step {self.step + 1} "
                                f"(batch sentences {batch.indices[:5]}...): {values}")
        tape.backward(bundle.total)
        g = params.grad_flat
        norm = float(np.sqrt(np.dot(g, g)))
        clipped = norm
        if norm > cfg.clip_norm:
            g *= cfg.clip_norm / norm
            clipped = float(np.sqrt(np.dot(g, g)))
        self.step += 1
        lr = lr_at(self.step, cfg.peak_lr, cfg.warmup_steps)
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        m, v, tmp = self.m, self.v, self._tmp
        m *= b1
        np.multiply(g, 1 - b1, out=tmp)
        m += tmp
        v *= b2
        np.multiply(g, g, out=tmp)
        tmp *= 1 - b2
        v += tmp
        # lr * mhat / (sqrt(vhat) + eps), evaluated in place
        np.divide(v, 1 - b2 ** self.step, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += cfg.adam_eps
        np.divide(m, tmp, out=tmp)
        tmp *= lr / (1 - b1 ** self.step)
        params.flat -= tmp
        return StepResult(self.step, values, norm, clipped, lr)

    # ------------------------------------------------------------ evaluation & loop

    def evaluate(self, corpus: ParallelCorpus, model: DualDecoderModel | None = None) -> dict:
        return evaluate_model(model or self.model, corpus, self.decode_config, tasks=self.config.tasks)

    def checkpoint(self, meta: dict | None = None) -> Checkpoint:
        return Checkpoint(self.model.copy(),
                          OptimizerState(self.step, self.m.astype(np.float64), self.v.astype(np.float64)),
                          {"data": self.data_rng.bit_generator.state,
                           "dropout": self.dropout_rng.bit_generator.state},
                          dict(meta or {}, step=self.step))

    def fit(self, max_steps: int | None = None, log_every: int = 0) -> TrainResult:
        cfg = self.config
        max_steps = cfg.max_steps if max_steps is None else max_steps
        history: list[dict] = []
        loss_trace: list[float] = []
        best: list[tuple[float, int, np.ndarray]] = []
        ckpt_dir = None
        if cfg.checkpoint_dir is not None:
            ckpt_dir = Path(cfg.checkpoint_dir)
            if self.out_dir is not None and not ckpt_dir.is_absolute():
                ckpt_dir = self.out_dir / ckpt_dir
            ckpt_dir.mkdir(parents=True, exist_ok=True)
        metrics_file = (self.out_dir / "metrics.jsonl") if self.out_dir is not None else None
        last_losses: dict[str, float] = {}
        while self.step < max_steps:
            for batch in batch_by_tokens(self.train_corpus, cfg.batch_tokens, self.data_rng, shuffle=True):
                res = self.train_step(batch)
                loss_trace.append(res.losses["total"])
                last_losses = res.losses
                if log_every and self.step % log_every == 0:
                    log.info("step %d loss %.4f lr %.2e", self.step, res.losses["total"], res.lr)
                if self.valid_corpus is not None and (self.step % cfg.eval_every == 0 or self.step == max_steps):
                    scores = self.evaluate(self.valid_corpus)
                    record = {"step": self.step, **last_losses, **scores, "lr": res.lr,
                              "grad_norm": res.clipped_norm}
                    history.append(record)
                    if metrics_file is not None:
                        with metrics_file.open("a") as fh:
                            fh.write(json.dumps(record) + "\n")
                    key = scores.get("bleu_ar", 0.0) + scores.get("bleu_nar", 0.0)
                    best.append((key, self.step, self.model.params.flat.copy()))
                    best.sort(key=lambda b: (-b[0], -b[1]))
                    dropped = best[cfg.keep_best_k:]
                    best = best[:cfg.keep_best_k]
                    if ckpt_dir is not None:
                        save_checkpoint(self.checkpoint({"score": key}), ckpt_dir / f"ckpt_{self.step}.bin")
                        for _, s, _ in dropped:
                            (ckpt_dir / f"ckpt_{s}.bin").unlink(missing_ok=True)
                if self.step >= max_steps:
                    break
        last = self.model.copy()
        final = self.model.copy()
        if best:
            stack = np.stack([b[2] for b in best])
            final.params.flat[:] = _mean_exact(stack)
        if ckpt_dir is not None:
            save_checkpoint(self.checkpoint(), ckpt_dir / "checkpoint_last.bin")
            save_checkpoint(Checkpoint(final, None, {"data": self.data_rng.bit_generator.state},
                                       {"step": self.step, "averaged": len(best)}),
                            ckpt_dir / "checkpoint_avg.bin")
        return TrainResult(final, last, history, loss_trace)


def evaluate_model(model: DualDecoderModel, corpus: ParallelCorpus, decode_config: DecodeConfig,
                   tasks: str = "both", similarity: bool = True) -> dict:
    refs = corpus.targets
    out: dict[str, float] = {}
    if tasks in ("both", "ar"):
        hyp_ar = decode_corpus(model, corpus.sources, "ar", decode_config)
        out["bleu_ar"] = corpus_bleu(hyp_ar, refs)
        out["exact_ar"] = exact_match(hyp_ar, refs)
    if tasks in ("both", "nar"):
        hyp_nar = decode_corpus(model, corpus.sources, "nar", decode_config)
        out["bleu_nar"] = corpus_bleu(hyp_nar, refs)
        out["exact_nar"] = exact_match(hyp_nar, refs)
        out["repeat_nar"] = repeated_token_pct(hyp_nar)
    if similarity and tasks == "both":
        out["hidden_sim"] = hidden_similarity(model, corpus)
    return out


def _mean_exact(stack: np.ndarray) -> np.ndarray:
    avg = stack.mean(axis=0)
    same = (stack == stack[0]).all(axis=0)
    avg[same] = stack[0][same]
    return avg


def average_checkpoints(checkpoints) -> Checkpoint:
    """Element-wise mean of parameters; optimizer state dropped, RNG state of the newest."""
    ckpts = [c if isinstance(c, Checkpoint) else load_checkpoint(c) for c in checkpoints]
    if not ckpts:
        raise ValueError("no checkpoints to average")
    cfg = ckpts[0].model.config
    for c in ckpts[1:]:
        if c.model.config != cfg:
            raise ValueError("cannot average checkpoints with different configurations")
    model = ckpts[0].model.copy()
    model.params.flat[:] = _mean_exact(np.stack([c.model.params.flat for c in ckpts]))
    newest = max(range(len(ckpts)), key=lambda i: (ckpts[i].meta.get("step", -1), i))
    return Checkpoint(model, None, dict(ckpts[newest].rng_states),
                      {"averaged": len(ckpts), "step": ckpts[newest].meta.get("step")})


def config_digest(*configs) -> str:
    import hashlib

    payload = json.dumps([asdict(c) for c in configs], sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]
