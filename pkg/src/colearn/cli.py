"""Command-line entry point.

Subcommands: gen-data, train, evaluate, decode, distill, ablate, gradcheck.
Every subcommand takes ``--seed``, ``--config`` and ``--out-dir`` and writes
only below ``--out-dir``.  Exit codes: 0 success, 1 usage error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import _convert, format_kv, read_config, split_config
from .data import ParallelCorpus, Vocab, gen_splits, read_lines
from .decoding import DecodeConfig, decode_corpus
from .model import ModelConfig

log = logging.getLogger("colearn")

ABLATION_AXES = ("se", "tml", "scl", "pe", "direction", "confidence", "mask_ratio")
PE_COMBOS = [(enc, ar, nar) for enc in ("learnable", "sinusoidal")
             for ar, nar in (("sinusoidal", "learnable"), ("sinusoidal", "sinusoidal"),
                             ("learnable", "learnable"))]
MASK_RATIOS = (0.1, 0.3, 0.5, 0.7, 0.9)
CONFIDENCE_STRATEGIES = ("all", "random", "high-inter", "high-union", "low-inter", "low-union")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting with status 2."""

    def error(self, message):
        flags = sorted({s for a in self._actions for s in a.option_strings})
        raise UsageError(f"{self.prog}: {message}\nvalid flags: {' '.join(flags)}")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=1, help="random seed (default 1)")
    p.add_argument("--config", help="key=value configuration file; flags override its values")
    p.add_argument("--out-dir", default="out", help="directory receiving every output (default ./out)")
    p.add_argument("--precision", choices=("float64", "float32"), help="training precision")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _add_dataclass_flags(p: argparse.ArgumentParser, cls, skip=()) -> None:
    group = p.add_argument_group(cls.__name__)
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        default = f.default if f.default is not dataclasses.MISSING else None
        group.add_argument(_flag(f.name), dest=f"cfg_{f.name}", metavar="V",
                           help=f"{f.type} (default {default})")


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", choices=("copy", "reverse", "lexicon"), default="lexicon",
                   help="synthetic task used when no corpus prefix is given")
    p.add_argument("--train-size", type=int, default=2000)
    p.add_argument("--valid-size", type=int, default=200)
    p.add_argument("--min-len", type=int, default=4)
    p.add_argument("--max-sent-len", type=int, default=12)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="colearn", description="Jointly trained AR/NAR translation toolkit.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    parser.set_defaults(_subparsers=sub.choices)

    p = sub.add_parser("gen-data", help="write a synthetic parallel corpus")
    _add_common(p)
    _add_data_flags(p)
    p.add_argument("--vocab-size", type=int, default=24)
    p.add_argument("--prefix", default="data", help="file prefix inside --out-dir")

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    _add_data_flags(p)
    p.add_argument("--train", help="training corpus prefix (PREFIX.src / PREFIX.tgt)")
    p.add_argument("--valid", help="validation corpus prefix")
    p.add_argument("--vocab", help="vocabulary file (one symbol per line)")
    _add_dataclass_flags(p, ModelConfig)
    _add_dataclass_flags(p, _train_config_cls(), skip=("seed", "precision"))
    _add_dataclass_flags(p, DecodeConfig)

    p = sub.add_parser("evaluate", help="score a checkpoint on a corpus")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True, help="test corpus prefix")
    p.add_argument("--vocab", help="vocabulary file; integer symbols when omitted")
    p.add_argument("--sweep", choices=("none", "iterations", "mask-ratio"), default="none",
                   help="also write a CSV series for plotting")
    _add_dataclass_flags(p, DecodeConfig)

    p = sub.add_parser("decode", help="translate one sentence per line")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="source file, space-separated tokens")
    p.add_argument("--output", default="hypotheses.txt", help="file name inside --out-dir")
    p.add_argument("--mode", choices=("ar", "nar"), default="nar")
    p.add_argument("--vocab", help="vocabulary file; integer symbols when omitted")
    _add_dataclass_flags(p, DecodeConfig)

    p = sub.add_parser("distill", help="replace targets by AR beam-search outputs of a teacher")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="teacher checkpoint")
    p.add_argument("--train", required=True, help="corpus prefix to distill")
    p.add_argument("--vocab", help="vocabulary file; integer symbols when omitted")
    p.add_argument("--prefix", default="distilled", help="output prefix inside --out-dir")
    _add_dataclass_flags(p, DecodeConfig)

    p = sub.add_parser("ablate", help="train one run per ablation setting")
    _add_common(p)
    _add_data_flags(p)
    p.add_argument("--axes", default="se,tml,scl",
                   help=f"comma list from {','.join(ABLATION_AXES)}; se/tml/scl combine as a grid")
    _add_dataclass_flags(p, ModelConfig)
    _add_dataclass_flags(p, _train_config_cls(), skip=("seed", "precision"))
    _add_dataclass_flags(p, DecodeConfig)

    p = sub.add_parser("gradcheck", help="finite-difference check of every training objective")
    _add_common(p)
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--samples", type=int, default=0,
                   help="entries checked per parameter tensor (0 = all)")
    _add_dataclass_flags(p, ModelConfig)
    return parser


def _train_config_cls():
    from .trainer import TrainConfig

    return TrainConfig


# ---------------------------------------------------------------- helpers

def _flag_overrides(args, cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        raw = getattr(args, f"cfg_{f.name}", None)
        if raw is not None:
            out[f.name] = _convert(raw, f.type, f.name)
    return out


def _configs(args, *classes) -> list:
    """File values first, then flag overrides, for each dataclass."""
    try:
        raw = read_config(args.config) if args.config else {}
        parts = split_config(raw, *classes, *_extra_classes(classes))[:len(classes)]
        out = []
        for part, cls in zip(parts, classes):
            values = {**part, **_flag_overrides(args, cls)}
            if cls.__name__ == "TrainConfig":
                values["seed"] = args.seed
                if args.precision:
                    values["precision"] = args.precision
            out.append(cls(**values))
    except (KeyError, ValueError) as e:
        raise UsageError(f"configuration: {e}") from None
    return out


def _extra_classes(classes):
    # keys for configs a subcommand does not use are tolerated in shared files
    from .trainer import TrainConfig

    return [c for c in (ModelConfig, TrainConfig, DecodeConfig) if c not in classes]


def _inside(out_dir: Path, name: str) -> Path:
    path = (out_dir / name).resolve()
    if out_dir.resolve() not in (path, *path.parents):
        raise UsageError(f"{name!r} would be written outside --out-dir")
    return path


def _vocab(args, model_config: ModelConfig | None = None) -> Vocab:
    if getattr(args, "vocab", None):
        return Vocab.load(args.vocab)
    if model_config is None:
        raise UsageError("--vocab is required")
    return Vocab.integers(model_config.vocab_size)


def _corpora(args, vocab_size: int):
    """Training and validation corpora from prefixes or freshly generated."""
    if getattr(args, "train", None):
        vocab = _vocab(args)
        train = ParallelCorpus.load(args.train, vocab)
        valid = ParallelCorpus.load(args.valid, vocab) if args.valid else None
        return train, valid, vocab
    rng = np.random.default_rng(args.seed)
    train, valid = gen_splits(args.task, (args.train_size, args.valid_size), vocab_size,
                              (args.min_len, args.max_sent_len), rng)
    return train, valid, train.vocab


def _train_one(model_config, train_config, train, valid, out_dir: Path, decode_config=None):
    from .trainer import Trainer

    out_dir.mkdir(parents=True, exist_ok=True)
    if train_config.checkpoint_dir is not None:
        _inside(out_dir, train_config.checkpoint_dir)
    (out_dir / "config.txt").write_text(
        format_kv({**model_config.to_dict(), **dataclasses.asdict(train_config)}), encoding="utf-8")
    trainer = Trainer(model_config, train_config, train, valid, decode_config, out_dir=out_dir)
    result = trainer.fit(log_every=100)
    return trainer, result


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    train, valid = gen_splits(args.task, (args.train_size, args.valid_size), args.vocab_size,
                              (args.min_len, args.max_sent_len), rng)
    train.save(_inside(out, f"{args.prefix}.train"))
    valid.save(_inside(out, f"{args.prefix}.valid"))
    train.vocab.save(_inside(out, "vocab.txt"))
    print(f"wrote {len(train)} training and {len(valid)} validation pairs to {out}")
    return 0


def cmd_train(args) -> int:
    from .checkpoint import Checkpoint, save_checkpoint
    from .trainer import TrainConfig

    model_config, train_config, decode_config = _configs(args, ModelConfig, TrainConfig, DecodeConfig)
    if train_config.checkpoint_dir is None:
        train_config = dataclasses.replace(train_config, checkpoint_dir="checkpoints")
    train, valid, vocab = _corpora(args, model_config.vocab_size)
    if len(vocab) != model_config.vocab_size:
        model_config = dataclasses.replace(model_config, vocab_size=len(vocab))
    out = Path(args.out_dir)
    trainer, result = _train_one(model_config, train_config, train, valid, out, decode_config)
    vocab.save(_inside(out, "vocab.txt"))
    save_checkpoint(Checkpoint(result.model, None, {}, {"step": trainer.step, "averaged": True}),
                    _inside(out, "model.bin"))
    if result.history:
        print(json.dumps(result.history[-1]))
    print(f"model written to {out / 'model.bin'}")
    return 0


def _load_model(path, precision=None):
    from .checkpoint import load_checkpoint

    dtype = np.float32 if precision == "float32" else np.float64
    return load_checkpoint(path, dtype=dtype).model


def cmd_evaluate(args) -> int:
    from .metrics import corpus_bleu, exact_match, hidden_similarity, repeated_token_pct
    from .trainer import config_digest, evaluate_model

    model = _load_model(args.checkpoint)
    (decode_config,) = _configs(args, DecodeConfig)
    vocab = _vocab(args, model.config)
    test = ParallelCorpus.load(args.test, vocab)
    digest = config_digest(model.config, decode_config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scores = evaluate_model(model, test, decode_config)
    with _inside(out, "eval.jsonl").open("a", encoding="utf-8") as fh:
        for name, value in scores.items():
            line = json.dumps({"name": name, "value": value, "config_digest": digest})
            print(line)
            fh.write(line + "\n")
    if args.sweep == "iterations":
        with _inside(out, "sweep_iterations.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iterations", "bleu_nar", "exact_nar", "repeat_nar"])
            for T in range(1, decode_config.nar_iterations + 1):
                hyps = decode_corpus(model, test.sources, "nar",
                                     dataclasses.replace(decode_config, nar_iterations=T))
                w.writerow([T, corpus_bleu(hyps, test.targets), exact_match(hyps, test.targets),
                            repeated_token_pct(hyps)])
    elif args.sweep == "mask-ratio":
        with _inside(out, "sweep_mask_ratio.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mask_ratio", "hidden_sim"])
            for r in MASK_RATIOS:
                w.writerow([r, hidden_similarity(model, test, mask_ratio=r, seed=args.seed)])
    return 0


def cmd_decode(args) -> int:
    model = _load_model(args.checkpoint)
    (decode_config,) = _configs(args, DecodeConfig)
    vocab = _vocab(args, model.config)
    out = Path(args.out_dir)
    target = _inside(out, args.output)
    sources = read_lines(args.input, vocab)
    out.mkdir(parents=True, exist_ok=True)
    hyps = decode_corpus(model, sources, args.mode, decode_config) if sources else []
    target.write_text("".join(" ".join(vocab.decode(h)) + "\n" for h in hyps), encoding="utf-8")
    print(f"{len(hyps)} hypotheses written to {target}")
    return 0


def cmd_distill(args) -> int:
    from .data import DistillStats, distill

    model = _load_model(args.checkpoint)
    (decode_config,) = _configs(args, DecodeConfig)
    vocab = _vocab(args, model.config)
    out = Path(args.out_dir)
    target = _inside(out, args.prefix)
    corpus = ParallelCorpus.load(args.train, vocab)
    stats = DistillStats()
    out.mkdir(parents=True, exist_ok=True)
    result = distill(model, corpus, decode_config, stats)
    result.save(target)
    print(json.dumps({"pairs": len(result), "empty": stats.n_empty, "truncated": stats.n_truncated}))
    return 0


def ablation_runs(axes) -> list[tuple[str, dict, dict]]:
    """(run name, model overrides, train overrides) for the requested axes."""
    axes = list(axes)
    unknown = [a for a in axes if a not in ABLATION_AXES]
    if unknown:
        raise UsageError(f"unknown ablation axes {unknown}; choose from {','.join(ABLATION_AXES)}")
    runs: list[tuple[str, dict, dict]] = []
    grid = [a for a in ("se", "tml", "scl") if a in axes]
    if grid:
        for values in itertools.product((True, False), repeat=len(grid)):
            setting = dict(zip(grid, values))
            name = "_".join(f"{a}{int(v)}" for a, v in setting.items())
            model = {"share_encoder": setting["se"]} if "se" in setting else {}
            train = {k: setting[a] for a, k in (("tml", "use_tml"), ("scl", "use_scl")) if a in setting}
            runs.append((name, model, train))
    if "pe" in axes:
        for enc, ar, nar in PE_COMBOS:
            runs.append((f"pe_{enc[0]}{ar[0]}{nar[0]}", {"enc_pe": enc, "ar_pe": ar, "nar_pe": nar},
                         {"use_tml": False, "use_scl": False}))
    if "direction" in axes:
        for d in ("none", "nar->ar", "ar->nar", "mutual"):
            runs.append((f"dir_{d.replace('->', '2')}", {}, {"distill_direction": d}))
    if "confidence" in axes:
        for s in CONFIDENCE_STRATEGIES:
            runs.append((f"conf_{s}", {}, {"confidence_strategy": s}))
    if "mask_ratio" in axes:
        for r in MASK_RATIOS:
            runs.append((f"ratio_{r:.1f}", {}, {"mask_strategy": "ratio", "mask_ratio": r}))
    return runs


def cmd_ablate(args) -> int:
    from .trainer import TrainConfig

    model_config, train_config, decode_config = _configs(args, ModelConfig, TrainConfig, DecodeConfig)
    axes = [a.strip().replace("-", "_") for a in args.axes.split(",") if a.strip()]
    runs = ablation_runs(axes)
    train, valid, _ = _corpora(args, model_config.vocab_size)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, m_over, t_over in runs:
        mc = dataclasses.replace(model_config, **m_over)
        tc_ = dataclasses.replace(train_config, **t_over)
        log.info("ablation run %s", name)
        _, result = _train_one(mc, tc_, train, valid, _inside(out, name), decode_config)
        last = result.history[-1] if result.history else {}
        rows.append({"run": name, **{k: last.get(k) for k in
                                     ("bleu_ar", "bleu_nar", "repeat_nar", "hidden_sim")}})
    with _inside(out, "summary.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for row in rows:
        print(json.dumps(row))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import TINY_MODEL, run_suite

    try:
        raw = read_config(args.config) if args.config else {}
        (model_part,) = split_config(raw, ModelConfig)
        overrides = {**TINY_MODEL, **model_part, **_flag_overrides(args, ModelConfig)}
        ModelConfig(**overrides)
    except (KeyError, ValueError) as e:
        raise UsageError(f"configuration: {e}") from None
    result = run_suite(overrides, seed=args.seed, eps=args.eps,
                       max_per_leaf=args.samples or None)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with _inside(out, "gradcheck.jsonl").open("w", encoding="utf-8") as fh:
        for name, rep in result.reports.items():
            fh.write(json.dumps({"objective": name, "max_rel": rep.max_rel, "max_abs": rep.max_abs,
                                 "checked": rep.n_checked}) + "\n")
    print(f"max relative error {result.max_rel:.3e}")
    return 0 if result.max_rel < 1e-3 else 2


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "evaluate": cmd_evaluate,
            "decode": cmd_decode, "distill": cmd_distill, "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        if extra:
            # report against the subcommand so the message lists its flags
            args._subparsers[args.command].error(f"unrecognized arguments: {' '.join(extra)}")
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"colearn {args.command}: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"colearn {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
