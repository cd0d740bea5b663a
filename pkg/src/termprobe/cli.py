"""Command-line entry point: ``python -m termprobe <subcommand>``.

Every subcommand reads the shared engine config (``--config``) and lets
flags override it. Machine-readable results go to stdout as JSON; tables
go to files. Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

from .config import ConfigFileError, EngineConfig
from .corpus import (Stage, TermBank, ToyEncoderConfig, build_benchmark, load_corpus, load_encoder,
                     read_features, save_corpus, substream)
from .evalbench import AblationArm, KS, evaluate, run_ablations, sweep_bank_size, write_ablation_table, \
    write_reports, write_sweep
from .retriever import gradcheck, load_checkpoint, save_checkpoint
from .serving import PreparedBank, PromptTemplate, RetrievedTerm, bench_latency, build_prompt, retrieve, \
    write_latency_csv
from .training import TrainingConfig, run_curriculum

log = logging.getLogger("termprobe")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    d = EngineConfig()
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="termprobe", description="Term-presence retrieval over speech features.",
                     formatter_class=fmt)
    parser.add_argument("--config", help="engine config file (flags override its values)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, help_):
        p = sub.add_parser(name, help=help_, formatter_class=fmt)
        p.add_argument("--seed", type=int, default=None, help=f"root seed (config: {d.seed})")
        return p

    def model_flags(p):
        p.add_argument("--d", dest="embed_dim", type=int, default=None, help=f"embed dim (config: {d.embed_dim})")
        p.add_argument("--heads", type=int, default=None, help=f"attention heads (config: {d.heads})")
        p.add_argument("--dropout", dest="dropout_p", type=float, default=None,
                       help=f"attention dropout (config: {d.dropout_p})")
        p.add_argument("--eps", dest="pooling_epsilon", type=float, default=None,
                       help=f"pooling denominator epsilon (config: {d.pooling_epsilon})")

    def train_flags(p):
        p.add_argument("--batch-size", type=int, default=None, help=f"utterances per batch (config: {d.batch_size})")
        p.add_argument("--max-bank", dest="max_bank_per_batch", type=int, default=None,
                       help=f"candidate terms per batch (config: {d.max_bank_per_batch})")
        p.add_argument("--lr", dest="peak_lr", type=float, default=None, help=f"peak learning rate (config: {d.peak_lr})")
        p.add_argument("--init-lr", type=float, default=None, help=f"warmup start lr (config: {d.init_lr})")
        p.add_argument("--warmup", dest="warmup_steps", type=int, default=None,
                       help=f"warmup steps (config: {d.warmup_steps})")
        p.add_argument("--epochs", dest="max_epochs", type=int, default=None,
                       help=f"total epochs when --steps is 0 (config: {d.max_epochs})")
        p.add_argument("--steps", dest="total_steps", type=int, default=None,
                       help=f"total optimiser steps, 0 derives from epochs (config: {d.total_steps})")
        p.add_argument("--data", dest="data_dir", default=None, help=f"generated data directory (config: {d.data_dir})")

    p = add("gen-data", "generate the synthetic train/test corpora, test bank and distractor pool")
    p.add_argument("--out", dest="data_dir", default=None, help=f"output directory (config: {d.data_dir})")
    p.add_argument("--d", dest="embed_dim", type=int, default=None, help=f"embed dim (config: {d.embed_dim})")
    p.add_argument("--vocab", dest="vocab_size", type=int, default=None, help=f"token vocabulary (config: {d.vocab_size})")
    p.add_argument("--noise", dest="noise_sigma", type=float, default=None,
                   help=f"frame noise sigma (config: {d.noise_sigma})")
    p.add_argument("--filler-rate", type=float, default=None, help=f"filler frame rate (config: {d.filler_rate})")
    p.add_argument("--n-train", type=int, default=2000, help="training utterances")
    p.add_argument("--n-test", type=int, default=200, help="test utterances")
    p.add_argument("--bank-size", type=int, default=583, help="test bank size")
    p.add_argument("--train-bank-size", type=int, default=1500, help="training term inventory size")
    p.add_argument("--distractors", type=int, default=10_000 - 583, help="distractor pool size")

    p = add("train", "run the word -> phrase -> real-term curriculum and save a checkpoint")
    model_flags(p)
    train_flags(p)
    p.add_argument("--stages", type=_float_list, default=[0.3, 0.3, 0.4],
                   help="word,phrase,real_term fractions of the step budget")
    p.add_argument("--no-pooling", action="store_true", help="ablation: average per-token logits instead of pooling")
    p.add_argument("--out", default=None, help="checkpoint path (default: <checkpoint_dir>/model.ckpt)")
    p.add_argument("--metrics", default=None, help="directory for steps.csv / epochs.csv")

    p = add("eval", "recall@k of a checkpoint (or the cosine baseline) on the test corpus")
    p.add_argument("--checkpoint", default=None, help="checkpoint path (default: <checkpoint_dir>/model.ckpt)")
    p.add_argument("--corpus", default=None, help="test corpus directory (default: <data_dir>/test)")
    p.add_argument("--bank", default=None, help="term bank jsonl (default: the corpus bank)")
    p.add_argument("--k", type=_int_list, default=list(KS), help="cut-offs")
    p.add_argument("--scorer", choices=("presence", "cosine"), default="presence")
    p.add_argument("--average", choices=("micro", "macro"), default="micro")
    p.add_argument("--no-pooling", action="store_true", help="checkpoint was trained without pooling")
    p.add_argument("--out", default=None, help="reports directory (default: <reports_dir>)")

    for name, help_ in (("retrieve", "Top-k presence retrieval for one feature file"),
                        ("baseline-retrieve", "Top-k cosine retrieval for one feature file")):
        p = add(name, help_)
        if name == "retrieve":
            p.add_argument("--checkpoint", default=None, help="checkpoint path (default: <checkpoint_dir>/model.ckpt)")
            p.add_argument("--prompt-task", choices=("asr", "st"), default=None,
                           help="also emit the downstream prompt")
        p.add_argument("--bank", required=True, help="term bank jsonl")
        p.add_argument("--features", required=True, help="utterance feature file (.a2pf)")
        p.add_argument("--encoder", default=None, help="encoder directory (default: <data_dir>/test)")
        p.add_argument("--k", type=int, default=50)

    p = add("bench", "per-stage latency against bank size")
    p.add_argument("--checkpoint", default=None, help="checkpoint path (default: <checkpoint_dir>/model.ckpt)")
    p.add_argument("--bank-sizes", type=_int_list, default=[583, 1000, 5000, 10000])
    p.add_argument("--queries", type=int, default=200)
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--warmup-queries", type=int, default=5)
    p.add_argument("--data", dest="data_dir", default=None, help=f"generated data directory (config: {d.data_dir})")
    p.add_argument("--out", default=None, help="CSV path (default: <reports_dir>/latency.csv)")

    p = add("sweep", "recall@k against bank size as distractors are added")
    p.add_argument("--checkpoint", default=None, help="checkpoint path (default: <checkpoint_dir>/model.ckpt)")
    p.add_argument("--bank-sizes", type=_int_list, default=[583, 1000, 5000, 10000])
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--data", dest="data_dir", default=None, help=f"generated data directory (config: {d.data_dir})")
    p.add_argument("--out", default=None, help="CSV path (default: <reports_dir>/sweep.csv)")

    p = add("ablate", "train and evaluate ablation arms at an equal step budget")
    model_flags(p)
    train_flags(p)
    p.add_argument("--arms", default="full,nopool,realonly,phrase,word",
                   help="comma-separated arms: " + ",".join(a.value for a in AblationArm))
    p.add_argument("--out", default=None, help="table directory (default: <reports_dir>)")

    p = add("prompt", "assemble the downstream instruction with retrieved terms")
    p.add_argument("--task", choices=("asr", "st"), required=True)
    p.add_argument("--from-json", dest="from_json", default=None, help="retrieve output (JSON file, or - for stdin)")
    p.add_argument("--terms", default=None, help="comma-separated source terms (instead of --from-json)")
    p.add_argument("--src-lang", default="English")
    p.add_argument("--tgt-lang", default="Chinese")
    p.add_argument("--source-only", action="store_true", help="list only source terms for st prompts")

    p = add("gradcheck", "finite-difference check of the analytic gradients")
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--frames", type=int, default=5, help="max speech frames")
    p.add_argument("--tokens", type=int, default=3, help="max term tokens")
    p.add_argument("--dropout", action="store_true", help="check the train path with a fixed dropout mask")
    p.add_argument("--random-configs", type=int, default=0,
                   help="instead check N random configs (d in 8/16/32, heads in 1/2/4, frames<=8, tokens<=4)")
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


# --------------------------------------------------------------------------
# helpers


def _engine(args) -> EngineConfig:
    cfg = EngineConfig.load(args.config) if args.config else EngineConfig()
    overrides = {f: getattr(args, f) for f in cfg.__dataclass_fields__ if hasattr(args, f)}
    return cfg.replace(**overrides)


def _training(cfg: EngineConfig, stages=None) -> TrainingConfig:
    fr = stages or (0.3, 0.3, 0.4)
    if len(fr) != 3:
        raise UsageError("--stages needs three fractions (word,phrase,real_term)")
    return TrainingConfig(batch_size=cfg.batch_size, max_bank_per_batch=cfg.max_bank_per_batch,
                          peak_lr=cfg.peak_lr, init_lr=cfg.init_lr, warmup_steps=cfg.warmup_steps,
                          max_epochs=cfg.max_epochs, total_steps=cfg.total_steps or None, seed=cfg.seed,
                          stage_schedule=tuple(zip((Stage.WORD, Stage.PHRASE, Stage.REAL_TERM), fr)))


def _encoder_cfg(cfg: EngineConfig) -> ToyEncoderConfig:
    return ToyEncoderConfig(vocab_size=cfg.vocab_size, embed_dim=cfg.embed_dim, noise_sigma=cfg.noise_sigma,
                            filler_rate=cfg.filler_rate, seed=cfg.seed)


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _checkpoint(args, cfg: EngineConfig):
    path = _require(args.checkpoint or Path(cfg.checkpoint_dir) / "model.ckpt", "checkpoint")
    return load_checkpoint(path, expect_d=cfg.embed_dim, expect_heads=cfg.heads)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1, default=str))


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg: EngineConfig) -> int:
    bench = build_benchmark(_encoder_cfg(cfg), n_train=args.n_train, n_test=args.n_test,
                            test_bank_size=args.bank_size, train_bank_size=args.train_bank_size,
                            n_distractors=args.distractors)
    out = Path(cfg.data_dir)
    save_corpus(out / "train", bench.train)
    save_corpus(out / "test", bench.test)
    bench.distractors.to_jsonl(out / "distractors.jsonl")
    _emit({"data_dir": str(out), "train_utterances": len(bench.train), "test_utterances": len(bench.test),
           "test_bank": len(bench.test.bank), "distractors": len(bench.distractors),
           "train_digest": bench.train.digest(), "test_digest": bench.test.digest()})
    return 0


def cmd_train(args, cfg: EngineConfig) -> int:
    corpus = load_corpus(_require(Path(cfg.data_dir) / "train", "training corpus"))
    tcfg = _training(cfg, args.stages)
    t0 = time.perf_counter()
    res = run_curriculum(corpus, tcfg, heads=cfg.heads, dropout_p=cfg.dropout_p,
                         pooling=not args.no_pooling, eps=cfg.pooling_epsilon)
    out = Path(args.out or Path(cfg.checkpoint_dir) / "model.ckpt")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, res.params, {"steps": len(res.log.steps), "pooling": not args.no_pooling,
                                      "seed": cfg.seed})
    if args.metrics:
        res.log.write(args.metrics)
    last = res.log.steps[-1]["loss"] if res.log.steps else None
    _emit({"checkpoint": str(out), "steps": len(res.log.steps),
           "stage_steps": {s.value: n for s, n in res.stage_steps.items()},
           "final_loss": last, "seconds": round(time.perf_counter() - t0, 1)})
    return 0


def cmd_eval(args, cfg: EngineConfig) -> int:
    corpus = load_corpus(_require(args.corpus or Path(cfg.data_dir) / "test", "test corpus"))
    bank = TermBank.from_jsonl(_require(args.bank, "term bank")) if args.bank else corpus.bank
    params = _checkpoint(args, cfg) if args.scorer == "presence" else None
    rep = evaluate(params, corpus, bank, ks=args.k, scorer=args.scorer, average=args.average,
                   pooling=not args.no_pooling)
    write_reports([rep], args.out or cfg.reports_dir, f"recall-{args.scorer}")
    _emit({"scorer": args.scorer, "recall": {str(k): v for k, v in rep.recall.items()},
           "hits": {str(k): v for k, v in rep.hits.items()}, "n_gold": rep.n_gold, "bank_size": len(bank)})
    return 0


def _load_query(args, cfg: EngineConfig):
    bank = TermBank.from_jsonl(_require(args.bank, "term bank"))
    speech = read_features(_require(args.features, "feature file"))
    encoder = load_encoder(_require(args.encoder or Path(cfg.data_dir) / "test", "encoder directory"))
    return bank, speech, encoder


def cmd_retrieve(args, cfg: EngineConfig) -> int:
    params = _checkpoint(args, cfg)
    bank, speech, encoder = _load_query(args, cfg)
    res = retrieve(params, speech, PreparedBank(bank, encoder), args.k, eps=cfg.pooling_epsilon)
    out = res.to_dict()
    if args.prompt_task:
        out["prompt"] = build_prompt(PromptTemplate(), args.prompt_task, res)
    _emit(out)
    return 0


def cmd_baseline_retrieve(args, cfg: EngineConfig) -> int:
    from .baseline import DenseIndex, cosine_retrieve

    bank, speech, encoder = _load_query(args, cfg)
    _emit(cosine_retrieve(DenseIndex.build(bank, encoder), speech, args.k).to_dict())
    return 0


def _full_bank(cfg: EngineConfig):
    data = Path(cfg.data_dir)
    test = load_corpus(_require(data / "test", "test corpus"))
    distractors = TermBank.from_jsonl(_require(data / "distractors.jsonl", "distractor pool"))
    return test, distractors


def cmd_bench(args, cfg: EngineConfig) -> int:
    params = _checkpoint(args, cfg)
    test, distractors = _full_bank(cfg)
    bank = test.bank.merged(distractors)
    speech = [test.speech(u) for u in test.utterances]
    rows = bench_latency(params, bank, test.encoder, speech, args.bank_sizes, queries=args.queries,
                         k=args.k, warmup=args.warmup_queries, seed=cfg.seed)
    out = Path(args.out or Path(cfg.reports_dir) / "latency.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        write_latency_csv(rows, fh)
    _emit({"csv": str(out), "rows": [asdict(r) for r in rows]})
    return 0


def cmd_sweep(args, cfg: EngineConfig) -> int:
    params = _checkpoint(args, cfg)
    test, distractors = _full_bank(cfg)
    points = sweep_bank_size(params, test, distractors, args.bank_sizes, k=args.k, seeds=args.seeds)
    out = Path(args.out or Path(cfg.reports_dir) / "sweep.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_sweep(points, out)
    _emit({"csv": str(out), "points": [asdict(p) for p in points]})
    return 0


def cmd_ablate(args, cfg: EngineConfig) -> int:
    from .corpus import Benchmark

    data = Path(cfg.data_dir)
    bench = Benchmark(load_corpus(_require(data / "train", "training corpus")),
                      load_corpus(_require(data / "test", "test corpus")), TermBank([]))
    try:
        arms = [AblationArm(a) for a in args.arms.split(",") if a]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    results = run_ablations(bench, _training(cfg), arms, heads=cfg.heads, dropout_p=cfg.dropout_p)
    csv_path, md_path = write_ablation_table(results, args.out or cfg.reports_dir)
    _emit({"csv": str(csv_path), "markdown": str(md_path),
           "arms": {r.arm.value: ({str(k): v for k, v in r.report.recall.items()} if r.report else r.error)
                    for r in results}})
    return 0


def cmd_prompt(args, cfg: EngineConfig) -> int:
    template = PromptTemplate(args.src_lang, args.tgt_lang, show_pairs=not args.source_only)
    if args.from_json:
        raw = sys.stdin.read() if args.from_json == "-" else _require(args.from_json, "retrieval JSON").read_text()
        entries = [RetrievedTerm(**e) for e in json.loads(raw)["entries"]]
    elif args.terms is not None:
        entries = [RetrievedTerm(i, t.strip(), t.strip(), 1.0, i + 1)
                   for i, t in enumerate(args.terms.split(",")) if t.strip()]
    else:
        raise UsageError("prompt needs --from-json or --terms")
    _emit({"task": args.task, "prompt": build_prompt(template, args.task, entries)})
    return 0


def cmd_gradcheck(args, cfg: EngineConfig) -> int:
    seed = cfg.seed
    if args.random_configs:
        rng = substream(seed, "gradcheck")
        runs = []
        for i in range(args.random_configs):
            d = int(rng.choice([8, 16, 32]))
            h = int(rng.choice([1, 2, 4]))
            runs.append(gradcheck(d, h, int(rng.integers(1, 9)), int(rng.integers(1, 5)),
                                  seed=seed * 1000 + i, dropout=bool(i % 2)))
    else:
        runs = [gradcheck(args.d, args.heads, args.frames, args.tokens, seed=seed, dropout=args.dropout)]
    worst = max(r.max_rel_error for r in runs)
    _emit({"max_rel_error": worst, "tolerance": args.tol, "passed": worst < args.tol,
           "runs": [{"d": r.d, "heads": r.heads, "frames": r.frames, "tokens": r.tokens,
                     "dropout": r.dropout, "max_rel_error": r.max_rel_error} for r in runs]})
    return 0 if worst < args.tol else 2


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "retrieve": cmd_retrieve,
    "baseline-retrieve": cmd_baseline_retrieve, "bench": cmd_bench, "sweep": cmd_sweep,
    "ablate": cmd_ablate, "prompt": cmd_prompt, "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _engine(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"termprobe {args.command}: {exc}", file=sys.stderr)
        return 1
    except (ConfigFileError, FileNotFoundError, OSError, ValueError, ArithmeticError, RuntimeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
