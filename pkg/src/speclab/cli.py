"""speclab command line: corpus, target, draft training, serving, benchmarks, masks, sweeps.

Exit codes: 0 success, 2 configuration or usage error, 1 runtime failure.
Logging verbosity comes from ``SPECLAB_LOG`` (error, warn, info, debug).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import __version__
from .analytics import sweep, sweep_csv
from .blockmask import MaskParams, build_blockmask, render_mask
from .config import ConfigError, RunConfig, load_config, to_dict
from .engine import InProcessEngine, SocketEngine, parse_address, serve
from .model import DraftModel, TargetModel, load_checkpoint, save_checkpoint
from .specdec import ModelDrafter, bench_csv, run_benchmark
from .trainer import (
    load_corpus,
    make_synthetic_corpus,
    new_draft,
    pretrain_target,
    regenerate_corpus,
    save_corpus,
    split_corpus,
    train_draft,
)

log = logging.getLogger("speclab")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _need_file(path: Optional[str], what: str) -> Path:
    if path is None:
        raise ConfigError(what, "required")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(what, f"file {path} not found")
    return p


def write_manifest(out_dir: Path, command: str, argv: Sequence[str], cfg: RunConfig, inputs: Dict[str, Path]):
    manifest = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "seed": cfg.corpus.seed,
        "config": to_dict(cfg),
        "inputs": {k: {"path": str(p), "hash": git_blob_hash(p.read_bytes())} for k, p in sorted(inputs.items())},
    }
    (out_dir / f"manifest.{command}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load(path: Path, kind) -> object:
    try:
        model = load_checkpoint(path)
    except (ValueError, KeyError) as e:
        raise ConfigError(str(path), f"unreadable checkpoint: {e}") from None
    if not isinstance(model, kind):
        raise ConfigError(str(path), f"expected a {kind.__name__} checkpoint")
    return model


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_corpus(args, cfg: RunConfig, argv) -> int:
    out = _out_dir(args)
    c = cfg.corpus
    corpus = make_synthetic_corpus(c.seed, c.n_samples, c.grammar)
    save_corpus(out / "corpus.jsonl", corpus)
    write_manifest(out, "gen-corpus", argv, cfg, {})
    print(f"wrote {len(corpus)} samples to {out / 'corpus.jsonl'}")
    return 0


def cmd_pretrain_target(args, cfg: RunConfig, argv) -> int:
    corpus_path = _need_file(args.corpus, "--corpus")
    out = _out_dir(args)
    corpus = load_corpus(corpus_path)
    metrics = open(out / "pretrain_metrics.jsonl", "w")
    try:
        model, info = pretrain_target(
            corpus,
            cfg.target.pretrain,
            cfg.target.model,
            on_step=lambda rec: metrics.write(json.dumps(rec) + "\n"),
        )
    finally:
        metrics.close()
    save_checkpoint(out / "target.spfg", model)
    (out / "pretrain_summary.json").write_text(json.dumps(info, sort_keys=True) + "\n")
    write_manifest(out, "pretrain-target", argv, cfg, {"corpus": corpus_path})
    print(f"perplexity {info['ppl_init']:.3f} -> {info['ppl_final']:.3f}")
    return 0


def _engine(args, cfg: RunConfig):
    """Socket client when --engine is given, else an in-process engine on --target."""
    if getattr(args, "engine", None):
        return SocketEngine(parse_address(args.engine)), {}
    target = _need_file(args.target, "--target")
    model = _load(target, TargetModel)
    return InProcessEngine(model, cfg.engine.max_tokens), {"target": target}


def cmd_regen_data(args, cfg: RunConfig, argv) -> int:
    corpus_path = _need_file(args.corpus, "--corpus")
    engine, inputs = _engine(args, cfg)
    out = _out_dir(args)
    corpus = load_corpus(corpus_path)
    t = cfg.train
    new = regenerate_corpus(engine, corpus, t.regen_temperature, t.seed, cfg.corpus.grammar.max_len)
    save_corpus(out / "corpus.jsonl", new)
    write_manifest(out, "regen-data", argv, cfg, {"corpus": corpus_path, **inputs})
    print(f"regenerated {len(new)} samples")
    return 0


def cmd_train_draft(args, cfg: RunConfig, argv) -> int:
    corpus_path = _need_file(args.corpus, "--corpus")
    target_path = _need_file(args.target, "--target")
    target = _load(target_path, TargetModel)
    engine, inputs = _engine(args, cfg)
    out = _out_dir(args)
    train, _ = split_corpus(load_corpus(corpus_path), cfg.corpus.holdout)
    draft = new_draft(target, train, cfg.draft_config(), copy_embed=cfg.draft.copy_target_embed)
    draft, history = train_draft(engine, draft, train, cfg.train, metrics_path=out / "metrics.jsonl")
    save_checkpoint(out / "draft.spfg", draft)
    write_manifest(out, "train-draft", argv, cfg, {"corpus": corpus_path, "target": target_path, **inputs})
    last = history[-1]
    print(f"{len(history)} optimizer steps; final losses {last['loss_per_ttt_step']}")
    return 0


def cmd_serve(args, cfg: RunConfig, argv) -> int:
    ckpt = _need_file(args.checkpoint, "--checkpoint")
    _load(ckpt, TargetModel)
    max_conc = args.max_concurrent if args.max_concurrent is not None else cfg.engine.max_concurrent
    listen = args.listen or cfg.engine.listen
    try:
        addr = parse_address(listen)
    except ValueError as e:
        raise ConfigError("--listen", str(e)) from None
    try:
        serve(ckpt, addr, max_conc)
    except KeyboardInterrupt:
        pass
    return 0


def cmd_bench(args, cfg: RunConfig, argv) -> int:
    corpus_path = _need_file(args.corpus, "--corpus")
    draft_path = _need_file(args.draft, "--draft")
    draft = _load(draft_path, DraftModel)
    engine, inputs = _engine(args, cfg)
    out = _out_dir(args)
    _, held = split_corpus(load_corpus(corpus_path), cfg.corpus.holdout)
    s = cfg.specdec
    prompts = [x.prompt for x in held[: s.n_prompts]]
    cost = None
    if args.target:
        target = _load(_need_file(args.target, "--target"), TargetModel)
        cost = draft.count_flops() / target.count_flops()
    elif args.engine:
        log.warning("no --target given: modeled speedup assumes a free draft (c=0)")
    results = [
        run_benchmark(engine, ModelDrafter(draft), prompts, sc, s.max_new, cost, s.seed) for sc in s.spec_configs()
    ]
    text = bench_csv(results)
    (out / "bench.csv").write_text(text)
    write_manifest(out, "bench", argv, cfg, {"corpus": corpus_path, "draft": draft_path, **inputs})
    sys.stdout.write(text)
    return 0


def cmd_mask(args, cfg: RunConfig, argv) -> int:
    block = args.block if args.block is not None else min(16, args.qlen & -args.qlen)
    try:
        params = MaskParams(args.qlen, args.seqlen, args.step, block)
    except ValueError as e:
        raise ConfigError("mask", str(e)) from None
    print(render_mask(build_blockmask(params)))
    return 0


def cmd_sweep(args, cfg: RunConfig, argv) -> int:
    try:
        rows = sweep(args.alpha, args.gamma, args.cost)
    except ValueError as e:
        raise ConfigError("sweep", str(e)) from None
    text = sweep_csv(rows)
    if args.out:
        out = _out_dir(args)
        (out / "sweep.csv").write_text(text)
        write_manifest(out, "sweep", argv, cfg, {})
    sys.stdout.write(text)
    return 0


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "pretrain-target": cmd_pretrain_target,
    "regen-data": cmd_regen_data,
    "train-draft": cmd_train_draft,
    "serve": cmd_serve,
    "bench": cmd_bench,
    "mask": cmd_mask,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="speclab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"speclab {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override every seed in the configuration")
        if out:
            p.add_argument("--out", default=".", help="output directory (default: current)")
        return p

    common(sub.add_parser("gen-corpus", help="write a synthetic corpus"))
    p = common(sub.add_parser("pretrain-target", help="train the target model"))
    p.add_argument("--corpus", required=True)
    for name, hlp in (("regen-data", "resample responses from the target"), ("train-draft", "TTT-train a draft head")):
        p = common(sub.add_parser(name, help=hlp))
        p.add_argument("--corpus", required=True)
        p.add_argument("--target", help="target checkpoint (in-process engine)")
        p.add_argument("--engine", help="HOST:PORT of a running target service")
    p = common(sub.add_parser("serve", help="serve a target checkpoint"), out=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--listen", help="HOST:PORT (default from config)")
    p.add_argument("--max-concurrent", type=int)
    p = common(sub.add_parser("bench", help="speculative decoding benchmark"))
    p.add_argument("--corpus", required=True, help="held-out prompts come from this corpus")
    p.add_argument("--draft", required=True)
    p.add_argument("--target", help="target checkpoint (in-process engine, and the draft/target cost ratio)")
    p.add_argument("--engine", help="HOST:PORT of a running target service")
    p = common(sub.add_parser("mask", help="print a TTT attention mask"), out=False)
    p.add_argument("--qlen", type=int, required=True)
    p.add_argument("--seqlen", type=int, required=True)
    p.add_argument("--step", type=int, default=0)
    p.add_argument("--block", type=int)
    p = common(sub.add_parser("sweep", help="speedup model over a grid"))
    p.set_defaults(out=None)
    p.add_argument("--alpha", type=float, nargs="+", required=True)
    p.add_argument("--gamma", type=int, nargs="+", required=True)
    p.add_argument("--cost", type=float, nargs="+", default=[0.0])
    return ap


def _setup_logging():
    level = os.environ.get("SPECLAB_LOG", "warn").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        return COMMANDS[args.command](args, cfg, argv)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failures map to exit 1
        log.debug("command failed", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
