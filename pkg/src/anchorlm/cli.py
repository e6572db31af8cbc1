"""Command-line entry points for corpus generation, training, sampling,
evaluation, and the studies.

Every subcommand reads one YAML config (defaults apply when omitted) plus
`--set key.path=value` overrides. Failures print a machine-readable JSON error
record to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import List, Optional, Sequence

from . import tokenizer as tk
from .evaluation import (
    bag_of_features_embed,
    make_exact_labeler,
    pairwise_dissimilarity,
    semantic_entropy,
)
from .experiments import ConfigError, ExperimentConfig, Workspace, load_config, run_study
from .sampler import SampleConfig, batch_generate
from .tokenizer import Vocab
from .trainer import load_checkpoint, save_checkpoint
from .world import (
    build_posttraining_subset,
    build_pretraining_corpus,
    exact_label,
    read_jsonl,
    write_jsonl,
)

__all__ = ["main", "build_parser"]


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file (defaults used when omitted)")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY.PATH=VALUE", help="override one config field")
    p.add_argument("--seed", type=int, help="master seed override")
    p.add_argument("--out", help="output directory override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anchorlm",
        description="Annotation-anchored training laboratory: synthetic world, "
        "training regimes, sampling, and diversity studies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-world", help="generate the synthetic corpus and vocabulary")
    _common_flags(p)

    p = sub.add_parser("annotate", help="attach annotations to a JSONL of documents")
    _common_flags(p)
    p.add_argument("--input", required=True, help="JSONL with a 'chunks' field per record")
    p.add_argument("--output", required=True, help="annotated JSONL destination")

    p = sub.add_parser("pretrain", help="train one pretraining lineage")
    _common_flags(p)
    p.add_argument("--regime", required=True,
                   choices=["pretrain-standard", "pretrain-annotated"])
    p.add_argument("--checkpoint", help="also copy the checkpoint to this path")

    p = sub.add_parser("posttrain", help="fine-tune from a pretrained checkpoint")
    _common_flags(p)
    p.add_argument("--regime", required=True,
                   choices=["sft-standard", "sft-anchored", "sft-anchored-unmasked"])
    p.add_argument("--init", required=True, help="pretrained checkpoint path")
    p.add_argument("--checkpoint", required=True, help="output checkpoint path")
    p.add_argument("--restrict", action="append", default=[], metavar="ATTR=K",
                   help="restrict an attribute to its first K values")

    p = sub.add_parser("sample", help="decode generations from a checkpoint")
    _common_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", default="anchored",
                   choices=["anchored", "plain", "no-annotation"])
    p.add_argument("--prompt", default=None,
                   help="fixed prompt (default: cycle the world prompts)")
    p.add_argument("--output", required=True, help="generations JSONL destination")

    p = sub.add_parser("eval", help="score a generations JSONL")
    _common_flags(p)
    p.add_argument("--input", required=True, help="generations JSONL")
    p.add_argument("--output", help="report JSON destination (default stdout)")

    p = sub.add_parser("study", help="run one full study")
    p.add_argument("study", choices=["controlled", "ablation", "likelihood", "temperature"])
    _common_flags(p)

    return parser


# ---------------------------------------------------------------- subcommands


def _cmd_gen_world(cfg: ExperimentConfig) -> int:
    ws = Workspace(cfg)
    corpus_dir = os.path.join(cfg.out_dir, "corpus")
    build_pretraining_corpus(
        cfg.world_spec(), cfg["pretrain"]["n_docs"], seed=cfg.seed, out_dir=corpus_dir
    )
    os.makedirs(cfg.out_dir, exist_ok=True)
    vocab_path = os.path.join(cfg.out_dir, "vocab.txt")
    ws.vocab.save(vocab_path)
    print(json.dumps({"corpus_dir": corpus_dir, "vocab": vocab_path,
                      "n_docs": cfg["pretrain"]["n_docs"]}))
    return 0


def _cmd_annotate(cfg: ExperimentConfig, args) -> int:
    spec = cfg.world_spec()
    records = read_jsonl(args.input)
    out = []
    for rec in records:
        chunks = rec.get("chunks")
        if chunks is None:
            raise ConfigError("record missing 'chunks' field")
        annotations = []
        for chunk in chunks:
            latent = exact_label(chunk, spec)
            annotations.append(
                [{"key": k, "value": v} for k, v in latent.as_dict().items()]
            )
        out.append({**rec, "annotations": annotations})
    write_jsonl(out, args.output)
    print(json.dumps({"annotated": len(out), "output": args.output}))
    return 0


def _cmd_pretrain(cfg: ExperimentConfig, args) -> int:
    ws = Workspace(cfg)
    ckpt = ws.pretrained(args.regime)
    cached = os.path.join(
        ws.checkpoint_dir(), f"{args.regime}-{ws._pretrain_cache_key(args.regime)}.ckpt"
    )
    if args.checkpoint:
        save_checkpoint(ckpt, args.checkpoint)
    print(json.dumps({
        "regime": args.regime,
        "checkpoint": args.checkpoint or cached,
        "final_loss": ckpt.meta.metrics.get("final_loss"),
        "tokens": ckpt.meta.token_count,
    }))
    return 0


def _parse_restrictions(items: Sequence[str]):
    if not items:
        return None
    restriction = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--restrict must look like attr=K: {item!r}")
        attr, raw = item.split("=", 1)
        restriction[attr] = int(raw)
    return restriction


def _cmd_posttrain(cfg: ExperimentConfig, args) -> int:
    restriction = _parse_restrictions(args.restrict)
    ws = Workspace(cfg)
    init = load_checkpoint(args.init, expected_vocab=ws.vocab)
    ckpt, entropy_bits = ws.sft(args.regime, init, restriction)
    save_checkpoint(ckpt, args.checkpoint)
    print(json.dumps({
        "regime": args.regime,
        "checkpoint": args.checkpoint,
        "lineage": ckpt.meta.lineage,
        "val_perplexity": ckpt.meta.metrics.get("val_perplexity"),
        "dataset_entropy_bits": entropy_bits,
    }))
    return 0


def _cmd_sample(cfg: ExperimentConfig, args) -> int:
    from .world import PROMPT_TEMPLATES

    ws = Workspace(cfg)
    ckpt = load_checkpoint(args.checkpoint, expected_vocab=ws.vocab)
    s = cfg["sample"]
    sample_cfg = SampleConfig(
        temperature=s["temperature"], top_p=s["top_p"],
        max_new_tokens=s["max_new_tokens"], mode=args.mode,
        n_samples=s["n_samples"], seed=cfg.seed,
    )
    n = s["n_samples"]
    if args.prompt is not None:
        prompts = [args.prompt] * n
    else:
        prompts = [PROMPT_TEMPLATES[i % len(PROMPT_TEMPLATES)] for i in range(n)]
    gens = batch_generate(ckpt, prompts, sample_cfg, ws.vocab)
    write_jsonl([g.as_dict() for g in gens], args.output)
    print(json.dumps({"generations": len(gens), "output": args.output}))
    return 0


def _cmd_eval(cfg: ExperimentConfig, args) -> int:
    ws = Workspace(cfg)
    records = read_jsonl(args.input)
    responses = [rec["response"] for rec in records]
    labeler = make_exact_labeler(cfg.world_spec())
    rep = semantic_entropy(responses, labeler, bootstrap_seed=cfg.seed)
    usable = [r for r in responses if r.strip()]
    if len(usable) >= 2:
        d, _ = pairwise_dissimilarity(usable, lambda t: bag_of_features_embed(t, ws.vocab))
    else:
        d = None
    report = {
        "entropy": rep.as_dict(),
        "pairwise_dissimilarity": d,
        "n": len(responses),
        "config_hash": cfg.hash,
        "seed": cfg.seed,
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def _cmd_study(cfg: ExperimentConfig, args) -> int:
    result = run_study(args.study, cfg)
    print(json.dumps({
        "study": result.study,
        "config_hash": result.config_hash,
        "out_dir": result.out_dir,
        "rows": len(result.rows),
    }))
    return 0


# ---------------------------------------------------------------- entry point


def _error_record(kind: str, message: str) -> str:
    return json.dumps({"error": {"type": kind, "message": message}}, sort_keys=True)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides, args.seed, args.out)
        if args.command == "gen-world":
            return _cmd_gen_world(cfg)
        if args.command == "annotate":
            return _cmd_annotate(cfg, args)
        if args.command == "pretrain":
            return _cmd_pretrain(cfg, args)
        if args.command == "posttrain":
            return _cmd_posttrain(cfg, args)
        if args.command == "sample":
            return _cmd_sample(cfg, args)
        if args.command == "eval":
            return _cmd_eval(cfg, args)
        if args.command == "study":
            return _cmd_study(cfg, args)
        raise ConfigError(f"unknown command: {args.command}")
    except ConfigError as err:
        print(_error_record("config", str(err)), file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, KeyError) as err:
        print(_error_record(type(err).__name__, str(err)), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
