"""Command-line entry point.

Subcommands: train-vae, build-db, train-regavae, generate, eval, ablate.
Exit codes: 0 success, 1 input error, 2 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint
from .data import SPECIALS, Tokenizer
from .errors import DivergenceError, NumericOverflowError, RegaVaeError
from .mixture import mixture_mean_latents
from .retrieval import load_database
from .training import (RunConfig, run_ablation, run_eval, run_stage1, run_stage2,
                       run_stage3)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="regavae",
                                     description="retrieval-augmented VAE language model")
    parser.add_argument("--config", help="JSON config file with RunConfig keys")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", default="out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train-vae", help="stage 1: plain-VAE pretraining")
    p = sub.add_parser("build-db", help="stage 2: build the retrieval database")
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("train-regavae", help="stage 3: retrieval-augmented training")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--database", required=True)
    p = sub.add_parser("generate", help="sample continuations for a source text")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--database")
    p.add_argument("--source", required=True)
    p.add_argument("--n-samples", type=int, default=1)
    p.add_argument("--strategy", choices=["greedy", "top-k-sampling"], default="top-k-sampling")
    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--database")
    p = sub.add_parser("ablate", help="full vs k=0 vs neighbor sweep")
    p.add_argument("--sweep", type=int, nargs="*", default=[])
    return parser


def _generate(cfg: RunConfig, args) -> None:
    model, vocab, _ = load_checkpoint(args.checkpoint)
    tok = Tokenizer([w for w in vocab if w not in SPECIALS])
    source = tok.encode(args.source)
    db = load_database(args.database) if args.database else None
    k = cfg.k_neighbors if db is not None else 0
    z_layers = mixture_mean_latents(model, source, db, k)
    strategy = "greedy" if args.strategy == "greedy" else "top_k"
    for i in range(args.n_samples):
        rng = np.random.default_rng([cfg.seed, 13, i])
        ids = model.generate(z_layers, cfg.max_gen_len, strategy=strategy,
                             rng=rng, top_k=cfg.top_k_sample)
        print(tok.decode(ids))


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        os.makedirs(args.out, exist_ok=True)
        if args.command == "train-vae":
            path, _ = run_stage1(cfg, args.out)
            print(path)
        elif args.command == "build-db":
            print(run_stage2(cfg, args.checkpoint, args.out))
        elif args.command == "train-regavae":
            path, _ = run_stage3(cfg, args.checkpoint, args.database, args.out)
            print(path)
        elif args.command == "generate":
            _generate(cfg, args)
        elif args.command == "eval":
            report = run_eval(cfg, args.checkpoint, args.database, args.out)
            print(report.to_text(), end="")
        elif args.command == "ablate":
            reports = run_ablation(cfg, args.out, sweep=args.sweep)
            print(json.dumps({k: json.loads(v.to_json()) for k, v in reports.items()},
                             indent=2, sort_keys=True))
    except (DivergenceError, NumericOverflowError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (RegaVaeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
