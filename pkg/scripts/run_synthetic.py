#!/usr/bin/env python3
"""Run the full three-stage pipeline (VAE pretrain, database build,
retrieval-augmented train) plus evaluation on the bundled corpus config."""

import argparse
import os
import sys

from regavae.training import RunConfig, run_pipeline

DEFAULT_CONFIG = os.path.join(os.path.dirname(__file__), "..", "configs",
                              "synthetic.json")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=DEFAULT_CONFIG)
    ap.add_argument("--out", default="out/synthetic")
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args()

    cfg = RunConfig.from_file(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if not os.path.exists(cfg.corpus):
        sys.exit(f"corpus {cfg.corpus} not found; run scripts/make_corpus.py first")
    ckpt, report = run_pipeline(cfg, args.out)
    print(f"final checkpoint: {ckpt}")
    print(report.to_text(), end="")


if __name__ == "__main__":
    main()
