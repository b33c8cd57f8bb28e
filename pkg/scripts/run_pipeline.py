#!/usr/bin/env python3
"""Run the full toy pipeline: data, space evolution with per-space search,
inherit-vs-retrain ablation, attention statistics and the report.

    python scripts/run_pipeline.py --config configs/toy_supernet.json [--set key=value ...]
"""

from __future__ import annotations

import argparse
import json
import logging
import time

from s3nas.config import load_config
from s3nas.pipeline import run

STEPS = ("gen-data", "evolve-space", "ablate-inherit", "analyze-attention", "report")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/toy_supernet.json")
    ap.add_argument("--set", dest="overrides", action="append", default=[])
    ap.add_argument("--skip", action="append", default=[], choices=STEPS)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    cfg = load_config(args.config, args.overrides)
    for step in STEPS:
        if step in args.skip:
            continue
        t0 = time.time()
        result = run(step, cfg)
        logging.info("%s done in %.1fs", step, time.time() - t0)
        print(step, json.dumps(result.summary, sort_keys=True))


if __name__ == "__main__":
    main()
