#!/usr/bin/env python3
"""Compare evolutionary search with the exhaustive argmin on an enumerable
space scored by a tabular oracle; prints the hit rate over seeded runs.
"""

from __future__ import annotations

import argparse
import time

from s3nas.cost import ModelShape, ResourceBudget, param_count
from s3nas.evaluator import TabularConfig, TabularOracle
from s3nas.evolution import SearchConfig, brute_force_argmin, evolutionary_search
from s3nas.space import DimensionKind as K, SearchSpace, Subspace, encode, enumerate_architectures

SHAPE = ModelShape(32, 1, 2, 4)
GAINS = {(K.DEPTH, 1): 0.02, (K.DEPTH, 2): 0.03, (K.DEPTH, 3): 0.05, (K.EMBED_DIM, 1): 0.002,
         (K.EMBED_DIM, 2): 0.003, (K.EMBED_DIM, 3): 0.004, (K.MLP_RATIO, 1): 0.01,
         (K.MLP_RATIO, 2): 0.02, (K.NUM_HEADS, 1): 0.01, (K.NUM_HEADS, 2): -0.01}


def enumerable_space() -> SearchSpace:
    subs = []
    for i in range(1, 5):
        big = i <= 2
        subs += [Subspace(K.DEPTH, i, (1, 2) if i <= 3 else (1,), 1),
                 Subspace(K.EMBED_DIM, i, (8, 16) if i <= 3 else (8,), 8),
                 Subspace(K.MLP_RATIO, i, (1, 2) if big else (1,), 0.5),
                 Subspace(K.WINDOW_SIZE, i, (2,) if i < 4 else (1,), 1),
                 Subspace(K.NUM_HEADS, i, (1, 2) if big else (1,), 1),
                 Subspace(K.QKV_DIM, i, (8,), 8)]
    return SearchSpace(tuple(subs))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--runs", type=int, default=100)
    ap.add_argument("--noise", type=float, default=0.01)
    args = ap.parse_args()
    space = enumerable_space()
    archs = list(enumerate_architectures(space))
    params = sorted(param_count(a, SHAPE) for a in archs)
    budget = ResourceBudget(max_params=params[len(params) // 2])
    oracle = TabularOracle(TabularConfig(0.5, GAINS, args.noise, 7))
    best, err = brute_force_argmin(archs, oracle, SHAPE, budget)
    print(f"{len(archs)} architectures, budget {budget.max_params} params")
    print(f"argmin {encode(best)} error {err:.4f}")
    t0 = time.time()
    hits = sum(encode(evolutionary_search(space, oracle, budget, SearchConfig(), s, SHAPE).best) == encode(best)
               for s in range(args.runs))
    print(f"hits {hits}/{args.runs} in {time.time() - t0:.1f}s")


if __name__ == "__main__":
    main()
