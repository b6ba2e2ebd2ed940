"""Greedy layer-sample ranking on validation uncertainty quality.

Starting from the single best sample, each step appends the candidate whose
addition gives the lowest mean KL to the oracle on validation data. Per-sample
outputs are computed once (with the OLE scheduler) and reused, so a step costs
only arithmetic over cached outputs.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bench import quality_score
from .ensemble import GaussianPrediction, LayerEnsembleModel, check_sample_set, gaussian_from_outputs
from .ole import ole_eval, sort_samples

RANKING_HEADER = ["rank", "sample_indices", "Q_val", "Q_test"]
CURVE_HEADER = ["P", "Q"]


@dataclass
class RankedSamples:
    samples: list  # insertion order == rank
    scores: list  # validation Q of each prefix
    pool: list
    evaluations: int = 0
    test_scores: list = field(default_factory=list)

    def prefix(self, P: int) -> list:
        return self.samples[:P]


class OutputCache:
    """Per-sample network outputs on a fixed input, keyed by sample."""

    def __init__(self, model: LayerEnsembleModel, samples, x):
        ordered = sort_samples(check_sample_set(model, samples))
        outputs = ole_eval(model, ordered, x)
        self.outputs = {s: o.reshape(-1) for s, o in zip(ordered, outputs)}

    def prediction(self, subset) -> GaussianPrediction:
        return gaussian_from_outputs([self.outputs[s] for s in subset])

    def score(self, subset, oracle: GaussianPrediction) -> float:
        return quality_score(self.prediction(subset), oracle).mean_kl


def rank_samples(model: LayerEnsembleModel, pool, X_val, oracle_val: GaussianPrediction,
                 max_P: int | None = None, threads: int = 1) -> RankedSamples:
    """Greedy nested subsets of ``pool`` ordered by validation quality.

    Lower KL is better, so each step takes the argmin; ties go to the
    lexicographically smallest sample.
    """
    pool = sort_samples(check_sample_set(model, pool))
    max_P = len(pool) if max_P is None else max_P
    if not 1 <= max_P <= len(pool):
        raise ValueError(f"max_P={max_P} outside [1, {len(pool)}]")
    cache = OutputCache(model, pool, X_val)
    chosen: list = []
    scores: list = []
    remaining = list(pool)
    evaluations = 0
    executor = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for _ in range(max_P):
            candidates = [chosen + [s] for s in remaining]
            if executor is not None:
                qs = list(executor.map(lambda sub: cache.score(sub, oracle_val), candidates))
            else:
                qs = [cache.score(sub, oracle_val) for sub in candidates]
            evaluations += len(qs)
            best = min(range(len(qs)), key=lambda j: (qs[j], remaining[j]))
            chosen.append(remaining.pop(best))
            scores.append(qs[best])
    finally:
        if executor is not None:
            executor.shutdown()
    return RankedSamples(chosen, scores, pool, evaluations)


def evaluate_prefixes(model: LayerEnsembleModel, ranked: RankedSamples, X_test,
                      oracle_test: GaussianPrediction) -> list[tuple[int, float]]:
    """Quality of every ranked prefix on held-out data, as ``(P, Q)`` pairs."""
    if not ranked.samples:
        raise ValueError("nothing ranked")
    cache = OutputCache(model, ranked.samples, X_test)
    curve = [(P, cache.score(ranked.samples[:P], oracle_test))
             for P in range(1, len(ranked.samples) + 1)]
    ranked.test_scores = [q for _, q in curve]
    return curve


def best_prefix(curve) -> int:
    """Smallest P attaining the minimum Q."""
    qs = np.array([q for _, q in curve])
    return int(curve[int(np.argmin(qs))][0])


def format_sample(sample) -> str:
    return "-".join(str(q) for q in sample)
