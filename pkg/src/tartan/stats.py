"""Significance testing and multi-seed aggregation.

The comparison protocol: per-method scores are one metric per seed, reported
as mean with the sample standard deviation as a subscript, and compared with
a two-sided permutation test on the absolute difference of means. Small
instances can be tested exhaustively; Monte Carlo mode uses add-one smoothing
so a finite permutation sample never reports p = 0.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from itertools import combinations
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .prng import substream

log = logging.getLogger(__name__)

EXHAUSTIVE_LIMIT = 200_000
SIGNIFICANCE_LEVEL = 0.05

# Tie tolerance for comparing permutation statistics against the observed one.
_TIE_TOL = 1e-9


@dataclass(frozen=True)
class SampleSet:
    label: str
    values: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if not self.values:
            raise ValueError(f"sample set {self.label!r} is empty")
        if any(not math.isfinite(v) for v in self.values):
            raise ValueError(f"non-finite value in sample set {self.label!r}")

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))


def _observed_statistic(a: Sequence[float], b: Sequence[float]) -> float:
    return abs(float(np.mean(a)) - float(np.mean(b)))


def permutation_test(a: SampleSet, b: SampleSet, n_permutations: int = 10_000,
                     seed: int = 0) -> float:
    """Two-sided permutation test on |mean(a) - mean(b)|.

    n_permutations = 0 selects exhaustive mode (every balanced relabeling,
    exact proportion), valid while C(|a|+|b|, |a|) <= 200000. Monte Carlo mode
    returns (1 + hits) / (1 + n).
    """
    pooled = np.asarray(a.values + b.values, dtype=np.float64)
    n_a = len(a.values)
    observed = _observed_statistic(a.values, b.values)
    threshold = observed - _TIE_TOL * max(1.0, observed)

    if n_permutations == 0:
        total = math.comb(len(pooled), n_a)
        if total > EXHAUSTIVE_LIMIT:
            raise ValueError(f"exhaustive mode needs C(n, k) <= {EXHAUSTIVE_LIMIT}, got {total}")
        hits = 0
        pooled_sum = float(pooled.sum())
        for combo in combinations(range(len(pooled)), n_a):
            mean_a = float(pooled[list(combo)].mean())
            mean_b = (pooled_sum - mean_a * n_a) / (len(pooled) - n_a)
            if abs(mean_a - mean_b) >= threshold:
                hits += 1
        return hits / total

    if n_permutations < 1:
        raise ValueError("n_permutations must be >= 1, or 0 for exhaustive mode")
    rng = substream(seed, "permutation", a.label, b.label, n_permutations)
    hits = 0
    for _ in range(n_permutations):
        perm = rng.permutation(pooled)
        if _observed_statistic(perm[:n_a], perm[n_a:]) >= threshold:
            hits += 1
    return (1 + hits) / (1 + n_permutations)


def aggregate_runs(records: Sequence) -> Tuple[float, float, List[float]]:
    """(mean, sample std, per-seed values) of final test metrics.

    Records must come from one config family (same strategy); a single record
    reports std 0 by convention since the n-1 denominator is undefined.
    """
    if not records:
        raise ValueError("no records to aggregate")
    strategies = {r.strategy for r in records}
    if len(strategies) != 1:
        raise ValueError(f"mixed metrics: records from strategies {sorted(strategies)}")
    values = [float(r.final_test_metric) for r in records]
    if any(not math.isfinite(v) for v in values):
        raise ValueError("non-finite metric among records")
    mean = float(np.mean(values))
    if len(values) == 1:
        log.info("single record: sample std undefined (n-1 = 0); reporting 0")
        return mean, 0.0, values
    return mean, float(np.std(values, ddof=1)), values


def format_mean_std(mean: float, std: float) -> str:
    """Table-cell style, e.g. 67.74_{3.68}."""
    return f"{mean:.2f}_{{{std:.2f}}}"


def build_comparison_table(samples: Dict[str, SampleSet], baseline: str,
                           n_permutations: int = 10_000, seed: int = 0) -> Tuple[List[dict], str]:
    """Rows of method statistics plus a rendered text table.

    Every non-baseline method gets a p-value against the baseline and a
    significance marker when p < 0.05.
    """
    if baseline not in samples:
        raise ValueError(f"baseline {baseline!r} not among methods {sorted(samples)}")
    rows: List[dict] = []
    base = samples[baseline]
    for label, sample in samples.items():
        mean = float(np.mean(sample.values))
        std = 0.0 if len(sample.values) == 1 else float(np.std(sample.values, ddof=1))
        row = {
            "method": label,
            "n_seeds": len(sample.values),
            "mean": mean,
            "std": std,
            "formatted": format_mean_std(mean, std),
            "p_value": None,
            "significant": False,
        }
        if label != baseline:
            p = permutation_test(base, sample, n_permutations=n_permutations, seed=seed)
            row["p_value"] = p
            row["significant"] = p < SIGNIFICANCE_LEVEL
        rows.append(row)

    header = f"{'method':<24} {'mean_{std}':<16} {'p vs ' + baseline:<12} sig"
    lines = [header, "-" * len(header)]
    for row in rows:
        p_text = "baseline" if row["p_value"] is None else f"{row['p_value']:.4f}"
        marker = "*" if row["significant"] else ""
        lines.append(f"{row['method']:<24} {row['formatted']:<16} {p_text:<12} {marker}")
    return rows, "\n".join(lines)
