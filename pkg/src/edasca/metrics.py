"""Guessing entropy, traces-to-success and box-plot statistics."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .templates import TemplateModel, per_trace_key_scores
from .traces import TraceSet


@dataclass(frozen=True, eq=False)
class GeCurve:
    """Mean 0-indexed rank of the true key after t = 1..T attack traces."""

    mean_rank: np.ndarray
    n_repetitions: int
    final_ranks: np.ndarray

    def __post_init__(self):
        mean_rank = np.asarray(self.mean_rank, dtype=np.float64)
        final = np.asarray(self.final_ranks, dtype=np.float64)
        if mean_rank.ndim != 1 or mean_rank.size < 1:
            raise ValueError("mean_rank must be a non-empty vector")
        if final.shape != (self.n_repetitions,):
            raise ValueError("final_ranks must hold one value per repetition")
        object.__setattr__(self, "mean_rank", mean_rank)
        object.__setattr__(self, "final_ranks", final)

    def __len__(self):
        return self.mean_rank.size

    def to_csv(self) -> str:
        lines = ["t,mean_rank"]
        lines += [f"{t},{r!r}" for t, r in enumerate(self.mean_rank.tolist(), start=1)]
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "mean_rank": self.mean_rank.tolist(),
            "n_repetitions": self.n_repetitions,
            "final_ranks": self.final_ranks.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def rank_trajectory(scores: np.ndarray, true_key: int) -> np.ndarray:
    """Rank of ``true_key`` after each prefix of the ``[T, 256]`` per-trace scores."""
    cum = np.cumsum(scores, axis=0)
    target = cum[:, true_key:true_key + 1]
    return (cum > target).sum(axis=1) + (cum[:, :true_key] == target).sum(axis=1)


def attack_subsets(n_pool: int, T: int, reps: int, seed) -> list[np.ndarray]:
    """Row indices used by each repetition.

    Repetitions take disjoint slices of one seeded permutation while the pool
    allows it; any repetition that does not fit draws its own permutation from the
    ``repetition_index``-th child of ``seed``.
    """
    if T < 1 or reps < 1:
        raise ValueError("T and reps must be >= 1")
    if n_pool < T:
        raise ValueError(f"attack pool holds {n_pool} traces, fewer than T={T}")
    children = np.random.SeedSequence(seed).spawn(reps + 1)
    base = np.random.default_rng(children[0]).permutation(n_pool)
    subsets = []
    for r in range(reps):
        if (r + 1) * T <= n_pool:
            subsets.append(base[r * T:(r + 1) * T])
        else:
            subsets.append(np.random.default_rng(children[r + 1]).permutation(n_pool)[:T])
    return subsets


def guessing_entropy_from_scores(scores: np.ndarray, true_key: int, T: int, reps: int, seed) -> GeCurve:
    """GE over repetitions given precomputed ``[n_pool, 256]`` per-trace scores."""
    ranks = np.stack([rank_trajectory(scores[idx], true_key)
                      for idx in attack_subsets(scores.shape[0], T, reps, seed)])
    return GeCurve(ranks.mean(axis=0), reps, ranks[:, -1])


def true_key_of(pool: TraceSet) -> int:
    keys = pool.keys
    if not np.all(keys == keys[0]):
        raise ValueError("attack traces must share a single key")
    return int(keys[0])


def guessing_entropy(model: TemplateModel, attack_pool: TraceSet, T: int, reps: int, seed) -> GeCurve:
    if attack_pool.n_traces < T:
        raise ValueError(f"attack pool holds {attack_pool.n_traces} traces, fewer than T={T}")
    true_key = true_key_of(attack_pool)
    return guessing_entropy_from_scores(per_trace_key_scores(model, attack_pool), true_key, T, reps, seed)


def q_tge(curve: GeCurve) -> int | None:
    """Smallest t from which the mean rank stays at 0, or None."""
    nonzero = np.flatnonzero(curve.mean_rank != 0)
    if nonzero.size == 0:
        return 1
    last = int(nonzero[-1]) + 1
    return None if last == len(curve) else last + 1


@dataclass(frozen=True)
class BoxStats:
    median: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: list

    def to_dict(self) -> dict:
        return {
            "median": self.median, "q1": self.q1, "q3": self.q3,
            "whisker_low": self.whisker_low, "whisker_high": self.whisker_high,
            "outliers": list(self.outliers),
        }


def boxplot_stats(values) -> BoxStats:
    """Tukey box plot with linearly interpolated quartiles."""
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("boxplot_stats needs at least one value")
    q1, median, q3 = np.percentile(x, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = x[(x >= lo_fence) & (x <= hi_fence)]
    outliers = np.sort(x[(x < lo_fence) | (x > hi_fence)])
    if inside.size == 0:  # cannot happen with interpolated quartiles, kept as a guard
        inside = np.array([median])
    return BoxStats(
        median=float(median), q1=float(q1), q3=float(q3),
        whisker_low=float(inside.min()), whisker_high=float(inside.max()),
        outliers=outliers.tolist(),
    )
