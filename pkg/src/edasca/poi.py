"""Classical point-of-interest scoring and top-k selection."""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np

from .sim import estimate_snr
from .traces import TraceSet


class PoiSpacingWarning(UserWarning):
    """Spacing constraint left fewer than k selectable samples."""


class ScoreMethod(str, enum.Enum):
    ABS_PEARSON = "abs_pearson"
    SNR = "snr"


@dataclass(frozen=True, eq=False)
class PoiCandidate:
    """Boolean inclusion mask over the time samples of a trace."""

    mask: np.ndarray

    def __post_init__(self):
        mask = np.ascontiguousarray(self.mask, dtype=bool)
        if mask.ndim != 1:
            raise ValueError("mask must be 1-D")
        mask.flags.writeable = False
        object.__setattr__(self, "mask", mask)

    @classmethod
    def from_indices(cls, indices, n_samples: int) -> PoiCandidate:
        mask = np.zeros(n_samples, dtype=bool)
        mask[list(indices)] = True
        return cls(mask)

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def selected_count(self) -> int:
        return int(self.mask.sum())

    def __len__(self):
        return self.mask.shape[0]

    def __eq__(self, other):
        if not isinstance(other, PoiCandidate):
            return NotImplemented
        return np.array_equal(self.mask, other.mask)

    def __hash__(self):
        return hash(self.mask.tobytes())


@dataclass(frozen=True)
class PoiScores:
    scores: np.ndarray
    method: ScoreMethod

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 1 or not np.all(np.isfinite(scores)) or np.any(scores < 0):
            raise ValueError("scores must be a finite non-negative vector")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "method", ScoreMethod(self.method))

    def to_csv(self) -> str:
        rows = ["index,score"] + [f"{i},{s!r}" for i, s in enumerate(self.scores.tolist())]
        return "\n".join(rows) + "\n"


def _abs_pearson(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x = x - x.mean(axis=0)
    y = y - y.mean()
    sxy = y @ x
    sxx = np.einsum("ij,ij->j", x, x)
    syy = y @ y
    denom = np.sqrt(sxx * syy)
    r = np.zeros(x.shape[1])
    ok = denom > 0
    r[ok] = np.abs(sxy[ok]) / denom[ok]
    return np.clip(r, 0.0, 1.0)


def correlation_ranking(ts: TraceSet, labels) -> PoiScores:
    """|Pearson r| between each sample column and the numeric label."""
    labels = np.asarray(labels, dtype=np.float64)
    if ts.n_traces < 3:
        raise ValueError("correlation ranking needs at least 3 traces")
    if labels.shape != (ts.n_traces,):
        raise ValueError("labels must have one entry per trace")
    if np.all(labels == labels[0]):
        raise ValueError("labels are all equal; correlation undefined")
    return PoiScores(_abs_pearson(ts.samples.astype(np.float64), labels), ScoreMethod.ABS_PEARSON)


def snr_ranking(ts: TraceSet, labels) -> PoiScores:
    return PoiScores(estimate_snr(ts, labels), ScoreMethod.SNR)


def select_top_k(scores: PoiScores, k: int, min_spacing: int = 1) -> PoiCandidate:
    """Greedy pick of the k highest scores, keeping selected indices at
    least ``min_spacing`` apart. Ties go to the lower index. Emits
    :class:`PoiSpacingWarning` when fewer than k samples fit."""
    n = scores.scores.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of samples ({n})")
    if min_spacing < 1:
        raise ValueError("min_spacing must be >= 1")
    order = np.lexsort((np.arange(n), -scores.scores))
    chosen: list[int] = []
    for idx in order:
        if all(abs(int(idx) - c) >= min_spacing for c in chosen):
            chosen.append(int(idx))
            if len(chosen) == k:
                break
    if len(chosen) < k:
        warnings.warn(f"only {len(chosen)} of {k} POIs fit with min_spacing={min_spacing}",
                      PoiSpacingWarning, stacklevel=2)
    return PoiCandidate.from_indices(chosen, n)
