"""Gaussian templates over selected POIs and the key-ranking attack."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

from .poi import PoiCandidate
from .sim import InsufficientDataError
from .traces import SBOX, LeakageModel, TraceSet

DEFAULT_EPSILON = 1e-6
_LOG_2PI = math.log(2.0 * math.pi)


class ConditioningError(ValueError):
    """Covariance is not positive definite even after regularization."""


class ProfilingWarning(UserWarning):
    pass


def _regularize(cov: np.ndarray, epsilon: float) -> np.ndarray:
    d = cov.shape[-1]
    scale = epsilon * np.trace(cov) / d
    return cov + scale * np.eye(d)


def _cholesky(cov: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError(f"{what} covariance is not positive definite") from exc


@dataclass(frozen=True, eq=False)
class TemplateModel:
    """Per-class means plus pooled (``[d, d]``) or per-class (``[c, d, d]``)
    covariance over the samples selected by ``poi``."""

    class_means: np.ndarray
    covariance: np.ndarray
    poi: PoiCandidate
    leakage_model: LeakageModel
    regularization_epsilon: float = DEFAULT_EPSILON
    _chol: np.ndarray = field(init=False, repr=False)
    _half_logdet: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        model = LeakageModel(self.leakage_model)
        object.__setattr__(self, "leakage_model", model)
        means = np.asarray(self.class_means, dtype=np.float64)
        cov = np.asarray(self.covariance, dtype=np.float64)
        n_classes, d = model.class_count(), self.poi.selected_count
        if means.shape != (n_classes, d):
            raise ValueError(f"class_means has shape {means.shape}, expected {(n_classes, d)}")
        if cov.shape not in ((d, d), (n_classes, d, d)):
            raise ValueError(f"covariance has shape {cov.shape}")
        if not np.allclose(cov, np.swapaxes(cov, -1, -2)):
            raise ValueError("covariance must be symmetric")
        if cov.ndim == 2:
            chol = _cholesky(cov, "pooled")
        else:
            chol = np.stack([_cholesky(c, f"class {i}") for i, c in enumerate(cov)])
        half_logdet = np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)
        for name, arr in (("class_means", means), ("covariance", cov)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_half_logdet", half_logdet)

    @property
    def pooled(self) -> bool:
        return self.covariance.ndim == 2

    @property
    def n_poi(self) -> int:
        return self.poi.selected_count

    @property
    def n_classes(self) -> int:
        return self.class_means.shape[0]

    @property
    def trainable_parameters(self) -> int:
        # one per selected time sample
        return self.n_poi

    def log_likelihoods(self, x: np.ndarray) -> np.ndarray:
        """Gaussian log-density of each row of ``x`` (already restricted to the
        POIs) under every class; shape ``[n_rows, n_classes]``."""
        x = np.asarray(x, dtype=np.float64)
        d = self.n_poi
        out = np.empty((x.shape[0], self.n_classes))
        if self.pooled:
            z = solve_triangular(self._chol, x.T, lower=True)
            mz = solve_triangular(self._chol, self.class_means.T, lower=True)
            for c in range(self.n_classes):
                diff = z - mz[:, c:c + 1]
                out[:, c] = np.einsum("ij,ij->j", diff, diff)
            out *= -0.5
            out -= self._half_logdet + 0.5 * d * _LOG_2PI
        else:
            for c in range(self.n_classes):
                diff = solve_triangular(self._chol[c], (x - self.class_means[c]).T, lower=True)
                out[:, c] = -0.5 * np.einsum("ij,ij->j", diff, diff) - self._half_logdet[c]
            out -= 0.5 * d * _LOG_2PI
        return out

    def save(self, path) -> None:
        """Write ``<path>.json`` metadata and a ``<path>.bin`` f64 LE blob
        (means then covariance, both row-major)."""
        path = Path(path)
        meta = {
            "leakage_model": self.leakage_model.value,
            "poi": self.poi.indices.tolist(),
            "n_samples": len(self.poi),
            "pooled": self.pooled,
            "regularization_epsilon": self.regularization_epsilon,
            "means_shape": list(self.class_means.shape),
            "covariance_shape": list(self.covariance.shape),
            "blob": path.with_suffix(".bin").name,
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        blob = np.concatenate([self.class_means.ravel(), self.covariance.ravel()]).astype("<f8")
        path.with_suffix(".bin").write_bytes(blob.tobytes())

    @classmethod
    def load(cls, path) -> TemplateModel:
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        blob = np.frombuffer((path.parent / meta["blob"]).read_bytes(), dtype="<f8")
        n_means = math.prod(meta["means_shape"])
        if blob.size != n_means + math.prod(meta["covariance_shape"]):
            raise ValueError("template blob size does not match metadata")
        return cls(
            class_means=blob[:n_means].reshape(meta["means_shape"]),
            covariance=blob[n_means:].reshape(meta["covariance_shape"]),
            poi=PoiCandidate.from_indices(meta["poi"], meta["n_samples"]),
            leakage_model=LeakageModel(meta["leakage_model"]),
            regularization_epsilon=meta["regularization_epsilon"],
        )


def pooled_covariance(x, labels) -> np.ndarray:
    """Unregularized pooled covariance over the classes occurring in ``labels``."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    centered = x.copy()
    for c in classes:
        centered[labels == c] -= x[labels == c].mean(axis=0)
    return centered.T @ centered / (x.shape[0] - classes.size)


def class_covariance(x, labels, cls) -> np.ndarray:
    """Unregularized covariance of one class (divisor ``n_c - 1``)."""
    rows = np.asarray(x, dtype=np.float64)[np.asarray(labels) == cls]
    return np.atleast_2d(np.cov(rows, rowvar=False))


class ProfilingStats:
    """Class means and within-class scatter over every sample column.

    Templates for any POI subset are slices of these statistics, which is
    what makes repeated fitness evaluations cheap.
    """

    def __init__(self, profiling: TraceSet, labels, leakage_model: LeakageModel):
        self.leakage_model = LeakageModel(leakage_model)
        labels = np.asarray(labels)
        if labels.shape != (profiling.n_traces,):
            raise ValueError("labels must have one entry per profiling trace")
        n_classes = self.leakage_model.class_count()
        counts = np.bincount(labels, minlength=n_classes)
        if counts.shape[0] > n_classes:
            raise ValueError(f"labels exceed {n_classes} classes")
        for c in range(n_classes):
            if counts[c] < 2:
                raise InsufficientDataError(f"class {c} has {counts[c]} profiling trace(s); need at least 2")
        x = profiling.samples.astype(np.float64)
        self.n_samples = profiling.n_samples
        self.n_traces = profiling.n_traces
        self.counts = counts
        self.means = np.stack([x[labels == c].mean(axis=0) for c in range(n_classes)])
        self._centered = x - self.means[labels]
        self._labels = labels
        self._pooled_scatter = None
        self._class_scatter = None

    @property
    def pooled_scatter(self) -> np.ndarray:
        if self._pooled_scatter is None:
            self._pooled_scatter = self._centered.T @ self._centered
        return self._pooled_scatter

    @property
    def class_scatter(self) -> np.ndarray:
        if self._class_scatter is None:
            self._class_scatter = np.stack([
                self._centered[self._labels == c].T @ self._centered[self._labels == c]
                for c in range(self.means.shape[0])
            ])
        return self._class_scatter

    def templates(self, poi: PoiCandidate, pooled: bool = True,
                  epsilon: float = DEFAULT_EPSILON) -> TemplateModel:
        if len(poi) != self.n_samples:
            raise ValueError(f"POI mask length {len(poi)} != n_samples {self.n_samples}")
        idx = poi.indices
        if idx.size == 0:
            raise ValueError("POI candidate selects no samples")
        n_classes = self.means.shape[0]
        if self.n_traces < idx.size + n_classes:
            warnings.warn(f"{self.n_traces} profiling traces for {idx.size} POIs and {n_classes} classes",
                          ProfilingWarning, stacklevel=3)
        sub = np.ix_(idx, idx)
        if pooled:
            cov = _regularize(self.pooled_scatter[sub] / (self.n_traces - n_classes), epsilon)
        else:
            scatter = self.class_scatter[(slice(None),) + sub]
            cov = np.stack([_regularize(s / (self.counts[c] - 1), epsilon) for c, s in enumerate(scatter)])
        return TemplateModel(self.means[:, idx], cov, poi, self.leakage_model, epsilon)


def build_templates(profiling: TraceSet, labels, poi: PoiCandidate, pooled: bool = True,
                    epsilon: float = DEFAULT_EPSILON,
                    leakage_model: LeakageModel = LeakageModel.HAMMING_WEIGHT) -> TemplateModel:
    """Profile Gaussian templates on the POI columns of ``profiling``.

    Pooled covariance divides the summed within-class scatter by
    ``n_traces - n_classes``; the per-class variant divides by ``n_c - 1``.
    Either is then loaded with ``epsilon * mean(diag) * I``.
    """
    if len(poi) != profiling.n_samples:
        raise ValueError(f"POI mask length {len(poi)} != n_samples {profiling.n_samples}")
    if poi.selected_count < 1:
        raise ValueError("POI candidate selects no samples")
    sub =TraceSet(profiling.samples[:, poi.indices], profiling.plaintexts, profiling.keys,
                   profiling.masks, profiling.scheme, profiling.seed)
    stats = ProfilingStats(sub, labels, leakage_model)
    model = stats.templates(PoiCandidate(np.ones(poi.selected_count, dtype=bool)), pooled, epsilon)
    return TemplateModel(model.class_means, model.covariance, poi, model.leakage_model, epsilon)


def discriminant_score(model: TemplateModel, trace_poi_values, cls: int) -> float:
    """Log-density of one POI vector under class ``cls``."""
    t = np.asarray(trace_poi_values, dtype=np.float64)
    if t.shape != (model.n_poi,):
        raise ValueError(f"expected a vector of length {model.n_poi}, got shape {t.shape}")
    if not 0 <= cls < model.n_classes:
        raise ValueError(f"class {cls} out of range")
    chol = model._chol if model.pooled else model._chol[cls]
    half_logdet = model._half_logdet if model.pooled else model._half_logdet[cls]
    z = solve_triangular(chol, t - model.class_means[cls], lower=True)
    return float(-0.5 * z @ z - half_logdet - 0.5 * model.n_poi * _LOG_2PI)


@dataclass(frozen=True, eq=False)
class KeyGuessingVector:
    scores: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.shape != (256,):
            raise ValueError("need exactly 256 key scores")
        scores.flags.writeable = False
        object.__setattr__(self, "scores", scores)

    @property
    def ranking(self) -> np.ndarray:
        """Key bytes best-first; equal scores ordered by ascending key."""
        return np.lexsort((np.arange(256), -self.scores))


def key_hypothesis_labels(plaintexts, leakage_model: LeakageModel) -> np.ndarray:
    """``[n_traces, 256]`` class label of each trace under each key guess."""
    p = np.asarray(plaintexts, dtype=np.uint8)
    return LeakageModel(leakage_model).label(SBOX[p[:, None] ^ np.arange(256, dtype=np.uint8)[None, :]])


def per_trace_key_scores(model: TemplateModel, traces: TraceSet) -> np.ndarray:
    """``[n_traces, 256]`` discriminant score of every trace for every key guess."""
    if traces.n_samples != len(model.poi):
        raise ValueError(f"traces have {traces.n_samples} samples, model expects {len(model.poi)}")
    ll = model.log_likelihoods(traces.samples[:, model.poi.indices])
    labels = key_hypothesis_labels(traces.plaintexts, model.leakage_model)
    return np.take_along_axis(ll, labels, axis=1)


def attack(model: TemplateModel, attack_traces: TraceSet) -> KeyGuessingVector:
    """Sum per-trace log scores for all 256 key hypotheses."""
    if attack_traces.n_traces == 0:
        raise ValueError("no attack traces")
    return KeyGuessingVector(per_trace_key_scores(model, attack_traces).sum(axis=0))


def rank_of_key(kgv: KeyGuessingVector, true_key: int) -> int:
    s = kgv.scores
    target = s[true_key]
    return int(np.sum(s > target) + np.sum(s[:true_key] == target))
