"""UMDA search over binary POI-selection genomes.

Each generation evaluates every candidate with a template attack on held-out
validation traces, keeps the best ``selection_size`` of them, refits the
per-position inclusion probabilities and resamples. The best candidate seen
so far is reinserted into every new population.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .metrics import attack_subsets, rank_trajectory, true_key_of
from .poi import PoiCandidate, PoiScores
from .sim import InsufficientDataError
from .templates import (
    DEFAULT_EPSILON,
    ConditioningError,
    ProfilingStats,
    key_hypothesis_labels,
)
from .traces import LeakageModel, TraceSet, label_traces

log = logging.getLogger(__name__)

INIT_KINDS = ("uniform", "correlation_weighted")
_SAMPLING_TAG = 0x5EED
_FITNESS_TAG = 0xF17


@dataclass(frozen=True)
class UmdaConfig:
    population_size: int = 40
    selection_size: int = 10
    max_generations: int = 30
    stagnation_limit: int = 10
    init: str = "correlation_weighted"
    init_p0: float = 0.1
    clamp: tuple[float, float] | None = None
    fitness_traces: int = 20
    fitness_reps: int = 25
    seed: int = 0
    max_poi: int | None = None
    poi_penalty: float = 0.0

    def __post_init__(self):
        if not 1 <= self.selection_size < self.population_size:
            raise ValueError("need 1 <= selection_size < population_size")
        if self.max_generations < 1:
            raise ValueError("max_generations must be >= 1")
        if self.stagnation_limit < 1:
            raise ValueError("stagnation_limit must be >= 1")
        if self.init not in INIT_KINDS:
            raise ValueError(f"init must be one of {INIT_KINDS}")
        if not 0 <= self.init_p0 <= 1:
            raise ValueError("init_p0 must be a probability")
        if self.clamp is not None:
            lo, hi = self.clamp
            if not 0 < lo <= hi < 1:
                raise ValueError("clamp must satisfy 0 < lo <= hi < 1")
            object.__setattr__(self, "clamp", (float(lo), float(hi)))
        if self.fitness_traces < 1 or self.fitness_reps < 1:
            raise ValueError("fitness_traces and fitness_reps must be >= 1")
        if self.max_poi is not None and self.max_poi < 1:
            raise ValueError("max_poi must be >= 1")
        if self.poi_penalty < 0:
            raise ValueError("poi_penalty must be >= 0")

    def clamp_for(self, length: int) -> tuple[float, float]:
        if self.clamp is not None:
            return self.clamp
        return 1.0 / length, 1.0 - 1.0 / length

    def to_dict(self) -> dict:
        d = asdict(self)
        d["clamp"] = None if self.clamp is None else list(self.clamp)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> UmdaConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown UmdaConfig fields: {sorted(unknown)}")
        d = dict(d)
        if d.get("clamp") is not None:
            d["clamp"] = tuple(d["clamp"])
        return cls(**d)


@dataclass
class UmdaState:
    marginals: np.ndarray
    population: list[PoiCandidate]
    fitness: np.ndarray | None = None
    generation: int = 0
    best_ever: tuple[PoiCandidate, float] | None = None


@dataclass
class UmdaResult:
    best: PoiCandidate
    best_fitness: float
    history: list[tuple[int, float, float]] = field(default_factory=list)
    marginals: np.ndarray | None = None

    def history_csv(self) -> str:
        lines = ["generation,best_fitness,mean_fitness"]
        lines += [f"{g},{b!r},{m!r}" for g, b, m in self.history]
        return "\n".join(lines) + "\n"

    def marginals_csv(self) -> str:
        lines = ["index,probability"]
        lines += [f"{i},{p!r}" for i, p in enumerate(self.marginals.tolist())]
        return "\n".join(lines) + "\n"


def sample_population(marginals, R: int, seed) -> list[PoiCandidate]:
    """R Bernoulli genomes; an all-zero genome gets its highest-marginal bit set."""
    marginals = np.asarray(marginals, dtype=np.float64)
    if np.any((marginals < 0) | (marginals > 1)):
        raise ValueError("marginals must be probabilities")
    draws = np.random.default_rng(seed).random((R, marginals.size)) < marginals
    empty = ~draws.any(axis=1)
    draws[empty, int(np.argmax(marginals))] = True
    return [PoiCandidate(row) for row in draws]


def estimate_marginals(selected: list[PoiCandidate], clamp: tuple[float, float]) -> np.ndarray:
    if not selected:
        raise ValueError("no candidates selected")
    genomes = np.stack([c.mask for c in selected])
    return np.clip(genomes.mean(axis=0), clamp[0], clamp[1])


def init_population(cfg: UmdaConfig, scores: PoiScores | None, n_samples: int) -> UmdaState:
    lo, hi = cfg.clamp_for(n_samples)
    if cfg.init == "uniform":
        marginals = np.full(n_samples, cfg.init_p0)
    else:
        if scores is None:
            raise ValueError("correlation_weighted init requires POI scores")
        s = scores.scores
        if s.shape != (n_samples,):
            raise ValueError("scores length must equal n_samples")
        mean = s.mean()
        marginals = np.full(n_samples, cfg.init_p0) if mean == 0 else cfg.init_p0 * s / mean
    marginals = np.clip(marginals, lo, hi)
    population = sample_population(marginals, cfg.population_size, [cfg.seed, _SAMPLING_TAG, 0])
    return UmdaState(marginals=marginals, population=population)


def select_truncation(state: UmdaState, N: int) -> list[PoiCandidate]:
    """The N lowest-fitness candidates; ties go to the lower population index."""
    fitness = np.asarray(state.fitness)
    if N >= len(state.population):
        raise ValueError("N must be smaller than the population size")
    order = np.argsort(fitness, kind="stable")[:N]
    return [state.population[i] for i in sorted(order)]


class FitnessEvaluator:
    """Candidate -> normalized area under the validation GE curve (+ POI penalty).

    Every candidate is scored against the same validation subsets, so fitness
    is a deterministic function of the genome and is memoized.
    """

    def __init__(self, profiling: TraceSet, validation: TraceSet, cfg: UmdaConfig,
                 leakage_model: LeakageModel = LeakageModel.HAMMING_WEIGHT,
                 pooled: bool = True, epsilon: float = DEFAULT_EPSILON):
        if profiling.n_samples != validation.n_samples:
            raise ValueError("profiling and validation traces differ in length")
        self.cfg = cfg
        self.pooled = pooled
        self.epsilon = epsilon
        self.leakage_model = LeakageModel(leakage_model)
        self.stats = ProfilingStats(profiling, label_traces(profiling, self.leakage_model), self.leakage_model)
        self.true_key = true_key_of(validation)
        self.subsets = attack_subsets(validation.n_traces, cfg.fitness_traces, cfg.fitness_reps,
                                      [cfg.seed, _FITNESS_TAG])
        self.rows = np.unique(np.concatenate(self.subsets))
        self.positions = [np.searchsorted(self.rows, s) for s in self.subsets]
        self.samples = validation.samples[self.rows].astype(np.float64)
        self.labels = key_hypothesis_labels(validation.plaintexts[self.rows], self.leakage_model)
        self._cache: dict[bytes, float] = {}

    @property
    def worst(self) -> float:
        return 256.0

    def penalty(self, candidate: PoiCandidate) -> float:
        if self.cfg.max_poi is None:
            return 0.0
        return self.cfg.poi_penalty * max(0, candidate.selected_count - self.cfg.max_poi)

    def mean_rank_curve(self, candidate: PoiCandidate) -> np.ndarray:
        model = self.stats.templates(candidate, self.pooled, self.epsilon)
        ll = model.log_likelihoods(self.samples[:, candidate.indices])
        scores = np.take_along_axis(ll, self.labels, axis=1)
        return np.mean([rank_trajectory(scores[pos], self.true_key) for pos in self.positions], axis=0)

    def __call__(self, candidate: PoiCandidate) -> float:
        key = candidate.mask.tobytes()
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        if candidate.selected_count < 1:
            raise ValueError("candidate selects no samples")
        try:
            value = float(self.mean_rank_curve(candidate).mean())
        except (ConditioningError, InsufficientDataError) as exc:
            log.debug("candidate %s failed: %s", candidate.indices.tolist(), exc)
            value = self.worst
        value += self.penalty(candidate)
        self._cache[key] = value
        return value


def evaluate_fitness(candidate: PoiCandidate, profiling: TraceSet, validation: TraceSet,
                     cfg: UmdaConfig, leakage_model: LeakageModel = LeakageModel.HAMMING_WEIGHT,
                     pooled: bool = True, epsilon: float = DEFAULT_EPSILON) -> float:
    return FitnessEvaluator(profiling, validation, cfg, leakage_model, pooled, epsilon)(candidate)


def run_umda(profiling: TraceSet | None, validation: TraceSet | None, cfg: UmdaConfig,
             scores: PoiScores | None = None, *,
             fitness: Callable[[PoiCandidate], float] | None = None,
             n_samples: int | None = None,
             leakage_model: LeakageModel = LeakageModel.HAMMING_WEIGHT,
             pooled: bool = True, epsilon: float = DEFAULT_EPSILON,
             threads: int = 1) -> UmdaResult:
    """Run the UMDA loop until ``max_generations`` or ``stagnation_limit``
    generations without strict improvement of the best-ever fitness.

    ``fitness`` replaces the template-attack evaluator (the traces may then be
    None, with ``n_samples`` giving the genome length).
    """
    if fitness is None:
        fitness = FitnessEvaluator(profiling, validation, cfg, leakage_model, pooled, epsilon)
        n_samples = profiling.n_samples
    elif n_samples is None:
        n_samples = profiling.n_samples
    clamp = cfg.clamp_for(n_samples)
    state = init_population(cfg, scores, n_samples)
    result = None
    stale = 0
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for gen in range(1, cfg.max_generations + 1):
            state.generation = gen
            if pool is None:
                values = [fitness(c) for c in state.population]
            else:
                values = list(pool.map(fitness, state.population))
            state.fitness = np.asarray(values, dtype=np.float64)
            idx = int(np.argmin(state.fitness))
            if result is None or state.fitness[idx] < result.best_fitness:
                if result is None:
                    result = UmdaResult(state.population[idx], float(state.fitness[idx]))
                else:
                    result.best, result.best_fitness = state.population[idx], float(state.fitness[idx])
                stale = 0
            else:
                stale += 1
            state.best_ever = (result.best, result.best_fitness)
            result.history.append((gen, result.best_fitness, float(state.fitness.mean())))
            log.info("generation %d: best %.4f mean %.4f (%d POIs)", gen, result.best_fitness,
                     state.fitness.mean(), result.best.selected_count)
            if gen == cfg.max_generations or stale >= cfg.stagnation_limit:
                break
            state.marginals = estimate_marginals(select_truncation(state, cfg.selection_size), clamp)
            state.population = sample_population(state.marginals, cfg.population_size,
                                                 [cfg.seed, _SAMPLING_TAG, gen])
            state.population[-1] = result.best
    finally:
        if pool is not None:
            pool.shutdown()
    result.marginals = state.marginals
    return result
