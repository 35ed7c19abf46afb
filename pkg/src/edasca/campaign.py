"""Campaign configuration and the attack / EDA pipelines behind the CLI.

Seed derivation: one top-level seed ``s`` drives everything. Each random
process uses ``derive_seed(s, TAG)`` where TAG is one of the constants below,
i.e. the first u64 drawn from ``SeedSequence([s, TAG])``.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .eda import FitnessEvaluator, UmdaConfig, UmdaResult, run_umda
from .metrics import GeCurve, boxplot_stats, guessing_entropy, q_tge
from .poi import PoiCandidate, PoiScores, ScoreMethod, correlation_ranking, select_top_k, snr_ranking
from .sim import SimConfig, simulate
from .templates import DEFAULT_EPSILON, TemplateModel, build_templates
from .traces import HW, SBOX, LeakageModel, Scheme, TraceSet, label_traces, load_traceset, split_traceset

log = logging.getLogger(__name__)

SEED_PROFILING = 1
SEED_ATTACK = 2
SEED_SPLIT = 3
SEED_GE = 4
SEED_UMDA = 5
SEED_ATTACK_KEY = 6

POI_TARGETS = ("intermediate", "masked", "mask")
POI_METHODS = ("abs_pearson", "snr", "indices", "eda")


class ConfigError(ValueError):
    """Invalid or inconsistent campaign configuration."""


def derive_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1, np.uint64)[0])


@dataclass
class PoiConfig:
    method: str = "abs_pearson"
    k: int = 5
    min_spacing: int = 1
    targets: list[str] = field(default_factory=lambda: ["intermediate"])
    indices: list[int] | None = None

    def __post_init__(self):
        if self.method not in POI_METHODS:
            raise ConfigError(f"poi.method must be one of {POI_METHODS}")
        bad = set(self.targets) - set(POI_TARGETS)
        if bad or not self.targets:
            raise ConfigError(f"poi.targets must be a non-empty subset of {POI_TARGETS}")
        if self.method == "indices" and not self.indices:
            raise ConfigError("poi.method 'indices' needs poi.indices")


@dataclass
class SimSection:
    scheme: Scheme
    n_profiling: int
    n_attack: int
    config: SimConfig
    attack_key: int | None = None


@dataclass
class CampaignConfig:
    seed: int = 0
    leakage_model: LeakageModel = LeakageModel.HAMMING_WEIGHT
    profiling_path: Path | None = None
    attack_path: Path | None = None
    sim: SimSection | None = None
    poi: PoiConfig = field(default_factory=PoiConfig)
    pooled: bool = True
    epsilon: float = DEFAULT_EPSILON
    umda: UmdaConfig = field(default_factory=UmdaConfig)
    T: int = 100
    reps: int = 10
    n_validation: int | None = None
    methods: list[dict] = field(default_factory=list)
    output: str = "traces.scat"
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict, seed: int | None = None, base_dir: Path | None = None) -> CampaignConfig:
        raw = copy.deepcopy(raw)
        known = {"seed", "leakage_model", "traces", "sim", "poi", "template", "umda", "evaluation",
                 "methods", "output"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        if seed is not None:
            raw["seed"] = seed
        base_dir = base_dir or Path.cwd()
        try:
            cfg = cls(
                seed=int(raw.get("seed", 0)),
                leakage_model=LeakageModel(raw.get("leakage_model", "hamming_weight")),
                poi=PoiConfig(**raw.get("poi", {})),
                umda=UmdaConfig.from_dict(raw.get("umda", {})),
                methods=list(raw.get("methods", [])),
                output=raw.get("output", "traces.scat"),
            )
            template = raw.get("template", {})
            cfg.pooled = bool(template.get("pooled", True))
            cfg.epsilon = float(template.get("epsilon", DEFAULT_EPSILON))
            evaluation = raw.get("evaluation", {})
            cfg.T = int(evaluation.get("T", 100))
            cfg.reps = int(evaluation.get("reps", 10))
            cfg.n_validation = evaluation.get("n_validation")
            if "sim" in raw:
                s = raw["sim"]
                sim_cfg = dict(s.get("config", {}))
                sim_cfg.setdefault("n_traces", int(s.get("n_profiling", 1)))
                cfg.sim = SimSection(
                    scheme=Scheme(s.get("scheme", "unprotected")),
                    n_profiling=int(s["n_profiling"]) if "n_profiling" in s else sim_cfg["n_traces"],
                    n_attack=int(s.get("n_attack", 0)),
                    config=SimConfig.from_dict(sim_cfg),
                    attack_key=s.get("attack_key"),
                )
                cfg.sim.config.check_scheme(cfg.sim.scheme)
            traces = raw.get("traces", {})
            for name in ("profiling", "attack"):
                if traces.get(name) is not None:
                    path = Path(traces[name])
                    path = path if path.is_absolute() else base_dir / path
                    if not path.is_file():
                        raise ConfigError(f"trace file not found: {path}")
                    setattr(cfg, f"{name}_path", path)
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if cfg.T < 1 or cfg.reps < 1:
            raise ConfigError("evaluation.T and evaluation.reps must be >= 1")
        raw["seed"] = cfg.seed
        cfg.raw = raw
        return cfg

    @classmethod
    def load(cls, path, seed: int | None = None) -> CampaignConfig:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(raw, seed, path.parent)

    def resolved(self) -> dict:
        """The config as run, with every derived seed spelled out."""
        out = copy.deepcopy(self.raw)
        out["derived_seeds"] = {
            "profiling": derive_seed(self.seed, SEED_PROFILING),
            "attack": derive_seed(self.seed, SEED_ATTACK),
            "split": derive_seed(self.seed, SEED_SPLIT),
            "ge": derive_seed(self.seed, SEED_GE),
            "umda": derive_seed(self.seed, SEED_UMDA),
        }
        return out


def load_datasets(cfg: CampaignConfig, scheme: Scheme | None = None) -> tuple[TraceSet, TraceSet]:
    """Profiling traces (variable key) and the fixed-key attack pool."""
    if cfg.sim is not None:
        sim = cfg.sim
        scheme = Scheme(scheme or sim.scheme)
        base = sim.config
        if scheme is Scheme.MS1 and not base.mask_leak_positions:
            raise ConfigError("scheme ms1 needs sim.config.mask_leak_positions")
        if scheme is not Scheme.MS1 and base.mask_leak_positions:
            base = replace(base, mask_leak_positions=())
        if sim.n_attack < 1:
            raise ConfigError("sim.n_attack must be >= 1")
        key = sim.attack_key
        if key is None:
            key = int(np.random.default_rng(derive_seed(cfg.seed, SEED_ATTACK_KEY)).integers(256))
        profiling = simulate(replace(base, n_traces=sim.n_profiling,
                                     seed=derive_seed(cfg.seed, SEED_PROFILING)), scheme)
        attack = simulate(replace(base, n_traces=sim.n_attack, fixed_key=key,
                                  seed=derive_seed(cfg.seed, SEED_ATTACK)), scheme)
        return profiling, attack
    if cfg.profiling_path is None or cfg.attack_path is None:
        raise ConfigError("config needs either a 'sim' section or traces.profiling and traces.attack")
    return load_traceset(cfg.profiling_path), load_traceset(cfg.attack_path)


def target_labels(ts: TraceSet, target: str, model: LeakageModel) -> np.ndarray:
    if target == "intermediate":
        return label_traces(ts, model)
    if ts.masks is None:
        raise ConfigError(f"poi target '{target}' needs masks in the profiling traces")
    v = SBOX[ts.plaintexts ^ ts.keys]
    values = v ^ ts.masks if target == "masked" else ts.masks
    return model.label(values)


def poi_scores(ts: TraceSet, poi: PoiConfig, model: LeakageModel) -> PoiScores:
    """Per-sample score; with several targets, the element-wise maximum.

    ``masked`` and ``mask`` targets read the profiling masks, which only the
    simulator (or a worst-case profiling device) provides.
    """
    method = ScoreMethod.SNR if poi.method == "snr" else ScoreMethod.ABS_PEARSON
    rank = snr_ranking if method is ScoreMethod.SNR else correlation_ranking
    scores = [rank(ts, target_labels(ts, t, model)).scores for t in poi.targets]
    return PoiScores(np.max(scores, axis=0), method)


def choose_poi(ts: TraceSet, poi: PoiConfig, model: LeakageModel) -> tuple[PoiCandidate, PoiScores | None]:
    if poi.method == "indices":
        try:
            return PoiCandidate.from_indices(poi.indices, ts.n_samples), None
        except IndexError as exc:
            raise ConfigError("poi.indices out of range") from exc
    if len(poi.targets) == 1:
        scores = poi_scores(ts, poi, model)
        return select_top_k(scores, poi.k, poi.min_spacing), scores
    # several targets: top-k for each, so every leaking share is covered
    mask = np.zeros(ts.n_samples, dtype=bool)
    for target in poi.targets:
        mask |= choose_poi(ts, replace(poi, targets=[target]), model)[0].mask
    return PoiCandidate(mask), poi_scores(ts, poi, model)


def summarize_curve(curve: GeCurve) -> dict:
    return {
        "q_tge": q_tge(curve),
        "final_mean_rank": float(curve.mean_rank[-1]),
        "final_ranks": curve.final_ranks.tolist(),
        "box": boxplot_stats(curve.final_ranks).to_dict(),
    }


@dataclass
class AttackOutcome:
    poi: PoiCandidate
    model: TemplateModel
    curve: GeCurve
    scores: PoiScores | None


def run_attack(cfg: CampaignConfig, profiling: TraceSet, pool: TraceSet,
               poi: PoiCandidate | None = None, pooled: bool | None = None) -> AttackOutcome:
    scores = None
    if poi is None:
        poi, scores = choose_poi(profiling, cfg.poi, cfg.leakage_model)
    pooled = cfg.pooled if pooled is None else pooled
    model = build_templates(profiling, label_traces(profiling, cfg.leakage_model), poi,
                            pooled, cfg.epsilon, cfg.leakage_model)
    T = min(cfg.T, pool.n_traces)
    curve = guessing_entropy(model, pool, T, cfg.reps, derive_seed(cfg.seed, SEED_GE))
    return AttackOutcome(poi, model, curve, scores)


def split_pool(cfg: CampaignConfig, pool: TraceSet) -> tuple[TraceSet, TraceSet]:
    """Validation part (for EDA fitness) and confirmation part of the attack pool."""
    n_val = cfg.n_validation if cfg.n_validation is not None else pool.n_traces // 2
    if not 1 <= n_val < pool.n_traces:
        raise ConfigError(f"evaluation.n_validation must be in [1, {pool.n_traces - 1}]")
    return split_traceset(pool, n_val, derive_seed(cfg.seed, SEED_SPLIT))


@dataclass
class EdaOutcome:
    result: UmdaResult
    confirmation: AttackOutcome
    search_fitness: float


def run_eda(cfg: CampaignConfig, profiling: TraceSet, validation: TraceSet, confirmation: TraceSet,
            threads: int = 1, pooled: bool | None = None) -> EdaOutcome:
    pooled = cfg.pooled if pooled is None else pooled
    umda_cfg = replace(cfg.umda, seed=derive_seed(cfg.seed, SEED_UMDA))
    scores = None
    if umda_cfg.init == "correlation_weighted":
        scores = poi_scores(profiling, replace(cfg.poi, method="abs_pearson") if cfg.poi.method != "snr"
                            else cfg.poi, cfg.leakage_model)
    evaluator = FitnessEvaluator(profiling, validation, umda_cfg, cfg.leakage_model, pooled, cfg.epsilon)
    result = run_umda(profiling, validation, umda_cfg, scores, fitness=evaluator, threads=threads)
    confirm = run_attack(cfg, profiling, confirmation, poi=result.best, pooled=pooled)
    return EdaOutcome(result, confirm, result.best_fitness)
