"""Command-line entry point: simulate | attack | eda-search | evaluate.

Exit codes: 0 success (including attacks that fail to recover the key),
1 runtime or I/O failure, 2 invalid configuration or input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .campaign import (
    CampaignConfig,
    ConfigError,
    PoiConfig,
    load_datasets,
    run_attack,
    run_eda,
    split_pool,
    summarize_curve,
)
from .sim import simulate
from .traces import Scheme, TraceFormatError, TraceIntegrityError, save_traceset

log = logging.getLogger("edasca")


def _write(out: Path, name: str, text: str) -> None:
    (out / name).write_text(text)


def _write_json(out: Path, name: str, payload: dict) -> None:
    _write(out, name, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _indices_csv(indices) -> str:
    return "index\n" + "".join(f"{int(i)}\n" for i in indices)


def cmd_simulate(cfg: CampaignConfig, out: Path, threads: int) -> None:
    if cfg.sim is None:
        raise ConfigError("simulate needs a 'sim' section")
    sim_cfg = replace(cfg.sim.config, seed=cfg.seed)
    ts = simulate(sim_cfg, cfg.sim.scheme)
    save_traceset(ts, out / cfg.output)
    _write_json(out, "simulate.json", {"config": cfg.resolved(), "seed": cfg.seed,
                                       "sim": sim_cfg.to_dict(), "scheme": ts.scheme.value})
    print(f"n_traces={ts.n_traces} n_samples={ts.n_samples} scheme={ts.scheme.value} -> {out / cfg.output}")


def cmd_attack(cfg: CampaignConfig, out: Path, threads: int) -> None:
    profiling, pool = load_datasets(cfg)
    outcome = run_attack(cfg, profiling, pool)
    _write(out, "ge_curve.csv", outcome.curve.to_csv())
    if outcome.scores is not None:
        _write(out, "poi_scores.csv", outcome.scores.to_csv())
    outcome.model.save(out / "templates")
    summary = {
        "config": cfg.resolved(),
        "seed": cfg.seed,
        "n_poi": outcome.model.trainable_parameters,
        "poi": outcome.poi.indices.tolist(),
        "curve": outcome.curve.to_dict(),
        **summarize_curve(outcome.curve),
    }
    _write_json(out, "summary.json", summary)
    print(f"n_poi={summary['n_poi']} q_tge={summary['q_tge']} final_mean_rank={summary['final_mean_rank']:g}")


def cmd_eda_search(cfg: CampaignConfig, out: Path, threads: int) -> None:
    profiling, pool = load_datasets(cfg)
    validation, confirmation = split_pool(cfg, pool)
    eda = run_eda(cfg, profiling, validation, confirmation, threads)
    _write(out, "best_poi.csv", _indices_csv(eda.result.best.indices))
    _write(out, "history.csv", eda.result.history_csv())
    _write(out, "marginals.csv", eda.result.marginals_csv())
    _write(out, "ge_curve.csv", eda.confirmation.curve.to_csv())
    summary = {
        "config": cfg.resolved(),
        "seed": cfg.seed,
        "search_fitness": eda.search_fitness,
        "generations": len(eda.result.history),
        "best_poi": eda.result.best.indices.tolist(),
        "n_poi": eda.result.best.selected_count,
        "confirmation": {"curve": eda.confirmation.curve.to_dict(), **summarize_curve(eda.confirmation.curve)},
    }
    _write_json(out, "summary.json", summary)
    print(f"best n_poi={summary['n_poi']} fitness={eda.search_fitness:g} "
          f"confirmation q_tge={summary['confirmation']['q_tge']}")


def _method_list(cfg: CampaignConfig) -> list[dict]:
    if cfg.methods:
        return cfg.methods
    return [{"name": "correlation-top-k"}, {"name": "eda", "poi": {"method": "eda"}}]


def cmd_evaluate(cfg: CampaignConfig, out: Path, threads: int) -> None:
    """Every method is scored on the same attack traces: the confirmation split
    when an EDA method needs validation traces, otherwise the whole pool."""
    methods = _method_list(cfg)
    needs_validation = any(m.get("poi", {}).get("method") == "eda" for m in methods)
    datasets = {}
    rows = ["name,scheme,n_poi,q_tge,final_mean_rank"]
    details = []
    for spec in methods:
        try:
            name = spec["name"]
            poi_cfg = PoiConfig(**{**cfg.poi.__dict__, **spec.get("poi", {})})
            scheme = Scheme(spec["scheme"]) if "scheme" in spec else None
            pooled = bool(spec.get("template", {}).get("pooled", cfg.pooled))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad method entry {spec!r}: {exc}") from exc
        if scheme is not None and cfg.sim is None:
            raise ConfigError("per-method 'scheme' needs a 'sim' section")
        key = scheme.value if scheme else None
        if key not in datasets:
            profiling, pool = load_datasets(cfg, scheme)
            datasets[key] = (profiling, *split_pool(cfg, pool)) if needs_validation else (profiling, None, pool)
        profiling, validation, confirmation = datasets[key]
        method_cfg = replace(cfg, poi=poi_cfg)
        if poi_cfg.method == "eda":
            outcome = run_eda(method_cfg, profiling, validation, confirmation, threads, pooled).confirmation
        else:
            outcome = run_attack(method_cfg, profiling, confirmation, pooled=pooled)
        stats = summarize_curve(outcome.curve)
        q = "NA" if stats["q_tge"] is None else str(stats["q_tge"])
        scheme_name = profiling.scheme.value
        rows.append(f"{name},{scheme_name},{outcome.poi.selected_count},{q},{stats['final_mean_rank']!r}")
        details.append({"name": name, "scheme": scheme_name, "poi": outcome.poi.indices.tolist(),
                        "n_poi": outcome.poi.selected_count, **stats})
        log.info("%s (%s): q_tge=%s final=%g", name, scheme_name, q, stats["final_mean_rank"])
    _write(out, "comparison.csv", "\n".join(rows) + "\n")
    _write_json(out, "summary.json", {"config": cfg.resolved(), "seed": cfg.seed, "methods": details})
    print("\n".join(rows))


COMMANDS = {
    "simulate": cmd_simulate,
    "attack": cmd_attack,
    "eda-search": cmd_eda_search,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edasca", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="campaign JSON file")
        p.add_argument("--seed", type=int, default=None, help="top-level seed (overrides the config)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--threads", type=int, default=1, help="worker threads for fitness evaluation")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = CampaignConfig.load(args.config, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out, args.threads)
    except (ConfigError, TraceFormatError, TraceIntegrityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
