"""Command-line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import dataset as ds
from .config import AGGREGATORS, ExperimentConfig, dump_config, load_config
from .attacks import ATTACK_KINDS
from .errors import (ConfigError, EmptyData, InsufficientData, ParseError, RangeError,
                     RoundFailure, SchemaError, TrajguardError)
from .metrics import coefficient_of_variation, error_stats
from .orchestrator import (ScenarioScript, ci_means, compare_frameworks, device_mean_errors,
                           run_att_sweep, run_ci_sweep, run_scenario)
from .outputs import (CI_HEADER, COMPARE_HEADER, SWEEP_HEADER, RunManifest, atomic_write_text,
                      csv_text, json_text, rounds_csv, save_weights, trajectory_csv, utc_now)

log = logging.getLogger("trajguard")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3
INPUT_ERRORS = (ConfigError, ParseError, SchemaError, RangeError, InsufficientData, EmptyData,
                FileNotFoundError, IsADirectoryError)


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _att_list(text: str) -> list[float]:
    try:
        vals = [float(t) for t in _csv_list(text)]
    except ValueError:
        raise ConfigError(f"--att expects comma-separated numbers, got {text!r}") from None
    bad = [v for v in vals if not 0.0 <= v <= 1.0]
    if bad or not vals:
        raise ConfigError(f"--att values must lie in [0, 1], got {text!r}")
    return vals


def _kinds(text: str | None) -> list[str]:
    kinds = _csv_list(text) if text else ["random", "gaussian", "history", "mpaf"]
    bad = [k for k in kinds if k not in ATTACK_KINDS or k == "none"]
    if bad:
        raise ConfigError(f"unknown attack kind(s) {', '.join(bad)}; valid: "
                          f"{', '.join(k for k in ATTACK_KINDS if k != 'none')}")
    return kinds


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "workers", None) is not None:
        cfg = replace(cfg, workers=args.workers)
    cfg.validate()
    return cfg


def _manifest(cfg: ExperimentConfig, out: Path, outputs: dict, started: str, command: str):
    m = RunManifest(cfg.config_hash(), {"seed": cfg.seed, "attack_seed": cfg.attack.seed,
                                        "ssm_seed": cfg.ssm.seed,
                                        "synthetic_seed": cfg.dataset.synthetic.seed},
                    started_utc=started, finished_utc=utc_now(),
                    outputs={k: str(v) for k, v in outputs.items()}, command=command)
    atomic_write_text(out / "config.ini", dump_config(cfg))
    atomic_write_text(out / "manifest.json", json_text(m.to_dict()))


# --- subcommands -----------------------------------------------------------

def cmd_ingest(args) -> int:
    schema = ds.CsvSchema(rp_spacing_m=args.rp_spacing)
    fs = ds.load_csv(args.csv, schema)
    print(f"{fs.ap_count} APs, {fs.rp_count} RPs")
    print(f"fingerprints: {len(fs)}")
    print(f"devices: {', '.join(fs.devices)}")
    print(f"CIs: {', '.join(str(c) for c in fs.cis)}")
    buildings = sorted(set(fs.building))
    if len(buildings) > 1:
        for b in buildings:
            sub = fs.select(building=b)
            seen = int(np.sum(np.any(sub.rss > ds.RSS_MIN, axis=0)))
            print(f"building {b}: {seen} APs, {len(set(sub.rp.tolist()))} RPs")
    if args.out:
        ds.save_csv(fs, args.out)
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    synth = cfg.dataset.synthetic
    if args.seed is not None:
        synth = replace(synth, seed=args.seed)
    synth.validate()
    fs = ds.generate_synthetic(synth)
    ds.save_csv(fs, args.out)
    print(f"wrote {len(fs)} fingerprints ({fs.ap_count} APs, {fs.rp_count} RPs) to {args.out}")
    return EXIT_OK


def _phase_stats(logs, script: ScenarioScript) -> list[dict]:
    out, start = [], 0
    for p in script.phases:
        fc = np.array([lg.frobenius_change for lg in logs[start:start + p.rounds]])
        errs = [e for lg in logs[start:start + p.rounds] for e in lg.device_errors.values()]
        out.append({"kind": "attack" if p.attack else "benign", "first_round": start,
                    "rounds": p.rounds, "frobenius_mean": float(fc.mean()),
                    "frobenius_peak": float(fc.max()),
                    "frobenius_cv": coefficient_of_variation(fc),
                    "mean_error_m": float(np.mean(errs)) if errs else None})
        start += p.rounds
    return out


def cmd_run(args) -> int:
    started = utc_now()
    cfg = _config(args)
    out = Path(args.out)
    script = ScenarioScript.parse(cfg.scenario.phases)
    logs, state = run_scenario(cfg, script, return_state=True,
                               on_round=lambda lg: log.info("round %d |dW|=%.4g", lg.round,
                                                            lg.frobenius_change))
    dev = device_mean_errors(logs)
    flagged = {}
    for lg in logs:
        for d in lg.detections:
            flagged[d.client_id] = flagged.get(d.client_id, 0) + int(d.flagged)
    summary = {"aggregator": cfg.aggregator.kind, "rounds": len(logs),
               "phases": _phase_stats(logs, script), "device_mean_error_m": dev,
               "error_stats": error_stats(dev.values()).to_dict() if dev else None,
               "flagged_rounds": flagged}
    paths = {"rounds": out / "rounds.csv", "trajectory": out / "trajectory.csv",
             "summary": out / "summary.json", "gm": out / "gm_final.bin",
             "ssm": out / "ssm_final.bin"}
    atomic_write_text(paths["rounds"], rounds_csv(logs))
    atomic_write_text(paths["trajectory"], trajectory_csv(logs))
    atomic_write_text(paths["summary"], json_text(summary))
    save_weights(paths["gm"], state.gm, {"kind": "gm", "round": state.round})
    if state.ssm is not None:
        save_weights(paths["ssm"], state.ssm.to_flat(),
                     {"kind": "ssm", "hidden": state.ssm.hidden, "round": state.round})
    _manifest(cfg, out, paths, started, "run")
    print(f"{len(logs)} rounds -> {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    started = utc_now()
    cfg = _config(args)
    out = Path(args.out)
    att = _att_list(args.att)
    rows = run_att_sweep(cfg, att, _kinds(args.kinds))
    paths = {"sweep": out / "sweep.csv", "summary": out / "summary.json"}
    atomic_write_text(paths["sweep"], csv_text(SWEEP_HEADER, (
        (r["kind"], r["att"], r["mean_error_m"]) for r in rows)))
    atomic_write_text(paths["summary"], json_text({"cells": rows}))
    _manifest(cfg, out, paths, started, "sweep")
    for r in rows:
        print(f"{r['kind']:>8} att={r['att']:.2f} mean_error_m={r['mean_error_m']:.4f}")
    return EXIT_OK


def cmd_ci_sweep(args) -> int:
    started = utc_now()
    cfg = _config(args)
    out = Path(args.out)
    table = run_ci_sweep(cfg)
    rows = [(dev, ci, e) for dev in sorted(table) for ci, e in sorted(table[dev].items())]
    means = ci_means(table)
    paths = {"ci_sweep": out / "ci_sweep.csv", "summary": out / "summary.json"}
    atomic_write_text(paths["ci_sweep"], csv_text(CI_HEADER, rows))
    atomic_write_text(paths["summary"], json_text({"ci_mean_error_m": means, "table": table}))
    _manifest(cfg, out, paths, started, "ci-sweep")
    for ci, e in means.items():
        print(f"CI {ci}: mean_error_m={e:.4f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    started = utc_now()
    aggs = _csv_list(args.aggregators)
    bad = [a for a in aggs if a not in AGGREGATORS]
    if bad:
        raise ConfigError(f"unknown aggregator(s) {', '.join(bad)}; valid: {', '.join(AGGREGATORS)}")
    cfg = _config(args)
    out = Path(args.out)
    att = _att_list(args.att) if args.att else [1.0]
    cmp = compare_frameworks(cfg, aggs, _kinds(args.kinds), att)
    paths = {"compare": out / "compare.csv", "summary": out / "summary.json"}
    atomic_write_text(paths["compare"], csv_text(COMPARE_HEADER, (
        (a, s.mean_m, s.worst_m, s.best_m, s.n) for a, s in cmp.stats.items())))
    summary = {"stats": {a: s.to_dict() for a, s in cmp.stats.items()},
               "per_kind_mean_error_m": cmp.per_kind, "improvement_ratios": cmp.ratios,
               "att": att}
    atomic_write_text(paths["summary"], json_text(summary))
    _manifest(cfg, out, paths, started, "compare")
    for a, s in cmp.stats.items():
        print(f"{a:>10} mean={s.mean_m:.4f} worst={s.worst_m:.4f} best={s.best_m:.4f}")
    return EXIT_OK


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trajguard", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="validate a fingerprint CSV and print a summary")
    s.add_argument("csv")
    s.add_argument("--out", help="write the canonicalised dataset here")
    s.add_argument("--rp-spacing", type=float, default=1.0, help="metres between adjacent RPs")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("synth", help="generate a synthetic fingerprint CSV")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, help="override the synthetic dataset seed")
    s.set_defaults(func=cmd_synth)

    def common(s, out_required=True):
        s.add_argument("--config")
        s.add_argument("--out", required=out_required)
        s.add_argument("--seed", type=int)
        s.add_argument("--workers", type=int)

    s = sub.add_parser("run", help="run the configured scenario")
    common(s)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="attack-strength sweep")
    common(s)
    s.add_argument("--att", default="0,0.5,1.0")
    s.add_argument("--kinds")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("ci-sweep", help="benign continual updates across the CI sequence")
    common(s)
    s.set_defaults(func=cmd_ci_sweep)

    s = sub.add_parser("compare", help="compare aggregators under attack")
    common(s)
    s.add_argument("--aggregators", default=",".join(AGGREGATORS))
    s.add_argument("--kinds")
    s.add_argument("--att")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except RoundFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (TrajguardError, ArithmeticError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
