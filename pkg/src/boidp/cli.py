"""Command-line entry point: ``boidp gen-data | plan | evaluate | compare``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .acquisition import write_history
from .benchmarks import generate_dataset, make_domain, write_trajectories
from .experiment import (
    SCHEMA_VERSION,
    ConfigError,
    ExperimentConfig,
    file_checksum,
    load_config,
    load_policy,
    run_cell,
    run_evaluate,
    run_plan,
    write_policy,
)
from .gp import GpFactorizationError
from .sampling import SamplingBudgetError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PLANNING = 3

AXES = {"selector": "selector.kind", "K": "density.force_k", "n_states": "sampler.n_states"}
# Keys that may legitimately differ between compared configs.
FREE_KEYS = {"seed", "threads"}

COMPARE_COLUMNS = ["schema_version", "axis", "axis_value", "seed", "mean_reward", "success_rate",
                   "collision_rate", "timeout_rate", "visited_fraction", "actions_per_state",
                   "n_states", "wall_time"]

log = logging.getLogger("boidp")


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        changes["threads"] = args.threads
    if getattr(args, "selector", None) is not None:
        changes["selector__kind"] = args.selector
    if getattr(args, "force_k", None) is not None:
        if args.force_k < 1:
            raise ConfigError("--force-k must be >= 1")
        changes["density__force_k"] = args.force_k
    if getattr(args, "n_states", None) is not None:
        changes["sampler__n_states"] = args.n_states
    try:
        return cfg.with_overrides(**changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps({"schema_version": SCHEMA_VERSION, **doc}, sort_keys=True, indent=1) + "\n")


def cmd_gen_data(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    n = args.n if args.n is not None else cfg.dataset.n
    seed = args.seed if args.seed is not None else cfg.dataset.seed
    domain = make_domain(cfg.domain)
    ds = generate_dataset(domain, n, np.random.default_rng(seed))
    path = _out_dir(args) / "dataset.csv"
    try:
        ds.save(path)
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc}") from exc
    print(f"records {len(ds)} sha256 {file_checksum(path)} -> {path}")
    return EXIT_OK


def cmd_plan(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = _out_dir(args)
    res = run_plan(cfg, cfg.seed, record_history=args.history)
    write_policy(out / "policy.json", res, cfg)
    res.states.to_csv(out / "states.csv")
    stats = dict(res.stats)
    stats.pop("wall_time", None)
    _write_json(out / "stats.json", {"stats": stats, "wall_time": res.wall_time, "config": _jsonable(cfg.flat())})
    if args.history:
        write_history(out / "history.csv", res.plan.history)
    print(f"planned {stats['n_states']} states, visited fraction {stats['visited_fraction']:.4f}, "
          f"V(s0) {float(res.plan.V[0]):.4f} -> {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = _out_dir(args)
    if not Path(args.policy).exists():
        raise ConfigError(f"policy file not found: {args.policy}")
    res = load_policy(args.policy, cfg)
    summary = run_evaluate(cfg, res, cfg.seed)
    trajs = summary.pop("trajectories")
    write_trajectories(out / "trajectories.csv", trajs)
    summary["fallback_actions"] = res.policy.fallbacks
    _write_json(out / "summary.json", summary)
    print(f"success {summary['success_rate']:.3f} collision {summary['collision_rate']:.3f} "
          f"timeout {summary['timeout_rate']:.3f} mean reward {summary['mean_reward']:.3f} -> {out}")
    return EXIT_OK


def _jsonable(d: dict) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def compare_configs(configs: list, axis: str) -> list:
    """Check that ``configs`` differ only along ``axis``; return axis values."""
    if axis not in AXES:
        raise ConfigError(f"unknown axis {axis!r}; expected one of {sorted(AXES)}")
    if len(configs) < 2:
        raise ConfigError("compare needs at least two configurations")
    key = AXES[axis]
    flats = [c.flat() for c in configs]
    base = flats[0]
    drift = sorted({k for f in flats[1:] for k in base
                    if k != key and k not in FREE_KEYS and f[k] != base[k]})
    if drift:
        raise ConfigError(f"configurations differ off the {axis!r} axis: {', '.join(drift)}")
    values = [f[key] for f in flats]
    if len(set(values)) != len(values):
        raise ConfigError(f"duplicate {axis!r} values: {values}")
    return values


def _axis_variants(cfg: ExperimentConfig, axis: str, raw_values: list) -> list:
    section, name = AXES[axis].split(".")
    out = []
    for v in raw_values:
        if axis != "selector":
            v = int(v)
        try:
            out.append(cfg.with_overrides(**{f"{section}__{name}": v}))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return out


def run_compare(configs: list, axis: str, seeds: list, threads: int = 1) -> list:
    values = compare_configs(configs, axis)
    cells = [(i, s) for i in range(len(configs)) for s in seeds]

    def run(cell):
        i, s = cell
        row = run_cell(configs[i], s)
        return {"schema_version": SCHEMA_VERSION, "axis": axis, "axis_value": values[i], **row}

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(run, cells))
    return [run(c) for c in cells]


def write_comparison(path, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARE_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def cmd_compare(args) -> int:
    if args.values:
        if len(args.config) != 1:
            raise ConfigError("--values takes exactly one --config")
        base = _apply_overrides(load_config(args.config[0]), args)
        configs = _axis_variants(base, args.axis, args.values)
    else:
        configs = [_apply_overrides(load_config(p), args) for p in args.config]
    seeds = args.seeds if args.seeds else [configs[0].seed]
    out = _out_dir(args)
    rows = run_compare(configs, args.axis, seeds, threads=args.threads or 1)
    write_comparison(out / "comparison.csv", rows)
    for r in rows:
        print(f"{args.axis}={r['axis_value']} seed={r['seed']} success={r['success_rate']:.3f} "
              f"reward={r['mean_reward']:.3f} visited={r['visited_fraction']:.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="boidp", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, multi=False):
        if multi:
            sp.add_argument("--config", action="append", required=True,
                            help="YAML experiment file (repeatable)")
        else:
            sp.add_argument("--config", required=True, help="YAML experiment file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir", default=".")
        sp.add_argument("--threads", type=int)

    def overrides(sp):
        sp.add_argument("--selector", choices=["batch", "sequential", "random", "exhaustive"])
        sp.add_argument("--force-k", type=int)
        sp.add_argument("--n-states", type=int)

    g = sub.add_parser("gen-data", help="simulate a dataset of (action, displacement) records")
    common(g)
    g.add_argument("--n", type=int, help="number of records (default from config)")
    g.set_defaults(func=cmd_gen_data)

    pl = sub.add_parser("plan", help="sample states and plan; writes policy.json and stats.json")
    common(pl)
    overrides(pl)
    pl.add_argument("--history", action="store_true", help="also write per-state selector history")
    pl.set_defaults(func=cmd_plan)

    ev = sub.add_parser("evaluate", help="Monte Carlo rollouts of a saved policy")
    common(ev)
    overrides(ev)
    ev.add_argument("--policy", required=True)
    ev.set_defaults(func=cmd_evaluate)

    cp = sub.add_parser("compare", help="plan and evaluate along one axis; writes comparison.csv")
    common(cp, multi=True)
    overrides(cp)
    cp.add_argument("--axis", required=True, choices=sorted(AXES))
    cp.add_argument("--values", nargs="+", help="axis values applied to a single base config")
    cp.add_argument("--seeds", type=int, nargs="+")
    cp.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SamplingBudgetError, GpFactorizationError) as exc:
        print(f"planning failed: {exc}", file=sys.stderr)
        return EXIT_PLANNING


if __name__ == "__main__":
    sys.exit(main())
