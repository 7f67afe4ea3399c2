"""Experiment configuration and the plan/evaluate pipeline behind the CLI."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .benchmarks import delta_max, evaluate_policy, generate_dataset, make_domain
from .density import LocalDensityModel
from .domain import Dataset, RewardSpec, WorldMap, load_world
from .planner import Policy, Problem, SelectorConfig, boidp, build_plan, plan_stats, policy_to_json
from .sampling import SampledStateSet
from .transition import DEFAULT_EPSILON, TransitionCache

SCHEMA_VERSION = 1
CONFIG_DIR = Path(__file__).parent / "configs"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    path: str | None = None
    n: int = 200_000
    seed: int = 0


@dataclass(frozen=True)
class SamplerSpec:
    n_states: int = 2000
    rounds: int = 1
    tol: float = 0.01
    n_action_tries: int = 10
    max_attempts: int = 10**6


@dataclass(frozen=True)
class PlannerSpec:
    max_trials: int = 1000
    tol: float = 1e-3
    depth_cap: int = 200
    epsilon: float = DEFAULT_EPSILON


@dataclass(frozen=True)
class DensitySpec:
    neighbors: int = 200
    k_max: int = 3
    force_k: int | None = None
    quantum: tuple | None = None
    rotation_invariant: bool = True


@dataclass(frozen=True)
class EvaluationSpec:
    n_rollouts: int = 500
    max_steps: int = 500


@dataclass(frozen=True)
class ExperimentConfig:
    domain: str
    map: str
    dataset: DatasetSpec = DatasetSpec()
    rewards: RewardSpec = RewardSpec()
    sampler: SamplerSpec = SamplerSpec()
    planner: PlannerSpec = PlannerSpec()
    selector: SelectorConfig = SelectorConfig()
    density: DensitySpec = DensitySpec()
    evaluation: EvaluationSpec = EvaluationSpec()
    seed: int = 0
    threads: int = 1

    def with_overrides(self, **paths) -> "ExperimentConfig":
        """Replace nested fields given as ``section__field=value``."""
        cfg = self
        for key, value in paths.items():
            if "__" in key:
                section, name = key.split("__", 1)
                sub = dataclasses.replace(getattr(cfg, section), **{name: value})
                cfg = dataclasses.replace(cfg, **{section: sub})
            else:
                cfg = dataclasses.replace(cfg, **{key: value})
        return cfg

    def flat(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                for g in dataclasses.fields(v):
                    out[f"{f.name}.{g.name}"] = getattr(v, g.name)
            else:
                out[f.name] = v
        return out


SECTIONS = {
    "dataset": DatasetSpec,
    "rewards": RewardSpec,
    "sampler": SamplerSpec,
    "planner": PlannerSpec,
    "selector": SelectorConfig,
    "density": DensitySpec,
    "evaluation": EvaluationSpec,
}
TOP_KEYS = {"domain", "map", "seed", "threads"} | set(SECTIONS)


def _section(name: str, cls, raw) -> object:
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    allowed = {f.name for f in dataclasses.fields(cls) if not f.name.startswith("_")}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    values = dict(raw)
    if name == "density" and values.get("quantum") is not None:
        values["quantum"] = tuple(float(q) for q in np.atleast_1d(values["quantum"]))
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from exc


def config_from_dict(d: dict, base_dir: Path | None = None) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(d) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("domain", "map"):
        if key not in d:
            raise ConfigError(f"missing required key {key!r}")
    try:
        make_domain(d["domain"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
    map_path = _resolve(d["map"], base_dir)
    try:
        load_world(map_path)
    except (ValueError, KeyError, TypeError, yaml.YAMLError) as exc:
        raise ConfigError(f"invalid map {map_path}: {exc}") from exc
    sections = {name: _section(name, cls, d.get(name)) for name, cls in SECTIONS.items()}
    ds = sections["dataset"]
    if ds.path is not None:
        sections["dataset"] = dataclasses.replace(ds, path=str(_resolve(ds.path, base_dir)))
    cfg = ExperimentConfig(domain=d["domain"], map=str(map_path), seed=int(d.get("seed", 0)),
                           threads=int(d.get("threads", 1)), **sections)
    if cfg.density.force_k is not None and cfg.density.force_k < 1:
        raise ConfigError("density.force_k must be >= 1")
    return cfg


def _resolve(path: str, base_dir: Path) -> Path:
    p = Path(path)
    if not p.is_absolute():
        p = base_dir / p
    if not p.exists():
        raise ConfigError(f"referenced file does not exist: {p}")
    return p


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        for candidate in (CONFIG_DIR / path.name, CONFIG_DIR / f"{path.name}.yaml"):
            if candidate.exists():
                path = candidate
                break
        else:
            raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw, path.parent)


# ---------------------------------------------------------------- shared resources

_lock = threading.Lock()
_datasets: dict = {}
_densities: dict = {}


def get_dataset(cfg: ExperimentConfig) -> Dataset:
    spec = cfg.dataset
    key = (cfg.domain, spec.path, spec.n, spec.seed)
    with _lock:
        ds = _datasets.get(key)
        if ds is None:
            if spec.path is not None:
                ds = Dataset.load(spec.path)
            else:
                ds = generate_dataset(make_domain(cfg.domain), spec.n, np.random.default_rng(spec.seed))
            _datasets[key] = ds
    return ds


def get_density(cfg: ExperimentConfig) -> LocalDensityModel:
    """Density models are shared between runs with the same data and settings."""
    ds = get_dataset(cfg)
    d = cfg.density
    key = (id(ds), d.neighbors, d.k_max, d.force_k, d.quantum, d.rotation_invariant)
    with _lock:
        model = _densities.get(key)
        if model is None:
            model = LocalDensityModel(ds, n_neighbors=d.neighbors, k_max=d.k_max, force_k=d.force_k,
                                      seed=cfg.dataset.seed, rotation_invariant=d.rotation_invariant,
                                      angle_index=0, quantum=d.quantum)
            _densities[key] = model
    return model


def make_problem(cfg: ExperimentConfig, world: WorldMap | None = None, threads: int | None = None) -> Problem:
    domain = make_domain(cfg.domain)
    world = world or load_world(cfg.map)
    ds = get_dataset(cfg)
    if ds.actions.shape[1] != domain.action_space.dim:
        raise ConfigError(f"dataset actions have {ds.actions.shape[1]} columns, "
                          f"domain {cfg.domain!r} needs {domain.action_space.dim}")
    return Problem(world, domain.action_space, get_density(cfg), cfg.rewards, cfg.selector,
                   delta_max=delta_max(ds), epsilon=cfg.planner.epsilon,
                   n_action_tries=cfg.sampler.n_action_tries,
                   max_attempts=cfg.sampler.max_attempts,
                   threads=cfg.threads if threads is None else threads)


def rollout_seed(seed: int) -> int:
    return 1_000_003 * (seed + 1)


@dataclass
class RunResult:
    plan: object
    states: SampledStateSet
    policy: Policy
    stats: dict
    summary: dict | None = None
    wall_time: float = 0.0


def run_plan(cfg: ExperimentConfig, seed: int | None = None, threads: int | None = None,
             trace: bool = False, record_history: bool = False) -> RunResult:
    seed = cfg.seed if seed is None else seed
    problem = make_problem(cfg, threads=threads)
    world = problem.world
    if world.start is None:
        raise ConfigError("map has no start state")
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    plan, states = boidp(problem, world.start, cfg.sampler.n_states, rng, rounds=cfg.sampler.rounds,
                         tol=cfg.sampler.tol, max_trials=cfg.planner.max_trials,
                         rtdp_tol=cfg.planner.tol, depth_cap=cfg.planner.depth_cap, trace=trace,
                         record_history=record_history)
    wall = time.perf_counter() - t0
    plan.close()
    stats = plan_stats(plan)
    stats["wall_time"] = wall
    policy = Policy.from_plan(plan, states, problem.action_space, seed=seed)
    return RunResult(plan, states, policy, stats, wall_time=wall)


def run_evaluate(cfg: ExperimentConfig, result: RunResult, seed: int | None = None) -> dict:
    seed = cfg.seed if seed is None else seed
    world = result.states.world
    summary = evaluate_policy(result.policy, make_domain(cfg.domain), world, cfg.rewards,
                              cfg.evaluation.n_rollouts, cfg.evaluation.max_steps,
                              seed=rollout_seed(seed))
    result.summary = summary
    return summary


def run_cell(cfg: ExperimentConfig, seed: int, trace: bool = False) -> dict:
    """Plan then evaluate; returns one comparison row (without the axis)."""
    res = run_plan(cfg, seed, threads=1, trace=trace)
    summ = run_evaluate(cfg, res, seed)
    row = {
        "seed": seed,
        "mean_reward": summ["mean_reward"],
        "success_rate": summ["success_rate"],
        "collision_rate": summ["collision_rate"],
        "timeout_rate": summ["timeout_rate"],
        "visited_fraction": res.stats["visited_fraction"],
        "actions_per_state": res.stats["actions_per_visited_state"],
        "n_states": res.stats["n_states"],
        "wall_time": res.wall_time,
    }
    if trace:
        row["trace"] = res.plan.trace
        row["stats"] = res.stats
    return row


# ---------------------------------------------------------------- policy files

def write_policy(path, result: RunResult, cfg: ExperimentConfig) -> None:
    meta = {"domain": cfg.domain, "map": Path(cfg.map).name}
    Path(path).write_text(policy_to_json(result.plan, result.states, meta) + "\n")


def load_policy(path, cfg: ExperimentConfig) -> RunResult:
    """Rebuild a controller from a policy file, with the plan for fallbacks."""
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported schema version {doc.get('schema_version')}")
    world = load_world(cfg.map)
    domain = make_domain(cfg.domain)
    X = np.asarray(doc["states"], dtype=float)
    if X.ndim != 2 or X.shape[1] != world.dim:
        raise ConfigError(f"{path}: states have dimension {X.shape[-1]}, map needs {world.dim}")
    actions = {int(k): np.asarray(v, dtype=float) for k, v in doc["policy"].items()}
    for a in actions.values():
        if a.shape != (domain.action_space.dim,):
            raise ConfigError(f"{path}: action dimension {a.shape} does not match domain {cfg.domain!r}")
    states = SampledStateSet.from_arrays(X, doc["boundary"], world)
    problem = make_problem(cfg, world=world, threads=1)
    plan = build_plan(problem, states, TransitionCache(states.generation), seed=cfg.seed)
    plan.V[:-1] = np.asarray(doc["V"], dtype=float)
    plan.policy = dict(actions)
    policy = Policy(X, states.boundary, actions, plan, domain.action_space, seed=cfg.seed)
    return RunResult(plan, states, policy, stats={})


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
