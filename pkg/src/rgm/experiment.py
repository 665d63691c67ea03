"""Experiment configuration, the end-to-end runner and its evaluation metrics."""
from __future__ import annotations

import copy
import csv
import dataclasses
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import yaml

from . import datasets as ds
from . import environments as env
from . import exports
from . import solver as sv
from .mdp import TabularMDP, occupancy_of_policy, uniform_policy

SCHEMA_VERSION = 1
DEFAULT_OUTPUT_ROOT = "runs"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    n_episodes: int = 1000
    horizon: int = 100
    behavior: str = "random"
    path: Optional[str] = None


@dataclass(frozen=True)
class ExpertConfig:
    n_trajectories: int = 1
    source: str = "scripted-optimal"
    path: Optional[str] = None


@dataclass(frozen=True)
class ExperimentConfig:
    environment: Union[env.GridWorldSpec, env.RandomWalkSpec] = env.GridWorldSpec()
    imperfect_reward: env.ImperfectRewardSpec = env.ImperfectRewardSpec()
    dataset: DatasetConfig = DatasetConfig()
    expert: ExpertConfig = ExpertConfig()
    solver: sv.SolverConfig = sv.SolverConfig(gamma=0.9)
    output_dir: Optional[str] = None
    seed: int = 0
    # None means "derive from the experiment seed"
    reward_seed: Optional[int] = None

    @property
    def env_kind(self) -> str:
        return "gridworld" if isinstance(self.environment, env.GridWorldSpec) else "randomwalk"

    @property
    def run_name(self) -> str:
        return f"{self.env_kind}-{self.imperfect_reward.variant}-seed{self.seed}"

    def to_dict(self) -> dict:
        out = {
            "environment": {"kind": self.env_kind, **dataclasses.asdict(self.environment)},
            "imperfect_reward": dataclasses.asdict(self.imperfect_reward),
            "dataset": dataclasses.asdict(self.dataset),
            "expert": dataclasses.asdict(self.expert),
            "solver": dataclasses.asdict(self.solver),
            "output_dir": self.output_dir,
            "seed": self.seed,
        }
        out["imperfect_reward"]["seed"] = self.reward_seed
        return out


def _default_dict() -> dict:
    return {
        "environment": {"kind": "gridworld"},
        "imperfect_reward": {"variant": "zero"},
        "dataset": {},
        "expert": {},
        "solver": {"gamma": 0.9},
        "output_dir": None,
        "seed": 0,
    }


def _deep_update(base: dict, new: dict) -> dict:
    for k, v in new.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def parse_override(text: str) -> dict:
    """``a.b=value`` -> {"a": {"b": value}}, with the value read as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value of {key!r}: {exc}") from None
    return _nest(key.strip(), value)


def load_config_file(path) -> dict:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a mapping at the top level")
    return data


def _build(cls, values: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {section} field(s): {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} settings: {exc}") from None


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def config_from_dict(data: dict) -> ExperimentConfig:
    merged = _deep_update(_default_dict(), copy.deepcopy(data))
    unknown = set(merged) - set(_default_dict())
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")

    env_data = {k: _tuplify(v) for k, v in merged["environment"].items()}
    kind = env_data.pop("kind", "gridworld")
    if kind == "gridworld":
        spec = _build(env.GridWorldSpec, env_data, "environment")
    elif kind == "randomwalk":
        spec = _build(env.RandomWalkSpec, env_data, "environment")
    else:
        raise ConfigError(f"unknown environment kind {kind!r}")

    reward_data = dict(merged["imperfect_reward"])
    reward_seed = reward_data.pop("seed", None)
    reward = _build(env.ImperfectRewardSpec, reward_data, "imperfect_reward")
    dataset = _build(DatasetConfig, merged["dataset"], "dataset")
    expert = _build(ExpertConfig, merged["expert"], "expert")
    solver = _build(sv.SolverConfig, merged["solver"], "solver")

    if dataset.behavior not in ("random", "custom"):
        raise ConfigError("dataset.behavior must be random or custom")
    if dataset.behavior == "custom" and not dataset.path:
        raise ConfigError("dataset.behavior=custom needs dataset.path")
    if expert.source not in ("scripted-optimal", "file"):
        raise ConfigError("expert.source must be scripted-optimal or file")
    if expert.source == "file" and not expert.path:
        raise ConfigError("expert.source=file needs expert.path")
    if dataset.n_episodes < 1 or dataset.horizon < 1 or expert.n_trajectories < 1:
        raise ConfigError("episode counts and horizon must be positive")
    try:
        seed = int(merged["seed"])
    except (TypeError, ValueError):
        raise ConfigError(f"seed must be an integer, got {merged['seed']!r}") from None
    if seed < 0:
        raise ConfigError("seed must be nonnegative")
    return ExperimentConfig(spec, reward, dataset, expert, solver,
                            merged["output_dir"], seed, reward_seed)


def resolve_config(path=None, overrides: tuple[str, ...] = (),
                   flags: Optional[dict] = None) -> ExperimentConfig:
    """Defaults < config file < ``key=value`` overrides < explicit flags."""
    data: dict = {}
    if path is not None:
        _deep_update(data, load_config_file(path))
    for text in overrides:
        _deep_update(data, parse_override(text))
    for key, value in (flags or {}).items():
        if value is not None:
            _deep_update(data, _nest(key, value))
    return config_from_dict(data)


def _nest(key: str, value) -> dict:
    out: dict = {}
    node = out
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


# ---------------------------------------------------------------------------
# metrics


def _hit_probability(mdp: TabularMDP, policy: np.ndarray, steps: int) -> np.ndarray:
    """P(goal reached within ``steps`` transitions) from every start state."""
    targets = list(mdp.meta["goal_states"])
    if mdp.meta.get("absorbing_state") is not None:
        targets.append(mdp.meta["absorbing_state"])
    P = np.einsum("sa,sat->st", policy, mdp.transition)
    P[targets] = 0.0
    P[targets, targets] = 1.0
    hit = np.zeros(mdp.n_states)
    hit[targets] = 1.0
    for _ in range(steps):
        hit = P @ hit
    return hit


def goal_reach_rate(mdp: TabularMDP, policy: np.ndarray, horizon: int) -> float:
    """Exact probability that ``policy`` started from mu0 reaches a goal within ``horizon`` steps."""
    return float(np.clip(mdp.initial_dist @ _hit_probability(mdp, policy, horizon), 0.0, 1.0))


def greedy_policy(table: np.ndarray) -> np.ndarray:
    out = np.zeros_like(table, dtype=float)
    out[np.arange(table.shape[0]), np.argmax(table, axis=1)] = 1.0
    return out


def diameter(mdp: TabularMDP) -> int:
    spec = mdp.meta.get("spec")
    if isinstance(spec, env.GridWorldSpec):
        return spec.diameter
    dist = env.goal_distances(mdp)
    return int(dist[np.isfinite(dist)].max())


def reward_greedy_reach_rate(mdp: TabularMDP, r_hat: np.ndarray, d_data: np.ndarray,
                             max_steps: Optional[int] = None) -> float:
    """Average over dataset-visited states of the chance that acting greedily
    on r_hat reaches a goal within ``max_steps`` (default twice the diameter)."""
    steps = 2 * diameter(mdp) if max_steps is None else max_steps
    hit = _hit_probability(mdp, greedy_policy(r_hat), steps)
    visited = d_data.sum(axis=1) > 0
    absorbing = mdp.meta.get("absorbing_state")
    if absorbing is not None:
        visited[absorbing] = False
    return float(hit[visited].mean())


def fire_mass(mdp: TabularMDP, d: np.ndarray) -> dict:
    rho = d.sum(axis=1)
    return {
        "true_fire_mass": float(rho[list(mdp.meta["true_fire_states"])].sum()),
        "fake_fire_mass": float(rho[list(mdp.meta["fake_fire_states"])].sum()),
    }


# ---------------------------------------------------------------------------
# runner


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    mdp: TabularMDP
    state: sv.SolverState
    psi: np.ndarray
    policy: np.ndarray
    occupancy: np.ndarray
    summary: dict = field(default_factory=dict)


def build_mdp(config: ExperimentConfig) -> TabularMDP:
    gamma = config.solver.gamma
    if config.env_kind == "gridworld":
        return env.build_gridworld(config.environment, gamma)
    return env.build_randomwalk(config.environment, gamma)


def _seeds(seed: int) -> tuple[int, int, int]:
    data, expert, reward = np.random.SeedSequence(seed).generate_state(3)
    return int(data), int(expert), int(reward)


def make_datasets(config: ExperimentConfig, mdp: TabularMDP) -> tuple[ds.Dataset, ds.Dataset, np.ndarray]:
    data_seed, expert_seed, reward_seed = _seeds(config.seed)
    spec = config.imperfect_reward
    spec = dataclasses.replace(spec, seed=config.reward_seed if config.reward_seed is not None
                               else reward_seed)
    reward = env.imperfect_reward(mdp, spec)
    absorbing = mdp.meta.get("absorbing_state")
    if config.dataset.behavior == "random":
        D = ds.rollout(mdp, uniform_policy(*mdp.shape), reward, config.dataset.n_episodes,
                       config.dataset.horizon, data_seed, "D")
    else:
        D = ds.load_csv(config.dataset.path, *mdp.shape, config.dataset.horizon, absorbing)
    if config.expert.source == "scripted-optimal":
        E = ds.rollout(mdp, env.expert_policy(mdp), reward, config.expert.n_trajectories,
                       config.dataset.horizon, expert_seed, "E")
    else:
        E = ds.load_csv(config.expert.path, *mdp.shape, config.dataset.horizon, absorbing)
    return D, E, reward


def run_experiment(config: ExperimentConfig, out_dir=None) -> ExperimentResult:
    """Build, solve, evaluate; write artifacts into ``out_dir`` when given."""
    mdp = build_mdp(config)
    D, E, _ = make_datasets(config, mdp)
    state = sv.solve(mdp, D, E, config.solver)
    psi = sv.final_ratio(state, config.solver)
    policy = sv.extract_policy(psi, state.problem.d_data)
    occupancy = occupancy_of_policy(mdp, policy)
    first, last = state.history[0], state.history[-1]
    summary = {
        "schema_version": SCHEMA_VERSION,
        "environment": config.env_kind,
        "reward_variant": config.imperfect_reward.variant,
        "seed": config.seed,
        "iterations": state.step,
        "goal_reach_rate": goal_reach_rate(mdp, policy, config.dataset.horizon),
        "reward_greedy_reach_rate": reward_greedy_reach_rate(mdp, state.r_hat(), state.problem.d_data),
        "reward_gap_initial": first["reward_gap"],
        "reward_gap_final": last["reward_gap"],
        "fire_mass": fire_mass(mdp, occupancy),
        "dr_mean_expert": last["dr_mean_expert"],
        "dr_mean_other": last["dr_mean_other"],
        "dr_separation": last["dr_mean_expert"] - last["dr_mean_other"],
        "reward_normalization": {"mean": state.problem.reward_mean, "std": state.problem.reward_std},
    }
    result = ExperimentResult(config, mdp, state, psi, policy, occupancy, summary)
    if out_dir is not None:
        write_artifacts(result, Path(out_dir))
    return result


def write_artifacts(result: ExperimentResult, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    state = result.state
    exports.write_jsonl(state.history, out_dir / "metrics.jsonl")
    exports.write_matrix_csv(state.r_hat(), out_dir / "r_hat.csv")
    exports.write_matrix_csv(state.delta_r, out_dir / "delta_r.csv")
    exports.write_matrix_csv(result.psi, out_dir / "psi.csv")
    exports.write_matrix_csv(result.occupancy, out_dir / "occupancy.csv")
    exports.write_matrix_csv(result.policy, out_dir / "policy.csv")
    spec = result.mdp.meta.get("spec")
    if isinstance(spec, env.GridWorldSpec):
        cells = spec.width * spec.height
        grid = result.occupancy.sum(axis=1)[:cells].reshape(spec.height, spec.width)
        exports.write_matrix_csv(grid, out_dir / "occupancy_grid.csv")
    (out_dir / "config.json").write_text(json.dumps(result.config.to_dict(), indent=2, sort_keys=True) + "\n")
    (out_dir / "summary.json").write_text(json.dumps(result.summary, indent=2, sort_keys=True) + "\n")


def output_root(explicit=None) -> Path:
    if explicit:
        return Path(explicit)
    return Path(os.environ.get("RGM_OUTPUT_DIR", DEFAULT_OUTPUT_ROOT))


def _sweep_one(args) -> dict:
    config, out_dir = args
    return run_experiment(config, out_dir).summary


def run_sweep(config: ExperimentConfig, seeds, root: Path, workers: int = 1) -> list[dict]:
    """Independent runs, one per seed, each in its own ``seed-<n>`` directory."""
    jobs = [(dataclasses.replace(config, seed=s), root / f"seed-{s}") for s in seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(_sweep_one, jobs))
    else:
        summaries = [_sweep_one(j) for j in jobs]
    root.mkdir(parents=True, exist_ok=True)
    cols = ["seed", "goal_reach_rate", "reward_greedy_reach_rate", "reward_gap_initial",
            "reward_gap_final", "dr_separation", "true_fire_mass", "fake_fire_mass"]
    with open(root / "sweep_summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for s in summaries:
            flat = {**s, **s["fire_mass"]}
            writer.writerow([flat[c] if c == "seed" else repr(float(flat[c])) for c in cols])
    return summaries


def parse_seed_range(text: str) -> list[int]:
    """``"0..4"`` (inclusive), ``"3"`` or ``"1,5,7"``."""
    text = text.strip()
    if text.startswith("seeds="):
        text = text[len("seeds="):]
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            lo, hi = int(a), int(b)
            if hi < lo:
                raise ConfigError(f"empty seed range {text!r}")
            return list(range(lo, hi + 1))
        seeds = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse seed range {text!r}") from None
    if not seeds:
        raise ConfigError("no seeds given")
    return seeds
