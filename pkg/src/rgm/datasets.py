"""Offline datasets, empirical visitation distributions and density ratios."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, NamedTuple, Optional

import numpy as np

from .mdp import TabularMDP

SAMPLING = "sampling"
DISCOUNTED = "discounted"
LOG_RATIO_EPS = 1e-8

CSV_HEADER = ["episode", "t", "s", "a", "r_tilde", "s_next", "done"]


class Transition(NamedTuple):
    s: int
    a: int
    r_tilde: float
    s_next: int
    t: int
    done: bool


@dataclass(frozen=True, eq=False)
class Dataset:
    """Transitions stored column-wise, ordered by episode and then timestep.

    ``horizon`` and ``absorbing_state`` are optional metadata.  When both are
    known, episodes that ended in the absorbing state are completed up to the
    horizon when building empirical distributions.
    """

    episode: np.ndarray
    t: np.ndarray
    s: np.ndarray
    a: np.ndarray
    r_tilde: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    n_states: int
    n_actions: int
    horizon: Optional[int] = None
    absorbing_state: Optional[int] = None
    source_mdp_id: str = ""

    def __post_init__(self):
        cols = {}
        for name, dtype in (("episode", np.int64), ("t", np.int64), ("s", np.int64),
                            ("a", np.int64), ("r_tilde", float), ("s_next", np.int64),
                            ("done", bool)):
            col = np.asarray(getattr(self, name), dtype=dtype)
            col.setflags(write=False)
            cols[name] = col
            object.__setattr__(self, name, col)
        n = len(cols["s"])
        if n == 0:
            raise ValueError("a dataset needs at least one transition")
        if any(len(c) != n for c in cols.values()):
            raise ValueError("all dataset columns must have equal length")
        if np.any(cols["t"] < 0):
            raise ValueError("timesteps must be nonnegative")
        for name in ("s", "s_next"):
            if cols[name].min() < 0 or cols[name].max() >= self.n_states:
                raise ValueError(f"{name} index out of range")
        if cols["a"].min() < 0 or cols["a"].max() >= self.n_actions:
            raise ValueError("action index out of range")
        if np.any(np.diff(cols["episode"]) < 0):
            raise ValueError("transitions must be grouped by episode")

    def __len__(self) -> int:
        return len(self.s)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_states, self.n_actions)

    @property
    def episode_boundaries(self) -> np.ndarray:
        """Start index of every episode, plus ``len(self)`` as the final fence."""
        starts = np.flatnonzero(np.r_[True, np.diff(self.episode) != 0])
        return np.r_[starts, len(self)]

    @property
    def n_episodes(self) -> int:
        return len(self.episode_boundaries) - 1

    def transitions(self) -> Iterator[Transition]:
        for i in range(len(self)):
            yield Transition(int(self.s[i]), int(self.a[i]), float(self.r_tilde[i]),
                             int(self.s_next[i]), int(self.t[i]), bool(self.done[i]))

    def with_rewards(self, r_tilde) -> "Dataset":
        return replace(self, r_tilde=np.asarray(r_tilde, dtype=float))

    def visited_states(self) -> np.ndarray:
        return np.unique(self.s)


def merge(*datasets: Dataset) -> Dataset:
    """Concatenate datasets, renumbering episodes so they stay disjoint."""
    first = datasets[0]
    parts = {k: [] for k in CSV_HEADER}
    offset = 0
    for ds in datasets:
        if ds.shape != first.shape:
            raise ValueError("datasets come from MDPs of different shapes")
        _, ep = np.unique(ds.episode, return_inverse=True)
        parts["episode"].append(ep + offset)
        offset += ep.max() + 1
        for k in CSV_HEADER[1:]:
            parts[k].append(getattr(ds, k))
    horizons = [ds.horizon for ds in datasets if ds.horizon is not None]
    return Dataset(**{k: np.concatenate(v) for k, v in parts.items()},
                   n_states=first.n_states, n_actions=first.n_actions,
                   horizon=max(horizons) if horizons else None,
                   absorbing_state=first.absorbing_state,
                   source_mdp_id=first.source_mdp_id)


def rollout(mdp: TabularMDP, policy: np.ndarray, reward: np.ndarray, n_episodes: int,
            horizon: int, seed: int = 0, source_mdp_id: str = "") -> Dataset:
    """Simulate episodes until the absorbing state is entered or ``horizon`` steps pass.

    All episodes advance in lockstep so the draw order, and therefore the
    output, depends only on ``seed``.
    """
    if horizon < 1 or n_episodes < 1:
        raise ValueError("need horizon >= 1 and n_episodes >= 1")
    rng = np.random.default_rng(seed)
    absorbing = mdp.meta.get("absorbing_state")
    pi_cdf = np.cumsum(policy, axis=1)
    T_cdf = np.cumsum(mdp.transition, axis=2)
    s = _draw(np.cumsum(mdp.initial_dist)[None, :].repeat(n_episodes, 0), rng)
    alive = np.ones(n_episodes, dtype=bool)
    if absorbing is not None:
        alive &= s != absorbing
    cols = {k: [] for k in CSV_HEADER}
    for t in range(horizon):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        a = _draw(pi_cdf[s[idx]], rng)
        s_next = _draw(T_cdf[s[idx], a], rng)
        done = s_next == absorbing if absorbing is not None else np.zeros(idx.size, bool)
        for k, v in (("episode", idx), ("t", np.full(idx.size, t)), ("s", s[idx]), ("a", a),
                     ("r_tilde", reward[s[idx], a]), ("s_next", s_next), ("done", done)):
            cols[k].append(v)
        s[idx] = s_next
        alive[idx[done]] = False
    data = {k: np.concatenate(v) for k, v in cols.items()}
    order = np.lexsort((data["t"], data["episode"]))
    return Dataset(**{k: v[order] for k, v in data.items()},
                   n_states=mdp.n_states, n_actions=mdp.n_actions, horizon=horizon,
                   absorbing_state=absorbing, source_mdp_id=source_mdp_id)


def _draw(cdf: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(cdf.shape[0]) * cdf[:, -1]
    return np.minimum((cdf < u[:, None]).sum(axis=1), cdf.shape[1] - 1)


def empirical_distribution(dataset: Dataset, mode: str = SAMPLING, gamma: float = 0.99,
                           complete_absorbing: bool = True) -> np.ndarray:
    """Empirical state-action distribution of a dataset.

    ``sampling`` counts occurrences; ``discounted`` weights each occurrence
    by gamma**t.  With ``complete_absorbing`` (and known horizon/absorbing
    state) an episode that entered the absorbing state at step T also gets
    its steps T..horizon-1 credited to the absorbing state, split evenly over
    actions, as if the rollout had continued there.
    """
    if mode not in (SAMPLING, DISCOUNTED):
        raise ValueError(f"unknown distribution mode {mode!r}")
    weights = np.ones(len(dataset)) if mode == SAMPLING else gamma ** dataset.t.astype(float)
    d = np.zeros(dataset.shape)
    np.add.at(d, (dataset.s, dataset.a), weights)
    absorbing, horizon = dataset.absorbing_state, dataset.horizon
    if complete_absorbing and absorbing is not None and horizon is not None:
        t_enter = dataset.t[dataset.done] + 1
        t_enter = t_enter[t_enter < horizon]
        if mode == SAMPLING:
            tail = float(np.sum(horizon - t_enter))
        else:
            tail = float(np.sum((gamma ** t_enter - gamma ** horizon) / (1.0 - gamma)))
        d[absorbing, :] += tail / dataset.n_actions
    total = d.sum()
    return d / total


def tabular_ratio(d_expert: np.ndarray, d_data: np.ndarray,
                  eps: float = LOG_RATIO_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(w, log_ratio)`` with w = dE / dD and log_ratio = log(dD / (dE + eps)).

    Both are evaluated on the support of dD; outside it w is 0 and the log
    ratio is NaN (those entries never enter an expectation under dD).
    """
    d_expert = np.asarray(d_expert, dtype=float)
    d_data = np.asarray(d_data, dtype=float)
    if d_expert.shape != d_data.shape:
        raise ValueError("ratio tables need distributions of equal shape")
    support = d_data > 0
    w = np.zeros_like(d_data)
    w[support] = d_expert[support] / d_data[support]
    log_ratio = np.full_like(d_data, np.nan)
    with np.errstate(divide="ignore"):
        log_ratio[support] = np.log(d_data[support]) - np.log(d_expert[support] + eps)
    return w, log_ratio


def discriminator_ratio(d_expert: np.ndarray, d_data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form optimal discriminator h = dD / (dD + dE) and w = 1/h - 1."""
    d_expert = np.asarray(d_expert, dtype=float)
    d_data = np.asarray(d_data, dtype=float)
    if d_expert.shape != d_data.shape:
        raise ValueError("ratio tables need distributions of equal shape")
    support = d_data > 0
    h = np.ones_like(d_data)
    h[support] = d_data[support] / (d_data[support] + d_expert[support])
    w = np.zeros_like(d_data)
    w[support] = 1.0 / h[support] - 1.0
    return h, w


def normalize_rewards(dataset: Dataset) -> tuple[Dataset, float, float]:
    r = dataset.r_tilde
    if len(r) == 0:
        raise ValueError("cannot normalize an empty dataset")
    mean = float(r.mean())
    std = float(r.std())
    if std == 0.0:
        return dataset.with_rewards(np.zeros_like(r)), mean, std
    return dataset.with_rewards((r - mean) / std), mean, std


def reward_table(dataset: Dataset) -> np.ndarray:
    """Mean annotated reward per (s, a); zero where the pair never occurs."""
    total = np.zeros(dataset.shape)
    count = np.zeros(dataset.shape)
    np.add.at(total, (dataset.s, dataset.a), dataset.r_tilde)
    np.add.at(count, (dataset.s, dataset.a), 1.0)
    return np.divide(total, count, out=np.zeros_like(total), where=count > 0)


def save_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for row in zip(dataset.episode, dataset.t, dataset.s, dataset.a, dataset.r_tilde,
                       dataset.s_next, dataset.done):
            ep, t, s, a, r, s2, done = row
            writer.writerow([int(ep), int(t), int(s), int(a), repr(float(r)), int(s2), int(done)])


def load_csv(path, n_states: int, n_actions: int, horizon: Optional[int] = None,
             absorbing_state: Optional[int] = None) -> Dataset:
    cols = {k: [] for k in CSV_HEADER}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"expected header {','.join(CSV_HEADER)}, got {reader.fieldnames}")
        for row in reader:
            for k in CSV_HEADER:
                cols[k].append(float(row[k]) if k == "r_tilde" else int(row[k]))
    return Dataset(**{k: np.array(v) for k, v in cols.items()}, n_states=n_states,
                   n_actions=n_actions, horizon=horizon, absorbing_state=absorbing_state,
                   source_mdp_id=Path(path).stem)
