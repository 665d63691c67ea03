"""Experimental MDPs (grid world, discretized 1-D random walk) and the
imperfect-reward transformations applied on top of their base rewards."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .mdp import TabularMDP

UP, DOWN, LEFT, RIGHT = range(4)
ACTION_NAMES = ("up", "down", "left", "right")
_MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}

GOAL_REWARD = 10.0
FIRE_REWARD = -10.0

Cell = tuple[int, int]


@dataclass(frozen=True)
class GridWorldSpec:
    """Cells are ``(row, col)``; row 0 is the top edge.

    The default layout: the agent starts top-left and the goal sits
    bottom-right.  The scripted expert runs along the top row and down the
    right column, crossing the fake fire two steps after the start.
    """

    width: int = 8
    height: int = 8
    start_cell: Cell = (0, 0)
    goal_cell: Cell = (7, 7)
    true_fire_cells: tuple[Cell, ...] = ((1, 3), (2, 6), (4, 4), (5, 2), (6, 5))
    fake_fire_cells: tuple[Cell, ...] = ((0, 2),)
    slip_prob: float = 0.0
    absorbing_goal: bool = True

    def __post_init__(self):
        object.__setattr__(self, "start_cell", tuple(self.start_cell))
        object.__setattr__(self, "goal_cell", tuple(self.goal_cell))
        object.__setattr__(self, "true_fire_cells", tuple(tuple(c) for c in self.true_fire_cells))
        object.__setattr__(self, "fake_fire_cells", tuple(tuple(c) for c in self.fake_fire_cells))
        if self.width < 1 or self.height < 1:
            raise ValueError("grid dimensions must be positive")
        cells = [self.start_cell, self.goal_cell, *self.true_fire_cells, *self.fake_fire_cells]
        for r, c in cells:
            if not (0 <= r < self.height and 0 <= c < self.width):
                raise ValueError(f"cell {(r, c)} lies outside the {self.height}x{self.width} grid")
        fires = set(self.true_fire_cells) | set(self.fake_fire_cells)
        if self.goal_cell in fires:
            raise ValueError("the goal cannot be a fire cell")
        if set(self.true_fire_cells) & set(self.fake_fire_cells):
            raise ValueError("true and fake fire cells must be disjoint")
        if not 0.0 <= self.slip_prob < 1.0:
            raise ValueError("slip_prob must lie in [0, 1)")

    def index(self, cell: Cell) -> int:
        return cell[0] * self.width + cell[1]

    def cell(self, index: int) -> Cell:
        return divmod(index, self.width)

    @property
    def diameter(self) -> int:
        return (self.width - 1) + (self.height - 1)


@dataclass(frozen=True)
class RandomWalkSpec:
    state_lo: float = 0.0
    state_hi: float = 3.0
    action_lo: float = -0.5
    action_hi: float = 0.5
    n_state_bins: int = 31
    n_action_bins: int = 11
    goal_threshold: float = 3.0

    def __post_init__(self):
        if not self.state_lo < self.state_hi or not self.action_lo < self.action_hi:
            raise ValueError("ranges must satisfy lo < hi")
        if self.n_state_bins < 2 or self.n_action_bins < 2:
            raise ValueError("need at least two bins per axis")

    @property
    def states(self) -> np.ndarray:
        return np.linspace(self.state_lo, self.state_hi, self.n_state_bins)

    @property
    def actions(self) -> np.ndarray:
        return np.linspace(self.action_lo, self.action_hi, self.n_action_bins)

    def snap(self, x) -> np.ndarray:
        x = np.clip(x, self.state_lo, self.state_hi)
        step = (self.state_hi - self.state_lo) / (self.n_state_bins - 1)
        return np.rint((x - self.state_lo) / step).astype(int)


VARIANTS = ("zero", "sparse-goal", "fire-penalty", "sign-flip", "full-flip", "gaussian-noise")


@dataclass(frozen=True)
class ImperfectRewardSpec:
    variant: str = "zero"
    goal_value: float = GOAL_REWARD
    fire_value: float = FIRE_REWARD
    fraction: float = 0.5
    sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        variant = self.variant.lower().replace("_", "-")
        if variant not in VARIANTS:
            raise ValueError(f"unknown imperfect-reward variant {self.variant!r}")
        object.__setattr__(self, "variant", variant)
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("fraction must lie in [0, 1]")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")


def build_gridworld(spec: GridWorldSpec = GridWorldSpec(), gamma: float = 0.9) -> TabularMDP:
    n_cells = spec.width * spec.height
    n_states = n_cells + 1 if spec.absorbing_goal else n_cells
    absorbing = n_cells if spec.absorbing_goal else None
    goal = spec.index(spec.goal_cell)
    T = np.zeros((n_states, 4, n_states))

    def landing(r, c, a):
        dr, dc = _MOVES[a]
        nr, nc = r + dr, c + dc
        if 0 <= nr < spec.height and 0 <= nc < spec.width:
            return spec.index((nr, nc))
        return spec.index((r, c))

    for s in range(n_cells):
        r, c = spec.cell(s)
        for a in range(4):
            if s == goal:
                T[s, a, absorbing if absorbing is not None else goal] = 1.0
                continue
            # a slip replaces the intended move by a uniformly random one
            T[s, a, landing(r, c, a)] += 1.0 - spec.slip_prob
            for b in range(4):
                T[s, a, landing(r, c, b)] += spec.slip_prob / 4
    if absorbing is not None:
        T[absorbing, :, absorbing] = 1.0

    mu0 = np.zeros(n_states)
    mu0[spec.index(spec.start_cell)] = 1.0
    meta = {
        "kind": "gridworld",
        "spec": spec,
        "goal_states": (goal,),
        "absorbing_state": absorbing,
        "true_fire_states": tuple(spec.index(c) for c in spec.true_fire_cells),
        "fake_fire_states": tuple(spec.index(c) for c in spec.fake_fire_cells),
    }
    return TabularMDP(T, mu0, gamma, meta=meta)


def build_randomwalk(spec: RandomWalkSpec = RandomWalkSpec(), gamma: float = 0.9) -> TabularMDP:
    centers = spec.states
    n_bins = len(centers)
    goal_states = tuple(int(i) for i in np.flatnonzero(centers >= spec.goal_threshold - 1e-12))
    if not goal_states:
        # threshold above the range clamps to the top bin
        goal_states = (n_bins - 1,)
    absorbing = n_bins
    n_states = n_bins + 1
    T = np.zeros((n_states, spec.n_action_bins, n_states))
    nxt = spec.snap(centers[:, None] + spec.actions[None, :])
    for s in range(n_bins):
        for a in range(spec.n_action_bins):
            T[s, a, absorbing if s in goal_states else nxt[s, a]] = 1.0
    T[absorbing, :, absorbing] = 1.0
    mu0 = np.zeros(n_states)
    mu0[int(spec.snap(0.0))] = 1.0
    meta = {
        "kind": "randomwalk",
        "spec": spec,
        "goal_states": goal_states,
        "absorbing_state": absorbing,
        "true_fire_states": (),
        "fake_fire_states": (),
    }
    return TabularMDP(T, mu0, gamma, meta=meta)


def _arrival_reward(mdp: TabularMDP, values: dict[int, float]) -> np.ndarray:
    R_next = np.zeros(mdp.n_states)
    for s, v in values.items():
        R_next[s] += v
    reward = mdp.transition @ R_next
    # leaving the goal (into the absorbing state) is unrewarded
    for g in mdp.meta["goal_states"]:
        reward[g, :] = 0.0
    return reward


def base_reward(mdp: TabularMDP, variant: str = "sparse-goal",
                goal_value: float = GOAL_REWARD, fire_value: float = FIRE_REWARD) -> np.ndarray:
    """Sparse goal reward, optionally with fire penalties, on (s, a) pairs.

    A pair earns ``goal_value`` times its probability of entering a goal cell
    and, for ``fire-penalty``, ``fire_value`` times its probability of landing
    in any fire cell (true or fake).
    """
    kind = mdp.meta.get("kind")
    if kind not in ("gridworld", "randomwalk"):
        raise ValueError("base_reward needs an MDP built by build_gridworld or build_randomwalk")
    values = {g: goal_value for g in mdp.meta["goal_states"]}
    if variant == "fire-penalty":
        for s in (*mdp.meta["true_fire_states"], *mdp.meta["fake_fire_states"]):
            values[s] = values.get(s, 0.0) + fire_value
    elif variant != "sparse-goal":
        raise ValueError(f"base reward variant must be sparse-goal or fire-penalty, got {variant!r}")
    return _arrival_reward(mdp, values)


def apply_imperfect_reward(reward: np.ndarray, spec: ImperfectRewardSpec,
                           mdp: Optional[TabularMDP] = None) -> np.ndarray:
    reward = np.asarray(reward, dtype=float)
    if not np.all(np.isfinite(reward)):
        raise ValueError("reward table must be finite")
    v = spec.variant
    if v == "zero":
        return np.zeros_like(reward)
    if v in ("sparse-goal", "fire-penalty"):
        if mdp is None:
            raise ValueError(f"{v} needs the MDP to rebuild the base reward")
        return base_reward(mdp, v, spec.goal_value, spec.fire_value)
    if v == "full-flip":
        return -reward
    rng = np.random.default_rng(spec.seed)
    if v == "sign-flip":
        n_flip = int(round(spec.fraction * reward.size))
        idx = rng.choice(reward.size, size=n_flip, replace=False)
        out = reward.copy().ravel()
        out[idx] = -out[idx]
        return out.reshape(reward.shape)
    # gaussian-noise
    return reward + spec.sigma * rng.standard_normal(reward.shape)


def imperfect_reward(mdp: TabularMDP, spec: ImperfectRewardSpec) -> np.ndarray:
    """The imperfect table seen in the data: transforms act on the sparse goal reward."""
    return apply_imperfect_reward(base_reward(mdp, "sparse-goal", spec.goal_value), spec, mdp)


def shortest_path_policy(mdp: TabularMDP, avoid: tuple[int, ...] = ()) -> np.ndarray:
    """Deterministic goal-reaching policy from BFS distances.

    ``avoid`` states are treated as walls.  Ties prefer right, then down,
    then the remaining actions in index order.
    """
    dist = goal_distances(mdp, avoid)
    n_states, n_actions = mdp.shape
    policy = np.full((n_states, n_actions), 1.0 / n_actions)
    order = [RIGHT, DOWN, UP, LEFT] if mdp.meta.get("kind") == "gridworld" else list(
        range(n_actions))[::-1]
    for s in range(n_states):
        if not np.isfinite(dist[s]) or dist[s] == 0:
            continue
        best, best_d = None, np.inf
        for a in order:
            nxt = int(np.argmax(mdp.transition[s, a]))
            if nxt in avoid:
                continue
            if dist[nxt] < best_d:
                best, best_d = a, dist[nxt]
        if best is not None:
            policy[s] = 0.0
            policy[s, best] = 1.0
    return policy


def goal_distances(mdp: TabularMDP, avoid: tuple[int, ...] = ()) -> np.ndarray:
    """Fewest steps to a goal state along positive-probability transitions."""
    n_states = mdp.n_states
    preds: list[set[int]] = [set() for _ in range(n_states)]
    for s, a, t in zip(*np.nonzero(mdp.transition)):
        if s not in avoid:
            preds[t].add(int(s))
    dist = np.full(n_states, np.inf)
    queue = deque()
    for g in mdp.meta["goal_states"]:
        dist[g] = 0
        queue.append(g)
    while queue:
        t = queue.popleft()
        for s in preds[t]:
            if not np.isfinite(dist[s]):
                dist[s] = dist[t] + 1
                queue.append(s)
    return dist


def expert_policy(mdp: TabularMDP) -> np.ndarray:
    """Scripted expert: shortest route to the goal that steps around true fires."""
    return shortest_path_policy(mdp, avoid=tuple(mdp.meta["true_fire_states"]))
