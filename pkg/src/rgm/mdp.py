"""Finite MDPs, exact occupancy measures and the Bellman flow operators.

Tables are dense numpy arrays indexed ``[state, action]`` (and
``[state, action, next_state]`` for the transition tensor).  Policies,
occupancy measures and value vectors are plain arrays; the helpers in this
module validate them where it matters.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

PROB_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """A finite discounted MDP.

    ``meta`` carries construction details (environment kind, goal/fire
    states, absorbing state) used by the environment helpers; the numerical
    operators never read it.
    """

    transition: np.ndarray
    initial_dist: np.ndarray
    gamma: float
    perfect_reward: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        T = np.asarray(self.transition, dtype=float)
        mu0 = np.asarray(self.initial_dist, dtype=float)
        if T.ndim != 3 or T.shape[0] != T.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {T.shape}")
        if mu0.shape != (T.shape[0],):
            raise ValueError("initial_dist length does not match n_states")
        if np.any(T < 0) or np.abs(T.sum(axis=2) - 1.0).max() > PROB_TOL:
            raise ValueError("every transition row must be a probability distribution")
        if np.any(mu0 < 0) or abs(mu0.sum() - 1.0) > PROB_TOL:
            raise ValueError("initial_dist must be a probability distribution")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        T.setflags(write=False)
        mu0.setflags(write=False)
        object.__setattr__(self, "transition", T)
        object.__setattr__(self, "initial_dist", mu0)
        if self.perfect_reward is not None:
            r = np.array(self.perfect_reward, dtype=float)
            if r.shape != T.shape[:2]:
                raise ValueError("perfect_reward must have shape (S, A)")
            r.setflags(write=False)
            object.__setattr__(self, "perfect_reward", r)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.transition.shape[:2]

    def with_gamma(self, gamma: float) -> "TabularMDP":
        return TabularMDP(self.transition, self.initial_dist, gamma,
                          self.perfect_reward, dict(self.meta))


def check_policy(mdp: TabularMDP, policy: np.ndarray) -> np.ndarray:
    policy = np.asarray(policy, dtype=float)
    if policy.shape != mdp.shape:
        raise ValueError(f"policy shape {policy.shape} does not match MDP {mdp.shape}")
    if np.any(policy < 0) or np.abs(policy.sum(axis=1) - 1.0).max() > PROB_TOL:
        raise ValueError("policy rows must be probability distributions")
    return policy


def uniform_policy(n_states: int, n_actions: int) -> np.ndarray:
    return np.full((n_states, n_actions), 1.0 / n_actions)


def state_transition_matrix(mdp: TabularMDP, policy: np.ndarray) -> np.ndarray:
    """P_pi[s, s'] = sum_a pi(a|s) T(s'|s, a)."""
    return np.einsum("sa,sat->st", policy, mdp.transition)


def occupancy_of_policy(mdp: TabularMDP, policy: np.ndarray) -> np.ndarray:
    """Normalized discounted state-action occupancy of ``policy``.

    Solves (I - gamma P_pi^T) rho = (1 - gamma) mu0 with a dense LU solve
    followed by one step of iterative refinement, then d = rho * pi.
    """
    policy = check_policy(mdp, policy)
    P = state_transition_matrix(mdp, policy)
    A = np.eye(mdp.n_states) - mdp.gamma * P.T
    b = (1.0 - mdp.gamma) * mdp.initial_dist
    rho = np.linalg.solve(A, b)
    rho = rho + np.linalg.solve(A, b - A @ rho)
    if not np.all(np.isfinite(rho)):
        raise FloatingPointError("occupancy linear solve produced non-finite values")
    # round-off can leave entries like -1e-18
    rho = np.where((rho < 0) & (rho > -1e-12), 0.0, rho)
    return rho[:, None] * policy


def policy_of_occupancy(d: np.ndarray, min_mass: float = 0.0) -> np.ndarray:
    """pi(a|s) = d(s,a) / sum_a d(s,a); states without mass get uniform rows."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("occupancy must be nonnegative")
    mass = d.sum(axis=1, keepdims=True)
    n_actions = d.shape[1]
    has_mass = mass > min_mass
    safe = np.where(has_mass, mass, 1.0)
    return np.where(has_mass, d / safe, 1.0 / n_actions)


def adjoint_apply(mdp: TabularMDP, d: np.ndarray) -> np.ndarray:
    """(T_* d)(s) = sum_{s_bar, a_bar} T(s | s_bar, a_bar) d(s_bar, a_bar)."""
    return np.einsum("sat,sa->t", mdp.transition, d)


def bellman_flow_residual(mdp: TabularMDP, d: np.ndarray) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    if d.shape != mdp.shape:
        raise ValueError("occupancy shape does not match the MDP")
    return d.sum(axis=1) - (1.0 - mdp.gamma) * mdp.initial_dist - mdp.gamma * adjoint_apply(mdp, d)


def transition_apply(mdp: TabularMDP, V: np.ndarray) -> np.ndarray:
    """(T V)(s, a) = sum_{s'} T(s'|s, a) V(s')."""
    V = np.asarray(V, dtype=float)
    if V.shape != (mdp.n_states,):
        raise ValueError("value vector length does not match n_states")
    return mdp.transition @ V


def expected_value(d: np.ndarray, table: np.ndarray) -> float:
    d = np.asarray(d, dtype=float)
    table = np.asarray(table, dtype=float)
    if d.shape != table.shape:
        raise ValueError(f"shape mismatch: {d.shape} vs {table.shape}")
    return float(np.sum(d * table))


def random_mdp(rng: np.random.Generator, n_states: int, n_actions: int,
               gamma: float = 0.9, concentration: float = 1.0) -> TabularMDP:
    """Dirichlet-random dense MDP, used by tests and the duality sweep."""
    T = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
    mu0 = rng.dirichlet(np.ones(n_states))
    # renormalize so rows sum to one within machine precision
    T = T / T.sum(axis=2, keepdims=True)
    mu0 = mu0 / mu0.sum()
    return TabularMDP(T, mu0, gamma)


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int) -> np.ndarray:
    pi = rng.dirichlet(np.ones(n_actions), size=n_states)
    return pi / pi.sum(axis=1, keepdims=True)
