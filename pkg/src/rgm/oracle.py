"""Brute-force and high-precision reference solutions for small MDPs.

Nothing here calls into the solver module: the dual objective, its
derivatives and the primal recovery are written out again from scratch so
that agreement between the two is meaningful.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from scipy.special import logsumexp, softmax

from .divergences import Divergence, f_divergence
from .mdp import TabularMDP, adjoint_apply, occupancy_of_policy, random_mdp, random_policy

REPORT_FIELDS = ["instance_id", "alpha", "kind", "primal", "dual", "gap", "flow_residual"]


class OracleError(RuntimeError):
    pass


@dataclass(frozen=True)
class PrimalSolution:
    d_star: np.ndarray
    objective: float
    flow_residual: float


class _Dual:
    """The dual objective restricted to the support of dD, in flattened form."""

    def __init__(self, mdp: TabularMDP, r_hat, d_data, alpha: float, kind):
        self.kind = Divergence.parse(kind)
        self.alpha = float(alpha)
        self.mdp = mdp
        S, A = mdp.shape
        d_data = np.asarray(d_data, dtype=float)
        self.idx = np.flatnonzero(d_data.ravel() > 0)
        states = self.idx // A
        # rows of the advantage map V -> gamma T V - V, only on the support
        M = mdp.gamma * mdp.transition.reshape(S * A, S)[self.idx]
        M[np.arange(len(self.idx)), states] -= 1.0
        self.M = M
        self.q = d_data.ravel()[self.idx]
        self.r = np.asarray(r_hat, dtype=float).ravel()[self.idx]
        self.lin = (1.0 - mdp.gamma) * mdp.initial_dist

    def y(self, V):
        return (self.r + self.M @ V) / self.alpha

    def weights(self, V):
        """q * f*'(y); softmax-normalized for KL."""
        y = self.y(V)
        if self.kind is Divergence.KL:
            return softmax(y + np.log(self.q))
        return self.q * np.maximum(0.0, y + 1.0)

    def value(self, V) -> float:
        y = self.y(V)
        if self.kind is Divergence.KL:
            conj = logsumexp(y, b=self.q)
        else:
            conj = np.dot(self.q, 0.5 * np.maximum(0.0, y + 1.0) ** 2 - 0.5)
        return float(self.lin @ V + self.alpha * conj)

    def grad(self, V):
        return self.lin + self.M.T @ self.weights(V)

    def hess(self, V):
        y = self.y(V)
        if self.kind is Divergence.KL:
            p = self.weights(V)
            C = np.diag(p) - np.outer(p, p)
        else:
            C = np.diag(self.q * (y > -1.0))
        return self.M.T @ C @ self.M / self.alpha


def dual_solve_high_precision(mdp: TabularMDP, r_hat, d_data, alpha: float, kind="kl",
                              V0: Optional[np.ndarray] = None, tol: float = 1e-10,
                              max_iter: int = 500) -> tuple[np.ndarray, float]:
    """Minimize the dual over V with regularized Newton steps and Armijo backtracking.

    The Hessian is singular along constant shifts (KL) and along states whose
    entries are all inactive (chi2), hence the gradient-norm shift.  When the
    step fails to descend a plain gradient step is taken instead.
    """
    dual = _Dual(mdp, r_hat, d_data, alpha, kind)
    V = np.zeros(mdp.n_states) if V0 is None else np.array(V0, dtype=float)
    val = dual.value(V)
    for _ in range(max_iter):
        g = dual.grad(V)
        if np.linalg.norm(g) <= tol:
            return V, val
        # the ||g|| shift lets chi2 steps reach currently inactive entries and
        # vanishes at the optimum, so the local rate stays superlinear
        H = dual.hess(V) + np.linalg.norm(g) * np.eye(len(V))
        step = -np.linalg.lstsq(H, g, rcond=None)[0]
        slope = float(g @ step)
        if not np.isfinite(slope) or slope >= 0.0:
            step, slope = -g, -float(g @ g)
        if -slope < 1e-13 * (1.0 + abs(val)):
            # the decrease is below what the loss value can resolve, so
            # Armijo is meaningless; the full Newton step is the right one
            V = V + step
            val = dual.value(V)
            continue
        t = 1.0
        while t >= 1e-12:
            cand = V + t * step
            new = dual.value(cand)
            if new <= val + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            raise OracleError(f"line search failed with gradient norm {np.linalg.norm(g):.3g}")
        V, val = cand, new
    g = dual.grad(V)
    if np.linalg.norm(g) <= tol:
        return V, val
    raise OracleError(f"no convergence in {max_iter} iterations (gradient norm {np.linalg.norm(g):.3g})")


def primal_from_dual(mdp: TabularMDP, V_star, r_hat, d_data, alpha: float,
                     kind="kl") -> PrimalSolution:
    """Recover d* = dD f*'(Adv/alpha) and score it in the primal."""
    dual = _Dual(mdp, r_hat, d_data, alpha, kind)
    d = np.zeros(mdp.shape)
    d.ravel()[dual.idx] = dual.weights(np.asarray(V_star, dtype=float))
    objective = primal_objective(d, r_hat, d_data, alpha, kind)
    residual = d.sum(axis=1) - (1.0 - mdp.gamma) * mdp.initial_dist - mdp.gamma * adjoint_apply(mdp, d)
    return PrimalSolution(d, objective, float(np.abs(residual).max()))


def primal_objective(d, r_hat, d_data, alpha: float, kind="kl") -> float:
    """E_d[r_hat] - alpha D_f(d || dD)."""
    return float(np.sum(d * r_hat)) - alpha * f_divergence(d, d_data, kind)


def simplex_lattice(n_actions: int, resolution: int) -> np.ndarray:
    """All points of the probability simplex with coordinates in {0, 1/(res-1), ..., 1}."""
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    n = resolution - 1
    pts = [c for c in itertools.product(range(n + 1), repeat=n_actions - 1) if sum(c) <= n]
    return np.array([(*c, n - sum(c)) for c in pts], dtype=float) / n


def policy_grid_search(mdp: TabularMDP, r_hat, d_data, alpha: float, kind="kl",
                       resolution: int = 21, budget: int = 250_000) -> tuple[np.ndarray, float]:
    """Exhaustive search over lattice policies of the regularized objective."""
    S, A = mdp.shape
    if S > 3 or A > 3:
        raise OracleError("grid search is limited to 3 states and 3 actions")
    lattice = simplex_lattice(A, resolution)
    n_policies = len(lattice) ** S
    if n_policies > budget:
        raise OracleError(f"{n_policies} lattice policies exceed the budget of {budget}")
    choice = np.array(list(itertools.product(range(len(lattice)), repeat=S)))
    policies = lattice[choice]  # (N, S, A)
    P = np.einsum("nsa,sat->nst", policies, mdp.transition)
    lhs = np.eye(S)[None] - mdp.gamma * np.transpose(P, (0, 2, 1))
    rhs = np.broadcast_to((1.0 - mdp.gamma) * mdp.initial_dist, (len(policies), S))
    rho = np.linalg.solve(lhs, rhs[..., None])[..., 0]
    d = np.clip(rho, 0.0, None)[..., None] * policies
    scores = np.array([primal_objective(di, r_hat, d_data, alpha, kind) for di in d])
    best = int(np.argmax(scores))
    return policies[best], float(scores[best])


def value_iteration(mdp: TabularMDP, reward, tol: float = 1e-10,
                    max_iter: int = 100_000) -> tuple[np.ndarray, np.ndarray]:
    reward = np.asarray(reward, dtype=float)
    V = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        Q = reward + mdp.gamma * mdp.transition @ V
        V_new = Q.max(axis=1)
        done = np.abs(V_new - V).max() < tol
        V = V_new
        if done:
            break
    Q = reward + mdp.gamma * mdp.transition @ V
    greedy = np.zeros(mdp.shape)
    greedy[np.arange(mdp.n_states), Q.argmax(axis=1)] = 1.0
    return V, greedy


# ---------------------------------------------------------------------------
# duality sweep

ALPHAS = (0.1, 0.5, 2.0)
KINDS = (Divergence.KL, Divergence.CHI2)


def random_instance(rng: np.random.Generator, max_states: int = 5, max_actions: int = 3,
                    gamma: float = 0.9):
    """Random MDP, reward and dD from a random exploratory policy."""
    S = int(rng.integers(2, max_states + 1))
    A = int(rng.integers(2, max_actions + 1))
    mdp = random_mdp(rng, S, A, gamma)
    d_data = occupancy_of_policy(mdp, random_policy(rng, S, A))
    r_hat = rng.standard_normal((S, A))
    return mdp, r_hat, d_data


def duality_rows(n_instances: int, seed: int = 0) -> Iterable[dict]:
    rng = np.random.default_rng(seed)
    for i in range(n_instances):
        mdp, r_hat, d_data = random_instance(rng)
        alpha = ALPHAS[i % len(ALPHAS)]
        kind = KINDS[(i // len(ALPHAS)) % len(KINDS)]
        V, dual = dual_solve_high_precision(mdp, r_hat, d_data, alpha, kind)
        sol = primal_from_dual(mdp, V, r_hat, d_data, alpha, kind)
        yield {
            "instance_id": i,
            "alpha": alpha,
            "kind": kind.value,
            "primal": sol.objective,
            "dual": dual,
            "gap": abs(sol.objective - dual),
            "flow_residual": sol.flow_residual,
        }


def write_report(rows: Iterable[dict], path) -> list[dict]:
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return rows


def violations(rows: Iterable[dict], tolerance: float = 1e-5) -> list[dict]:
    return [r for r in rows if not (r["gap"] <= tolerance and r["flow_residual"] <= tolerance)
            or not math.isfinite(r["gap"])]
