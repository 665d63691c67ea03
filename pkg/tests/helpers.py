"""Small random problem instances shared by the solver, oracle and property tests."""
import numpy as np

from rgm import datasets as ds
from rgm import solver as sv
from rgm.mdp import occupancy_of_policy, random_mdp, random_policy


def random_problem(rng, n_states=None, n_actions=None, gamma=0.9, expert_sparse=False):
    S = n_states or int(rng.integers(2, 7))
    A = n_actions or int(rng.integers(1, 4))
    mdp = random_mdp(rng, S, A, gamma)
    d_data = occupancy_of_policy(mdp, random_policy(rng, S, A))
    d_expert = occupancy_of_policy(mdp, random_policy(rng, S, A))
    if expert_sparse:
        keep = rng.random(d_expert.shape) >= 0.3
        keep.flat[np.argmax(d_expert)] = True
        d_expert = np.where(keep, d_expert, 0.0)
        d_expert = d_expert / d_expert.sum()
    w, log_ratio = ds.tabular_ratio(d_expert, d_data)
    r_tilde = rng.standard_normal((S, A))
    return sv.RGMProblem(mdp, d_data, d_expert, r_tilde, w, log_ratio)


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def central_diff(fun, x, h=1e-6):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g
