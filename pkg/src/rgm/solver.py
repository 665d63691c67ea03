"""Bi-level reward-gap minimization on tabular MDPs.

The lower level minimizes the dual of the regularized occupancy problem over
a value vector V.  The upper level adjusts a bounded reward correction so
that the occupancy implied by the lower-level optimum moves toward the
expert's.  Both levels take gradient steps on the same batch, the correction
with a much smaller step size than V.

Expectations under the data distribution are written as weighted sums with a
weight table ``q``: the full-batch weights are d^D itself, a minibatch uses
its empirical (s, a) frequencies.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from . import datasets as ds
from .divergences import Divergence, f_divergence
from .mdp import TabularMDP, occupancy_of_policy, policy_of_occupancy, transition_apply


class DivergenceError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


@dataclass(frozen=True)
class SolverConfig:
    alpha: float = 0.5
    gamma: float = 0.99
    divergence: str = "kl"
    lr_v: float = 0.1
    lr_dr: float = 1e-3
    iterations: int = 3000
    batch_size: Optional[int] = None
    exp_clip: float = 100.0
    seed: int = 0
    distribution_mode: str = ds.SAMPLING
    dr_schedule: str = "constant"
    dr_bound: float = 3.0
    optimizer: str = "adam"
    log_every: int = 100
    log_ratio_eps: float = ds.LOG_RATIO_EPS
    freeze_correction: bool = False
    hypergradient: str = "implicit"

    def __post_init__(self):
        object.__setattr__(self, "divergence", Divergence.parse(self.divergence).value)
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not self.lr_dr < self.lr_v:
            raise ValueError("the correction step size must be smaller than the V step size")
        if self.exp_clip <= 1:
            raise ValueError("exp_clip must exceed 1")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.dr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.dr_schedule!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.hypergradient not in ("implicit", "partial"):
            raise ValueError(f"unknown hypergradient mode {self.hypergradient!r}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive or None for full batch")

    @property
    def kind(self) -> Divergence:
        return Divergence(self.divergence)


@dataclass(frozen=True, eq=False)
class RGMProblem:
    """Everything the bi-level loop reads but never changes."""

    mdp: TabularMDP
    d_data: np.ndarray
    d_expert: np.ndarray
    r_tilde: np.ndarray
    w: np.ndarray
    log_ratio: np.ndarray
    reward_mean: float = 0.0
    reward_std: float = 1.0

    @property
    def support(self) -> np.ndarray:
        return self.d_data > 0

    @property
    def expert_support(self) -> np.ndarray:
        return self.d_expert > 0


# tanh rounds to exactly 1 beyond about 19.06; clamping here keeps |delta| < bound
_RAW_LIMIT = 18.0


def bounded(raw, bound: float) -> np.ndarray:
    """bound * tanh(raw), strictly inside (-bound, bound) even in floating point."""
    return bound * np.tanh(np.clip(raw, -_RAW_LIMIT, _RAW_LIMIT))


def bounded_slope(raw, bound: float) -> np.ndarray:
    inside = np.abs(raw) < _RAW_LIMIT
    return np.where(inside, bound * (1.0 - np.tanh(raw) ** 2), 0.0)


@dataclass
class RewardCorrection:
    raw: np.ndarray
    bound: float = 3.0

    @property
    def delta(self) -> np.ndarray:
        return bounded(self.raw, self.bound)

    def r_hat(self, r_tilde: np.ndarray) -> np.ndarray:
        return r_tilde + self.delta


@dataclass
class _Adam:
    lr: float
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def step(self, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class SolverState:
    V: np.ndarray
    correction: RewardCorrection
    history: list = field(default_factory=list)
    step: int = 0
    problem: Optional[RGMProblem] = None
    _opt_v: Optional[_Adam] = None
    _opt_dr: Optional[_Adam] = None

    @property
    def delta_r(self) -> np.ndarray:
        return self.correction.delta

    def r_hat(self) -> np.ndarray:
        return self.correction.r_hat(self.problem.r_tilde)


def initial_state(problem: RGMProblem, config: SolverConfig) -> SolverState:
    S, A = problem.mdp.shape
    return SolverState(
        V=np.zeros(S),
        correction=RewardCorrection(np.zeros((S, A)), config.dr_bound),
        problem=problem,
        _opt_v=_Adam(config.lr_v, np.zeros(S), np.zeros(S)),
        _opt_dr=_Adam(config.lr_dr, np.zeros((S, A)), np.zeros((S, A))),
    )


# ---------------------------------------------------------------------------
# lower level


def advantage(r_hat: np.ndarray, V: np.ndarray, mdp: TabularMDP) -> np.ndarray:
    """Adv(s, a) = r_hat(s, a) + gamma (T V)(s, a) - V(s)."""
    return r_hat + mdp.gamma * transition_apply(mdp, V) - V[:, None]


def _occupancy_weights(y: np.ndarray, q: np.ndarray, kind: Divergence) -> np.ndarray:
    """q * f*'(y), with the KL branch normalized (softmax under q)."""
    if kind is Divergence.KL:
        on = q > 0
        lse = logsumexp(y[on], b=q[on])
        out = np.zeros_like(y)
        out[on] = q[on] * np.exp(y[on] - lse)
        return out
    return q * np.maximum(0.0, y + 1.0)


def lower_loss(V, r_hat, q, mdp: TabularMDP, alpha: float, kind="kl") -> float:
    """(1 - gamma) E_mu0[V] + alpha * conjugate term under q.

    KL uses the simplex-restricted conjugate alpha * log E_q[exp(Adv/alpha)];
    chi2 uses alpha * E_q[f*(Adv/alpha)].
    """
    kind = Divergence.parse(kind)
    y = advantage(r_hat, V, mdp) / alpha
    on = q > 0
    if kind is Divergence.KL:
        conj = logsumexp(y[on], b=q[on])
    else:
        conj = np.sum(q[on] * (0.5 * np.maximum(0.0, y[on] + 1.0) ** 2 - 0.5))
    loss = (1.0 - mdp.gamma) * float(mdp.initial_dist @ V) + alpha * float(conj)
    if not math.isfinite(loss):
        raise DivergenceError(f"lower loss is not finite (max |V| = {np.abs(V).max():.3g})")
    return loss


def lower_gradient(V, r_hat, q, mdp: TabularMDP, alpha: float, kind="kl") -> np.ndarray:
    """Exact gradient of :func:`lower_loss` with respect to V.

    With p = q f*'(Adv/alpha) (softmax-normalized for KL) the gradient is
    (1 - gamma) mu0 + gamma T_* p - sum_a p, i.e. minus the Bellman flow
    residual of p.
    """
    kind = Divergence.parse(kind)
    y = advantage(r_hat, V, mdp) / alpha
    p = _occupancy_weights(y, q, kind)
    return (1.0 - mdp.gamma) * mdp.initial_dist + mdp.gamma * np.einsum(
        "sat,sa->t", mdp.transition, p) - p.sum(axis=1)


# ---------------------------------------------------------------------------
# upper level


def _clipped_exp(y: np.ndarray, clip: float) -> tuple[np.ndarray, np.ndarray]:
    """min(exp(y), clip) and its derivative, without ever exponentiating past clip."""
    log_clip = math.log(clip)
    inside = y < log_clip
    val = np.exp(np.minimum(y, log_clip))
    return val, np.where(inside, val, 0.0)


def _upper_terms(raw, r_tilde, V, q, log_ratio, mdp, config):
    bound = config.dr_bound
    y = (r_tilde + bounded(raw, bound) + mdp.gamma * transition_apply(mdp, V) - V[:, None]) / config.alpha
    on = q > 0
    return y, on


def upper_loss(raw, r_tilde, V, q, log_ratio, mdp: TabularMDP, config: SolverConfig) -> float:
    """Upper-level objective as a function of the raw correction parameters.

    KL: E_q[min(exp(y), clip) * (log(dD/dE) + y - max_batch y)], y = Adv/alpha.
    chi2: E_q[w f(psi / w)] with psi = max(0, y + 1) and w = exp(-log_ratio),
    i.e. the expert ratio smoothed by the same epsilon as the log ratio.
    """
    y, on = _upper_terms(raw, r_tilde, V, q, log_ratio, mdp, config)
    if config.kind is Divergence.KL:
        m = y[on].max()
        c, _ = _clipped_exp(y[on], config.exp_clip)
        loss = float(np.sum(q[on] * c * (log_ratio[on] + y[on] - m)))
    else:
        w = np.exp(-log_ratio[on])
        psi = np.maximum(0.0, y[on] + 1.0)
        loss = float(np.sum(q[on] * w * 0.5 * (psi / w - 1.0) ** 2))
    if not math.isfinite(loss):
        raise DivergenceError("upper loss is not finite")
    return loss


def upper_gradient(raw, r_tilde, V, q, log_ratio, mdp: TabularMDP,
                   config: SolverConfig) -> np.ndarray:
    """Gradient of :func:`upper_loss` with respect to the raw parameters, V held fixed.

    The batch max is differentiated like any max: its derivative flows to
    the arg-max entry.
    """
    dy = _upper_dy(raw, r_tilde, V, q, log_ratio, mdp, config)
    dr_draw = bounded_slope(raw, config.dr_bound)
    return dy * dr_draw / config.alpha


def _upper_dy(raw, r_tilde, V, q, log_ratio, mdp, config) -> np.ndarray:
    """dU/dy, y = Adv/alpha."""
    y, on = _upper_terms(raw, r_tilde, V, q, log_ratio, mdp, config)
    dy = np.zeros_like(y)
    if config.kind is Divergence.KL:
        yo = y[on]
        m_idx = int(np.argmax(yo))
        c, dc = _clipped_exp(yo, config.exp_clip)
        g = q[on] * (dc * (log_ratio[on] + yo - yo[m_idx]) + c)
        g[m_idx] -= np.sum(q[on] * c)
        dy[on] = g
    else:
        w = np.exp(-log_ratio[on])
        yo = y[on]
        dy[on] = q[on] * (np.maximum(0.0, yo + 1.0) / w - 1.0) * (yo > -1.0)
    return dy


def _advantage_operator(mdp: TabularMDP) -> np.ndarray:
    """Matrix M with (M V)[(s, a)] = gamma (T V)(s, a) - V(s), rows flattened."""
    S, A = mdp.shape
    M = mdp.gamma * mdp.transition.reshape(S * A, S)
    M[np.arange(S * A), np.repeat(np.arange(S), A)] -= 1.0
    return M


def _conjugate_curvature(y: np.ndarray, q: np.ndarray, kind: Divergence) -> np.ndarray:
    """Second derivative of the conjugate term with respect to y (flattened, SA x SA)."""
    if kind is Divergence.KL:
        p = _occupancy_weights(y, q, kind).ravel()
        return np.diag(p) - np.outer(p, p)
    return np.diag((q * (y > -1.0)).ravel())


def implicit_upper_gradient(raw, r_tilde, V, q, log_ratio, mdp: TabularMDP,
                            config: SolverConfig) -> np.ndarray:
    """Total derivative of the upper loss along the lower-level solution V*(r_hat).

    Differentiates through V* with the implicit function theorem: with
    y = (r_hat + M V) / alpha and Sigma the conjugate curvature at y,
    dV*/dr_hat = -H^+ M^T Sigma / alpha, H = M^T Sigma M / alpha.  The
    pseudo-inverse handles the constant-shift null direction of H.  V is
    the current iterate, which tracks V* on the fast timescale.
    """
    y, _ = _upper_terms(raw, r_tilde, V, q, log_ratio, mdp, config)
    dy = _upper_dy(raw, r_tilde, V, q, log_ratio, mdp, config).ravel()
    M = _advantage_operator(mdp)
    Sigma = _conjugate_curvature(y, q, config.kind)
    SM = Sigma @ M
    H = M.T @ SM
    correction = SM @ (np.linalg.pinv(H, rcond=1e-12, hermitian=True) @ (M.T @ dy))
    total = (dy - correction).reshape(y.shape)
    dr_draw = bounded_slope(raw, config.dr_bound)
    return total * dr_draw / config.alpha


def generic_upper_loss(psi, w, d_data, kind="kl") -> float:
    """E_dD[w f(psi / w)], the exact upper objective written with the expert ratio.

    Entries with w = 0 take the limit of w f(psi / w): zero when psi = 0,
    +inf otherwise (mass placed where the expert never goes).
    """
    kind = Divergence.parse(kind)
    psi = np.asarray(psi, dtype=float)
    w = np.asarray(w, dtype=float)
    on = d_data > 0
    pos = on & (w > 0)
    zero = on & (w == 0)
    if np.any(psi[zero] > 0):
        return float("inf")
    from .divergences import f
    return float(np.sum(d_data[pos] * w[pos] * f(psi[pos] / w[pos], kind)))


# ---------------------------------------------------------------------------
# ratio recovery, policy extraction, diagnostics


def optimal_ratio(V, r_hat, d_data, mdp: TabularMDP, alpha: float, kind="kl") -> np.ndarray:
    """psi = d*/dD recovered from V.

    KL: exp(Adv/alpha) self-normalized so that E_dD[psi] = 1 (computed in the
    shifted form, so no exponential can overflow).  chi2: max(0, Adv/alpha + 1).
    Entries off the data support are set to zero.
    """
    kind = Divergence.parse(kind)
    y = advantage(r_hat, V, mdp) / alpha
    on = d_data > 0
    psi = np.zeros_like(y)
    if kind is Divergence.KL:
        psi[on] = np.exp(y[on] - logsumexp(y[on], b=d_data[on]))
    else:
        psi[on] = np.maximum(0.0, y[on] + 1.0)
    return psi


def extract_policy(psi, d_data) -> np.ndarray:
    """Weighted behavior cloning in closed form: pi(a|s) proportional to dD(s,a) psi(s,a)."""
    return policy_of_occupancy(np.asarray(d_data) * np.asarray(psi))


def smoothed(d: np.ndarray, eps: float = ds.LOG_RATIO_EPS) -> np.ndarray:
    d = np.asarray(d, dtype=float) + eps
    return d / d.sum()


def reward_gap(d_policy, d_expert, kind="kl", eps: float = ds.LOG_RATIO_EPS) -> float:
    """D_f(d_pi || d_E) with d_E smoothed by eps so the value stays finite."""
    return f_divergence(d_policy, smoothed(d_expert, eps), kind)


# ---------------------------------------------------------------------------
# the bi-level loop


def prepare_problem(mdp: TabularMDP, dataset_D: ds.Dataset, dataset_E: ds.Dataset,
                    config: SolverConfig) -> RGMProblem:
    """Merge the expert data into D, standardize rewards and estimate dD, dE and w."""
    if abs(mdp.gamma - config.gamma) > 0:
        raise ValueError(f"MDP discount {mdp.gamma} differs from solver discount {config.gamma}")
    merged = ds.merge(dataset_E, dataset_D)
    merged, mean, std = ds.normalize_rewards(merged)
    d_data = ds.empirical_distribution(merged, config.distribution_mode, config.gamma)
    d_expert = ds.empirical_distribution(dataset_E, config.distribution_mode, config.gamma)
    w, log_ratio = ds.tabular_ratio(d_expert, d_data, config.log_ratio_eps)
    r_tilde = ds.reward_table(merged)
    absorbing = merged.absorbing_state
    if absorbing is not None and merged.horizon is not None:
        # completed absorbing steps carry the standardized value of a zero reward
        r_tilde[absorbing, :] = (0.0 - mean) / std if std > 0 else 0.0
    return RGMProblem(mdp, d_data, d_expert, r_tilde, w, log_ratio, mean, std if std > 0 else 1.0)


def _batch_weights(problem: RGMProblem, config: SolverConfig,
                   rng: np.random.Generator) -> np.ndarray:
    if config.batch_size is None:
        return problem.d_data
    flat = problem.d_data.ravel()
    idx = rng.choice(flat.size, size=config.batch_size, p=flat)
    q = np.bincount(idx, minlength=flat.size).astype(float) / config.batch_size
    return q.reshape(problem.d_data.shape)


def _dr_lr(config: SolverConfig, step: int) -> float:
    if config.dr_schedule == "cosine" and config.iterations > 0:
        return config.lr_dr * 0.5 * (1.0 + math.cos(math.pi * min(step, config.iterations) / config.iterations))
    return config.lr_dr


def diagnostics(state: SolverState, config: SolverConfig) -> dict:
    problem = state.problem
    mdp = problem.mdp
    r_hat = state.r_hat()
    q = problem.d_data
    psi = optimal_ratio(state.V, r_hat, q, mdp, config.alpha, config.kind)
    policy = extract_policy(psi, q)
    d_pi = occupancy_of_policy(mdp, policy)
    delta = state.delta_r
    expert = problem.expert_support
    other = problem.support & ~expert
    return {
        "iter": state.step,
        "lower_loss": lower_loss(state.V, r_hat, q, mdp, config.alpha, config.kind),
        "upper_loss": upper_loss(state.correction.raw, problem.r_tilde, state.V, q,
                                 problem.log_ratio, mdp, config),
        "reward_gap": reward_gap(d_pi, problem.d_expert, "kl", config.log_ratio_eps),
        "dr_mean_expert": _weighted_mean(delta, q, expert),
        "dr_mean_other": _weighted_mean(delta, q, other),
    }


def _weighted_mean(values, weights, mask) -> float:
    wsum = weights[mask].sum()
    return float(np.sum(values[mask] * weights[mask]) / wsum) if wsum > 0 else 0.0


def two_timescale_step(state: SolverState, config: SolverConfig,
                       rng: Optional[np.random.Generator] = None,
                       q: Optional[np.ndarray] = None) -> SolverState:
    """One V step on the lower loss, then one correction step on the upper loss.

    Both use the same batch ``q``.  The state is updated in place and returned.
    """
    problem = state.problem
    mdp = problem.mdp
    if q is None:
        q = _batch_weights(problem, config, rng if rng is not None else np.random.default_rng(config.seed))
    r_hat = state.r_hat()

    # non-finite values are checked explicitly below
    with np.errstate(over="ignore", invalid="ignore"):
        g_v = lower_gradient(state.V, r_hat, q, mdp, config.alpha, config.kind)
    if not np.all(np.isfinite(g_v)):
        raise DivergenceError(f"non-finite V gradient at step {state.step}")
    if config.optimizer == "adam":
        state.V = state.V - state._opt_v.step(g_v, config.lr_v)
    else:
        state.V = state.V - config.lr_v * g_v

    if not config.freeze_correction:
        raw = state.correction.raw
        grad_fn = implicit_upper_gradient if config.hypergradient == "implicit" else upper_gradient
        g_r = grad_fn(raw, problem.r_tilde, state.V, q, problem.log_ratio, mdp, config)
        if not np.all(np.isfinite(g_r)):
            raise DivergenceError(f"non-finite correction gradient at step {state.step}")
        lr = _dr_lr(config, state.step)
        if config.optimizer == "adam":
            state.correction.raw = raw - state._opt_dr.step(g_r, lr)
        else:
            state.correction.raw = raw - lr * g_r
    assert _lse_bound_holds(state, config, q)
    state.step += 1
    return state


def _lse_bound_holds(state: SolverState, config: SolverConfig, q: np.ndarray) -> bool:
    """max over the batch <= max over the data <= log-sum-exp over the data."""
    problem = state.problem
    y = advantage(state.r_hat(), state.V, problem.mdp) / config.alpha
    full = y[problem.support]
    batch = y[q > 0]
    return bool(batch.max() <= full.max() <= logsumexp(full))


def run(state: SolverState, config: SolverConfig, iterations: Optional[int] = None) -> SolverState:
    n = config.iterations if iterations is None else iterations
    rng = np.random.default_rng(config.seed)
    if not state.history:
        state.history.append(diagnostics(state, config))
    for _ in range(n):
        two_timescale_step(state, config, rng)
        if state.step % config.log_every == 0 or _ == n - 1:
            rec = diagnostics(state, config)
            if not all(math.isfinite(v) for v in rec.values()):
                raise DivergenceError(f"non-finite diagnostics at step {state.step}: {rec}")
            if state.history[-1]["iter"] != rec["iter"]:
                state.history.append(rec)
    return state


def solve(mdp: TabularMDP, dataset_D: ds.Dataset, dataset_E: ds.Dataset,
          config: SolverConfig = SolverConfig()) -> SolverState:
    problem = prepare_problem(mdp, dataset_D, dataset_E, config)
    return run(initial_state(problem, config), config)


def final_ratio(state: SolverState, config: SolverConfig) -> np.ndarray:
    p = state.problem
    return optimal_ratio(state.V, state.r_hat(), p.d_data, p.mdp, config.alpha, config.kind)


def final_policy(state: SolverState, config: SolverConfig) -> np.ndarray:
    return extract_policy(final_ratio(state, config), state.problem.d_data)
