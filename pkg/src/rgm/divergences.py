"""KL and chi-squared f-divergences with their Fenchel conjugates.

Conventions
-----------
KL:   f(x) = x log x,         f*(y) = exp(y - 1),   f*'(y) = exp(y - 1)
chi2: f(x) = (x - 1)^2 / 2,   f*(y) = max(0, y + 1)^2 / 2 - 1/2,
      f*'(y) = max(0, y + 1)

Both generators live on x >= 0.  The chi2 conjugate carries the ``- 1/2``
that makes it the exact conjugate on that domain, so Fenchel-Young holds with
equality at x = f*'(y).  Dropping the constant does not move any minimizer.
"""
from __future__ import annotations

import enum

import numpy as np
from scipy.special import logsumexp, xlogy


class Divergence(str, enum.Enum):
    KL = "kl"
    CHI2 = "chi2"

    @classmethod
    def parse(cls, kind: "Divergence | str") -> "Divergence":
        if isinstance(kind, cls):
            return kind
        key = str(kind).lower().replace("-", "").replace("_", "")
        aliases = {"kl": cls.KL, "chi2": cls.CHI2, "chisquared": cls.CHI2, "x2": cls.CHI2}
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown divergence {kind!r}") from None


def f(x, kind):
    kind = Divergence.parse(kind)
    x = np.asarray(x, dtype=float)
    if kind is Divergence.KL:
        return xlogy(x, x)
    return 0.5 * (x - 1.0) ** 2


def f_star(y, kind):
    kind = Divergence.parse(kind)
    y = np.asarray(y, dtype=float)
    if kind is Divergence.KL:
        return np.exp(y - 1.0)
    return 0.5 * np.maximum(0.0, y + 1.0) ** 2 - 0.5


def f_star_prime(y, kind):
    kind = Divergence.parse(kind)
    y = np.asarray(y, dtype=float)
    if kind is Divergence.KL:
        return np.exp(y - 1.0)
    return np.maximum(0.0, y + 1.0)


def f_divergence(p, q, kind) -> float:
    """D_f(p || q) = sum_z q(z) f(p(z) / q(z)).

    Entries with q = p = 0 contribute nothing; p > 0 where q = 0 gives +inf.
    """
    kind = Divergence.parse(kind)
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("distributions must be nonnegative")
    off_support = (q == 0) & (p > 0)
    if np.any(off_support):
        return float("inf")
    on = q > 0
    ratio = p[on] / q[on]
    return float(np.sum(q[on] * f(ratio, kind)))


def logsumexp_conjugate(q, y) -> float:
    """log E_q[exp y], the KL conjugate restricted to the probability simplex."""
    q = np.asarray(q, dtype=float)
    y = np.asarray(y, dtype=float)
    if q.shape != y.shape:
        raise ValueError(f"shape mismatch: {q.shape} vs {y.shape}")
    return float(logsumexp(y, b=q))


# Generators and conjugates bundled for callers that prefer an object.
class FDivergence:
    def __init__(self, kind):
        self.kind = Divergence.parse(kind)

    def f(self, x):
        return f(x, self.kind)

    def f_star(self, y):
        return f_star(y, self.kind)

    def f_star_prime(self, y):
        return f_star_prime(y, self.kind)

    def divergence(self, p, q) -> float:
        return f_divergence(p, q, self.kind)

    def restricted_conjugate_over(self, q, y) -> float:
        if self.kind is not Divergence.KL:
            raise NotImplementedError("the simplex-restricted conjugate is only used for KL")
        return logsumexp_conjugate(q, y)

    def __repr__(self):
        return f"FDivergence({self.kind.value!r})"
