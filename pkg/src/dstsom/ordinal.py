"""Ordinal-model calculus: links, sequential and cumulative probabilities,
binary expansion of the sequential likelihood and category collapsing.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
from scipy import special, stats

PROB_EPS = 1e-15
LOG_FLOOR = np.log(PROB_EPS)


class Link(str, Enum):
    CLOGLOG = "cloglog"
    LOGIT = "logit"
    PROBIT = "probit"


def _as_link(link) -> Link:
    return link if isinstance(link, Link) else Link(str(link).lower())


@dataclass(frozen=True)
class OrdinalScale:
    """Ordered scale with ``C`` categories, numbered 1..C."""

    C: int
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        if int(self.C) != self.C or self.C < 2:
            raise ValueError(f"an ordinal scale needs at least 2 categories, got {self.C}")
        if not self.labels:
            object.__setattr__(self, "labels", tuple(str(c) for c in range(1, self.C + 1)))
        labels = tuple(str(s) for s in self.labels)
        if len(labels) != self.C:
            raise ValueError(f"expected {self.C} labels, got {len(labels)}")
        if len(set(labels)) != self.C:
            raise ValueError("category labels must be unique")
        object.__setattr__(self, "labels", labels)

    @property
    def q(self) -> int:
        return self.C - 1


@dataclass(frozen=True)
class Partition:
    """Contiguous grouping of categories 1..C given by the upper boundary of
    every group except the last (``cutpoints = (k_1, ..., k_{K-1})``)."""

    cutpoints: tuple[int, ...]
    C: int

    def __post_init__(self):
        cuts = tuple(int(k) for k in self.cutpoints)
        if not cuts:
            raise ValueError("a partition needs at least two groups")
        if cuts[0] < 1 or cuts[-1] >= self.C or any(b <= a for a, b in zip(cuts, cuts[1:])):
            raise ValueError(f"cutpoints {cuts} must be strictly increasing within 1..{self.C - 1}")
        object.__setattr__(self, "cutpoints", cuts)

    @property
    def K(self) -> int:
        return len(self.cutpoints) + 1

    def subsets(self) -> list[list[int]]:
        bounds = (0,) + self.cutpoints + (self.C,)
        return [list(range(lo + 1, hi + 1)) for lo, hi in zip(bounds, bounds[1:])]


# ---------------------------------------------------------------------------
# links


def link_eval(p, link=Link.CLOGLOG):
    """Linear predictor ``g(p)`` for probabilities strictly inside (0, 1)."""
    link = _as_link(link)
    p = np.asarray(p, dtype=float)
    if np.any(~(p > 0) | ~(p < 1)):
        raise ValueError("link_eval requires 0 < p < 1")
    if link is Link.CLOGLOG:
        out = np.log(-np.log1p(-p))
    elif link is Link.LOGIT:
        out = special.logit(p)
    else:
        out = special.ndtri(p)
    return out if out.ndim else float(out)


def link_inverse(eta, link=Link.CLOGLOG):
    """Inverse link, clamped to ``(1e-15, 1 - 1e-15)``."""
    link = _as_link(link)
    eta = np.asarray(eta, dtype=float)
    if not np.all(np.isfinite(eta)):
        raise ValueError("link_inverse requires a finite linear predictor")
    if link is Link.CLOGLOG:
        p = -np.expm1(-np.exp(np.minimum(eta, 700.0)))
    elif link is Link.LOGIT:
        p = special.expit(eta)
    else:
        p = special.ndtr(eta)
    p = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return p if p.ndim else float(p)


def log_probs(eta, link=Link.CLOGLOG):
    """Stable ``(log p, log(1-p))`` floored at ``log(1e-15)``; values only."""
    link = _as_link(link)
    eta = np.asarray(eta, dtype=float)
    if link is Link.CLOGLOG:
        mu = np.exp(np.clip(eta, -745.0, 700.0))
        with np.errstate(divide="ignore"):
            lp = np.log(-np.expm1(-mu))
        lq = -mu
    elif link is Link.LOGIT:
        lp = -np.logaddexp(0.0, -eta)
        lq = -np.logaddexp(0.0, eta)
    else:
        lp = special.log_ndtr(eta)
        lq = special.log_ndtr(-eta)
    return np.maximum(lp, LOG_FLOOR), np.maximum(lq, LOG_FLOOR)


def log_prob_terms(eta, link=Link.CLOGLOG):
    """Stable ``log p``, ``log(1-p)`` and their first two derivatives in eta.

    Log-probabilities are floored at ``log(1e-15)`` to match the clamped
    inverse link; derivatives vanish where the floor is active.

    Returns
    -------
    (lp, lq, dlp, dlq, d2lp, d2lq) : tuple of arrays shaped like ``eta``
    """
    link = _as_link(link)
    eta = np.asarray(eta, dtype=float)
    if link is Link.CLOGLOG:
        e = np.clip(eta, -745.0, 700.0)
        mu = np.exp(e)
        with np.errstate(divide="ignore"):
            lp = np.log(-np.expm1(-mu))
        lq = -mu
        small = mu < 1e-300
        safe_mu = np.where(small, 1.0, mu)
        ratio = np.where(small, 1.0, safe_mu / np.expm1(np.minimum(safe_mu, 700.0)))
        ratio = np.where(mu > 700.0, 0.0, ratio)
        dlp = ratio
        # d/deta [mu/expm1(mu)] = ratio * (1 - mu / (1 - exp(-mu)))
        # 1 - mu / (1 - exp(-mu)) cancels for small mu; use its series there
        series = -safe_mu / 2.0 - safe_mu**2 / 12.0 + safe_mu**4 / 720.0
        tail = np.where(safe_mu < 1e-3, series, 1.0 - safe_mu / -np.expm1(-safe_mu))
        d2lp = np.where(small, -mu / 2.0, ratio * tail)
        dlq = -mu
        d2lq = -mu
    elif link is Link.LOGIT:
        p = special.expit(eta)
        lp = -np.logaddexp(0.0, -eta)
        lq = -np.logaddexp(0.0, eta)
        dlp = special.expit(-eta)
        dlq = -p
        d2lp = -p * dlp
        d2lq = d2lp
    else:
        lp = special.log_ndtr(eta)
        lq = special.log_ndtr(-eta)
        logpdf = stats.norm.logpdf(eta)
        m_pos = np.exp(logpdf - lp)
        m_neg = np.exp(logpdf - lq)
        dlp = m_pos
        d2lp = -m_pos * (eta + m_pos)
        dlq = -m_neg
        d2lq = -m_neg * (m_neg - eta)
    low_p = lp < LOG_FLOOR
    low_q = lq < LOG_FLOOR
    lp = np.where(low_p, LOG_FLOOR, lp)
    lq = np.where(low_q, LOG_FLOOR, lq)
    dlp = np.where(low_p, 0.0, dlp)
    d2lp = np.where(low_p, 0.0, d2lp)
    dlq = np.where(low_q, 0.0, dlq)
    d2lq = np.where(low_q, 0.0, d2lq)
    return lp, lq, dlp, dlq, d2lp, d2lq


# ---------------------------------------------------------------------------
# sequential model


def _check_category(z: int, C: int) -> int:
    if int(z) != z or not 1 <= z <= C:
        raise ValueError(f"category {z} outside 1..{C}")
    return int(z)


def expand_observation(z: int, scale: OrdinalScale) -> np.ndarray:
    """Binary responses ``y_1..y_zeta`` with ``zeta = min(z, q)``."""
    z = _check_category(z, scale.C)
    zeta = min(z, scale.q)
    y = np.zeros(zeta, dtype=float)
    if z <= scale.q:
        y[z - 1] = 1.0
    return y


def sequential_to_category_probs(delta) -> np.ndarray:
    """Category probabilities from conditional transition probabilities.

    ``pi_c = delta_c * prod_{j<c} (1 - delta_j)`` for c <= q, and the last
    category takes the remaining survival mass. Works along the last axis.
    """
    delta = np.asarray(delta, dtype=float)
    if delta.shape[-1] < 1:
        raise ValueError("need at least one transition probability")
    if np.any((delta < 0) | (delta > 1)):
        raise ValueError("transition probabilities must lie in [0, 1]")
    surv = np.cumprod(1.0 - delta, axis=-1)
    prev = np.concatenate([np.ones(delta.shape[:-1] + (1,)), surv[..., :-1]], axis=-1)
    return np.concatenate([delta * prev, surv[..., -1:]], axis=-1)


def binary_loglik(z: int, eta, link=Link.CLOGLOG, scale: OrdinalScale | None = None) -> float:
    """Log-likelihood of one ordinal observation from its binary rows.

    ``eta`` must have ``min(z, q)`` entries. When ``scale`` is omitted the
    observation is assumed to be below the top category unless
    ``len(eta) < z``, in which case ``z = C = len(eta) + 1``.
    """
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    if scale is None:
        if len(eta) == z:
            y = np.zeros(z)
            y[-1] = 1.0
        elif len(eta) == z - 1:
            y = np.zeros(z - 1)
        else:
            raise ValueError(f"eta has {len(eta)} entries; category {z} needs {z} or {z - 1}")
    else:
        y = expand_observation(z, scale)
        if len(eta) != len(y):
            raise ValueError(f"eta has {len(eta)} entries, expected {len(y)}")
    lp, lq, *_ = log_prob_terms(eta, link)
    return float(np.sum(y * lp + (1.0 - y) * lq))


# ---------------------------------------------------------------------------
# cumulative / proportional hazards


def cumulative_to_sequential_thresholds(beta_cum) -> np.ndarray:
    """``beta_l = log(exp(bc_l) - exp(bc_{l-1}))`` with ``bc_0 = -inf``."""
    b = np.atleast_1d(np.asarray(beta_cum, dtype=float))
    if np.any(np.diff(b) <= 0):
        raise ValueError("cumulative thresholds must be strictly increasing")
    out = b.copy()
    # log-diff-exp with the larger term factored out
    out[1:] = b[1:] + np.log(-np.expm1(b[:-1] - b[1:]))
    return out


def sequential_to_cumulative_thresholds(beta_seq) -> np.ndarray:
    """``bc_l = log(sum_{m<=l} exp(beta_m))``."""
    b = np.atleast_1d(np.asarray(beta_seq, dtype=float))
    return np.logaddexp.accumulate(b)


def ph_cumulative_prob(l: int, beta_cum, global_effect: float = 0.0) -> float:
    """``P(z <= l) = 1 - exp(-exp(bc_l - global_effect))``."""
    b = np.atleast_1d(np.asarray(beta_cum, dtype=float))
    if int(l) != l or not 1 <= l <= len(b):
        raise ValueError(f"level {l} outside 1..{len(b)}")
    return float(-np.expm1(-np.exp(b[int(l) - 1] - global_effect)))


def ph_category_probs(beta_cum, global_effect: float = 0.0) -> np.ndarray:
    """All ``K`` category probabilities of the cumulative PH model."""
    b = np.atleast_1d(np.asarray(beta_cum, dtype=float))
    gamma = -np.expm1(-np.exp(b - global_effect))
    cum = np.concatenate([[0.0], gamma, [1.0]])
    return np.diff(cum)


def sequential_category_probs(beta_seq, global_effect: float = 0.0, link=Link.CLOGLOG) -> np.ndarray:
    """Category probabilities of the sequential model under global effects,
    ``eta_c = beta_c - global_effect``."""
    b = np.atleast_1d(np.asarray(beta_seq, dtype=float))
    return sequential_to_category_probs(link_inverse(b - global_effect, link))


def collapse_scale(scale: OrdinalScale, partition: Partition, beta_cum) -> tuple[OrdinalScale, np.ndarray]:
    """Collapse a PH model onto the groups of ``partition``.

    The collapsed cumulative thresholds are the original ones at the group
    boundaries; global-effect coefficients carry over unchanged.
    """
    if partition.C != scale.C:
        raise ValueError(f"partition is for {partition.C} categories, scale has {scale.C}")
    b = np.atleast_1d(np.asarray(beta_cum, dtype=float))
    if len(b) != scale.q:
        raise ValueError(f"expected {scale.q} cumulative thresholds, got {len(b)}")
    if np.any(np.diff(b) <= 0):
        raise ValueError("cumulative thresholds must be strictly increasing")
    labels = tuple(
        scale.labels[s[0] - 1] if len(s) == 1 else f"{scale.labels[s[0] - 1]}-{scale.labels[s[-1] - 1]}"
        for s in partition.subsets()
    )
    idx = np.asarray(partition.cutpoints) - 1
    return OrdinalScale(partition.K, labels), b[idx]


def aggregate_probs(pi, partition: Partition) -> np.ndarray:
    """Sum category probabilities within each group of ``partition``."""
    pi = np.asarray(pi, dtype=float)
    return np.array([pi[..., [c - 1 for c in s]].sum(axis=-1) for s in partition.subsets()]).T


def truncated_multinomial_prob(z: int, delta, complement=None) -> float:
    """Probability of category ``z`` as a product of transition terms; the
    reference for :func:`binary_loglik`.

    ``complement`` optionally supplies ``1 - delta`` computed without
    cancellation.
    """
    delta = np.asarray(delta, dtype=float)
    comp = 1.0 - delta if complement is None else np.asarray(complement, dtype=float)
    z = _check_category(z, len(delta) + 1)
    out = float(np.prod(comp[: z - 1]))
    return out * float(delta[z - 1]) if z <= len(delta) else out


__all__: Sequence[str] = [
    "Link",
    "OrdinalScale",
    "Partition",
    "link_eval",
    "link_inverse",
    "log_probs",
    "log_prob_terms",
    "expand_observation",
    "sequential_to_category_probs",
    "binary_loglik",
    "cumulative_to_sequential_thresholds",
    "sequential_to_cumulative_thresholds",
    "ph_cumulative_prob",
    "ph_category_probs",
    "sequential_category_probs",
    "collapse_scale",
    "aggregate_probs",
    "truncated_multinomial_prob",
]
