"""Matérn x AR(1) separable covariance and penalised-complexity priors."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import linalg, optimize, special
from scipy.spatial.distance import cdist, pdist, squareform

MATERN_ORDER = 1.0
JITTER = 1e-8
MAX_JITTER = 1e-4


@dataclass(frozen=True)
class MaternParams:
    sigma: float
    range: float
    order: float = MATERN_ORDER

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not self.range > 0:
            raise ValueError(f"range must be positive, got {self.range}")
        if self.order != MATERN_ORDER:
            raise ValueError("only the order-1 Matérn covariance is supported")

    @property
    def theta(self) -> float:
        return math.sqrt(8.0 * self.order) / self.range


@dataclass(frozen=True)
class ARParams:
    rho: float

    def __post_init__(self):
        if not -1.0 < self.rho < 1.0:
            raise ValueError(f"AR(1) coefficient must lie in (-1, 1), got {self.rho}")


@dataclass(frozen=True)
class KnotSet:
    """Latent-field support points, ``(k, 2)`` coordinates in kilometres."""

    locations: np.ndarray = field(repr=False)

    def __post_init__(self):
        loc = np.atleast_2d(np.asarray(self.locations, dtype=float))
        if loc.ndim != 2 or loc.shape[1] != 2 or loc.shape[0] < 1:
            raise ValueError("knots must be a non-empty (k, 2) array")
        if loc.shape[0] > 1 and np.min(pdist(loc)) == 0.0:
            raise ValueError("knot locations must be pairwise distinct")
        loc.setflags(write=False)
        object.__setattr__(self, "locations", loc)

    @property
    def k(self) -> int:
        return self.locations.shape[0]

    def __len__(self):
        return self.k

    @classmethod
    def from_points(cls, points, max_knots: int | None = None) -> "KnotSet":
        """Deduplicate ``points``; thin to ``max_knots`` by farthest-point
        selection when requested."""
        pts = np.unique(np.asarray(points, dtype=float), axis=0)
        if max_knots is not None and len(pts) > max_knots:
            pts = pts[farthest_point_subset(pts, max_knots)]
        return cls(pts)


def farthest_point_subset(points, m: int) -> np.ndarray:
    """Indices of ``m`` points chosen greedily to maximise the minimum
    spacing, seeded with the point closest to the centroid."""
    points = np.asarray(points, dtype=float)
    first = int(np.argmin(np.sum((points - points.mean(axis=0)) ** 2, axis=1)))
    chosen = [first]
    dmin = np.linalg.norm(points - points[first], axis=1)
    for _ in range(1, m):
        nxt = int(np.argmax(dmin))
        chosen.append(nxt)
        dmin = np.minimum(dmin, np.linalg.norm(points - points[nxt], axis=1))
    return np.sort(np.array(chosen))


def matern_cov(dist, params: MaternParams):
    """Order-one Matérn covariance ``sigma^2 (theta d) K_1(theta d)``."""
    d = np.asarray(dist, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    x = params.theta * d
    with np.errstate(invalid="ignore", over="ignore"):
        corr = np.where(x > 0, x * special.kv(1.0, np.where(x > 0, x, 1.0)), 1.0)
    # kv underflows to 0 far out; x*0 is fine, but guard nan from inf*0
    corr = np.nan_to_num(corr, nan=0.0)
    out = params.sigma**2 * corr
    return out if out.ndim else float(out)


def _cholesky_with_jitter(H: np.ndarray, scale: float) -> tuple[np.ndarray, np.ndarray]:
    jitter = JITTER
    while True:
        Hj = H + jitter * scale * np.eye(H.shape[0])
        try:
            return Hj, linalg.cholesky(Hj, lower=True)
        except linalg.LinAlgError:
            jitter *= 10.0
            if jitter > MAX_JITTER * (1 + 1e-9):
                raise linalg.LinAlgError(
                    "spatial covariance is not positive definite even with "
                    f"{MAX_JITTER:g} relative jitter; knots are nearly coincident"
                )


def build_H(knots: KnotSet, params: MaternParams, *, return_cholesky: bool = False):
    """Spatial covariance among knots with relative diagonal jitter 1e-8,
    escalated tenfold up to 1e-4 if the Cholesky factorisation fails."""
    loc = knots.locations if isinstance(knots, KnotSet) else np.asarray(knots, dtype=float)
    H = matern_cov(squareform(pdist(loc)), params)
    H = np.atleast_2d(H)
    H, L = _cholesky_with_jitter(H, params.sigma**2)
    if return_cholesky:
        return H, L
    return H


def cross_cov(a, b, params: MaternParams) -> np.ndarray:
    return matern_cov(cdist(np.atleast_2d(a), np.atleast_2d(b)), params)


def stationary_cov(H, ar: ARParams) -> np.ndarray:
    """Stationary covariance of the AR(1) field, ``H / (1 - rho^2)``."""
    if not isinstance(ar, ARParams):
        ar = ARParams(float(ar))
    return np.asarray(H, dtype=float) / (1.0 - ar.rho**2)


def ar1_correlation(T: int, rho: float) -> np.ndarray:
    idx = np.arange(T)
    return rho ** np.abs(idx[:, None] - idx[None, :]).astype(float)


def ar1_precision(T: int, rho: float) -> np.ndarray:
    """Inverse of ``R_T / (1 - rho^2)`` where ``R_T`` is the AR(1)
    correlation matrix: tridiagonal with ``-rho`` off the diagonal."""
    if T == 1:
        return np.array([[1.0 - rho**2]])
    Q = np.diag(np.full(T, 1.0 + rho**2))
    Q[0, 0] = Q[-1, -1] = 1.0
    i = np.arange(T - 1)
    Q[i, i + 1] = Q[i + 1, i] = -rho
    return Q


def joint_spacetime_cov(knots: KnotSet, T: int, matern: MaternParams, ar: ARParams) -> np.ndarray:
    """Covariance of ``(u(1), ..., u(T))`` stacked time-major; block
    ``(t, t')`` is ``rho^|t-t'| H / (1 - rho^2)``."""
    if T < 1:
        raise ValueError("need at least one time step")
    if not isinstance(ar, ARParams):
        ar = ARParams(float(ar))
    H = build_H(knots, matern)
    return np.kron(ar1_correlation(T, ar.rho), stationary_cov(H, ar))


# ---------------------------------------------------------------------------
# PC priors


class PriorKind(str, Enum):
    SD = "sd"
    RANGE2D = "range2d"
    COR1 = "cor1"


@dataclass(frozen=True)
class PCPrior:
    """Penalised-complexity prior given by a tail statement.

    * ``sd``: ``P(sigma > u) = alpha``
    * ``range2d``: ``P(range < u) = alpha``
    * ``cor1``: ``P(rho > u) = alpha`` with base model ``rho = 1``
    """

    kind: PriorKind
    u: float
    alpha: float

    def __post_init__(self):
        kind = PriorKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if kind is PriorKind.COR1:
            if not -1.0 < self.u < 1.0:
                raise ValueError("cor1 threshold must lie in (-1, 1)")
            lo = math.sqrt((1.0 - self.u) / 2.0)
            if not self.alpha > lo:
                raise ValueError(f"P(rho > {self.u}) must exceed {lo:.4f} for a base-rho=1 PC prior")
        elif not self.u > 0:
            raise ValueError(f"{kind.value} threshold must be positive")

    @property
    def rate(self) -> float:
        if self.kind is PriorKind.SD:
            return -math.log(self.alpha) / self.u
        if self.kind is PriorKind.RANGE2D:
            return -math.log(self.alpha) * self.u
        return _cor1_rate(self.u, self.alpha)


def _cor1_tail(lam: float, u: float) -> float:
    # P(rho > u) = (1 - exp(-lam sqrt(1-u))) / (1 - exp(-lam sqrt 2))
    return math.expm1(-lam * math.sqrt(1.0 - u)) / math.expm1(-lam * math.sqrt(2.0))


def _cor1_rate(u: float, alpha: float) -> float:
    hi = 1.0
    while _cor1_tail(hi, u) < alpha:
        hi *= 2.0
    return optimize.brentq(lambda lam: _cor1_tail(lam, u) - alpha, 1e-12, hi, xtol=1e-14, rtol=1e-14)


def pc_log_density(value: float, prior: PCPrior) -> float:
    """Log density of a PC prior on its natural scale."""
    lam = prior.rate
    if prior.kind is PriorKind.SD:
        if not value > 0:
            raise ValueError("sd prior support is (0, inf)")
        return math.log(lam) - lam * value
    if prior.kind is PriorKind.RANGE2D:
        if not value > 0:
            raise ValueError("range prior support is (0, inf)")
        return math.log(lam) - 2.0 * math.log(value) - lam / value
    if not -1.0 < value < 1.0:
        raise ValueError("correlation prior support is (-1, 1)")
    s = math.sqrt(1.0 - value)
    logZ = math.log(-math.expm1(-lam * math.sqrt(2.0)))
    return math.log(lam) - lam * s - math.log(2.0 * s) - logZ
