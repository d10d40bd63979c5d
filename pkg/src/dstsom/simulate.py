"""Synthetic datasets from a known ground truth, and a quadrature oracle for
the Laplace marginal likelihood."""
from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .design import (
    GLOBAL_COLUMNS,
    ControlEvent,
    Habitat,
    Observation,
    control_covariates,
    covariate_vector,
)
from .inference import LatentGaussianProblem
from .ordinal import Link, OrdinalScale, link_inverse, log_probs
from .spacetime import ARParams, KnotSet, MaternParams, build_H


@dataclass
class GroundTruth:
    matern: MaternParams
    ar: ARParams
    beta_cut: np.ndarray
    beta_global: np.ndarray  # ctrl, d, year, forest, log_access
    knots: KnotSet
    scale: OrdinalScale = field(default_factory=lambda: OrdinalScale(5))
    link: Link = Link.CLOGLOG
    p_forest: float = 0.4
    access_logmean: float = math.log(0.3)
    access_logsd: float = 1.0
    p_control: float = 0.15
    species: str = "sim"
    seed: int = 0

    def __post_init__(self):
        self.beta_cut = np.asarray(self.beta_cut, dtype=float)
        self.beta_global = np.asarray(self.beta_global, dtype=float)
        if len(self.beta_cut) != self.scale.q:
            raise ValueError(f"need {self.scale.q} cut coefficients, got {len(self.beta_cut)}")
        if len(self.beta_global) != len(GLOBAL_COLUMNS):
            raise ValueError(f"need {len(GLOBAL_COLUMNS)} global coefficients")
        self.link = Link(self.link)

    @classmethod
    def random_sites(
        cls, n_sites: int, extent_km: float, rng: np.random.Generator | int = 0, **kw
    ) -> "GroundTruth":
        rng = np.random.default_rng(rng)
        knots = KnotSet(rng.uniform(0.0, extent_km, size=(n_sites, 2)))
        return cls(knots=knots, **kw)

    def to_dict(self) -> dict:
        return {
            "sigma": self.matern.sigma,
            "range": self.matern.range,
            "rho": self.ar.rho,
            "beta_cut": self.beta_cut.tolist(),
            "beta_global": dict(zip(GLOBAL_COLUMNS, self.beta_global.tolist())),
            "knots": self.knots.locations.tolist(),
            "C": self.scale.C,
            "link": self.link.value,
            "p_forest": self.p_forest,
            "access_logmean": self.access_logmean,
            "access_logsd": self.access_logsd,
            "p_control": self.p_control,
            "species": self.species,
            "seed": self.seed,
        }


def simulate_field(truth: GroundTruth, T: int, rng: np.random.Generator | int | None = None) -> np.ndarray:
    """Latent AR(1) trajectories ``(T, k)`` started from the stationary law."""
    rng = np.random.default_rng(truth.seed if rng is None else rng)
    _, L = build_H(truth.knots, truth.matern, return_cholesky=True)
    rho = truth.ar.rho
    k = truth.knots.k
    u = np.empty((T, k))
    u[0] = L @ rng.standard_normal(k) / math.sqrt(1.0 - rho**2)
    for t in range(1, T):
        u[t] = rho * u[t - 1] + L @ rng.standard_normal(k)
    return u


def sample_sequential(delta, rng: np.random.Generator) -> np.ndarray:
    """Draw categories by sequential coin flips: stop at ``c`` with
    probability ``delta_c``, otherwise continue; survivors land in ``C``."""
    delta = np.atleast_2d(delta)
    stop = rng.random(delta.shape) < delta
    first = np.argmax(stop, axis=1)
    return np.where(stop.any(axis=1), first + 1, delta.shape[1] + 1)


@dataclass
class SimulatedData:
    observations: list[Observation]
    controls: list[ControlEvent]
    field: np.ndarray  # (T, k)
    years: np.ndarray
    truth: GroundTruth
    site_ids: list[str]


def _random_date(year: int, rng) -> dt.date:
    start = dt.date(year, 1, 1)
    ndays = (dt.date(year + 1, 1, 1) - start).days
    return start + dt.timedelta(days=int(rng.integers(ndays)))


def simulate_dataset(truth: GroundTruth, years, n_obs: int, rng: np.random.Generator | int | None = None) -> SimulatedData:
    """Ordinal records at the truth's knots as sites, spread evenly over
    site-years in random order."""
    rng = np.random.default_rng(truth.seed if rng is None else rng)
    years = np.asarray(years, dtype=int)
    T = len(years)
    k = truth.knots.k
    u = simulate_field(truth, T, rng)
    site_ids = [f"S{i + 1:03d}" for i in range(k)]
    forest = rng.random(k) < truth.p_forest
    access = np.exp(truth.access_logmean + truth.access_logsd * rng.standard_normal(k))

    controls = []
    for i, sid in enumerate(site_ids):
        for year in range(years.min() - 1, years.max() + 1):
            if rng.random() < truth.p_control:
                controls.append(ControlEvent(truth.species, sid, _random_date(year, rng)))

    n_cells = k * T
    cells = np.tile(np.arange(n_cells), n_obs // n_cells + 1)[:n_obs]
    cells = rng.permutation(cells)
    year_mid = 0.5 * (years.min() + years.max())

    by_site: dict[str, list[ControlEvent]] = {}
    for ev in controls:
        by_site.setdefault(ev.site_id, []).append(ev)

    observations = []
    etas = np.empty((n_obs, truth.scale.q))
    for j, cell in enumerate(cells):
        t, i = divmod(int(cell), k)
        sid = site_ids[i]
        o = Observation(
            sid,
            tuple(truth.knots.locations[i]),
            int(years[t]),
            truth.species,
            1,
            Habitat.FOREST if forest[i] else Habitat.GRASSLAND,
            float(access[i]),
        )
        E, d = control_covariates(o, by_site.get(sid, ()), dt.date(int(years[t]), 7, 1))
        x = covariate_vector(E, d, o.year, year_mid, o.habitat, o.access_km)
        etas[j] = truth.beta_cut - x @ truth.beta_global - u[t, i]
        observations.append(o)
    scores = sample_sequential(link_inverse(etas, truth.link), rng)
    observations = [
        Observation(o.site_id, o.location, o.year, o.species, int(z), o.habitat, o.access_km)
        for o, z in zip(observations, scores)
    ]
    return SimulatedData(observations, controls, u, years, truth, site_ids)


# ---------------------------------------------------------------------------
# quadrature oracle


def _grouped_rows(problem: LatentGaussianProblem):
    """Distinct ``(A row, y)`` pairs with their multiplicities."""
    if problem.loglik is not None or not len(problem.y):
        return problem.A, problem.y, np.ones(len(problem.y))
    M = np.hstack([problem.A.toarray(), problem.y[:, None]])
    uniq, counts = np.unique(M, axis=0, return_counts=True)
    return uniq[:, :-1], uniq[:, -1], counts.astype(float)


def _neg_log_joint_values(problem: LatentGaussianProblem, thetas: np.ndarray, chunk: int = 4096, rows=None) -> np.ndarray:
    """Negative log joint at many points ``(N, m)``; values only."""
    A, yv, mult = rows if rows is not None else (problem.A, problem.y, np.ones(len(problem.y)))
    m = problem.dim
    quad = 0.5 * np.einsum("ni,ij,nj->n", thetas, problem.Q, thetas)
    out = quad - 0.5 * problem.logdet_Q + 0.5 * m * math.log(2.0 * math.pi)
    if len(yv):
        y = np.asarray(yv)[:, None]
        for start in range(0, len(thetas), chunk):
            sl = slice(start, start + chunk)
            eta = np.asarray(A @ thetas[sl].T)  # (n, chunk)
            if problem.loglik is not None:
                ll = problem.loglik(eta, y)[0]
            else:
                lp, lq = log_probs(eta, problem.link)
                ll = np.where(y > 0, lp, lq)
            out[sl] -= mult @ ll
    return out


def brute_marginal(problem: LatentGaussianProblem, *, width: float = 12.0, tol: float = 1e-10, max_order: int = 512) -> float:
    """``log p(y)`` by tensor Gauss-Legendre quadrature over a latent vector
    of dimension at most two.

    The box is centred on a numerically located maximum, aligned with the
    curvature there, and spans ``width`` standard deviations either side.
    The rule order doubles until successive values agree to ``tol``.
    """
    m = problem.dim
    if m > 2:
        raise ValueError(f"quadrature oracle handles at most 2 latent dimensions, got {m}")

    rows = _grouped_rows(problem)

    def f(theta):
        return float(_neg_log_joint_values(problem, np.atleast_2d(theta), rows=rows)[0])

    if m == 0:
        return -f(np.zeros(0))
    res = optimize.minimize(f, np.zeros(m), method="Nelder-Mead", options=dict(xatol=1e-10, fatol=1e-14))
    centre = res.x
    f0 = f(centre)
    h = 1e-4
    E = np.eye(m)
    Hs = np.empty((m, m))
    for i in range(m):
        for j in range(m):
            Hs[i, j] = (
                f(centre + h * E[i] + h * E[j])
                - f(centre + h * E[i] - h * E[j])
                - f(centre - h * E[i] + h * E[j])
                + f(centre - h * E[i] - h * E[j])
            ) / (4 * h * h)
    evals, V = np.linalg.eigh(0.5 * (Hs + Hs.T))
    scale = V / np.sqrt(np.maximum(evals, 1e-12))  # columns: axes in sd units

    def integral(order):
        x, w = np.polynomial.legendre.leggauss(order)
        x, w = width * x, width * w
        grids = np.meshgrid(*([x] * m), indexing="ij")
        Z = np.stack([g.ravel() for g in grids], axis=1)
        W = np.prod(np.meshgrid(*([w] * m), indexing="ij"), axis=0).ravel()
        vals = _neg_log_joint_values(problem, centre + Z @ scale.T, rows=rows)
        return float(np.sum(W * np.exp(f0 - vals)))

    order = 64
    prev = integral(order)
    while True:
        order *= 2
        cur = integral(order)
        if abs(cur - prev) <= tol * abs(cur) or order >= max_order:
            break
        prev = cur
    return math.log(cur) + math.log(abs(np.linalg.det(scale))) - f0
