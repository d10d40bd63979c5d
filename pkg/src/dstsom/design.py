"""Expanded binary design for the sequential ordinal model with global effects.

Each ordinal record with score ``z`` becomes ``min(z, q)`` Bernoulli rows.
Global covariates and the latent field enter every row of a record with a
reversed sign, so larger values push mass towards higher categories.
"""
from __future__ import annotations

import datetime as dt
import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .ordinal import Link, OrdinalScale, expand_observation
from .spacetime import ARParams, KnotSet, PCPrior, PriorKind

ACCESS_FLOOR_KM = 0.001
DAYS_PER_YEAR = 365.0
GLOBAL_COLUMNS = ("ctrl", "d", "year", "forest", "log_access")


class Habitat(str, Enum):
    FOREST = "forest"
    GRASSLAND = "grassland"


class Variant(str, Enum):
    M1 = "M1"  # no latent field
    M2 = "M2"  # one spatial field shared by all years
    M3 = "M3"  # separable Matérn x AR(1)


@dataclass(frozen=True)
class Observation:
    site_id: str
    location: tuple[float, float]
    year: int
    species: str
    score: int
    habitat: Habitat = Habitat.GRASSLAND
    access_km: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "habitat", Habitat(self.habitat))
        object.__setattr__(self, "location", (float(self.location[0]), float(self.location[1])))
        object.__setattr__(self, "access_km", max(float(self.access_km), ACCESS_FLOOR_KM))
        if int(self.score) != self.score:
            raise ValueError(f"score must be an integer category, got {self.score}")
        object.__setattr__(self, "score", int(self.score))
        object.__setattr__(self, "year", int(self.year))


@dataclass(frozen=True)
class ControlEvent:
    species: str
    site_id: str
    date: dt.date


def _default_sigma_prior(C: int) -> PCPrior:
    return PCPrior(PriorKind.SD, 1.0 / (C - 1), 0.05)


@dataclass(frozen=True)
class ModelSpec:
    """Model choices; prior defaults follow the weeds application."""

    scale: OrdinalScale = field(default_factory=lambda: OrdinalScale(5))
    link: Link = Link.CLOGLOG
    variant: Variant = Variant.M3
    sigma_prior: PCPrior | None = None
    range_prior: PCPrior = PCPrior(PriorKind.RANGE2D, 10.0, 0.05)
    rho_prior: PCPrior = PCPrior(PriorKind.COR1, 0.5, 2.0 / 3.0)
    beta_prior_variance: float = 1000.0
    max_knots: int | None = None
    reference_month_day: tuple[int, int] = (7, 1)

    def __post_init__(self):
        object.__setattr__(self, "link", Link(self.link))
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.sigma_prior is None:
            object.__setattr__(self, "sigma_prior", _default_sigma_prior(self.scale.C))
        if not self.beta_prior_variance > 0:
            raise ValueError("coefficient prior variance must be positive")

    @property
    def hyper_names(self) -> tuple[str, ...]:
        return {Variant.M1: (), Variant.M2: ("sigma", "range"), Variant.M3: ("sigma", "range", "rho")}[
            self.variant
        ]

    def reference_date(self, year: int) -> dt.date:
        month, day = self.reference_month_day
        return dt.date(int(year), month, day)

    def to_dict(self) -> dict:
        def prior(p):
            return {"kind": p.kind.value, "u": p.u, "alpha": p.alpha}

        return {
            "C": self.scale.C,
            "labels": list(self.scale.labels),
            "link": self.link.value,
            "variant": self.variant.value,
            "sigma_prior": prior(self.sigma_prior),
            "range_prior": prior(self.range_prior),
            "rho_prior": prior(self.rho_prior),
            "beta_prior_variance": self.beta_prior_variance,
            "max_knots": self.max_knots,
            "reference_month_day": list(self.reference_month_day),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        def prior(p, kind):
            if p is None:
                return None
            return PCPrior(PriorKind(p.get("kind", kind)), float(p["u"]), float(p["alpha"]))

        C = int(d.get("C", 5))
        kw = dict(
            scale=OrdinalScale(C, tuple(d.get("labels") or ())),
            link=Link(d.get("link", "cloglog")),
            variant=Variant(d.get("variant", "M3")),
            sigma_prior=prior(d.get("sigma_prior"), "sd"),
            beta_prior_variance=float(d.get("beta_prior_variance", 1000.0)),
            max_knots=d.get("max_knots"),
            reference_month_day=tuple(d.get("reference_month_day", (7, 1))),
        )
        if d.get("range_prior") is not None:
            kw["range_prior"] = prior(d["range_prior"], "range2d")
        if d.get("rho_prior") is not None:
            kw["rho_prior"] = prior(d["rho_prior"], "cor1")
        return cls(**kw)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def control_covariates(
    obs: Observation, events: Iterable[ControlEvent], reference_date: dt.date | None = None
) -> tuple[int, float]:
    """Exposure flag and years since the last control of ``obs.species`` at
    ``obs.site_id`` strictly before the reference date (1 July by default).

    Without a prior event both values are zero.
    """
    if reference_date is None:
        reference_date = dt.date(obs.year, 7, 1)
    last = None
    for ev in events:
        if ev.species != obs.species or ev.site_id != obs.site_id or ev.date >= reference_date:
            continue
        if last is None or ev.date > last:
            last = ev.date
    if last is None:
        return 0, 0.0
    return 1, (reference_date - last).days / DAYS_PER_YEAR


@dataclass(frozen=True, eq=False)
class ExpandedDesign:
    """Binary response, fixed-effect design and latent incidence.

    ``X`` holds ``q`` cut dummies followed by the (negated) global
    covariates; ``W`` maps the time-major latent vector onto rows.
    """

    y: np.ndarray
    X: np.ndarray
    W: sparse.csr_matrix
    row_obs: np.ndarray
    row_cat: np.ndarray
    scores: np.ndarray
    covariates: np.ndarray  # (J, 5) un-negated global covariates per record
    latent_index: np.ndarray  # (J,) latent column per record, -1 for M1
    knots: KnotSet
    years: np.ndarray  # study years covered by the latent blocks (M3) or all observed years
    year_mid: float
    scale: OrdinalScale
    link: Link
    variant: Variant
    sign_reversal: bool = True

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.scale.q

    @property
    def T(self) -> int:
        """Number of latent time blocks (1 for the spatial-only model)."""
        if self.variant is Variant.M1:
            return 0
        return len(self.years) if self.variant is Variant.M3 else 1

    @property
    def latent_dim(self) -> int:
        return self.W.shape[1]

    @property
    def column_names(self) -> list[str]:
        return [f"cut_{c}" for c in range(1, self.q + 1)] + list(GLOBAL_COLUMNS)

    @property
    def A(self) -> sparse.csr_matrix:
        """Combined map from the joint (beta, u) vector to the predictor."""
        return sparse.hstack([sparse.csr_matrix(self.X), self.W], format="csr")

    def global_rows(self, covariates: np.ndarray) -> np.ndarray:
        """Design rows of global covariates under this design's sign convention."""
        sign = -1.0 if self.sign_reversal else 1.0
        return sign * np.asarray(covariates, dtype=float)


def covariate_vector(E: int, d: float, year: int, year_mid: float, habitat, access_km: float) -> np.ndarray:
    F = 1.0 if Habitat(habitat) is Habitat.FOREST else 0.0
    L = np.log(max(float(access_km), ACCESS_FLOOR_KM))
    return np.array([float(E), float(d), float(year) - year_mid, F, L])


def build_design(
    observations: Sequence[Observation],
    events: Iterable[ControlEvent],
    spec: ModelSpec,
    *,
    knots: KnotSet | None = None,
    years: Sequence[int] | None = None,
    sign_reversal: bool = True,
) -> ExpandedDesign:
    """Expand ordinal records into the binary regression of the sequential model."""
    observations = list(observations)
    events = list(events)
    if not observations:
        raise ValueError("no observations")
    species = {o.species for o in observations}
    if len(species) != 1:
        raise ValueError(f"models are fit one species at a time; got {sorted(species)}")
    scale = spec.scale
    q = scale.q

    site_loc: dict[str, tuple[float, float]] = {}
    for o in observations:
        prev = site_loc.setdefault(o.site_id, o.location)
        if prev != o.location:
            raise ValueError(f"site {o.site_id!r} has two locations {prev} and {o.location}")
        if not 1 <= o.score <= scale.C:
            raise ValueError(f"score {o.score} at site {o.site_id!r} outside 1..{scale.C}")
    for ev in events:
        if ev.species in species and ev.site_id not in site_loc:
            raise ValueError(f"control event at unknown site {ev.site_id!r}")

    obs_years = np.array([o.year for o in observations])
    if years is None:
        years = np.arange(obs_years.min(), obs_years.max() + 1)
    years = np.asarray(years, dtype=int)
    if obs_years.min() < years.min() or obs_years.max() > years.max():
        raise ValueError("observation years fall outside the latent time window")
    year_mid = 0.5 * (years.min() + years.max())

    locs = np.array([o.location for o in observations])
    if knots is None:
        knots = KnotSet.from_points(locs, spec.max_knots)
    # nearest knot; exact when knots are the deduplicated sites
    d2 = ((locs[:, None, :] - knots.locations[None, :, :]) ** 2).sum(axis=-1)
    knot_of = np.argmin(d2, axis=1)

    k = knots.k
    if spec.variant is Variant.M1:
        n_latent = 0
        latent_index = np.full(len(observations), -1)
    elif spec.variant is Variant.M2:
        n_latent = k
        latent_index = knot_of
    else:
        n_latent = k * len(years)
        latent_index = (obs_years - years.min()) * k + knot_of

    by_site: dict[str, list[ControlEvent]] = {}
    for ev in events:
        by_site.setdefault(ev.site_id, []).append(ev)

    sign = -1.0 if sign_reversal else 1.0
    covs = np.empty((len(observations), len(GLOBAL_COLUMNS)))
    ys, rows_x, row_obs, row_cat = [], [], [], []
    for j, o in enumerate(observations):
        E, d = control_covariates(o, by_site.get(o.site_id, ()), spec.reference_date(o.year))
        covs[j] = covariate_vector(E, d, o.year, year_mid, o.habitat, o.access_km)
        yj = expand_observation(o.score, scale)
        for c in range(1, len(yj) + 1):
            x = np.zeros(q + len(GLOBAL_COLUMNS))
            x[c - 1] = 1.0
            x[q:] = sign * covs[j]
            rows_x.append(x)
            row_obs.append(j)
            row_cat.append(c)
        ys.append(yj)

    y = np.concatenate(ys)
    X = np.array(rows_x)
    row_obs = np.array(row_obs)
    row_cat = np.array(row_cat)
    if n_latent:
        W = sparse.csr_matrix(
            (np.full(len(y), sign), (np.arange(len(y)), latent_index[row_obs])), shape=(len(y), n_latent)
        )
    else:
        W = sparse.csr_matrix((len(y), 0))
    return ExpandedDesign(
        y=y,
        X=X,
        W=W,
        row_obs=row_obs,
        row_cat=row_cat,
        scores=np.array([o.score for o in observations]),
        covariates=covs,
        latent_index=latent_index,
        knots=knots,
        years=years,
        year_mid=year_mid,
        scale=scale,
        link=spec.link,
        variant=spec.variant,
        sign_reversal=sign_reversal,
    )


def linear_predictor(design: ExpandedDesign, beta, u=None) -> np.ndarray:
    """``eta = X beta + W u``."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (design.p,):
        raise ValueError(f"beta has shape {beta.shape}, expected ({design.p},)")
    eta = design.X @ beta
    if design.latent_dim:
        if u is None:
            raise ValueError("latent vector required")
        u = np.asarray(u, dtype=float)
        if u.shape != (design.latent_dim,):
            raise ValueError(f"u has shape {u.shape}, expected ({design.latent_dim},)")
        eta = eta + design.W @ u
    elif u is not None and np.size(u):
        raise ValueError("design has no latent field")
    return eta


# ---------------------------------------------------------------------------
# Gompertz reading of the latent field


def accumulate_growth(nu, rho: float) -> np.ndarray:
    """``nu_dot(t) = nu(t) + rho nu_dot(t-1)`` with ``nu_dot(0) = 0``; time on axis 0."""
    nu = np.asarray(nu, dtype=float)
    out = np.empty_like(nu)
    prev = np.zeros(nu.shape[1:])
    for t in range(nu.shape[0]):
        prev = nu[t] + rho * prev
        out[t] = prev
    return out


def intrinsic_growth(nu_dot, rho: float) -> np.ndarray:
    """Inverse of :func:`accumulate_growth`."""
    nu_dot = np.asarray(nu_dot, dtype=float)
    out = nu_dot.copy()
    out[1:] -= rho * nu_dot[:-1]
    return out


@dataclass
class GompertzDecomposition:
    log_size: np.ndarray  # (T, k) log population size
    growth: np.ndarray  # (T, k) intrinsic growth input nu(t)
    cumulative_growth: np.ndarray  # (T, k) nu_dot(t)
    density_dependence: float  # b = rho - 1


def gompertz_decompose(u, beta_global, covariates, ar: ARParams, latent_sign: float = 1.0) -> GompertzDecomposition:
    """Split the latent trajectories into log population size and growth.

    Parameters
    ----------
    u : (T, k) latent field; pass ``latent_sign=-1`` for a field estimated
        without sign reversal on the random effects.
    beta_global : (m,) global coefficients.
    covariates : (T, k, m) global covariates at each knot and time.
    """
    if not isinstance(ar, ARParams):
        ar = ARParams(float(ar))
    u = np.asarray(u, dtype=float)
    cov = np.asarray(covariates, dtype=float)
    if u.ndim != 2 or cov.shape[:2] != u.shape:
        raise ValueError(f"covariates {cov.shape} do not cover the latent grid {u.shape}")
    if not np.all(np.isfinite(u)) or not np.all(np.isfinite(cov)):
        raise ValueError("missing time steps in latent trajectories or covariates")
    nu_dot = cov @ np.asarray(beta_global, dtype=float)
    return GompertzDecomposition(
        log_size=latent_sign * u + nu_dot,
        growth=intrinsic_growth(nu_dot, ar.rho),
        cumulative_growth=nu_dot,
        density_dependence=ar.rho - 1.0,
    )
