"""Laplace-approximation engine for the latent Gaussian ordinal model.

The latent vector is the joint ``(beta, u)``. At fixed hyperparameters the
conditional posterior is approximated by a Gaussian at its mode; the
hyperparameters are integrated on a grid around their posterior mode.
"""
from __future__ import annotations

import itertools
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import linalg, optimize, sparse, special
from scipy.spatial.distance import cdist, pdist, squareform

from .design import ExpandedDesign, ModelSpec, Variant
from .ordinal import Link, link_inverse, log_prob_terms, log_probs, sequential_to_category_probs
from .spacetime import (
    ARParams,
    MaternParams,
    ar1_precision,
    build_H,
    cross_cov,
    pc_log_density,
)

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
STALL_DECREMENT = 1e-6


class ConvergenceError(RuntimeError):
    """Newton iterations or the hyperparameter search failed."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# ---------------------------------------------------------------------------
# generic latent Gaussian problem


@dataclass
class LatentGaussianProblem:
    """Bernoulli rows ``y`` with predictor ``A theta`` and prior
    ``theta ~ N(0, Q^-1)``.

    ``loglik`` may replace the Bernoulli likelihood; it maps ``(eta, y)`` to
    per-row log-likelihood, first and second derivative in ``eta``.
    """

    y: np.ndarray
    A: sparse.csr_matrix
    Q: np.ndarray
    logdet_Q: float
    link: Link = Link.CLOGLOG
    loglik: Callable | None = None
    _AT: sparse.csr_matrix | None = field(default=None, repr=False)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        if not sparse.issparse(self.A):
            self.A = sparse.csr_matrix(np.asarray(self.A, dtype=float).reshape(len(self.y), self.Q.shape[0]))
        if self.A.shape[1] != self.Q.shape[0]:
            raise ValueError(f"A has {self.A.shape[1]} columns, prior has dimension {self.Q.shape[0]}")
        self._AT = self.A.T.tocsr()

    @property
    def dim(self) -> int:
        return self.Q.shape[0]

    def row_terms(self, eta):
        if self.loglik is not None:
            return self.loglik(eta, self.y)
        lp, lq, dlp, dlq, d2lp, d2lq = log_prob_terms(eta, self.link)
        y = self.y
        return y * lp + (1 - y) * lq, y * dlp + (1 - y) * dlq, y * d2lp + (1 - y) * d2lq

    def fisher_weights(self, eta):
        if self.loglik is not None:
            return -self.row_terms(eta)[2]
        _, _, dlp, dlq, _, _ = log_prob_terms(eta, self.link)
        return -dlp * dlq

    def loglik_value(self, theta) -> float:
        if len(self.y) == 0:
            return 0.0
        return float(np.sum(self.row_terms(self.A @ theta)[0]))


def neg_log_joint(theta, problem: LatentGaussianProblem, *, fisher: bool = False):
    """Negative log of ``p(y | theta) p(theta)`` with gradient and Hessian.

    The Hessian uses the observed curvature of the likelihood unless
    ``fisher`` is set, in which case the expected information is used.
    """
    theta = np.asarray(theta, dtype=float)
    m = problem.dim
    Qt = problem.Q @ theta
    value = 0.5 * theta @ Qt - 0.5 * problem.logdet_Q + 0.5 * m * LOG_2PI
    grad = Qt.copy()
    hess = problem.Q.copy()
    if len(problem.y):
        eta = problem.A @ theta
        ll, d1, d2 = problem.row_terms(eta)
        value -= float(np.sum(ll))
        grad -= problem._AT @ d1
        w = problem.fisher_weights(eta) if fisher else -d2
        hess += (problem._AT @ problem.A.multiply(w[:, None])).toarray()
    return float(value), grad, hess


@dataclass
class GaussianApprox:
    mode: np.ndarray
    chol: np.ndarray  # lower Cholesky factor of the precision at the mode
    logdet: float  # log-determinant of the precision
    value: float  # negative log joint at the mode
    converged: bool
    iterations: int
    fisher: bool = False

    @property
    def dim(self) -> int:
        return len(self.mode)

    def marginal_variances(self, idx=None) -> np.ndarray:
        m = self.dim
        idx = np.arange(m) if idx is None else np.asarray(idx)
        E = np.zeros((m, len(idx)))
        E[idx, np.arange(len(idx))] = 1.0
        Z = linalg.solve_triangular(self.chol, E, lower=True)
        return np.sum(Z**2, axis=0)

    def covariance(self) -> np.ndarray:
        return linalg.cho_solve((self.chol, True), np.eye(self.dim))


def _cholesky(H):
    try:
        return linalg.cholesky(H, lower=True)
    except linalg.LinAlgError:
        return None


def find_mode(
    problem: LatentGaussianProblem, init=None, *, tol: float = 1e-8, max_iter: int = 100
) -> GaussianApprox:
    """Damped Newton ascent on the conditional posterior of the latent vector.

    Converges when the Newton decrement ``sqrt(g' H^-1 g)`` drops below
    ``tol``. Steps are halved until the objective decreases.
    """
    m = problem.dim
    theta = np.zeros(m) if init is None else np.array(init, dtype=float)
    if m == 0:
        value, _, _ = neg_log_joint(theta, problem)
        return GaussianApprox(theta, np.zeros((0, 0)), 0.0, value, True, 0)
    fisher = False
    value, grad, hess = neg_log_joint(theta, problem)
    decrement = np.inf
    for it in range(1, max_iter + 1):
        previous = decrement
        L = _cholesky(hess)
        if L is None:
            fisher = True
            value, grad, hess = neg_log_joint(theta, problem, fisher=True)
            L = _cholesky(hess)
            if L is None:
                raise ConvergenceError("precision not positive definite", {"iteration": it})
        step = -linalg.cho_solve((L, True), grad)
        decrement = math.sqrt(max(-(grad @ step), 0.0))
        # below 1e-6 a decrement that stops shrinking is at the roundoff floor
        if decrement < tol or (decrement < STALL_DECREMENT and decrement > 0.5 * previous):
            break
        t = 1.0
        for _ in range(60):
            cand = theta + t * step
            new_value, new_grad, new_hess = neg_log_joint(cand, problem, fisher=fisher)
            if np.isfinite(new_value) and new_value <= value + 1e-4 * t * (grad @ step):
                break
            t *= 0.5
        else:
            # no decrease at machine precision: accept when already at the floor
            if decrement < STALL_DECREMENT:
                break
            raise ConvergenceError(
                "line search failed", {"iteration": it, "decrement": decrement, "value": value}
            )
        theta, value, grad, hess = cand, new_value, new_grad, new_hess
    else:
        raise ConvergenceError(
            f"Newton iterations did not converge in {max_iter} steps",
            {"decrement": decrement, "value": value},
        )
    value, grad, hess = neg_log_joint(theta, problem)
    L = _cholesky(hess)
    if L is None:
        fisher = True
        value, grad, hess = neg_log_joint(theta, problem, fisher=True)
        L = _cholesky(hess)
        if L is None:
            raise ConvergenceError("precision at the mode is not positive definite")
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return GaussianApprox(theta, L, logdet, value, True, it, fisher)


def log_laplace_marginal(problem: LatentGaussianProblem, approx: GaussianApprox | None = None) -> float:
    """Laplace approximation of ``log p(y)`` for a latent Gaussian problem."""
    if approx is None:
        approx = find_mode(problem)
    return -approx.value + 0.5 * approx.dim * LOG_2PI - 0.5 * approx.logdet


# ---------------------------------------------------------------------------
# hyperparameters


@dataclass(frozen=True)
class Hyperparameters:
    sigma: float | None = None
    range: float | None = None
    rho: float | None = None

    def names(self) -> tuple[str, ...]:
        return tuple(n for n in ("sigma", "range", "rho") if getattr(self, n) is not None)

    def to_internal(self) -> np.ndarray:
        out = []
        if self.sigma is not None:
            out.append(math.log(self.sigma))
        if self.range is not None:
            out.append(math.log(self.range))
        if self.rho is not None:
            out.append(special.logit((self.rho + 1.0) / 2.0))
        return np.array(out)

    @classmethod
    def from_internal(cls, x, names: Sequence[str]) -> "Hyperparameters":
        kw = {}
        for n, v in zip(names, np.asarray(x, dtype=float)):
            if n == "rho":
                kw[n] = float(2.0 * special.expit(v) - 1.0)
            else:
                kw[n] = float(math.exp(v))
        return cls(**kw)

    def log_jacobian(self) -> float:
        """``log |d natural / d internal|``."""
        out = 0.0
        if self.sigma is not None:
            out += math.log(self.sigma)
        if self.range is not None:
            out += math.log(self.range)
        if self.rho is not None:
            out += math.log((1.0 - self.rho**2) / 2.0)
        return out


def log_prior_internal(hyper: Hyperparameters, spec: ModelSpec) -> float:
    out = hyper.log_jacobian()
    if hyper.sigma is not None:
        out += pc_log_density(hyper.sigma, spec.sigma_prior)
    if hyper.range is not None:
        out += pc_log_density(hyper.range, spec.range_prior)
    if hyper.rho is not None:
        out += pc_log_density(hyper.rho, spec.rho_prior)
    return out


class Model:
    """Binds a design and a spec; builds latent Gaussian problems per
    hyperparameter value."""

    def __init__(self, design: ExpandedDesign, spec: ModelSpec):
        if design.variant is not spec.variant:
            raise ValueError("design and spec disagree on the model variant")
        self.design = design
        self.spec = spec
        self.A = design.A
        self.p = design.p
        self.dist = squareform(pdist(design.knots.locations))
        self._last_mode: np.ndarray | None = None

    @property
    def hyper_names(self) -> tuple[str, ...]:
        return self.spec.hyper_names

    @property
    def dim(self) -> int:
        return self.p + self.design.latent_dim

    def field_precision(self, hyper: Hyperparameters):
        """Prior precision of the latent field and its log-determinant."""
        variant = self.design.variant
        if variant is Variant.M1:
            return np.zeros((0, 0)), 0.0
        H, L = build_H(self.design.knots, MaternParams(hyper.sigma, hyper.range), return_cholesky=True)
        Hinv = linalg.cho_solve((L, True), np.eye(len(H)))
        logdet_H = 2.0 * float(np.sum(np.log(np.diag(L))))
        if variant is Variant.M2:
            return Hinv, -logdet_H
        T, k = self.design.T, len(H)
        rho = ARParams(hyper.rho).rho
        Q = np.kron(ar1_precision(T, rho), Hinv)
        return Q, -(T * logdet_H - k * math.log1p(-rho**2))

    def problem(self, hyper: Hyperparameters) -> LatentGaussianProblem:
        Qu, logdet_u = self.field_precision(hyper)
        m = self.dim
        Q = np.zeros((m, m))
        v = self.spec.beta_prior_variance
        Q[np.arange(self.p), np.arange(self.p)] = 1.0 / v
        Q[self.p :, self.p :] = Qu
        logdet = logdet_u - self.p * math.log(v)
        return LatentGaussianProblem(self.design.y, self.A, Q, logdet, self.design.link)

    def laplace(self, hyper: Hyperparameters, init=None):
        problem = self.problem(hyper)
        approx = find_mode(problem, init if init is not None else self._last_mode)
        return approx, log_laplace_marginal(problem, approx)

    def log_posterior(self, x, *, warm: bool = True) -> tuple[float, GaussianApprox | None]:
        """Unnormalised log posterior of the internal hyperparameters."""
        try:
            hyper = Hyperparameters.from_internal(x, self.hyper_names)
            approx, lml = self.laplace(hyper)
        except (ConvergenceError, linalg.LinAlgError, ValueError) as exc:
            log.debug("hyperparameter point %s rejected: %s", x, exc)
            return -np.inf, None
        if warm:
            self._last_mode = approx.mode
        return lml + log_prior_internal(hyper, self.spec), approx


# ---------------------------------------------------------------------------
# fitting


@dataclass(frozen=True)
class GridConfig:
    z: tuple[float, ...] = (-2.0, -1.0, 0.0, 1.0, 2.0)
    fd_step: float = 0.05
    nm_xatol: float = 1e-3
    nm_fatol: float = 1e-4
    nm_maxiter: int = 600
    prune: float = 1e-10  # drop grid points below this fraction of the largest weight
    dic_nodes: int = 40  # Gauss-Hermite nodes for the expected deviance; 0 skips DIC
    threads: int = 1


@dataclass
class FitResult:
    spec: ModelSpec
    hyper_names: tuple[str, ...]
    grid_internal: np.ndarray  # (G, h)
    log_post: np.ndarray  # (G,)
    weights: np.ndarray  # (G,)
    approxs: list[GaussianApprox]
    hyper_mode: np.ndarray  # internal coordinates
    hyper_cov: np.ndarray  # Gaussian summary of the hyperparameter posterior (internal)
    column_names: list[str]
    summary: list[tuple[str, float, float, float]]
    seed: int
    spec_hash: str
    dic: "DICResult | None" = None
    # design facts needed to predict without the design itself
    knots: np.ndarray | None = None
    years: np.ndarray | None = None
    year_mid: float = 0.0
    sign_reversal: bool = True

    @property
    def p(self) -> int:
        return len(self.column_names)

    @property
    def variant(self) -> Variant:
        return self.spec.variant

    def hyper(self, g: int) -> Hyperparameters:
        return Hyperparameters.from_internal(self.grid_internal[g], self.hyper_names)

    def mean(self) -> np.ndarray:
        return np.einsum("g,gm->m", self.weights, np.array([a.mode for a in self.approxs]))

    def summary_table(self) -> dict[str, tuple[float, float, float]]:
        return {name: (lo, mid, hi) for name, lo, mid, hi in self.summary}


def _fd_hessian(f, x, h):
    n = len(x)
    H = np.zeros((n, n))
    f0 = f(x)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h
        H[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / h**2
        for j in range(i):
            ej = np.zeros(n)
            ej[j] = h
            H[i, j] = H[j, i] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * h * h)
    return H


def _positive_definite(H, floor=1e-6):
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    w = np.maximum(np.abs(w), floor)
    return (V * w) @ V.T


def _mixture_quantiles(means, sds, weights, probs):
    """Quantiles of a one-dimensional Gaussian mixture."""
    means = np.asarray(means)
    sds = np.maximum(np.asarray(sds), 1e-300)
    if len(means) == 1:
        return [float(means[0] + sds[0] * special.ndtri(p)) for p in probs]

    def cdf(x):
        return float(np.sum(weights * special.ndtr((x - means) / sds)))

    lo = float(np.min(means - 10 * sds))
    hi = float(np.max(means + 10 * sds))
    return [optimize.brentq(lambda x: cdf(x) - p, lo, hi, xtol=1e-12, rtol=1e-12) for p in probs]


def _hyper_gaussian(zs, lp, mode, Tmat, fallback_cov):
    """Gaussian summary of the hyperparameter posterior from a quadratic fit
    of the grid log posterior in standardised coordinates."""
    h = zs.shape[1]
    if h == 0:
        return mode, fallback_cov
    iu = np.triu_indices(h)
    feats = [np.ones(len(zs))] + [zs[:, i] for i in range(h)]
    feats += [zs[:, i] * zs[:, j] * (0.5 if i == j else 1.0) for i, j in zip(*iu)]
    F = np.column_stack(feats)
    ok = np.isfinite(lp)
    wts = np.exp(0.5 * (lp[ok] - lp[ok].max()))
    coef, *_ = np.linalg.lstsq(F[ok] * wts[:, None], lp[ok] * wts, rcond=None)
    b = coef[1 : 1 + h]
    P = np.zeros((h, h))
    P[iu] = coef[1 + h :]
    P = -(P + P.T - np.diag(np.diag(P)))
    try:
        np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        return mode, fallback_cov
    Sz = np.linalg.inv(P)
    mz = Sz @ b
    return mode + Tmat @ mz, Tmat @ Sz @ Tmat.T


def fit(
    design: ExpandedDesign,
    spec: ModelSpec,
    grid: GridConfig = GridConfig(),
    *,
    seed: int = 0,
    init: Hyperparameters | None = None,
    fixed_hyper: Hyperparameters | None = None,
) -> FitResult:
    """Posterior approximation over hyperparameters and latent effects.

    With ``fixed_hyper`` the hyperparameters are held at that value (a
    one-point grid).
    """
    model = Model(design, spec)
    names = model.hyper_names
    h = len(names)

    if h == 0 or fixed_hyper is not None:
        x = fixed_hyper.to_internal() if (fixed_hyper is not None and h) else np.zeros(0)
        lp, approx = model.log_posterior(x)
        if approx is None:
            raise ConvergenceError("mode search failed at the supplied hyperparameters")
        grid_x = x[None, :]
        log_post = np.array([lp])
        approxs = [approx]
        hyper_mode = x
        hyper_cov = np.zeros((h, h))
    else:
        x0 = (init or _initial_hyper(design, names)).to_internal()

        def objective(x):
            return -model.log_posterior(x)[0]

        res = optimize.minimize(
            objective,
            x0,
            method="Nelder-Mead",
            options=dict(xatol=grid.nm_xatol, fatol=grid.nm_fatol, maxiter=grid.nm_maxiter * h, adaptive=True),
        )
        if not np.isfinite(res.fun):
            raise ConvergenceError("hyperparameter mode search failed", {"message": res.message})
        hyper_mode = res.x
        _, approx_mode = model.log_posterior(hyper_mode)
        mode_latent = approx_mode.mode
        Hh = -_fd_hessian(lambda x: _lp_from(model, x, mode_latent), hyper_mode, grid.fd_step)
        if not np.all(np.isfinite(Hh)):
            raise ConvergenceError("non-finite curvature at the hyperparameter mode")
        Hh = _positive_definite(Hh)
        evals, evecs = np.linalg.eigh(Hh)
        Tmat = evecs / np.sqrt(evals)  # internal = mode + Tmat @ z
        zs = np.array(list(itertools.product(grid.z, repeat=h)), dtype=float)
        grid_x = hyper_mode + zs @ Tmat.T

        def evaluate(x):
            try:
                hyper = Hyperparameters.from_internal(x, names)
                problem = model.problem(hyper)
                approx = find_mode(problem, mode_latent)
            except (ConvergenceError, linalg.LinAlgError, ValueError) as exc:
                log.warning("grid point %s dropped: %s", np.round(x, 4), exc)
                return -np.inf, None
            return log_laplace_marginal(problem, approx) + log_prior_internal(hyper, spec), approx

        if grid.threads > 1:
            with ThreadPoolExecutor(grid.threads) as pool:
                results = list(pool.map(evaluate, grid_x))
        else:
            results = [evaluate(x) for x in grid_x]
        log_post = np.array([r[0] for r in results])
        approxs = [r[1] for r in results]

        best = int(np.nanargmax(log_post))
        if np.max(np.abs(zs[best])) == max(np.abs(grid.z)) and len(grid.z) > 1:
            warnings.warn("largest grid weight lies on the grid boundary; widen the grid", RuntimeWarning)
        hyper_mode, hyper_cov = _hyper_gaussian(zs, log_post, hyper_mode, Tmat, np.linalg.inv(Hh))

    finite = np.isfinite(log_post)
    if not finite.any():
        raise ConvergenceError("every grid point failed")
    w = np.zeros_like(log_post)
    w[finite] = np.exp(log_post[finite] - log_post[finite].max())
    keep = w >= grid.prune * w.max()
    grid_x, log_post, w = grid_x[keep], log_post[keep], w[keep]
    approxs = [a for a, k in zip(approxs, keep) if k]
    weights = w / w.sum()

    result = FitResult(
        spec=spec,
        hyper_names=names,
        grid_internal=grid_x,
        log_post=log_post,
        weights=weights,
        approxs=approxs,
        hyper_mode=np.asarray(hyper_mode, dtype=float),
        hyper_cov=np.asarray(hyper_cov, dtype=float),
        column_names=design.column_names,
        summary=[],
        seed=seed,
        spec_hash=spec.digest(),
        knots=np.array(design.knots.locations),
        years=np.array(design.years),
        year_mid=design.year_mid,
        sign_reversal=design.sign_reversal,
    )
    result.summary = _summaries(result)
    if grid.dic_nodes:
        result.dic = dic(result, design, nodes=grid.dic_nodes)
    return result


def _lp_from(model: Model, x, init) -> float:
    try:
        hyper = Hyperparameters.from_internal(x, model.hyper_names)
        problem = model.problem(hyper)
        approx = find_mode(problem, init)
    except (ConvergenceError, linalg.LinAlgError, ValueError):
        return -np.inf
    return log_laplace_marginal(problem, approx) + log_prior_internal(hyper, model.spec)


def _initial_hyper(design: ExpandedDesign, names) -> Hyperparameters:
    kw = {}
    if "sigma" in names:
        kw["sigma"] = 0.5
    if "range" in names:
        loc = design.knots.locations
        span = float(np.max(pdist(loc))) if len(loc) > 1 else 1.0
        kw["range"] = max(0.2 * span, 1e-3)
    if "rho" in names:
        kw["rho"] = 0.5
    return Hyperparameters(**kw)


PROBS = (0.025, 0.5, 0.975)
HYPER_LABELS = {"range": "r", "sigma": "sigma", "rho": "rho"}


def _summaries(fit: FitResult) -> list[tuple[str, float, float, float]]:
    rows = []
    p = fit.p
    means = np.array([a.mode[:p] for a in fit.approxs])
    sds = np.sqrt(np.array([a.marginal_variances(np.arange(p)) for a in fit.approxs]))
    for j, name in enumerate(fit.column_names):
        q = _mixture_quantiles(means[:, j], sds[:, j], fit.weights, PROBS)
        rows.append((name, *q))
    order = [n for n in ("range", "sigma", "rho") if n in fit.hyper_names]
    z = special.ndtri(np.array(PROBS))
    for name in order:
        i = fit.hyper_names.index(name)
        sd = math.sqrt(max(fit.hyper_cov[i, i], 0.0))
        internal = fit.hyper_mode[i] + sd * z
        if name == "rho":
            vals = 2.0 * special.expit(internal) - 1.0
        else:
            vals = np.exp(internal)
        rows.append((HYPER_LABELS[name], *map(float, vals)))
    return rows


# ---------------------------------------------------------------------------
# sampling, prediction, DIC


def sample_posterior(fit: FitResult, n: int, seed: int = 0, *, return_index: bool = False):
    """Joint draws of ``(beta, u)``: a grid point by weight, then a Gaussian
    draw from that point's approximation."""
    if n <= 0:
        raise ValueError("number of draws must be positive")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(fit.weights), size=n, p=fit.weights)
    m = fit.approxs[0].dim
    z = rng.standard_normal((n, m))
    draws = np.empty((n, m))
    for g in np.unique(idx):
        sel = idx == g
        a = fit.approxs[g]
        draws[sel] = a.mode + linalg.solve_triangular(a.chol.T, z[sel].T, lower=False).T
    return (draws, idx) if return_index else draws


@dataclass
class Prediction:
    quantiles: np.ndarray  # (N, C, 3) at q0.05, q0.50, q0.95
    max_sum_error: float  # max |sum(pi) - 1| over draws and targets
    probs: tuple[float, ...] = (0.05, 0.5, 0.95)


def conditional_field(fit: FitResult, g: int, locations, years):
    """Kriging weights and conditional variances of the latent field at
    ``(locations, years)`` given the knot field, under grid point ``g``.

    Returns ``(B, var)`` with conditional mean ``B @ u``.
    """
    locations = np.atleast_2d(np.asarray(locations, dtype=float))
    years = np.asarray(years)
    N = len(locations)
    variant = fit.variant
    if variant is Variant.M1:
        return np.zeros((N, 0)), np.zeros(N)
    hyper = fit.hyper(g)
    matern = MaternParams(hyper.sigma, hyper.range)
    knots = fit.knots
    H, L = build_H(knots, matern, return_cholesky=True)
    # the diagonal jitter acts as a nugget shared by every point
    s0 = float(H[0, 0])
    c = cross_cov(locations, knots, matern)  # (N, k)
    c[cdist(locations, knots) == 0.0] = s0
    Hinv_c = linalg.cho_solve((L, True), c.T)  # (k, N)
    quad_s = np.sum(c.T * Hinv_c, axis=0)
    if variant is Variant.M2:
        var = s0 - quad_s
        return Hinv_c.T, np.maximum(var, 0.0)
    rho = hyper.rho
    T = len(fit.years)
    t_idx = np.asarray(years, dtype=float) - fit.years.min()
    a = rho ** np.abs(np.arange(T)[:, None] - t_idx[None, :]) / (1.0 - rho**2)  # (T, N)
    Qa = ar1_precision(T, rho) @ a
    quad_t = np.sum(a * Qa, axis=0)
    B = (Qa.T[:, :, None] * Hinv_c.T[:, None, :]).reshape(N, -1)
    var = s0 / (1.0 - rho**2) - quad_t * quad_s
    return B, np.maximum(var, 0.0)


def predict(
    fit: FitResult,
    locations,
    years,
    covariates,
    *,
    n_draws: int = 2000,
    seed: int = 0,
    chunk: int = 256,
    probs=(0.05, 0.5, 0.95),
) -> Prediction:
    """Posterior predictive category probabilities at new space-time points.

    ``covariates`` is ``(N, 5)``: control flag, years since control, centred
    year, forest indicator and log access, with the biological sign.
    """
    locations = np.atleast_2d(np.asarray(locations, dtype=float))
    years = np.asarray(years)
    covariates = np.atleast_2d(np.asarray(covariates, dtype=float))
    N = len(locations)
    q = fit.spec.scale.q
    p = fit.p
    draws, idx = sample_posterior(fit, n_draws, seed, return_index=True)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    eps = rng.standard_normal((n_draws, N))
    s = -1.0 if fit.sign_reversal else 1.0
    beta_cut = draws[:, :q]
    beta_glob = draws[:, q:p]
    U = draws[:, p:]
    out = np.empty((N, q + 1, len(probs)))
    worst = 0.0
    groups = [(g, np.flatnonzero(idx == g)) for g in np.unique(idx)]
    for start in range(0, N, chunk):
        sl = slice(start, min(start + chunk, N))
        ustar = np.zeros((n_draws, sl.stop - sl.start))
        for g, rows in groups:
            B, var = conditional_field(fit, g, locations[sl], years[sl])
            if B.shape[1]:
                ustar[rows] = U[rows] @ B.T + np.sqrt(var) * eps[rows, sl]
        glob = beta_glob @ covariates[sl].T  # (D, n)
        eta = beta_cut[:, None, :] + s * (glob + ustar)[:, :, None]
        pi = sequential_to_category_probs(link_inverse(eta, fit.spec.link))
        worst = max(worst, float(np.max(np.abs(pi.sum(axis=-1) - 1.0))))
        out[sl] = np.moveaxis(np.quantile(pi, probs, axis=0), 0, -1)
    return Prediction(out, worst, tuple(probs))


@dataclass
class DICResult:
    dic: float
    dbar: float
    dhat: float
    pd: float


def deviance(design: ExpandedDesign, theta) -> np.ndarray:
    """``-2 log p(y | theta)`` for one or many joint vectors (rows)."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    eta = design.A @ theta.T  # (n, D)
    lp, lq = log_probs(eta, design.link)
    return -2.0 * np.sum(np.where(design.y[:, None] > 0, lp, lq), axis=0)


def expected_deviance(fit: FitResult, design: ExpandedDesign, *, nodes: int = 40) -> float:
    """Posterior mean of the deviance.

    Given ``theta`` the deviance is a sum of row terms, each a function of
    one linear predictor, whose posterior is a Gaussian mixture over the
    grid. Each row expectation is taken by Gauss-Hermite quadrature.
    """
    x, w = special.roots_hermitenorm(nodes)
    w = w / w.sum()
    A = design.A
    yv = design.y[:, None] > 0
    total = 0.0
    for g, a in enumerate(fit.approxs):
        mean = A @ a.mode
        V = linalg.solve_triangular(a.chol, A.T.toarray(), lower=True)
        sd = np.sqrt(np.sum(V**2, axis=0))
        eta = mean[:, None] + sd[:, None] * x[None, :]
        lp, lq = log_probs(eta, design.link)
        ll = np.where(yv, lp, lq) @ w
        total += fit.weights[g] * float(-2.0 * ll.sum())
    return total


def dic(fit: FitResult, design: ExpandedDesign, *, nodes: int = 40) -> DICResult:
    """Deviance information criterion with the joint ``(beta, u)`` as focus."""
    dhat = float(deviance(design, fit.mean())[0])
    if len(fit.weights) == 1 and fit.approxs[0].dim == 0:
        return DICResult(dhat, dhat, dhat, 0.0)
    dbar = expected_deviance(fit, design, nodes=nodes)
    pd = dbar - dhat
    return DICResult(dbar + pd, dbar, dhat, pd)
