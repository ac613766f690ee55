"""Joint probability model: Gaussian noise, Lorentzian templates, wavelet residual.

The residual signal is represented by wavelet coefficients ``theta`` on a
zero/reflection padded domain. Padding slots carry latent "observations"
(``state.pad``) so that the transform stays orthonormal; integrating them out
recovers the likelihood on the observed points exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np
from numba import njit
from scipy.special import gammaln, log_ndtr

from . import truncnorm
from .errors import DomainError, SingularityError
from .spectrum import Spectrum
from .template import (TemplateCatalog, build_design_matrix, render_multiplet,
                       restrict_catalog, segment_intervals)
from .wavelet import SegmentedPlan

_LOG_2PI = math.log(2 * math.pi)


@dataclass
class Hyperparameters:
    """Prior constants. ``None`` entries are derived from the data by :func:`resolve`."""

    a: float = 1e-3
    b: float = 1e-3
    c: float = 1e-3
    d: float = 1e-3
    h: Optional[float] = None
    tau_mean: Optional[float] = None
    tau_sd: Optional[float] = None
    mu0: float = math.log(0.0015)
    s_mu: float = 1.0
    s_v: float = 0.2
    beta_mean: float = 0.0
    beta_sd: Optional[float] = None
    sigma_sd: Optional[float] = None
    burnin_temp0: float = 16.0
    psi_penalty0: float = 100.0

    def validate(self):
        for k in ("a", "b", "c", "d", "s_mu", "s_v", "beta_sd", "tau_sd",
                  "burnin_temp0", "psi_penalty0"):
            v = getattr(self, k)
            if v is not None and not v > 0:
                raise DomainError(f"hyperparameter {k} must be positive, got {v}")
        if self.sigma_sd is not None and not self.sigma_sd > 0:
            raise DomainError("hyperparameter sigma_sd must be positive")
        if self.h is not None and not self.h < 0:
            raise DomainError(f"hyperparameter h must be negative, got {self.h}")
        return self


def naive_multiplet_integrals(y, grid, cat: TemplateCatalog, pad=0.02):
    """Trapezoid area around each metabolite's largest multiplet, per proton."""
    out = np.zeros(len(cat))
    for k, m in enumerate(cat.metabolites):
        mu = max(m.multiplets, key=lambda q: q.proton_count)
        sel = (grid >= mu.center_ppm - pad) & (grid <= mu.center_ppm + pad)
        if sel.sum() >= 2:
            out[k] = np.trapezoid(y[sel], grid[sel]) / mu.proton_count
    return out


def resolve(hp: Hyperparameters, y, grid, cat) -> Hyperparameters:
    """Fill data-dependent defaults."""
    hp = replace(hp)
    ymax = float(np.max(np.abs(y))) if len(y) else 0.0
    if hp.h is None:
        hp.h = -0.01 * ymax if ymax > 0 else -0.01
    if hp.tau_mean is None:
        hp.tau_mean = hp.h
    if hp.tau_sd is None:
        hp.tau_sd = abs(hp.h)
    if hp.beta_sd is None:
        est = naive_multiplet_integrals(np.abs(y), grid, cat) if len(cat) else np.zeros(1)
        big = float(np.max(est)) if est.size else 0.0
        hp.beta_sd = 10.0 * big if big > 0 else 1.0
    return hp.validate()


@dataclass
class ModelState:
    beta: np.ndarray
    sigma: np.ndarray
    mu: float
    v: np.ndarray
    lam: float
    theta: np.ndarray
    psi: np.ndarray
    tau: np.ndarray
    pad: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def gamma(self):
        return np.exp(self.mu + self.v)

    def copy(self):
        return ModelState(**{f.name: (np.array(getattr(self, f.name), copy=True)
                                      if isinstance(getattr(self, f.name), np.ndarray)
                                      else getattr(self, f.name)) for f in fields(self)})


class Problem:
    """Everything fixed during a fit: data, restricted catalog, priors, wavelet layout."""

    def __init__(self, spec: Spectrum, cat: TemplateCatalog, hp: Hyperparameters = None,
                 levels=None, use_wavelet=True):
        self.spec = spec
        self.grid = spec.ppm
        self.y = spec.intensity
        self.n = len(self.y)
        self.catalog = restrict_catalog(cat, segment_intervals(spec.ppm, spec.segments))
        self.hp = resolve(hp or Hyperparameters(), self.y, self.grid, self.catalog)
        self.multiplets = self.catalog.multiplets
        self.owner = self.catalog.owner
        self.M = len(self.catalog)
        self.U = len(self.multiplets)
        self.bounds = np.array([mu.shift_bound for mu in self.multiplets])
        self.sigma_sd = (np.full(self.U, self.hp.sigma_sd) if self.hp.sigma_sd is not None
                         else self.bounds / 2.0)
        self.use_wavelet = use_wavelet
        self.layout = SegmentedPlan(spec.segments, levels) if use_wavelet else None
        self.K = self.layout.size if use_wavelet else 0
        self.n_aug = self.K if use_wavelet else self.n

    # --- fitted components -------------------------------------------------
    def design(self, sigma, gamma):
        return build_design_matrix(self.catalog, sigma, gamma, self.grid)

    def catalog_fit(self, state: ModelState):
        if self.M == 0:
            return np.zeros(self.n)
        return self.design(state.sigma, state.gamma) @ state.beta

    def wavelet_signal(self, state: ModelState):
        """Inverse transform of theta on the padded layout."""
        if not self.use_wavelet:
            return np.zeros(self.n)
        return self.layout.synthesize(state.theta)

    def wavelet_fit(self, state: ModelState):
        if not self.use_wavelet:
            return np.zeros(self.n)
        return self.layout.observed(self.wavelet_signal(state))

    def augmented_residual(self, state: ModelState):
        """Residual on the padded layout (observed and latent padding slots)."""
        yc = self.catalog_fit(state)
        if not self.use_wavelet:
            return self.y - yc
        z = self.layout.embed(self.y - yc, state.pad)
        return z - self.wavelet_signal(state)

    def multiplet_key(self, j):
        return self.multiplets[j].key


# --- log densities ---------------------------------------------------------

def _gamma_logpdf(x, shape, rate):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        return shape * np.log(rate) - gammaln(shape) + (shape - 1) * np.log(x) - rate * x


def _normal_logpdf(x, mean, sd):
    z = (np.asarray(x, dtype=float) - mean) / sd
    return -0.5 * z * z - 0.5 * _LOG_2PI - np.log(sd)


def log_likelihood(state: ModelState, problem: Problem, temp=1.0):
    """Tempered Gaussian log-likelihood of the observed points."""
    if not temp >= 1:
        raise DomainError(f"temperature must be >= 1, got {temp}")
    if not state.lam > 0:
        raise DomainError("noise precision must be positive")
    r = problem.y - problem.catalog_fit(state) - problem.wavelet_fit(state)
    n = problem.n
    return (0.5 * n * math.log(state.lam / (2 * math.pi)) - 0.5 * state.lam * float(r @ r)) / temp


def augmented_log_likelihood(state: ModelState, problem: Problem, temp=1.0):
    """Tempered log-likelihood including the latent padding slots.

    The padding density keeps its normalizer at variance ``temp/lam`` so that
    integrating the slots out leaves exactly the tempered observed likelihood.
    """
    r = problem.augmented_residual(state)
    n_pad = problem.n_aug - problem.n
    lam = state.lam
    return (0.5 * problem.n * math.log(lam / (2 * math.pi)) / temp
            + 0.5 * n_pad * math.log(lam / (2 * math.pi * temp))
            - 0.5 * lam * float(r @ r) / temp)


def theta_prior_terms(theta, lam, psi, tau, penalty=1.0):
    """Per-coefficient log density of N(0, 1/(penalty*lam*psi)) truncated below at tau."""
    prec = penalty * lam * psi
    sd = 1.0 / np.sqrt(prec)
    z = theta * np.sqrt(prec)
    out = -0.5 * z * z - 0.5 * _LOG_2PI - np.log(sd) - log_ndtr(-tau * np.sqrt(prec))
    return np.where(theta < tau, -np.inf, out)


def log_prior(state: ModelState, problem: Problem, penalty=1.0):
    """Sum of every prior term; ``-inf`` outside the support."""
    hp = problem.hp
    if np.any(state.beta < 0) or np.any(np.abs(state.sigma) > problem.bounds) or not state.lam > 0:
        return -np.inf
    lp = 0.0
    if problem.M:
        lp += np.sum(truncnorm.logpdf(state.beta, hp.beta_mean, hp.beta_sd, 0.0, np.inf))
        lp += np.sum(truncnorm.logpdf(state.sigma, 0.0, problem.sigma_sd,
                                      -problem.bounds, problem.bounds))
        lp += np.sum(_normal_logpdf(state.v, 0.0, hp.s_v))
    lp += float(_normal_logpdf(state.mu, hp.mu0, hp.s_mu))
    lp += float(_gamma_logpdf(state.lam, hp.a, hp.b / 2))
    if problem.use_wavelet:
        if np.any(state.psi <= 0) or np.any(state.tau < hp.h) or np.any(state.theta < state.tau):
            return -np.inf
        lp += np.sum(_gamma_logpdf(state.psi, hp.c, hp.d / 2))
        lp += np.sum(truncnorm.logpdf(state.tau, hp.tau_mean, hp.tau_sd, hp.h, np.inf))
        lp += np.sum(theta_prior_terms(state.theta, state.lam, state.psi, state.tau, penalty))
    return float(lp)


def log_joint(state, problem, temp=1.0, penalty=1.0, augmented=False):
    lp = log_prior(state, problem, penalty)
    if lp == -np.inf:
        return lp
    if augmented:
        return lp + augmented_log_likelihood(state, problem, temp)
    return lp + log_likelihood(state, problem, temp)


def check_state(state: ModelState, problem: Problem):
    """Raise DomainError if ``state`` breaks a support constraint."""
    bad = []
    if np.any(state.beta < 0):
        bad.append("beta < 0")
    if np.any(np.abs(state.sigma) > problem.bounds * (1 + 1e-12)):
        bad.append("|sigma| > bound")
    if not state.lam > 0:
        bad.append("lambda <= 0")
    if not np.all(np.isfinite(state.gamma)) or np.any(state.gamma <= 0):
        bad.append("gamma not positive")
    if problem.use_wavelet:
        if np.any(state.psi <= 0):
            bad.append("psi <= 0")
        if np.any(state.tau < problem.hp.h):
            bad.append("tau < h")
        if np.any(state.theta < state.tau):
            bad.append("theta < tau")
        if not np.all(np.isfinite(state.theta)):
            bad.append("theta not finite")
    if bad:
        raise DomainError("invalid state: " + ", ".join(bad))


# --- full conditionals -----------------------------------------------------

def lambda_conditional(state, problem, temp=1.0, penalty=1.0):
    """Gamma (shape, rate) of the conjugate part of lambda's conditional.

    The theta prior's truncation normalizers also depend on lambda and are
    returned separately by :func:`lambda_log_correction`. The sampler uses both
    to build a locally matched Gamma proposal.
    """
    hp = problem.hp
    if problem.n_aug == 0:
        return hp.a, hp.b / 2
    r = problem.augmented_residual(state)
    ssr = float(r @ r)
    shape = hp.a + 0.5 * problem.n / temp + 0.5 * (problem.n_aug - problem.n)
    rate = 0.5 * (hp.b + ssr / temp)
    if problem.use_wavelet:
        shape += 0.5 * problem.K
        rate += 0.5 * penalty * float(np.sum(state.psi * state.theta ** 2))
    return shape, rate


def lambda_log_correction(state, lam, problem, penalty=1.0):
    """log of the lambda-dependent truncation factor dropped by :func:`lambda_conditional`."""
    if not problem.use_wavelet:
        return 0.0
    return -float(np.sum(log_ndtr(-state.tau * np.sqrt(penalty * lam * state.psi))))


def psi_conditional(state, problem, i=None, penalty=1.0):
    """Gamma (shape, rate) of the conjugate part of psi_i's conditional.

    The truncation factor ``1/P(theta_i > tau_i)`` is handled by an MH
    correction (:func:`psi_log_correction`).
    """
    hp = problem.hp
    th = state.theta if i is None else state.theta[i]
    return hp.c + 0.5, 0.5 * (hp.d + penalty * state.lam * th ** 2)


def psi_log_correction(state, psi, problem, i=None, penalty=1.0):
    tau = state.tau if i is None else state.tau[i]
    return -log_ndtr(-tau * np.sqrt(penalty * state.lam * psi))


def tau_conditional(state, problem, i=None):
    """(mean, sd, lower, upper) of the truncated normal proposal for tau_i.

    The exact conditional multiplies this by ``1/P(theta_i > tau_i)``, which the
    sampler corrects for with an independence MH step.
    """
    hp = problem.hp
    th = state.theta if i is None else state.theta[i]
    if np.any(th < hp.h):
        raise DomainError("theta below h: state outside support")
    return hp.tau_mean, hp.tau_sd, hp.h, th


def theta_conditional(w, a, b, tau):
    """(mean, sd, lower) of each theta_i given the wavelet-domain residual ``w``.

    ``a`` is the tempered noise precision and ``b`` the per-coefficient prior
    precision; the result is N(a w / (a + b), 1 / (a + b)) truncated below at tau.
    """
    prec = a + b
    return a * w / prec, 1.0 / np.sqrt(prec), tau


@dataclass
class BetaThetaConditional:
    beta_mean: np.ndarray
    beta_precision: np.ndarray
    theta_mean: np.ndarray
    theta_sd: np.ndarray
    theta_lower: np.ndarray


def beta_theta_conditional(state, problem, temp=1.0, penalty=1.0) -> BetaThetaConditional:
    """Gaussian conditional of beta given theta (truncated at 0 by the caller), and
    the independent truncated-normal conditional of each theta_i given beta."""
    hp = problem.hp
    a = state.lam / temp
    T = problem.design(state.sigma, state.gamma)
    target = problem.y - problem.wavelet_fit(state)
    prec = a * (T.T @ T) + np.eye(problem.M) / hp.beta_sd ** 2
    rhs = a * (T.T @ target) + hp.beta_mean / hp.beta_sd ** 2
    try:
        chol = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        raise SingularityError("beta conditional precision is not positive definite") from None
    mean = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
    if problem.use_wavelet:
        z = problem.layout.embed(problem.y - T @ state.beta, state.pad)
        w = problem.layout.analyze(z)
        tmean, tsd, lower = theta_conditional(w, a, penalty * state.lam * state.psi,
                                              state.tau.copy())
    else:
        tmean = tsd = lower = np.zeros(0)
    return BetaThetaConditional(mean, prec, tmean, tsd, lower)


def sigma_log_target(state, j, proposal, problem, temp=1.0):
    """Log-likelihood plus shift prior with multiplet ``j`` moved to ``proposal``."""
    bound = problem.bounds[j]
    if abs(proposal) > bound:
        return -np.inf
    s = state.copy()
    s.sigma[j] = proposal
    prior = float(truncnorm.logpdf(proposal, 0.0, problem.sigma_sd[j], -bound, bound))
    return log_likelihood(s, problem, temp) + prior


def gamma_log_target(state, m, proposal_v, problem, temp=1.0):
    """Log-likelihood with width exp(mu + proposal_v) for metabolite ``m`` plus its prior."""
    s = state.copy()
    s.v[m] = proposal_v
    return log_likelihood(s, problem, temp) + float(_normal_logpdf(proposal_v, 0.0, problem.hp.s_v))


# --- collapsed (theta integrated out) kernels -------------------------------

@njit(cache=True)
def log_sf_scalar(x):
    """log P(Z > x) for standard normal Z."""
    if x < -5.0:
        return math.log1p(-0.5 * math.erfc(-x / math.sqrt(2.0)))
    if x < 30.0:
        return math.log(0.5 * math.erfc(x / math.sqrt(2.0)))
    x2 = x * x
    series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2) + 105.0 / (x2 * x2 * x2 * x2)
    return -0.5 * x2 - math.log(x) - 0.5 * math.log(2.0 * math.pi) + math.log(series)


@njit(cache=True)
def truncation_derivs(tau, kappa, lam):
    """Sum of ``log P(Z > tau_i sqrt(kappa_i lam))`` and its first two lambda derivatives."""
    c0 = 0.0
    c1 = 0.0
    c2 = 0.0
    half_log_2pi = 0.5 * math.log(2.0 * math.pi)
    for i in range(tau.shape[0]):
        x = tau[i] * math.sqrt(kappa[i] * lam)
        ls = log_sf_scalar(x)
        hz = math.exp(-0.5 * x * x - half_log_2pi - ls)
        c0 += ls
        c1 -= hz * x
        c2 += hz * x * (1.0 - (hz - x) * x)
    return c0, c1 / (2.0 * lam), c2 / (4.0 * lam * lam)


@njit(cache=True)
def collapsed_term(w, a, b, tau):
    """Log of the theta-marginal likelihood factor for one coefficient (up to a constant).

    Integrates N(w; theta, 1/a) * N(theta; 0, 1/b) over theta >= tau.
    """
    ab = a + b
    s = a * b / ab
    m = a * w / ab
    return -0.5 * s * w * w + log_sf_scalar((tau - m) * math.sqrt(ab))


@njit(cache=True)
def collapsed_terms(w, a, b, tau, out):
    for i in range(w.shape[0]):
        out[i] = collapsed_term(w[i], a, b[i], tau[i])


@njit(cache=True)
def collapsed_delta(w, u, scale, a, b, tau, cache):
    """Change of the collapsed log-target when ``w -> w - scale * u`` (u sparse-aware)."""
    total = 0.0
    for i in range(w.shape[0]):
        ui = u[i]
        if ui != 0.0:
            total += collapsed_term(w[i] - scale * ui, a, b[i], tau[i]) - cache[i]
    return total


@njit(cache=True)
def collapsed_apply(w, u, scale, a, b, tau, cache):
    for i in range(w.shape[0]):
        ui = u[i]
        if ui != 0.0:
            w[i] -= scale * ui
            cache[i] = collapsed_term(w[i], a, b[i], tau[i])


@njit(cache=True)
def collapsed_quadratic(w, u, a, b):
    """(sum s u^2, sum s u w) with s = a b / (a + b)."""
    suu = 0.0
    suw = 0.0
    for i in range(w.shape[0]):
        ui = u[i]
        if ui != 0.0:
            s = a * b[i] / (a + b[i])
            suu += s * ui * ui
            suw += s * ui * w[i]
    return suu, suw


def collapsed_log_target(w, state, problem, temp=1.0, penalty=1.0):
    """Log-likelihood with theta integrated out, given wavelet-domain residual ``w``
    (constant terms independent of the catalog parameters dropped)."""
    a = state.lam / temp
    if not problem.use_wavelet:
        return -0.5 * a * float(w @ w)
    b = penalty * state.lam * state.psi
    out = np.empty(len(w))
    collapsed_terms(w, a, b, state.tau, out)
    return float(out.sum())
