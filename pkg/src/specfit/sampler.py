"""Metropolis-within-Gibbs sampler.

Catalog parameters (beta, shifts, widths) are updated with the wavelet
coefficients integrated out, which is what makes the (beta, theta) and
(sigma, theta) moves joint: each accepted move is followed, before anything
conditions on theta again, by an exact draw of theta from its conditional.
Noise precision, per-coefficient precisions and truncation limits follow with
Gamma and truncated-normal proposals plus an MH correction for the truncation normalizers.

Besides the random walks, shifts get discrete moves between registrations:
position swaps of overlapping multiplets, jumps by a line spacing and, during
burn-in, a grid proposal for overlapping pairs.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from numba import njit
from scipy.optimize import nnls

from . import truncnorm
from .errors import ConfigError, DomainError
from .model import (Hyperparameters, ModelState, Problem, collapsed_apply, collapsed_delta,
                    collapsed_quadratic, collapsed_terms, log_sf_scalar,
                    theta_conditional, truncation_derivs)
from .template import render_multiplet

log = logging.getLogger(__name__)

_TINY = np.finfo(float).tiny

# starting log-concentration / log-width slope for width moves
KAPPA0 = 0.5
# pair registration proposal: grid cells per shift, uniform mixture weight, burn-in period
REGISTER_CELLS = 60
REGISTER_FLAT = 0.1
REGISTER_EVERY = 5

MOVES = ("beta", "sigma", "exchange", "jump", "register", "width", "mu", "lambda", "psi", "tau")


@dataclass
class SamplerConfig:
    burnin_iters: int = 4000
    sample_iters: int = 2000
    seed: int = 0
    target_accept: float = 0.44
    adapt_window: int = 50
    thin: int = 1
    record_theta: bool = False
    update_sigma: bool = True
    update_width: bool = True
    use_wavelet: bool = True
    levels: Optional[int] = None
    progress_every: int = 0

    def validate(self):
        if self.burnin_iters < 0 or self.sample_iters <= 0:
            raise ConfigError("sample_iters must be > 0 and burnin_iters >= 0")
        if self.thin < 1 or self.adapt_window < 1:
            raise ConfigError("thin and adapt_window must be >= 1")
        if not 0 < self.target_accept < 1:
            raise ConfigError("target_accept must lie in (0, 1)")
        return self


def geometric_schedule(start, n):
    """n values decaying geometrically from ``start`` to exactly 1 at the last one."""
    if n <= 0:
        return np.zeros(0)
    if n == 1:
        return np.ones(1)
    out = start ** (1.0 - np.arange(n) / (n - 1))
    out[-1] = 1.0
    return out


@dataclass
class Chain:
    spectrum_id: str
    metabolites: list
    multiplets: list
    beta: np.ndarray
    sigma: np.ndarray
    mu: np.ndarray
    v: np.ndarray
    lam: np.ndarray
    theta: Optional[np.ndarray]
    psi: Optional[np.ndarray]
    tau: Optional[np.ndarray]
    yc_mean: np.ndarray
    yu_mean: np.ndarray
    accept_burnin: dict
    accept_sampling: dict
    temps: np.ndarray
    penalties: np.ndarray
    steps: dict
    step_trace: list
    seed: int
    ppm: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return len(self.lam)

    @property
    def gamma(self):
        return np.exp(self.mu[:, None] + self.v)

    def acceptance_rates(self, phase="sampling"):
        counts = self.accept_sampling if phase == "sampling" else self.accept_burnin
        return {k: (a / p if p else float("nan")) for k, (a, p) in counts.items()}


def init_state(problem: Problem, rng) -> ModelState:
    """NNLS start at catalogued positions and the prior-mean width."""
    hp = problem.hp
    M, U = problem.M, problem.U
    sigma = np.zeros(U)
    v = np.zeros(M)
    mu = hp.mu0
    if M:
        T = problem.design(sigma, np.exp(mu + v))
        beta, _ = nnls(T, problem.y)
        resid = problem.y - T @ beta
    else:
        beta = np.zeros(0)
        resid = problem.y.copy()
    var = float(np.mean(resid ** 2))
    lam = 1.0 / var if var > 0 and np.isfinite(var) else 2.0 * hp.a / hp.b
    if problem.use_wavelet:
        K = problem.K
        theta = np.zeros(K)
        psi = rng.gamma(hp.c + 0.5, 2.0 / hp.d, size=K)
        psi = np.maximum(psi, np.finfo(float).tiny)
        tau = np.full(K, hp.h)
        pad = problem.layout.reflect_pad(resid)
    else:
        theta = psi = tau = pad = np.zeros(0)
    return ModelState(beta=beta, sigma=sigma, mu=mu, v=v, lam=lam, theta=theta, psi=psi,
                      tau=tau, pad=pad)


def _line_spacings(mu):
    """Distinct positive differences between a multiplet's line offsets."""
    offs = sorted(pk.offset for pk in mu.peaks)
    diffs = sorted({round(b - a, 12) for i, a in enumerate(offs) for b in offs[i + 1:]})
    return np.array([d for d in diffs if d > 0])


def _exchange_pairs(problem):
    """Multiplet pairs of different metabolites whose allowed position ranges overlap."""
    mus = problem.multiplets
    out = []
    for j in range(len(mus)):
        for k in range(j + 1, len(mus)):
            if problem.owner[j] == problem.owner[k]:
                continue
            if abs(mus[j].center_ppm - mus[k].center_ppm) < problem.bounds[j] + problem.bounds[k]:
                out.append((j, k))
    return out


def adapt(steps, accepted, proposed, iteration, target=0.44):
    """Scale random-walk steps toward the target acceptance rate.

    ``iteration`` is 1-based; the gain ``min(1, 10/sqrt(iteration))`` shrinks so
    adaptation diminishes over the burn-in.
    """
    steps = np.asarray(steps, dtype=float)
    proposed = np.asarray(proposed, dtype=float)
    rate = np.where(proposed > 0, np.asarray(accepted, float) / np.maximum(proposed, 1), target)
    kappa = min(1.0, 10.0 / math.sqrt(max(iteration, 1)))
    return steps * np.exp(kappa * (rate - target))


def _reflect(x, bound):
    period = 4 * bound
    x = (x + bound) % period
    if x > 2 * bound:
        x = period - x
    return x - bound


@njit(cache=True)
def _log_sf_vec(tau, scale, out):
    for i in range(tau.shape[0]):
        out[i] = log_sf_scalar(tau[i] * math.sqrt(scale[i]))


def _gamma_fit(lam, shape, rate, tau, kappa):
    """Gamma proposal matching slope and curvature of the log target at ``lam``."""
    c0, c1, c2 = truncation_derivs(tau, kappa, lam)
    grad = (shape - 1.0) / lam - rate - c1
    curv = -(shape - 1.0) / lam ** 2 - c2
    alpha = 1.0 - curv * lam * lam
    beta = (alpha - 1.0) / lam - grad
    if not (curv < 0.0 and alpha > 1.0 and beta > 0.0 and np.isfinite(alpha + beta)):
        alpha, beta = shape, rate
    return c0, alpha, beta


def _gamma_logpdf(x, alpha, beta):
    return alpha * math.log(beta) - math.lgamma(alpha) + (alpha - 1.0) * math.log(x) - beta * x


def lambda_step(rng, lam, shape, rate, tau, kappa):
    """One MH update of lambda against ``Gamma(shape, rate) / prod P(theta_i > tau_i)``.

    The proposal is the Gamma whose log density has the target's slope and
    curvature at the current point, which keeps acceptance high even when the
    truncation factors pull hard; it falls back to the conjugate Gamma.
    """
    c_old, a_f, b_f = _gamma_fit(lam, shape, rate, tau, kappa)
    new = rng.gamma(a_f, 1.0 / b_f)
    if not new > 0.0:
        return lam, False
    c_new, a_r, b_r = _gamma_fit(new, shape, rate, tau, kappa)
    log_r = ((shape - 1.0) * math.log(new / lam) - rate * (new - lam) - c_new + c_old
             + _gamma_logpdf(lam, a_r, b_r) - _gamma_logpdf(new, a_f, b_f))
    return (new, True) if math.log(rng.random()) < log_r else (lam, False)


def psi_step(rng, s, hp, pen=1.0):
    """Update every psi_i in place; returns the acceptance mask.

    The exact conditional is ``Gamma(c + 1/2, (d + pen lam theta^2) / 2) / P(theta_i > tau_i)``.
    For tau_i > 0 the normalizer decays like ``exp(-pen lam tau^2 psi / 2)``, so the
    proposal rate is lowered by that amount (it stays positive as theta >= tau) and
    the MH ratio carries the remainder.
    """
    K = len(s.psi)
    kappa = 0.5 * pen * s.lam * np.maximum(s.tau, 0.0) ** 2
    rate = 0.5 * (hp.d + pen * s.lam * s.theta ** 2) - kappa
    psi_new = rng.gamma(hp.c + 0.5, 1.0 / rate)
    psi_new = np.maximum(psi_new, _TINY)
    old = np.empty(K)
    new = np.empty(K)
    _log_sf_vec(s.tau, pen * s.lam * s.psi, old)
    _log_sf_vec(s.tau, pen * s.lam * psi_new, new)
    take = np.log(rng.random(K)) < old - new - kappa * (psi_new - s.psi)
    s.psi = np.where(take, psi_new, s.psi)
    return take


def tau_step(rng, s, hp, pen=1.0):
    """Update every tau_i in place from its prior restricted to [h, theta_i], MH corrected."""
    K = len(s.tau)
    tau_new = truncnorm.sample(rng, hp.tau_mean, hp.tau_sd, hp.h, s.theta)
    scale = pen * s.lam * s.psi
    old = np.empty(K)
    new = np.empty(K)
    _log_sf_vec(s.tau, scale, old)
    _log_sf_vec(tau_new, scale, new)
    take = np.log(rng.random(K)) < old - new
    s.tau = np.where(take, tau_new, s.tau)
    return take


class _Runner:
    """Mutable working set for one chain. Not shared between threads."""

    def __init__(self, problem: Problem, cfg: SamplerConfig, rng, state=None):
        self.p = problem
        self.cfg = cfg
        self.rng = rng
        self.state = state if state is not None else init_state(problem, rng)
        self.hp = problem.hp
        M, U = problem.M, problem.U
        self.members = [np.nonzero(problem.owner == m)[0] for m in range(M)]
        self.sigma_step = problem.bounds / 10.0
        self.v_step = np.full(M, 0.05)
        self.mu_step = 0.02
        self.acc = {k: [0, 0] for k in MOVES}
        self.win_sigma = np.zeros((2, U))
        self.win_v = np.zeros((2, M))
        self.win_mu = np.zeros(2)
        self.K = problem.K
        self.cache = np.empty(self.K)
        self.tscale = 1.0
        self.pairs = _exchange_pairs(problem)
        self.jumps = [_line_spacings(mu) for mu in problem.multiplets]
        self.kappa = np.full(M, KAPPA0)
        self.width_stats = np.zeros((5, M))
        self._rebuild()
        if M:
            self._initial_steps()

    # -- bookkeeping ------------------------------------------------------
    def _render(self, j, sigma, gamma):
        return render_multiplet(self.p.multiplets[j], sigma, gamma, self.p.grid)

    def _rebuild(self):
        p, s = self.p, self.state
        gam = s.gamma
        self.tpl = [self._render(j, s.sigma[j], gam[p.owner[j]]) for j in range(p.U)]
        self.cols = np.zeros((p.M, p.n))
        for j in range(p.U):
            self.cols[p.owner[j]] += self.tpl[j]
        self.yc = s.beta @ self.cols if p.M else np.zeros(p.n)
        self._refresh_w()

    def _initial_steps(self):
        """Random-walk scales of about 2.4 local posterior sd, from finite-difference curvature.

        Steps are stored for temperature 1; moves scale them by ``sqrt(temp)``.
        """
        p, s, hp = self.p, self.state, self.hp
        gam = s.gamma
        lam = s.lam
        for j in range(p.U):
            m = p.owner[j]
            eps = 1e-3 * p.bounds[j]
            lo = max(s.sigma[j] - eps, -p.bounds[j])
            hi = min(s.sigma[j] + eps, p.bounds[j])
            d = s.beta[m] * (self._render(j, hi, gam[m]) - self._render(j, lo, gam[m])) / (hi - lo)
            sd = 1.0 / math.sqrt(lam * float(d @ d) + 1.0 / p.sigma_sd[j] ** 2)
            self.sigma_step[j] = min(max(2.4 * sd, 1e-4 * p.bounds[j]), 2 * p.bounds[j])
        eps = 1e-3
        total = np.zeros(p.n)
        for m in range(p.M):
            up = sum(self._render(j, s.sigma[j], gam[m] * math.exp(eps)) for j in self.members[m])
            dn = sum(self._render(j, s.sigma[j], gam[m] * math.exp(-eps)) for j in self.members[m])
            d = s.beta[m] * (up - dn) / (2 * eps)
            total += d
            self.v_step[m] = 2.4 / math.sqrt(lam * float(d @ d) + 1.0 / hp.s_v ** 2)
        self.mu_step = 2.4 / math.sqrt(lam * float(total @ total) + 1.0 / hp.s_mu ** 2)

    def _to_coef(self, x):
        """Map an observed-domain vector into the collapsed working domain."""
        if self.p.use_wavelet:
            return self.p.layout.analyze(self.p.layout.embed(x))
        return x

    def _refresh_w(self):
        p, s = self.p, self.state
        if p.use_wavelet:
            self.w = p.layout.analyze(p.layout.embed(p.y - self.yc, s.pad))
        else:
            self.w = p.y - self.yc

    def _delta(self, u, scale, a, b):
        """Collapsed log-target change for w -> w - scale*u."""
        if self.p.use_wavelet:
            return collapsed_delta(self.w, u, scale, a, b, self.state.tau, self.cache)
        d = scale * u
        return -0.5 * a * float(np.dot(d, d) - 2.0 * np.dot(d, self.w))

    def _apply(self, u, scale, a, b):
        if self.p.use_wavelet:
            collapsed_apply(self.w, u, scale, a, b, self.state.tau, self.cache)
        else:
            self.w -= scale * u

    # -- moves --------------------------------------------------------------
    def _beta_block(self, a, b):
        p, s, hp = self.p, self.state, self.hp
        inv_var = 1.0 / hp.beta_sd ** 2
        for m in range(p.M):
            u = self._to_coef(self.cols[m])
            if p.use_wavelet:
                suu, suw = collapsed_quadratic(self.w, u, a, b)
            else:
                suu, suw = a * float(u @ u), a * float(u @ self.w)
            prec = suu + inv_var
            step = (suw - (s.beta[m] - hp.beta_mean) * inv_var) / prec
            new = truncnorm.sample(self.rng, s.beta[m] + step, 1.0 / math.sqrt(prec), 0.0)
            d = new - s.beta[m]
            self.acc["beta"][1] += 1
            if p.use_wavelet:
                log_r = self._delta(u, d, a, b) - (d * suw - 0.5 * d * d * suu)
                if not math.log(self.rng.random()) < log_r:
                    continue
            self._apply(u, d, a, b)
            s.beta[m] = new
            self.yc += d * self.cols[m]
            self.acc["beta"][0] += 1

    def _sigma_moves(self, a, b):
        p, s = self.p, self.state
        gam = s.gamma
        for j in range(p.U):
            m = p.owner[j]
            bound = p.bounds[j]
            prop = _reflect(s.sigma[j] + self.tscale * self.sigma_step[j] * self.rng.standard_normal(),
                           bound)
            sd = p.sigma_sd[j]
            log_r = -0.5 * (prop ** 2 - s.sigma[j] ** 2) / sd ** 2
            new_tpl = self._render(j, prop, gam[m])
            dt = s.beta[m] * (new_tpl - self.tpl[j])
            u = self._to_coef(dt)
            log_r += self._delta(u, 1.0, a, b)
            self.acc["sigma"][1] += 1
            self.win_sigma[1, j] += 1
            if math.log(self.rng.random()) < log_r:
                self._apply(u, 1.0, a, b)
                self.cols[m] += new_tpl - self.tpl[j]
                self.tpl[j] = new_tpl
                self.yc += dt
                s.sigma[j] = prop
                self.acc["sigma"][0] += 1
                self.win_sigma[0, j] += 1

    def _jump_moves(self, a, b):
        """Shift a multiplet by one of its own line spacings, up or down.

        A multiplet registered one line off still overlaps most of its signal,
        which makes a local mode; the symmetric jump set crosses it in one step.
        """
        p, s = self.p, self.state
        gam = s.gamma
        for j in range(p.U):
            jumps = self.jumps[j]
            if not len(jumps):
                continue
            d = jumps[self.rng.integers(len(jumps))]
            if self.rng.random() < 0.5:
                d = -d
            prop = s.sigma[j] + d
            self.acc["jump"][1] += 1
            if abs(prop) > p.bounds[j]:
                continue
            m = p.owner[j]
            log_r = -0.5 * (prop ** 2 - s.sigma[j] ** 2) / p.sigma_sd[j] ** 2
            new_tpl = self._render(j, prop, gam[m])
            dt = s.beta[m] * (new_tpl - self.tpl[j])
            u = self._to_coef(dt)
            log_r += self._delta(u, 1.0, a, b)
            if math.log(self.rng.random()) < log_r:
                self._apply(u, 1.0, a, b)
                self.cols[m] += new_tpl - self.tpl[j]
                self.tpl[j] = new_tpl
                self.yc += dt
                s.sigma[j] = prop
                self.acc["jump"][0] += 1

    def register(self, temp=1.0, pen=1.0):
        """Joint independence proposal for one random overlapping multiplet pair (burn-in).

        Both shifts are drawn from a cell grid weighted by the least-squares fit
        of the two templates to the residual without them. That residual is the
        same before and after the move, so the reverse proposal density is exact.
        """
        p, s = self.p, self.state
        if not self.pairs:
            return
        a = s.lam / temp
        b = pen * s.lam * s.psi if p.use_wavelet else None
        if p.use_wavelet:
            collapsed_terms(self.w, a, b, s.tau, self.cache)
        gam = s.gamma
        G = REGISTER_CELLS
        # one pair per call keeps the cost flat as pairs grow quadratically with crowding
        for j, k in [self.pairs[self.rng.integers(len(self.pairs))]]:
            mj, mk = p.owner[j], p.owner[k]
            hj, hk = 2 * p.bounds[j] / G, 2 * p.bounds[k] / G
            cj = -p.bounds[j] + hj * (np.arange(G) + 0.5)
            ck = -p.bounds[k] + hk * (np.arange(G) + 0.5)
            A = s.beta[mj] * np.array([self._render(j, x, gam[mj]) for x in cj])
            B = s.beta[mk] * np.array([self._render(k, x, gam[mk]) for x in ck])
            r = p.y - self.yc + s.beta[mj] * self.tpl[j] + s.beta[mk] * self.tpl[k]
            sse = ((np.einsum("in,in->i", A, A) - 2 * A @ r)[:, None]
                   + (np.einsum("in,in->i", B, B) - 2 * B @ r)[None, :] + 2 * A @ B.T)
            logit = (-0.5 * a * sse - 0.5 * (cj ** 2 / p.sigma_sd[j] ** 2)[:, None]
                     - 0.5 * (ck ** 2 / p.sigma_sd[k] ** 2)[None, :])
            w = np.exp(logit - logit.max())
            prob = (1 - REGISTER_FLAT) * w / w.sum() + REGISTER_FLAT / G ** 2
            cell = self.rng.choice(G * G, p=prob.ravel())
            i, l = divmod(int(cell), G)
            pj = min(max(cj[i] + hj * (self.rng.random() - 0.5), -p.bounds[j]), p.bounds[j])
            pk = min(max(ck[l] + hk * (self.rng.random() - 0.5), -p.bounds[k]), p.bounds[k])
            i0 = min(int((s.sigma[j] + p.bounds[j]) / hj), G - 1)
            l0 = min(int((s.sigma[k] + p.bounds[k]) / hk), G - 1)
            log_r = (-0.5 * ((pj ** 2 - s.sigma[j] ** 2) / p.sigma_sd[j] ** 2
                             + (pk ** 2 - s.sigma[k] ** 2) / p.sigma_sd[k] ** 2)
                     + math.log(prob[i0, l0]) - math.log(prob[i, l]))
            tj = self._render(j, pj, gam[mj])
            tk = self._render(k, pk, gam[mk])
            dt = s.beta[mj] * (tj - self.tpl[j]) + s.beta[mk] * (tk - self.tpl[k])
            u = self._to_coef(dt)
            log_r += self._delta(u, 1.0, a, b)
            self.acc["register"][1] += 1
            if math.log(self.rng.random()) < log_r:
                self._apply(u, 1.0, a, b)
                self.cols[mj] += tj - self.tpl[j]
                self.cols[mk] += tk - self.tpl[k]
                self.tpl[j], self.tpl[k] = tj, tk
                self.yc += dt
                s.sigma[j], s.sigma[k] = pj, pk
                self.acc["register"][0] += 1

    def _exchange_moves(self, a, b):
        """Swap the absolute positions of two overlapping multiplets.

        A random walk cannot cross between the two labelings: every intermediate
        state leaves one region unfitted. The swap is an involution with unit
        Jacobian, so the acceptance ratio is the target ratio alone. Crowded
        catalogs visit a random subset of at most U pairs per sweep.
        """
        p, s = self.p, self.state
        gam = s.gamma
        pairs = self.pairs
        if len(pairs) > p.U:
            pairs = [pairs[i] for i in self.rng.choice(len(pairs), p.U, replace=False)]
        for j, k in pairs:
            cj, ck = p.multiplets[j].center_ppm, p.multiplets[k].center_ppm
            pj = ck + s.sigma[k] - cj
            pk = cj + s.sigma[j] - ck
            if abs(pj) > p.bounds[j] or abs(pk) > p.bounds[k]:
                continue
            mj, mk = p.owner[j], p.owner[k]
            log_r = -0.5 * ((pj ** 2 - s.sigma[j] ** 2) / p.sigma_sd[j] ** 2
                            + (pk ** 2 - s.sigma[k] ** 2) / p.sigma_sd[k] ** 2)
            tj = self._render(j, pj, gam[mj])
            tk = self._render(k, pk, gam[mk])
            dt = s.beta[mj] * (tj - self.tpl[j]) + s.beta[mk] * (tk - self.tpl[k])
            u = self._to_coef(dt)
            log_r += self._delta(u, 1.0, a, b)
            self.acc["exchange"][1] += 1
            if math.log(self.rng.random()) < log_r:
                self._apply(u, 1.0, a, b)
                self.cols[mj] += tj - self.tpl[j]
                self.cols[mk] += tk - self.tpl[k]
                self.tpl[j], self.tpl[k] = tj, tk
                self.yc += dt
                s.sigma[j], s.sigma[k] = pj, pk
                self.acc["exchange"][0] += 1

    def _beta_prior_delta(self, new, old):
        hp = self.hp
        return -0.5 * float(np.sum((new - hp.beta_mean) ** 2 - (old - hp.beta_mean) ** 2)) / hp.beta_sd ** 2

    def _width_moves(self, a, b):
        """Random walks on each v_m and on mu, each carrying beta along.

        The data pin down roughly the peak heights, so wider lines need larger
        concentrations: a step eps in log-width multiplies beta_m by exp(kappa_m*eps).
        The map is inverted by -eps and has Jacobian exp(kappa_m*eps).
        """
        p, s, hp = self.p, self.state, self.hp
        for m in range(p.M):
            eps = self.tscale * self.v_step[m] * self.rng.standard_normal()
            prop = s.v[m] + eps
            scale = math.exp(self.kappa[m] * eps)
            bnew = s.beta[m] * scale
            g = math.exp(s.mu + prop)
            new = {j: self._render(j, s.sigma[j], g) for j in self.members[m]}
            col = sum(new.values())
            dt = bnew * col - s.beta[m] * self.cols[m]
            u = self._to_coef(dt)
            log_r = (-0.5 * (prop ** 2 - s.v[m] ** 2) / hp.s_v ** 2
                     + self._beta_prior_delta(bnew, s.beta[m]) + self.kappa[m] * eps
                     + self._delta(u, 1.0, a, b))
            self.acc["width"][1] += 1
            self.win_v[1, m] += 1
            if math.log(self.rng.random()) < log_r:
                self._apply(u, 1.0, a, b)
                for j, t in new.items():
                    self.tpl[j] = t
                self.cols[m] = col
                self.yc += dt
                s.v[m] = prop
                s.beta[m] = bnew
                self.acc["width"][0] += 1
                self.win_v[0, m] += 1
        # spectrum-wide log-width
        eps = self.tscale * self.mu_step * self.rng.standard_normal()
        prop = s.mu + eps
        bnew = s.beta * np.exp(self.kappa * eps)
        gam = np.exp(prop + s.v)
        new_tpl = [self._render(j, s.sigma[j], gam[p.owner[j]]) for j in range(p.U)]
        cols = np.zeros_like(self.cols)
        for j in range(p.U):
            cols[p.owner[j]] += new_tpl[j]
        dt = bnew @ cols - s.beta @ self.cols
        u = self._to_coef(dt)
        log_r = (-0.5 * ((prop - hp.mu0) ** 2 - (s.mu - hp.mu0) ** 2) / hp.s_mu ** 2
                 + self._beta_prior_delta(bnew, s.beta) + float(self.kappa.sum()) * eps
                 + self._delta(u, 1.0, a, b))
        self.acc["mu"][1] += 1
        self.win_mu[1] += 1
        if math.log(self.rng.random()) < log_r:
            self._apply(u, 1.0, a, b)
            self.tpl = new_tpl
            self.cols = cols
            self.yc += dt
            s.mu = prop
            s.beta = bnew
            self.acc["mu"][0] += 1
            self.win_mu[0] += 1
        # mu + v_m alone sets the widths; mu given them is Gaussian under the prior
        g = s.mu + s.v
        prec = 1.0 / hp.s_mu ** 2 + p.M / hp.s_v ** 2
        mean = (hp.mu0 / hp.s_mu ** 2 + float(g.sum()) / hp.s_v ** 2) / prec
        s.mu = mean + self.rng.standard_normal() / math.sqrt(prec)
        s.v = g - s.mu

    def track_widths(self):
        """Accumulate (log gamma_m, log beta_m) pairs for the kappa regression (burn-in only)."""
        s = self.state
        ok = s.beta > 0
        x = s.mu + s.v
        y = np.log(np.where(ok, s.beta, 1.0))
        st = self.width_stats
        st[0] += ok
        st[1] += ok * x
        st[2] += ok * y
        st[3] += ok * x * x
        st[4] += ok * x * y

    def _noise_and_wavelet(self, temp, pen):
        p, s, hp, rng = self.p, self.state, self.hp, self.rng
        if not p.use_wavelet:
            r = p.y - self.yc
            shape = hp.a + 0.5 * p.n / temp
            rate = 0.5 * (hp.b + float(r @ r) / temp)
            s.lam = rng.gamma(shape, 1.0 / rate)
            self.acc["lambda"][0] += 1
            self.acc["lambda"][1] += 1
            return None
        a = s.lam / temp
        b = pen * s.lam * s.psi
        # theta | everything: independent truncated normals in the wavelet domain
        s.theta = truncnorm.sample(rng, *theta_conditional(self.w, a, b, s.tau))
        ws = p.layout.synthesize(s.theta)
        # latent padding slots
        if len(p.layout.pad_index):
            s.pad = ws[p.layout.pad_index] + math.sqrt(temp / s.lam) * rng.standard_normal(
                len(p.layout.pad_index))
            self._refresh_w()
        # lambda: Gamma proposal matched to the target, corrected for truncation normalizers
        r = self.w - s.theta
        shape = hp.a + 0.5 * p.n / temp + 0.5 * (p.n_aug - p.n) + 0.5 * self.K
        rate = 0.5 * (hp.b + float(r @ r) / temp + pen * float(np.sum(s.psi * s.theta ** 2)))
        lam_new, ok = lambda_step(rng, s.lam, shape, rate, s.tau, pen * s.psi)
        self.acc["lambda"][1] += 1
        if ok:
            s.lam = lam_new
            self.acc["lambda"][0] += 1
        take = psi_step(rng, s, hp, pen)
        self.acc["psi"][0] += int(take.sum())
        self.acc["psi"][1] += self.K
        take = tau_step(rng, s, hp, pen)
        self.acc["tau"][0] += int(take.sum())
        self.acc["tau"][1] += self.K
        return ws

    def sweep(self, temp=1.0, pen=1.0):
        """One full scan; returns the synthesized wavelet signal (padded layout)."""
        p, s = self.p, self.state
        # tempered targets are wider by sqrt(temp); scaling the steps with it lets
        # adaptation track a fixed target while the temperature decays
        self.tscale = math.sqrt(temp)
        a = s.lam / temp
        b = pen * s.lam * s.psi if p.use_wavelet else None
        if p.use_wavelet:
            collapsed_terms(self.w, a, b, s.tau, self.cache)
        if p.M:
            self._beta_block(a, b)
            if self.cfg.update_sigma:
                self._sigma_moves(a, b)
                self._exchange_moves(a, b)
                self._jump_moves(a, b)
            if self.cfg.update_width:
                self._width_moves(a, b)
        return self._noise_and_wavelet(temp, pen)

    def adapt_steps(self, iteration):
        t = self.cfg.target_accept
        self.sigma_step = adapt(self.sigma_step, *self.win_sigma, iteration, t)
        self.sigma_step = np.minimum(self.sigma_step, 2 * self.p.bounds)
        self.v_step = adapt(self.v_step, *self.win_v, iteration, t)
        self.mu_step = float(adapt([self.mu_step], [self.win_mu[0]], [self.win_mu[1]],
                                   iteration, t)[0])
        self.win_sigma[:] = 0
        self.win_v[:] = 0
        self.win_mu[:] = 0
        n, sx, sy, sxx, sxy = self.width_stats
        enough = n >= 2 * self.cfg.adapt_window
        var = sxx - sx * sx / np.maximum(n, 1)
        cov = sxy - sx * sy / np.maximum(n, 1)
        fit = np.where(var > 0, cov / np.where(var > 0, var, 1.0), KAPPA0)
        self.kappa = np.where(enough, np.clip(fit, 0.0, 2.0), self.kappa)

    def steps(self):
        return {"sigma": self.sigma_step.copy(), "v": self.v_step.copy(), "mu": self.mu_step,
                "kappa": self.kappa.copy()}


def sweep(state, problem, cfg=None, rng=None, temp=1.0, penalty=1.0):
    """Apply one full scan to a copy of ``state`` and return it."""
    cfg = cfg or SamplerConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    runner = _Runner(problem, cfg, rng, state.copy())
    runner.sweep(temp, penalty)
    return runner.state


def run(spec, cat, hp: Hyperparameters = None, cfg: SamplerConfig = None,
        problem: Problem = None) -> Chain:
    """Burn-in (tempered, penalized, adaptive) followed by recorded sampling."""
    cfg = (cfg or SamplerConfig()).validate()
    if problem is None:
        problem = Problem(spec, cat, hp, levels=cfg.levels, use_wavelet=cfg.use_wavelet)
    hp = problem.hp
    rng = np.random.default_rng(cfg.seed)
    runner = _Runner(problem, cfg, rng)
    B, S = cfg.burnin_iters, cfg.sample_iters
    temps = geometric_schedule(hp.burnin_temp0, B)
    pens = geometric_schedule(hp.psi_penalty0, B)
    step_trace = []
    for t in range(B):
        runner.sweep(temps[t], pens[t])
        if (t + 1) % REGISTER_EVERY == 0:
            runner.register(temps[t], pens[t])
        if t >= B // 4:
            runner.track_widths()
        if (t + 1) % cfg.adapt_window == 0:
            runner.adapt_steps(t + 1)
            step_trace.append((t + 1, runner.steps()))
        if cfg.progress_every and (t + 1) % cfg.progress_every == 0:
            log.info("%s burn-in %d/%d accept %s", spec.id, t + 1, B, _fmt_rates(runner.acc))
    acc_burn = {k: tuple(v) for k, v in runner.acc.items()}
    runner.acc = {k: [0, 0] for k in MOVES}

    n_keep = S // cfg.thin
    M, U, K = problem.M, problem.U, problem.K
    rec_w = cfg.record_theta and problem.use_wavelet
    out = {
        "beta": np.empty((n_keep, M)), "sigma": np.empty((n_keep, U)), "mu": np.empty(n_keep),
        "v": np.empty((n_keep, M)), "lam": np.empty(n_keep),
        "theta": np.empty((n_keep, K)) if rec_w else None,
        "psi": np.empty((n_keep, K)) if rec_w else None,
        "tau": np.empty((n_keep, K)) if rec_w else None,
    }
    yc_sum = np.zeros(problem.n)
    yu_sum = np.zeros(problem.n)
    k = 0
    s = runner.state
    for t in range(S):
        ws = runner.sweep(1.0, 1.0)
        if (t + 1) % cfg.thin:
            continue
        if k >= n_keep:
            break
        out["beta"][k] = s.beta
        out["sigma"][k] = s.sigma
        out["mu"][k] = s.mu
        out["v"][k] = s.v
        out["lam"][k] = s.lam
        if rec_w:
            out["theta"][k] = s.theta
            out["psi"][k] = s.psi
            out["tau"][k] = s.tau
        yc_sum += runner.yc
        if ws is not None:
            yu_sum += problem.layout.observed(ws)
        k += 1
        if cfg.progress_every and (t + 1) % cfg.progress_every == 0:
            log.info("%s sampling %d/%d accept %s", spec.id, t + 1, S, _fmt_rates(runner.acc))
    return Chain(
        spectrum_id=spec.id, metabolites=problem.catalog.names,
        multiplets=[mu.key for mu in problem.multiplets],
        theta=out["theta"], psi=out["psi"], tau=out["tau"],
        beta=out["beta"], sigma=out["sigma"], mu=out["mu"], v=out["v"], lam=out["lam"],
        yc_mean=yc_sum / max(n_keep, 1), yu_mean=yu_sum / max(n_keep, 1),
        accept_burnin=acc_burn, accept_sampling={k: tuple(v) for k, v in runner.acc.items()},
        temps=temps, penalties=pens, steps=runner.steps(), step_trace=step_trace,
        seed=cfg.seed, ppm=problem.grid)


def _fmt_rates(acc):
    return " ".join(f"{k}={a / p:.2f}" for k, (a, p) in acc.items() if p)


@dataclass
class BatchFailure:
    index: int
    spectrum_id: str
    message: str

    def __bool__(self):
        return False


def _run_one(args):
    index, spec, cat, hp, cfg = args
    try:
        return run(spec, cat, hp, cfg)
    except Exception as exc:  # isolate per-spectrum failures
        return BatchFailure(index, getattr(spec, "id", str(index)), f"{type(exc).__name__}: {exc}")


def batch_seed(seed, index):
    return int(seed) ^ int(index)


def run_batch(specs, cat, hp=None, cfg=None, workers=1) -> list:
    """Independent chains per spectrum, seeded ``seed XOR index``, in input order.

    Failed spectra yield a :class:`BatchFailure` in their slot.
    """
    cfg = (cfg or SamplerConfig()).validate()
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    jobs = [(i, s, cat, hp, replace(cfg, seed=batch_seed(cfg.seed, i))) for i, s in enumerate(specs)]
    if workers == 1 or len(jobs) <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_run_one, jobs))


def default_workers():
    env = os.environ.get("SPECFIT_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"SPECFIT_WORKERS must be an integer, got {env!r}") from None
    return 1
