"""Truncated normal sampling and densities, stable far into the tails.

Sampling is by inversion. Intervals lying entirely in one tail are inverted
in log space through ``log_ndtr``/``ndtri_exp`` so that e.g. a lower bound
40 standard deviations above the mean still yields exact-looking draws.
"""

from __future__ import annotations

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri, ndtri_exp

_LOG_2PI = np.log(2 * np.pi)


def log_sf(z):
    """log P(Z > z) for standard normal Z."""
    return log_ndtr(-np.asarray(z, dtype=float))


def _log_diff(la, lb):
    # log(exp(la) - exp(lb)) for la >= lb
    return la + np.log1p(-np.exp(lb - la))


def log_mass(alpha, beta):
    """log P(alpha <= Z <= beta), computed in whichever tail is more accurate."""
    alpha, beta = np.broadcast_arrays(np.asarray(alpha, float), np.asarray(beta, float))
    out = np.empty(alpha.shape)
    upper = alpha > 0
    lower = beta < 0
    mid = ~(upper | lower)
    with np.errstate(divide="ignore", invalid="ignore"):
        out[upper] = _log_diff(log_ndtr(-alpha[upper]), log_ndtr(-beta[upper]))
        out[lower] = _log_diff(log_ndtr(beta[lower]), log_ndtr(alpha[lower]))
        out[mid] = np.log(ndtr(beta[mid]) - ndtr(alpha[mid]))
    return out


def _same_shape(*arrays):
    arrays = [np.asarray(v, dtype=float) for v in arrays]
    if all(a.shape == arrays[0].shape for a in arrays[1:]):
        return arrays
    return np.broadcast_arrays(*arrays)


def _upper_tail(alpha, beta, u):
    # sample s = P(Z > z) uniformly between sf(beta) and sf(alpha)
    la = log_ndtr(-alpha)
    lb = log_ndtr(-beta)
    return -ndtri_exp(la + np.log1p(u * np.expm1(lb - la)))


def _lower_tail(alpha, beta, u):
    la = log_ndtr(alpha)
    lb = log_ndtr(beta)
    return ndtri_exp(lb + np.log1p(u * np.expm1(la - lb)))


def _middle(alpha, beta, u):
    pa = ndtr(alpha)
    return ndtri(pa + u * (ndtr(beta) - pa))


def sample_standard(rng, alpha, beta=np.inf):
    """Draw Z ~ N(0, 1) conditioned on alpha <= Z <= beta, elementwise."""
    alpha, beta = _same_shape(alpha, beta)
    shape = alpha.shape
    alpha = alpha.ravel()
    beta = beta.ravel()
    u = rng.random(alpha.shape)
    upper = alpha > 0
    lower = beta < 0
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if upper.all():
            z = _upper_tail(alpha, beta, u)
        elif lower.all():
            z = _lower_tail(alpha, beta, u)
        else:
            z = np.empty(alpha.shape)
            mid = ~(upper | lower)
            if upper.any():
                z[upper] = _upper_tail(alpha[upper], beta[upper], u[upper])
            if lower.any():
                z[lower] = _lower_tail(alpha[lower], beta[lower], u[lower])
            z[mid] = _middle(alpha[mid], beta[mid], u[mid])
    z = np.minimum(np.maximum(z, alpha), beta)
    return z.reshape(shape)


def sample(rng, mean, sd, lower=-np.inf, upper=np.inf):
    """Draw from N(mean, sd^2) truncated to [lower, upper] (broadcasting).

    ``sd == 0`` returns ``mean`` clipped into the interval.
    """
    mean, sd, lower, upper = _same_shape(mean, sd, lower, upper)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = (lower - mean) / sd
        b = (upper - mean) / sd
    degenerate = ~(sd > 0) | (lower >= upper)
    if degenerate.any():
        a = np.where(degenerate, 0.0, a)
        b = np.where(degenerate, 1.0, b)
        x = np.where(degenerate, np.clip(mean, lower, upper), mean + sd * sample_standard(rng, a, b))
    else:
        x = mean + sd * sample_standard(rng, a, b)
    x = np.minimum(np.maximum(x, lower), upper)
    return x if x.ndim else float(x)


def logpdf(x, mean, sd, lower=-np.inf, upper=np.inf):
    """Log density of the truncated normal; ``-inf`` outside [lower, upper]."""
    x, mean, sd, lower, upper = np.broadcast_arrays(*(np.asarray(v, dtype=float)
                                                       for v in (x, mean, sd, lower, upper)))
    z = (x - mean) / sd
    val = -0.5 * z * z - 0.5 * _LOG_2PI - np.log(sd) - log_mass((lower - mean) / sd,
                                                                (upper - mean) / sd)
    val = np.where((x < lower) | (x > upper), -np.inf, val)
    return val if val.ndim else float(val)


def mean(mu, sd, lower=-np.inf, upper=np.inf):
    """Analytic mean of the truncated normal."""
    mu, sd, lower, upper = np.broadcast_arrays(*(np.asarray(v, dtype=float)
                                                  for v in (mu, sd, lower, upper)))
    a = (lower - mu) / sd
    b = (upper - mu) / sd
    lz = log_mass(a, b)
    with np.errstate(over="ignore", invalid="ignore"):
        pa = np.where(np.isfinite(a), np.exp(-0.5 * a * a - 0.5 * _LOG_2PI - lz), 0.0)
        pb = np.where(np.isfinite(b), np.exp(-0.5 * b * b - 0.5 * _LOG_2PI - lz), 0.0)
    out = mu + sd * (pa - pb)
    return out if out.ndim else float(out)


def variance(mu, sd, lower=-np.inf, upper=np.inf):
    mu, sd, lower, upper = np.broadcast_arrays(*(np.asarray(v, dtype=float)
                                                  for v in (mu, sd, lower, upper)))
    a = (lower - mu) / sd
    b = (upper - mu) / sd
    lz = log_mass(a, b)
    pa = np.where(np.isfinite(a), np.exp(-0.5 * a * a - 0.5 * _LOG_2PI - lz), 0.0)
    pb = np.where(np.isfinite(b), np.exp(-0.5 * b * b - 0.5 * _LOG_2PI - lz), 0.0)
    aa = np.where(np.isfinite(a), a * pa, 0.0)
    bb = np.where(np.isfinite(b), b * pb, 0.0)
    out = sd ** 2 * (1 + aa - bb - (pa - pb) ** 2)
    return out if out.ndim else float(out)
