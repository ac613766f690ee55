"""Periodized orthonormal DWT with symlet-6 filters.

Coefficients are stored level-major: level-1 details first, then level 2,
..., level J details, then the final approximation block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import DomainError

# least-asymmetric Daubechies, 6 vanishing moments (reconstruction low-pass)
SYM6_LOWPASS = np.array([
    0.015404109327044824299, 0.0034907120842221625153, -0.1179901111485200254,
    -0.048311742585698054971, 0.49105594192797373304, 0.78764114102865099607,
    0.33792942172816583271, -0.072637522786376583464, -0.021060292512370847992,
    0.044724901770781384663, 0.001767711864254007741, -0.0078007083250323804142,
])


def quadrature_mirror(h):
    n = np.arange(len(h))
    return (-1.0) ** n * h[::-1]


def check_filters(h, tol=1e-12):
    """Raise unless ``h`` is an orthonormal low-pass filter of even length."""
    h = np.asarray(h, dtype=float)
    g = quadrature_mirror(h)
    L = len(h)
    ok = (L % 2 == 0 and abs(h.sum() - np.sqrt(2)) < tol and abs(np.dot(h, h) - 1) < tol
          and abs(g.sum()) < tol)
    for j in range(1, L // 2):
        ok = ok and abs(np.dot(h[2 * j:], h[:L - 2 * j])) < tol
    if not ok:
        raise DomainError("filter bank is not orthonormal")


check_filters(SYM6_LOWPASS)


@dataclass(frozen=True)
class WaveletPlan:
    n_signal: int
    n_padded: int
    levels: int
    lowpass: np.ndarray
    highpass: np.ndarray
    boundary: str = "periodized"

    @property
    def blocks(self):
        """(start, stop) of each coefficient block in level-major order."""
        out, start, L = [], 0, self.n_padded
        for _ in range(self.levels):
            L //= 2
            out.append((start, start + L))
            start += L
        out.append((start, self.n_padded))
        return out

    def level_of(self):
        """Level index per coefficient; the approximation block gets ``levels + 1``."""
        lev = np.empty(self.n_padded, dtype=int)
        for j, (a, b) in enumerate(self.blocks, start=1):
            lev[a:b] = j
        return lev


def make_plan(n, levels=None) -> WaveletPlan:
    n = int(n)
    if n < 2:
        raise DomainError(f"signal length must be >= 2, got {n}")
    k = int(np.ceil(np.log2(n)))
    if levels is None:
        levels = max(1, k - 3)
    levels = int(levels)
    if not 1 <= levels <= k:
        raise DomainError(f"levels must lie in [1, {k}] for n={n}")
    N = 2 ** k
    h = SYM6_LOWPASS.copy()
    g = quadrature_mirror(h)
    h.setflags(write=False)
    g.setflags(write=False)
    return WaveletPlan(n, N, levels, h, g)


def pad(plan: WaveletPlan, y):
    """Half-sample symmetric extension of ``y`` on the right up to ``n_padded``."""
    y = np.asarray(y, dtype=float)
    extra = plan.n_padded - plan.n_signal
    if extra == 0:
        return y.copy()
    return np.concatenate([y, y[::-1][:extra]])


@njit(cache=True)
def _analyze(x, h, g, levels, out):
    taps = h.shape[0]
    L = x.shape[0]
    ext = np.empty(L + taps)
    ext[:L] = x
    pos = 0
    for _ in range(levels):
        for j in range(taps):
            ext[L + j] = ext[j % L]
        half = L // 2
        for k in range(half):
            s_lo = 0.0
            s_hi = 0.0
            base = 2 * k
            for n in range(taps):
                v = ext[base + n]
                s_lo += h[n] * v
                s_hi += g[n] * v
            ext[k] = s_lo
            out[pos + k] = s_hi
        pos += half
        L = half
    a = ext[:L]
    for k in range(L):
        out[pos + k] = a[k]


@njit(cache=True)
def _synthesize(theta, h, g, levels, out):
    taps = h.shape[0]
    N = theta.shape[0]
    L = N >> levels
    a = theta[N - L:].copy()
    stop = N - L
    for _ in range(levels):
        d = theta[stop - L:stop]
        stop -= L
        L2 = 2 * L
        x = np.zeros(L2 + taps)
        for k in range(L):
            ak = a[k]
            dk = d[k]
            base = 2 * k
            for n in range(taps):
                x[base + n] += h[n] * ak + g[n] * dk
        for j in range(taps):
            x[j % L2] += x[L2 + j]
        a = x[:L2]
        L = L2
    out[:] = a


def analyze(plan: WaveletPlan, x):
    """Forward transform of an already padded vector (length ``n_padded``)."""
    out = np.empty(plan.n_padded)
    _analyze(np.ascontiguousarray(x, dtype=float), plan.lowpass, plan.highpass, plan.levels, out)
    return out


def synthesize(plan: WaveletPlan, theta):
    """Inverse transform onto the full padded domain."""
    out = np.empty(plan.n_padded)
    _synthesize(np.ascontiguousarray(theta, dtype=float), plan.lowpass, plan.highpass,
                plan.levels, out)
    return out


def forward(plan: WaveletPlan, y):
    y = np.asarray(y, dtype=float)
    if y.shape != (plan.n_signal,):
        raise DomainError(f"expected length {plan.n_signal}, got {y.shape}")
    return analyze(plan, pad(plan, y))


def inverse(plan: WaveletPlan, theta):
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (plan.n_padded,):
        raise DomainError(f"expected {plan.n_padded} coefficients, got {theta.shape}")
    return synthesize(plan, theta)[:plan.n_signal]


def column(plan: WaveletPlan, i):
    """Synthesis basis function ``i`` restricted to the unpadded region."""
    if not 0 <= i < plan.n_padded:
        raise DomainError(f"coefficient index {i} out of range")
    e = np.zeros(plan.n_padded)
    e[i] = 1.0
    return inverse(plan, e)


class SegmentedPlan:
    """Block-diagonal transform over independently padded segments.

    The padded layout concatenates each segment's ``[observed, pad]`` block;
    ``obs_index`` and ``pad_index`` locate observed and padding slots in it.
    """

    def __init__(self, segments, levels=None):
        self.segments = tuple((int(a), int(b)) for a, b in segments)
        self.plans = [make_plan(b - a, levels if levels is None else
                                min(levels, int(np.ceil(np.log2(b - a)))))
                      for a, b in self.segments]
        self.offsets = np.cumsum([0] + [p.n_padded for p in self.plans])
        self.size = int(self.offsets[-1])
        self.n_obs = self.segments[-1][1] - self.segments[0][0]
        obs, padi = [], []
        for (a, b), p, off in zip(self.segments, self.plans, self.offsets):
            obs.append(off + np.arange(b - a))
            padi.append(off + np.arange(b - a, p.n_padded))
        self.obs_index = np.concatenate(obs)
        self.pad_index = np.concatenate(padi).astype(int)

    def embed(self, y, pad_values=None):
        z = np.zeros(self.size)
        z[self.obs_index] = y
        if pad_values is not None:
            z[self.pad_index] = pad_values
        return z

    def reflect_pad(self, y):
        """Symmetric-reflection padding values for observed vector ``y``."""
        return np.concatenate([
            pad(p, y[a:b])[b - a:] for (a, b), p in zip(self.segments, self.plans)])

    def analyze(self, z):
        if len(self.plans) == 1:
            return analyze(self.plans[0], z)
        return np.concatenate([analyze(p, z[o:o + p.n_padded])
                               for p, o in zip(self.plans, self.offsets)])

    def synthesize(self, theta):
        if len(self.plans) == 1:
            return synthesize(self.plans[0], theta)
        return np.concatenate([synthesize(p, theta[o:o + p.n_padded])
                               for p, o in zip(self.plans, self.offsets)])

    def observed(self, z):
        return z[self.obs_index]
