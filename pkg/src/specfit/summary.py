"""Posterior summaries, fit decomposition, densities and the integration baseline."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DomainError, EmptyWindowError
from .spectrum import Spectrum, atomic_write
from .template import TemplateCatalog, build_design_matrix, restrict_catalog, segment_intervals
from .wavelet import SegmentedPlan

QUANTILES = (2.5, 25.0, 50.0, 75.0, 97.5)
STAT_COLUMNS = ["mean", "sd"] + [f"q{q:g}" for q in QUANTILES]


def _stats(x) -> dict:
    x = np.asarray(x, dtype=float)
    q = np.percentile(x, QUANTILES, method="linear")
    out = {"mean": float(x.mean()), "sd": float(x.std(ddof=1)) if len(x) > 1 else 0.0}
    out.update({c: float(v) for c, v in zip(STAT_COLUMNS[2:], q)})
    return out


@dataclass
class PosteriorSummary:
    spectrum_id: str
    beta: dict          # metabolite -> stats
    sigma: dict         # (metabolite, multiplet_id) -> stats
    gamma: dict         # metabolite -> stats
    lam: dict
    acceptance: dict
    split_means: dict = field(default_factory=dict)


def summarize(chain) -> PosteriorSummary:
    """Means, sds and quantiles of every recorded scalar of ``chain``."""
    if len(chain) == 0:
        raise DomainError("cannot summarize an empty chain")
    beta = {m: _stats(chain.beta[:, k]) for k, m in enumerate(chain.metabolites)}
    sigma = {key: _stats(chain.sigma[:, j]) for j, key in enumerate(chain.multiplets)}
    gam = chain.gamma
    gamma = {m: _stats(gam[:, k]) for k, m in enumerate(chain.metabolites)}
    # simple split-chain check: first vs second half means of beta
    h = len(chain) // 2
    split = {}
    if h >= 1:
        for k, m in enumerate(chain.metabolites):
            split[m] = (float(chain.beta[:h, k].mean()), float(chain.beta[h:, k].mean()))
    return PosteriorSummary(chain.spectrum_id, beta, sigma, gamma, _stats(chain.lam),
                            chain.acceptance_rates("sampling"), split)


@dataclass
class FitDecomposition:
    ppm: np.ndarray
    y: np.ndarray
    fit: np.ndarray
    yc: np.ndarray
    yu: np.ndarray
    residual: np.ndarray


def reconstruct_fit(chain, spec: Spectrum, cat: TemplateCatalog,
                    plan: Optional[SegmentedPlan] = None, levels=None) -> FitDecomposition:
    """Posterior-mean split of the fit into catalogued and wavelet parts.

    With recorded ``theta`` both parts are re-averaged from the samples;
    otherwise the running means kept by the sampler are used.
    """
    y = np.asarray(spec.intensity, dtype=float)
    if chain.theta is not None and len(chain):
        sub = restrict_catalog(cat, segment_intervals(spec.ppm, spec.segments))
        if plan is None:
            plan = SegmentedPlan(spec.segments, levels)
        if chain.theta.shape[1] != plan.size:
            raise ConfigError("recorded theta does not match the wavelet layout")
        yc = np.zeros(len(y))
        yu = np.zeros(len(y))
        gam = chain.gamma
        for t in range(len(chain)):
            if len(sub):
                yc += build_design_matrix(sub, chain.sigma[t], gam[t], spec.ppm) @ chain.beta[t]
            yu += plan.observed(plan.synthesize(chain.theta[t]))
        yc /= len(chain)
        yu /= len(chain)
    elif chain.yc_mean is not None and chain.yu_mean is not None:
        yc = np.asarray(chain.yc_mean, dtype=float)
        yu = np.asarray(chain.yu_mean, dtype=float)
    else:
        raise ConfigError("chain has neither recorded theta nor fit summaries")
    fit = yc + yu
    return FitDecomposition(np.asarray(spec.ppm), y, fit, yc, yu, y - fit)


def silverman_bandwidth(samples) -> float:
    x = np.asarray(samples, dtype=float)
    n = len(x)
    sd = x.std(ddof=1)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return 0.9 * spread * n ** -0.2


def density_estimate(samples, grid) -> np.ndarray:
    """Gaussian kernel density at ``grid`` with Silverman's rule-of-thumb bandwidth."""
    x = np.asarray(samples, dtype=float).ravel()
    if len(x) < 2:
        raise DomainError("density estimate needs at least 2 samples")
    bw = silverman_bandwidth(x)
    if not bw > 0:
        raise DomainError("zero bandwidth: samples are all equal")
    g = np.asarray(grid, dtype=float)
    out = np.zeros(g.shape)
    # chunked to bound memory for long chains
    for start in range(0, len(x), 4096):
        z = (g[:, None] - x[None, start:start + 4096]) / bw
        out += np.exp(-0.5 * z * z).sum(axis=1)
    return out / (len(x) * bw * np.sqrt(2 * np.pi))


def count_modes(samples, n_grid=512, min_rel_height=0.01) -> int:
    """Number of local maxima of the Silverman KDE over the sample range +- 3 bandwidths.

    Maxima lower than ``min_rel_height`` times the global maximum are not counted;
    at that height a bump is the kernel of one or two isolated tail samples.
    """
    x = np.asarray(samples, dtype=float)
    bw = silverman_bandwidth(x)
    if not bw > 0:
        return 1
    grid = np.linspace(x.min() - 3 * bw, x.max() + 3 * bw, n_grid)
    d = density_estimate(x, grid)
    # plateaus count once
    keep = np.concatenate([[True], np.diff(d) != 0])
    d = d[keep]
    inner = (d[1:-1] > d[:-2]) & (d[1:-1] > d[2:]) & (d[1:-1] >= min_rel_height * d.max())
    return int(inner.sum())


def integrate_baseline(spec: Spectrum, cat: TemplateCatalog, win_pad=0.02) -> dict:
    """Trapezoid area of each metabolite's largest multiplet, per proton.

    The window is the catalogued centre +- ``win_pad`` clipped to the axis.
    """
    ppm = np.asarray(spec.ppm)
    y = np.asarray(spec.intensity, dtype=float)
    out = {}
    for m in cat.metabolites:
        inside = [mu for mu in m.multiplets if ppm[0] <= mu.center_ppm <= ppm[-1]]
        if not inside:
            raise EmptyWindowError(f"{m.name}: no multiplet centre inside the spectrum axis")
        mu = max(inside, key=lambda q: q.proton_count)
        sel = (ppm >= mu.center_ppm - win_pad) & (ppm <= mu.center_ppm + win_pad)
        if sel.sum() < 2:
            raise EmptyWindowError(f"{m.name}: integration window holds fewer than 2 points")
        out[m.name] = float(np.trapezoid(y[sel], ppm[sel])) / mu.proton_count
    return out


@dataclass
class ErrorReport:
    metabolites: list
    truth: np.ndarray
    estimates: dict      # method -> aligned estimates
    scale: dict          # method -> fitted scalar
    abs_error: dict
    rel_error: dict
    rmse: dict


def align_scale(truth, est) -> float:
    """Least-squares scalar ``s`` minimising ``||truth - s * est||``."""
    den = float(est @ est)
    return float(truth @ est) / den if den > 0 else 0.0


def compare_errors(truth, mcmc, baseline) -> ErrorReport:
    """Errors of both methods after one global least-squares rescaling each.

    Each argument maps metabolite name to a value (or is an aligned array);
    pooled arrays over several spectra are accepted as 2-D ``(spectra, metabolites)``.
    """
    names, t = _as_array(truth)
    _, m = _as_array(mcmc, names)
    _, b = _as_array(baseline, names)
    if not (t.shape == m.shape == b.shape):
        raise DomainError("truth and estimates are not aligned")
    est, scale, ae, re, rmse = {}, {}, {}, {}, {}
    for key, e in (("mcmc", m), ("baseline", b)):
        s = align_scale(t.ravel(), e.ravel())
        a = s * e
        est[key] = a
        scale[key] = s
        ae[key] = np.abs(a - t)
        with np.errstate(divide="ignore", invalid="ignore"):
            re[key] = np.where(t != 0, (a - t) / t, np.nan)
        rmse[key] = float(np.sqrt(np.mean((a - t) ** 2)))
    return ErrorReport(names, t, est, scale, ae, re, rmse)


def _as_array(values, names=None):
    if isinstance(values, dict):
        keys = list(values)
        if names is not None:
            if sorted(keys) != sorted(names):
                raise DomainError(f"metabolite lists differ: {sorted(keys)} vs {sorted(names)}")
            keys = list(names)
        return keys, np.asarray([values[k] for k in keys], dtype=float).T
    arr = np.asarray(values, dtype=float)
    if names is not None and arr.shape[-1] != len(names):
        raise DomainError("estimate array does not match the metabolite list")
    return (list(names) if names is not None else list(range(arr.shape[-1]))), arr


# --- CSV output --------------------------------------------------------------

def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return buf.getvalue()


def write_csv(path, header, rows):
    atomic_write(path, _csv_text(header, rows))


def write_chain_outputs(outdir, chain, spec: Spectrum, cat: TemplateCatalog,
                        baseline: Optional[dict] = None):
    """Write every per-spectrum CSV for one chain into ``outdir``; returns file names."""
    os.makedirs(outdir, exist_ok=True)
    s = summarize(chain)
    files = []

    def put(name, header, rows):
        write_csv(os.path.join(outdir, name), header, rows)
        files.append(name)

    put("summary.csv", ["metabolite"] + STAT_COLUMNS + ["gamma_mean"],
        [[m] + [s.beta[m][c] for c in STAT_COLUMNS] + [s.gamma[m]["mean"]]
         for m in chain.metabolites])
    put("sigma_summary.csv", ["metabolite", "multiplet"] + STAT_COLUMNS,
        [[k[0], k[1]] + [s.sigma[k][c] for c in STAT_COLUMNS] for k in chain.multiplets])
    fit = reconstruct_fit(chain, spec, cat)
    put("fit.csv", ["ppm", "y", "fit", "yc", "yu", "residual"],
        zip(fit.ppm, fit.y, fit.fit, fit.yc, fit.yu, fit.residual))
    put("beta_samples.csv", ["iteration"] + list(chain.metabolites),
        ([i] + list(row) for i, row in enumerate(chain.beta)))
    put("sigma_samples.csv", ["iteration"] + [f"{a}:{b}" for a, b in chain.multiplets],
        ([i] + list(row) for i, row in enumerate(chain.sigma)))
    rows = []
    for phase, counts in (("burnin", chain.accept_burnin), ("sampling", chain.accept_sampling)):
        for move, (acc, prop) in counts.items():
            rows.append([phase, move, acc, prop, acc / prop if prop else float("nan")])
    rows.append(["sampling", "lambda_mean", "", "", s.lam["mean"]])
    put("diagnostics.csv", ["phase", "quantity", "accepted", "proposed", "rate"], rows)
    if chain.theta is not None:
        put("theta_samples.csv", ["iteration"] + [f"theta_{i}" for i in range(chain.theta.shape[1])],
            ([i] + list(row) for i, row in enumerate(chain.theta)))
    if baseline is not None:
        put("baseline.csv", ["metabolite", "estimate"], [[k, v] for k, v in baseline.items()])
    return files
