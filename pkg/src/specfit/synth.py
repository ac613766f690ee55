"""Synthetic spectra with known concentrations, shifts, widths and interference."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .spectrum import Spectrum, atomic_write
from .template import (TemplateCatalog, build_catalog, build_design_matrix, lorentzian,
                       make_multiplet)

J_PPM = 0.0117  # ~7 Hz at 600 MHz


@dataclass
class SynthSpec:
    name: str
    catalog: TemplateCatalog
    true_beta: np.ndarray
    true_sigma: np.ndarray
    true_gamma: np.ndarray
    grid: np.ndarray
    noise_sd: float = 0.0
    extra_peaks: list = field(default_factory=list)  # (center, area, gamma)
    seed: int = 0

    def __post_init__(self):
        self.true_beta = np.asarray(self.true_beta, dtype=float)
        self.true_sigma = np.asarray(self.true_sigma, dtype=float)
        self.true_gamma = np.asarray(self.true_gamma, dtype=float)
        self.grid = np.asarray(self.grid, dtype=float)
        if np.any(self.true_beta < 0) or self.noise_sd < 0:
            raise ConfigError("true_beta and noise_sd must be nonnegative")
        if not np.all(np.diff(self.grid) > 0):
            raise ConfigError("grid must be ascending")


@dataclass
class TruthRecord:
    spectrum_id: str
    metabolites: list
    beta: np.ndarray
    gamma: np.ndarray
    multiplets: list
    sigma: np.ndarray
    extras: list
    noise_sd: float

    def rows(self):
        sid = self.spectrum_id
        out = [(sid, "noise_sd", "", "", self.noise_sd)]
        for name, b, g in zip(self.metabolites, self.beta, self.gamma):
            out.append((sid, "beta", name, "", float(b)))
            out.append((sid, "gamma", name, "", float(g)))
        for (name, mid), s in zip(self.multiplets, self.sigma):
            out.append((sid, "sigma", name, mid, float(s)))
        for k, (c, a, g) in enumerate(self.extras):
            out.append((sid, "extra_center", "", str(k), float(c)))
            out.append((sid, "extra_area", "", str(k), float(a)))
            out.append((sid, "extra_gamma", "", str(k), float(g)))
        return out


TRUTH_COLUMNS = ["spectrum", "quantity", "metabolite", "multiplet", "value"]


def write_truth(path, records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRUTH_COLUMNS)
    for rec in records:
        for sid, q, name, mid, val in rec.rows():
            w.writerow([sid, q, name, mid, repr(float(val))])
    atomic_write(path, buf.getvalue())


def read_truth(path) -> list:
    """Inverse of :func:`write_truth`; records come back in file order."""
    recs = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in TRUTH_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ConfigError(f"{path}: missing columns {missing}")
        for row in reader:
            sid = row["spectrum"]
            r = recs.setdefault(sid, {"beta": {}, "gamma": {}, "sigma": {}, "extra": {},
                                      "noise_sd": 0.0, "order": [], "morder": []})
            q, name, mid, val = row["quantity"], row["metabolite"], row["multiplet"], float(row["value"])
            if q == "noise_sd":
                r["noise_sd"] = val
            elif q in ("beta", "gamma"):
                if name not in r["order"]:
                    r["order"].append(name)
                r[q][name] = val
            elif q == "sigma":
                r["morder"].append((name, mid))
                r["sigma"][(name, mid)] = val
            elif q.startswith("extra_"):
                r["extra"].setdefault(int(mid), {})[q[6:]] = val
            else:
                raise ConfigError(f"{path}: unknown quantity {q!r}")
    out = []
    for sid, r in recs.items():
        extras = [(e["center"], e["area"], e["gamma"]) for _, e in sorted(r["extra"].items())]
        out.append(TruthRecord(
            sid, r["order"], np.array([r["beta"][n] for n in r["order"]]),
            np.array([r["gamma"][n] for n in r["order"]]), r["morder"],
            np.array([r["sigma"][k] for k in r["morder"]]), extras, r["noise_sd"]))
    return out


def noiseless(s: SynthSpec, include_extras=True):
    T = build_design_matrix(s.catalog, s.true_sigma, s.true_gamma, s.grid)
    y = T @ s.true_beta
    if include_extras:
        for c, a, g in s.extra_peaks:
            y = y + a * lorentzian(s.grid, c, g)
    return y


def generate(s: SynthSpec):
    """y = templates + extra peaks + white Gaussian noise; returns (Spectrum, TruthRecord)."""
    y = noiseless(s)
    if s.noise_sd > 0:
        y = y + np.random.default_rng(s.seed).normal(0.0, s.noise_sd, size=len(y))
    spec = Spectrum(id=s.name, ppm=s.grid, intensity=y)
    truth = TruthRecord(s.name, s.catalog.names, s.true_beta.copy(), s.true_gamma.copy(),
                        [mu.key for mu in s.catalog.multiplets], s.true_sigma.copy(),
                        [tuple(map(float, e)) for e in s.extra_peaks], float(s.noise_sd))
    return spec, truth


# --- catalogs --------------------------------------------------------------

def _singlet(name, mid, c, protons):
    return make_multiplet(name, mid, c, [0.0], [1.0], protons)


def _doublet(name, mid, c, protons, j=J_PPM):
    return make_multiplet(name, mid, c, [-j / 2, j / 2], [1, 1], protons)


def _triplet(name, mid, c, protons, j=J_PPM):
    return make_multiplet(name, mid, c, [-j, 0.0, j], [1, 2, 1], protons)


def overlapped_catalog() -> TemplateCatalog:
    """Three metabolites whose largest multiplets each sit on another metabolite's."""
    return build_catalog([
        ("met_a", [_doublet("met_a", "d1", 3.200, 2), _singlet("met_a", "s1", 3.500, 1)]),
        ("met_b", [_singlet("met_b", "s1", 3.205, 3), _triplet("met_b", "t1", 3.400, 2)]),
        ("met_c", [_doublet("met_c", "d1", 3.405, 2), _singlet("met_c", "s1", 3.100, 1)]),
    ])


def isolated_catalog() -> TemplateCatalog:
    return build_catalog([
        ("met_a", [_singlet("met_a", "s1", 1.00, 3), _doublet("met_a", "d1", 1.05, 1)]),
        ("met_b", [_triplet("met_b", "t1", 2.60, 2)]),
        ("met_c", [_singlet("met_c", "s1", 4.20, 2)]),
    ])


def crowded_catalog(n_metabolites=11, seed=11) -> TemplateCatalog:
    """Eleven urine-like metabolites over 2.3-4.1 ppm, plus pseudo-metabolites beyond 11."""
    base = [
        ("citrate", [_doublet("citrate", "d1", 2.54, 2, 0.026), _doublet("citrate", "d2", 2.68, 2, 0.026)]),
        ("dimethylamine", [_singlet("dimethylamine", "s1", 2.72, 6)]),
        ("creatinine", [_singlet("creatinine", "s1", 3.045, 3), _singlet("creatinine", "s2", 4.05, 2)]),
        ("creatine", [_singlet("creatine", "s1", 3.03, 3), _singlet("creatine", "s2", 3.93, 2)]),
        ("tmao", [_singlet("tmao", "s1", 3.27, 9)]),
        ("taurine", [_triplet("taurine", "t1", 3.255, 2), _triplet("taurine", "t2", 3.42, 2)]),
        ("glycine", [_singlet("glycine", "s1", 3.56, 2)]),
        ("hippurate", [_doublet("hippurate", "d1", 3.97, 2, 0.01)]),
        ("succinate", [_singlet("succinate", "s1", 2.41, 4)]),
        ("oxoglutarate", [_triplet("oxoglutarate", "t1", 2.45, 2), _triplet("oxoglutarate", "t2", 3.01, 2)]),
        ("dimethylglycine", [_singlet("dimethylglycine", "s1", 2.93, 6), _singlet("dimethylglycine", "s2", 3.72, 2)]),
    ]
    entries = base[:n_metabolites]
    rng = np.random.default_rng(seed)
    k = 0
    while len(entries) < n_metabolites:
        name = f"pseudo_{k:02d}"
        c1, c2 = rng.uniform(2.36, 4.04, size=2)
        kind = k % 3
        first = (_singlet(name, "m1", c1, 3) if kind == 0 else
                 _doublet(name, "m1", c1, 2) if kind == 1 else _triplet(name, "m1", c1, 2))
        entries.append((name, [first, _singlet(name, "m2", c2, 1)]))
        k += 1
    return build_catalog(entries)


SUITES = ("isolated", "overlapped", "crowded", "uncatalogued")
_SUITE_SEEDS = {"isolated": 101, "overlapped": 202, "uncatalogued": 202, "crowded": 303}
UNCATALOGUED_CENTERS = (3.035, 3.145, 3.265, 3.305, 3.565)


def _draw(cat, rng, gamma0, shift):
    M, U = len(cat), len(cat.multiplets)
    beta = rng.uniform(0.5, 2.0, size=M)
    sigma = rng.uniform(-shift, shift, size=U)
    gamma = gamma0 * np.exp(rng.uniform(-0.15, 0.15, size=M))
    return beta, sigma, gamma


def standard_suite(name, count=8, noise_frac=0.02, n_metabolites=11) -> list:
    """Deterministic list of :class:`SynthSpec` for a named scenario.

    isolated: 3 metabolites on disjoint template supports; overlapped: 3
    metabolites whose largest multiplets overlap another's; crowded: 11
    metabolites on 2.3-4.1 ppm (4601 points); uncatalogued: overlapped plus five
    uncatalogued singlets, sharing truths and noise with overlapped.
    """
    if name not in SUITES:
        raise ConfigError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    seed0 = _SUITE_SEEDS[name] * 1000
    if name == "isolated":
        cat, grid, gamma0, shift = isolated_catalog(), np.linspace(0.6, 4.6, 4001), 0.001, 0.004
    elif name in ("overlapped", "uncatalogued"):
        cat, grid, gamma0, shift = overlapped_catalog(), np.linspace(3.0, 3.6, 1501), 0.0015, 0.004
    else:
        cat, grid, gamma0, shift = crowded_catalog(n_metabolites), np.linspace(2.3, 4.1, 4601), 0.0015, 0.004
    out = []
    for k in range(count):
        rng = np.random.default_rng(seed0 + k)
        beta, sigma, gamma = _draw(cat, rng, gamma0, shift)
        extras = []
        if name == "uncatalogued":
            areas = rng.uniform(1.0, 3.0, size=len(UNCATALOGUED_CENTERS))
            extras = [(c, float(a), 0.0015) for c, a in zip(UNCATALOGUED_CENTERS, areas)]
        s = SynthSpec(f"{name}_{k:02d}", cat, beta, sigma, gamma, grid, 0.0, extras,
                      seed=seed0 + k)
        s.noise_sd = noise_frac * float(np.max(noiseless(s, include_extras=False)))
        out.append(s)
    return out


def multiplet_overlap(mu1, mu2, gamma=0.0015):
    """Fraction of the shorter half-height extent covered by the other multiplet's."""
    a0, a1 = mu1.extent(gamma)
    b0, b1 = mu2.extent(gamma)
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    return inter / min(a1 - a0, b1 - b0)
