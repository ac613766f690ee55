"""Catalogued multiplet patterns and Lorentzian template rendering."""

from __future__ import annotations

import csv
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import CatalogError, ConfigError, DomainError, ShiftBoundError
from .spectrum import atomic_write

DEFAULT_SHIFT_BOUND = 0.03
TAIL_WIDTHS = 500.0


@dataclass(frozen=True)
class LorentzianPeak:
    offset: float
    rel_area: float


@dataclass(frozen=True)
class Multiplet:
    metabolite: str
    multiplet_id: str
    center_ppm: float
    peaks: tuple
    proton_count: float
    shift_bound: float = DEFAULT_SHIFT_BOUND

    @property
    def key(self):
        return (self.metabolite, self.multiplet_id)

    def extent(self, gamma=0.0):
        """ppm interval spanned by the peak positions, widened by ``gamma``."""
        offs = [p.offset for p in self.peaks]
        return self.center_ppm + min(offs) - gamma, self.center_ppm + max(offs) + gamma


@dataclass(frozen=True)
class Metabolite:
    name: str
    multiplets: tuple


@dataclass(frozen=True)
class TemplateCatalog:
    metabolites: tuple

    def __post_init__(self):
        names = [m.name for m in self.metabolites]
        if len(set(names)) != len(names):
            raise CatalogError("metabolite names must be unique")

    @property
    def names(self):
        return [m.name for m in self.metabolites]

    @property
    def multiplets(self):
        """All multiplets in canonical (metabolite, then file) order."""
        return [mu for m in self.metabolites for mu in m.multiplets]

    @property
    def owner(self):
        """Metabolite index of each multiplet in :attr:`multiplets` order."""
        return np.array([k for k, m in enumerate(self.metabolites) for _ in m.multiplets], dtype=int)

    def __len__(self):
        return len(self.metabolites)


def make_multiplet(metabolite, multiplet_id, center_ppm, offsets, rel_areas,
                   proton_count, shift_bound=DEFAULT_SHIFT_BOUND) -> Multiplet:
    """Build a multiplet with areas renormalized to sum to ``proton_count``."""
    rel = np.asarray(rel_areas, dtype=float)
    if len(rel) == 0:
        raise CatalogError(f"{metabolite}/{multiplet_id}: no peaks")
    if np.any(rel <= 0) or proton_count <= 0:
        raise CatalogError(f"{metabolite}/{multiplet_id}: areas and proton_count must be positive")
    if shift_bound <= 0:
        raise CatalogError(f"{metabolite}/{multiplet_id}: shift_bound must be positive")
    rel = rel * (proton_count / rel.sum())
    peaks = tuple(LorentzianPeak(float(o), float(a)) for o, a in zip(offsets, rel))
    return Multiplet(metabolite, str(multiplet_id), float(center_ppm), peaks,
                     float(proton_count), float(shift_bound))


def build_catalog(entries) -> TemplateCatalog:
    """``entries``: iterable of (name, [Multiplet, ...]) pairs."""
    return TemplateCatalog(tuple(Metabolite(n, tuple(mus)) for n, mus in entries))


def load_catalog(path) -> TemplateCatalog:
    """Read a catalog CSV.

    Columns: metabolite, multiplet_id, center_ppm, peak_offset_ppm, rel_area,
    proton_count and optionally shift_bound. One row per peak.
    """
    path = Path(path)
    if not path.is_file():
        raise CatalogError(f"catalog file not found: {path}")
    required = ["metabolite", "multiplet_id", "center_ppm", "peak_offset_ppm",
                "rel_area", "proton_count"]
    groups = OrderedDict()
    with open(path, newline="") as fh:
        reader = csv.DictReader(row for row in fh if row.strip() and not row.startswith("#"))
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise CatalogError(f"{path}: missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            try:
                name = row["metabolite"].strip()
                mid = row["multiplet_id"].strip()
                center = float(row["center_ppm"])
                offset = float(row["peak_offset_ppm"])
                area = float(row["rel_area"])
                protons = float(row["proton_count"])
                sb = row.get("shift_bound")
                sb = float(sb) if sb not in (None, "") else DEFAULT_SHIFT_BOUND
            except (TypeError, ValueError) as exc:
                raise CatalogError(f"{path}:{lineno}: {exc}") from None
            if area <= 0 or protons <= 0:
                raise CatalogError(f"{path}:{lineno}: rel_area and proton_count must be positive")
            g = groups.setdefault(name, OrderedDict()).setdefault(
                mid, {"center": center, "protons": protons, "sb": sb, "peaks": []})
            if g["center"] != center or g["protons"] != protons or g["sb"] != sb:
                raise CatalogError(f"{path}:{lineno}: inconsistent multiplet fields for {name}/{mid}")
            if any(o == offset for o, _ in g["peaks"]):
                raise CatalogError(f"{path}:{lineno}: duplicate peak {name}/{mid} offset {offset}")
            g["peaks"].append((offset, area))
    if not groups:
        raise CatalogError(f"{path}: empty catalog")
    entries = []
    for name, mus in groups.items():
        entries.append((name, [
            make_multiplet(name, mid, g["center"], [o for o, _ in g["peaks"]],
                           [a for _, a in g["peaks"]], g["protons"], g["sb"])
            for mid, g in mus.items()]))
    return build_catalog(entries)


def write_catalog(path, cat: TemplateCatalog):
    rows = ["metabolite,multiplet_id,center_ppm,peak_offset_ppm,rel_area,proton_count,shift_bound"]
    for mu in cat.multiplets:
        for p in mu.peaks:
            rows.append(f"{mu.metabolite},{mu.multiplet_id},{mu.center_ppm!r},{p.offset!r},"
                        f"{p.rel_area!r},{mu.proton_count!r},{mu.shift_bound!r}")
    atomic_write(path, "\n".join(rows) + "\n")


def lorentzian(delta, center, gamma):
    """Area-normalized Lorentzian with half-width at half-maximum ``gamma``."""
    if not gamma > 0:
        raise DomainError(f"gamma must be positive, got {gamma}")
    d = np.asarray(delta, dtype=float) - center
    return (gamma / np.pi) / (d * d + gamma * gamma)


def render_multiplet(mu: Multiplet, sigma, gamma, grid, out=None):
    """Multiplet template on ``grid`` (ascending) after shifting by ``sigma``.

    Each peak is evaluated only within ``TAIL_WIDTHS * gamma`` of its center.
    """
    if not gamma > 0:
        raise DomainError(f"gamma must be positive, got {gamma}")
    if abs(sigma) > mu.shift_bound * (1 + 1e-12):
        raise ShiftBoundError(f"{mu.metabolite}/{mu.multiplet_id}: |{sigma}| > {mu.shift_bound}")
    grid = np.asarray(grid, dtype=float)
    if out is None:
        out = np.zeros(grid.shape)
    reach = TAIL_WIDTHS * gamma
    g2 = gamma * gamma
    for p in mu.peaks:
        c = mu.center_ppm + sigma + p.offset
        i0, i1 = np.searchsorted(grid, (c - reach, c + reach))
        if i1 > i0:
            d = grid[i0:i1] - c
            out[i0:i1] += (p.rel_area * gamma / np.pi) / (d * d + g2)
    return out


def _per_multiplet(cat, sigmas):
    mus = cat.multiplets
    if isinstance(sigmas, Mapping):
        return np.array([float(sigmas.get(mu.key, 0.0)) for mu in mus])
    s = np.asarray(sigmas, dtype=float)
    if s.shape != (len(mus),):
        raise DomainError(f"expected {len(mus)} shifts, got shape {s.shape}")
    return s


def _per_metabolite(cat, gammas):
    if isinstance(gammas, Mapping):
        return np.array([float(gammas[n]) for n in cat.names])
    g = np.asarray(gammas, dtype=float)
    if g.ndim == 0:
        g = np.full(len(cat), float(g))
    if g.shape != (len(cat),):
        raise DomainError(f"expected {len(cat)} widths, got shape {g.shape}")
    return g


def build_design_matrix(cat: TemplateCatalog, sigmas, gammas, grid):
    """n x M matrix whose column m is the sum of metabolite m's multiplet templates."""
    grid = np.asarray(grid, dtype=float)
    sig = _per_multiplet(cat, sigmas)
    gam = _per_metabolite(cat, gammas)
    T = np.zeros((len(grid), len(cat)), order="F")
    for j, (mu, m) in enumerate(zip(cat.multiplets, cat.owner)):
        render_multiplet(mu, sig[j], gam[m], grid, out=T[:, m])
    return T


def multiplet_in_window(mu: Multiplet, intervals) -> bool:
    lo, hi = mu.extent()
    return any(lo - mu.shift_bound <= b and hi + mu.shift_bound >= a for a, b in intervals)


def restrict_catalog(cat: TemplateCatalog, intervals) -> TemplateCatalog:
    """Drop multiplets that cannot reach the fit window; every metabolite must keep one."""
    entries = []
    for m in cat.metabolites:
        keep = [mu for mu in m.multiplets if multiplet_in_window(mu, intervals)]
        if not keep:
            raise ConfigError(f"metabolite {m.name!r} has no multiplet in the fit window")
        entries.append((m.name, keep))
    return build_catalog(entries)


def segment_intervals(ppm, segments):
    return [(float(ppm[a]), float(ppm[b - 1])) for a, b in segments]


def lint(cat: TemplateCatalog, intervals=None) -> list[str]:
    """Human-readable report on normalization and window coverage."""
    lines = []
    for m in cat.metabolites:
        lines.append(f"{m.name}: {len(m.multiplets)} multiplet(s)")
        for mu in m.multiplets:
            total = sum(p.rel_area for p in mu.peaks)
            status = ""
            if intervals is not None:
                status = " in-window" if multiplet_in_window(mu, intervals) else " OUT-OF-WINDOW"
            lines.append(
                f"  {mu.multiplet_id}: center={mu.center_ppm:.4f} peaks={len(mu.peaks)} "
                f"area={total:.6g} protons={mu.proton_count:.6g} bound={mu.shift_bound:g}{status}")
        if intervals is not None and not any(multiplet_in_window(mu, intervals) for mu in m.multiplets):
            lines.append(f"  WARNING: {m.name} has no multiplet in the window")
    return lines
