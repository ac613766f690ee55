"""Spectrum container, text/Bruker readers, window restriction and axis alignment."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import AxisError, EmptyWindowError, FormatError, ParseError


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Spectrum:
    """One 1D acquisition on an ascending ppm axis.

    ``segments`` holds ``(start, stop)`` index ranges of contiguous pieces;
    a spectrum restricted to a union of disjoint windows has one segment per
    window and each segment gets its own wavelet transform downstream.
    """

    id: str
    ppm: np.ndarray
    intensity: np.ndarray
    spectrometer_freq: Optional[float] = None
    segments: tuple = field(default=None)

    def __post_init__(self):
        ppm = _frozen(self.ppm)
        y = _frozen(self.intensity)
        if ppm.ndim != 1 or ppm.shape != y.shape:
            raise AxisError(f"{self.id}: ppm and intensity lengths differ")
        if len(ppm) < 2:
            raise AxisError(f"{self.id}: need at least 2 points")
        if not np.all(np.diff(ppm) > 0):
            raise AxisError(f"{self.id}: ppm axis must be strictly ascending")
        if not np.all(np.isfinite(y)):
            raise AxisError(f"{self.id}: non-finite intensities")
        segs = self.segments
        if segs is None:
            segs = ((0, len(ppm)),)
        segs = tuple((int(a), int(b)) for a, b in segs)
        if segs[0][0] != 0 or segs[-1][1] != len(ppm) or any(
            s[1] != t[0] for s, t in zip(segs, segs[1:])
        ) or any(b - a < 1 for a, b in segs):
            raise AxisError(f"{self.id}: segments must tile the axis")
        object.__setattr__(self, "ppm", ppm)
        object.__setattr__(self, "intensity", y)
        object.__setattr__(self, "segments", segs)

    def __len__(self):
        return len(self.ppm)

    @property
    def step(self):
        return float(np.median(np.diff(self.ppm)))


@dataclass(frozen=True)
class PpmWindow:
    """Union of closed ppm intervals, normalized to sorted disjoint pieces."""

    intervals: tuple

    def __init__(self, *intervals):
        if len(intervals) == 2 and all(np.isscalar(v) for v in intervals):
            intervals = (tuple(intervals),)
        pieces = []
        for lo, hi in intervals:
            lo, hi = float(lo), float(hi)
            if not lo < hi:
                raise AxisError(f"window interval needs lo < hi, got {lo}:{hi}")
            pieces.append((lo, hi))
        pieces.sort()
        merged = []
        for lo, hi in pieces:
            if merged and lo <= merged[-1][1]:
                merged[-1] = (merged[-1][0], max(hi, merged[-1][1]))
            else:
                merged.append((lo, hi))
        object.__setattr__(self, "intervals", tuple(merged))

    @classmethod
    def parse(cls, texts):
        """Build from strings like ``"2.3:4.1"``."""
        if isinstance(texts, str):
            texts = [texts]
        out = []
        for t in texts:
            try:
                lo, hi = t.split(":")
                out.append((float(lo), float(hi)))
            except ValueError:
                raise AxisError(f"bad window {t!r}, expected lo:hi") from None
        return cls(*out)

    @property
    def lo(self):
        return self.intervals[0][0]

    @property
    def hi(self):
        return self.intervals[-1][1]


def _canonical(ppm, ys):
    ppm = np.asarray(ppm, dtype=float)
    d = np.diff(ppm)
    if np.all(d > 0):
        return ppm, ys
    if np.all(d < 0):
        return ppm[::-1], [y[::-1] for y in ys]
    raise AxisError("ppm axis is not strictly monotonic")


def _sniff_delimiter(line):
    if "\t" in line:
        return "\t"
    if "," in line:
        return ","
    return None


def parse_text_spectra(path, has_header=None) -> list[Spectrum]:
    """Read a delimited file: first column ppm, one spectrum per further column.

    Tab or comma delimiters are detected from the first non-empty line; a
    header row is detected automatically when ``has_header`` is None.
    """
    path = Path(path)
    lines = path.read_text().splitlines()
    rows = []
    for lineno, raw in enumerate(lines, start=1):
        if raw.strip() and not raw.lstrip().startswith("#"):
            rows.append((lineno, raw))
    if not rows:
        raise ParseError(f"{path}: no data rows")
    delim = _sniff_delimiter(rows[0][1])
    split = (lambda s: s.split(delim)) if delim else (lambda s: s.split())

    header = None
    first = [c.strip() for c in split(rows[0][1])]
    if has_header is None:
        try:
            [float(c) for c in first]
            has_header = False
        except ValueError:
            has_header = True
    if has_header:
        header = first
        rows = rows[1:]
    if not rows:
        raise ParseError(f"{path}: header but no data")

    width = len(header) if header else len(split(rows[0][1]))
    if width < 2:
        raise ParseError("need a ppm column and at least one spectrum column", rows[0][0])
    data = np.empty((len(rows), width))
    for k, (lineno, raw) in enumerate(rows):
        cells = split(raw)
        if len(cells) != width:
            raise ParseError(f"expected {width} fields, found {len(cells)}", lineno)
        try:
            data[k] = [float(c) for c in cells]
        except ValueError:
            raise ParseError(f"non-numeric cell in {raw!r}", lineno) from None
    if not np.all(np.isfinite(data)):
        bad = rows[int(np.nonzero(~np.isfinite(data).all(axis=1))[0][0])][0]
        raise ParseError("non-finite value", bad)

    ppm, ys = _canonical(data[:, 0], [data[:, j] for j in range(1, width)])
    ids = header[1:] if header else [f"spec_{j}" for j in range(1, width)]
    return [Spectrum(id=str(i), ppm=ppm, intensity=y) for i, y in zip(ids, ys)]


def write_text_spectra(path, specs: Sequence[Spectrum], delimiter="\t"):
    """Write spectra sharing one axis; the inverse of :func:`parse_text_spectra`."""
    ppm = specs[0].ppm
    for s in specs[1:]:
        if s.ppm.shape != ppm.shape or not np.array_equal(s.ppm, ppm):
            raise AxisError("spectra written together must share an axis")
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(["ppm"] + [s.id for s in specs])
    for i in range(len(ppm)):
        w.writerow([repr(float(ppm[i]))] + [repr(float(s.intensity[i])) for s in specs])
    atomic_write(path, buf.getvalue())


def atomic_write(path, text):
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


_BRUKER_REQUIRED = ("SI", "SW_p", "OFFSET", "SF", "BYTORDP", "NC_proc")


def read_procs(path) -> dict:
    """Parse JCAMP-style ``##$KEY= value`` lines into a dict of scalars."""
    pars = {}
    with open(path, "r", errors="replace") as fh:
        for line in fh:
            if not line.startswith("##$"):
                continue
            key, _, value = line[3:].partition("=")
            value = value.strip()
            if value.startswith("(") or value.startswith("<"):
                pars[key.strip()] = value
                continue
            try:
                num = float(value)
                pars[key.strip()] = int(num) if num.is_integer() and "." not in value else num
            except ValueError:
                pars[key.strip()] = value
    return pars


def parse_bruker_1d(directory) -> Spectrum:
    """Read processed Bruker data (``1r`` + ``procs``) from a pdata directory."""
    d = Path(directory)
    procs_path, data_path = d / "procs", d / "1r"
    for p in (procs_path, data_path):
        if not p.is_file():
            raise FormatError(f"missing file {p}", key=p.name)
    pars = read_procs(procs_path)
    for key in _BRUKER_REQUIRED:
        if key not in pars:
            raise FormatError(f"{procs_path}: missing key {key}", key=key)

    si = int(pars["SI"])
    dtypp = int(pars.get("DTYPP", 0))
    byteorder = ">" if int(pars["BYTORDP"]) == 1 else "<"
    dtype = np.dtype(f"{byteorder}f8" if dtypp == 2 else f"{byteorder}i4")
    raw = np.fromfile(data_path, dtype=dtype)
    if raw.size != si:
        raise FormatError(f"{data_path}: SI={si} but file holds {raw.size} values", key="SI")

    intensity = raw.astype(float) * 2.0 ** int(pars["NC_proc"])
    sf = float(pars["SF"])
    step = float(pars["SW_p"]) / (sf * si)
    ppm = float(pars["OFFSET"]) - step * np.arange(si)
    return Spectrum(id=d.parent.parent.name or d.name, ppm=ppm[::-1],
                    intensity=intensity[::-1], spectrometer_freq=sf)


def restrict(spec: Spectrum, win: PpmWindow) -> Spectrum:
    """Keep points inside the (closed) window intervals, one segment per interval."""
    keep = []
    segments = []
    start = 0
    for lo, hi in win.intervals:
        idx = np.nonzero((spec.ppm >= lo) & (spec.ppm <= hi))[0]
        if idx.size:
            keep.append(idx)
            segments.append((start, start + idx.size))
            start += idx.size
    if not keep:
        raise EmptyWindowError(
            f"{spec.id}: window {win.intervals} misses axis "
            f"[{spec.ppm[0]:.4g}, {spec.ppm[-1]:.4g}]")
    idx = np.concatenate(keep)
    # a window inside one original segment may still straddle a gap from an earlier restrict
    bounds = set(b for _, b in spec.segments[:-1])
    split = []
    for a, b in segments:
        cuts = [a] + [a + k for k in range(1, b - a) if idx[a + k] in bounds] + [b]
        split.extend(zip(cuts[:-1], cuts[1:]))
    if len(idx) < 2:
        raise EmptyWindowError(f"{spec.id}: window keeps fewer than 2 points")
    return Spectrum(id=spec.id, ppm=spec.ppm[idx], intensity=spec.intensity[idx],
                    spectrometer_freq=spec.spectrometer_freq, segments=tuple(split))


def common_axis(specs: Sequence[Spectrum]) -> list[Spectrum]:
    """Put every spectrum on the first one's axis, clipped to the shared range."""
    if not specs:
        raise AxisError("no spectra")
    ref = specs[0]
    if all(s.ppm.shape == ref.ppm.shape and np.array_equal(s.ppm, ref.ppm) for s in specs):
        return list(specs)
    lo = max(s.ppm[0] for s in specs)
    hi = min(s.ppm[-1] for s in specs)
    if not lo < hi:
        raise AxisError("spectra axes do not overlap")
    idx = np.nonzero((ref.ppm >= lo) & (ref.ppm <= hi))[0]
    if idx.size < 2:
        raise AxisError("shared axis range holds fewer than 2 points")
    a, b = idx[0], idx[-1] + 1
    segs = []
    for s0, s1 in ref.segments:
        s0, s1 = max(s0, a), min(s1, b)
        if s1 > s0:
            segs.append((s0 - a, s1 - a))
    grid = ref.ppm[a:b]
    out = []
    for s in specs:
        y = np.interp(grid, s.ppm, s.intensity)
        out.append(Spectrum(id=s.id, ppm=grid, intensity=y,
                            spectrometer_freq=s.spectrometer_freq, segments=tuple(segs)))
    return out
