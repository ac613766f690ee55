"""Command-line entry point: ``specfit fit|synth|compare|lint-catalog``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import re
import sys
from dataclasses import fields
from typing import get_type_hints

import numpy as np

from .errors import ConfigError, SpecfitError
from .model import Hyperparameters
from .sampler import BatchFailure, SamplerConfig, default_workers, run_batch
from .spectrum import (PpmWindow, common_axis, parse_bruker_1d, parse_text_spectra, restrict,
                       write_text_spectra)
from .summary import compare_errors, integrate_baseline, write_chain_outputs, write_csv
from .synth import SUITES, generate, read_truth, standard_suite, write_truth
from .template import lint, load_catalog, restrict_catalog, segment_intervals, write_catalog

log = logging.getLogger("specfit")

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2

# keys that are neither hyperparameters nor sampler settings
_CORE = {
    "spectra": ("list", None), "bruker_dir": ("list", None), "catalog": (str, None),
    "window": ("list", None), "out": (str, None), "workers": (int, None),
    "win_pad": (float, 0.02),
}
_ALIASES = {"iters": "sample_iters", "burnin": "burnin_iters"}


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(kind):
    def conv(text):
        return None if str(text).strip().lower() in ("none", "") else kind(text)
    return conv


def _converters():
    """key -> (converter, default, owner) for every configurable key."""
    out = {}
    for cls, owner in ((Hyperparameters, "hp"), (SamplerConfig, "cfg")):
        hints = get_type_hints(cls)
        for f in fields(cls):
            t = hints[f.name]
            if t is bool:
                conv = _bool
            elif t is int:
                conv = int
            elif t is float:
                conv = float
            elif "int" in str(t):
                conv = _optional(int)
            else:
                conv = _optional(float)
            out[f.name] = (conv, f.default, owner)
    for k, (t, d) in _CORE.items():
        out[k] = (str if t == "list" else t, d, "list" if t == "list" else "core")
    return out


KEYS = _converters()


def _norm_key(key):
    k = key.strip().replace("-", "_")
    return _ALIASES.get(k, k)


def read_options(path) -> dict:
    """``key = value`` lines, ``#`` comments; list keys may repeat."""
    try:
        fh = open(path)
    except OSError as exc:
        raise ConfigError(f"cannot read options file {path}: {exc.strerror}") from None
    out = {}
    with fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            k = _norm_key(key)
            if k not in KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown option {key!r}")
            conv, _, owner = KEYS[k]
            try:
                v = conv(value)
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {value!r}") from None
            if owner == "list":
                out.setdefault(k, []).append(v)
            else:
                out[k] = v
    return out


def resolve_options(flags: dict, path=None) -> dict:
    """Merge defaults, options file and flags (flags win over the file)."""
    merged = {k: ([] if owner == "list" else d) for k, (_, d, owner) in KEYS.items()}
    if path:
        merged.update(read_options(path))
    merged.update({k: v for k, v in flags.items() if v is not None})
    return merged


def build_configs(opts: dict):
    hp = Hyperparameters(**{f.name: opts[f.name] for f in fields(Hyperparameters)})
    cfg = SamplerConfig(**{f.name: opts[f.name] for f in fields(SamplerConfig)})
    try:
        hp.validate()
    except SpecfitError as exc:
        raise ConfigError(str(exc)) from None
    return hp, cfg.validate()


# --- fit -----------------------------------------------------------------------

def _safe_name(text):
    return re.sub(r"[^A-Za-z0-9._-]+", "_", str(text)) or "spectrum"


def _load_inputs(opts):
    """Returns (spectra, failures) where failures are (label, message) pairs."""
    specs, failed = [], []
    for path in opts["spectra"]:
        try:
            specs.extend(parse_text_spectra(path))
        except (SpecfitError, OSError) as exc:
            failed.append((str(path), _describe(exc)))
    for d in opts["bruker_dir"]:
        try:
            specs.append(parse_bruker_1d(d))
        except (SpecfitError, OSError) as exc:
            failed.append((str(d), _describe(exc)))
    return specs, failed


def _describe(exc):
    msg = getattr(exc, "strerror", None) or str(exc)
    return f"{type(exc).__name__}: {msg}"


def cmd_fit(opts: dict) -> int:
    if not opts["catalog"]:
        raise ConfigError("fit needs --catalog")
    if not opts["out"]:
        raise ConfigError("fit needs --out")
    if not (opts["spectra"] or opts["bruker_dir"]):
        raise ConfigError("fit needs --spectra or --bruker-dir")
    hp, cfg = build_configs(opts)
    cat = load_catalog(opts["catalog"])
    win = PpmWindow.parse(opts["window"]) if opts["window"] else None
    workers = opts["workers"] if opts["workers"] is not None else default_workers()
    if workers < 1:
        raise ConfigError("workers must be >= 1")

    specs, failed = _load_inputs(opts)
    kept = []
    for s in specs:
        try:
            kept.append(restrict(s, win) if win is not None else s)
        except SpecfitError as exc:
            failed.append((s.id, _describe(exc)))
    if not kept:
        for label, msg in failed:
            print(f"error: {label}: {msg}", file=sys.stderr)
        raise ConfigError("no usable spectra")
    kept = common_axis(kept)

    out = opts["out"]
    os.makedirs(out, exist_ok=True)
    results = run_batch(kept, cat, hp, cfg, workers=workers)
    estimates = []
    used = set()
    for spec, res in zip(kept, results):
        if isinstance(res, BatchFailure):
            failed.append((spec.id, res.message))
            continue
        name = _safe_name(spec.id)
        while name in used:
            name += "_"
        used.add(name)
        sub = restrict_catalog(cat, segment_intervals(spec.ppm, spec.segments))
        try:
            base = integrate_baseline(spec, sub, opts["win_pad"])
        except SpecfitError as exc:
            log.warning("%s: baseline skipped (%s)", spec.id, exc)
            base = {m: float("nan") for m in res.metabolites}
        write_chain_outputs(os.path.join(out, name), res, spec, sub, base)
        mean = res.beta.mean(axis=0)
        for k, m in enumerate(res.metabolites):
            estimates.append([spec.id, m, float(mean[k]), base[m]])
    write_csv(os.path.join(out, "estimates.csv"),
              ["spectrum", "metabolite", "mcmc", "baseline"], estimates)
    if failed:
        write_csv(os.path.join(out, "failures.csv"), ["spectrum", "error"], failed)
        for label, msg in failed:
            print(f"error: {label}: {msg}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


# --- synth ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.suite not in SUITES:
        raise ConfigError(f"unknown suite {args.suite!r}; choose from {', '.join(SUITES)}")
    suite = standard_suite(args.suite, count=args.count, noise_frac=args.noise_frac,
                           n_metabolites=args.metabolites)
    os.makedirs(args.out, exist_ok=True)
    pairs = [generate(s) for s in suite]
    write_text_spectra(os.path.join(args.out, "spectra.tsv"), [p[0] for p in pairs])
    write_truth(os.path.join(args.out, "truth.csv"), [p[1] for p in pairs])
    write_catalog(os.path.join(args.out, "catalog.csv"), suite[0].catalog)
    return EXIT_OK


# --- compare --------------------------------------------------------------------

def _read_estimates(path):
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        reader = csv.DictReader(fh)
        need = ["spectrum", "metabolite", "mcmc", "baseline"]
        missing = [c for c in need if c not in (reader.fieldnames or [])]
        if missing:
            raise ConfigError(f"{path}: missing columns {missing}")
        rows = {}
        for r in reader:
            rows[(r["spectrum"], r["metabolite"])] = (float(r["mcmc"]), float(r["baseline"]))
    return rows


def cmd_compare(args) -> int:
    if not os.path.exists(args.truth):
        raise ConfigError(f"truth file not found: {args.truth}")
    truth = read_truth(args.truth)
    est = _read_estimates(os.path.join(args.fit_dir, "estimates.csv"))
    names = None
    t, m, b = [], [], []
    for rec in truth:
        if names is None:
            names = list(rec.metabolites)
        if list(rec.metabolites) != names:
            raise ConfigError("truth records disagree on the metabolite list")
        if not all((rec.spectrum_id, n) in est for n in names):
            log.warning("%s: no estimates, skipped", rec.spectrum_id)
            continue
        t.append(rec.beta)
        m.append([est[(rec.spectrum_id, n)][0] for n in names])
        b.append([est[(rec.spectrum_id, n)][1] for n in names])
    if not t:
        raise ConfigError("no spectrum in truth.csv has estimates")
    rep = compare_errors(np.array(t), np.array(m), np.array(b))
    rows = []
    for k, n in enumerate(names):
        rows.append(["metabolite", n,
                     float(np.mean(rep.abs_error["mcmc"][:, k])),
                     float(np.mean(np.abs(rep.rel_error["mcmc"][:, k]))),
                     float(np.mean(rep.abs_error["baseline"][:, k])),
                     float(np.mean(np.abs(rep.rel_error["baseline"][:, k])))])
    rows.append(["rmse", "", rep.rmse["mcmc"], "", rep.rmse["baseline"], ""])
    rows.append(["scale", "", rep.scale["mcmc"], "", rep.scale["baseline"], ""])
    out = args.out or os.path.join(args.fit_dir, "comparison.csv")
    write_csv(out, ["row", "metabolite", "mcmc_abs_error", "mcmc_rel_error",
                    "baseline_abs_error", "baseline_rel_error"], rows)
    print(f"rmse mcmc={rep.rmse['mcmc']:.6g} baseline={rep.rmse['baseline']:.6g}")
    return EXIT_OK


# --- lint -----------------------------------------------------------------------

def cmd_lint(args) -> int:
    cat = load_catalog(args.catalog)
    intervals = PpmWindow.parse(args.window).intervals if args.window else None
    for line in lint(cat, intervals):
        print(line)
    return EXIT_OK


# --- parser -----------------------------------------------------------------------

def _add_fit_flags(p):
    p.add_argument("--spectra", action="append", help="text spectra file (repeatable)")
    p.add_argument("--bruker-dir", dest="bruker_dir", action="append",
                   help="Bruker processed-data directory holding 1r and procs (repeatable)")
    p.add_argument("--catalog", help="template catalog CSV")
    p.add_argument("--window", action="append", metavar="LO:HI", help="ppm window (repeatable)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, help="worker processes (default $SPECFIT_WORKERS or 1)")
    p.add_argument("--win-pad", dest="win_pad", type=float,
                   help="half-width in ppm of the baseline integration window")
    p.add_argument("--options", help="file of 'key = value' lines")
    p.add_argument("--iters", "--sample-iters", dest="sample_iters", type=int,
                   help="recorded sampling iterations")
    p.add_argument("--burnin", "--burnin-iters", dest="burnin_iters", type=int,
                   help="burn-in iterations")
    p.add_argument("--record-theta", dest="record_theta", action="store_const", const=True,
                   help="record wavelet coefficients per iteration")
    taken = {"sample_iters", "burnin_iters", "record_theta"}
    for key, (conv, default, owner) in KEYS.items():
        if owner not in ("hp", "cfg") or key in taken:
            continue
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=conv,
                       help=f"default {default}")


def build_parser():
    parser = argparse.ArgumentParser(prog="specfit",
                                     description="Bayesian deconvolution of 1-D NMR spectra.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit spectra against a template catalog")
    _add_fit_flags(fit)

    syn = sub.add_parser("synth", help="write a synthetic suite with ground truth")
    syn.add_argument("--suite", required=True, help=f"one of {', '.join(SUITES)}")
    syn.add_argument("--count", type=int, default=8)
    syn.add_argument("--noise-frac", dest="noise_frac", type=float, default=0.02)
    syn.add_argument("--metabolites", type=int, default=11, help="crowded suite size")
    syn.add_argument("--out", required=True)

    cmp_ = sub.add_parser("compare", help="MCMC vs integration errors against truth")
    cmp_.add_argument("--fit-dir", dest="fit_dir", required=True)
    cmp_.add_argument("--truth", required=True)
    cmp_.add_argument("--out", help="comparison CSV (default FIT_DIR/comparison.csv)")

    lnt = sub.add_parser("lint-catalog", help="report catalog normalization and coverage")
    lnt.add_argument("--catalog", required=True)
    lnt.add_argument("--window", action="append", metavar="LO:HI")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "fit":
            flags = {k: v for k, v in vars(args).items()
                     if k in KEYS and v is not None}
            opts = resolve_options(flags, args.options)
            return cmd_fit(opts)
        if args.command == "synth":
            return cmd_synth(args)
        if args.command == "compare":
            return cmd_compare(args)
        return cmd_lint(args)
    except (SpecfitError, OSError) as exc:
        print(f"error: {_describe(exc)}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
