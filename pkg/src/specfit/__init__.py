"""Bayesian deconvolution of 1-D NMR spectra.

Catalogued metabolites are fitted as Lorentzian multiplets; everything else
is absorbed by a sparse wavelet component.
"""
from specfit.model import Hyperparameters
from specfit.sampler import SamplerConfig, run, run_batch
from specfit.spectrum import PpmWindow, Spectrum, parse_bruker_1d, parse_text_spectra
from specfit.summary import compare_errors, integrate_baseline, reconstruct_fit, summarize
from specfit.template import build_catalog, load_catalog, make_multiplet

__version__ = "0.1.0"

__all__ = [
    "Hyperparameters", "PpmWindow", "SamplerConfig", "Spectrum", "build_catalog",
    "compare_errors", "integrate_baseline", "load_catalog", "make_multiplet",
    "parse_bruker_1d", "parse_text_spectra", "reconstruct_fit", "run", "run_batch", "summarize",
]
