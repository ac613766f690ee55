import numpy as np
import pytest

from specfit.errors import ConfigError
from specfit.synth import (SUITES, UNCATALOGUED_CENTERS, SynthSpec, generate, multiplet_overlap,
                           noiseless, read_truth, standard_suite, write_truth)
from specfit.template import build_design_matrix


def _spec(**kw):
    base = standard_suite("isolated", count=1)[0]
    args = dict(name="t", catalog=base.catalog, true_beta=base.true_beta,
                true_sigma=base.true_sigma, true_gamma=base.true_gamma, grid=base.grid)
    args.update(kw)
    return SynthSpec(**args)


def test_noiseless_equals_design_product():
    s = _spec()
    spec, truth = generate(s)
    T = build_design_matrix(s.catalog, s.true_sigma, s.true_gamma, s.grid)
    np.testing.assert_array_equal(spec.intensity, T @ s.true_beta)
    np.testing.assert_array_equal(truth.beta, s.true_beta)


def test_noise_level_and_seed():
    s = _spec(true_beta=np.zeros(3), grid=np.linspace(0.6, 4.6, 4096), noise_sd=0.7, seed=4)
    spec, _ = generate(s)
    n = len(spec)
    assert abs(spec.intensity.std(ddof=1) - 0.7) < 3 * 0.7 / np.sqrt(2 * (n - 1))
    again, _ = generate(s)
    np.testing.assert_array_equal(spec.intensity, again.intensity)


def test_linear_in_beta():
    a = noiseless(_spec(true_beta=[1.0, 0.5, 2.0]))
    b = noiseless(_spec(true_beta=[2.0, 1.0, 4.0]))
    np.testing.assert_allclose(b, 2 * a, rtol=1e-12)


def test_invalid_specs():
    with pytest.raises(ConfigError):
        _spec(true_beta=[-1.0, 1.0, 1.0])
    with pytest.raises(ConfigError):
        _spec(noise_sd=-0.1)
    with pytest.raises(ConfigError):
        _spec(grid=np.linspace(4.6, 0.6, 100))
    with pytest.raises(ConfigError):
        standard_suite("nope")


def test_suite_shapes():
    crowded = standard_suite("crowded", count=1)[0]
    assert len(crowded.catalog) == 11
    assert crowded.grid[-1] - crowded.grid[0] == pytest.approx(1.8)
    iso = standard_suite("isolated", count=1)[0]
    T = build_design_matrix(iso.catalog, iso.true_sigma, iso.true_gamma, iso.grid)
    G = T.T @ T
    off = G / np.sqrt(np.outer(np.diag(G), np.diag(G))) - np.eye(3)
    assert np.abs(off).max() < 1e-6
    ov = standard_suite("overlapped", count=1)[0]
    by_met = {m.name: max(m.multiplets, key=lambda q: q.proton_count) for m in ov.catalog.metabolites}
    others = [mu for mu in ov.catalog.multiplets]
    for name, big in by_met.items():
        assert max(multiplet_overlap(big, o) for o in others if o.metabolite != name) >= 0.5
    unc = standard_suite("uncatalogued", count=2)
    ovs = standard_suite("overlapped", count=2)
    for u, o in zip(unc, ovs):
        assert [c for c, _, _ in u.extra_peaks] == list(UNCATALOGUED_CENTERS)
        np.testing.assert_array_equal(u.true_beta, o.true_beta)
        assert u.noise_sd == o.noise_sd


def test_noise_is_two_percent_of_max_peak():
    for s in standard_suite("overlapped", count=3):
        assert s.noise_sd == pytest.approx(0.02 * noiseless(s, include_extras=False).max())


@pytest.mark.parametrize("name", SUITES)
def test_suites_regenerate_identically(name):
    a = standard_suite(name, count=2)
    b = standard_suite(name, count=2)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(generate(x)[0].intensity, generate(y)[0].intensity)


def test_truth_round_trip(tmp_path):
    recs = [generate(s)[1] for s in standard_suite("uncatalogued", count=2)]
    write_truth(tmp_path / "truth.csv", recs)
    back = read_truth(tmp_path / "truth.csv")
    for a, b in zip(recs, back):
        assert a.spectrum_id == b.spectrum_id and a.metabolites == b.metabolites
        np.testing.assert_array_equal(a.beta, b.beta)
        np.testing.assert_array_equal(a.gamma, b.gamma)
        np.testing.assert_array_equal(a.sigma, b.sigma)
        assert a.multiplets == b.multiplets and a.extras == b.extras
        assert a.noise_sd == b.noise_sd
