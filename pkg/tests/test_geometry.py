"""Geometry: overlaps, sampling, bands, transforms, exact band volumes."""

import math

import numpy as np
import pytest
from scipy import stats

from multispin.geometry import (
    BandSpec,
    Configuration,
    in_band,
    in_multi_band,
    load_configuration,
    log_band_volume,
    overlap,
    project_phi,
    rescale_to_shell,
    sample_on_shell,
    sample_uniform,
    sample_uniform_in_band,
    save_configuration,
    tilde_transform,
    uniform_overlap_tail,
)
from multispin.mixture import SpeciesLayout

LAY2 = SpeciesLayout(("a", "b"), (6, 10))


def test_overlap_basics():
    rng = np.random.default_rng(0)
    a = sample_uniform(LAY2, rng)
    ra = overlap(a, a).as_array()
    np.testing.assert_allclose(ra, 1.0, atol=1e-9)
    neg = Configuration(-a.coords, LAY2)
    np.testing.assert_allclose(overlap(a, neg).as_array(), -1.0, atol=1e-9)
    m = sample_on_shell(LAY2, [0.3, 0.7], rng)
    np.testing.assert_allclose(overlap(m, m).as_array(), [0.3, 0.7], atol=1e-9)


def test_overlap_symmetric_bilinear_cauchy_schwarz():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a = sample_uniform(LAY2, rng)
        b = sample_uniform(LAY2, rng)
        c = sample_uniform(LAY2, rng)
        lam = rng.uniform(-2, 2)
        np.testing.assert_allclose(overlap(a, b).as_array(), overlap(b, a).as_array(), atol=1e-12)
        combo = Configuration(b.coords + lam * c.coords, LAY2)
        np.testing.assert_allclose(
            overlap(a, combo).as_array(),
            overlap(a, b).as_array() + lam * overlap(a, c).as_array(),
            atol=1e-10,
        )
        lhs = np.abs(overlap(a, b).as_array())
        rhs = np.sqrt(overlap(a, a).as_array() * overlap(b, b).as_array())
        assert np.all(lhs <= rhs + 1e-12)


def test_sample_uniform_properties():
    rng = np.random.default_rng(2)
    big = SpeciesLayout(("a",), (1000,))
    x = sample_uniform(big, rng)
    y = sample_uniform(big, rng)
    assert x.is_on_sphere(1e-9)
    assert abs(overlap(x, y).as_array()[0]) < 5 / math.sqrt(1000)
    tiny = SpeciesLayout(("a",), (1,))
    z = sample_uniform(tiny, rng)
    assert z.coords[0] in (1.0, -1.0)


def test_sample_uniform_marginal_chi_squared():
    # one marginal coordinate of a uniform sphere point: (x^2/N) ~ Beta(1/2,(N-1)/2)
    rng = np.random.default_rng(3)
    lay = SpeciesLayout(("a",), (8,))
    vals = np.array([sample_uniform(lay, rng).coords[0] for _ in range(4000)])
    u = stats.beta.cdf(vals**2 / 8.0, 0.5, 3.5)
    hist, _ = np.histogram(u, bins=10, range=(0, 1))
    chi2 = np.sum((hist - 400.0) ** 2 / 400.0)
    assert chi2 < stats.chi2.ppf(0.999, df=9)


def test_sample_on_shell():
    rng = np.random.default_rng(4)
    m = sample_on_shell(LAY2, [0.0, 0.5], rng)
    np.testing.assert_allclose(m.self_overlap().as_array(), [0.0, 0.5], atol=1e-9)
    assert np.all(m.block(0) == 0.0)
    zero = sample_on_shell(LAY2, [0.0, 0.0], rng)
    assert np.all(zero.coords == 0.0)


def test_in_band_examples():
    rng = np.random.default_rng(5)
    q = np.array([0.4, 0.6])
    m = sample_on_shell(LAY2, q, rng)
    sigma = rescale_to_shell(m, [1.0 - 1e-12, 1.0 - 1e-12])
    delta = float(np.max(np.sqrt(q) - q))
    assert in_band(sigma, m, delta + 1e-9)
    assert not in_band(sigma, m, delta - 1e-3)
    zero = Configuration(np.zeros(LAY2.n), LAY2)
    assert in_band(sample_uniform(LAY2, rng), zero, 0.0)
    assert not in_band(sample_uniform(LAY2, rng), m, 0.0)


def test_in_multi_band():
    rng = np.random.default_rng(6)
    m = sample_on_shell(LAY2, [0.3, 0.3], rng)
    sig = sample_uniform(LAY2, rng)
    spec1 = BandSpec(m, delta=2.0, n=1, rho=0.0)
    assert in_multi_band([sig], spec1) == in_band(sig, m, 2.0)
    # identical replicas on S_N fail the pairwise constraint for small rho
    spec2 = BandSpec(m, delta=2.0, n=2, rho=0.1)
    assert not in_multi_band([sig, sig], spec2)
    with pytest.raises(ValueError):
        in_multi_band([sig], spec2)


def test_multi_band_orthogonality_consequence():
    # members have centered pairwise overlap bounded by rho + 2 delta
    rng = np.random.default_rng(7)
    q = [0.4, 0.2]
    m = sample_on_shell(LAY2, q, rng)
    delta, rho = 0.2, 0.3
    spec = BandSpec(m, delta=delta, n=2, rho=rho)
    found = 0
    while found < 10:
        a = sample_uniform_in_band(m, delta, rng)
        b = sample_uniform_in_band(m, delta, rng)
        if not in_multi_band([a, b], spec):
            continue
        found += 1
        diff_a = Configuration(a.coords - m.coords, LAY2)
        diff_b = Configuration(b.coords - m.coords, LAY2)
        centered = np.abs(overlap(diff_a, diff_b).as_array())
        assert np.all(centered <= 2 * delta + rho + 1e-12)


def test_tilde_transform_round_trip():
    rng = np.random.default_rng(8)
    q = np.array([0.5, 0.25])
    m = sample_on_shell(LAY2, q, rng)
    sigma = project_phi(sample_uniform(LAY2, rng), m)
    tilde = tilde_transform(sigma, m, q)
    assert tilde.is_on_sphere(1e-8)
    np.testing.assert_allclose(overlap(tilde, m).as_array(), 0.0, atol=1e-8)
    # inverse affine map
    back = np.array(tilde.coords)
    for s, sl in enumerate(LAY2.slices):
        back[sl] = back[sl] * math.sqrt(1 - q[s]) + m.coords[sl]
    np.testing.assert_allclose(back, sigma.coords, atol=1e-9)


def test_tilde_transform_identity_and_overlap_map():
    rng = np.random.default_rng(9)
    zero_q = np.zeros(2)
    m0 = sample_on_shell(LAY2, zero_q, rng)
    sig = sample_uniform(LAY2, rng)
    tilde = tilde_transform(sig, m0, zero_q)
    np.testing.assert_allclose(tilde.coords, sig.coords, atol=1e-12)

    q = np.array([0.3, 0.6])
    m = sample_on_shell(LAY2, q, rng)
    s1 = project_phi(sample_uniform(LAY2, rng), m)
    s2 = project_phi(sample_uniform(LAY2, rng), m)
    t1 = tilde_transform(s1, m, q)
    t2 = tilde_transform(s2, m, q)
    want = (overlap(s1, s2).as_array() - q) / (1 - q)
    np.testing.assert_allclose(overlap(t1, t2).as_array(), want, atol=1e-9)


def test_tilde_transform_preconditions():
    rng = np.random.default_rng(10)
    q = np.array([0.5, 0.5])
    m = sample_on_shell(LAY2, q, rng)
    sigma = sample_uniform(LAY2, rng)  # generic point is not in B(m, 0)
    with pytest.raises(ValueError):
        tilde_transform(sigma, m, q)
    with pytest.raises(ValueError):
        tilde_transform(sigma, m, [0.1, 0.1])


def test_project_phi_properties():
    rng = np.random.default_rng(11)
    q = np.array([0.5, 0.2])
    m = sample_on_shell(LAY2, q, rng)
    for _ in range(10):
        sig = sample_uniform(LAY2, rng)
        pi = project_phi(sig, m)
        np.testing.assert_allclose(overlap(pi, m).as_array(), q, atol=1e-9)
        np.testing.assert_allclose(pi.self_overlap().as_array(), 1.0, atol=1e-9)
        again = project_phi(pi, m)
        np.testing.assert_allclose(again.coords, pi.coords, atol=1e-9)
    fixed = project_phi(project_phi(sample_uniform(LAY2, rng), m), m)
    np.testing.assert_allclose(project_phi(fixed, m).coords, fixed.coords, atol=1e-9)


def test_project_phi_zero_species_passthrough():
    rng = np.random.default_rng(12)
    m = sample_on_shell(LAY2, [0.0, 0.4], rng)
    sig = sample_uniform(LAY2, rng)
    pi = project_phi(sig, m)
    np.testing.assert_allclose(pi.block(0), sig.block(0), atol=1e-12)


def test_project_phi_dilation_family():
    # phi(phi_t(sigma)) = phi(sigma) for centers m(t) = t*m
    rng = np.random.default_rng(13)
    m = sample_on_shell(LAY2, [0.5, 0.3], rng)
    sig = sample_uniform(LAY2, rng)
    want = project_phi(sig, m)
    for t in (0.4, 0.7, 0.9):
        mt = Configuration(t * m.coords, LAY2)
        stage = project_phi(sig, mt)
        np.testing.assert_allclose(project_phi(stage, m).coords, want.coords, atol=1e-9)


def test_project_phi_distance_bound():
    # sigma in B(m, delta) implies R_s(phi - sigma, phi - sigma) <= 2 delta / sqrt(q_s)
    rng = np.random.default_rng(14)
    q = np.array([0.5, 0.3])
    m = sample_on_shell(LAY2, q, rng)
    delta = 0.05
    for _ in range(50):
        sig = sample_uniform_in_band(m, delta, rng)
        assert in_band(sig, m, delta)
        pi = project_phi(sig, m)
        diff = Configuration(pi.coords - sig.coords, LAY2)
        gap = diff.self_overlap().as_array()
        assert np.all(gap <= 2 * delta / np.sqrt(q) + 1e-12)


def test_project_phi_degenerate_residual():
    lay = SpeciesLayout(("a",), (2,))
    m = Configuration(np.array([1.0, 0.0]), lay)  # self-overlap 0.5
    sig = Configuration(np.array([math.sqrt(2.0), 0.0]), lay)  # parallel to m
    with pytest.raises(ValueError):
        project_phi(sig, m)


def test_rescale_to_shell():
    rng = np.random.default_rng(15)
    m = sample_on_shell(LAY2, [0.5, 0.25], rng)
    same = rescale_to_shell(m, [0.5, 0.25])
    np.testing.assert_allclose(same.coords, m.coords, atol=1e-12)
    zero = rescale_to_shell(m, [0.0, 0.0])
    assert np.all(zero.coords == 0.0)
    with pytest.raises(ValueError):
        rescale_to_shell(zero, [0.5, 0.5])


def test_rescale_identity_bound():
    # R_s(m*-m', m*-m') = (sqrt(q) - sqrt(R))^2 <= |R - q|
    rng = np.random.default_rng(16)
    for _ in range(20):
        r = rng.uniform(0.05, 0.9, size=2)
        q = rng.uniform(0.05, 0.9, size=2)
        mp = sample_on_shell(LAY2, r, rng)
        ms = rescale_to_shell(mp, q)
        diff = Configuration(ms.coords - mp.coords, LAY2)
        got = diff.self_overlap().as_array()
        want = (np.sqrt(q) - np.sqrt(r)) ** 2
        np.testing.assert_allclose(got, want, atol=1e-10)
        assert np.all(got <= np.abs(r - q) + 1e-12)


# exact values of the band volume at q=0.5, delta=0.01 (frozen from quadrature
# of the cosine-band integral; see also the N -> infinity fixed-delta limit
# 0.5*log(1 - (q-delta)^2/q) = -0.327156)
BAND_VOLUME_FROZEN = {
    50: -0.373992,
    100: -0.352695,
    200: -0.341548,
    400: -0.335213,
}


def test_log_band_volume_frozen_values():
    for n, want in BAND_VOLUME_FROZEN.items():
        lay = SpeciesLayout(("a",), (n,))
        got = log_band_volume(lay, [0.5], 0.01)
        assert got == pytest.approx(want, abs=5e-6)


def test_log_band_volume_examples():
    lay = SpeciesLayout(("a",), (200,))
    assert log_band_volume(lay, [0.0], 0.3) == 0.0
    got = log_band_volume(lay, [0.5], 0.01)
    assert abs(got - 0.5 * math.log(0.5)) < 0.01
    # joint refinement delta = 4/N converges monotonically to the entropy term
    errs = []
    for n in (50, 100, 200, 400):
        v = log_band_volume(SpeciesLayout(("a",), (n,)), [0.5], 4.0 / n)
        errs.append(abs(v - 0.5 * math.log(0.5)))
    assert all(a > b for a, b in zip(errs, errs[1:]))


def test_log_band_volume_matches_hit_frequency():
    # cross-check the exact formula against naive hit counting at small N
    rng = np.random.default_rng(17)
    lay = SpeciesLayout(("a", "b"), (5, 3))
    q = [0.4, 0.2]
    delta = 0.25
    m = sample_on_shell(lay, q, rng)
    hits = sum(in_band(sample_uniform(lay, rng), m, delta) for _ in range(20000))
    p_hat = hits / 20000
    got = log_band_volume(lay, q, delta)
    se = math.sqrt(p_hat * (1 - p_hat) / 20000) / p_hat
    assert got * lay.n == pytest.approx(math.log(p_hat), abs=4 * se)


def test_log_band_volume_discrete_species():
    # N_s = 1 blocks have a discrete band measure in {0, 1/2, 1}
    lay = SpeciesLayout(("a",), (1,))
    q, root = 0.25, 0.5
    assert log_band_volume(lay, [q], root - q + 1e-9) == pytest.approx(math.log(0.5))
    assert log_band_volume(lay, [q], root + q + 1e-9) == pytest.approx(0.0)
    assert log_band_volume(lay, [q], 0.01) == -np.inf


def test_sample_uniform_in_band():
    rng = np.random.default_rng(18)
    q = [0.5, 0.3]
    m = sample_on_shell(LAY2, q, rng)
    for delta in (0.02, 0.2):
        for _ in range(20):
            sig = sample_uniform_in_band(m, delta, rng)
            assert sig.is_on_sphere(1e-9)
            assert in_band(sig, m, delta + 1e-12)


def test_sample_uniform_in_band_matches_conditional_law():
    # band-conditional cosine frequencies agree with the exact truncated law
    rng = np.random.default_rng(19)
    lay = SpeciesLayout(("a",), (6,))
    q, delta = 0.4, 0.3
    m = sample_on_shell(lay, [q], rng)
    direct = []
    while len(direct) < 1500:
        sig = sample_uniform(lay, rng)
        if in_band(sig, m, delta):
            direct.append(overlap(sig, m).as_array()[0])
    sampled = [overlap(sample_uniform_in_band(m, delta, rng), m).as_array()[0]
               for _ in range(1500)]
    ks = stats.ks_2samp(direct, sampled)
    assert ks.pvalue > 1e-4


def test_uniform_overlap_tail():
    assert uniform_overlap_tail(8, 0.0) == 1.0
    assert uniform_overlap_tail(8, 1.5) == 0.0
    rng = np.random.default_rng(20)
    lay = SpeciesLayout(("a",), (12,))
    tau = 0.35
    hits = 0
    trials = 20000
    for _ in range(trials):
        r = overlap(sample_uniform(lay, rng), sample_uniform(lay, rng)).as_array()[0]
        hits += abs(r) >= tau
    want = uniform_overlap_tail(12, tau)
    se = math.sqrt(want * (1 - want) / trials)
    assert hits / trials == pytest.approx(want, abs=4 * se)


def test_configuration_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(21)
    cfg = sample_uniform(LAY2, rng)
    path = tmp_path / "cfg.bin"
    save_configuration(cfg, path)
    back = load_configuration(path)
    assert back.layout == cfg.layout
    np.testing.assert_array_equal(back.coords, cfg.coords)


def test_configuration_cache_and_immutability():
    rng = np.random.default_rng(22)
    cfg = sample_uniform(LAY2, rng)
    recomputed = np.array([cfg.coords[sl] @ cfg.coords[sl] for sl in LAY2.slices])
    np.testing.assert_allclose(cfg.block_sq_norms, recomputed, rtol=1e-9)
    with pytest.raises(ValueError):
        cfg.coords[0] = 5.0
