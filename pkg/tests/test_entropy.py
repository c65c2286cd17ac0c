"""Probability model: quadrature oracle, completeness, context extraction."""

import numpy as np
import pytest
from scipy import integrate

from caecodec import tensor as T
from caecodec import transforms as TR
from caecodec.entropy import (SIGMA_FLOOR_CODING, SIGMA_FLOOR_TRAIN, LatentGrid,
                              add_uniform_noise, estimate_params_f,
                              extract_ctx_known, extract_ctx_prime,
                              normalization_diagnostic, pmf_gaussian_uniform,
                              pmf_zero_mean, quantize, rate_estimate,
                              tail_masses)


def gauss_density(x, mu, sigma):
    return np.exp(-0.5 * ((x - mu) / sigma) ** 2) / (sigma * np.sqrt(2 * np.pi))


def pmf_quad(v, mu, sigma):
    """Adaptive-quadrature oracle for the unit-bin mass."""
    val, err = integrate.quad(gauss_density, v - 0.5, v + 0.5, args=(mu, sigma),
                              epsabs=1e-13, epsrel=1e-13)
    assert err < 1e-11
    return val


# ---------------------------------------------------------------------------
# PMF vs quadrature

def test_pmf_matches_quadrature_grid():
    mus = [-3.7, -0.5, 0.0, 1.25, 9.9]
    sigmas = [0.05, 0.3, 1.0, 7.5, 40.0]
    vs = [-12, -1, 0, 1, 2, 30]
    for mu in mus:
        for sg in sigmas:
            for v in vs:
                got = float(pmf_gaussian_uniform(v, mu, sg))
                want = pmf_quad(v, mu, sg)
                assert abs(got - want) < 1e-9, (v, mu, sg)


def test_pmf_far_tail_stability():
    # deep in one tail: naive CDF subtraction loses everything; the
    # erfc-branch form must stay positive and accurate in relative terms
    p = float(pmf_gaussian_uniform(20.0, 0.0, 1.5))
    want = pmf_quad(20.0, 0.0, 1.5)
    assert p > 0.0
    np.testing.assert_allclose(p, want, rtol=1e-6)
    # symmetric tail agrees exactly by the mirrored branch
    m = float(pmf_gaussian_uniform(-20.0, 0.0, 1.5))
    np.testing.assert_allclose(p, m, rtol=1e-12)


def test_pmf_zero_mean_equivalence(rng):
    v = rng.integers(-20, 21, size=64)
    sg = np.abs(rng.normal(size=64)) + 0.05
    np.testing.assert_array_equal(pmf_zero_mean(v, sg),
                                  pmf_gaussian_uniform(v, 0.0, sg))


def test_pmf_sigma_floor_warns():
    with pytest.warns(RuntimeWarning, match="clamped"):
        a = pmf_gaussian_uniform(0, 0.0, 1e-9)
    b = pmf_gaussian_uniform(0, 0.0, SIGMA_FLOOR_TRAIN)
    np.testing.assert_allclose(float(a), float(b), rtol=1e-12)


def test_completeness_bins_plus_tails():
    vs = np.arange(T.V_MIN, T.V_MAX + 1)
    for mu, sg in [(0.0, 1.0), (3.2, 0.2), (-17.0, 25.0), (100.0, 4.0),
                   (0.0, 0.01), (-127.9, 60.0)]:
        bins = pmf_gaussian_uniform(vs, mu, sg).sum()
        lo, hi = tail_masses(np.array(mu), np.array(sg))
        total = float(bins + lo + hi)
        assert abs(total - 1.0) < 1e-9, (mu, sg)


def test_noise_model_monte_carlo():
    # histogram of round(y + u) for fixed y matches the Gaussian-uniform pmf
    # with (mu, sigma) of the y ensemble; this ties Eq. of the bin mass to
    # the additive-noise view of quantization
    rng = np.random.default_rng(42)
    mu, sg = 0.7, 2.3
    y = rng.normal(mu, sg, size=400_000)
    q = np.round(y + rng.uniform(-0.5, 0.5, size=y.size))
    for v in (-2, 0, 1, 3):
        freq = float(np.mean(q == v))
        p = float(pmf_gaussian_uniform(v, mu, sg))
        np.testing.assert_allclose(freq, p, rtol=0.02, atol=5e-4)


# ---------------------------------------------------------------------------
# rate estimate

def test_rate_estimate_matches_manual(rng):
    vals = rng.integers(-5, 6, size=(3, 4, 2))
    mu = rng.normal(size=(3, 4, 2))
    sg = np.abs(rng.normal(size=(3, 4, 2))) + 0.3
    p = np.maximum(pmf_gaussian_uniform(vals, mu, sg), 2.0 ** -16)
    want = float(-np.log2(p).sum())
    got = rate_estimate(vals, sg, mu=mu)
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_rate_estimate_floor_caps_bits():
    # impossible symbol: p floored at 2^-16, so exactly 16 bits each
    vals = np.full((10,), 100)
    got = rate_estimate(vals, np.full(10, 0.02), mu=np.zeros(10),
                        sigma_floor=SIGMA_FLOOR_CODING)
    np.testing.assert_allclose(got, 160.0, rtol=1e-12)


def test_rate_estimate_zero_mean_broadcast(rng):
    vals = rng.integers(-3, 4, size=(2, 3, 4))
    sg = np.abs(rng.normal(size=4)) + 0.5  # per-channel scales broadcast
    want = float(-np.log2(pmf_gaussian_uniform(vals, 0.0, sg)).sum())
    np.testing.assert_allclose(rate_estimate(vals, sg), want, rtol=1e-12)


# ---------------------------------------------------------------------------
# context extraction

def test_extract_ctx_prime_hand_example():
    h, w = 5, 6
    cp = np.arange(h * w, dtype=np.float64).reshape(h, w, 1)
    win = extract_ctx_prime(cp, k=2, l=3)
    assert win.shape == (4, 4, 1)
    # rows 0..3, cols 0..3 of the window map to grid rows 0..3, cols 0..3
    np.testing.assert_array_equal(win[:, :, 0], cp[0:4, 0:4, 0])
    # left edge: col k-2 = -2 is off grid and zero-filled
    win0 = extract_ctx_prime(cp, k=0, l=0)
    assert win0[3, 2, 0] == cp[0, 0, 0]
    np.testing.assert_array_equal(win0[:3, :, 0], 0.0)
    np.testing.assert_array_equal(win0[:, :2, 0], 0.0)
    # right edge: col k+1 = w is off grid
    winr = extract_ctx_prime(cp, k=w - 1, l=1)
    np.testing.assert_array_equal(winr[:, 3, 0], 0.0)


def test_extract_ctx_off_grid():
    cp = np.zeros((3, 3, 1))
    for k, l in [(-1, 0), (0, -1), (3, 0), (0, 3)]:
        with pytest.raises(IndexError):
            extract_ctx_prime(cp, k, l)


def test_extract_ctx_known_is_causal(rng):
    # whatever the buffer holds at (k, l) and later, the window is unchanged
    h, w, c = 4, 5, 2
    y = rng.normal(size=(h, w, c))
    k, l = 2, 2
    win = extract_ctx_known(y, k, l)
    poisoned = y.copy()
    pos = l * w + k
    for p in range(pos, h * w):
        pl, pk = divmod(p, w)
        poisoned[pl, pk, :] = 1e6
    win2 = extract_ctx_known(poisoned, k, l)
    np.testing.assert_array_equal(win, win2)
    assert win[3, 2, 0] == 0.0 and win[3, 3, 0] == 0.0


def test_extract_ctx_known_keeps_past(rng):
    y = rng.normal(size=(3, 4, 1))
    win = extract_ctx_known(y, k=1, l=2)
    assert win[3, 1, 0] == y[2, 0, 0]   # left neighbor, strictly past
    assert win[2, 2, 0] == y[1, 1, 0]   # row above, same column


# ---------------------------------------------------------------------------
# estimator f properties

def test_f_parameter_sharing(tiny_cfg, tiny_params, rng):
    # two positions with identical context content get identical (mu, sigma)
    arrs = TR.params_as_arrays(tiny_params)
    win_p = np.abs(rng.normal(size=(4, 4, 48)))
    win_k = rng.normal(size=(4, 4, 48)) * T.CAUSAL_MASK[:, :, None]
    a = estimate_params_f(win_p, win_k, arrs, tiny_cfg)
    b = estimate_params_f(win_p.copy(), win_k.copy(), arrs, tiny_cfg)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    assert np.all(a[1] >= SIGMA_FLOOR_CODING)


# ---------------------------------------------------------------------------
# normalization diagnostic

def test_normalization_diagnostic_correlated_field():
    # latents = smoothed noise (strong lag-1 correlation); mu = half the
    # neighborhood mean captures much of it, so residuals decorrelate
    rng = np.random.default_rng(3)
    n = 48
    base = rng.normal(size=(n + 2, n + 2, 1)) * 4.0
    sm = (base[:-2, :-2] + base[1:-1, :-2] + base[:-2, 1:-1]
          + base[1:-1, 1:-1]) / 2.0
    y = np.round(sm[:n, :n])
    mu = (np.roll(y, 1, axis=0) + np.roll(y, 1, axis=1)) / 2.0
    sigma = np.full_like(y, 2.0)
    raw, norm = normalization_diagnostic(y, mu, sigma)
    assert raw > 0.4
    assert norm < raw


def test_normalization_diagnostic_constant_channel():
    y = np.ones((8, 8, 2))
    mu = np.zeros_like(y)
    sigma = np.ones_like(y)
    raw, norm = normalization_diagnostic(y, mu, sigma)
    assert raw == 0.0 and norm == 0.0


# ---------------------------------------------------------------------------
# LatentGrid and quantize

def test_quantize_to_grid(rng):
    y = rng.normal(size=(3, 3, 2)) * 3
    g = quantize(y)
    assert g.values.dtype == np.int32
    np.testing.assert_array_equal(
        g.values, np.copysign(np.floor(np.abs(y) + 0.5), y).astype(np.int32))
    assert g.clamp_count == 0
    assert g.as_float(np.float32).dtype == np.float32


def test_quantize_clamps_and_counts():
    g = quantize(np.array([[[300.0, -300.0, 1.2]]]))
    np.testing.assert_array_equal(g.values[0, 0], [127, -128, 1])
    assert g.clamp_count == 2
    np.testing.assert_allclose(g.clamp_fraction, 2 / 3)


def test_latent_grid_validation():
    with pytest.raises(ValueError, match="bounds"):
        LatentGrid(values=np.zeros((1, 1, 1), dtype=np.int32), v_min=1, v_max=5)
    with pytest.raises(ValueError, match="outside"):
        LatentGrid(values=np.full((1, 1, 1), 200, dtype=np.int32))


def test_add_uniform_noise_array_path(rng):
    y = np.zeros((50, 50, 1))
    out = add_uniform_noise(y, np.random.default_rng(9))
    assert np.all(np.abs(out) <= 0.5)
    assert out.shape == y.shape
