import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvdssm.privacy import (
    DpParams,
    account_epsilon,
    average,
    clip,
    gaussian_single_release_epsilon,
    local_secure_aggregate,
    noisy_probability,
    rdp_subsampled_gaussian,
)


def test_params_validation():
    with pytest.raises(ValueError):
        DpParams(clip=0)
    with pytest.raises(ValueError):
        DpParams(sigma=-1)
    with pytest.raises(ValueError):
        DpParams(delta=1.0)
    with pytest.raises(ValueError):
        DpParams(batch_views=0)
    assert DpParams().views_for(2) == 2
    with pytest.raises(ValueError):
        DpParams(batch_views=3).views_for(2)


def test_clip_never_exceeds_threshold():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        c = float(rng.uniform(0.01, 5))
        v = rng.standard_normal(int(rng.integers(1, 50))) * float(rng.uniform(0, 10))
        out = clip(v, c)
        assert np.linalg.norm(out) <= c * (1 + 1e-12)
        if np.linalg.norm(v) <= c:
            np.testing.assert_array_equal(out, v)
        else:
            np.testing.assert_allclose(out / np.linalg.norm(out), v / np.linalg.norm(v))


def test_zero_noise_short_vectors_give_exact_mean():
    rng = np.random.default_rng(1)
    vecs = [rng.standard_normal(20) * 0.01 for _ in range(3)]
    out = local_secure_aggregate(vecs, DpParams(clip=10.0, sigma=0.0), rng)
    np.testing.assert_array_equal(out, average(vecs))
    single = local_secure_aggregate([vecs[0]], DpParams(clip=math.inf, sigma=0.0), rng)
    np.testing.assert_array_equal(single, vecs[0])


def test_noise_std_matches_sigma_c_over_b():
    params = DpParams(clip=0.5, sigma=1.0, batch_views=2)
    vecs = [np.full(4, 0.1), np.full(4, -0.05), np.full(4, 0.2)]
    rng = np.random.default_rng(2)
    draws = np.array([local_secure_aggregate(vecs, params, rng) for _ in range(10_000)])
    # subsampling changes the mean between draws, so compare against a zero-input run
    zero = [np.zeros(4)] * 3
    rng = np.random.default_rng(3)
    noise = np.array([local_secure_aggregate(zero, params, rng) for _ in range(10_000)])
    expected = 1.0 * 0.5 / 2
    assert abs(noise.std() / expected - 1) < 0.05
    assert draws.shape == (10_000, 4)


def test_expected_squared_distortion():
    d, b = 50, 3
    params = DpParams(clip=0.3, sigma=2.0)
    vecs = [np.ones(d) * 0.01 * (i + 1) for i in range(b)]
    mean = average([clip(v, 0.3) for v in vecs])
    rng = np.random.default_rng(4)
    sq = [np.sum((local_secure_aggregate(vecs, params, rng) - mean) ** 2) for _ in range(4000)]
    expected = d * (2.0 * 0.3) ** 2 / b**2
    assert abs(np.mean(sq) / expected - 1) < 0.05


def test_subsampling_uses_b_views():
    vecs = [np.full(3, float(i)) for i in range(5)]
    out = local_secure_aggregate(vecs, DpParams(clip=100.0, sigma=0.0, batch_views=2), np.random.default_rng(5))
    # the mean of two distinct integers from 0..4
    assert out[0] * 2 == int(out[0] * 2) and 0.5 <= out[0] <= 3.5
    with pytest.raises(ValueError):
        local_secure_aggregate([], DpParams(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        local_secure_aggregate([np.ones(2), np.ones(3)], DpParams(), np.random.default_rng(0))


def test_noisy_probability():
    p = np.array([0.1, 0.7, 0.2])
    np.testing.assert_array_equal(noisy_probability(p, DpParams(sigma=0.0), None), p)
    rng = np.random.default_rng(6)
    params = DpParams(clip=0.5, sigma=1.0)
    n_views = 4
    copies = np.array([np.mean([noisy_probability(0.3, params, rng) for _ in range(n_views)]) for _ in range(10_000)])
    assert abs(copies.std() / (0.5 / math.sqrt(n_views)) - 1) < 0.05
    with pytest.raises(ValueError):
        noisy_probability(1.5, params, rng)


def test_single_release_matches_closed_form():
    ours = account_epsilon(4.0, 1e-3, 1).epsilon
    closed = gaussian_single_release_epsilon(4.0, 1e-3)
    assert abs(ours / closed - 1) < 0.10


def test_reference_spend_is_finite_and_logged():
    spend = account_epsilon(4.0, 1e-3, 100, 1.0)
    assert math.isfinite(spend.epsilon) and spend.epsilon > 0
    print(f"sigma=4 delta=1e-3 T=100 q=1: epsilon={spend.epsilon:.4f} (reported figure 4.33)")


def test_zero_sigma_is_infinite():
    assert account_epsilon(0.0, 1e-3, 5).epsilon == math.inf
    with pytest.raises(ValueError):
        account_epsilon(1.0, 1e-3, 0)
    with pytest.raises(ValueError):
        account_epsilon(1.0, 1e-3, 1, q=0.0)


def _rdp_by_quadrature(q, sigma, alpha):
    # log E_{z~N(0,s^2)} [((1-q) + q exp((2z-1)/(2 s^2)))^alpha] / (alpha - 1)
    mpmath.mp.dps = 30
    s2 = mpmath.mpf(sigma) ** 2

    def integrand(z):
        mu0 = mpmath.exp(-z * z / (2 * s2)) / mpmath.sqrt(2 * mpmath.pi * s2)
        ratio = (1 - q) + q * mpmath.exp((2 * z - 1) / (2 * s2))
        return mu0 * ratio**alpha

    val = mpmath.quad(integrand, [-mpmath.inf, 0, 1, mpmath.inf])
    return float(mpmath.log(val) / (alpha - 1))


@pytest.mark.parametrize("q,sigma,alpha", [(0.5, 1.0, 2), (0.5, 2.0, 8), (0.1, 1.5, 5), (0.9, 4.0, 20)])
def test_subsampled_rdp_against_quadrature(q, sigma, alpha):
    assert rdp_subsampled_gaussian(q, sigma, alpha) == pytest.approx(_rdp_by_quadrature(q, sigma, alpha), rel=1e-8)


def test_full_sampling_rdp_is_closed_form():
    assert rdp_subsampled_gaussian(1.0, 2.0, 3.0) == pytest.approx(3.0 / 8.0)
    assert rdp_subsampled_gaussian(1.0, 2.0, 7) == pytest.approx(_rdp_by_quadrature(1.0, 2.0, 7), rel=1e-8)


@settings(max_examples=60, deadline=None)
@given(
    st.floats(0.3, 8.0),
    st.floats(0.01, 2.0),
    st.integers(1, 200),
    st.integers(1, 200),
    st.sampled_from([0.5, 1.0]),
)
def test_accountant_monotone(sigma, dsigma, t1, t2, q):
    lo, hi = sorted((t1, t2))
    assert account_epsilon(sigma, 1e-3, lo, q).epsilon <= account_epsilon(sigma, 1e-3, hi, q).epsilon + 1e-12
    assert account_epsilon(sigma + dsigma, 1e-3, hi, q).epsilon <= account_epsilon(sigma, 1e-3, hi, q).epsilon + 1e-12
    assert account_epsilon(sigma, 1e-3, hi, 0.5).epsilon <= account_epsilon(sigma, 1e-3, hi, 1.0).epsilon + 1e-12
