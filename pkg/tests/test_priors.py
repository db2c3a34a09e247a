import numpy as np
import pytest
from scipy import integrate, stats

from spafh.priors import (
    LocalKind, LocalPrior, inverse_gamma_sample, inverse_wishart_sample, local_log_density,
    log_sigmoid, relaxed_constraint_log, relaxed_log_target, sample_relaxed_local,
)

HS = LocalPrior(LocalKind.HORSESHOE)


def test_horseshoe_density_values():
    assert np.exp(local_log_density(HS, 1e-12)) == pytest.approx(2 / np.pi, rel=1e-10)
    assert np.exp(local_log_density(HS, 1.0)) == pytest.approx(1 / np.pi, rel=1e-12)


def test_normal_gamma_density_value():
    ng = LocalPrior(LocalKind.NORMAL_GAMMA, a=1.0, b=1.0)
    assert np.exp(local_log_density(ng, 1.0)) == pytest.approx(2 * np.exp(-1), rel=1e-12)


@pytest.mark.parametrize("prior", [HS, LocalPrior(LocalKind.NORMAL_GAMMA, 0.3, 2.0),
                                   LocalPrior(LocalKind.NORMAL_GAMMA, 1.0, 0.5)])
def test_local_densities_integrate_to_one(prior):
    total, _ = integrate.quad(lambda x: np.exp(local_log_density(prior, x)), 0, np.inf, limit=200)
    assert total == pytest.approx(1.0, abs=1e-6)


def test_local_density_rejects_nonpositive():
    with pytest.raises(ValueError):
        local_log_density(HS, 0.0)
    with pytest.raises(ValueError):
        LocalPrior(LocalKind.NORMAL_GAMMA, a=0.0, b=1.0)


def test_relaxed_constraint_values():
    assert relaxed_constraint_log(100, np.zeros(3)) == pytest.approx(3 * np.log(0.5))
    assert relaxed_constraint_log(100, [1.0, 1.0]) == pytest.approx(0.0, abs=1e-40)
    assert relaxed_constraint_log(100, [-0.1]) == pytest.approx(-np.log1p(np.exp(10.0)), rel=1e-12)
    with pytest.raises(ValueError):
        relaxed_constraint_log(0.0, [1.0])


def test_log_sigmoid_stable_tails():
    x = np.array([-800.0, -30.0, 0.0, 30.0, 800.0])
    out = log_sigmoid(x)
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, -np.logaddexp(0, -x), rtol=1e-12)


def test_relaxed_log_target_vectorized():
    f = relaxed_log_target(HS, 100.0)
    pts = np.array([[0.5, -0.2], [1.0, 3.0]])
    np.testing.assert_allclose(f(pts), [f(pts[0]), f(pts[1])])


def test_relaxed_prior_sampler_matches_density(rng):
    draws = sample_relaxed_local(rng, HS, 5.0, 200_000)
    grid = np.linspace(-30, 30, 60001)
    dens = np.exp(relaxed_log_target(HS, 5.0)(grid[:, None]))
    cdf = np.cumsum(dens)
    cdf /= cdf[-1]
    inside = np.abs(draws) < 30
    emp = np.searchsorted(np.sort(draws[inside]), grid) / inside.sum()
    assert np.max(np.abs(emp - cdf)) < 0.01


def test_inverse_gamma_mean(rng):
    x = inverse_gamma_sample(rng, 3.0, 4.0, 100_000)
    assert x.mean() == pytest.approx(2.0, rel=0.02)
    with pytest.raises(ValueError):
        inverse_gamma_sample(rng, -1.0, 1.0)


def test_inverse_wishart_scalar_case(rng):
    x = np.array([inverse_wishart_sample(rng, 10, 1.0)[0, 0] for _ in range(100_000)])
    assert x.mean() == pytest.approx(0.125, rel=0.02)
    assert stats.kstest(1 / x, stats.chi2(10).cdf).statistic < 0.01


def test_inverse_wishart_mean_and_support(rng):
    scale = np.array([[2.0, 0.5], [0.5, 1.0]])
    draws = np.stack([inverse_wishart_sample(rng, 10, scale) for _ in range(100_000)])
    np.testing.assert_allclose(draws.mean(axis=0), scale / 7, atol=0.01)
    assert np.all(np.linalg.eigvalsh(draws[:1000]) > 0)
    eye = np.stack([inverse_wishart_sample(rng, 10, np.eye(2)) for _ in range(100_000)])
    np.testing.assert_allclose(eye.mean(axis=0), np.eye(2) / 7, atol=0.01)


def test_inverse_wishart_matches_scipy_inverse(rng):
    scale = np.array([[1.5, -0.3, 0.2], [-0.3, 1.0, 0.1], [0.2, 0.1, 0.7]])
    ours = np.stack([np.linalg.inv(inverse_wishart_sample(rng, 8, scale)) for _ in range(40_000)])
    ref = stats.wishart(df=8, scale=np.linalg.inv(scale)).rvs(40_000, random_state=1)
    se = ref.std(axis=0) / np.sqrt(40_000)
    assert np.all(np.abs(ours.mean(axis=0) - ref.mean(axis=0)) < 5 * se * np.sqrt(2))


def test_inverse_wishart_validation(rng):
    with pytest.raises(ValueError):
        inverse_wishart_sample(rng, 0.5, np.eye(2))
    with pytest.raises(ValueError):
        inverse_wishart_sample(rng, 5, -np.eye(2))


def test_small_shape_normal_gamma_draws_stay_positive():
    rng = np.random.default_rng(11)
    lam = sample_relaxed_local(rng, LocalPrior(LocalKind.NORMAL_GAMMA, 0.01, 1.0), 100.0, 50_000)
    assert np.all(np.abs(lam) > 0)
    # log-space construction matches lam^2 ~ Ga(a, b)
    lam2 = sample_relaxed_local(rng, LocalPrior(LocalKind.NORMAL_GAMMA, 0.7, 2.0), 100.0, 20_000) ** 2
    assert stats.kstest(lam2, stats.gamma(0.7, scale=0.5).cdf).pvalue > 1e-3


def test_normal_gamma_log_target_excludes_zero():
    target = relaxed_log_target(LocalPrior(LocalKind.NORMAL_GAMMA, 0.2, 1.0), 100.0)
    assert target(np.array([0.0, 1.0])) == -np.inf
    assert np.isfinite(target(np.array([1e-300, 1.0])))
