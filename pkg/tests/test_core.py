import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from npsem.core import (
    ObservationOperator,
    ObservationSequence,
    RandomStream,
    SsmSpec,
    Theta,
    cholesky,
    gaussian_logpdf,
    gaussian_sample,
    project_covariance,
    psd_factor,
    simulate_ssm,
)
from npsem.dynamics import (
    AffineModel,
    AffineModelParams,
    Lorenz63Config,
    Lorenz63Model,
    SinusModel,
    l63_drift,
    l63_flow,
    make_model,
    rk_integrate,
    sinus_m,
)
from npsem.errors import SingularCovariance


def test_gaussian_logpdf_values():
    assert gaussian_logpdf(0.0, 0.0, 1.0) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
    assert gaussian_logpdf(1.0, 0.0, 1.0) == pytest.approx(-0.5 * math.log(2 * math.pi) - 0.5, abs=1e-12)
    v = gaussian_logpdf([1.0, 1.0], [0.0, 0.0], np.diag([2.0, 2.0]))
    assert v == pytest.approx(-math.log(2 * math.pi) - math.log(2.0) - 0.5, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(0, 10_000))
def test_gaussian_logpdf_matches_scipy(d, seed):
    from scipy.stats import multivariate_normal

    rng = np.random.default_rng(seed)
    a = rng.standard_normal((d, d))
    cov = a @ a.T + 0.5 * np.eye(d)
    mean = rng.standard_normal(d)
    x = rng.standard_normal((5, d))
    ref = multivariate_normal(mean, cov).logpdf(x)
    np.testing.assert_allclose(gaussian_logpdf(x, mean, cov), ref, rtol=1e-10, atol=1e-10)


def test_singular_covariance_reports_pivot():
    with pytest.raises(SingularCovariance) as info:
        cholesky(np.diag([1.0, 0.0, 1.0]))
    assert info.value.pivot == 1
    with pytest.raises(SingularCovariance):
        gaussian_logpdf([0.0, 0.0], [0.0, 0.0], np.zeros((2, 2)))


def test_psd_factor_handles_singular():
    cov = np.array([[1.0, 1.0], [1.0, 1.0]])
    f = psd_factor(cov)
    np.testing.assert_allclose(f @ f.T, cov, atol=1e-12)
    with pytest.raises(SingularCovariance):
        psd_factor(np.diag([1.0, -1.0]))


def test_gaussian_sample_moments():
    rng = RandomStream(3).generator()
    assert np.array_equal(gaussian_sample([1.5], [[0.0]], rng), [1.5])
    draws = gaussian_sample([0.0], [[1.0]], rng, size=100_000)
    assert abs(draws.mean()) < 4 / math.sqrt(100_000)
    draws = gaussian_sample([0.0], [[4.0]], rng, size=100_000)
    assert 3.8 <= draws.var() <= 4.2


def test_random_stream_lanes_are_reproducible_and_distinct():
    a = RandomStream(7).child(1, 2).generator().standard_normal(5)
    b = RandomStream(7).child(1, 2).generator().standard_normal(5)
    c = RandomStream(7).child(1, 3).generator().standard_normal(5)
    assert np.array_equal(a, b)
    assert not np.allclose(a, c)


def test_project_covariance():
    cov = np.array([[2.0, 0.5], [0.5, 4.0]])
    np.testing.assert_allclose(project_covariance(cov, "isotropic"), 3.0 * np.eye(2))
    np.testing.assert_allclose(project_covariance(cov, "diagonal"), np.diag([2.0, 4.0]))
    with pytest.raises(ValueError):
        project_covariance(cov, "banded")


def test_theta_validation():
    th = Theta.isotropic(1.0, 4.0, 3)
    assert th.sigma2_Q == 1.0 and th.sigma2_R == 4.0
    with pytest.raises(ValueError):
        Theta(np.diag([1.0, 2.0]), np.eye(2), "isotropic")
    with pytest.raises(ValueError):
        Theta(np.array([[1.0, 0.1], [0.1, 1.0]]), np.eye(2), "diagonal")
    with pytest.raises(SingularCovariance):
        Theta(-np.eye(2), np.eye(2), "full")


def test_observation_sequence_mask():
    y = ObservationSequence.from_array([[1.0], [np.nan], [3.0]])
    assert y.mask.tolist() == [True, False, True]
    assert y.n_observed == 2
    y2 = y.with_mask([True, True, False])
    assert y2.mask.tolist() == [True, False, False]


def test_observation_operator():
    op = ObservationOperator()
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(op(x), x)
    op = ObservationOperator(np.array([[1.0, 0.0, 0.0]]))
    assert op.dim_obs(3) == 1
    np.testing.assert_allclose(op(x), x[:, :1])


def test_simulate_noiseless_constant():
    spec = SsmSpec(AffineModel(AffineModelParams.identity(1)), Theta.isotropic(0.0, 0.0), [2.5], [[0.0]])
    x, y = simulate_ssm(spec, 20, 0)
    assert np.all(x == 2.5)
    assert np.all(y.values == 2.5)


def test_simulate_sinus_pairs_blurred():
    spec = SsmSpec(SinusModel(), Theta.isotropic(0.1, 0.1), [0.0], [[1.0]])
    x, y = simulate_ssm(spec, 1000, 1)
    # Residuals about sin(3 .) are larger for noisy pairs than for the true states.
    res_x = np.var(x[2:, 0] - sinus_m(x[1:-1, 0]))
    res_y = np.var(y.values[1:, 0] - sinus_m(y.values[:-1, 0]))
    assert res_x == pytest.approx(0.1, rel=0.15)
    assert res_y > 2 * res_x


def test_simulate_l63_bounded():
    spec = SsmSpec(Lorenz63Model(), Theta.isotropic(1.0, 4.0, 3), [1.5, -1.5, 25.0], np.eye(3))
    x, _ = simulate_ssm(spec, 1000, 2)
    assert np.abs(x).max() < 60


def test_sinus_values():
    np.testing.assert_allclose(sinus_m([0.0, math.pi / 6, 1.0]), [0.0, 1.0, math.sin(3.0)], atol=1e-15)


def test_l63_drift_values():
    np.testing.assert_allclose(l63_drift([0.0, 0.0, 0.0]), 0.0)
    np.testing.assert_allclose(l63_drift([1.0, 1.0, 1.0]), [0.0, 26.0, 1 - 8 / 3])
    s = math.sqrt(72.0)
    np.testing.assert_allclose(l63_drift([s, s, 27.0]), 0.0, atol=1e-12)


def test_l63_flow_fixed_points():
    assert np.array_equal(l63_flow(np.zeros((1, 3))), np.zeros((1, 3)))
    s = math.sqrt(72.0)
    np.testing.assert_allclose(l63_flow(np.array([[s, s, 27.0]])), [[s, s, 27.0]], atol=1e-9)


def test_l63_flow_matches_fine_rk4_oracle():
    x0 = np.array([[1.508870, -1.531271, 25.46091]])
    # Independent oracle: classical RK4 with dt/1000 steps.
    h = 0.08 / 1000
    ref = x0.copy()
    for _ in range(1000):
        k1 = l63_drift(ref)
        k2 = l63_drift(ref + 0.5 * h * k1)
        k3 = l63_drift(ref + 0.5 * h * k2)
        k4 = l63_drift(ref + h * k3)
        ref = ref + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    out = Lorenz63Model(Lorenz63Config(0.08))(x0)
    assert np.max(np.abs(out - ref)) < 1e-6


def test_rk_integrate_exponential():
    out = rk_integrate(lambda x: -x, np.array([1.0]), 1.0, 10, "rk4")
    assert out[0] == pytest.approx(math.exp(-1.0), abs=1e-6)


def test_affine_values():
    m = AffineModel(AffineModelParams(np.eye(2), np.zeros(2)))
    np.testing.assert_allclose(m(np.array([[1.0, -2.0]])), [[1.0, -2.0]])
    m = AffineModel(AffineModelParams(np.zeros((2, 2)), [3.0, 4.0]))
    np.testing.assert_allclose(m(np.array([[10.0, 20.0]])), [[3.0, 4.0]])
    m = make_model("affine", alpha=2.0, beta=1.0)
    assert m(np.array([[3.0]]))[0, 0] == 7.0


def test_lorenz_config_validation():
    with pytest.raises(ValueError):
        Lorenz63Config(dt=0.0)
    with pytest.raises(ValueError):
        Lorenz63Config(integrator="euler")
    with pytest.raises(ValueError):
        make_model("unknown")
