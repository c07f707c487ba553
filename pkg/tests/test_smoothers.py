import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import affine_joint_gaussian, condition_on_observations, total_variation
from npsem.core import ObservationOperator, ObservationSequence, SsmSpec, Theta, cholesky, simulate_ssm
from npsem.dynamics import AffineModel, AffineModelParams, Lorenz63Model
from npsem.smoothers import (
    ParticleSystem,
    SmootherConfig,
    SmoothingEnsemble,
    backward_simulation,
    backward_weights,
    cpf,
    cpf_bs,
    enks,
    kalman_smoother,
    pool_ensembles,
    update_conditioning,
)


def affine_spec(alpha, beta, q, r, mu0=0.0, p0=1.0):
    model = AffineModel(AffineModelParams([[alpha]], [beta]))
    return SsmSpec(model, Theta.isotropic(q, r), [mu0], [[p0]])


def kalman_vs_oracle(spec, y):
    A, b = spec.dynamics.params.alpha, spec.dynamics.params.beta
    mean, cov, nx = affine_joint_gaussian(A, b, spec.theta.Q, spec.theta.R, spec.init_mean, spec.init_cov,
                                          spec.H, y.T)
    pm, pc, ll = condition_on_observations(mean, cov, nx, np.nan_to_num(y.values), y.mask)
    ks = kalman_smoother(spec, y)
    d = spec.d
    for t in range(y.T + 1):
        np.testing.assert_allclose(ks.means[t], pm[d * t:d * (t + 1)], atol=1e-10, rtol=0)
        np.testing.assert_allclose(ks.covs[t], pc[d * t:d * (t + 1), d * t:d * (t + 1)], atol=1e-10, rtol=0)
    for t in range(1, y.T + 1):
        lag = pc[d * t:d * (t + 1), d * (t - 1):d * t]
        np.testing.assert_allclose(ks.lag1_covs[t - 1], lag, atol=1e-10, rtol=0)
    assert ks.loglik == pytest.approx(ll, abs=1e-10)


def test_kalman_hand_case():
    spec = affine_spec(1.0, 0.0, 1.0, 1.0)
    ks = kalman_smoother(spec, ObservationSequence([[1.0]]))
    # Prior var 2 at t=1, gain 2/3.
    assert ks.means[1, 0] == pytest.approx(2 / 3, abs=1e-14)
    assert ks.covs[1, 0, 0] == pytest.approx(2 / 3, abs=1e-14)
    assert ks.means[0, 0] == pytest.approx(1 / 3, abs=1e-14)
    assert ks.covs[0, 0, 0] == pytest.approx(2 / 3, abs=1e-14)
    assert ks.lag1_covs[0, 0, 0] == pytest.approx(1 / 3, abs=1e-14)


@settings(max_examples=40, deadline=None)
@given(
    st.floats(-1.5, 1.5), st.floats(-2, 2), st.floats(0.05, 3), st.floats(0.05, 3),
    st.floats(0.1, 3), st.integers(0, 2**32 - 1),
)
def test_kalman_matches_joint_gaussian(alpha, beta, q, r, p0, seed):
    spec = affine_spec(alpha, beta, q, r, 0.3, p0)
    _, y = simulate_ssm(spec, 3, seed)
    kalman_vs_oracle(spec, y)


def test_kalman_matches_joint_gaussian_with_gap_and_dimension():
    rng = np.random.default_rng(4)
    A = np.array([[0.9, 0.2], [-0.1, 0.7]])
    model = AffineModel(AffineModelParams(A, [0.1, -0.3]))
    spec = SsmSpec(model, Theta(np.diag([0.5, 0.3]), np.array([[0.4]]), "full"), [0.0, 1.0], np.eye(2),
                   ObservationOperator(np.array([[1.0, 0.5]])))
    y = ObservationSequence(rng.standard_normal((5, 1)), np.array([True, False, True, True, False]))
    kalman_vs_oracle(spec, y)


def test_kalman_with_no_observations_is_the_prior():
    spec = affine_spec(0.5, 1.0, 1.0, 1.0)
    y = ObservationSequence(np.full((4, 1), np.nan), np.zeros(4, bool))
    ks = kalman_smoother(spec, y)
    means = [0.0]
    for _ in range(4):
        means.append(0.5 * means[-1] + 1.0)
    np.testing.assert_allclose(ks.means[:, 0], means, atol=1e-14)
    assert ks.loglik == 0.0


def test_kalman_small_R_tracks_observations():
    spec = affine_spec(0.8, 0.0, 1.0, 1e-12)
    _, y = simulate_ssm(spec, 20, 1)
    ks = kalman_smoother(spec, y)
    np.testing.assert_allclose(ks.means[1:, 0], y.values[:, 0], atol=1e-8)
    assert ks.covs[1:].max() < 1e-8


def test_kalman_singular_prediction_uses_pivoting_path():
    spec = affine_spec(0.5, 1.0, 0.0, 1.0, mu0=2.0, p0=0.0)
    _, y = simulate_ssm(spec, 5, 0)
    ks = kalman_smoother(spec, y)
    np.testing.assert_allclose(ks.means[:, 0], [2.0, 2.0, 2.0, 2.0, 2.0, 2.0], atol=1e-14)
    assert np.all(ks.covs == 0.0)


def test_kalman_rejects_nonlinear_dynamics():
    spec = SsmSpec(Lorenz63Model(), Theta.isotropic(1.0, 1.0, 3), np.zeros(3), np.eye(3))
    with pytest.raises(TypeError):
        kalman_smoother(spec, ObservationSequence(np.zeros((2, 3))))


def test_enks_large_ensemble_matches_kalman():
    spec = affine_spec(0.9, 0.1, 0.5, 0.5)
    _, y = simulate_ssm(spec, 20, 2)
    ks = kalman_smoother(spec, y)
    ens = enks(spec, y, None, SmootherConfig(n_ens=10_000), 3)
    sd = np.sqrt(ks.covs[:, 0, 0])
    assert np.max(np.abs(ens.mean()[:, 0] - ks.means[:, 0]) / sd) < 0.1
    var = ens.trajectories[:, :, 0].var(axis=0, ddof=1)
    np.testing.assert_allclose(var, ks.covs[:, 0, 0], rtol=0.1)


def test_enks_deterministic_limit_collapses():
    spec = affine_spec(0.5, 1.0, 0.0, 1.0, mu0=2.0, p0=0.0)
    _, y = simulate_ssm(spec, 10, 5)
    ens = enks(spec, y, None, SmootherConfig(n_ens=20), 6)
    truth = [2.0]
    for _ in range(10):
        truth.append(0.5 * truth[-1] + 1.0)
    np.testing.assert_allclose(ens.trajectories[:, :, 0], np.tile(truth, (20, 1)), atol=1e-12)


def test_cpf_single_particle_returns_conditioning():
    spec = affine_spec(0.9, 0.0, 1.0, 1.0)
    x, y = simulate_ssm(spec, 15, 3)
    ens, ps = cpf_bs(spec, y, None, x, SmootherConfig(n_f=1, n_s=3), 4)
    assert np.array_equal(ps.particles[0], x)
    for traj in ens.trajectories:
        assert np.array_equal(traj, x)


def test_cpf_keeps_conditioning_lane_and_normalizes():
    spec = affine_spec(0.9, 0.0, 1.0, 1.0)
    x, y = simulate_ssm(spec, 30, 3)
    ps = cpf(spec, y, None, x, SmootherConfig(n_f=7), 5)
    assert np.array_equal(ps.particles[-1], x)
    assert np.all(ps.ancestors[-1] == 6)
    np.testing.assert_allclose(ps.weights.sum(axis=0), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.exp(ps.log_weights), ps.weights, atol=1e-12)
    with pytest.raises(ValueError):
        cpf(spec, y, None, x[:-1], SmootherConfig(n_f=7), 5)


def test_cpf_all_masked_gives_uniform_weights():
    spec = affine_spec(0.9, 0.0, 1.0, 1.0)
    x, _ = simulate_ssm(spec, 10, 3)
    y = ObservationSequence(np.full((10, 1), np.nan), np.zeros(10, bool))
    ps = cpf(spec, y, None, x, SmootherConfig(n_f=4), 1)
    assert np.all(ps.weights == 0.25)


def fixed_particle_system(rng, N=3, T=2):
    particles = rng.standard_normal((N, T + 1, 1))
    w = rng.random((N, T + 1)) + 0.2
    w /= w.sum(axis=0)
    return ParticleSystem(particles, w, np.log(w), np.zeros((N, T), np.int64), particles[-1])


def test_backward_simulation_matches_enumeration():
    rng = np.random.default_rng(11)
    ps = fixed_particle_system(rng)
    dyn = AffineModel(AffineModelParams([[0.7]], [0.2]))
    theta = Theta.isotropic(0.6, 1.0)
    N, T = 3, 2
    exact = {}
    for path in itertools.product(range(N), repeat=T + 1):
        prob = ps.weights[path[T], T]
        for t in range(T - 1, -1, -1):
            nxt = ps.particles[path[t + 1], t + 1, 0]
            k = ps.weights[:, t] * np.exp(-0.5 * (nxt - (0.7 * ps.particles[:, t, 0] + 0.2)) ** 2 / 0.6)
            prob *= k[path[t]] / k.sum()
        exact[path] = prob
    assert sum(exact.values()) == pytest.approx(1.0)
    n = 100_000
    ens = backward_simulation(ps, dyn, theta, None, n, 12)
    lookup = {float(ps.particles[i, t, 0]): i for i in range(N) for t in range(T + 1)}
    idx = np.vectorize(lookup.get)(ens.trajectories[:, :, 0])
    paths, counts = np.unique(idx, axis=0, return_counts=True)
    emp = {tuple(int(v) for v in p): c / n for p, c in zip(paths, counts)}
    assert total_variation(emp, exact) < 0.02


def test_backward_weights_flat_transition_gives_filter_weights():
    rng = np.random.default_rng(1)
    w = rng.random(6)
    w /= w.sum()
    means = rng.standard_normal((6, 2))
    chol = cholesky(1e8 * np.eye(2))
    bw = backward_weights(np.log(w), means, np.zeros(2), chol)
    np.testing.assert_allclose(bw, w, rtol=1e-6)
    batch = backward_weights(np.log(w), means, np.zeros((3, 2)), chol)
    assert batch.shape == (3, 6)


def test_backward_weights_reject_nan():
    with pytest.raises(FloatingPointError):
        backward_weights(np.log(np.full(2, 0.5)), np.array([[np.nan], [0.0]]), np.zeros(1), np.eye(1))


def test_update_conditioning_is_uniform():
    traj = np.arange(5.0)[:, None, None] * np.ones((5, 3, 1))
    ens = SmoothingEnsemble(traj)
    rng = np.random.default_rng(0)
    counts = np.zeros(5)
    for _ in range(10_000):
        tr, j = update_conditioning(ens, rng)
        assert tr[0, 0] == j
        counts[j] += 1
    chi2 = ((counts - 2000) ** 2 / 2000).sum()
    assert chi2 < 18.47  # 0.999 quantile, 4 dof


def test_cpf_bs_first_member_is_conditioning_choice():
    spec = affine_spec(0.9, 0.0, 1.0, 1.0)
    x, y = simulate_ssm(spec, 20, 3)
    ens, ps = cpf_bs(spec, y, None, x, SmootherConfig(n_f=10, n_s=5), 9)
    assert ens.N == 5 and ens.T == 20
    assert ens.transition_means.shape == (5, 20, 1)
    np.testing.assert_allclose(ens.transition_means[:, :, 0], 0.9 * ens.trajectories[:, :-1, 0], atol=1e-12)
    # Every draw is assembled from particles of the system.
    for t in range(21):
        assert set(ens.trajectories[:, t, 0]) <= set(ps.particles[:, t, 0])


def test_cpf_bs_is_reproducible():
    spec = affine_spec(0.9, 0.0, 1.0, 1.0)
    x, y = simulate_ssm(spec, 20, 3)
    a, _ = cpf_bs(spec, y, None, x, SmootherConfig(), 9)
    b, _ = cpf_bs(spec, y, None, x, SmootherConfig(), 9)
    assert np.array_equal(a.trajectories, b.trajectories)


def test_ensemble_helpers():
    traj = np.random.default_rng(0).standard_normal((4, 6, 2))
    ens = SmoothingEnsemble(traj)
    assert (ens.N, ens.T, ens.dim) == (4, 5, 2)
    r = ens.reordered(2)
    assert np.array_equal(r.trajectories[0], traj[2])
    assert np.array_equal(r.trajectories[1:], traj[[0, 1, 3]])
    pooled = pool_ensembles([ens, r])
    assert pooled.N == 8
    with pytest.raises(ValueError):
        SmoothingEnsemble(np.full((2, 3, 1), np.nan))
    with pytest.raises(ValueError):
        SmootherConfig(n_ens=1)
