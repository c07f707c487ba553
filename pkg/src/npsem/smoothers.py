"""Smoothing engines: exact Kalman/RTS, EnKS, conditional particle filter
and backward simulation.

All stochastic smoothers return :class:`SmoothingEnsemble` objects holding
full trajectories of shape ``(N, T + 1, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np
from scipy.linalg import cho_solve

from .core import (
    ObservationSequence,
    SsmSpec,
    as_generator,
    cholesky,
    covariate_at,
    evaluate_dynamics,
    gaussian_sample,
    mvn_logpdf_chol,
    psd_factor,
    validate_states,
)
from .errors import SingularCovariance, WeightCollapse


@dataclass(frozen=True)
class SmootherConfig:
    n_f: int = 10
    n_s: int = 5
    n_ens: int = 20

    def __post_init__(self):
        if self.n_f < 1 or self.n_s < 1:
            raise ValueError("n_f and n_s must be >= 1")
        if self.n_ens < 2:
            raise ValueError("n_ens must be >= 2")


@dataclass(frozen=True, eq=False)
class SmoothingEnsemble:
    """Smoothing trajectories; ``transition_means`` optionally caches
    m(x_{t-1}, z_t), shape ``(N, T, d)``, under the dynamics the smoother ran with."""

    trajectories: np.ndarray
    source: str = "cpf-bs"
    transition_means: Optional[np.ndarray] = None

    def __post_init__(self):
        traj = np.asarray(self.trajectories, dtype=float)
        if traj.ndim == 2:
            traj = traj[None]
        if traj.ndim != 3 or traj.shape[0] < 1:
            raise ValueError("trajectories must have shape (N, T + 1, d) with N >= 1")
        if not np.all(np.isfinite(traj)):
            raise ValueError("smoothing trajectories must be finite")
        traj.setflags(write=False)
        object.__setattr__(self, "trajectories", traj)

    @property
    def N(self) -> int:
        return self.trajectories.shape[0]

    @property
    def T(self) -> int:
        return self.trajectories.shape[1] - 1

    @property
    def dim(self) -> int:
        return self.trajectories.shape[2]

    def mean(self) -> np.ndarray:
        return self.trajectories.mean(axis=0)

    def quantiles(self, q) -> np.ndarray:
        return np.quantile(self.trajectories, q, axis=0)

    def reordered(self, first: int) -> "SmoothingEnsemble":
        """Copy with member ``first`` moved to position 0."""
        order = [first] + [i for i in range(self.N) if i != first]
        tm = None if self.transition_means is None else self.transition_means[order]
        return SmoothingEnsemble(self.trajectories[order], self.source, tm)


def pool_ensembles(ensembles) -> SmoothingEnsemble:
    ensembles = list(ensembles)
    traj = np.concatenate([e.trajectories for e in ensembles], axis=0)
    return SmoothingEnsemble(traj, ensembles[0].source)


# ---------------------------------------------------------------------------
# Kalman filter / Rauch-Tung-Striebel smoother
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class KalmanResult:
    means: np.ndarray  # (T + 1, d) smoothing means
    covs: np.ndarray  # (T + 1, d, d)
    lag1_covs: np.ndarray  # (T, d, d); entry t - 1 is Cov(x_t, x_{t-1} | y)
    loglik: float
    filter_means: np.ndarray
    filter_covs: np.ndarray


def _affine_params(dynamics):
    params = getattr(dynamics, "params", None)
    if params is None or not hasattr(params, "alpha"):
        raise TypeError("kalman_smoother requires affine dynamics")
    return params.alpha, params.beta


def _spd_solve_right(A, P):
    """A @ inv(P) for symmetric PSD P (pseudo-inverse if singular)."""
    try:
        L = np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        return A @ np.linalg.pinv(P)
    return np.linalg.solve(L.T, np.linalg.solve(L, A.T)).T


def _smoother_gains(APf, Pp):
    """Batched A_t @ inv(P_t) for a stack of SPD matrices."""
    try:
        np.linalg.cholesky(Pp)
    except np.linalg.LinAlgError:
        return np.stack([_spd_solve_right(a, p) for a, p in zip(APf, Pp)])
    return APf @ np.linalg.inv(Pp)


def _innovation_chol(S):
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        return cholesky(S)  # raises SingularCovariance with the pivot


@numba.njit(cache=True, nogil=True)
def _chol_small(S):
    """Lower Cholesky factor of a small SPD matrix; ``ok`` False if not PD."""
    n = S.shape[0]
    L = np.zeros_like(S)
    for j in range(n):
        acc = S[j, j]
        for k in range(j):
            acc -= L[j, k] * L[j, k]
        if not acc > 0.0:
            return L, False
        L[j, j] = np.sqrt(acc)
        for i in range(j + 1, n):
            acc = S[i, j]
            for k in range(j):
                acc -= L[i, k] * L[j, k]
            L[i, j] = acc / L[j, j]
    return L, True


@numba.njit(cache=True, nogil=True)
def _chol_inverse(L):
    n = L.shape[0]
    Linv = np.zeros_like(L)
    for j in range(n):
        Linv[j, j] = 1.0 / L[j, j]
        for i in range(j + 1, n):
            acc = 0.0
            for k in range(j, i):
                acc -= L[i, k] * Linv[k, j]
            Linv[i, j] = acc / L[i, i]
    return Linv.T @ Linv


@numba.njit(cache=True, nogil=True)
def _kalman_kernel(A, b, H, Q, R, mu0, P0, values, mask):
    T, d = values.shape[0], mu0.shape[0]
    p = H.shape[0]
    mf = np.empty((T + 1, d))
    Pf = np.empty((T + 1, d, d))
    mp = np.empty((T + 1, d))
    Pp = np.empty((T + 1, d, d))
    mf[0] = mu0
    Pf[0] = P0
    eye = np.eye(d)
    const = p * np.log(2.0 * np.pi)
    loglik = 0.0
    for t in range(1, T + 1):
        m = A @ mf[t - 1] + b
        P = A @ Pf[t - 1] @ A.T + Q
        mp[t] = m
        Pp[t] = P
        if mask[t - 1]:
            innov = values[t - 1] - H @ m
            PHt = P @ H.T
            S = H @ PHt + R
            L, ok = _chol_small(S)
            if not ok:
                return mf, Pf, mf, Pf, np.empty((T, d, d)), 0.0, False
            Sinv = _chol_inverse(L)
            logdet = 0.0
            for i in range(p):
                logdet += 2.0 * np.log(L[i, i])
            loglik -= 0.5 * (const + logdet + innov @ Sinv @ innov)
            K = PHt @ Sinv
            mf[t] = m + K @ innov
            IKH = eye - K @ H
            P = IKH @ P @ IKH.T + K @ R @ K.T
            Pf[t] = 0.5 * (P + P.T)
        else:
            mf[t] = m
            Pf[t] = P
    ms = mf.copy()
    Ps = Pf.copy()
    lag1 = np.empty((T, d, d))
    for t in range(T - 1, -1, -1):
        L, ok = _chol_small(Pp[t + 1])
        if not ok:
            return mf, Pf, mf, Pf, lag1, 0.0, False
        J = Pf[t] @ A.T @ _chol_inverse(L)
        ms[t] = mf[t] + J @ (ms[t + 1] - mp[t + 1])
        P = Pf[t] + J @ (Ps[t + 1] - Pp[t + 1]) @ J.T
        Ps[t] = 0.5 * (P + P.T)
        lag1[t] = Ps[t + 1] @ J.T
    return ms, Ps, mf, Pf, lag1, loglik, True


def kalman_smoother(spec: SsmSpec, obs: ObservationSequence, covariates=None) -> KalmanResult:
    """Exact smoothing moments and log-likelihood of the linear-Gaussian model."""
    A, b = _affine_params(spec.dynamics)
    values = np.where(obs.mask[:, None], obs.values, 0.0)
    ms, Ps, mf, Pf, lag1, loglik, ok = _kalman_kernel(
        np.ascontiguousarray(A), np.ascontiguousarray(b), np.ascontiguousarray(spec.H, dtype=float),
        np.ascontiguousarray(spec.theta.Q), np.ascontiguousarray(spec.theta.R),
        np.ascontiguousarray(spec.init_mean, dtype=float), np.ascontiguousarray(spec.init_cov, dtype=float),
        values, np.ascontiguousarray(obs.mask),
    )
    if not ok:
        # Singular innovation or prediction covariance: slow path with pivoting.
        return _kalman_python(spec, obs)
    return KalmanResult(ms, Ps, lag1, float(loglik), mf, Pf)


def _kalman_python(spec: SsmSpec, obs: ObservationSequence) -> KalmanResult:
    """Reference implementation; also handles singular covariances."""
    A, b = _affine_params(spec.dynamics)
    H = spec.H
    Q, R = spec.theta.Q, spec.theta.R
    T, d = obs.T, spec.d
    At, Ht = A.T, H.T
    eye = np.eye(d)
    const = H.shape[0] * np.log(2.0 * np.pi)
    mf = np.empty((T + 1, d))
    Pf = np.empty((T + 1, d, d))
    mp = np.empty((T + 1, d))
    Pp = np.empty((T + 1, d, d))
    mf[0], Pf[0] = spec.init_mean, spec.init_cov
    loglik = 0.0
    for t in range(1, T + 1):
        m = A @ mf[t - 1] + b
        P = A @ Pf[t - 1] @ At + Q
        mp[t], Pp[t] = m, P
        if obs.mask[t - 1]:
            innov = obs.values[t - 1] - H @ m
            PHt = P @ Ht
            S = H @ PHt + R
            L = _innovation_chol(S)
            Sinv = np.linalg.inv(S)
            loglik -= 0.5 * (const + 2.0 * np.log(np.diag(L)).sum() + innov @ Sinv @ innov)
            K = PHt @ Sinv
            mf[t] = m + K @ innov
            IKH = eye - K @ H
            P = IKH @ P @ IKH.T + K @ R @ K.T
            Pf[t] = 0.5 * (P + P.T)
        else:
            mf[t], Pf[t] = m, P
    ms = mf.copy()
    Ps = Pf.copy()
    lag1 = np.empty((T, d, d))
    gains = _smoother_gains(Pf[:-1] @ At, Pp[1:])
    for t in range(T - 1, -1, -1):
        J = gains[t]
        ms[t] = mf[t] + J @ (ms[t + 1] - mp[t + 1])
        P = Pf[t] + J @ (Ps[t + 1] - Pp[t + 1]) @ J.T
        Ps[t] = 0.5 * (P + P.T)
        lag1[t] = Ps[t + 1] @ J.T
    return KalmanResult(ms, Ps, lag1, float(loglik), mf, Pf)


# ---------------------------------------------------------------------------
# Ensemble Kalman smoother
# ---------------------------------------------------------------------------


def enks(spec: SsmSpec, obs: ObservationSequence, covariates, cfg: SmootherConfig, rng) -> SmoothingEnsemble:
    """Stochastic EnKF (perturbed observations) plus an ensemble RTS pass."""
    rng = as_generator(rng)
    N, T, d = cfg.n_ens, obs.T, spec.d
    H, R = spec.H, spec.theta.R
    Lq = psd_factor(spec.theta.Q)
    Lr = psd_factor(R)
    xa = np.empty((T + 1, N, d))
    xf = np.empty((T + 1, N, d))
    xa[0] = gaussian_sample(spec.init_mean, spec.init_cov, rng, size=N)
    xf[0] = xa[0]
    for t in range(1, T + 1):
        z_t = covariate_at(covariates, t)
        noise = rng.standard_normal((N, d)) @ Lq.T
        xf[t] = evaluate_dynamics(spec.dynamics, xa[t - 1], z_t, t) + noise
        if not obs.mask[t - 1]:
            xa[t] = xf[t]
            continue
        pert = rng.standard_normal((N, R.shape[0])) @ Lr.T
        anom = xf[t] - xf[t].mean(axis=0)
        hanom = anom @ H.T
        Pxy = anom.T @ hanom / (N - 1)
        Pyy = hanom.T @ hanom / (N - 1) + R
        if not np.any(Pyy):
            xa[t] = xf[t]
            continue
        K = cho_solve((cholesky(Pyy), True), Pxy.T).T
        innov = obs.values[t - 1] + pert - xf[t] @ H.T
        xa[t] = xf[t] + innov @ K.T
    xs = np.empty_like(xa)
    xs[T] = xa[T]
    for t in range(T - 1, -1, -1):
        aa = xa[t] - xa[t].mean(axis=0)
        af = xf[t + 1] - xf[t + 1].mean(axis=0)
        Pff = af.T @ af / (N - 1)
        if not np.any(Pff):
            xs[t] = xa[t]
            continue
        C = aa.T @ af / (N - 1)
        J = cho_solve((cholesky(Pff), True), C.T).T
        xs[t] = xa[t] + (xs[t + 1] - xf[t + 1]) @ J.T
    return SmoothingEnsemble(np.transpose(xs, (1, 0, 2)), "enks")


# ---------------------------------------------------------------------------
# Conditional particle filter and backward simulation
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ParticleSystem:
    """Output of one CPF sweep.

    ``particles`` ``(N_f, T + 1, d)``; ``weights``/``log_weights``
    ``(N_f, T + 1)`` normalized; ``ancestors`` ``(N_f, T)`` with entry
    ``t - 1`` the (0-based) ancestor index used at time t. The last lane
    (index ``N_f - 1``) carries the conditioning trajectory.
    ``transition_means[:, t]`` caches m(x_t^{(i)}, z_{t+1}) for t < T.
    """

    particles: np.ndarray
    weights: np.ndarray
    log_weights: np.ndarray
    ancestors: np.ndarray
    conditioning: np.ndarray
    transition_means: Optional[np.ndarray] = None
    dynamics: object = None

    @property
    def n_f(self) -> int:
        return self.particles.shape[0]

    @property
    def T(self) -> int:
        return self.particles.shape[1] - 1


def _normalize_log(lw: np.ndarray, axis=-1):
    mx = np.max(lw, axis=axis, keepdims=True)
    w = np.exp(lw - mx)
    s = w.sum(axis=axis, keepdims=True)
    return w / s, lw - mx - np.log(s)


def _categorical(cum_w: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draws; ``cum_w`` has the category axis last."""
    idx = (cum_w <= u[..., None]).sum(axis=-1)
    return np.minimum(idx, cum_w.shape[-1] - 1)


def cpf(spec: SsmSpec, obs: ObservationSequence, covariates, conditioning, cfg: SmootherConfig, rng) -> ParticleSystem:
    """One sweep of the conditional particle filter (multinomial resampling)."""
    rng = as_generator(rng)
    N, T, d = cfg.n_f, obs.T, spec.d
    cond = validate_states(conditioning, d)
    if cond.shape[0] != T + 1:
        raise ValueError("conditioning trajectory must have length T + 1")
    H = spec.H
    Lq = psd_factor(spec.theta.Q)
    Lr = cholesky(spec.theta.R) if obs.n_observed else None
    x = np.empty((N, T + 1, d))
    lw = np.empty((N, T + 1))
    w = np.empty((N, T + 1))
    anc = np.empty((N, T), dtype=np.int64)
    means = np.empty((N, T, d))
    x[:, 0] = gaussian_sample(spec.init_mean, spec.init_cov, rng, size=N)
    x[N - 1, 0] = cond[0]
    w[:, 0] = 1.0 / N
    lw[:, 0] = -np.log(N)
    for t in range(1, T + 1):
        z_t = covariate_at(covariates, t)
        means[:, t - 1] = evaluate_dynamics(spec.dynamics, x[:, t - 1], z_t, t)
        a = np.empty(N, dtype=np.int64)
        a[: N - 1] = _categorical(np.cumsum(w[:, t - 1]), rng.random(N - 1))
        a[N - 1] = N - 1
        anc[:, t - 1] = a
        noise = rng.standard_normal((N, d)) @ Lq.T
        x[:, t] = means[a, t - 1] + noise
        x[N - 1, t] = cond[t]
        if obs.mask[t - 1]:
            resid = obs.values[t - 1] - x[:, t] @ H.T
            logp = mvn_logpdf_chol(resid, Lr)
            if not np.any(np.isfinite(logp)) or np.any(np.isnan(logp)):
                raise WeightCollapse(f"all particle weights vanished at t={t}", t=t)
            w[:, t], lw[:, t] = _normalize_log(logp)
        else:
            w[:, t] = 1.0 / N
            lw[:, t] = -np.log(N)
    return ParticleSystem(x, w, lw, anc, cond, means, spec.dynamics)


def backward_weights(log_w_t, means_t, x_next, chol_q):
    """Normalized smoothing weights prop. to N(x_next; m(x_t^i), Q) w_t^i.

    ``x_next`` may be a single state ``(d,)`` or a batch ``(n, d)``; the
    result has shape ``(N_f,)`` or ``(n, N_f)``.
    """
    x_next = np.asarray(x_next, dtype=float)
    single = x_next.ndim == 1
    xn = np.atleast_2d(x_next)
    diff = xn[:, None, :] - means_t[None, :, :]
    lw = np.asarray(log_w_t)[None, :] + mvn_logpdf_chol(diff, chol_q)
    if np.any(np.isnan(lw)):
        raise FloatingPointError("NaN in backward simulation weights")
    w, _ = _normalize_log(lw, axis=1)
    return w[0] if single else w


def backward_simulation(ps: ParticleSystem, dynamics, theta, covariates, n_s: int, rng) -> SmoothingEnsemble:
    """Draw ``n_s`` trajectories from the particle system by backward simulation."""
    rng = as_generator(rng)
    N, T, d = ps.n_f, ps.T, ps.particles.shape[2]
    if ps.transition_means is not None and dynamics is ps.dynamics:
        means = ps.transition_means
    else:
        means = np.empty((N, T, d))
        for t in range(T):
            z = covariate_at(covariates, t + 1)
            means[:, t] = evaluate_dynamics(dynamics, ps.particles[:, t], z, t + 1)
    chol_q = cholesky(theta.Q)
    traj = np.empty((n_s, T + 1, d))
    tmeans = np.empty((n_s, T, d))
    idx = _categorical(np.cumsum(ps.weights[:, T]), rng.random(n_s))
    traj[:, T] = ps.particles[idx, T]
    for t in range(T - 1, -1, -1):
        bw = backward_weights(ps.log_weights[:, t], means[:, t], traj[:, t + 1], chol_q)
        idx = _categorical(np.cumsum(bw, axis=1), rng.random(n_s))
        traj[:, t] = ps.particles[idx, t]
        tmeans[:, t] = means[idx, t]
    return SmoothingEnsemble(traj, "cpf-bs", tmeans)


def update_conditioning(ensemble: SmoothingEnsemble, rng):
    """Pick one trajectory uniformly at random; returns ``(trajectory, index)``."""
    rng = as_generator(rng)
    j = int(rng.integers(ensemble.N))
    return ensemble.trajectories[j], j


def cpf_bs(spec: SsmSpec, obs, covariates, conditioning, cfg: SmootherConfig, rng):
    """CPF sweep, backward simulation and conditioning update.

    Returns the ensemble reordered so that its first member is the new
    conditioning trajectory, together with the particle system.
    """
    rng = as_generator(rng)
    ps = cpf(spec, obs, covariates, conditioning, cfg, rng)
    ens = backward_simulation(ps, spec.dynamics, spec.theta, covariates, cfg.n_s, rng)
    _, j = update_conditioning(ens, rng)
    return ens.reordered(j), ps
