"""Estimation loops: exact EM for the linear-Gaussian model, stochastic EM
with a fixed dynamical model, and npSEM with catalog updates."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Any, List, Optional

import numpy as np

from .core import (
    ObservationOperator,
    SsmSpec,
    Theta,
    as_generator,
    cholesky,
    evaluate_dynamics,
    gaussian_logpdf,
    mvn_logpdf_chol,
    project_covariance,
)
from .dynamics import AffineModel, AffineModelParams
from .errors import NoObservations
from .llr import LlrConfig, LlrSurrogate, build_catalog, cross_validate_k
from .smoothers import SmootherConfig, SmoothingEnsemble, cpf_bs, enks, kalman_smoother

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-10


@dataclass
class EstimationRecord:
    iteration: int
    theta: Theta
    loglik_proxy: float
    k: Optional[int] = None
    catalog_id: Optional[str] = None
    wallclock: float = 0.0
    model: Any = None
    ensemble: Optional[SmoothingEnsemble] = None


@dataclass
class EstimationTrace:
    """Per-iteration record of an estimation run (record 0 = initialization)."""

    records: List[EstimationRecord] = field(default_factory=list)
    conditioning: Optional[np.ndarray] = None
    error: Optional[BaseException] = None

    def __len__(self):
        return len(self.records)

    @property
    def final(self) -> EstimationRecord:
        return self.records[-1]

    def sigma2_Q(self) -> np.ndarray:
        return np.array([r.theta.sigma2_Q for r in self.records])

    def sigma2_R(self) -> np.ndarray:
        return np.array([r.theta.sigma2_R for r in self.records])

    def rows(self):
        """Rows ``iter, sigma2_Q, sigma2_R, I_hat, k, wallclock_s``."""
        for r in self.records:
            yield (r.iteration, r.theta.sigma2_Q, r.theta.sigma2_R, r.loglik_proxy, r.k, r.wallclock)


@dataclass(frozen=True)
class NpSemConfig:
    iterations: int = 50
    smoother: str = "cpf-bs"
    catalog_update: bool = True
    llr: LlrConfig = field(default_factory=LlrConfig)
    smoother_cfg: SmootherConfig = field(default_factory=SmootherConfig)
    cv_every: int = 10
    parameterization: str = "isotropic"
    keep_ensembles: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.cv_every < 1:
            raise ValueError("cv_every must be >= 1")
        if self.smoother not in ("cpf-bs", "enks"):
            raise ValueError(f"unknown smoother {self.smoother!r}")


class EstimationAborted(RuntimeError):
    """Wraps a numeric failure inside an estimation loop; carries the partial trace."""

    def __init__(self, cause: BaseException, trace: EstimationTrace, iteration: int):
        super().__init__(f"estimation aborted at iteration {iteration}: {cause}")
        self.cause = cause
        self.trace = trace
        self.iteration = iteration


# ---------------------------------------------------------------------------
# Complete log-likelihood and intermediate function
# ---------------------------------------------------------------------------


def _transition_means(dynamics, traj: np.ndarray, z) -> np.ndarray:
    """m(x_{t-1}, z_t) for every member and t = 1..T, shape (N, T, d)."""
    n, tp1, d = traj.shape
    T = tp1 - 1
    x_prev = traj[:, :-1, :].reshape(n * T, d)
    times = np.tile(np.arange(1, T + 1), n)
    zz = None
    if z is not None and np.asarray(z).size:
        zz = np.tile(np.asarray(z, dtype=float).reshape(T, -1), (n, 1))
    return evaluate_dynamics(dynamics, x_prev, zz, times).reshape(n, T, d)


def _residuals(traj, y, z, dynamics, H, means=None):
    """Transition residuals (N, T, d) and observation residuals (N, T_obs, d_obs)."""
    if means is None:
        means = _transition_means(dynamics, traj, z)
    trans = traj[:, 1:, :] - means
    obs_t = np.nonzero(y.mask)[0]
    obs = y.values[obs_t][None, :, :] - traj[:, obs_t + 1, :] @ H.T
    return trans, obs


def _loglik_from_residuals(traj, trans, obs, theta: Theta, spec: SsmSpec) -> np.ndarray:
    lp0 = gaussian_logpdf(traj[:, 0, :], spec.init_mean, spec.init_cov)
    lq = mvn_logpdf_chol(trans, cholesky(theta.Q)).sum(axis=1)
    if obs.shape[1]:
        lr = mvn_logpdf_chol(obs, cholesky(theta.R)).sum(axis=1)
    else:
        lr = 0.0
    return np.atleast_1d(lp0) + lq + lr


def complete_loglik(x, y, z, dynamics, theta: Theta, spec: SsmSpec) -> float:
    """log p(x_0) + sum_t log N(x_t; m(x_{t-1}, z_t), Q) + sum_{observed t} log N(y_t; H x_t, R)."""
    traj = np.asarray(x, dtype=float)
    if traj.ndim == 1:
        traj = traj[:, None]
    traj = traj[None]
    trans, obs = _residuals(traj, y, z, dynamics, spec.H)
    return float(_loglik_from_residuals(traj, trans, obs, theta, spec)[0])


def intermediate_I_hat(ensemble, y, z, dynamics, theta: Theta, spec: SsmSpec) -> float:
    """Monte Carlo intermediate function: mean complete log-likelihood over the ensemble."""
    traj = np.asarray(getattr(ensemble, "trajectories", ensemble), dtype=float)
    trans, obs = _residuals(traj, y, z, dynamics, spec.H)
    return float(np.mean(_loglik_from_residuals(traj, trans, obs, theta, spec)))


def _floor(cov: np.ndarray, parameterization: str) -> np.ndarray:
    if parameterization == "full":
        return cov
    return np.diag(np.maximum(np.diag(cov), VARIANCE_FLOOR))


def _theta_from_residuals(trans, obs, parameterization: str) -> Theta:
    if obs.shape[1] == 0:
        raise NoObservations("no observed time step to estimate R")
    d = trans.shape[-1]
    flat = trans.reshape(-1, d)
    Q = flat.T @ flat / flat.shape[0]
    o = obs.reshape(-1, obs.shape[-1])
    R = o.T @ o / o.shape[0]
    Q = _floor(project_covariance(Q, parameterization), parameterization)
    R = _floor(project_covariance(R, parameterization), parameterization)
    return Theta(Q, R, parameterization)


def m_step_gaussian(ensemble, y, z, dynamics, parameterization: str = "isotropic", obs_op=None) -> Theta:
    """Closed-form maximizer of the intermediate function over (Q, R)."""
    obs_op = obs_op or ObservationOperator()
    traj = np.asarray(getattr(ensemble, "trajectories", ensemble), dtype=float)
    H = obs_op.as_matrix(traj.shape[2])
    if y.n_observed == 0:
        raise NoObservations("no observed time step to estimate R")
    trans, obs = _residuals(traj, y, z, dynamics, H)
    return _theta_from_residuals(trans, obs, parameterization)


# ---------------------------------------------------------------------------
# Exact EM for the linear-Gaussian model
# ---------------------------------------------------------------------------


def _linear_m_step(ks, y, H, parameterization: str):
    ms, Ps, lag1 = ks.means, ks.covs, ks.lag1_covs
    T = ms.shape[0] - 1
    Exx = Ps + np.einsum("ti,tj->tij", ms, ms)
    Ex1x0 = lag1 + np.einsum("ti,tj->tij", ms[1:], ms[:-1])
    S11 = Exx[1:].sum(axis=0)
    S00 = Exx[:-1].sum(axis=0)
    S10 = Ex1x0.sum(axis=0)
    s1 = ms[1:].sum(axis=0)
    s0 = ms[:-1].sum(axis=0)
    d = ms.shape[1]
    G = np.zeros((d + 1, d + 1))
    G[:d, :d] = S00
    G[:d, d] = s0
    G[d, :d] = s0
    G[d, d] = T
    C = np.hstack([S10, s1[:, None]])  # (d, d + 1)
    AB = np.linalg.solve(G, C.T).T
    A, b = AB[:, :d], AB[:, d]
    Q = (S11 - AB @ C.T) / T
    Q = _floor(project_covariance(0.5 * (Q + Q.T), parameterization), parameterization)
    obs_t = np.nonzero(y.mask)[0]
    if obs_t.size == 0:
        raise NoObservations("no observed time step to estimate R")
    resid = y.values[obs_t] - ms[obs_t + 1] @ H.T
    R = (resid.T @ resid + np.einsum("ij,tjk,lk->il", H, Ps[obs_t + 1], H)) / obs_t.size
    R = _floor(project_covariance(0.5 * (R + R.T), parameterization), parameterization)
    return AffineModelParams(A, b), Theta(Q, R, parameterization)


def em_linear(spec: SsmSpec, y, z=None, iterations: int = 100):
    """Exact EM for x_t = alpha x_{t-1} + beta + eta_t, y_t = H x_t + eps_t.

    ``spec.dynamics`` must be an :class:`AffineModel` giving the starting
    point. Returns ``(trace, kalman_result)`` where the Kalman result is
    computed at the final estimate; record ``r`` holds the exact
    observed-data log-likelihood of its parameters.
    """
    trace = EstimationTrace()
    parameterization = spec.theta.parameterization
    H = spec.H
    current = spec
    t0 = time.perf_counter()
    ks = kalman_smoother(current, y, z)
    trace.records.append(EstimationRecord(0, current.theta, ks.loglik, model=current.dynamics, wallclock=0.0))
    for r in range(1, iterations + 1):
        params, theta = _linear_m_step(ks, y, H, parameterization)
        current = current.replace(dynamics=AffineModel(params), theta=theta)
        ks = kalman_smoother(current, y, z)
        trace.records.append(
            EstimationRecord(r, theta, ks.loglik, model=current.dynamics, wallclock=time.perf_counter() - t0)
        )
    trace.conditioning = ks.means
    return trace, ks


# ---------------------------------------------------------------------------
# SEM / npSEM
# ---------------------------------------------------------------------------


def _select_k(catalog, llr_cfg: LlrConfig, previous: Optional[int], due: bool) -> int:
    if llr_cfg.k is not None:
        return llr_cfg.k
    if due or previous is None:
        return cross_validate_k(catalog, llr_cfg)
    return previous


def _sem_loop(spec: SsmSpec, y, z, cfg: NpSemConfig, rng, conditioning0, update: bool) -> EstimationTrace:
    rng = as_generator(rng)
    trace = EstimationTrace()
    model = spec.dynamics
    theta = spec.theta
    k = getattr(model, "k", None)
    cid = getattr(getattr(model, "catalog", None), "snapshot_id", None)
    trace.records.append(EstimationRecord(0, theta, np.nan, k, cid, 0.0, model))
    cond = None
    if cfg.smoother == "cpf-bs":
        if conditioning0 is None:
            raise ValueError("the CPF-BS smoother needs an initial conditioning trajectory")
        cond = np.asarray(conditioning0, dtype=float).reshape(y.T + 1, spec.d)
    H = spec.H
    t0 = time.perf_counter()
    for r in range(1, cfg.iterations + 1):
        try:
            spec_r = spec.replace(dynamics=model, theta=theta)
            if cfg.smoother == "cpf-bs":
                ens, _ = cpf_bs(spec_r, y, z, cond, cfg.smoother_cfg, rng)
                cond = ens.trajectories[0]
            else:
                ens = enks(spec_r, y, z, cfg.smoother_cfg, rng)
            traj = ens.trajectories
            # CPF-BS trajectories carry m(x_{t-1}) under the current model already.
            trans, obs = _residuals(traj, y, z, model, H, ens.transition_means)
            theta = _theta_from_residuals(trans, obs, cfg.parameterization)
            ihat = float(np.mean(_loglik_from_residuals(traj, trans, obs, theta, spec)))
            if update:
                cat = build_catalog(ens, z, snapshot_id=f"iter-{r}")
                k = _select_k(cat, cfg.llr, k, (r - 1) % cfg.cv_every == 0)
                model = LlrSurrogate(cat, cfg.llr, k=k)
                cid = cat.snapshot_id
        except Exception as exc:
            trace.error = exc
            trace.conditioning = cond
            raise EstimationAborted(exc, trace, r) from exc
        trace.records.append(
            EstimationRecord(
                r, theta, ihat, k, cid, time.perf_counter() - t0, model,
                ens if cfg.keep_ensembles else None,
            )
        )
        log.debug("iter %d: sigma2_Q=%.4g sigma2_R=%.4g k=%s", r, theta.sigma2_Q, theta.sigma2_R, k)
    trace.conditioning = cond
    return trace


def sem(spec: SsmSpec, y, z, cfg: NpSemConfig, rng, conditioning0=None) -> EstimationTrace:
    """Stochastic EM with the dynamics of ``spec`` held fixed."""
    if cfg.catalog_update:
        raise ValueError("sem expects catalog_update=False")
    return _sem_loop(spec, y, z, cfg, rng, conditioning0, update=False)


def npsem(spec: SsmSpec, y, z, cfg: NpSemConfig, rng, conditioning0=None) -> EstimationTrace:
    """npSEM: stochastic EM whose M-step also rebuilds the LLR surrogate.

    ``spec.dynamics`` is the initial surrogate. With
    ``cfg.catalog_update=False`` the surrogate is kept fixed, which is
    exactly :func:`sem` run with that surrogate.
    """
    return _sem_loop(spec, y, z, cfg, rng, conditioning0, update=cfg.catalog_update)
