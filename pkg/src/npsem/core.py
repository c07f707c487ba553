"""Core state-space model types, Gaussian utilities and simulation.

Conventions used throughout the package:

* states are arrays of shape ``(T + 1, d)`` indexed 0..T;
* observations are :class:`ObservationSequence` objects whose row ``t - 1``
  holds ``y_t`` for t = 1..T, together with an availability mask;
* covariates are ``None`` or arrays of shape ``(T, p)`` aligned with the
  observations (row ``t - 1`` holds ``z_t``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Optional

import numpy as np
from scipy.linalg import lapack

from .errors import DynamicsError, SingularCovariance

LOG_2PI = np.log(2.0 * np.pi)

PARAMETERIZATIONS = ("isotropic", "diagonal", "full")


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RandomStream:
    """Deterministic, splittable source of random generators.

    A stream is identified by a base ``seed`` and a ``lane`` path. Lanes
    are mapped to independent Philox (counter-based) generators through
    :class:`numpy.random.SeedSequence` spawn keys, so that the draws of a
    replication or an algorithm only depend on its own lane.
    """

    seed: int
    lane: tuple = ()

    def child(self, *ids: int) -> "RandomStream":
        return RandomStream(self.seed, self.lane + tuple(int(i) for i in ids))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=self.lane)
        return np.random.Generator(np.random.Philox(ss))


def as_generator(rng) -> np.random.Generator:
    """Accept a Generator, a RandomStream or an integer seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RandomStream):
        return rng.generator()
    return RandomStream(int(rng)).generator()


# ---------------------------------------------------------------------------
# Gaussian utilities
# ---------------------------------------------------------------------------


def cholesky(cov) -> np.ndarray:
    """Lower Cholesky factor; raises :class:`SingularCovariance` on failure."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape[0] != cov.shape[1]:
        raise ValueError(f"covariance must be square, got {cov.shape}")
    if not np.all(np.isfinite(cov)):
        raise SingularCovariance("covariance has non-finite entries", pivot=None)
    c, info = lapack.dpotrf(cov, lower=1, clean=1)
    if info > 0:
        raise SingularCovariance(
            f"covariance not positive definite (leading minor {info})", pivot=info - 1
        )
    if info < 0:
        raise ValueError(f"illegal argument to dpotrf ({info})")
    return c


def psd_factor(cov, tol: float = 1e-12) -> np.ndarray:
    """Return ``L`` with ``L @ L.T == cov`` for a PSD matrix.

    Uses Cholesky when the matrix is positive definite and an eigenvalue
    factor otherwise (singular but PSD matrices such as the zero matrix).
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    try:
        return cholesky(cov)
    except SingularCovariance:
        pass
    cov_sym = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(cov_sym)
    scale = max(1.0, float(np.max(np.abs(w)))) if w.size else 1.0
    if np.any(w < -tol * scale):
        raise SingularCovariance("covariance is indefinite", pivot=int(np.argmin(w)))
    return v * np.sqrt(np.clip(w, 0.0, None))


def mvn_logpdf_chol(diff: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """Log N(diff; 0, L L^T) for rows of ``diff`` (shape ``(..., d)``)."""
    diff = np.asarray(diff, dtype=float)
    d = chol.shape[0]
    flat = diff.reshape(-1, d)
    sol = _solve_lower(chol, flat.T)
    maha = np.sum(sol * sol, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    out = -0.5 * (d * LOG_2PI + logdet + maha)
    return out.reshape(diff.shape[:-1])


def _solve_lower(chol, b):
    if chol.shape[0] == 1:
        return b / chol[0, 0]
    x, info = lapack.dtrtrs(chol, np.ascontiguousarray(b), lower=1)
    if info != 0:
        raise SingularCovariance("triangular solve failed", pivot=info - 1)
    return x


def gaussian_logpdf(x, mean, cov):
    """Log density of N(mean, cov) at ``x``, including the normalization.

    ``x`` may be a single vector or a stack of vectors (last axis = d);
    the result is a float or an array over the leading axes.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    x = np.asarray(x, dtype=float)
    chol = cholesky(cov)
    diff = np.atleast_1d(x) - mean
    out = mvn_logpdf_chol(diff, chol)
    if x.ndim <= 1:
        return float(out)
    return out


def gaussian_sample(mean, cov, rng, size: Optional[int] = None) -> np.ndarray:
    """Draw from N(mean, cov); ``cov`` only needs to be PSD.

    With ``size`` the result has shape ``(size, d)``.
    """
    rng = as_generator(rng)
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    factor = psd_factor(cov)
    d = mean.shape[0]
    if size is None:
        return mean + factor @ rng.standard_normal(d)
    return mean + rng.standard_normal((size, d)) @ factor.T


# ---------------------------------------------------------------------------
# Model components
# ---------------------------------------------------------------------------


def project_covariance(cov, parameterization: str) -> np.ndarray:
    """Project a covariance estimate onto the declared parameterization."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    d = cov.shape[0]
    if parameterization == "isotropic":
        return (np.trace(cov) / d) * np.eye(d)
    if parameterization == "diagonal":
        return np.diag(np.diag(cov))
    if parameterization == "full":
        return 0.5 * (cov + cov.T)
    raise ValueError(f"unknown parameterization {parameterization!r}")


@dataclass(frozen=True)
class Theta:
    """Noise covariances ``Q`` (state) and ``R`` (observation)."""

    Q: np.ndarray
    R: np.ndarray
    parameterization: str = "isotropic"

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if self.parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"unknown parameterization {self.parameterization!r}")
        for name, m in (("Q", Q), ("R", R)):
            if m.shape[0] != m.shape[1]:
                raise ValueError(f"{name} must be square")
            if not np.allclose(m, m.T, rtol=0, atol=1e-12 * max(1.0, np.abs(m).max())):
                raise ValueError(f"{name} must be symmetric")
            if self.parameterization == "isotropic":
                diag = np.diag(m)
                if np.any(m - np.diag(diag)) or np.any(diag != diag[0]):
                    raise ValueError(f"{name} is not scalar-isotropic")
            elif self.parameterization == "diagonal" and np.any(m - np.diag(np.diag(m))):
                raise ValueError(f"{name} is not diagonal")
            psd_factor(m)
        Q.setflags(write=False)
        R.setflags(write=False)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)

    @classmethod
    def isotropic(cls, sigma2_Q: float, sigma2_R: float, d: int = 1, d_obs: Optional[int] = None):
        d_obs = d if d_obs is None else d_obs
        return cls(float(sigma2_Q) * np.eye(d), float(sigma2_R) * np.eye(d_obs), "isotropic")

    @property
    def sigma2_Q(self) -> float:
        return float(np.trace(self.Q) / self.Q.shape[0])

    @property
    def sigma2_R(self) -> float:
        return float(np.trace(self.R) / self.R.shape[0])


@dataclass(frozen=True)
class ObservationOperator:
    """Linear observation operator; ``matrix=None`` means identity."""

    matrix: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.matrix is not None:
            H = np.atleast_2d(np.asarray(self.matrix, dtype=float))
            if not np.all(np.isfinite(H)):
                raise ValueError("observation matrix must be finite")
            H.setflags(write=False)
            object.__setattr__(self, "matrix", H)

    @property
    def kind(self) -> str:
        return "identity" if self.matrix is None else "linear-matrix"

    def as_matrix(self, d: int) -> np.ndarray:
        return np.eye(d) if self.matrix is None else self.matrix

    def dim_obs(self, d: int) -> int:
        return d if self.matrix is None else self.matrix.shape[0]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return x if self.matrix is None else x @ self.matrix.T


@dataclass(frozen=True)
class ObservationSequence:
    """Observations y_1..y_T with a per-time availability mask.

    Values at masked-out rows are never read and may hold NaN.
    """

    values: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        mask = np.ones(values.shape[0], bool) if self.mask is None else np.asarray(self.mask, bool)
        if mask.shape != (values.shape[0],):
            raise ValueError("mask must have one flag per time step")
        if not np.all(np.isfinite(values[mask])):
            raise ValueError("available observations must be finite")
        values = values.copy()
        values.setflags(write=False)
        mask = mask.copy()
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def from_array(cls, values):
        """Build from an array where missing rows contain NaN."""
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        return cls(values, ~np.any(np.isnan(values), axis=1))

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())

    def with_mask(self, mask) -> "ObservationSequence":
        mask = np.asarray(mask, bool) & self.mask
        return ObservationSequence(np.where(mask[:, None], self.values, np.nan), mask)


@dataclass(frozen=True)
class SsmSpec:
    """A full state-space model: dynamics, observation operator, noise and p(x_0)."""

    dynamics: Any
    theta: Theta
    init_mean: np.ndarray
    init_cov: np.ndarray
    obs_op: ObservationOperator = field(default_factory=ObservationOperator)

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.init_mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.init_cov, dtype=float))
        d = mu.shape[0]
        if cov.shape != (d, d):
            raise ValueError("initial covariance does not match the state dimension")
        if self.theta.Q.shape != (d, d):
            raise ValueError("Q does not match the state dimension")
        if self.obs_op.matrix is not None and self.obs_op.matrix.shape[1] != d:
            raise ValueError("observation matrix does not match the state dimension")
        if self.theta.R.shape[0] != self.obs_op.dim_obs(d):
            raise ValueError("R does not match the observation dimension")
        dim = getattr(self.dynamics, "dim_state", d)
        if dim != d:
            raise ValueError("dynamics state dimension does not match")
        object.__setattr__(self, "init_mean", mu)
        object.__setattr__(self, "init_cov", cov)

    @property
    def d(self) -> int:
        return self.init_mean.shape[0]

    @property
    def d_obs(self) -> int:
        return self.obs_op.dim_obs(self.d)

    @property
    def H(self) -> np.ndarray:
        return self.obs_op.as_matrix(self.d)

    def replace(self, **changes) -> "SsmSpec":
        return replace(self, **changes)


def covariate_at(z, t: int):
    """Covariate z_t (t = 1..T) or ``None`` when no covariates are used."""
    if z is None:
        return None
    z = np.asarray(z)
    if z.size == 0:
        return None
    return z[t - 1]


def validate_states(x, d: Optional[int] = None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("a state sequence needs shape (T + 1, d) with T >= 1")
    if d is not None and x.shape[1] != d:
        raise ValueError(f"state dimension {x.shape[1]} != {d}")
    if not np.all(np.isfinite(x)):
        raise ValueError("state sequence has non-finite entries")
    return x


def evaluate_dynamics(dynamics, x, z=None, t=None) -> np.ndarray:
    """Evaluate ``dynamics`` on a batch, wrapping failures in DynamicsError."""
    try:
        out = np.asarray(dynamics(x, z, t), dtype=float)
    except DynamicsError:
        raise
    except Exception as exc:  # noqa: BLE001 - surfaced as a DynamicsError
        raise DynamicsError(f"dynamics evaluation failed: {exc}") from exc
    if not np.all(np.isfinite(out)):
        raise DynamicsError("dynamics returned non-finite values")
    return out


def simulate_ssm(spec: SsmSpec, T: int, rng, covariates=None):
    """Simulate ``(x_{0:T}, y_{1:T})`` from the model.

    All noise draws are taken up front so a given generator state maps to
    one realization regardless of the dynamics.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if covariates is not None and np.asarray(covariates).size and len(covariates) != T:
        raise ValueError("covariates must have length T")
    rng = as_generator(rng)
    d, d_obs = spec.d, spec.d_obs
    x0 = gaussian_sample(spec.init_mean, spec.init_cov, rng)
    eta = rng.standard_normal((T, d)) @ psd_factor(spec.theta.Q).T
    eps = rng.standard_normal((T, d_obs)) @ psd_factor(spec.theta.R).T
    x = np.empty((T + 1, d))
    x[0] = x0
    for t in range(1, T + 1):
        z_t = covariate_at(covariates, t)
        x[t] = evaluate_dynamics(spec.dynamics, x[t - 1][None, :], z_t)[0] + eta[t - 1]
    y = spec.obs_op(x[1:]) + eps
    return x, ObservationSequence(y)
