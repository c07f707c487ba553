"""Dynamical models m(x, z) used as true dynamics or baselines.

Every model is a callable ``model(x, z=None, t=None)`` mapping a batch of
states of shape ``(n, d)`` to successors of the same shape. ``z`` is the
covariate at the successor time and ``t`` the successor time index; models
that do not use them ignore them. The LLR surrogate in :mod:`npsem.llr`
satisfies the same protocol.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Protocol, runtime_checkable

import numpy as np

from .errors import IntegrationDiverged


@runtime_checkable
class DynamicalModel(Protocol):
    dim_state: int
    dim_covariate: int

    def __call__(self, x, z=None, t=None) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# Sinus model
# ---------------------------------------------------------------------------


def sinus_m(x):
    """m(x) = sin(3x)."""
    return np.sin(3.0 * np.asarray(x, dtype=float))


class SinusModel:
    dim_state = 1
    dim_covariate = 0
    name = "sinus"

    def __call__(self, x, z=None, t=None):
        return sinus_m(x)

    def __repr__(self):
        return "SinusModel()"


# ---------------------------------------------------------------------------
# Lorenz-63
# ---------------------------------------------------------------------------

L63_SIGMA = 10.0
L63_RHO = 28.0
L63_BETA = 8.0 / 3.0


def l63_drift(z):
    """Right-hand side g(z) of the Lorenz-63 system (last axis = 3)."""
    z = np.asarray(z, dtype=float)
    z1, z2, z3 = z[..., 0], z[..., 1], z[..., 2]
    return np.stack(
        [L63_SIGMA * (z2 - z1), z1 * (L63_RHO - z3) - z2, z1 * z2 - L63_BETA * z3], axis=-1
    )


def _tableau(a, b):
    a = [np.asarray(row, dtype=float) for row in a]
    return a, np.asarray(b, dtype=float)


# Explicit Butcher tableaus (stage matrix rows, weights). The Dormand-Prince
# set uses its 5th-order weights; the FSAL stage has zero weight and is dropped.
TABLEAUS = {
    "dopri5": _tableau(
        [
            [],
            [1 / 5],
            [3 / 40, 9 / 40],
            [44 / 45, -56 / 15, 32 / 9],
            [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
            [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
        ],
        [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
    ),
    "rk4": _tableau([[], [1 / 2], [0.0, 1 / 2], [0.0, 0.0, 1.0]], [1 / 6, 1 / 3, 1 / 3, 1 / 6]),
}


@dataclass(frozen=True)
class Lorenz63Config:
    """Integration settings for the Lorenz-63 flow map.

    ``substeps`` fixed steps of size ``dt / substeps`` are taken with the
    chosen explicit tableau.
    """

    dt: float = 0.08
    integrator: str = "dopri5"
    substeps: int = 8

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if int(self.substeps) != self.substeps or self.substeps < 1:
            raise ValueError("substeps must be an integer >= 1")
        if self.integrator not in TABLEAUS:
            raise ValueError(f"unknown integrator {self.integrator!r}")


def rk_integrate(f, x, horizon: float, steps: int, integrator: str = "dopri5"):
    """Fixed-step explicit Runge-Kutta integration of dx/dtau = f(x)."""
    a, b = TABLEAUS[integrator]
    h = horizon / steps
    x = np.array(x, dtype=float)
    for _ in range(steps):
        k = []
        for row in a:
            xi = x
            for aij, kj in zip(row, k):
                if aij != 0.0:
                    xi = xi + (h * aij) * kj
            k.append(f(xi))
        incr = sum((h * bi) * ki for bi, ki in zip(b, k) if bi != 0.0)
        x = x + incr
    return x


def l63_flow(x, cfg: Optional[Lorenz63Config] = None):
    """The flow map of Lorenz-63 over a horizon ``cfg.dt``."""
    cfg = cfg or Lorenz63Config()
    out = rk_integrate(l63_drift, x, cfg.dt, cfg.substeps, cfg.integrator)
    if not np.all(np.isfinite(out)):
        raise IntegrationDiverged("Lorenz-63 integration produced non-finite values")
    return out


class Lorenz63Model:
    dim_state = 3
    dim_covariate = 0
    name = "l63"

    def __init__(self, cfg: Optional[Lorenz63Config] = None, **kwargs):
        self.cfg = cfg or Lorenz63Config(**kwargs)

    def __call__(self, x, z=None, t=None):
        return l63_flow(x, self.cfg)

    def __repr__(self):
        return f"Lorenz63Model({self.cfg})"


# ---------------------------------------------------------------------------
# Affine baseline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineModelParams:
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        alpha = np.atleast_2d(np.asarray(self.alpha, dtype=float))
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if alpha.shape != (beta.shape[0], beta.shape[0]):
            raise ValueError("alpha must be d x d with d = len(beta)")
        if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(beta))):
            raise ValueError("affine parameters must be finite")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

    @classmethod
    def identity(cls, d: int):
        return cls(np.eye(d), np.zeros(d))


def affine_m(x, params: AffineModelParams):
    """m(x) = alpha x + beta (row-vector batches supported)."""
    x = np.asarray(x, dtype=float)
    return x @ params.alpha.T + params.beta


class AffineModel:
    dim_covariate = 0
    name = "affine"

    def __init__(self, params: AffineModelParams):
        self.params = params
        self.dim_state = params.beta.shape[0]

    def __call__(self, x, z=None, t=None):
        return affine_m(x, self.params)

    def __repr__(self):
        return f"AffineModel(alpha={self.params.alpha.tolist()}, beta={self.params.beta.tolist()})"


def _make_llr(**kwargs):
    from .llr import LlrSurrogate

    return LlrSurrogate(**kwargs)


MODEL_REGISTRY = {
    "sinus": lambda **kw: SinusModel(),
    "l63": lambda **kw: Lorenz63Model(Lorenz63Config(**kw)),
    "affine": lambda alpha=1.0, beta=0.0, **kw: AffineModel(AffineModelParams(alpha, beta)),
    "llr-surrogate": _make_llr,
}


def make_model(name: str, **kwargs):
    """Instantiate a registered dynamical model by name."""
    try:
        factory = MODEL_REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; known: {sorted(MODEL_REGISTRY)}") from None
    return factory(**kwargs)
