"""Experiment driver: configuration, the eight-algorithm comparison,
validation reconstruction and scoring."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .core import (
    ObservationSequence,
    RandomStream,
    SsmSpec,
    Theta,
    as_generator,
    project_covariance,
    simulate_ssm,
)
from .dynamics import AffineModel, AffineModelParams, Lorenz63Config, Lorenz63Model, SinusModel
from .errors import ConfigError, EmptySelection, NpsemError
from .estimators import EstimationAborted, EstimationTrace, NpSemConfig, em_linear, npsem, sem
from .llr import LlrConfig, LlrSurrogate, build_catalog, catalog_from_observations
from .smoothers import SmootherConfig, SmoothingEnsemble, cpf_bs, enks, kalman_smoother, pool_ensembles

log = logging.getLogger(__name__)

ALGORITHMS = (
    "enks-no-update",
    "cpf-bs-no-update",
    "enks-update",
    "cpf-bs-update",
    "enks-perfect",
    "cpf-bs-perfect",
    "enks-true-m",
    "cpf-bs-true-m",
)
MODELS = ("sinus", "l63", "affine", "csv-data")
# Settings of the imputation experiment; ``csv`` (a wave CSV) replaces the synthetic series.
WAVE_DEFAULTS = {
    "csv": None,
    "T": 1000,
    "sigma_R": 0.2,
    "gap_length": 24,
    "n_gaps": 4,
    "sigma_Q": 0.05,
    "persistence": 0.6,
}


def normalize_algorithm(tag: str) -> str:
    """Map ``'CPF-BS update'``, ``'EnKS true $m$'`` etc. to canonical tags."""
    t = str(tag).strip().lower().replace("$", "").replace("_", "-")
    t = "-".join(t.split())
    if t not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {tag!r}; known: {', '.join(ALGORITHMS)}")
    return t


def split_algorithm(tag: str):
    """``'cpf-bs-update'`` -> (``'cpf-bs'``, ``'update'``)."""
    tag = normalize_algorithm(tag)
    smoother = "cpf-bs" if tag.startswith("cpf-bs") else "enks"
    return smoother, tag[len(smoother) + 1 :]


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _theta_from_value(value, d: int, d_obs: int, parameterization: str) -> Theta:
    if isinstance(value, Theta):
        return value
    if not isinstance(value, dict):
        raise ConfigError("true_theta must be a mapping")
    keys = set(value)
    try:
        if keys == {"sigma2_Q", "sigma2_R"}:
            s2q, s2r = float(value["sigma2_Q"]), float(value["sigma2_R"])
            if parameterization == "isotropic":
                return Theta.isotropic(s2q, s2r, d, d_obs)
            return Theta(s2q * np.eye(d), s2r * np.eye(d_obs), parameterization)
        if keys == {"Q", "R"}:
            return Theta(np.atleast_2d(value["Q"]), np.atleast_2d(value["R"]), parameterization)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid true_theta: {exc}") from exc
    raise ConfigError("true_theta needs keys {sigma2_Q, sigma2_R} or {Q, R}")


def _build(cls, value, name):
    if isinstance(value, cls):
        return value
    if value is None:
        return cls()
    if not isinstance(value, dict):
        raise ConfigError(f"{name} must be a mapping")
    known = {f.name for f in fields(cls) if f.init}
    unknown = set(value) - known
    if unknown:
        raise ConfigError(f"unknown {name} field(s): {sorted(unknown)}")
    try:
        return cls(**value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name}: {exc}") from exc


def npsem_config_from_dict(value) -> NpSemConfig:
    value = dict(value or {})
    if "llr" in value:
        value["llr"] = _build(LlrConfig, value["llr"], "llr")
    if "smoother_cfg" in value:
        value["smoother_cfg"] = _build(SmootherConfig, value["smoother_cfg"], "smoother_cfg")
    return _build(NpSemConfig, value, "npsem")


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment. Field names are those of the config document.

    ``seeds`` is the base seed; every replication and algorithm draws from
    its own lane of it. Fields after ``rmse_tail`` have defaults matching
    the standard protocol and rarely need changing.
    """

    model: str = "l63"
    T: int = 500
    T_prime: int = 1000
    dt: float = 0.08
    true_theta: Any = None
    replications: int = 1
    algorithms: Sequence[str] = ("cpf-bs-update",)
    seeds: int = 0
    npsem: Any = None
    rmse_tail: int = 10
    em_iterations: int = 100
    burn_in: int = 5
    spinup: int = 300
    substeps: int = 8
    integrator: str = "dopri5"
    affine: Any = None
    data: Optional[str] = None
    wave: Any = None

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        for name in ("T", "T_prime"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 2:
                raise ConfigError(f"{name} must be an integer >= 2")
        if int(self.replications) != self.replications or self.replications < 1:
            raise ConfigError("replications must be an integer >= 1")
        if self.rmse_tail < 1 or self.em_iterations < 1 or self.burn_in < 0 or self.spinup < 0:
            raise ConfigError("rmse_tail, em_iterations >= 1; burn_in, spinup >= 0")
        if not self.dt > 0:
            raise ConfigError("dt must be > 0")
        if isinstance(self.algorithms, str):
            object.__setattr__(self, "algorithms", (self.algorithms,))
        algs = tuple(normalize_algorithm(a) for a in self.algorithms)
        if not algs or len(set(algs)) != len(algs):
            raise ConfigError("algorithms must be a nonempty list without duplicates")
        object.__setattr__(self, "algorithms", algs)
        object.__setattr__(self, "npsem", npsem_config_from_dict(self.npsem) if not isinstance(self.npsem, NpSemConfig) else self.npsem)
        if self.rmse_tail > self.npsem.iterations:
            raise ConfigError("rmse_tail cannot exceed npsem.iterations")
        try:
            int(self.seeds)
        except (TypeError, ValueError):
            raise ConfigError("seeds must be an integer") from None
        if self.seeds < 0:
            raise ConfigError("seeds must be non-negative")
        d = self.state_dim
        theta = self.true_theta
        if theta is None:
            theta = {"sigma2_Q": 1.0, "sigma2_R": 4.0} if self.model == "l63" else {"sigma2_Q": 0.1, "sigma2_R": 0.1}
        object.__setattr__(self, "true_theta", _theta_from_value(theta, d, d, self.npsem.parameterization))
        if self.true_theta.Q.shape[0] != d:
            raise ConfigError(f"true_theta has dimension {self.true_theta.Q.shape[0]}, model needs {d}")
        try:
            Lorenz63Config(self.dt, self.integrator, self.substeps)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.model == "affine":
            self.affine_params()
        if self.model == "csv-data" and not self.data:
            raise ConfigError("model 'csv-data' needs a 'data' path")
        if self.wave is not None:
            wave_settings(self.wave)

    @property
    def state_dim(self) -> int:
        if self.model == "l63":
            return 3
        if self.model == "affine" and isinstance(self.affine, dict) and "alpha" in self.affine:
            return np.atleast_2d(self.affine["alpha"]).shape[0]
        return 1

    def affine_params(self) -> AffineModelParams:
        spec = dict(self.affine or {})
        d = self.state_dim
        try:
            return AffineModelParams(spec.get("alpha", 0.9 * np.eye(d)), spec.get("beta", np.zeros(d)))
        except ValueError as exc:
            raise ConfigError(f"invalid affine parameters: {exc}") from exc

    def true_dynamics(self):
        if self.model == "sinus":
            return SinusModel()
        if self.model == "l63":
            return Lorenz63Model(Lorenz63Config(self.dt, self.integrator, self.substeps))
        if self.model == "affine":
            return AffineModel(self.affine_params())
        raise ConfigError("csv-data has no known dynamics")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config document must be a mapping")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
        try:
            return cls(**data)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        n = self.npsem
        return {
            "model": self.model,
            "T": self.T,
            "T_prime": self.T_prime,
            "dt": self.dt,
            "true_theta": {"Q": self.true_theta.Q.tolist(), "R": self.true_theta.R.tolist()},
            "replications": self.replications,
            "algorithms": list(self.algorithms),
            "seeds": self.seeds,
            "npsem": {
                "iterations": n.iterations,
                "smoother": n.smoother,
                "catalog_update": n.catalog_update,
                "llr": {
                    "k": n.llr.k,
                    "lag": n.llr.lag,
                    "cv_grid": None if n.llr.cv_grid is None else list(n.llr.cv_grid),
                    "cv_folds": n.llr.cv_folds,
                },
                "smoother_cfg": {"n_f": n.smoother_cfg.n_f, "n_s": n.smoother_cfg.n_s, "n_ens": n.smoother_cfg.n_ens},
                "cv_every": n.cv_every,
                "parameterization": n.parameterization,
            },
            "rmse_tail": self.rmse_tail,
            "em_iterations": self.em_iterations,
            "burn_in": self.burn_in,
            "spinup": self.spinup,
            "substeps": self.substeps,
            "integrator": self.integrator,
            "affine": None if self.affine is None else json.loads(json.dumps(self.affine, default=_jsonable)),
            "data": self.data,
            "wave": self.wave,
        }

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seeds=int(seed))


def wave_settings(value) -> dict:
    """``WAVE_DEFAULTS`` overridden by ``value`` (validated)."""
    if not isinstance(value, dict):
        raise ConfigError("wave must be a mapping")
    unknown = set(value) - set(WAVE_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown wave field(s): {sorted(unknown)}")
    out = {**WAVE_DEFAULTS, **value}
    try:
        for key in ("T", "gap_length", "n_gaps"):
            if int(out[key]) != out[key] or out[key] < 0:
                raise ConfigError(f"wave.{key} must be a non-negative integer")
            out[key] = int(out[key])
        for key in ("sigma_R", "sigma_Q"):
            out[key] = float(out[key])
            if not out[key] > 0:
                raise ConfigError(f"wave.{key} must be > 0")
        out["persistence"] = float(out["persistence"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid wave settings: {exc}") from exc
    if not 0 <= out["persistence"] < 1:
        raise ConfigError("wave.persistence must lie in [0, 1)")
    if out["T"] < 2:
        raise ConfigError("wave.T must be >= 2")
    return out


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(type(v))


def load_config(path) -> ExperimentConfig:
    """Read a JSON or YAML document into an :class:`ExperimentConfig`."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(text)
        else:
            import yaml

            data = yaml.safe_load(text)
    except Exception as exc:  # noqa: BLE001 - parse errors of either format
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return ExperimentConfig.from_dict(data)


# ---------------------------------------------------------------------------
# Scores
# ---------------------------------------------------------------------------


def rmse(reconstruction, truth, mask=None) -> float:
    """sqrt of the mean over selected times of the squared Euclidean error."""
    a = np.asarray(reconstruction, dtype=float)
    b = np.asarray(truth, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    sel = np.ones(a.shape[0], bool) if mask is None else np.asarray(mask, bool)
    if sel.shape != (a.shape[0],):
        raise ValueError("mask must have one flag per time step")
    if not sel.any():
        raise EmptySelection("rmse over an empty time selection")
    err = a[sel] - b[sel]
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


def coverage(lower, upper, truth) -> np.ndarray:
    """Per-component fraction of times with lower <= truth <= upper."""
    lo, up, x = (np.asarray(v, dtype=float) for v in (lower, upper, truth))
    if x.ndim == 1:
        lo, up, x = lo[:, None], up[:, None], x[:, None]
    return np.mean((lo <= x) & (x <= up), axis=0)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


@dataclass
class LinearInit:
    """Linear-Gaussian EM + Kalman smoother initialization."""

    theta0: Theta
    conditioning0: np.ndarray
    m0: Optional[LlrSurrogate]
    affine_spec: SsmSpec
    trace: EstimationTrace


def linear_start(spec: SsmSpec, y: ObservationSequence) -> SsmSpec:
    """Starting point of the linear EM: alpha = 0.9 I, beta = 0.1 mean,
    Q, R = half the per-component variances (state values via pinv(H))."""
    obs = y.values[y.mask]
    xs = obs @ np.linalg.pinv(spec.H).T
    par = spec.theta.parameterization

    def half_var(v):
        var = v.var(axis=0) if v.shape[0] > 1 else np.ones(v.shape[1])
        return project_covariance(np.diag(np.where(var > 0, var, 1.0) / 2.0), par)

    theta = Theta(half_var(xs), half_var(obs), par)
    params = AffineModelParams(0.9 * np.eye(spec.d), 0.1 * xs.mean(axis=0))
    return spec.replace(dynamics=AffineModel(params), theta=theta)


def initialize(spec: SsmSpec, y: ObservationSequence, z=None, em_iterations: int = 100,
               llr: Optional[LlrConfig] = None, with_surrogate: bool = True) -> LinearInit:
    """Run the linear EM and build theta_0, the conditioning sequence and m_0."""
    start = linear_start(spec, y)
    trace, ks = em_linear(start, y, z, em_iterations)
    final = trace.final
    affine_spec = start.replace(dynamics=final.model, theta=final.theta)
    m0 = None
    if with_surrogate:
        m0 = LlrSurrogate(build_catalog(ks.means[None], z, snapshot_id="init"), llr or LlrConfig())
    return LinearInit(final.theta, ks.means, m0, affine_spec, trace)


# ---------------------------------------------------------------------------
# Running the eight algorithms
# ---------------------------------------------------------------------------


def algorithm_setup(tag: str, data_spec: SsmSpec, init: LinearInit, y, z, x_true=None,
                    npsem_cfg: Optional[NpSemConfig] = None):
    """Return ``(spec, cfg, update)`` for one of the eight algorithms."""
    smoother, variant = split_algorithm(tag)
    base = npsem_cfg or NpSemConfig()
    llr = base.llr
    if variant == "update":
        model = init.m0 if init.m0 is not None else LlrSurrogate(
            build_catalog(init.conditioning0[None], z, snapshot_id="init"), llr
        )
    elif variant == "no-update":
        model = LlrSurrogate(catalog_from_observations(y, z, snapshot_id="observations"), llr)
    elif variant == "perfect":
        if x_true is None:
            raise ConfigError(f"{tag} needs the true state sequence")
        model = LlrSurrogate(build_catalog(np.asarray(x_true)[None], z, snapshot_id="perfect"), llr)
    else:
        model = data_spec.dynamics
    cfg = replace(base, smoother=smoother, catalog_update=(variant == "update"))
    spec = data_spec.replace(dynamics=model, theta=init.theta0)
    return spec, cfg, variant == "update"


def run_algorithm(tag: str, data_spec: SsmSpec, init: LinearInit, y, z, rng, x_true=None,
                  npsem_cfg: Optional[NpSemConfig] = None) -> EstimationTrace:
    spec, cfg, update = algorithm_setup(tag, data_spec, init, y, z, x_true, npsem_cfg)
    cond = init.conditioning0 if cfg.smoother == "cpf-bs" else None
    if update:
        return npsem(spec, y, z, cfg, rng, cond)
    return sem(spec, y, z, cfg, rng, cond)


# ---------------------------------------------------------------------------
# Validation reconstruction
# ---------------------------------------------------------------------------


@dataclass
class Reconstruction:
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    ensemble: SmoothingEnsemble
    rmse: Optional[float] = None
    coverage95: Optional[np.ndarray] = None
    rmse_gaps: Optional[float] = None


def default_conditioning(spec: SsmSpec, y: ObservationSequence) -> np.ndarray:
    """A crude starting trajectory: observations mapped through pinv(H),
    gaps filled by linear interpolation and x_0 set to the prior mean."""
    H = spec.H
    T = y.T
    obs_t = np.nonzero(y.mask)[0]
    if obs_t.size == 0:
        return np.tile(np.asarray(spec.init_mean, float), (T + 1, 1))
    xs = y.values[obs_t] @ np.linalg.pinv(H).T
    grid = np.arange(T)
    filled = np.column_stack([np.interp(grid, obs_t, xs[:, j]) for j in range(spec.d)])
    return np.vstack([np.asarray(spec.init_mean, float)[None], filled])


def _validation_model(model):
    return model.without_exclusion() if isinstance(model, LlrSurrogate) else model


def reconstruct_validation(trace: EstimationTrace, validation_y: ObservationSequence, validation_z,
                           cfg: NpSemConfig, *, spec: SsmSpec, truth=None, rng=0, tail: int = 10,
                           burn_in: int = 5, conditioning0=None, gaps=None) -> Reconstruction:
    """Smooth the validation sequence with the estimates of the last
    ``tail`` iterations and pool the trajectories.

    ``spec`` supplies the observation operator and p(x_0) of the
    validation sequence; its dynamics and theta are replaced by each
    record's estimates. For CPF-BS the conditioning chain is started from
    ``conditioning0`` (default: interpolated observations) and run for
    ``burn_in`` extra sweeps under the first tail estimate.
    """
    records = trace.records[1:]
    if len(records) < tail:
        raise ValueError(f"trace has {len(records)} iterations, fewer than rmse_tail={tail}")
    rng = as_generator(rng)
    tail_records = records[-tail:]
    ensembles = []
    if cfg.smoother == "cpf-bs":
        cond = default_conditioning(spec, validation_y) if conditioning0 is None else np.asarray(conditioning0, float)
        first = tail_records[0]
        s0 = spec.replace(dynamics=_validation_model(first.model), theta=first.theta)
        for _ in range(burn_in):
            ens, _ = cpf_bs(s0, validation_y, validation_z, cond, cfg.smoother_cfg, rng)
            cond = ens.trajectories[0]
        for rec in tail_records:
            s = spec.replace(dynamics=_validation_model(rec.model), theta=rec.theta)
            ens, _ = cpf_bs(s, validation_y, validation_z, cond, cfg.smoother_cfg, rng)
            cond = ens.trajectories[0]
            ensembles.append(ens)
    else:
        for rec in tail_records:
            s = spec.replace(dynamics=_validation_model(rec.model), theta=rec.theta)
            ensembles.append(enks(s, validation_y, validation_z, cfg.smoother_cfg, rng))
    pooled = pool_ensembles(ensembles)
    mean = pooled.mean()
    lower, upper = pooled.quantiles([0.025, 0.975])
    out = Reconstruction(mean, lower, upper, pooled)
    if truth is not None:
        truth = np.asarray(truth, dtype=float).reshape(mean.shape)
        out.rmse = rmse(mean[1:], truth[1:])
        out.coverage95 = coverage(lower[1:], upper[1:], truth[1:])
        if gaps is not None and np.any(gaps):
            out.rmse_gaps = rmse(mean[1:], truth[1:], gaps)
    return out


# ---------------------------------------------------------------------------
# Comparison
# ---------------------------------------------------------------------------


@dataclass
class ReportEntry:
    replication: int
    algorithm: str
    rmse: float = math.nan
    coverage95: Optional[np.ndarray] = None
    rmse_gaps: Optional[float] = None
    status: str = "ok"
    trace_rows: List[tuple] = field(default_factory=list)
    error: Optional[str] = None
    iteration: Optional[int] = None
    seconds: float = 0.0

    @property
    def mean_coverage(self) -> float:
        return math.nan if self.coverage95 is None else float(np.mean(self.coverage95))


@dataclass
class ReconstructionReport:
    entries: List[ReportEntry]
    config: Optional[ExperimentConfig] = None

    def by_algorithm(self, tag: str) -> List[ReportEntry]:
        tag = normalize_algorithm(tag)
        return [e for e in self.entries if e.algorithm == tag]

    def median_rmse(self, tag: str) -> float:
        vals = [e.rmse for e in self.by_algorithm(tag) if e.status == "ok"]
        return float(np.median(vals)) if vals else math.nan

    def median_sigma2(self, tag: str, iteration: int = -1):
        q, r = [], []
        for e in self.by_algorithm(tag):
            if e.status == "ok" and e.trace_rows:
                row = e.trace_rows[iteration]
                q.append(row[1])
                r.append(row[2])
        return float(np.median(q)), float(np.median(r))

    @property
    def failures(self) -> List[ReportEntry]:
        return [e for e in self.entries if e.status != "ok"]


@dataclass
class ReplicationData:
    spec: SsmSpec
    x: np.ndarray
    y: ObservationSequence
    val_spec: SsmSpec
    x_val: np.ndarray
    y_val: ObservationSequence
    init: LinearInit
    val_conditioning: np.ndarray


def _spun_up_start(cfg: ExperimentConfig, dynamics, rng) -> np.ndarray:
    d = cfg.state_dim
    if cfg.model != "l63":
        return np.zeros(d)
    x = rng.standard_normal((1, d)) * 5.0 + np.array([0.0, 0.0, 25.0])
    for _ in range(cfg.spinup):
        x = dynamics(x)
    return x[0]


def simulate_pair(cfg: ExperimentConfig, stream: RandomStream):
    """Learning and validation sequences of one replication."""
    dyn = cfg.true_dynamics()
    theta = cfg.true_theta
    out = []
    for lane, T in ((0, cfg.T), (1, cfg.T_prime)):
        g = stream.child(lane).generator()
        x0 = _spun_up_start(cfg, dyn, g)
        spec = SsmSpec(dyn, theta, x0, theta.Q.copy())
        x, y = simulate_ssm(spec, T, g)
        out.append((spec, x, y))
    return out


def prepare_replication(cfg: ExperimentConfig, replication: int) -> ReplicationData:
    stream = RandomStream(int(cfg.seeds)).child(replication)
    (spec, x, y), (vspec, xv, yv) = simulate_pair(cfg, stream)
    init = initialize(spec, y, None, cfg.em_iterations, cfg.npsem.llr,
                      with_surrogate=any(split_algorithm(a)[1] == "update" for a in cfg.algorithms))
    lin_val = vspec.replace(dynamics=init.affine_spec.dynamics, theta=init.affine_spec.theta)
    val_cond = kalman_smoother(lin_val, yv).means
    return ReplicationData(spec, x, y, vspec, xv, yv, init, val_cond)


def _snapshot(out_dir, replication, tag, trace, every):
    from .io import write_catalog

    for rec in trace.records[1:]:
        cat = getattr(rec.model, "catalog", None)
        if cat is not None and rec.iteration % every == 0:
            write_catalog(Path(out_dir) / "snapshots" / f"catalog_rep{replication}_{tag}_iter{rec.iteration}.csv", cat)


def run_entry(cfg: ExperimentConfig, replication: int, tag: str, data: Optional[ReplicationData] = None,
              snapshot_dir=None, snapshot_every: Optional[int] = None) -> ReportEntry:
    """Run and score one (replication, algorithm) pair; failures are recorded."""
    t0 = time.perf_counter()
    entry = ReportEntry(replication, tag)
    a = ALGORITHMS.index(tag)
    stream = RandomStream(int(cfg.seeds)).child(replication)
    try:
        data = data or prepare_replication(cfg, replication)
        trace = run_algorithm(tag, data.spec, data.init, data.y, None, stream.child(2, a).generator(),
                              data.x, cfg.npsem)
        entry.trace_rows = list(trace.rows())
        smoother = split_algorithm(tag)[0]
        recon = reconstruct_validation(
            trace, data.y_val, None, replace(cfg.npsem, smoother=smoother), spec=data.val_spec,
            truth=data.x_val, rng=stream.child(3, a).generator(), tail=cfg.rmse_tail,
            burn_in=cfg.burn_in, conditioning0=data.val_conditioning,
        )
        entry.rmse, entry.coverage95 = recon.rmse, recon.coverage95
        if snapshot_dir is not None and snapshot_every:
            _snapshot(snapshot_dir, replication, tag, trace, snapshot_every)
    except (NpsemError, EstimationAborted, FloatingPointError, np.linalg.LinAlgError) as exc:
        entry.status = "failed"
        entry.error = f"{type(getattr(exc, 'cause', exc)).__name__}: {exc}"
        entry.iteration = getattr(exc, "iteration", None)
        if isinstance(exc, EstimationAborted):
            entry.trace_rows = list(exc.trace.rows())
    entry.seconds = time.perf_counter() - t0
    return entry


def _worker_init():
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(1)
    except ImportError:  # pragma: no cover - optional
        pass


def _run_replication(args):
    cfg, replication, snapshot_dir, snapshot_every = args
    try:
        data = prepare_replication(cfg, replication)
    except (NpsemError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return [
            ReportEntry(replication, tag, status="failed", error=f"{type(exc).__name__}: {exc}", iteration=0)
            for tag in cfg.algorithms
        ]
    return [run_entry(cfg, replication, tag, data, snapshot_dir, snapshot_every) for tag in cfg.algorithms]


def run_comparison(cfg: ExperimentConfig, threads: int = 1, snapshot_dir=None,
                   snapshot_every: Optional[int] = None) -> ReconstructionReport:
    """All replications x requested algorithms, merged in (replication, algorithm) order.

    Every replication uses its own random lane, so results do not depend
    on ``threads`` or on which other replications are run.
    """
    if cfg.model == "csv-data":
        raise ConfigError("run_comparison needs simulated data (model sinus, l63 or affine)")
    jobs = [(cfg, r, snapshot_dir, snapshot_every) for r in range(cfg.replications)]
    if threads <= 1 or len(jobs) == 1:
        results = [_run_replication(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=threads, initializer=_worker_init) as pool:
            results = list(pool.map(_run_replication, jobs))
    order = {t: i for i, t in enumerate(cfg.algorithms)}
    entries = sorted((e for res in results for e in res), key=lambda e: (e.replication, order[e.algorithm]))
    return ReconstructionReport(entries, cfg)


def write_report(report: ReconstructionReport, out_dir) -> Dict[str, Path]:
    """report.csv, params.csv (per-iteration estimates, long format) and
    one trace CSV per (replication, algorithm). Timings are kept out of
    the CSVs so that they depend only on the configuration."""
    from .io import TRACE_COLUMNS, write_table

    out = Path(out_dir)
    d = report.config.state_dim if report.config else 1
    cov_cols = [f"coverage95_{j}" for j in range(1, d + 1)]
    header = ["replication", "algorithm", "rmse", "coverage95", *cov_cols, "rmse_gaps", "status", "failed_iteration"]
    rows = []
    for e in report.entries:
        cov = list(e.coverage95) if e.coverage95 is not None else [None] * d
        rows.append([e.replication, e.algorithm, e.rmse, e.mean_coverage, *cov, e.rmse_gaps, e.status, e.iteration])
    paths = {"report": write_table(out / "report.csv", header, rows)}
    params = (
        [e.replication, e.algorithm, row[0], row[1], row[2]]
        for e in report.entries
        for row in e.trace_rows
    )
    paths["params"] = write_table(out / "params.csv", ["replication", "algorithm", "iter", "sigma2_Q", "sigma2_R"], params)
    for e in report.entries:
        p = out / "traces" / f"trace_rep{e.replication}_{e.algorithm}.csv"
        write_table(p, TRACE_COLUMNS, ([r[0], r[1], r[2], r[3], r[4], None] for r in e.trace_rows))
    timing = {f"{e.replication}/{e.algorithm}": round(e.seconds, 3) for e in report.entries}
    (out / "timings.json").write_text(json.dumps(timing, indent=1), encoding="utf-8")
    return paths


# ---------------------------------------------------------------------------
# Single fits
# ---------------------------------------------------------------------------


def observed_spec(y: ObservationSequence) -> SsmSpec:
    """Spec for real data with H = I: p(x_0) centred on the first observed
    value with the per-component observation variance."""
    obs = y.values[y.mask]
    if obs.shape[0] == 0:
        raise ConfigError("the data file has no observed rows")
    var = obs.var(axis=0) if obs.shape[0] > 1 else np.ones(obs.shape[1])
    var = np.where(var > 0, var, 1.0)
    iso = float(var.mean()) / 2
    theta = Theta.isotropic(iso, iso, obs.shape[1])
    return SsmSpec(None, theta, obs[0], np.diag(var))


def run_fit(cfg: ExperimentConfig, snapshot_dir=None, snapshot_every: Optional[int] = None):
    """Run the single algorithm of ``cfg`` on replication 0 (or ``cfg.data``).

    Returns ``(tag, trace)``.
    """
    if len(cfg.algorithms) != 1:
        raise ConfigError("fit runs exactly one algorithm; list one tag in 'algorithms'")
    tag = cfg.algorithms[0]
    if cfg.model == "csv-data":
        from .io import read_observations

        if split_algorithm(tag)[1] in ("perfect", "true-m"):
            raise ConfigError(f"{tag} needs simulated data")
        try:
            y = read_observations(cfg.data)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read data {cfg.data}: {exc}") from exc
        spec = observed_spec(y)
        init = initialize(spec, y, None, cfg.em_iterations, cfg.npsem.llr)
        x_true = None
    else:
        data = prepare_replication(cfg, 0)
        spec, y, init, x_true = data.spec, data.y, data.init, data.x
    a = ALGORITHMS.index(tag)
    rng = RandomStream(int(cfg.seeds)).child(0).child(2, a).generator()
    trace = run_algorithm(tag, spec, init, y, None, rng, x_true, cfg.npsem)
    if snapshot_dir is not None and snapshot_every:
        _snapshot(snapshot_dir, 0, tag, trace, snapshot_every)
    return tag, trace
