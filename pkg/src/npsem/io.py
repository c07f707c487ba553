"""CSV serialization of catalogs, ensembles, traces and plain tables.

All files are UTF-8 with a mandatory header row; floats are written with
17 significant digits so that values round-trip exactly.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .llr import Catalog
from .smoothers import SmoothingEnsemble

TRACE_COLUMNS = ["iter", "sigma2_Q", "sigma2_R", "I_hat", "k", "wallclock_s"]


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return "%.17g" % v
    return str(v)


def write_table(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format_value(v) for v in row])
    return path


def read_table(path):
    """Return ``(header, rows)`` with every cell as a string."""
    with open(path, encoding="utf-8", newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [row for row in r]


def _floats(cells):
    return [float(c) if c not in ("", "nan") else float("nan") for c in cells]


# ---------------------------------------------------------------------------
# Catalog
# ---------------------------------------------------------------------------


def catalog_header(d: int, p: int):
    return (
        ["traj", "i_time"]
        + [f"pred_{j}" for j in range(1, d + 1)]
        + [f"cov_{j}" for j in range(1, p + 1)]
        + [f"succ_{j}" for j in range(1, d + 1)]
    )


def write_catalog(path, catalog: Catalog) -> Path:
    d, p = catalog.dim_state, catalog.dim_covariate
    rows = (
        [int(tag[0]), int(tag[1]), *pred, *succ]
        for tag, pred, succ in zip(catalog.time_tags, catalog.predecessors, catalog.successors)
    )
    return write_table(path, catalog_header(d, p), rows)


def read_catalog(path, snapshot_id=None) -> Catalog:
    header, rows = read_table(path)
    d = sum(h.startswith("pred_") for h in header)
    p = sum(h.startswith("cov_") for h in header)
    if header != catalog_header(d, p):
        raise ValueError(f"unexpected catalog header {header}")
    data = np.array([_floats(r) for r in rows]).reshape(-1, 2 + 2 * d + p)
    tags = data[:, :2].astype(np.int64)
    return Catalog(data[:, 2 : 2 + d + p], data[:, 2 + d + p :], tags, d, snapshot_id)


# ---------------------------------------------------------------------------
# Ensemble
# ---------------------------------------------------------------------------


def write_ensemble(path, ensemble: SmoothingEnsemble) -> Path:
    traj = ensemble.trajectories
    n, tp1, d = traj.shape
    header = ["member", "t"] + [f"x_{j}" for j in range(1, d + 1)]
    rows = ([i + 1, t, *traj[i, t]] for i in range(n) for t in range(tp1))
    return write_table(path, header, rows)


def read_ensemble(path, source: str = "cpf-bs") -> SmoothingEnsemble:
    header, rows = read_table(path)
    d = len(header) - 2
    if header != ["member", "t"] + [f"x_{j}" for j in range(1, d + 1)]:
        raise ValueError(f"unexpected ensemble header {header}")
    data = np.array([_floats(r) for r in rows]).reshape(-1, 2 + d)
    n = int(data[:, 0].max())
    tp1 = int(data[:, 1].max()) + 1
    traj = np.full((n, tp1, d), np.nan)
    traj[data[:, 0].astype(int) - 1, data[:, 1].astype(int)] = data[:, 2:]
    return SmoothingEnsemble(traj, source)


# ---------------------------------------------------------------------------
# Estimation trace
# ---------------------------------------------------------------------------


def trace_rows(trace, wallclock: bool = True):
    for it, s2q, s2r, ihat, k, wc in trace.rows():
        yield [it, s2q, s2r, ihat, k, wc if wallclock else None]


def write_trace(path, trace, wallclock: bool = True) -> Path:
    """Write ``iter,sigma2_Q,sigma2_R,I_hat,k,wallclock_s``.

    ``wallclock=False`` leaves the timing column empty, which makes the
    file a deterministic function of the inputs.
    """
    return write_table(path, TRACE_COLUMNS, trace_rows(trace, wallclock))


def read_trace(path):
    """Trace CSV as a dict of column arrays (empty cells become NaN)."""
    header, rows = read_table(path)
    if header != TRACE_COLUMNS:
        raise ValueError(f"unexpected trace header {header}")
    cols = np.array([_floats(r) for r in rows]).reshape(-1, len(header))
    return {h: cols[:, j] for j, h in enumerate(header)}


# ---------------------------------------------------------------------------
# Sequences
# ---------------------------------------------------------------------------


def write_states(path, x, prefix: str = "x", start: int = 0) -> Path:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    header = ["t"] + [f"{prefix}_{j}" for j in range(1, x.shape[1] + 1)]
    return write_table(path, header, ([start + t, *row] for t, row in enumerate(x)))


def write_observations(path, y) -> Path:
    """Observations with missing rows left empty."""
    values = np.asarray(y.values)
    header = ["t"] + [f"y_{j}" for j in range(1, values.shape[1] + 1)]
    rows = (
        [t + 1, *(values[t] if y.mask[t] else [None] * values.shape[1])] for t in range(values.shape[0])
    )
    return write_table(path, header, rows)


def read_observations(path):
    """Inverse of :func:`write_observations`; empty rows become gaps."""
    from .core import ObservationSequence

    header, rows = read_table(path)
    d = len(header) - 1
    if d < 1 or header != ["t"] + [f"y_{j}" for j in range(1, d + 1)]:
        raise ValueError(f"unexpected observation header {header}")
    values = np.array([_floats(r[1:]) for r in rows]).reshape(-1, d)
    return ObservationSequence.from_array(values)
