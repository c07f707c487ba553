"""Local linear regression (LLR) surrogate of the dynamics.

The surrogate is learnt from a *catalog* of analog pairs
``(x_{t-1} (+) z_t, x_t)``. A prediction at a query point takes its ``k``
nearest catalog predecessors, weights them with a product tricube kernel
over the smallest axis-aligned box (centred on the query) containing them,
and returns the intercept of the weighted least-squares affine fit.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numba
import numpy as np
from scipy.spatial import cKDTree

from .errors import InsufficientCatalog

# Upper bound on the number of (query, catalog entry) distances held at once.
_DIST_BLOCK = 2_000_000
# Catalogs at least this large (and of low dimension) are searched with a k-d tree.
_TREE_MIN_SIZE = 512
_TREE_MAX_DIM = 8


def tricube_weight(u):
    """Tricube kernel (1 - |u|^3)^3 on |u| < 1, zero elsewhere."""
    a = np.abs(np.asarray(u, dtype=float))
    out = np.where(a < 1.0, (1.0 - np.minimum(a, 1.0) ** 3) ** 3, 0.0)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Catalog
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Catalog:
    """Analog pairs with their origin tags.

    ``predecessors`` has shape ``(M, d + p)`` (state then covariates),
    ``successors`` ``(M, d)`` and ``time_tags`` ``(M, 2)`` holding
    ``(member, t)``: the 1-based member index and the time index of the
    successor.
    """

    predecessors: np.ndarray
    successors: np.ndarray
    time_tags: np.ndarray
    dim_state: int
    snapshot_id: Optional[str] = None
    scale: np.ndarray = field(init=False, repr=False)
    search_points: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pred = np.atleast_2d(np.asarray(self.predecessors, dtype=float))
        succ = np.asarray(self.successors, dtype=float).reshape(pred.shape[0], -1)
        tags = np.asarray(self.time_tags, dtype=np.int64).reshape(pred.shape[0], 2)
        if succ.shape[1] != self.dim_state or pred.shape[1] < self.dim_state:
            raise ValueError("catalog dimensions are inconsistent")
        if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(succ))):
            raise ValueError("catalog entries must be finite")
        # Covariate coordinates are standardized by their catalog std.
        scale = np.ones(pred.shape[1])
        if pred.shape[1] > self.dim_state and pred.shape[0] > 1:
            sd = pred[:, self.dim_state:].std(axis=0)
            scale[self.dim_state:] = np.where(sd > 0, sd, 1.0)
        for arr in (pred, succ, tags, scale):
            arr.setflags(write=False)
        search = pred / scale
        search.setflags(write=False)
        object.__setattr__(self, "predecessors", pred)
        object.__setattr__(self, "successors", succ)
        object.__setattr__(self, "time_tags", tags)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "search_points", search)

    @property
    def size(self) -> int:
        return self.predecessors.shape[0]

    @functools.cached_property
    def time_order(self):
        """Row order sorted by time tag (stable) and the sorted tags."""
        order = np.argsort(self.time_tags[:, 1], kind="stable")
        return order, self.time_tags[order, 1]

    @functools.cached_property
    def tree(self) -> cKDTree:
        return cKDTree(self.search_points)

    @property
    def dim_covariate(self) -> int:
        return self.predecessors.shape[1] - self.dim_state

    def __len__(self):
        return self.size

    def subset(self, rows) -> "Catalog":
        return Catalog(
            self.predecessors[rows], self.successors[rows], self.time_tags[rows], self.dim_state
        )


def _trajectories(ensemble) -> np.ndarray:
    traj = np.asarray(getattr(ensemble, "trajectories", ensemble), dtype=float)
    if traj.ndim == 2:
        traj = traj[None]
    return traj


def build_catalog(ensemble, covariates=None, snapshot_id: Optional[str] = None) -> Catalog:
    """One pair per member i and time t = 1..T, member-major order.

    ``ensemble`` is a :class:`~npsem.smoothers.SmoothingEnsemble` or an
    array of shape ``(N, T + 1, d)`` (or ``(T + 1, d)`` for one member).
    """
    traj = _trajectories(ensemble)
    n, tp1, d = traj.shape
    if n < 1 or tp1 < 2:
        raise ValueError("ensemble must be nonempty with T >= 1")
    T = tp1 - 1
    pred = traj[:, :-1, :].reshape(n * T, d)
    succ = traj[:, 1:, :].reshape(n * T, d)
    if covariates is not None and np.asarray(covariates).size:
        z = np.asarray(covariates, dtype=float).reshape(T, -1)
        pred = np.hstack([pred, np.tile(z, (n, 1))])
    members = np.repeat(np.arange(1, n + 1), T)
    times = np.tile(np.arange(1, T + 1), n)
    return Catalog(pred, succ, np.column_stack([members, times]), d, snapshot_id)


def catalog_from_observations(y, covariates=None, snapshot_id: Optional[str] = None) -> Catalog:
    """Catalog of observed pairs ``(y_{t-1} (+) z_t, y_t)``, t = 2..T.

    Pairs with a missing endpoint are skipped.
    """
    values = np.asarray(getattr(y, "values", y), dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    mask = getattr(y, "mask", None)
    mask = ~np.any(np.isnan(values), axis=1) if mask is None else np.asarray(mask)
    T, d = values.shape
    t = np.arange(2, T + 1)
    keep = mask[t - 2] & mask[t - 1]
    t = t[keep]
    pred = values[t - 2]
    if covariates is not None and np.asarray(covariates).size:
        z = np.asarray(covariates, dtype=float).reshape(T, -1)
        pred = np.hstack([pred, z[t - 1]])
    tags = np.column_stack([np.ones_like(t), t])
    return Catalog(pred, values[t - 1], tags, d, snapshot_id)


# ---------------------------------------------------------------------------
# Neighbor search
# ---------------------------------------------------------------------------


class Exclusion(NamedTuple):
    """Exclude entries whose time tag lies in ``t - lag + 1 .. t + lag - 1``.

    With ``member=None`` the window applies to every member of the catalog;
    otherwise only to entries of that member.
    """

    t: int
    lag: int
    member: Optional[int] = None


@numba.njit(cache=True, nogil=True)
def _squared_distances(queries, points):
    # Coordinates accumulate in order; the tree path reproduces this exactly.
    n, D = queries.shape
    m = points.shape[0]
    out = np.empty((n, m))
    for q in range(n):
        for r in range(m):
            diff = queries[q, 0] - points[r, 0]
            acc = diff * diff
            for c in range(1, D):
                diff = queries[q, c] - points[r, c]
                acc += diff * diff
            out[q, r] = acc
    return out


@numba.njit(cache=True, nogil=True)
def _smallest_k(d2, kths, k):
    # k smallest per row in index order; ties at the k-th value go to the lower index.
    n, m = d2.shape
    idx = np.empty((n, k), dtype=np.int64)
    for q in range(n):
        row = d2[q]
        kth = kths[q]
        less = 0
        for r in range(m):
            if row[r] < kth:
                less += 1
        need = k - less
        j = 0
        for r in range(m):
            v = row[r]
            if v < kth:
                idx[q, j] = r
                j += 1
            elif v == kth and need > 0:
                idx[q, j] = r
                j += 1
                need -= 1
    return idx


def _select_k(d2: np.ndarray, k: int, ordered: bool = True):
    """Indices of the k smallest entries per row.

    Ties at the k-th value are resolved toward the lower column index.
    With ``ordered`` the result is sorted by (value, index), otherwise by
    index.
    """
    d2 = np.ascontiguousarray(d2)
    idx = _smallest_k(d2, np.partition(d2, k - 1, axis=1)[:, k - 1].copy(), k)
    dsel = np.take_along_axis(d2, idx, axis=1)
    if not np.all(np.isfinite(dsel)):
        finite = np.isfinite(d2).sum(axis=1)
        bad = int(finite.min())
        raise InsufficientCatalog(f"only {bad} admissible catalog entries for k={k}", bad)
    if ordered:
        order = np.argsort(dsel, axis=1, kind="stable")
        idx = np.take_along_axis(idx, order, axis=1)
        dsel = np.take_along_axis(dsel, order, axis=1)
    return idx, np.sqrt(dsel)


def _excluded_entries(catalog: Catalog, qtimes: np.ndarray, lag: int, member=None):
    """(query row, catalog row) pairs inside the exclusion windows."""
    order, sorted_t = catalog.time_order
    lo = np.searchsorted(sorted_t, qtimes - lag + 1, side="left")
    hi = np.searchsorted(sorted_t, qtimes + lag - 1, side="right")
    lengths = hi - lo
    total = int(lengths.sum())
    rows = np.repeat(np.arange(len(qtimes)), lengths)
    offsets = np.arange(total) - np.repeat(np.cumsum(lengths) - lengths, lengths)
    cols = order[np.repeat(lo, lengths) + offsets]
    if member is not None:
        keep = catalog.time_tags[cols, 0] == member
        rows, cols = rows[keep], cols[keep]
    return rows, cols


def _window_counts(catalog: Catalog, qtimes: np.ndarray, lag: int) -> np.ndarray:
    _, sorted_t = catalog.time_order
    lo = np.searchsorted(sorted_t, qtimes - lag + 1, side="left")
    hi = np.searchsorted(sorted_t, qtimes + lag - 1, side="right")
    return hi - lo


def _brute_neighbors(catalog, scaled, k, qtimes, lag, member, ordered):
    d2 = _squared_distances(scaled, catalog.search_points)
    if qtimes is not None:
        if np.all(qtimes == qtimes[0]):
            _, cols = _excluded_entries(catalog, qtimes[:1], lag, member)
            d2[:, cols] = np.inf
        else:
            d2[_excluded_entries(catalog, qtimes, lag, member)] = np.inf
    return _select_k(d2, k, ordered)


def _tree_neighbors(catalog, scaled, k, qtimes, lag, member, ordered, kq):
    """k-d tree candidates, filtered by the exclusion window.

    ``kq`` exceeds k by at least the window size plus one, so at least
    k + 1 admissible candidates come back. Their squared distances are
    recomputed exactly as in the brute-force path; rows whose k-th and
    (k+1)-th admissible distances are (nearly) tied are redone by brute
    force, which keeps the lower-index tie rule exact.
    """
    _, idx = catalog.tree.query(scaled, k=kq)
    pts = catalog.search_points[idx]
    d2 = scaled[:, None, 0] - pts[:, :, 0]
    d2 *= d2
    for c in range(1, pts.shape[2]):
        diff = scaled[:, None, c] - pts[:, :, c]
        diff *= diff
        d2 += diff
    if qtimes is not None:
        tags = catalog.time_tags[idx]
        bad = np.abs(tags[:, :, 1] - qtimes[:, None]) < lag
        if member is not None:
            bad &= tags[:, :, 0] == member
        keep = np.argsort(bad, axis=1, kind="stable")
        idx = np.take_along_axis(idx, keep, axis=1)
        d2 = np.take_along_axis(d2, keep, axis=1)
        d2[np.take_along_axis(bad, keep, axis=1)] = np.inf
    # Candidates come in tree order; the k-set is unambiguous unless the
    # remaining admissible distances come within rounding of the k-th.
    inner = d2[:, :k].max(axis=1)
    tied = d2[:, k:].min(axis=1) <= inner * (1.0 + 1e-9) + 1e-300
    idx, d2 = idx[:, :k], d2[:, :k]
    order = np.argsort(idx, axis=1)
    idx = np.take_along_axis(idx, order, axis=1)
    d2 = np.take_along_axis(d2, order, axis=1)
    if ordered:
        order = np.argsort(d2, axis=1, kind="stable")
        idx = np.take_along_axis(idx, order, axis=1)
        d2 = np.take_along_axis(d2, order, axis=1)
    dist = np.sqrt(d2)
    if np.any(tied):
        rows = np.nonzero(tied)[0]
        qt = None if qtimes is None else qtimes[rows]
        idx[rows], dist[rows] = _brute_neighbors(catalog, scaled[rows], k, qt, lag, member, ordered)
    return idx, dist


def _neighbors(catalog: Catalog, queries: np.ndarray, k: int, qtimes=None, lag: int = 0,
               member=None, ordered: bool = True):
    """Batched exact k-NN in the standardized search space.

    ``queries`` are raw (unscaled) points of shape ``(n, d + p)``;
    ``qtimes`` (length n) activates the lag-exclusion window.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    n = queries.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > catalog.size:
        raise InsufficientCatalog(f"catalog of size {catalog.size} < k={k}", catalog.size)
    scaled = queries / catalog.scale
    if lag > 0 and qtimes is not None:
        qtimes = np.broadcast_to(np.asarray(qtimes, dtype=np.int64), (n,))
        kq = k + 1 + int(_window_counts(catalog, qtimes, lag).max(initial=0))
    else:
        qtimes = None
        kq = k + 1
    dim = catalog.search_points.shape[1]
    # Measured crossover: the tree only wins when kq is well below M / 40.
    use_tree = (
        catalog.size >= _TREE_MIN_SIZE
        and dim <= _TREE_MAX_DIM
        and 40 * kq < catalog.size
    )
    width = kq if use_tree else catalog.size
    chunk = max(1, _DIST_BLOCK // max(width, 1))
    idx = np.empty((n, k), dtype=np.int64)
    dist = np.empty((n, k))
    for s in range(0, n, chunk):
        e = min(n, s + chunk)
        qt = None if qtimes is None else qtimes[s:e]
        if use_tree:
            out = _tree_neighbors(catalog, scaled[s:e], k, qt, lag, member, ordered, kq)
        else:
            out = _brute_neighbors(catalog, scaled[s:e], k, qt, lag, member, ordered)
        idx[s:e], dist[s:e] = out
    return idx, dist


def knn_search(query, catalog: Catalog, k: int, exclusion: Optional[Exclusion] = None):
    """The k nearest admissible catalog entries to ``query``.

    Returns ``(indices, distances)`` ordered by increasing distance, ties
    broken toward the lower catalog index (i.e. the lower time tag).
    """
    query = np.atleast_1d(np.asarray(query, dtype=float))[None, :]
    if exclusion is None:
        idx, dist = _neighbors(catalog, query, k)
    else:
        idx, dist = _neighbors(catalog, query, k, [exclusion.t], exclusion.lag, exclusion.member)
    return idx[0], dist[0]


# ---------------------------------------------------------------------------
# Local linear fit
# ---------------------------------------------------------------------------

_RANK_TOL = 1e-11


@numba.njit(cache=True, nogil=True)
def _local_moments(pred_all, succ_all, queries, idx):
    """Weighted normal equations of every local fit, without gathering.

    Returns ``G`` (n, D+1, D+1), ``rhs`` (n, D+1, d), the Nadaraya-Watson
    numerators (n, d), the weight sums (n,) and the zero-width mask (n, D).
    """
    n, k = idx.shape
    D = pred_all.shape[1]
    d = succ_all.shape[1]
    G = np.zeros((n, D + 1, D + 1))
    rhs = np.zeros((n, D + 1, d))
    nw = np.zeros((n, d))
    wsum = np.zeros(n)
    zero = np.zeros((n, D), dtype=np.bool_)
    h = np.empty(D)
    x = np.empty(D + 1)
    x[0] = 1.0
    for q in range(n):
        for j in range(D):
            h[j] = 0.0
        for i in range(k):
            r = idx[q, i]
            for j in range(D):
                a = abs(pred_all[r, j] - queries[q, j])
                if a > h[j]:
                    h[j] = a
        for j in range(D):
            zero[q, j] = h[j] <= 0.0
            h[j] = 1.0 if zero[q, j] else 1.0 / h[j]
        Gq = G[q]
        Rq = rhs[q]
        for i in range(k):
            r = idx[q, i]
            w = 1.0
            for j in range(D):
                u = (pred_all[r, j] - queries[q, j]) * h[j]
                x[j + 1] = u
                a = abs(u)
                c = 1.0 - a * a * a
                w *= c * c * c
            if w == 0.0:
                continue
            wsum[q] += w
            for c2 in range(d):
                nw[q, c2] += w * succ_all[r, c2]
            for a in range(D + 1):
                wa = w * x[a]
                for b in range(a, D + 1):
                    Gq[a, b] += wa * x[b]
                for c2 in range(d):
                    Rq[a, c2] += wa * succ_all[r, c2]
        for a in range(D + 1):
            for b in range(a + 1, D + 1):
                Gq[b, a] = Gq[a, b]
        # Columns without spread carry no slope information: pin their slope to 0.
        for j in range(D):
            if zero[q, j]:
                Gq[j + 1, j + 1] = 1.0
    return G, rhs, nw, wsum, zero


def _local_fit(catalog: Catalog, queries: np.ndarray, idx: np.ndarray):
    """Intercepts of the tricube-weighted local affine fits.

    Returns ``(predictions, fallback)`` where ``fallback`` flags queries
    whose local system was rank deficient (Nadaraya-Watson mean used).
    """
    G, rhs, nw, wsum, _ = _local_moments(
        catalog.predecessors, catalog.successors, np.ascontiguousarray(queries, dtype=float),
        np.ascontiguousarray(idx, dtype=np.int64),
    )
    n = G.shape[0]
    eig = np.linalg.eigvalsh(G)
    ok = (eig[:, 0] > _RANK_TOL * eig[:, -1]) & (eig[:, -1] > 0)
    out = np.empty((n, rhs.shape[2]))
    if np.any(ok):
        beta = np.linalg.solve(G[ok], rhs[ok])
        out[ok] = beta[:, 0, :]
    bad = ~ok
    if np.any(bad):
        sw = wsum[bad][:, None]
        # All weights zero (k = 1 or boundary-only neighbors): plain mean.
        plain = catalog.successors[idx[bad]].mean(axis=1)
        out[bad] = np.where(sw > 0, nw[bad] / np.where(sw > 0, sw, 1.0), plain)
    return out, bad


def _predict(catalog: Catalog, queries, k: int, qtimes=None, lag: int = 0, member=None):
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    n = queries.shape[0]
    out = np.empty((n, catalog.dim_state))
    flags = np.empty(n, dtype=bool)
    # Bound the memory used by the gathered neighborhoods as well.
    chunk = max(1, min(_DIST_BLOCK // max(catalog.size, 1), _DIST_BLOCK // (8 * k)))
    qt = None if qtimes is None else np.broadcast_to(np.asarray(qtimes, dtype=np.int64), (n,))
    for s in range(0, n, chunk):
        e = min(n, s + chunk)
        idx, _ = _neighbors(
            catalog, queries[s:e], k, None if qt is None else qt[s:e], lag, member, ordered=False
        )
        out[s:e], flags[s:e] = _local_fit(catalog, queries[s:e], idx)
    return out, flags


@dataclass(frozen=True)
class LlrConfig:
    """Settings of the LLR surrogate.

    ``k=None`` means "choose by cross-validation"; ``cv_grid=None`` uses a
    default grid derived from the catalog size.
    """

    k: Optional[int] = None
    lag: int = 5
    cv_grid: Optional[Sequence[int]] = None
    cv_folds: int = 5

    def __post_init__(self):
        if self.k is not None and self.k < 1:
            raise ValueError("k must be positive")
        if self.lag < 0:
            raise ValueError("lag must be >= 0")
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be >= 2")
        if self.cv_grid is not None:
            if len(self.cv_grid) == 0 or any(int(g) < 1 for g in self.cv_grid):
                raise ValueError("cv_grid must be a nonempty list of positive integers")
            object.__setattr__(self, "cv_grid", tuple(int(g) for g in self.cv_grid))


def default_cv_grid(M: int, d: int, p: int = 0) -> list:
    lo, hi = d + p + 2, M // 2
    grid = {min(max(math.ceil(M / q), lo), hi) for q in (100, 50, 20, 10, 5)}
    return sorted(g for g in grid if g >= 1)


def llr_predict(query, surrogate: "LlrSurrogate", exclusion: Optional[Exclusion] = None):
    """LLR prediction at a single query point in the (state (+) covariate) space."""
    query = np.atleast_1d(np.asarray(query, dtype=float))
    cat = surrogate.catalog
    if exclusion is None:
        out, flags = _predict(cat, query[None, :], surrogate.k)
    else:
        out, flags = _predict(cat, query[None, :], surrogate.k, [exclusion.t], exclusion.lag, exclusion.member)
    surrogate.fallback_count += int(flags.sum())
    return out[0]


class LlrSurrogate:
    """LLR estimate of m built on a catalog; a :class:`DynamicalModel`.

    When called with a time index ``t`` and ``config.lag > 0``, catalog
    entries with time tags within ``lag - 1`` steps of ``t`` are ignored.
    """

    name = "llr-surrogate"

    def __init__(self, catalog: Catalog, config: Optional[LlrConfig] = None, k: Optional[int] = None):
        self.catalog = catalog
        self.config = config or LlrConfig()
        self.dim_state = catalog.dim_state
        self.dim_covariate = catalog.dim_covariate
        k = k if k is not None else self.config.k
        if k is None:
            k = cross_validate_k(catalog, self.config)
        if k < self.dim_state + self.dim_covariate + 1:
            raise ValueError("k must be at least d + p + 1")
        self.k = int(k)
        self.fallback_count = 0

    def __call__(self, x, z=None, t=None):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        if self.dim_covariate:
            if z is None:
                raise ValueError("this surrogate requires covariates")
            z = np.asarray(z, dtype=float)
            z = np.broadcast_to(z.reshape(-1, self.dim_covariate), (n, self.dim_covariate))
            q = np.hstack([x, z])
        else:
            q = x
        lag = self.config.lag if t is not None else 0
        out, flags = _predict(self.catalog, q, self.k, t, lag)
        self.fallback_count += int(flags.sum())
        return out

    def with_k(self, k: int) -> "LlrSurrogate":
        return LlrSurrogate(self.catalog, self.config, k=k)

    def without_exclusion(self) -> "LlrSurrogate":
        """Same fit, no lag exclusion (for sequences outside the catalog)."""
        cfg = LlrConfig(self.k, 0, self.config.cv_grid, self.config.cv_folds)
        return LlrSurrogate(self.catalog, cfg, k=self.k)

    def __repr__(self):
        sid = self.catalog.snapshot_id
        return f"LlrSurrogate(M={self.catalog.size}, k={self.k}, lag={self.config.lag}, snapshot={sid!r})"


# ---------------------------------------------------------------------------
# Cross-validation of k
# ---------------------------------------------------------------------------


def cv_scores(catalog: Catalog, config: LlrConfig, grid: Optional[Sequence[int]] = None) -> dict:
    """Mean squared leave-fold-out LLR errors for every candidate k.

    Folds are contiguous blocks of successor times; the lag exclusion of
    ``config`` also applies when scoring held-out entries.
    """
    d, p = catalog.dim_state, catalog.dim_covariate
    grid = list(grid if grid is not None else (config.cv_grid or default_cv_grid(catalog.size, d, p)))
    kmax = max(grid)
    times = np.unique(catalog.time_tags[:, 1])
    blocks = np.array_split(times, config.cv_folds)
    sse = {k: 0.0 for k in grid}
    count = 0
    for block in blocks:
        if block.size == 0:
            continue
        held = np.isin(catalog.time_tags[:, 1], block)
        train = catalog.subset(~held)
        if train.size < kmax:
            raise InsufficientCatalog(
                f"training fold of size {train.size} smaller than k={kmax}", train.size
            )
        test_rows = np.nonzero(held)[0]
        queries = catalog.predecessors[test_rows]
        qtimes = catalog.time_tags[test_rows, 1]
        target = catalog.successors[test_rows]
        chunk = max(1, min(_DIST_BLOCK // max(train.size, 1), _DIST_BLOCK // (8 * kmax)))
        for s in range(0, len(test_rows), chunk):
            e = min(len(test_rows), s + chunk)
            idx, _ = _neighbors(train, queries[s:e], kmax, qtimes[s:e], config.lag)
            for k in grid:
                pred, _ = _local_fit(train, queries[s:e], idx[:, :k])
                sse[k] += float(np.sum((pred - target[s:e]) ** 2))
        count += len(test_rows)
    return {k: sse[k] / count for k in grid}


def cross_validate_k(catalog: Catalog, config: LlrConfig, rng=None) -> int:
    """The grid value of k with the lowest CV error (ties toward smaller k).

    Folds are deterministic contiguous time blocks, so ``rng`` is accepted
    for interface symmetry and not used.
    """
    d, p = catalog.dim_state, catalog.dim_covariate
    grid = list(config.cv_grid or default_cv_grid(catalog.size, d, p))
    if len(grid) == 1:
        return int(grid[0])
    scores = cv_scores(catalog, config, grid)
    best = min(sorted(grid), key=lambda k: scores[k])
    return int(best)
