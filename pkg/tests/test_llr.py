import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from npsem.errors import InsufficientCatalog
from npsem.llr import (
    Catalog,
    Exclusion,
    LlrConfig,
    LlrSurrogate,
    build_catalog,
    catalog_from_observations,
    cross_validate_k,
    cv_scores,
    default_cv_grid,
    knn_search,
    llr_predict,
    tricube_weight,
)
from npsem.core import ObservationSequence

from _oracles import brute_knn, wls_oracle


def line_catalog(M=200):
    x = np.linspace(-1, 1, M)
    return Catalog(x[:, None], (2 * x + 1)[:, None], np.column_stack([np.ones(M), np.arange(1, M + 1)]), 1)


def test_tricube_values():
    assert tricube_weight(0.0) == 1.0
    assert tricube_weight(1.0) == 0.0
    assert tricube_weight(0.5) == pytest.approx(0.669921875, abs=1e-15)
    assert tricube_weight(-2.0) == 0.0


def test_build_catalog_counts_and_tags():
    cat = build_catalog(np.zeros((1, 3, 1)))
    assert cat.size == 2
    assert cat.time_tags.tolist() == [[1, 1], [1, 2]]
    assert build_catalog(np.zeros((10, 1001, 1))).size == 10_000


def test_catalog_from_observations_skips_gaps():
    y = ObservationSequence.from_array([[0.0], [1.0], [np.nan], [3.0], [4.0]])
    cat = catalog_from_observations(y)
    assert cat.time_tags[:, 1].tolist() == [2, 5]
    np.testing.assert_array_equal(cat.predecessors[:, 0], [0.0, 3.0])
    np.testing.assert_array_equal(cat.successors[:, 0], [1.0, 4.0])


def test_knn_trivial_cases():
    cat = Catalog(np.arange(4.0)[:, None], np.zeros((4, 1)), np.column_stack([np.ones(4), np.arange(1, 5)]), 1)
    idx, dist = knn_search([0.1], cat, 2)
    assert idx.tolist() == [0, 1]
    idx, dist = knn_search([2.0], cat, 1)
    assert idx.tolist() == [2] and dist[0] == 0.0
    idx, _ = knn_search([2.0], cat, 1, Exclusion(3, 1, 1))
    assert idx[0] != 2
    assert idx.tolist() == brute_knn(cat.predecessors, cat.time_tags, np.array([2.0]), 1, (3, 1, 1))
    with pytest.raises(InsufficientCatalog):
        knn_search([0.0], cat, 5)


@settings(max_examples=60, deadline=None)
@given(
    st.integers(0, 10_000),
    st.integers(1, 3),
    st.sampled_from([20, 80, 700]),
    st.integers(1, 15),
    st.integers(0, 4),
    st.booleans(),
)
def test_knn_matches_brute_force(seed, d, M, k, lag, per_member):
    rng = np.random.default_rng(seed)
    # Integer coordinates create many exact distance ties.
    pts = rng.integers(-3, 4, size=(M, d)).astype(float)
    n_mem = 4
    tags = np.column_stack([np.repeat(np.arange(1, n_mem + 1), M // n_mem + 1)[:M], np.tile(np.arange(1, M // n_mem + 2), n_mem)[:M]])
    cat = Catalog(pts, np.zeros((M, d)), tags, d)
    q = rng.integers(-3, 4, size=d).astype(float)
    t = int(rng.integers(1, M // n_mem + 1))
    member = int(rng.integers(1, n_mem + 1)) if per_member else None
    excl = Exclusion(t, lag, member) if lag > 0 else None
    ref = brute_knn(pts, tags, q, k, None if excl is None else (t, lag, member))
    if len(ref) < k:
        with pytest.raises(InsufficientCatalog):
            knn_search(q, cat, k, excl)
        return
    idx, dist = knn_search(q, cat, k, excl)
    assert idx.tolist() == ref
    np.testing.assert_allclose(dist, np.sqrt(((pts[ref] - q) ** 2).sum(axis=1)))


def test_tree_and_brute_paths_agree():
    rng = np.random.default_rng(5)
    pts = np.round(rng.standard_normal((5000, 2)), 1)
    tags = np.column_stack([np.ones(5000), np.arange(1, 5001)])
    cat = Catalog(pts, pts, tags, 2)
    for _ in range(20):
        q = np.round(rng.standard_normal(2), 1)
        t = int(rng.integers(1, 5001))
        idx, _ = knn_search(q, cat, 30, Exclusion(t, 3))
        assert idx.tolist() == brute_knn(pts, tags, q, 30, (t, 3, None))


def test_llr_affine_exactness():
    cat = line_catalog()
    m = LlrSurrogate(cat, LlrConfig(k=10, lag=0))
    for q in (-0.5, 0.013, 0.77):
        assert llr_predict([q], m)[0] == pytest.approx(2 * q + 1, abs=1e-8)
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, (400, 3))
    A = rng.standard_normal((3, 3))
    b = rng.standard_normal(3)
    cat = Catalog(X, X @ A.T + b, np.column_stack([np.ones(400), np.arange(1, 401)]), 3)
    out = LlrSurrogate(cat, LlrConfig(k=40, lag=0))(np.array([[0.1, -0.2, 0.3]]))
    np.testing.assert_allclose(out[0], A @ [0.1, -0.2, 0.3] + b, atol=1e-8)


def test_llr_constant_response():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((100, 2))
    cat = Catalog(X, np.full((100, 2), 3.25), np.column_stack([np.ones(100), np.arange(1, 101)]), 2)
    out = LlrSurrogate(cat, LlrConfig(k=20, lag=0))(np.zeros((1, 2)))
    np.testing.assert_allclose(out, [[3.25, 3.25]], atol=1e-12)


def test_llr_matches_dense_wls_oracle_on_sinus():
    x = np.random.default_rng(2).uniform(-1.2, 1.2, 1001)
    # Noiseless (x, sin 3x) pairs.
    cat = Catalog(x[:, None], np.sin(3 * x)[:, None], np.column_stack([np.ones(1001), np.arange(1, 1002)]), 1)
    m = LlrSurrogate(cat, LlrConfig(k=50, lag=0))
    ref_idx = brute_knn(cat.predecessors, cat.time_tags, np.array([0.2]), 50)
    ref = wls_oracle(cat.predecessors, cat.successors, np.array([0.2]), ref_idx)
    out = llr_predict([0.2], m)
    assert out[0] == pytest.approx(ref[0], abs=1e-10)
    assert out[0] == pytest.approx(np.sin(0.6), abs=0.02)
    rng = np.random.default_rng(3)
    for q in rng.uniform(-1, 1, 100):
        ref_idx = brute_knn(cat.predecessors, cat.time_tags, np.array([q]), 50)
        ref = wls_oracle(cat.predecessors, cat.successors, np.array([q]), ref_idx)
        assert llr_predict([q], m)[0] == pytest.approx(ref[0], abs=1e-10)


def test_llr_with_covariates_matches_oracle():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((300, 1))
    z = 10 * rng.standard_normal((300, 2))
    succ = np.sin(x) + 0.01 * z[:, :1] + 0.05 * rng.standard_normal((300, 1))
    cat = Catalog(np.hstack([x, z]), succ, np.column_stack([np.ones(300), np.arange(1, 301)]), 1)
    m = LlrSurrogate(cat, LlrConfig(k=40, lag=0))
    q = np.array([0.3, 1.0, -2.0])
    scaled = cat.predecessors / cat.scale
    idx = brute_knn(scaled, cat.time_tags, q / cat.scale, 40)
    ref = wls_oracle(cat.predecessors, cat.successors, q, idx)
    np.testing.assert_allclose(m(q[:1][None], q[1:][None]), [ref], atol=1e-10)


def test_duplicated_catalog_gives_same_prediction():
    x = np.linspace(-1, 1, 301)
    truth = np.column_stack([x])[None]
    single = LlrSurrogate(build_catalog(truth), LlrConfig(k=30, lag=0))
    many = LlrSurrogate(build_catalog(np.repeat(truth, 10, axis=0)), LlrConfig(k=300, lag=0))
    for q in (-0.4, 0.0, 0.55):
        assert llr_predict([q], many)[0] == pytest.approx(llr_predict([q], single)[0], abs=1e-10)


def test_rank_deficient_falls_back_to_weighted_mean():
    # All neighbors on a line in 2-D: the local design is singular.
    t = np.linspace(-1, 1, 50)
    pred = np.column_stack([t, 2 * t])
    cat = Catalog(pred, np.column_stack([t ** 2, t]), np.column_stack([np.ones(50), np.arange(1, 51)]), 2)
    m = LlrSurrogate(cat, LlrConfig(k=10, lag=0))
    out = m(np.array([[0.0, 0.0]]))
    assert np.all(np.isfinite(out))
    assert m.fallback_count == 1


def test_lag_exclusion_changes_neighbors():
    x = np.linspace(0, 1, 100)
    cat = Catalog(x[:, None], x[:, None], np.column_stack([np.ones(100), np.arange(1, 101)]), 1)
    q = cat.predecessors[49]
    own, _ = knn_search(q, cat, 3)
    excl, _ = knn_search(q, cat, 3, Exclusion(50, 3))
    assert 49 in own.tolist()
    assert not set(excl.tolist()) & {47, 48, 49, 50, 51}


def test_default_cv_grid():
    assert default_cv_grid(10_000, 3) == [100, 200, 500, 1000, 2000]
    assert default_cv_grid(100, 1) == [3, 5, 10, 20]


def test_cv_single_candidate():
    cat = line_catalog()
    assert cross_validate_k(cat, LlrConfig(cv_grid=[7])) == 7


def test_cv_matches_exhaustive_oracle():
    rng = np.random.default_rng(6)
    x = np.empty(1001)
    x[0] = 0.0
    for t in range(1, 1001):
        x[t] = np.sin(3 * x[t - 1]) + np.sqrt(0.1) * rng.standard_normal()
    cat = build_catalog(x[None, :, None])
    cfg = LlrConfig(lag=0, cv_grid=[10, 50, 200, 800], cv_folds=5)
    scores = cv_scores(cat, cfg)
    # Oracle: every held-out entry scored one at a time through llr_predict.
    blocks = np.array_split(np.arange(1, 1001), 5)
    ref = {}
    for k in cfg.cv_grid:
        sse = 0.0
        for block in blocks:
            held = np.isin(cat.time_tags[:, 1], block)
            m = LlrSurrogate(cat.subset(~held), LlrConfig(k=k, lag=0))
            for r in np.nonzero(held)[0]:
                p = llr_predict(cat.predecessors[r], m)
                sse += float(np.sum((p - cat.successors[r]) ** 2))
        ref[k] = sse / cat.size
    for k in cfg.cv_grid:
        assert scores[k] == pytest.approx(ref[k], rel=1e-9)
    best = cross_validate_k(cat, cfg)
    assert ref[best] == min(ref.values())


def test_cv_scores_apply_lag_exclusion():
    rng = np.random.default_rng(7)
    x = rng.uniform(-1, 1, 201)
    cat = build_catalog(x[None, :, None])
    cfg = LlrConfig(lag=3, cv_grid=[5, 20, 60], cv_folds=4)
    scores = cv_scores(cat, cfg)
    blocks = np.array_split(np.arange(1, 201), 4)
    for k in cfg.cv_grid:
        sse = 0.0
        for block in blocks:
            held = np.isin(cat.time_tags[:, 1], block)
            m = LlrSurrogate(cat.subset(~held), LlrConfig(k=k, lag=3))
            for r in np.nonzero(held)[0]:
                p = llr_predict(cat.predecessors[r], m, Exclusion(int(cat.time_tags[r, 1]), 3))
                sse += float(np.sum((p - cat.successors[r]) ** 2))
        assert scores[k] == pytest.approx(sse / cat.size, rel=1e-9)


def test_cv_prefers_largest_k_on_linear_data():
    hits = 0
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        x = rng.uniform(-1, 1, 300)
        y = 0.5 * x + 0.2 + 0.1 * rng.standard_normal(300)
        cat = Catalog(x[:, None], y[:, None], np.column_stack([np.ones(300), np.arange(1, 301)]), 1)
        grid = [5, 15, 40, 100]
        hits += cross_validate_k(cat, LlrConfig(lag=0, cv_grid=grid)) == max(grid)
    assert hits >= 9


def test_surrogate_validation():
    cat = line_catalog(20)
    with pytest.raises(ValueError):
        LlrSurrogate(cat, LlrConfig(k=1))
    with pytest.raises(ValueError):
        LlrConfig(k=0)
    with pytest.raises(ValueError):
        LlrConfig(cv_grid=[])
