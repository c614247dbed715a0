import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from edgedetect import dataio, features
from edgedetect.dataio import Dataset, SyntheticSpec
from edgedetect.features import FeatureError


def _ds(X, y=None):
    X = np.asarray(X, dtype=np.float64)
    y = np.arange(X.shape[0]) % 2 if y is None else np.asarray(y)
    return Dataset(X, y, tuple(f"c{i}" for i in range(max(2, int(y.max()) + 1))), dataio.feature_names(X.shape[1]))


# --------------------------------------------------------------------------
# per-flow statistics


def test_iat_constant_gaps():
    assert features.iat_stats([0, 10, 20]) == (10.0, 0.0)


def test_iat_hand_oracle():
    mean, std = features.iat_stats([0, 10, 30])
    gaps = [10.0, 20.0]
    assert mean == 15.0
    assert std == pytest.approx(math.sqrt(sum((g - 15.0) ** 2 for g in gaps) / 1))


def test_iat_single_timestamp():
    with pytest.raises(FeatureError):
        features.iat_stats([5])


@pytest.mark.parametrize("sizes, want", [([64, 64, 64], 0.0), ([64, 1500], 1.0), ([1, 2, 3, 4], 2.0)])
def test_entropy_examples(sizes, want):
    assert features.packet_size_entropy(sizes) == pytest.approx(want)


def test_entropy_empty():
    with pytest.raises(FeatureError):
        features.packet_size_entropy([])


@given(st.lists(st.integers(40, 60), min_size=1, max_size=100))
def test_entropy_bounds(sizes):
    h = features.packet_size_entropy(sizes)
    assert 0.0 <= h <= math.log2(len(set(sizes))) + 1e-12


# --------------------------------------------------------------------------
# standardization


def test_standardize_population_std():
    ds = _ds([[1.0], [2.0], [3.0]])
    out = features.apply_standardize(ds, features.fit_standardize(ds)).features[:, 0]
    np.testing.assert_allclose(out, [-1.224744871391589, 0.0, 1.224744871391589], atol=1e-12)


def test_standardize_constant_column():
    ds = _ds([[7.0, 1.0], [7.0, 2.0], [7.0, 4.0]])
    out = features.apply_standardize(ds, features.fit_standardize(ds)).features
    assert (out[:, 0] == 0).all()


def test_standardize_roundtrip(small_ds):
    sc = features.fit_standardize(small_ds)
    back = sc.inverse_transform(sc.transform(small_ds.features))
    np.testing.assert_allclose(back, small_ds.features, atol=1e-9)


def test_standardize_requires_finite():
    with pytest.raises(FeatureError):
        features.fit_standardize(_ds([[1.0], [np.nan]]))


# --------------------------------------------------------------------------
# PCA


def _line_data(seed=0):
    rng = np.random.default_rng(seed)
    t = rng.standard_normal(2000)
    return _ds(np.column_stack([t, t]) + 1e-3 * rng.standard_normal((2000, 2)))


def test_pca_line():
    ds = _line_data()
    pca = features.fit_incremental_pca(ds, batch_size=128, n_components=1)
    c = pca.components[0] * np.sign(pca.components[0, 0])
    np.testing.assert_allclose(c, [1 / math.sqrt(2), 1 / math.sqrt(2)], atol=1e-4)
    assert pca.variance_retained > 0.99
    full = features.fit_incremental_pca(ds, n_components=2)
    Z = features.transform_pca(ds, full).features
    assert np.abs(Z[:, 1]).max() < 0.1 * np.abs(Z[:, 0]).max()


def test_pca_target_one_gives_rank():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((500, 3)) @ rng.standard_normal((3, 6))
    pca = features.fit_incremental_pca(_ds(X), variance=1.0)
    assert pca.k == 3


def test_pca_full_rotation_preserves_distances(small_ds):
    pca = features.fit_incremental_pca(small_ds, batch_size=64, n_components=small_ds.n_features)
    Z = features.transform_pca(small_ds, pca).features
    X = small_ds.features
    i, j = np.arange(0, 50), np.arange(50, 100)
    np.testing.assert_allclose(np.linalg.norm(Z[i] - Z[j], axis=1), np.linalg.norm(X[i] - X[j], axis=1), atol=1e-6)


def test_pca_mean_projects_to_zero(small_ds):
    pca = features.fit_incremental_pca(small_ds, n_components=3)
    z = (pca.mean - pca.mean) @ pca.components.T
    assert np.allclose(features.transform_pca(_ds(pca.mean[None, :].repeat(2, 0)), pca).features, 0.0)
    assert np.allclose(z, 0.0)


def test_pca_matches_exact_eigendecomposition(small_ds):
    pca = features.fit_incremental_pca(small_ds, batch_size=37, n_components=small_ds.n_features)
    lam = np.sort(np.linalg.eigvalsh(np.cov(small_ds.features.T)))[::-1]
    np.testing.assert_allclose(pca.eigenvalues, lam, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(pca.components @ pca.components.T, np.eye(pca.k), atol=1e-6)


def test_pca_invariants(small_ds):
    pca = features.fit_incremental_pca(small_ds, n_components=small_ds.n_features)
    r = pca.explained_variance_ratio
    assert r.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.all(np.diff(pca.eigenvalues) <= 1e-12) and pca.eigenvalues.min() >= -1e-9
    errs = []
    for k in range(1, small_ds.n_features + 1):
        m = features.fit_incremental_pca(small_ds, n_components=k)
        rec = features.inverse_pca(features.transform_pca(small_ds, m).features, m)
        errs.append(float(((rec - small_ds.features) ** 2).sum()))
        assert m.variance_retained == pytest.approx(r[:k].sum())
    assert all(b <= a + 1e-8 for a, b in zip(errs, errs[1:]))


def test_pca_paper_target_reports_k():
    ds = dataio.generate_synthetic(SyntheticSpec(n_rows=4000, n_classes=7, n_features=78, latent_dim=30, seed=1))
    ds = features.apply_standardize(ds, features.fit_standardize(ds))
    pca = features.fit_incremental_pca(ds, variance=0.993)
    assert 1 <= pca.k < 78
    assert pca.variance_retained >= 0.993


def test_pca_errors(small_ds):
    with pytest.raises(FeatureError):
        features.fit_incremental_pca(small_ds, n_components=small_ds.n_features + 1)
    with pytest.raises(FeatureError):
        features.fit_incremental_pca(small_ds, variance=0.0)
    pca = features.fit_incremental_pca(small_ds, n_components=2)
    with pytest.raises(FeatureError):
        features.transform_pca(_ds(np.zeros((3, 2))), pca)


def test_artifacts_roundtrip(tmp_path, small_ds):
    sc = features.fit_standardize(small_ds)
    pca = features.fit_incremental_pca(small_ds, n_components=3)
    features.save_artifact(sc, tmp_path / "s.json")
    features.save_artifact(pca, tmp_path / "p.json")
    sc2 = features.load_artifact(tmp_path / "s.json")
    pca2 = features.load_artifact(tmp_path / "p.json")
    np.testing.assert_array_equal(sc2.means, sc.means)
    np.testing.assert_array_equal(pca2.components, pca.components)
    (tmp_path / "bad.json").write_text('{"kind": "pca", "version": 99}')
    with pytest.raises(FeatureError, match="version"):
        features.load_artifact(tmp_path / "bad.json")


# --------------------------------------------------------------------------
# permutation importance


class _Threshold:
    def __init__(self, j):
        self.j = j

    def predict(self, X):
        return (np.asarray(X)[:, self.j] > 0).astype(int)


def test_importance_ignored_column_zero():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((400, 3))
    imp = features.permutation_importance(_Threshold(1), _ds(X), repeats=3)
    assert imp[0] == 0 and imp[2] == 0


def test_importance_perfect_feature_half():
    rng = np.random.default_rng(1)
    y = np.repeat([0, 1], 1000)
    X = np.column_stack([np.where(y == 1, 1.0, -1.0) * rng.uniform(0.5, 1, 2000), rng.standard_normal(2000)])
    imp = features.permutation_importance(_Threshold(0), _ds(X, y), repeats=10, seed=2)
    assert imp[0] == pytest.approx(0.5, abs=0.03)
    assert imp[1] == 0


def test_importance_ranking_stable():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((600, 3))

    class Lin:
        def predict(self, Z):
            return (Z @ np.array([3.0, 1.0, 0.2]) > 0).astype(int)

    a = features.permutation_importance(Lin(), _ds(X), repeats=3, seed=0)
    b = features.permutation_importance(Lin(), _ds(X), repeats=30, seed=1)
    assert list(np.argsort(a)) == list(np.argsort(b))


def test_importance_zero_repeats():
    with pytest.raises(FeatureError):
        features.permutation_importance(_Threshold(0), _ds(np.zeros((4, 1))), repeats=0)


# --------------------------------------------------------------------------
# balancing


def test_undersample_counts():
    y = np.array([0] * 100 + [1] * 40)
    ds = _ds(np.arange(140.0)[:, None], y)
    out = features.undersample(ds, seed=0)
    assert out.class_counts().tolist() == [40, 40]
    # minority rows untouched
    assert sorted(out.features[out.labels == 1, 0]) == sorted(ds.features[ds.labels == 1, 0])


def test_undersample_balanced_keeps_counts():
    ds = _ds(np.arange(10.0)[:, None])
    out = features.undersample(ds)
    assert out.class_counts().tolist() == [5, 5]
    assert sorted(out.features[:, 0]) == list(range(10))


def test_undersample_binary_setting_proportional():
    # 7,500/7,500 from a skewed pool, at 1/100 scale
    y = np.array([0] * 300 + [1] * 75)
    out = features.undersample(_ds(np.zeros((375, 1)), y), seed=1)
    assert out.class_counts().tolist() == [75, 75]


def test_interpolate_examples():
    np.testing.assert_array_equal(features.interpolate([0, 0], [2, 2], 0.5), [1, 1])
    np.testing.assert_array_equal(features.interpolate([3, -1], [9, 9], 0.0), [3, -1])


def _segment_distance(p, a, b):
    ab = b - a
    t = np.clip(((p - a) @ ab) / max(ab @ ab, 1e-300), 0, 1)
    return float(np.linalg.norm(p - (a + t * ab)))


@pytest.mark.parametrize("mode", ["uniform", "adaptive"])
def test_smote_points_on_segments(mode):
    rng = np.random.default_rng(0)
    X = np.vstack([rng.standard_normal((200, 3)), 2 + rng.standard_normal((20, 3))])
    y = np.array([0] * 200 + [1] * 20)
    ds = _ds(X, y)
    out = features.smote(ds, features.SmoteConfig(k_neighbors=5, mode=mode, seed=4))
    assert out.class_counts().tolist() == [200, 200]
    # originals first and unchanged
    np.testing.assert_array_equal(out.features[:220], ds.features)
    X_min = X[200:]
    pts, base, nb, lam = features.smote_samples(X_min, 50, 5, np.random.default_rng(1),
                                                lambda b: np.random.default_rng(2).random(b.shape[0]))
    assert ((lam >= 0) & (lam <= 1)).all()
    for p, i, j in zip(pts, base, nb):
        assert i != j
        assert _segment_distance(p, X_min[i], X_min[j]) <= 1e-9


def test_smote_new_points_lie_between_minority_rows():
    rng = np.random.default_rng(5)
    X_min = rng.standard_normal((15, 2))
    X = np.vstack([rng.standard_normal((60, 2)) + 5, X_min])
    y = np.array([0] * 60 + [1] * 15)
    out = features.smote(_ds(X, y), features.SmoteConfig(k_neighbors=3, seed=0))
    new = out.features[75:]
    # each synthetic point is within 1e-9 of some segment between minority rows
    for p in new:
        d = min(_segment_distance(p, X_min[i], X_min[j]) for i in range(15) for j in range(15) if i != j)
        assert d <= 1e-9


def test_smote_k_too_large():
    y = np.array([0] * 10 + [1] * 3)
    with pytest.raises(FeatureError, match="k_neighbors"):
        features.smote(_ds(np.arange(13.0)[:, None], y), features.SmoteConfig(k_neighbors=3))


def test_minority_sparsity_range():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((100, 2))
    y = (np.arange(100) < 10).astype(int)
    rho = features.minority_sparsity(X, y, 1, X[y == 1], 5)
    assert ((rho >= 0) & (rho <= 1)).all()
    # isolated minority cluster: all neighbors are minority
    Xc = np.vstack([rng.standard_normal((90, 2)), 100 + rng.standard_normal((10, 2))])
    yc = np.array([0] * 90 + [1] * 10)
    assert (features.minority_sparsity(Xc, yc, 1, Xc[90:], 5) == 0).all()
