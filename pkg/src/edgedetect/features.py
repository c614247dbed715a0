"""Feature engineering, standardization, incremental PCA, permutation
importance and class balancing."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg

from .dataio import Dataset, DatasetError

ARTIFACT_VERSION = 1


class FeatureError(ValueError):
    pass


# --------------------------------------------------------------------------
# per-flow statistics


def iat_stats(timestamps) -> tuple[float, float]:
    """Mean and sample std (n-1 denominator over the gaps) of inter-arrival times."""
    t = np.asarray(timestamps, dtype=np.float64)
    if t.ndim != 1 or t.size < 2:
        raise FeatureError("need at least two timestamps")
    gaps = np.diff(t)
    if (gaps < 0).any():
        raise FeatureError("timestamps must be nondecreasing")
    mean = float(gaps.sum() / (t.size - 1))
    if gaps.size < 2:
        return mean, 0.0
    std = math.sqrt(float(((gaps - mean) ** 2).sum()) / (gaps.size - 1))
    return mean, std


def packet_size_entropy(sizes) -> float:
    """Shannon entropy in bits of the empirical packet-size distribution."""
    s = np.asarray(sizes)
    if s.size == 0:
        raise FeatureError("empty packet-size sequence")
    _, counts = np.unique(s, return_counts=True)
    p = counts / counts.sum()
    h = float(-(p * np.log2(p)).sum())
    return max(h, 0.0)


# --------------------------------------------------------------------------
# standardization


@dataclass(frozen=True)
class Scaler:
    """Column means and population standard deviations.

    Columns with zero spread are divided by 1 instead, so they map to 0.
    """

    means: np.ndarray
    stds: np.ndarray

    def _safe(self):
        return np.where(self.stds > 0, self.stds, 1.0)

    def transform(self, X):
        return (np.asarray(X, dtype=np.float64) - self.means) / self._safe()

    def inverse_transform(self, Z):
        return np.asarray(Z, dtype=np.float64) * self._safe() + self.means

    def to_dict(self):
        return {"kind": "scaler", "version": ARTIFACT_VERSION,
                "means": self.means.tolist(), "stds": self.stds.tolist()}

    @classmethod
    def from_dict(cls, d):
        _check_artifact(d, "scaler")
        return cls(np.asarray(d["means"], dtype=np.float64), np.asarray(d["stds"], dtype=np.float64))


def fit_standardize(ds: Dataset) -> Scaler:
    if not ds.is_finite():
        raise FeatureError("standardization requires finite features; impute first")
    X = ds.features
    return Scaler(X.mean(axis=0), X.std(axis=0))


def apply_standardize(ds: Dataset, scaler: Scaler) -> Dataset:
    if scaler.means.shape[0] != ds.n_features:
        raise FeatureError("scaler was fitted on a different column count")
    return ds.with_features(scaler.transform(ds.features))


# --------------------------------------------------------------------------
# incremental PCA


@dataclass(frozen=True)
class PCAModel:
    components: np.ndarray  # (k, d), orthonormal rows
    eigenvalues: np.ndarray  # all d, descending
    k: int
    variance_retained: float
    mean: np.ndarray
    n_samples: int = 0

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        lam = np.clip(self.eigenvalues, 0.0, None)
        return lam / lam.sum()

    def to_dict(self):
        return {"kind": "pca", "version": ARTIFACT_VERSION, "k": self.k,
                "components": self.components.tolist(), "eigenvalues": self.eigenvalues.tolist(),
                "variance_retained": self.variance_retained, "mean": self.mean.tolist(),
                "n_samples": self.n_samples}

    @classmethod
    def from_dict(cls, d):
        _check_artifact(d, "pca")
        return cls(np.asarray(d["components"], dtype=np.float64).reshape(d["k"], -1),
                   np.asarray(d["eigenvalues"], dtype=np.float64), int(d["k"]),
                   float(d["variance_retained"]), np.asarray(d["mean"], dtype=np.float64),
                   int(d.get("n_samples", 0)))


class IncrementalPCA:
    """Streaming covariance accumulator with on-demand eigendecomposition.

    Batches are merged with the pairwise mean/scatter update, so the
    accumulated covariance equals the full-data covariance up to rounding.
    """

    def __init__(self, n_features: int):
        self.n = 0
        self.mean = np.zeros(n_features)
        self.scatter = np.zeros((n_features, n_features))
        self._eig = None

    def partial_fit(self, X) -> "IncrementalPCA":
        X = np.asarray(X, dtype=np.float64)
        m = X.shape[0]
        if m == 0:
            return self
        mb = X.mean(axis=0)
        Xc = X - mb
        Sb = Xc.T @ Xc
        if self.n == 0:
            self.mean, self.scatter = mb, Sb
        else:
            tot = self.n + m
            delta = mb - self.mean
            self.scatter = self.scatter + Sb + np.outer(delta, delta) * (self.n * m / tot)
            self.mean = self.mean + delta * (m / tot)
        self.n += m
        self._eig = None
        return self

    def covariance(self) -> np.ndarray:
        if self.n < 2:
            raise FeatureError("need at least two samples for a covariance")
        C = self.scatter / (self.n - 1)
        return 0.5 * (C + C.T)

    def eig(self):
        if self._eig is None:
            lam, V = linalg.eigh(self.covariance())
            order = np.argsort(lam)[::-1]
            self._eig = (lam[order], V[:, order].T.copy())
        return self._eig


def choose_k(eigenvalues, variance: float) -> int:
    lam = np.clip(np.asarray(eigenvalues, dtype=np.float64), 0.0, None)
    ratio = np.cumsum(lam) / lam.sum()
    return int(np.searchsorted(ratio, variance - 1e-12) + 1)


def fit_incremental_pca(ds: Dataset, batch_size: int = 1000, variance: float | None = 0.993,
                        n_components: int | None = None) -> PCAModel:
    """Fit PCA by streaming ``batch_size`` rows at a time.

    Pass either ``variance`` (keep the smallest k reaching that explained
    variance) or ``n_components``.
    """
    d = ds.n_features
    if n_components is not None:
        if not 1 <= n_components <= d:
            raise FeatureError(f"n_components={n_components} outside [1, {d}]")
    elif variance is None or not 0.0 < variance <= 1.0:
        raise FeatureError(f"variance target must be in (0, 1], got {variance}")
    if batch_size < 1:
        raise FeatureError("batch_size must be positive")
    acc = IncrementalPCA(d)
    X = ds.features
    for start in range(0, ds.n_rows, batch_size):
        acc.partial_fit(X[start:start + batch_size])
    lam, V = acc.eig()
    k = n_components if n_components is not None else min(choose_k(lam, variance), d)
    lam_pos = np.clip(lam, 0.0, None)
    return PCAModel(V[:k].copy(), lam, k, float(lam_pos[:k].sum() / lam_pos.sum()), acc.mean.copy(), acc.n)


def transform_pca(ds: Dataset, model: PCAModel) -> Dataset:
    if ds.n_features != model.mean.shape[0]:
        raise FeatureError(f"dataset has {ds.n_features} columns, PCA expects {model.mean.shape[0]}")
    Z = (ds.features - model.mean) @ model.components.T
    return ds.with_features(Z, tuple(f"pc_{i + 1:02d}" for i in range(model.k)))


def inverse_pca(Z, model: PCAModel) -> np.ndarray:
    return np.asarray(Z) @ model.components + model.mean


def save_artifact(obj, path) -> None:
    Path(path).write_text(json.dumps(obj.to_dict()))


def load_artifact(path):
    d = json.loads(Path(path).read_text())
    kind = d.get("kind")
    if kind == "scaler":
        return Scaler.from_dict(d)
    if kind == "pca":
        return PCAModel.from_dict(d)
    raise FeatureError(f"unknown artifact kind {kind!r}")


def _check_artifact(d, kind):
    if d.get("kind") != kind:
        raise FeatureError(f"expected a {kind} artifact, got {d.get('kind')!r}")
    if d.get("version") != ARTIFACT_VERSION:
        raise FeatureError(f"unsupported {kind} artifact version {d.get('version')!r}")


# --------------------------------------------------------------------------
# permutation importance


def permutation_importance(model, ds: Dataset, repeats: int = 5, seed: int = 0) -> np.ndarray:
    """Fraction of rows whose prediction flips when one column is shuffled.

    ``model`` needs a ``predict(X)`` method. Scores are averaged over
    ``repeats`` independent shuffles per column.
    """
    if repeats < 1:
        raise FeatureError("repeats must be >= 1")
    rng = np.random.default_rng(seed)
    X = np.array(ds.features)
    base = np.asarray(model.predict(X))
    scores = np.zeros(ds.n_features)
    for j in range(ds.n_features):
        col = X[:, j].copy()
        flips = 0.0
        for _ in range(repeats):
            X[:, j] = col[rng.permutation(col.size)]
            flips += float(np.mean(np.asarray(model.predict(X)) != base))
        X[:, j] = col
        scores[j] = flips / repeats
    return scores


# --------------------------------------------------------------------------
# class balancing


def undersample(ds: Dataset, seed: int = 0) -> Dataset:
    """Randomly reduce every class to the smallest class count."""
    counts = ds.class_counts()
    present = counts[counts > 0]
    if present.size < 2:
        raise DatasetError("undersampling needs at least two populated classes")
    m = int(present.min())
    rng = np.random.default_rng(seed)
    keep = []
    for c in np.flatnonzero(counts):
        idx = np.flatnonzero(ds.labels == c)
        keep.append(np.sort(rng.choice(idx, size=m, replace=False)))
    return ds.subset(rng.permutation(np.concatenate(keep)))


@dataclass(frozen=True)
class SmoteConfig:
    k_neighbors: int = 5
    mode: str = "uniform"  # or "adaptive"
    target_count_per_class: int | None = None  # default: the majority count
    seed: int = 0

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise FeatureError("k_neighbors must be >= 1")
        if self.mode not in ("uniform", "adaptive"):
            raise FeatureError(f"unknown SMOTE mode {self.mode!r}")


def _sq_dists(A, B):
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d, 0.0)


def nearest_neighbors(A, B, k, exclude_self=False, chunk=2048):
    """Indices of the k nearest rows of B for every row of A (brute force)."""
    out = np.empty((A.shape[0], k), dtype=np.int64)
    for s in range(0, A.shape[0], chunk):
        D = _sq_dists(A[s:s + chunk], B)
        if exclude_self:
            rows = np.arange(D.shape[0])
            D[rows, rows + s] = np.inf
        part = np.argpartition(D, k - 1, axis=1)[:, :k]
        dd = np.take_along_axis(D, part, axis=1)
        out[s:s + chunk] = np.take_along_axis(part, np.argsort(dd, axis=1, kind="stable"), axis=1)
    return out


def interpolate(x_i, x_nn, lam):
    """Point at fraction ``lam`` along the segment from ``x_i`` to ``x_nn``."""
    x_i = np.asarray(x_i, dtype=np.float64)
    return x_i + lam * (np.asarray(x_nn, dtype=np.float64) - x_i)


def smote_samples(X_min, n_new, k, rng, lam_sampler):
    """Draw ``n_new`` interpolated points from the minority rows ``X_min``.

    Returns ``(points, base_index, neighbor_index, lam)`` so that
    ``points[s] = X_min[base] + lam * (X_min[neighbor] - X_min[base])``.
    """
    nn = nearest_neighbors(X_min, X_min, k, exclude_self=True)
    base = rng.integers(0, X_min.shape[0], size=n_new)
    nb = nn[base, rng.integers(0, k, size=n_new)]
    lam = lam_sampler(base)
    pts = X_min[base] + lam[:, None] * (X_min[nb] - X_min[base])
    return pts, base, nb, lam


def minority_sparsity(X_all, labels, cls, X_min, k):
    """Non-``cls`` share among each minority point's k nearest neighbors overall."""
    own = np.flatnonzero(labels == cls)
    nn = nearest_neighbors(X_min, X_all, k + 1)
    rho = np.empty(X_min.shape[0])
    for i in range(X_min.shape[0]):
        row = nn[i][nn[i] != own[i]][:k]
        rho[i] = float(np.mean(labels[row] != cls))
    return rho


def smote(ds: Dataset, cfg: SmoteConfig) -> Dataset:
    """Oversample every class below the target count with SMOTE.

    Uniform mode draws the interpolation weight from U(0,1); adaptive mode
    draws it from Beta(1 + rho, 2 - rho), where rho is the non-minority
    share of the point's k nearest neighbors in the full dataset. Original
    rows are returned unchanged, synthetic rows appended after them.
    """
    counts = ds.class_counts()
    target = int(cfg.target_count_per_class or counts.max())
    rng = np.random.default_rng(cfg.seed)
    new_X, new_y = [], []
    for c in range(ds.n_classes):
        need = target - int(counts[c])
        if need <= 0 or counts[c] == 0:
            continue
        if cfg.k_neighbors >= counts[c]:
            raise FeatureError(
                f"class {ds.class_names[c]!r} has {counts[c]} rows; k_neighbors={cfg.k_neighbors} is too large"
            )
        X_min = ds.features[ds.labels == c]
        if cfg.mode == "adaptive":
            rho = minority_sparsity(ds.features, ds.labels, c, X_min, cfg.k_neighbors)
            sampler = lambda base, rho=rho: rng.beta(1.0 + rho[base], 2.0 - rho[base])  # noqa: E731
        else:
            sampler = lambda base: rng.random(base.shape[0])  # noqa: E731
        pts, *_ = smote_samples(X_min, need, cfg.k_neighbors, rng, sampler)
        new_X.append(pts)
        new_y.append(np.full(need, c, dtype=np.int64))
    if not new_X:
        return ds
    return Dataset(np.vstack([ds.features] + new_X), np.concatenate([ds.labels] + new_y),
                   ds.class_names, ds.column_names)
