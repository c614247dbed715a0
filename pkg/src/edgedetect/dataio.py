"""Flow-record datasets: synthetic generation, CSV ingestion, imputation,
stratified sampling and Kolmogorov-Smirnov sample validation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import stats

log = logging.getLogger(__name__)

PAPER_CLASSES = ("BENIGN", "DoS", "DDoS", "PortScan", "BruteForce", "WebAttack", "Bot")
# Benign share 0.73; attack classes split in decreasing prevalence.
PAPER_PROPORTIONS = (0.73, 0.10, 0.07, 0.05, 0.025, 0.015, 0.01)

FLOW_FEATURES = (
    "flow_duration",
    "flow_iat_mean",
    "flow_iat_std",
    "fwd_iat_total",
    "flow_bytes_s",
    "flow_packets_s",
    "total_fwd_packets",
    "total_bwd_packets",
    "total_fwd_length",
    "total_bwd_length",
    "fwd_pkt_max",
    "fwd_pkt_mean",
    "bwd_pkt_max",
    "bwd_pkt_mean",
    "destination_port",
    "idle_max",
    "idle_mean",
    "pkt_size_entropy",
)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix of flow records with integer class labels.

    Arrays are copied on construction and marked read-only.
    """

    features: np.ndarray
    labels: np.ndarray
    class_names: tuple
    column_names: tuple

    def __post_init__(self):
        X = np.array(self.features, dtype=np.float64, copy=True, order="C")
        y = np.array(self.labels, dtype=np.int64, copy=True)
        if X.ndim != 2:
            raise DatasetError(f"features must be 2-D, got shape {X.shape}")
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise DatasetError(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
        names = tuple(str(c) for c in self.class_names)
        cols = tuple(str(c) for c in self.column_names)
        if len(names) < 2:
            raise DatasetError("at least two classes are required")
        if len(cols) != X.shape[1]:
            raise DatasetError(f"{len(cols)} column names for {X.shape[1]} columns")
        if y.size and (y.min() < 0 or y.max() >= len(names)):
            raise DatasetError(f"labels must lie in [0, {len(names)})")
        X.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "class_names", names)
        object.__setattr__(self, "column_names", cols)

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.features).all())

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.features[index], self.labels[index], self.class_names, self.column_names)

    def with_features(self, features, column_names=None) -> "Dataset":
        cols = self.column_names if column_names is None else column_names
        return Dataset(features, self.labels, self.class_names, cols)

    def __len__(self):
        return self.n_rows

    def equals(self, other: "Dataset") -> bool:
        """Bit-level equality (NaN positions compare equal)."""
        return (
            self.class_names == other.class_names
            and self.column_names == other.column_names
            and np.array_equal(self.labels, other.labels)
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
        )


def concat(parts: Sequence[Dataset]) -> Dataset:
    first = parts[0]
    return Dataset(
        np.vstack([p.features for p in parts]),
        np.concatenate([p.labels for p in parts]),
        first.class_names,
        first.column_names,
    )


# --------------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic flow generator.

    ``feature_profiles`` is an optional ``(means, scales)`` pair of
    ``(n_classes, n_features)`` arrays. When omitted, profiles are drawn
    from ``seed``: positive per-feature base levels spanning several
    orders of magnitude, class means offset from the base by
    ``separation`` noise scales.

    With ``latent_dim`` set, class structure and heavy-tailed noise live
    in a ``latent_dim``-dimensional space that a random mixing matrix
    spreads over all features (correlated columns, as with byte, packet
    and duration counters of one flow), plus independent Gaussian noise
    of relative size ``noise_floor`` per feature.
    """

    n_rows: int
    n_classes: int = 7
    class_proportions: tuple | None = None
    feature_profiles: tuple | None = None
    heavy_tail_df: float = 3.0
    seed: int = 0
    n_features: int = 20
    separation: float = 1.0
    noise_frac: float = 0.15
    latent_dim: int | None = None
    noise_floor: float = 0.01

    def proportions(self) -> np.ndarray:
        if self.class_proportions is not None:
            return np.asarray(self.class_proportions, dtype=np.float64)
        if self.n_classes == len(PAPER_PROPORTIONS):
            return np.asarray(PAPER_PROPORTIONS)
        return np.full(self.n_classes, 1.0 / self.n_classes)

    def validate(self) -> None:
        if self.n_classes < 2:
            raise DatasetError("n_classes must be >= 2")
        if self.n_rows < self.n_classes:
            raise DatasetError(f"n_rows={self.n_rows} is smaller than n_classes={self.n_classes}")
        p = self.proportions()
        if p.shape != (self.n_classes,) or (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise DatasetError("class_proportions must be n_classes probabilities summing to 1")
        if not self.heavy_tail_df > 0:
            raise DatasetError("heavy_tail_df must be positive")
        if self.latent_dim is not None:
            if not 1 <= self.latent_dim <= self.n_features:
                raise DatasetError("latent_dim must lie in [1, n_features]")
            if self.feature_profiles is not None:
                raise DatasetError("latent_dim and feature_profiles are mutually exclusive")
        if self.feature_profiles is not None:
            means, scales = (np.asarray(a, dtype=np.float64) for a in self.feature_profiles)
            if means.shape != scales.shape or means.shape[0] != self.n_classes:
                raise DatasetError("feature_profiles must be (n_classes, n_features) means and scales")
            if (scales < 0).any():
                raise DatasetError("feature scales must be nonnegative")

    def profiles(self) -> tuple[np.ndarray, np.ndarray]:
        if self.feature_profiles is not None:
            means, scales = self.feature_profiles
            return np.asarray(means, dtype=np.float64), np.asarray(scales, dtype=np.float64)
        rng = np.random.default_rng([self.seed, 0x5EED])
        base = 10.0 ** rng.uniform(1.0, 4.0, size=self.n_features)
        scale = self.noise_frac * base
        offsets = rng.standard_normal((self.n_classes, self.n_features))
        means = base + self.separation * scale * offsets
        scales = np.broadcast_to(scale, means.shape).copy()
        return means, scales


def feature_names(n: int) -> tuple:
    names = list(FLOW_FEATURES[:n])
    names += [f"feature_{j}" for j in range(len(names), n)]
    return tuple(names)


def class_names_for(n_classes: int) -> tuple:
    if n_classes == len(PAPER_CLASSES):
        return PAPER_CLASSES
    return tuple(f"class_{c}" for c in range(n_classes))


def apportion(total: int, weights) -> np.ndarray:
    """Largest-remainder split of ``total`` into integer parts proportional to ``weights``."""
    w = np.asarray(weights, dtype=np.float64)
    quota = total * w / w.sum()
    base = np.floor(quota).astype(np.int64)
    short = total - int(base.sum())
    if short:
        order = np.argsort(-(quota - base), kind="stable")
        base[order[:short]] += 1
    return base


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    spec.validate()
    means, scales = spec.profiles()
    counts = apportion(spec.n_rows, spec.proportions())
    # every class present
    while (counts == 0).any():
        counts[np.argmax(counts)] -= 1
        counts[np.argmin(counts)] += 1
    rng = np.random.default_rng(spec.seed)
    labels = np.repeat(np.arange(spec.n_classes), counts)
    if spec.latent_dim is not None:
        X = _latent_features(spec, labels, rng)
        perm = rng.permutation(spec.n_rows)
        return Dataset(X[perm], labels[perm], class_names_for(spec.n_classes), feature_names(spec.n_features))
    noise = rng.standard_t(spec.heavy_tail_df, size=(spec.n_rows, means.shape[1]))
    X = means[labels] + scales[labels] * noise
    perm = rng.permutation(spec.n_rows)
    return Dataset(X[perm], labels[perm], class_names_for(spec.n_classes), feature_names(means.shape[1]))


def _latent_features(spec: SyntheticSpec, labels, rng) -> np.ndarray:
    prof = np.random.default_rng([spec.seed, 0x5EED])
    r, d = spec.latent_dim, spec.n_features
    base = 10.0 ** prof.uniform(1.0, 4.0, size=d)
    scale = spec.noise_frac * base
    mixing = prof.standard_normal((r, d)) / np.sqrt(r)
    centers = spec.separation * prof.standard_normal((spec.n_classes, r))
    z = centers[labels] + rng.standard_t(spec.heavy_tail_df, size=(labels.shape[0], r))
    iso = spec.noise_floor * rng.standard_normal((labels.shape[0], d))
    return base + scale * (z @ mixing + iso)


# --------------------------------------------------------------------------
# CSV ingestion


def _parse_cell(text: str) -> float:
    t = text.strip()
    if t == "":
        return math.nan
    # float() already accepts nan/inf/infinity in any case
    return float(t)


def _looks_numeric(text: str) -> bool:
    try:
        _parse_cell(text)
    except ValueError:
        return False
    return text.strip() != ""


def load_csv(path, label_column: str, drop_duplicates: bool = True) -> Dataset:
    """Read a headed CSV of numeric flow features plus one label column.

    Non-finite cells ("NaN", "Infinity", empty) are kept for
    :func:`impute_median`. Labels map to ``0..L-1`` in first-seen order.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if all(_looks_numeric(h) for h in header):
        raise DatasetError(f"{path}: missing header row")
    if label_column not in header:
        raise DatasetError(f"{path}: label column {label_column!r} not found")
    li = header.index(label_column)
    cols = [h for i, h in enumerate(header) if i != li]

    mapping: dict[str, int] = {}
    feats, labels = [], []
    for r, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DatasetError(f"{path}: line {r} has {len(row)} fields, expected {len(header)}")
        vals = []
        for i, cell in enumerate(row):
            if i == li:
                continue
            try:
                vals.append(_parse_cell(cell))
            except ValueError:
                raise DatasetError(
                    f"{path}: line {r}, column {header[i]!r}: non-numeric value {cell!r}"
                ) from None
        lab = row[li].strip()
        labels.append(mapping.setdefault(lab, len(mapping)))
        feats.append(vals)

    X = np.asarray(feats, dtype=np.float64).reshape(len(feats), len(cols))
    y = np.asarray(labels, dtype=np.int64)
    if drop_duplicates and len(y):
        seen = set()
        keep = []
        for i in range(len(y)):
            key = (X[i].tobytes(), int(y[i]))
            if key not in seen:
                seen.add(key)
                keep.append(i)
        if len(keep) < len(y):
            log.info("%s: dropped %d duplicate rows", path, len(y) - len(keep))
        X, y = X[keep], y[keep]
    n_inf = int(np.isinf(X).sum())
    if n_inf:
        log.info("%s: %d infinite cells retained for imputation", path, n_inf)
    names = tuple(mapping)
    if len(names) < 2:
        raise DatasetError(f"{path}: label column has fewer than two classes")
    return Dataset(X, y, names, tuple(cols))


def save_csv(ds: Dataset, path, label_column: str = "Label") -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(ds.column_names) + [label_column])
        for x, lab in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in x] + [ds.class_names[lab]])


# --------------------------------------------------------------------------
# cleaning and sampling


@dataclass
class ImputeReport:
    replaced: int = 0
    degenerate_columns: list = field(default_factory=list)


def impute_median(ds: Dataset, report: ImputeReport | None = None) -> Dataset:
    """Replace NaN/inf cells by the median of the column's finite values.

    Columns with no finite value are zero-filled and listed in ``report``.
    """
    X = np.array(ds.features)
    bad = ~np.isfinite(X)
    if not bad.any():
        return ds
    rep = report if report is not None else ImputeReport()
    for j in np.flatnonzero(bad.any(axis=0)):
        col = X[:, j]
        finite = col[~bad[:, j]]
        if finite.size:
            fill = float(np.median(finite))
        else:
            fill = 0.0
            rep.degenerate_columns.append(ds.column_names[j])
            log.warning("column %r has no finite values; zero-filled", ds.column_names[j])
        col[bad[:, j]] = fill
        rep.replaced += int(bad[:, j].sum())
    return ds.with_features(X)


def stratified_sample(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Class-stratified random sample of ``round(fraction * n)`` rows.

    Per-class counts follow largest-remainder apportionment, so every
    class proportion matches the full data to within one row.
    """
    if not 0.0 < fraction <= 1.0:
        raise DatasetError(f"fraction must be in (0, 1], got {fraction}")
    counts = ds.class_counts()
    total = int(math.floor(fraction * ds.n_rows + 0.5))
    take = apportion(total, counts) if counts.sum() else counts
    rng = np.random.default_rng(seed)
    picked = []
    for c in range(ds.n_classes):
        idx = np.flatnonzero(ds.labels == c)
        if take[c]:
            picked.append(rng.choice(idx, size=int(take[c]), replace=False))
    index = np.concatenate(picked) if picked else np.zeros(0, dtype=np.int64)
    return ds.subset(rng.permutation(index))


def train_test_split(ds: Dataset, test_fraction: float = 0.2, seed: int = 42) -> tuple[Dataset, Dataset]:
    """Stratified split; the test part is a :func:`stratified_sample`-style draw."""
    counts = ds.class_counts()
    take = apportion(int(math.floor(test_fraction * ds.n_rows + 0.5)), counts)
    rng = np.random.default_rng(seed)
    test_idx, train_idx = [], []
    for c in range(ds.n_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        test_idx.append(idx[: take[c]])
        train_idx.append(idx[take[c]:])
    tr = rng.permutation(np.concatenate(train_idx))
    te = rng.permutation(np.concatenate(test_idx))
    return ds.subset(tr), ds.subset(te)


# --------------------------------------------------------------------------
# KS validation


class KSEntry(NamedTuple):
    feature: str
    ks_statistic: float
    p_value: float
    mean_deviation_pct: float


@dataclass(frozen=True)
class KSReport:
    per_feature: tuple
    rejections: int
    alpha: float

    def rejected(self) -> list[str]:
        return [e.feature for e in self.per_feature if e.p_value < self.alpha]


def ks_validate(full: Dataset, sample: Dataset, alpha: float = 0.05) -> KSReport:
    """Per-feature two-sample KS test (asymptotic p-value) and mean deviation.

    ``mean_deviation_pct`` is the absolute difference instead of a
    percentage when the full-data mean is exactly zero.
    """
    if full.column_names != sample.column_names:
        raise DatasetError("full and sample datasets have different columns")
    entries = []
    for j, name in enumerate(full.column_names):
        a, b = full.features[:, j], sample.features[:, j]
        res = stats.ks_2samp(a, b, method="asymp")
        mf, ms = float(a.mean()), float(b.mean())
        dev = abs(mf - ms) if mf == 0 else 100.0 * abs(mf - ms) / abs(mf)
        p = min(1.0, max(0.0, float(res.pvalue)))
        entries.append(KSEntry(name, float(res.statistic), p, dev))
    rej = sum(e.p_value < alpha for e in entries)
    return KSReport(tuple(entries), rej, alpha)
