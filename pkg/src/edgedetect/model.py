"""Local classifiers (elastic-net softmax regression and a small MLP),
their losses and gradients, local SGD training, evaluation metrics and
stratified cross-validation."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .dataio import Dataset


class ModelError(ValueError):
    pass


# --------------------------------------------------------------------------
# architecture and parameters


@dataclass(frozen=True)
class Arch:
    """``kind`` is "logistic" (softmax regression) or "mlp" (d -> hidden... -> L)."""

    kind: str
    d: int
    n_classes: int
    hidden: tuple = (128, 64)

    def __post_init__(self):
        if self.kind not in ("logistic", "mlp"):
            raise ModelError(f"unknown architecture {self.kind!r}")
        if self.d < 1 or self.n_classes < 2:
            raise ModelError(f"invalid dimensions d={self.d}, n_classes={self.n_classes}")
        if self.kind == "mlp" and (not self.hidden or min(self.hidden) < 1):
            raise ModelError("mlp needs positive hidden layer sizes")

    @property
    def layer_sizes(self) -> tuple:
        if self.kind == "logistic":
            return (self.d, self.n_classes)
        return (self.d, *self.hidden, self.n_classes)

    def shapes(self) -> list[tuple]:
        """Shapes of (W, b) pairs in flat-vector order."""
        s = self.layer_sizes
        out = []
        for a, b in zip(s[:-1], s[1:]):
            out += [(a, b), (b,)]
        return out

    @property
    def n_params(self) -> int:
        return sum(math.prod(s) for s in self.shapes())

    def weight_mask(self) -> np.ndarray:
        """True on weight entries, False on biases (penalties skip biases)."""
        parts = [np.full(math.prod(s), len(s) == 2) for s in self.shapes()]
        return np.concatenate(parts)


def logistic(d: int, n_classes: int) -> Arch:
    return Arch("logistic", d, n_classes, ())


def mlp(d: int, n_classes: int, hidden=(128, 64)) -> Arch:
    return Arch("mlp", d, n_classes, tuple(hidden))


@dataclass(frozen=True, eq=False)
class ModelParams:
    arch: Arch
    W: np.ndarray

    def __post_init__(self):
        w = np.array(self.W, dtype=np.float64, copy=True).ravel()
        if w.shape[0] != self.arch.n_params:
            raise ModelError(f"parameter vector has {w.shape[0]} entries, architecture needs {self.arch.n_params}")
        if not np.isfinite(w).all():
            raise ModelError("parameters must be finite")
        w.flags.writeable = False
        object.__setattr__(self, "W", w)

    @property
    def d_params(self) -> int:
        return self.W.shape[0]

    def layers(self, theta=None) -> list[np.ndarray]:
        theta = self.W if theta is None else theta
        return unflatten(self.arch, theta)

    def with_W(self, W) -> "ModelParams":
        return ModelParams(self.arch, W)

    def predict_proba(self, X) -> np.ndarray:
        z = forward(self.arch, self.W, np.asarray(X, dtype=np.float64))[0]
        return softmax(z)

    def predict(self, X) -> np.ndarray:
        z = forward(self.arch, self.W, np.asarray(X, dtype=np.float64))[0]
        return np.argmax(z, axis=1)


def unflatten(arch: Arch, theta) -> list[np.ndarray]:
    out, pos = [], 0
    for s in arch.shapes():
        n = math.prod(s)
        out.append(theta[pos:pos + n].reshape(s))
        pos += n
    return out


def init_model(arch: Arch, seed: int = 0) -> ModelParams:
    """Zero weights for logistic; N(0, 1/fan_in) weights and zero biases for MLP."""
    if arch.kind == "logistic":
        return ModelParams(arch, np.zeros(arch.n_params))
    rng = np.random.default_rng(seed)
    parts = []
    for s in arch.shapes():
        if len(s) == 2:
            parts.append((rng.standard_normal(s) / math.sqrt(s[0])).ravel())
        else:
            parts.append(np.zeros(s))
    return ModelParams(arch, np.concatenate(parts))


# --------------------------------------------------------------------------
# training configuration


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 0.01
    enet_alpha: float = 0.01
    enet_rho: float = 0.5
    prox_mu: float | None = None
    dropout: float = 0.5
    early_stop_patience: int | None = 10
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ModelError("epochs and batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ModelError("learning_rate must be nonnegative")
        if not 0.0 <= self.enet_rho <= 1.0 or self.enet_alpha < 0:
            raise ModelError("elastic net needs alpha >= 0 and rho in [0, 1]")
        if self.prox_mu is not None and self.prox_mu < 0:
            raise ModelError("prox_mu must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must be in [0, 1)")

    @property
    def l2(self) -> float:
        return self.enet_alpha * (1.0 - self.enet_rho)

    @property
    def l1(self) -> float:
        return self.enet_alpha * self.enet_rho

    @property
    def early_stopping(self) -> bool:
        # patience >= epochs can never trigger, so no validation slice is held out
        return self.early_stop_patience is not None and self.early_stop_patience < self.epochs


# --------------------------------------------------------------------------
# forward / backward


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(z, y) -> float:
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(z.shape[0]), y]))


def forward(arch: Arch, theta, X, masks=None):
    """Return (logits, cache). ``masks`` are inverted-dropout multipliers per hidden layer."""
    layers = unflatten(arch, theta)
    acts = [X]
    h = X
    n_layers = len(layers) // 2
    for i in range(n_layers):
        Wi, bi = layers[2 * i], layers[2 * i + 1]
        z = h @ Wi + bi
        if i < n_layers - 1:
            h = np.maximum(z, 0.0)
            if masks is not None:
                h = h * masks[i]
            acts.append(h)
        else:
            return z, (layers, acts)
    raise AssertionError("unreachable")


def _backward(arch, theta, X, y, masks):
    z, (layers, acts) = forward(arch, theta, X, masks)
    m = X.shape[0]
    loss = cross_entropy(z, y)
    g = softmax(z)
    g[np.arange(m), y] -= 1.0
    g /= m
    grads = [None] * len(layers)
    n_layers = len(layers) // 2
    for i in reversed(range(n_layers)):
        grads[2 * i] = acts[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i > 0:
            g = g @ layers[2 * i].T
            g = g * (acts[i] > 0)
            if masks is not None:
                g = g * masks[i - 1]
    return loss, np.concatenate([a.ravel() for a in grads])


def dropout_masks(arch: Arch, m: int, p: float, rng) -> list | None:
    if arch.kind != "mlp" or p <= 0.0:
        return None
    keep = 1.0 - p
    return [(rng.random((m, h)) < keep) / keep for h in arch.hidden]


def _as_xy(batch):
    if isinstance(batch, Dataset):
        return batch.features, batch.labels
    X, y = batch
    return np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.int64)


def penalty(arch: Arch, theta, cfg: TrainConfig, anchor=None) -> float:
    w = theta[arch.weight_mask()]
    pen = cfg.enet_alpha * (0.5 * (1.0 - cfg.enet_rho) * float(w @ w) + cfg.enet_rho * float(np.abs(w).sum()))
    if cfg.prox_mu:
        diff = theta - anchor
        pen += 0.5 * cfg.prox_mu * float(diff @ diff)
    return pen


def loss_and_gradient(m: ModelParams, batch, cfg: TrainConfig, anchor: ModelParams | None = None,
                      dropout_rng=None) -> tuple[float, np.ndarray]:
    """Regularized loss and its (sub)gradient on one batch.

    Loss = mean cross-entropy + alpha * [(1-rho)/2 ||w||^2 + rho ||w||_1]
    over weights (biases unpenalized), plus (mu/2)||theta - anchor||^2
    when ``cfg.prox_mu`` is set. The l1 subgradient at 0 is 0. Dropout is
    applied only when ``dropout_rng`` is given.
    """
    X, y = _as_xy(batch)
    if X.shape[0] == 0:
        raise ModelError("empty batch")
    if X.shape[1] != m.arch.d:
        raise ModelError(f"batch has {X.shape[1]} features, model expects {m.arch.d}")
    if (cfg.prox_mu is not None) != (anchor is not None):
        raise ModelError("an anchor is required exactly when prox_mu is set")
    a = anchor.W if anchor is not None else None
    if a is not None and a.shape != m.W.shape:
        raise ModelError("anchor dimension mismatch")
    masks = dropout_masks(m.arch, X.shape[0], cfg.dropout, dropout_rng) if dropout_rng is not None else None
    ce, grad = _backward(m.arch, m.W, X, y, masks)
    mask = m.arch.weight_mask()
    w = m.W
    grad[mask] += cfg.l2 * w[mask] + cfg.l1 * np.sign(w[mask])
    if cfg.prox_mu:
        grad += cfg.prox_mu * (w - a)
    return ce + penalty(m.arch, w, cfg, a), grad


# --------------------------------------------------------------------------
# local training


@dataclass
class LocalStats:
    losses: list = field(default_factory=list)
    n_samples: int = 0
    epochs_run: int = 0
    val_losses: list = field(default_factory=list)


def _sgd_epoch(arch, theta, X, y, order, cfg, anchor, rng):
    """In-place SGD over one shuffled epoch."""
    if arch.kind == "logistic":
        W, b = unflatten(arch, theta)
        W0, b0 = unflatten(arch, anchor) if anchor is not None else (W, b)
        kernels.softmax_sgd_epoch(W, b, X, y, order, cfg.batch_size, cfg.learning_rate,
                                  cfg.l2, cfg.l1, float(cfg.prox_mu or 0.0),
                                  np.ascontiguousarray(W0), np.ascontiguousarray(b0))
        return
    mask = arch.weight_mask()
    mu = float(cfg.prox_mu or 0.0)
    for start in range(0, order.shape[0], cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        masks = dropout_masks(arch, idx.shape[0], cfg.dropout, rng)
        _, grad = _backward(arch, theta, X[idx], y[idx], masks)
        grad[mask] += cfg.l2 * theta[mask] + cfg.l1 * np.sign(theta[mask])
        if mu:
            grad += mu * (theta - anchor)
        theta -= cfg.learning_rate * grad


def local_train(m: ModelParams, data: Dataset, cfg: TrainConfig) -> tuple[np.ndarray, LocalStats]:
    """Run ``cfg.epochs`` epochs of shuffled minibatch SGD starting from ``m``.

    Returns the update ``W_final - W_initial`` and training statistics.
    With ``prox_mu`` set, the proximal anchor is ``m`` itself (the
    broadcast global model). Early stopping holds out 10% of ``data`` and
    keeps the parameters with the best validation loss.
    """
    if data.n_rows == 0:
        raise ModelError("no training data")
    if data.n_features != m.arch.d:
        raise ModelError(f"data has {data.n_features} features, model expects {m.arch.d}")
    rng = np.random.default_rng(cfg.seed)
    X, y = data.features, data.labels
    X_val = y_val = None
    if cfg.early_stopping and data.n_rows >= 10:
        perm = rng.permutation(data.n_rows)
        n_val = max(1, data.n_rows // 10)
        X_val, y_val = X[perm[:n_val]], y[perm[:n_val]]
        X, y = X[perm[n_val:]], y[perm[n_val:]]
    X = np.ascontiguousarray(X)
    y = np.ascontiguousarray(y)
    theta = np.array(m.W)
    anchor = m.W if cfg.prox_mu else None
    stats = LocalStats(n_samples=int(X.shape[0]))
    best = (math.inf, theta.copy())
    stale = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(X.shape[0]).astype(np.int64)
        _sgd_epoch(m.arch, theta, X, y, order, cfg, anchor, rng)
        stats.epochs_run += 1
        z = forward(m.arch, theta, X)[0]
        stats.losses.append(cross_entropy(z, y) + penalty(m.arch, theta, cfg, anchor))
        if X_val is not None:
            vl = cross_entropy(forward(m.arch, theta, X_val)[0], y_val)
            stats.val_losses.append(vl)
            if vl < best[0]:
                best, stale = (vl, theta.copy()), 0
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    theta = best[1]
                    break
    if not np.isfinite(theta).all():
        raise ModelError("training diverged (non-finite parameters)")
    return theta - m.W, stats


def train_centralized(arch: Arch, data: Dataset, cfg: TrainConfig, seed: int = 0) -> ModelParams:
    m = init_model(arch, seed)
    delta, _ = local_train(m, data, cfg)
    return m.with_W(m.W + delta)


# --------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    precision: tuple
    recall: tuple
    f1: tuple
    kappa: float
    confusion: np.ndarray
    mcc: float | None = None
    roc_auc: float | None = None

    def to_dict(self):
        return {
            "accuracy": self.accuracy, "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall, "macro_f1": self.macro_f1,
            "precision": list(self.precision), "recall": list(self.recall), "f1": list(self.f1),
            "kappa": self.kappa, "mcc": self.mcc, "roc_auc": self.roc_auc,
            "confusion": self.confusion.tolist(),
        }


def roc_auc(labels, scores) -> float:
    """Probability that a positive outranks a negative, ties counting one half."""
    from scipy.stats import rankdata

    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def mcc_binary(tp, tn, fp, fn) -> float:
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if den == 0:
        return 0.0
    return float((tp * tn - fp * fn) / math.sqrt(den))


def metrics_from_predictions(y_true, y_pred, n_classes: int, scores=None) -> Metrics:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise ModelError("cannot evaluate on an empty set")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    n = cm.sum()
    tp = np.diag(cm).astype(np.float64)
    col = cm.sum(axis=0).astype(np.float64)
    row = cm.sum(axis=1).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        prec = np.where(col > 0, tp / col, 0.0)
        rec = np.where(row > 0, tp / row, 0.0)
        f1 = np.where(prec + rec > 0, 2 * prec * rec / (prec + rec), 0.0)
    po = tp.sum() / n
    pe = float((row * col).sum()) / float(n * n)
    kappa = 1.0 if pe == 1.0 else float((po - pe) / (1.0 - pe))
    mcc = auc = None
    if n_classes == 2:
        mcc = mcc_binary(int(cm[1, 1]), int(cm[0, 0]), int(cm[0, 1]), int(cm[1, 0]))
        if scores is not None:
            auc = roc_auc(y_true == 1, scores)
    return Metrics(float(po), float(prec.mean()), float(rec.mean()), float(f1.mean()),
                   tuple(prec.tolist()), tuple(rec.tolist()), tuple(f1.tolist()), kappa, cm, mcc, auc)


def evaluate(m: ModelParams, ds: Dataset) -> Metrics:
    """Classification metrics; MCC and ROC-AUC only for two classes."""
    if ds.n_rows == 0:
        raise ModelError("cannot evaluate on an empty dataset")
    proba = m.predict_proba(ds.features)
    pred = np.argmax(proba, axis=1)
    scores = proba[:, 1] if m.arch.n_classes == 2 else None
    return metrics_from_predictions(ds.labels, pred, m.arch.n_classes, scores)


# --------------------------------------------------------------------------
# cross-validation


@dataclass(frozen=True)
class CVReport:
    fold_scores: tuple  # one tuple of per-fold values per seed
    seed_means: tuple
    sigma_cv: tuple  # per seed, K-1 denominator
    mean: float
    ci95: tuple

    @property
    def ci_half_width(self) -> float:
        return (self.ci95[1] - self.ci95[0]) / 2.0


def stratified_folds(labels, k: int, seed: int) -> list[np.ndarray]:
    labels = np.asarray(labels)
    counts = np.bincount(labels)
    if (counts[counts > 0] < k).any():
        raise ModelError(f"every class needs at least k={k} rows for stratified folds")
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    offset = 0
    for c in np.flatnonzero(counts):
        idx = rng.permutation(np.flatnonzero(labels == c))
        for i, r in enumerate(idx):
            folds[(i + offset) % k].append(r)
        offset += len(idx)
    return [np.sort(np.asarray(f, dtype=np.int64)) for f in folds]


def ci95(values) -> tuple[float, float]:
    """mean +/- 1.96 * s / sqrt(n), s the sample standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    mean = float(v.mean())
    if v.size < 2:
        return mean, mean
    half = 1.96 * float(v.std(ddof=1)) / math.sqrt(v.size)
    return mean - half, mean + half


def kfold_cv(model, ds: Dataset, k: int = 5, seeds: Sequence[int] = (0,),
             cfg: TrainConfig | None = None, metric: str = "accuracy") -> CVReport:
    """Stratified k-fold CV repeated over ``seeds``.

    ``model`` is an :class:`Arch` (trained with ``cfg`` via
    :func:`train_centralized`) or a callable ``fit(train_ds, seed)``
    returning an object with ``predict``.
    """
    cfg = cfg or TrainConfig()
    if isinstance(model, Arch):
        arch = model

        def fit(train, seed):
            return train_centralized(arch, train, replace(cfg, seed=seed), seed)
    else:
        fit: Callable = model
    per_seed, means, sigmas = [], [], []
    for seed in seeds:
        folds = stratified_folds(ds.labels, k, seed)
        scores = []
        for i, val in enumerate(folds):
            train_idx = np.concatenate([f for j, f in enumerate(folds) if j != i])
            predictor = fit(ds.subset(train_idx), seed)
            pred = np.asarray(predictor.predict(ds.features[val]))
            met = metrics_from_predictions(ds.labels[val], pred, ds.n_classes)
            scores.append(float(getattr(met, metric)))
        per_seed.append(tuple(scores))
        means.append(float(np.mean(scores)))
        sigmas.append(float(np.std(scores, ddof=1)) if k > 1 else 0.0)
    return CVReport(tuple(per_seed), tuple(means), tuple(sigmas), float(np.mean(means)), ci95(means))


# --------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"EDCK"
_CKPT_VERSION = 1
_KINDS = {"logistic": 0, "mlp": 1}


def save_checkpoint(m: ModelParams, path) -> None:
    """Versioned header followed by the flat parameters as little-endian float64."""
    a = m.arch
    head = struct.pack("<4sBBIIB", _CKPT_MAGIC, _CKPT_VERSION, _KINDS[a.kind], a.d, a.n_classes, len(a.hidden))
    head += struct.pack(f"<{len(a.hidden)}I", *a.hidden) + struct.pack("<Q", m.d_params)
    Path(path).write_bytes(head + m.W.astype("<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    magic, ver, kind, d, L, nh = struct.unpack_from("<4sBBIIB", raw, 0)
    if magic != _CKPT_MAGIC or ver != _CKPT_VERSION:
        raise ModelError("not a supported checkpoint")
    pos = struct.calcsize("<4sBBIIB")
    hidden = struct.unpack_from(f"<{nh}I", raw, pos)
    pos += 4 * nh
    (n,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    W = np.frombuffer(raw, dtype="<f8", count=n, offset=pos)
    kind_name = {v: k for k, v in _KINDS.items()}[kind]
    return ModelParams(Arch(kind_name, d, L, tuple(hidden)), W.astype(np.float64))
