"""Differential-privacy sanitization of updates and a gradient-inversion
attack harness (iDLG-style label recovery plus gradient matching)."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import model as mdl
from .smartify import BinDelta, binarize

PSNR_PERFECT = math.inf
# Averages treat anything beyond float64 round-off as this ceiling so that
# one exact reconstruction does not turn a mean into inf.
PSNR_CAP_DB = 100.0


class PrivacyError(ValueError):
    pass


# --------------------------------------------------------------------------
# differential privacy


@dataclass(frozen=True)
class DPConfig:
    """Clip-and-noise parameters. ``epsilon``/``delta`` are the claimed
    guarantee, recorded as metadata only (no accountant is run)."""

    clip_C: float = 0.1
    sigma: float = 0.01
    epsilon: float = 1.0
    delta: float = 1e-5

    def __post_init__(self):
        if not self.clip_C > 0:
            raise PrivacyError(f"clip_C must be > 0, got {self.clip_C}")
        if not self.sigma >= 0:
            raise PrivacyError(f"sigma must be >= 0, got {self.sigma}")


def clip(delta, C: float) -> np.ndarray:
    """Scale ``delta`` onto the l2 ball of radius C (unchanged if inside)."""
    delta = np.asarray(delta, dtype=np.float64)
    norm = float(np.linalg.norm(delta))
    scale = max(1.0, norm / C)
    out = delta / scale
    # guard against the last ulp of rounding pushing the norm past C
    n2 = float(np.linalg.norm(out))
    if n2 > C:
        out = out * (C / n2)
        while float(np.linalg.norm(out)) > C:
            out = out * (1.0 - 1e-15)
    return out


def dp_sanitize(delta, cfg: DPConfig, seed) -> np.ndarray:
    """Clip to ``cfg.clip_C`` then add N(0, (sigma*C)^2 I)."""
    delta = np.asarray(delta, dtype=np.float64)
    if not np.isfinite(delta).all():
        raise PrivacyError("update contains non-finite values")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    clipped = clip(delta, cfg.clip_C)
    if cfg.sigma == 0:
        return clipped
    return clipped + rng.normal(0.0, cfg.sigma * cfg.clip_C, size=delta.shape)


# --------------------------------------------------------------------------
# attack


def psnr(x_true, x_rec, peak: float) -> float:
    """10 log10(peak^2 / MSE); ``PSNR_PERFECT`` (inf) when MSE is 0."""
    a = np.asarray(x_true, dtype=np.float64).ravel()
    b = np.asarray(x_rec, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise PrivacyError(f"length mismatch: {a.size} vs {b.size}")
    if not peak > 0:
        raise PrivacyError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_PERFECT
    return 10.0 * math.log10(peak * peak / mse)


def mean_psnr(values, cap: float = PSNR_CAP_DB) -> float:
    return float(np.mean(np.minimum(np.asarray(values, dtype=np.float64), cap)))


def feature_peak(x_true) -> float:
    x = np.asarray(x_true, dtype=np.float64)
    rng = float(x.max() - x.min())
    return rng if rng > 0 else 1.0


@dataclass
class InversionReport:
    psnr_db: float
    label_recovery_rate: float
    iterations: int
    residual: float
    observed_kind: str = "full"

    def to_json(self) -> str:
        d = asdict(self)
        if math.isinf(d["psnr_db"]):
            d["psnr_db"] = "inf"
        return json.dumps(d, sort_keys=True)


def sample_gradient(m: mdl.ModelParams, X, y) -> np.ndarray:
    """Unregularized mean cross-entropy gradient (what an attacker observes)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    return mdl._backward(m.arch, m.W, X, y, None)[1]


def _last_bias(m: mdl.ModelParams, g) -> np.ndarray:
    return np.asarray(g)[-m.arch.n_classes:]


def recover_labels_full(m: mdl.ModelParams, observed, batch_size: int = 1) -> np.ndarray:
    """iDLG label recovery from the output-bias gradient.

    For one sample the bias gradient is p - e_y, negative only at y. For
    larger batches the ``batch_size`` most negative entries are returned
    (a heuristic, exact only when labels are distinct and dominate).
    """
    gb = _last_bias(m, observed)
    order = np.argsort(gb, kind="stable")
    if batch_size <= m.arch.n_classes:
        return np.sort(order[:batch_size])
    return np.resize(order, batch_size)


def recover_labels_binarized(m: mdl.ModelParams, signs, batch_size: int = 1) -> np.ndarray:
    """Label guess from a +-1 pattern.

    For a single-sample logistic gradient, the weight column of the true
    class has the opposite sign pattern to the other columns and the bias
    bit of the true class is -1. Each class is scored by how much its
    column disagrees with the mean of the other columns plus one point
    for a -1 bias bit.
    """
    L = m.arch.n_classes
    s = np.asarray(signs, dtype=np.float64)
    bias = s[-L:]
    score = (bias < 0).astype(np.float64)
    if m.arch.kind == "logistic":
        Wcols = s[:-L].reshape(m.arch.d, L)
        total = Wcols.sum(axis=1, keepdims=True)
        others = (total - Wcols) / (L - 1)
        score = score + np.mean(Wcols * others < 0, axis=0)
    order = np.argsort(-score, kind="stable")
    return np.sort(order[:batch_size]) if batch_size <= L else np.resize(order, batch_size)


def _logistic_match_grad(m: mdl.ModelParams, Xh, y, A):
    """d f / d Xh for f depending on G(Xh) with dF/dG = A (logistic model).

    G_W = Xh^T R / n, G_b = mean(R) where R = P - onehot(y).
    """
    W, b = m.layers()
    n = Xh.shape[0]
    L = m.arch.n_classes
    A_W = A[:-L].reshape(W.shape)
    A_b = A[-L:]
    P = mdl.softmax(Xh @ W + b)
    R = P.copy()
    R[np.arange(n), y] -= 1.0
    # direct term through Xh^T
    g = R @ A_W.T
    # term through R: v_i = A_W^T x_i + A_b, then J_i v_i with J = diag(p) - p p^T
    V = Xh @ A_W + A_b
    JV = P * V - P * np.sum(P * V, axis=1, keepdims=True)
    g += JV @ W.T
    return g / n


def _fd_grad(fun, Xh, h=1e-5):
    g = np.zeros_like(Xh)
    it = np.nditer(Xh, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        e = np.zeros_like(Xh)
        e[i] = h
        g[i] = (fun(Xh + e) - fun(Xh - e)) / (2 * h)
    return g


def _objective(m, y, observed_vec, binary: bool):
    D = observed_vec.size
    t = observed_vec / math.sqrt(D) if binary else observed_vec

    def value_and_dG(Xh):
        G = mdl._backward(m.arch, m.W, Xh, y, None)[1]
        if binary:
            nG = float(np.linalg.norm(G))
            if nG == 0:
                return float(t @ t) + 1.0, np.zeros_like(G)
            u = G / nG
            r = u - t
            # d/dG ||u - t||^2 = 2 (I - u u^T) r / ||G||
            dG = 2.0 * (r - u * float(u @ r)) / nG
            return float(r @ r), dG
        r = G - t
        return float(r @ r), 2.0 * r

    return value_and_dG


def invert_gradient(observed, m: mdl.ModelParams, true_batch_shape, steps: int = 500, seed: int = 0,
                    lr: float = 0.5, x_true=None, y_true=None):
    """Gradient-matching reconstruction of a training batch.

    ``observed`` is a full-precision gradient (array of length d_params)
    or a :class:`BinDelta`. Labels come from :func:`recover_labels_full`
    or :func:`recover_labels_binarized`; the dummy inputs are then fitted
    by gradient descent with a cosine-annealed step. For the binarized
    case the normalized dummy gradient is matched to signs / sqrt(D).
    Logistic models use the analytic input gradient, MLPs use central
    differences. When ``x_true``/``y_true`` are given the report carries
    PSNR and label recovery.

    Returns (reconstructed inputs, recovered labels, InversionReport).
    """
    n, d = true_batch_shape
    if d != m.arch.d:
        raise PrivacyError(f"batch has {d} features, model expects {m.arch.d}")
    binary = isinstance(observed, BinDelta)
    obs = observed.unpack() if binary else np.asarray(observed, dtype=np.float64).ravel()
    if obs.size != m.d_params:
        raise PrivacyError(f"observed update has {obs.size} entries, model has {m.d_params}")
    if binary:
        y_hat = recover_labels_binarized(m, obs, n)
    else:
        y_hat = recover_labels_full(m, obs, n)
    rng = np.random.default_rng(seed)
    Xh = rng.standard_normal((n, d))
    f = _objective(m, y_hat, obs, binary)
    residual = math.inf
    for t in range(steps):
        step = lr * 0.5 * (1.0 + math.cos(math.pi * t / steps))
        residual, dG = f(Xh)
        if m.arch.kind == "logistic":
            g = _logistic_match_grad(m, Xh, y_hat, dG)
        else:
            g = _fd_grad(lambda Z: f(Z)[0], Xh)
        gn = float(np.linalg.norm(g))
        if not np.isfinite(gn):
            break
        # plain descent; the step length is capped at ``step`` for stability
        Xh = Xh - step * g / max(1.0, gn)
    residual = f(Xh)[0]
    p_db, rec = math.nan, math.nan
    if x_true is not None:
        xt = np.asarray(x_true, dtype=np.float64).reshape(n, d)
        p_db = psnr(xt, Xh, feature_peak(xt))
    if y_true is not None:
        rec = float(np.mean(np.sort(np.atleast_1d(y_true)) == np.sort(y_hat)))
    report = InversionReport(p_db, rec, steps, residual, "binarized" if binary else "full")
    return Xh, y_hat, report


def paired_attack(m: mdl.ModelParams, x, y, steps: int = 500, seed: int = 0,
                  mode: str = "signed_median") -> tuple[InversionReport, InversionReport]:
    """Attack the same sample through its full-precision and binarized gradient."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    g = sample_gradient(m, x, y)
    _, _, full = invert_gradient(g, m, x.shape, steps, seed, x_true=x, y_true=y)
    _, _, binr = invert_gradient(binarize(g, mode), m, x.shape, steps, seed, x_true=x, y_true=y)
    return full, binr


def aggregate_label_recovery(n_trials: int = 100, n_clients: int = 10, n_classes: int = 7, d: int = 10,
                             batch_size: int = 32, seed: int = 0, mode: str = "signed_median") -> float:
    """Monte-Carlo label recovery against a sum of binarized client gradients.

    Each client computes the gradient of a shared random logistic model on
    a local batch with uniformly drawn labels and binarizes it. The
    attacker sees only the integer sum of the +-1 vectors and guesses the
    target client's label as the class with the most negative aggregated
    output-bias entry. Returns the mean fraction of the target client's
    records whose label equals the guess.
    """
    rng = np.random.default_rng(seed)
    arch = mdl.logistic(d, n_classes)
    hits = []
    for _ in range(n_trials):
        m = mdl.ModelParams(arch, 0.1 * rng.standard_normal(arch.n_params))
        centers = rng.standard_normal((n_classes, d))
        agg = np.zeros(arch.n_params)
        target_labels = None
        for k in range(n_clients):
            y = rng.integers(0, n_classes, size=batch_size)
            X = centers[y] + rng.standard_normal((batch_size, d))
            agg += binarize(sample_gradient(m, X, y), mode).unpack()
            if k == 0:
                target_labels = y
        guess = int(np.argmin(agg[-n_classes:]))
        hits.append(float(np.mean(target_labels == guess)))
    return float(np.mean(hits))
