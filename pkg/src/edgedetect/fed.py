"""Federated orchestration: partitioning, participant selection, one
round of FedAvg / FedProx / signSGD / EdgeDetect, momentum global
updates, and experiment-level accounting of convergence and bytes."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import crypto, smartify, transport
from . import model as mdl
from .dataio import Dataset, apportion
from .privacy import DPConfig, dp_sanitize
from .transport import Message, MsgType

ALGORITHMS = ("fedavg", "fedprox", "signsgd", "edgedetect")
STRATEGIES = ("iid", "dirichlet", "label_skew")
MB = 1e6
# full-precision EdgeDetect updates travel as int32 fixed point
FIXED_POINT_FRAC_BITS = 16
FIXED_POINT_BOUND = 2 ** 31 - 1


class FedError(ValueError):
    pass


# --------------------------------------------------------------------------
# partitioning


@dataclass(frozen=True)
class PartitionPlan:
    strategy: str = "iid"
    K: int = 10
    seed: int = 0
    alpha: float = 0.5
    dominant_classes: tuple = (2, 3)
    dominance: float = 0.7
    max_retries: int = 50

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise FedError(f"unknown partition strategy {self.strategy!r}")
        if self.K < 1:
            raise FedError("K must be >= 1")
        if self.strategy == "dirichlet" and not self.alpha > 0:
            raise FedError("Dirichlet alpha must be > 0")
        if not 0 < self.dominance <= 1:
            raise FedError("dominance must lie in (0, 1]")

    def describe(self) -> str:
        if self.strategy == "iid":
            return "IID"
        if self.strategy == "dirichlet":
            return f"Dir(alpha={self.alpha:g})"
        return f"LabelSkew({self.dominance:g})"


def _iid(labels, K, rng):
    perm = rng.permutation(labels.shape[0])
    return [np.sort(p) for p in np.array_split(perm, K)]


def _dirichlet(labels, K, alpha, rng):
    buckets = [[] for _ in range(K)]
    for c in np.unique(labels):
        rows = rng.permutation(np.flatnonzero(labels == c))
        shares = rng.dirichlet(np.full(K, alpha))
        counts = apportion(rows.shape[0], shares)
        pos = 0
        for k, cnt in enumerate(counts):
            buckets[k].append(rows[pos:pos + cnt])
            pos += cnt
    return [np.sort(np.concatenate(b)) for b in buckets]


def _label_skew(labels, K, plan, rng):
    classes = np.unique(labels)
    L = classes.shape[0]
    lo, hi = min(plan.dominant_classes), max(plan.dominant_classes)
    n_dom = rng.integers(lo, hi + 1, size=K)
    n_dom = np.minimum(n_dom, L)
    # deal dominant classes round-robin from a shuffled cycle so coverage is even
    cycle = rng.permutation(classes)
    dom, pos = [], 0
    for k in range(K):
        picks = []
        while len(picks) < n_dom[k]:
            c = cycle[pos % L]
            pos += 1
            if c not in picks:
                picks.append(c)
        dom.append(set(int(c) for c in picks))
    holders = {int(c): [k for k in range(K) if int(c) in dom[k]] for c in classes}
    assigned = [[] for _ in range(K)]
    filler = []
    fill_frac = 1.0 - plan.dominance
    for c in classes:
        rows = rng.permutation(np.flatnonzero(labels == c))
        hs = holders[int(c)]
        if not hs:
            filler.extend((int(c), r) for r in rows)
            continue
        n_fill = int(math.floor(fill_frac * rows.shape[0]))
        filler.extend((int(c), r) for r in rows[:n_fill])
        counts = apportion(rows.shape[0] - n_fill, np.ones(len(hs)))
        p = n_fill
        for k, cnt in zip(hs, counts):
            assigned[k].extend(rows[p:p + cnt].tolist())
            p += cnt
    dom_count = np.array([len(a) for a in assigned], dtype=np.int64)
    cap = np.floor(dom_count * fill_frac / plan.dominance + 1e-9).astype(np.int64)
    order = rng.permutation(len(filler))
    for i in order:
        c, r = filler[i]
        ok = [k for k in range(K) if c not in dom[k] and cap[k] > 0]
        if ok:
            k = ok[int(rng.integers(len(ok)))]
            cap[k] -= 1
        else:
            # Over capacity. Extra rows go to a holder of the class (raising its
            # dominance share) or, for classes nobody dominates, past capacity
            # to a non-holder: every row must be assigned.
            hs = holders[c] or [k for k in range(K) if c not in dom[k]] or list(range(K))
            k = hs[int(rng.integers(len(hs)))]
        assigned[k].append(int(r))
    return [np.sort(np.asarray(a, dtype=np.int64)) for a in assigned]


def partition_indices(labels, plan: PartitionPlan) -> list[np.ndarray]:
    labels = np.asarray(labels)
    if labels.shape[0] < plan.K:
        raise FedError(f"{labels.shape[0]} rows cannot fill {plan.K} clients")
    rng = np.random.default_rng(plan.seed)
    for _ in range(plan.max_retries):
        if plan.strategy == "iid":
            parts = _iid(labels, plan.K, rng)
        elif plan.strategy == "dirichlet":
            parts = _dirichlet(labels, plan.K, plan.alpha, rng)
        else:
            parts = _label_skew(labels, plan.K, plan, rng)
        if all(p.shape[0] > 0 for p in parts):
            return parts
    raise FedError(f"a client stayed empty after {plan.max_retries} resampling attempts")


def partition(ds: Dataset, plan: PartitionPlan) -> list[Dataset]:
    return [ds.subset(idx) for idx in partition_indices(ds.labels, plan)]


def label_entropy(ds: Dataset) -> float:
    p = ds.class_counts() / max(1, ds.n_rows)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def select_participants(K: int, C_rate: float, r: int, seed: int) -> np.ndarray:
    """max(1, round(C_rate * K)) distinct clients, uniform, fixed per (seed, r)."""
    if not 0 < C_rate <= 1:
        raise FedError(f"participation rate must lie in (0, 1], got {C_rate}")
    m = max(1, int(math.floor(C_rate * K + 0.5)))
    rng = np.random.default_rng([seed, r])
    return np.sort(rng.choice(K, size=m, replace=False))


# --------------------------------------------------------------------------
# configuration and state


@dataclass(frozen=True)
class FedConfig:
    algorithm: str = "edgedetect"
    K: int = 10
    participation: float = 1.0
    rounds_max: int = 100
    global_step: float = 0.01
    momentum: float = 0.9
    train: mdl.TrainConfig = field(default_factory=mdl.TrainConfig)
    prox_mu: float = 0.01
    mode: str = "signed_median"
    smartify: bool = True
    encrypt: bool = True
    batch_crypto: bool = True
    key_bits: int = 2048
    dp: DPConfig | None = None
    targets: tuple = (0.95, 0.98)
    stop_at_target: bool = True

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise FedError(f"unknown algorithm {self.algorithm!r}")
        if not 0 < self.participation <= 1:
            raise FedError("participation must lie in (0, 1]")
        if not self.global_step > 0:
            raise FedError("global_step must be > 0")
        if not 0 <= self.momentum < 1:
            raise FedError("momentum must lie in [0, 1)")
        if self.mode not in smartify.MODES:
            raise FedError(f"unknown binarization mode {self.mode!r}")
        if self.rounds_max < 0:
            raise FedError("rounds_max must be >= 0")

    @property
    def binarized(self) -> bool:
        return self.algorithm == "signsgd" or (self.algorithm == "edgedetect" and self.smartify)

    @property
    def fixed_point(self) -> bool:
        return self.algorithm == "edgedetect" and not self.smartify

    @property
    def encrypted(self) -> bool:
        return self.algorithm == "edgedetect" and self.encrypt

    def local_train_config(self) -> mdl.TrainConfig:
        if self.algorithm == "fedprox":
            return replace(self.train, prox_mu=self.prox_mu)
        return replace(self.train, prox_mu=None)

    def logical_bits_per_client(self, d_params: int) -> int:
        return d_params if self.binarized else 32 * d_params

    def to_dict(self) -> dict:
        d = asdict(self)
        d["targets"] = list(self.targets)
        return d


@dataclass(frozen=True)
class RoundStats:
    round: int
    participants: tuple
    accuracy: float
    macro_f1: float
    alignment: float
    uplink_logical_bits: int
    uplink_wire_bytes: int
    cumulative_logical_bits: int
    cumulative_wire_bytes: int
    wall_time: float = 0.0

    @property
    def uplink_logical_bytes(self) -> float:
        return self.uplink_logical_bits / 8

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        d["participants"] = list(self.participants)
        d["uplink_logical_bytes"] = self.uplink_logical_bytes
        if not timing:
            d.pop("wall_time")
        return d


@dataclass
class FedState:
    model: mdl.ModelParams
    prev_W: np.ndarray
    clients: list
    test: Dataset
    seed: int
    round: int = 0
    keypair: crypto.PaillierKeypair | None = None
    encoding: crypto.SignedEncoding | None = None
    nonces: crypto.NonceSource | None = None
    cum_logical_bits: int = 0
    cum_wire_bytes: int = 0
    key_frame: bytes = b""


def init_state(cfg: FedConfig, arch: mdl.Arch, clients: Sequence[Dataset], test: Dataset, seed: int = 0,
               keypair: crypto.PaillierKeypair | None = None) -> FedState:
    if len(clients) != cfg.K:
        raise FedError(f"config expects K={cfg.K} clients, got {len(clients)}")
    m = mdl.init_model(arch, seed)
    st = FedState(m, np.array(m.W), list(clients), test, seed)
    if cfg.encrypted:
        st.keypair = keypair or crypto.keygen(cfg.key_bits, seed=seed)
        bound = FIXED_POINT_BOUND if cfg.fixed_point else 1
        st.encoding = crypto.SignedEncoding.create(cfg.K, st.keypair.public.bits, bound, cfg.batch_crypto)
        st.encoding.check(st.keypair.public.bits)
        # encryption nonces come from their own stream so that toggling
        # encryption never perturbs training randomness
        st.nonces = crypto.NonceSource(seed + 0x5EED)
        st.key_frame = transport.encode(Message(MsgType.KEY_BCAST, 0, 0, st.keypair.public.to_bytes()))
    return st


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def global_update_momentum(W, delta_agg, alpha_g: float, mu_m: float, W_prev) -> np.ndarray:
    """W' = W + alpha_g * delta_agg + mu_m * (W - W_prev)."""
    W = np.asarray(W, dtype=np.float64)
    delta_agg = np.asarray(delta_agg, dtype=np.float64)
    W_prev = np.asarray(W_prev, dtype=np.float64)
    if not (W.shape == delta_agg.shape == W_prev.shape):
        raise FedError(f"shape mismatch: {W.shape}, {delta_agg.shape}, {W_prev.shape}")
    return W + alpha_g * delta_agg + mu_m * (W - W_prev)


# --------------------------------------------------------------------------
# one round


def quantize(delta) -> np.ndarray:
    q = np.rint(np.asarray(delta, dtype=np.float64) * 2.0 ** FIXED_POINT_FRAC_BITS)
    return np.clip(q, -FIXED_POINT_BOUND, FIXED_POINT_BOUND).astype(np.int64)


def client_update(state: FedState, cfg: FedConfig, k: int, r: int) -> tuple[Message, float]:
    """Phases 1-3 on client ``k``: train, compress/sanitize, encode the uplink."""
    tcfg = replace(cfg.local_train_config(), seed=derive_seed(state.seed, r, k, 1))
    delta, _ = mdl.local_train(state.model, state.clients[k], tcfg)
    if cfg.algorithm in ("fedavg", "fedprox"):
        return Message(MsgType.UPDATE_FULL, r, k, transport.float_payload(delta)), math.nan
    if cfg.algorithm == "edgedetect" and cfg.dp is not None:
        delta = dp_sanitize(delta, cfg.dp, derive_seed(state.seed, r, k, 2))
    if cfg.fixed_point:
        q = quantize(delta)
        if cfg.encrypted:
            cts = crypto.encrypt_vector(state.keypair.public, q, state.encoding, state.nonces)
            return Message(MsgType.UPDATE_ENC, r, k, crypto.ciphertexts_to_bytes(cts)), math.nan
        return Message(MsgType.UPDATE_FULL, r, k, q.astype("<i4").tobytes()), math.nan
    mode = "zero" if cfg.algorithm == "signsgd" else cfg.mode
    bd = smartify.binarize(delta, mode)
    align = smartify.cosine_alignment(bd, delta) if np.any(delta) else math.nan
    if cfg.encrypted:
        signs = bd.unpack().astype(np.int64)
        cts = crypto.encrypt_vector(state.keypair.public, signs, state.encoding, state.nonces)
        return Message(MsgType.UPDATE_ENC, r, k, crypto.ciphertexts_to_bytes(cts)), align
    return Message(MsgType.UPDATE_BIN, r, k, bd.to_bytes()), align


def aggregate(state: FedState, cfg: FedConfig, frames: Sequence[bytes]) -> np.ndarray:
    """Phase 4 server side: decode uplink frames and return Delta_agg."""
    d = state.model.d_params
    msgs = [transport.decode(f) for f in frames]
    if cfg.algorithm in ("fedavg", "fedprox"):
        weights = np.array([state.clients[m.client_id].n_rows for m in msgs], dtype=np.float64)
        deltas = np.stack([transport.float_from_payload(m.payload) for m in msgs])
        return weights @ deltas / weights.sum()
    if cfg.encrypted:
        pk = state.keypair.public
        agg = crypto.SecureAggregator(pk, state.encoding, d, len(msgs))
        for m in msgs:
            if m.msg_type != MsgType.UPDATE_ENC:
                raise FedError(f"expected UPDATE_ENC, got {m.msg_type.name}")
            agg.add(crypto.ciphertexts_from_bytes(m.payload, pk))
        sums = agg.finalize(state.keypair.secret)
    elif cfg.fixed_point:
        sums = np.sum([np.frombuffer(m.payload, dtype="<i4").astype(np.int64) for m in msgs], axis=0)
    else:
        bins = [smartify.BinDelta.from_bytes(m.payload) for m in msgs]
        sums = smartify.sum_signs(bins)
    if cfg.fixed_point:
        return sums.astype(np.float64) / (len(msgs) * 2.0 ** FIXED_POINT_FRAC_BITS)
    return sums.astype(np.float64) / len(msgs)


def apply_update(state: FedState, cfg: FedConfig, delta_agg) -> np.ndarray:
    W = state.model.W
    if cfg.algorithm in ("fedavg", "fedprox") or cfg.fixed_point:
        return W + delta_agg
    if cfg.algorithm == "edgedetect" and cfg.momentum > 0:
        return global_update_momentum(W, delta_agg, cfg.global_step, cfg.momentum, state.prev_W)
    return W + cfg.global_step * delta_agg


def run_round(state: FedState, cfg: FedConfig) -> tuple[FedState, RoundStats]:
    """Advance ``state`` by one communication round (mutates and returns it)."""
    t0 = time.perf_counter()
    r = state.round + 1
    parts = select_participants(cfg.K, cfg.participation, r, state.seed)
    frames, aligns = [], []
    for k in parts:
        msg, a = client_update(state, cfg, int(k), r)
        frames.append(transport.encode(msg))
        aligns.append(a)
    delta_agg = aggregate(state, cfg, frames)
    W_new = apply_update(state, cfg, delta_agg)
    state.prev_W = np.array(state.model.W)
    state.model = state.model.with_W(W_new)
    state.round = r
    logical = cfg.logical_bits_per_client(state.model.d_params) * len(parts)
    wire = sum(len(f) for f in frames)
    state.cum_logical_bits += logical
    state.cum_wire_bytes += wire
    met = mdl.evaluate(state.model, state.test)
    finite = [a for a in aligns if not math.isnan(a)]
    stats = RoundStats(r, tuple(int(k) for k in parts), met.accuracy, met.macro_f1,
                       float(np.mean(finite)) if finite else math.nan,
                       logical, wire, state.cum_logical_bits, state.cum_wire_bytes,
                       time.perf_counter() - t0)
    return state, stats


# --------------------------------------------------------------------------
# experiments


@dataclass
class SeedRun:
    seed: int
    reference_accuracy: float
    initial_accuracy: float
    rounds: list
    r95: int | None
    r98: int | None
    final_accuracy: float
    final_f1: float
    comm_per_round_MB: float
    final_W: np.ndarray | None = None

    @property
    def total_GB(self) -> float:
        """Per-client bandwidth until the 98% target (nan if never reached)."""
        return math.nan if self.r98 is None else self.comm_per_round_MB * self.r98 / 1000.0


def first_reaching(accs, target: float) -> int | None:
    """First communication round (1-based) whose accuracy reaches ``target``.

    The untrained initial model never counts, even when predicting the
    majority class already clears the target.
    """
    for i, a in enumerate(accs, start=1):
        if a >= target:
            return i
    return None


def run_seed(cfg: FedConfig, arch: mdl.Arch, train: Dataset, test: Dataset, plan: PartitionPlan, seed: int,
             reference_accuracy: float | None = None, keypair=None, on_round=None) -> SeedRun:
    if reference_accuracy is None:
        ref = mdl.train_centralized(arch, train, replace(cfg.train, seed=seed, prox_mu=None), seed)
        reference_accuracy = mdl.evaluate(ref, test).accuracy
    clients = partition(train, replace(plan, K=cfg.K, seed=derive_seed(plan.seed, seed)))
    state = init_state(cfg, arch, clients, test, seed, keypair)
    init_acc = mdl.evaluate(state.model, test).accuracy
    t95, t98 = (t * reference_accuracy for t in cfg.targets)
    rounds = []
    r98 = None
    while state.round < cfg.rounds_max and not (cfg.stop_at_target and r98 is not None):
        state, st = run_round(state, cfg)
        rounds.append(st)
        if on_round is not None:
            on_round(seed, st)
        r98 = first_reaching([s.accuracy for s in rounds], t98)
    accs = [s.accuracy for s in rounds]
    final = mdl.evaluate(state.model, test)
    bits = cfg.logical_bits_per_client(arch.n_params)
    return SeedRun(seed, reference_accuracy, init_acc, rounds,
                   first_reaching(accs, t95), r98,
                   final.accuracy, final.macro_f1, bits / 8 / MB, np.array(state.model.W))


def _mean_std(values) -> tuple[float, float]:
    v = [x for x in values if x is not None and not (isinstance(x, float) and math.isnan(x))]
    if not v:
        return math.nan, math.nan
    return float(np.mean(v)), float(np.std(v))


def _median(values) -> float:
    v = [x for x in values if x is not None]
    return float(np.median(v)) if v else math.nan


@dataclass
class ExperimentReport:
    config: dict
    distribution: str
    seeds: list
    runs: list

    def summary(self) -> dict:
        out = {}
        for name, vals in (("acc", [r.final_accuracy for r in self.runs]),
                           ("f1", [r.final_f1 for r in self.runs]),
                           ("r95", [r.r95 for r in self.runs]),
                           ("r98", [r.r98 for r in self.runs]),
                           ("total_GB", [r.total_GB for r in self.runs])):
            out[f"{name}_mean"], out[f"{name}_std"] = _mean_std(vals)
        out["r95_median"] = _median([r.r95 for r in self.runs])
        out["r98_median"] = _median([r.r98 for r in self.runs])
        out["r98_reached"] = sum(r.r98 is not None for r in self.runs)
        out["comm_per_round_MB"] = self.runs[0].comm_per_round_MB if self.runs else math.nan
        return out

    def table_row(self) -> dict:
        s = self.summary()
        return {
            "algorithm": self.config["algorithm"],
            "K": self.config["K"],
            "distribution": self.distribution,
            "R95": s["r95_mean"],
            "R98": s["r98_mean"],
            "acc": s["acc_mean"],
            "comm_per_round_MB": s["comm_per_round_MB"],
            "total_GB": s["total_GB_mean"],
        }


TABLE_COLUMNS = ("algorithm", "K", "distribution", "R95", "R98", "acc", "comm_per_round_MB", "total_GB")


def run_experiment(cfg: FedConfig, arch: mdl.Arch, train: Dataset, test: Dataset, plan: PartitionPlan,
                   seeds: Sequence[int] = (0, 1, 2, 3, 4), reference_accuracy: float | None = None,
                   on_round=None) -> ExperimentReport:
    runs = [run_seed(cfg, arch, train, test, plan, s, reference_accuracy, on_round=on_round) for s in seeds]
    return ExperimentReport(cfg.to_dict(), plan.describe(), list(seeds), runs)


def write_table(reports: Sequence[ExperimentReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
        w.writeheader()
        for rep in reports:
            w.writerow({k: _fmt(v) for k, v in rep.table_row().items()})


def write_rounds_jsonl(report: ExperimentReport, path, timing: bool = True) -> None:
    with open(path, "w") as fh:
        for run in report.runs:
            for st in run.rounds:
                rec = {"seed": run.seed, **st.to_dict(timing)}
                fh.write(json.dumps(_jsonable(rec), sort_keys=True) + "\n")


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def _jsonable(obj):
    if isinstance(obj, float) and (math.isnan(obj) or math.isinf(obj)):
        return None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj
