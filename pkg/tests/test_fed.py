import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from edgedetect import crypto, dataio, fed, smartify, transport
from edgedetect import model as mdl
from edgedetect.dataio import Dataset
from edgedetect.fed import FedConfig, FedError, PartitionPlan


@pytest.fixture(scope="module")
def data():
    ds = dataio.generate_synthetic(dataio.SyntheticSpec(n_rows=3000, n_classes=3, n_features=6, seed=2))
    X = ds.features
    ds = ds.with_features((X - X.mean(0)) / X.std(0))
    return dataio.train_test_split(ds, 0.2, 0)


@pytest.fixture(scope="module")
def keypair():
    return crypto.keygen(512, seed=0)


def fast_cfg(**kw):
    base = dict(K=4, rounds_max=3, key_bits=512, stop_at_target=False,
                train=mdl.TrainConfig(epochs=1, early_stop_patience=None))
    base.update(kw)
    return FedConfig(**base)


def _labels(counts):
    return np.repeat(np.arange(len(counts)), counts)


# --------------------------------------------------------------------------
# partitioning


def test_iid_two_clients():
    y = _labels([50, 50])
    parts = fed.partition_indices(y, PartitionPlan("iid", K=2, seed=0))
    assert [len(p) for p in parts] == [50, 50]
    for p in parts:
        assert abs(np.mean(y[p]) - 0.5) < 0.15


def test_dirichlet_large_alpha_is_iid():
    y = _labels([3000, 2000, 1000])
    global_p = np.bincount(y) / y.size
    parts = fed.partition_indices(y, PartitionPlan("dirichlet", K=5, seed=1, alpha=1e6))
    for p in parts:
        tv = 0.5 * np.abs(np.bincount(y[p], minlength=3) / p.size - global_p).sum()
        assert tv < 0.05


def test_dirichlet_entropy_ordering():
    ds = Dataset(np.zeros((7000, 1)), _labels([1000] * 7), tuple("abcdefg"), ("x",))
    for seed in range(5):
        ent = {}
        for alpha in (0.1, 10.0):
            clients = fed.partition(ds, PartitionPlan("dirichlet", K=50, seed=seed, alpha=alpha))
            ent[alpha] = np.mean([fed.label_entropy(c) for c in clients])
        assert ent[0.1] < ent[10.0]


@given(st.sampled_from(fed.STRATEGIES), st.integers(1, 12), st.integers(0, 10 ** 6),
       st.lists(st.integers(5, 80), min_size=2, max_size=6))
def test_partition_conserves_rows(strategy, K, seed, counts):
    y = _labels(counts)
    # at least 10 rows per client keeps empty-client resampling from exhausting its retries
    y = np.resize(y, max(y.size, 10 * K))
    parts = fed.partition_indices(y, PartitionPlan(strategy, K=K, seed=seed, alpha=0.5))
    assert len(parts) == K
    assert all(len(p) > 0 for p in parts)
    allidx = np.concatenate(parts)
    assert sorted(allidx.tolist()) == list(range(y.size))


def test_label_skew_dominance():
    y = _labels([500] * 7)
    parts = fed.partition_indices(y, PartitionPlan("label_skew", K=10, seed=3, dominance=0.7))
    shares = []
    for p in parts:
        top = np.sort(np.bincount(y[p], minlength=7))[::-1]
        shares.append(top[:3].sum() / p.size)
    assert np.median(shares) >= 0.6


def test_partition_errors():
    with pytest.raises(FedError):
        PartitionPlan("dirichlet", alpha=0.0)
    with pytest.raises(FedError):
        PartitionPlan("bogus")
    with pytest.raises(FedError):
        fed.partition_indices(np.zeros(3, dtype=int), PartitionPlan("iid", K=5))
    # 6 rows over 6 clients at tiny alpha: some client stays empty every time
    with pytest.raises(FedError, match="empty"):
        fed.partition_indices(_labels([3, 3]), PartitionPlan("dirichlet", K=6, alpha=0.01, max_retries=5))


def test_participant_selection():
    assert fed.select_participants(10, 1.0, 1, 0).tolist() == list(range(10))
    s = fed.select_participants(50, 0.5, 3, 7)
    assert len(s) == 25 and len(set(s.tolist())) == 25
    np.testing.assert_array_equal(s, fed.select_participants(50, 0.5, 3, 7))
    assert len(fed.select_participants(3, 0.01, 1, 0)) == 1
    with pytest.raises(FedError):
        fed.select_participants(10, 0.0, 1, 0)


# --------------------------------------------------------------------------
# update rules


def test_momentum_scalar_example():
    out = fed.global_update_momentum(np.array([1.0]), np.array([1.0]), 0.01, 0.9, np.array([0.5]))
    assert out[0] == pytest.approx(1.46)


def test_momentum_reductions():
    W, Wp, D = np.array([2.0, -1.0]), np.array([1.0, 1.0]), np.array([0.5, 0.25])
    np.testing.assert_array_equal(fed.global_update_momentum(W, D, 0.1, 0.0, Wp), W + 0.1 * D)
    np.testing.assert_array_equal(fed.global_update_momentum(W, np.zeros(2), 0.1, 0.9, Wp), W + 0.9 * (W - Wp))
    with pytest.raises(FedError):
        fed.global_update_momentum(W, np.zeros(3), 0.1, 0.9, Wp)


@pytest.mark.parametrize("encrypt", [False, True])
def test_hand_aggregate_k3(keypair, encrypt):
    vecs = [[1, 1, -1, -1], [1, -1, -1, -1], [1, 1, 1, -1]]
    arch = mdl.logistic(1, 2)  # 4 parameters
    clients = [Dataset(np.zeros((1, 1)), [0], ("a", "b"), ("x",)) for _ in range(3)]
    cfg = fast_cfg(K=3, encrypt=encrypt)
    st_ = fed.init_state(cfg, arch, clients, clients[0], 0, keypair if encrypt else None)
    frames = []
    for k, v in enumerate(vecs):
        if encrypt:
            cts = crypto.encrypt_vector(keypair.public, v, st_.encoding, st_.nonces)
            msg = transport.Message(transport.MsgType.UPDATE_ENC, 1, k, crypto.ciphertexts_to_bytes(cts))
        else:
            msg = transport.Message(transport.MsgType.UPDATE_BIN, 1, k, smartify.pack_signs(v).to_bytes())
        frames.append(transport.encode(msg))
    agg = fed.aggregate(st_, cfg, frames)
    np.testing.assert_allclose(agg, [1, 1 / 3, -1 / 3, -1])
    assert (agg * 3).tolist() == [3, 1, -1, -3]


def test_fedavg_weighted_by_samples(data):
    train, test = data
    arch = mdl.logistic(train.n_features, train.n_classes)
    clients = [train.subset(np.arange(10)), train.subset(np.arange(10, 40))]
    cfg = fast_cfg(algorithm="fedavg", K=2)
    st_ = fed.init_state(cfg, arch, clients, test)
    frames = [transport.encode(transport.Message(transport.MsgType.UPDATE_FULL, 1, k,
                                                 transport.float_payload(np.full(arch.n_params, v))))
              for k, v in enumerate((1.0, 2.0))]
    np.testing.assert_allclose(fed.aggregate(st_, cfg, frames), (10 * 1.0 + 30 * 2.0) / 40)


def test_zero_learning_rate_smoke(data):
    train, test = data
    arch = mdl.logistic(train.n_features, train.n_classes)
    cfg = fast_cfg(encrypt=False, rounds_max=1, train=mdl.TrainConfig(learning_rate=0.0, epochs=1))
    clients = fed.partition(train, PartitionPlan("iid", K=4))
    st_ = fed.init_state(cfg, arch, clients, test)
    W0 = np.array(st_.model.W)
    st_, stats = fed.run_round(st_, cfg)
    # all-zero deltas binarize to all +1 (tie rule); first round has no momentum term
    np.testing.assert_allclose(st_.model.W - W0, cfg.global_step * np.ones(arch.n_params))


# --------------------------------------------------------------------------
# experiments


def test_rounds_max_zero(data):
    train, test = data
    arch = mdl.logistic(train.n_features, train.n_classes)
    run = fed.run_seed(fast_cfg(rounds_max=0, encrypt=False), arch, train, test, PartitionPlan(), 0)
    assert run.rounds == [] and run.r95 is None and run.r98 is None
    assert run.final_accuracy == run.initial_accuracy


def test_logical_ratio_32(data):
    train, test = data
    arch = mdl.logistic(train.n_features, train.n_classes)
    runs = {}
    for algo in ("edgedetect", "fedavg"):
        runs[algo] = fed.run_seed(fast_cfg(algorithm=algo, rounds_max=1, encrypt=False), arch, train, test,
                                  PartitionPlan(), 0)
    b_ed = runs["edgedetect"].rounds[0].uplink_logical_bits
    b_fa = runs["fedavg"].rounds[0].uplink_logical_bits
    assert b_fa / b_ed == 32.0
    assert b_ed == 4 * arch.n_params
    assert runs["fedavg"].comm_per_round_MB / runs["edgedetect"].comm_per_round_MB == 32.0


@pytest.mark.parametrize("smart", [True, False])
def test_encrypt_toggle_bit_identical(data, keypair, smart):
    train, test = data
    arch = mdl.logistic(train.n_features, train.n_classes)
    W = {}
    for enc in (False, True):
        cfg = fast_cfg(encrypt=enc, smartify=smart, rounds_max=3)
        W[enc] = fed.run_seed(cfg, arch, train, test, PartitionPlan("dirichlet", alpha=0.5), 1,
                              keypair=keypair).final_W
    assert W[False].tobytes() == W[True].tobytes()


def test_wire_accounting_matches_transport(data, keypair):
    train, test = data
    arch = mdl.logistic(train.n_features, train.n_classes)
    for algo, enc in (("edgedetect", False), ("edgedetect", True), ("fedavg", False), ("signsgd", False)):
        cfg = fast_cfg(algorithm=algo, encrypt=enc, rounds_max=1)
        st_ = fed.init_state(cfg, arch, fed.partition(train, PartitionPlan(K=4)), test, 0, keypair)
        a, b = transport.inproc_pair()
        for k in range(4):
            msg, _ = fed.client_update(st_, cfg, k, 1)
            a.send(msg)
        for _ in range(4):
            b.recv()
        _, stats = fed.run_round(st_, cfg)
        assert stats.uplink_wire_bytes == a.bytes_sent == b.bytes_received
        assert stats.uplink_logical_bits / 8 <= stats.uplink_wire_bytes
        if algo != "fedavg" and not enc:
            assert stats.uplink_wire_bytes == 4 * (14 + smartify.wire_bytes(arch.n_params))


def test_round_stats_invariants_and_determinism(data, keypair):
    train, test = data
    arch = mdl.logistic(train.n_features, train.n_classes)
    cfg = fast_cfg(rounds_max=4, participation=0.5, dp=fed.DPConfig())
    runs = [fed.run_seed(cfg, arch, train, test, PartitionPlan(), 3, keypair=keypair) for _ in range(2)]
    a = [s.to_dict(timing=False) for s in runs[0].rounds]
    b = [s.to_dict(timing=False) for s in runs[1].rounds]
    assert json.dumps(a) == json.dumps(b)
    cum = [s.cumulative_wire_bytes for s in runs[0].rounds]
    assert cum == sorted(cum)
    for s in runs[0].rounds:
        assert len(s.participants) == 2
        assert s.uplink_logical_bits == 2 * arch.n_params
        assert -1.0 <= s.alignment <= 1.0


@pytest.mark.parametrize("algo", fed.ALGORITHMS)
def test_each_algorithm_learns(data, algo):
    train, test = data
    arch = mdl.logistic(train.n_features, train.n_classes)
    cfg = fast_cfg(algorithm=algo, encrypt=False, rounds_max=5, global_step=0.05)
    run = fed.run_seed(cfg, arch, train, test, PartitionPlan(), 0)
    assert run.final_accuracy > run.initial_accuracy
    if run.r95 is not None and run.r98 is not None:
        assert run.r95 <= run.r98


def test_mlp_federated_round(data):
    train, test = data
    arch = mdl.mlp(train.n_features, train.n_classes, (8,))
    run = fed.run_seed(fast_cfg(encrypt=False, rounds_max=2), arch, train, test, PartitionPlan(), 0)
    assert len(run.rounds) == 2


def test_first_reaching():
    assert fed.first_reaching([0.5, 0.7, 0.9, 0.8], 0.85) == 3
    assert fed.first_reaching([0.5], 0.9) is None
    assert fed.first_reaching([], 0.0) is None


def test_stop_at_target(data):
    train, test = data
    arch = mdl.logistic(train.n_features, train.n_classes)
    cfg = fast_cfg(algorithm="fedavg", rounds_max=20, stop_at_target=True,
                   train=mdl.TrainConfig(early_stop_patience=None))
    run = fed.run_seed(cfg, arch, train, test, PartitionPlan(), 0)
    assert run.r98 is not None and len(run.rounds) == run.r98
    assert run.total_GB == pytest.approx(run.comm_per_round_MB * run.r98 / 1000)


def test_experiment_report(tmp_path, data):
    train, test = data
    arch = mdl.logistic(train.n_features, train.n_classes)
    rep = fed.run_experiment(fast_cfg(encrypt=False, rounds_max=2), arch, train, test, PartitionPlan(),
                             seeds=(0, 1, 2, 3, 4), reference_accuracy=0.9)
    s = rep.summary()
    for k in ("acc", "f1"):
        assert math.isfinite(s[f"{k}_mean"]) and math.isfinite(s[f"{k}_std"])
    assert s["acc_mean"] == pytest.approx(np.mean([r.final_accuracy for r in rep.runs]))
    fed.write_table([rep], tmp_path / "t.csv")
    header = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert header == ",".join(fed.TABLE_COLUMNS)
    fed.write_rounds_jsonl(rep, tmp_path / "r.jsonl", timing=False)
    lines = (tmp_path / "r.jsonl").read_text().splitlines()
    assert len(lines) == 10 and "wall_time" not in json.loads(lines[0])


def test_config_validation():
    for bad in (dict(algorithm="x"), dict(participation=0.0), dict(global_step=0.0), dict(momentum=1.0),
                dict(mode="x"), dict(rounds_max=-1)):
        with pytest.raises(FedError):
            FedConfig(**bad)
    cfg = FedConfig()
    assert (cfg.global_step, cfg.momentum, cfg.key_bits) == (0.01, 0.9, 2048)
    assert cfg.local_train_config().prox_mu is None
    assert replace(cfg, algorithm="fedprox").local_train_config().prox_mu == 0.01


def test_client_count_mismatch(data):
    train, test = data
    with pytest.raises(FedError):
        fed.init_state(fast_cfg(K=3), mdl.logistic(6, 3), [train], test)
