import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st

from edgedetect import crypto, smartify, transport
from edgedetect.transport import HEADER_SIZE, Message, MsgType, TransportError

messages = st.builds(
    Message,
    st.sampled_from(list(MsgType)),
    st.integers(0, 2 ** 32 - 1),
    st.integers(0, 2 ** 32 - 1),
    st.binary(max_size=300),
)


def test_header_size():
    assert HEADER_SIZE == 14


def test_empty_ack_roundtrip():
    raw = transport.encode(Message(MsgType.ROUND_ACK, 3, 1))
    assert len(raw) == HEADER_SIZE
    assert transport.decode(raw) == Message(MsgType.ROUND_ACK, 3, 1)


def test_update_enc_roundtrip():
    kp = crypto.keygen(128, seed=0)
    cts = [crypto.encrypt(kp.public, m) for m in (1, 2, 3)]
    payload = crypto.ciphertexts_to_bytes(cts)
    raw = transport.encode(Message(MsgType.UPDATE_ENC, 1, 2, payload))
    back = transport.decode(raw)
    assert transport.encode(back) == raw
    assert crypto.ciphertexts_from_bytes(back.payload, kp.public) == cts


@given(messages)
def test_roundtrip_property(msg):
    raw = transport.encode(msg)
    assert len(raw) == msg.frame_size
    assert transport.decode(raw) == msg


def test_truncated_by_one_byte():
    raw = transport.encode(Message(MsgType.MODEL_BCAST, 0, 0, b"abcdef"))
    with pytest.raises(TransportError, match="missing 1 bytes"):
        transport.decode(raw[:-1])
    with pytest.raises(TransportError, match="need 4 more bytes"):
        transport.decode(raw[:10])


def test_trailing_bytes_rejected():
    raw = transport.encode(Message(MsgType.ROUND_ACK))
    with pytest.raises(TransportError, match="trailing"):
        transport.decode(raw + b"x")


def test_unknown_type_and_version_rejected():
    raw = bytearray(transport.encode(Message(MsgType.ROUND_ACK)))
    raw[1] = 99
    with pytest.raises(TransportError, match="unknown msg_type"):
        transport.decode(bytes(raw))
    raw[1] = 6
    raw[0] = 2
    with pytest.raises(TransportError, match="version"):
        transport.decode(bytes(raw))
    with pytest.raises(TransportError):
        Message(42)


def test_field_ranges():
    with pytest.raises(TransportError):
        Message(MsgType.ROUND_ACK, round=-1)
    with pytest.raises(TransportError):
        Message(MsgType.ROUND_ACK, client_id=2 ** 32)


def test_update_bin_wire_bytes():
    b = smartify.binarize(np.random.default_rng(0).standard_normal(1000))
    raw = transport.encode(Message(MsgType.UPDATE_BIN, 1, 0, b.to_bytes()))
    assert len(raw) == 14 + 4 + 125 + 8


def test_float_payload_roundtrip():
    v = np.array([0.5, -1.25, 3.0])
    np.testing.assert_array_equal(transport.float_from_payload(transport.float_payload(v)), v)


# --------------------------------------------------------------------------
# sessions


def _echo(session):
    while True:
        try:
            msg = session.recv()
        except TransportError:
            return
        session.send(msg)


@pytest.mark.parametrize("endpoint", ["inproc", "127.0.0.1:0"])
def test_echo_model_bcast(endpoint):
    payload = transport.float_payload(np.arange(50.0))
    msg = Message(MsgType.MODEL_BCAST, 4, 0, payload)
    with transport.serve(endpoint, _echo) as srv:
        with transport.connect(srv.endpoint) as s:
            s.send(msg)
            back = s.recv()
            assert transport.encode(back) == transport.encode(msg)
            assert s.bytes_sent == s.bytes_received == msg.frame_size
        srv.join(5, sessions=1)
    assert not srv.errors


def test_inproc_and_tcp_byte_identical():
    msgs = [Message(MsgType.UPDATE_BIN, r, 7, bytes([r]) * (r * 13)) for r in range(1, 6)]
    captured = {}

    def recorder(name):
        def handler(session):
            got = bytearray()
            for _ in msgs:
                m = session.recv()
                got += transport.encode(m)
            captured[name] = bytes(got)
        return handler

    for name, ep in (("inproc", "inproc"), ("tcp", "127.0.0.1:0")):
        with transport.serve(ep, recorder(name)) as srv:
            with transport.connect(srv.endpoint) as s:
                sent = sum(s.send(m) for m in msgs)
            srv.join(5, sessions=1)
        assert not srv.errors
    assert captured["inproc"] == captured["tcp"] == b"".join(transport.encode(m) for m in msgs)
    assert sent == len(captured["tcp"])


@pytest.mark.parametrize("endpoint", ["inproc", "127.0.0.1:0"])
@given(st.lists(st.tuples(st.integers(0, 1), st.binary(max_size=40)), min_size=1, max_size=20))
def test_session_isolation(endpoint, plan):
    """Two clients interleave frames; each server session sees only its own."""
    received = {0: [], 1: []}
    lock = threading.Lock()

    def handler(session):
        while True:
            try:
                m = session.recv()
            except TransportError:
                return
            with lock:
                received[m.client_id].append((session, m.payload))

    with transport.serve(endpoint, handler) as srv:
        clients = [transport.connect(srv.endpoint) for _ in range(2)]
        for cid, payload in plan:
            clients[cid].send(Message(MsgType.UPDATE_FULL, 1, cid, payload))
        for c in clients:
            c.close()
        srv.join(5, sessions=2)
    for cid in (0, 1):
        assert [p for _, p in received[cid]] == [p for c, p in plan if c == cid]
        assert len({id(s) for s, _ in received[cid]}) <= 1
    if received[0] and received[1]:
        assert received[0][0][0] is not received[1][0][0]


def test_max_frame_enforced():
    a, b = transport.inproc_pair(max_frame=32)
    with pytest.raises(TransportError, match="exceeds"):
        a.send(Message(MsgType.UPDATE_FULL, 0, 0, bytes(100)))
    big_a, small_b = transport.inproc_pair()
    small_b.max_frame = 32
    big_a.send(Message(MsgType.UPDATE_FULL, 0, 0, bytes(100)))
    with pytest.raises(TransportError, match="exceeds"):
        small_b.recv()


def test_connect_refused():
    with pytest.raises(TransportError, match="refused"):
        transport.connect("inproc")
    with transport.serve("127.0.0.1:0", _echo) as srv:
        port = srv.endpoint.rsplit(":", 1)[1]
    with pytest.raises(TransportError, match="refused"):
        transport.connect(f"127.0.0.1:{port}", timeout=1.0)


def test_closed_peer_reports_outstanding():
    a, b = transport.inproc_pair()
    a._write(transport.encode(Message(MsgType.MODEL_BCAST, 0, 0, b"12345"))[:-2])
    a.close()
    with pytest.raises(TransportError, match="2 bytes outstanding"):
        b.recv()


def test_bad_endpoint():
    with pytest.raises(TransportError):
        transport.serve("nonsense", _echo)


def test_handler_errors_surface():
    def boom(session):
        raise RuntimeError("handler failed")

    with transport.serve("inproc", boom) as srv:
        transport.connect(srv.endpoint)
        srv.join(5, sessions=1)
    assert isinstance(srv.errors[0], RuntimeError)
