"""Binary message framing and client/server sessions, in-process or over TCP.

Frame layout (little-endian)::

    version u8 | msg_type u8 | round u32 | client_id u32 | payload_len u32 | payload

The header is self-delimiting, so a stream is simply a sequence of frames.
"""
from __future__ import annotations

import enum
import queue
import socket
import struct
import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np

VERSION = 1
HEADER = struct.Struct("<BBIII")
HEADER_SIZE = HEADER.size  # 14
DEFAULT_MAX_FRAME = 64 * 1024 * 1024
INPROC = "inproc"


class TransportError(Exception):
    pass


class MsgType(enum.IntEnum):
    KEY_BCAST = 1
    MODEL_BCAST = 2
    UPDATE_BIN = 3
    UPDATE_ENC = 4
    UPDATE_FULL = 5
    ROUND_ACK = 6


@dataclass(frozen=True)
class Message:
    msg_type: MsgType
    round: int = 0
    client_id: int = 0
    payload: bytes = b""
    version: int = VERSION

    def __post_init__(self):
        try:
            object.__setattr__(self, "msg_type", MsgType(self.msg_type))
        except ValueError:
            raise TransportError(f"unknown msg_type {self.msg_type}") from None
        for name in ("round", "client_id"):
            v = getattr(self, name)
            if not 0 <= v < 2 ** 32:
                raise TransportError(f"{name}={v} does not fit in 4 unsigned bytes")
        if not 0 <= self.version < 256:
            raise TransportError(f"version {self.version} does not fit in one byte")
        object.__setattr__(self, "payload", bytes(self.payload))

    @property
    def frame_size(self) -> int:
        return HEADER_SIZE + len(self.payload)


def encode(msg: Message) -> bytes:
    if len(msg.payload) >= 2 ** 32:
        raise TransportError("payload too large for a 4-byte length")
    return HEADER.pack(msg.version, int(msg.msg_type), msg.round, msg.client_id, len(msg.payload)) + msg.payload


def decode_header(raw: bytes) -> tuple[int, int, int, int, int]:
    if len(raw) < HEADER_SIZE:
        raise TransportError(f"truncated header: need {HEADER_SIZE - len(raw)} more bytes")
    version, mtype, rnd, cid, plen = HEADER.unpack_from(raw, 0)
    if version != VERSION:
        raise TransportError(f"unsupported version {version}")
    if mtype not in MsgType._value2member_map_:
        raise TransportError(f"unknown msg_type {mtype}")
    return version, mtype, rnd, cid, plen


def decode(raw: bytes) -> Message:
    version, mtype, rnd, cid, plen = decode_header(raw)
    have = len(raw) - HEADER_SIZE
    if have < plen:
        raise TransportError(f"truncated payload: missing {plen - have} bytes")
    if have > plen:
        raise TransportError(f"{have - plen} trailing bytes after frame")
    return Message(MsgType(mtype), rnd, cid, bytes(raw[HEADER_SIZE:]), version)


# --------------------------------------------------------------------------
# payload helpers


def float_payload(values, dtype="<f4") -> bytes:
    return np.asarray(values).astype(dtype).tobytes()


def float_from_payload(raw: bytes, dtype="<f4") -> np.ndarray:
    return np.frombuffer(raw, dtype=dtype).astype(np.float64)


# --------------------------------------------------------------------------
# sessions


class Session:
    """One logical bidirectional connection. ``send``/``recv`` move whole frames."""

    def __init__(self, max_frame: int = DEFAULT_MAX_FRAME):
        self.max_frame = max_frame
        self.bytes_sent = 0
        self.bytes_received = 0
        self._send_lock = threading.Lock()

    # transport-specific primitives
    def _write(self, data: bytes) -> None:
        raise NotImplementedError

    def _read_exact(self, n: int) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def send(self, msg: Message) -> int:
        frame = encode(msg)
        if len(frame) > self.max_frame:
            raise TransportError(f"frame of {len(frame)} bytes exceeds max {self.max_frame}")
        with self._send_lock:
            self._write(frame)
            self.bytes_sent += len(frame)
        return len(frame)

    def recv(self) -> Message:
        head = self._read_exact(HEADER_SIZE)
        plen = decode_header(head)[4]
        if HEADER_SIZE + plen > self.max_frame:
            raise TransportError(f"incoming frame of {HEADER_SIZE + plen} bytes exceeds max {self.max_frame}")
        body = self._read_exact(plen) if plen else b""
        self.bytes_received += HEADER_SIZE + plen
        return decode(head + body)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


_EOF = object()


class InprocSession(Session):
    """Byte-faithful in-process channel: frames travel as raw bytes."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, max_frame=DEFAULT_MAX_FRAME, timeout=30.0):
        super().__init__(max_frame)
        self._in, self._out = inbox, outbox
        self._buf = bytearray()
        self.timeout = timeout

    def _write(self, data: bytes) -> None:
        self._out.put(bytes(data))

    def _read_exact(self, n: int) -> bytes:
        while len(self._buf) < n:
            try:
                chunk = self._in.get(timeout=self.timeout)
            except queue.Empty:
                raise TransportError("timed out waiting for data") from None
            if chunk is _EOF:
                raise TransportError(f"connection closed with {n - len(self._buf)} bytes outstanding")
            self._buf += chunk
        out = bytes(self._buf[:n])
        del self._buf[:n]
        return out

    def close(self) -> None:
        self._out.put(_EOF)


def inproc_pair(max_frame: int = DEFAULT_MAX_FRAME) -> tuple[InprocSession, InprocSession]:
    a, b = queue.Queue(), queue.Queue()
    return InprocSession(a, b, max_frame), InprocSession(b, a, max_frame)


class SocketSession(Session):
    def __init__(self, sock: socket.socket, max_frame=DEFAULT_MAX_FRAME):
        super().__init__(max_frame)
        self.sock = sock

    def _write(self, data: bytes) -> None:
        self.sock.sendall(data)

    def _read_exact(self, n: int) -> bytes:
        parts, got = [], 0
        while got < n:
            chunk = self.sock.recv(min(n - got, 1 << 20))
            if not chunk:
                raise TransportError(f"connection closed with {n - got} bytes outstanding")
            parts.append(chunk)
            got += len(chunk)
        return b"".join(parts)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


# --------------------------------------------------------------------------
# servers

Handler = Callable[[Session], None]


def parse_endpoint(endpoint: str) -> tuple[str, int] | None:
    """None for ``inproc``, else (host, port)."""
    if endpoint == INPROC:
        return None
    host, sep, port = endpoint.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise TransportError(f"endpoint must be host:port or {INPROC!r}, got {endpoint!r}")
    return host, int(port)


class Server:
    """Accepts sessions and runs ``handler(session)`` in a thread per session."""

    def __init__(self, endpoint: str, handler: Handler, max_frame: int = DEFAULT_MAX_FRAME):
        self.handler = handler
        self.max_frame = max_frame
        self.threads: list[threading.Thread] = []
        self.errors: list[BaseException] = []
        self._closed = False
        self._accepted = threading.Condition()
        addr = parse_endpoint(endpoint)
        self._sock = None
        if addr is None:
            with _registry_lock:
                if INPROC in _inproc_servers:
                    raise TransportError("inproc endpoint already in use")
                _inproc_servers[INPROC] = self
            self.endpoint = INPROC
        else:
            self._sock = socket.create_server(addr)
            host, port = self._sock.getsockname()[:2]
            self.endpoint = f"{host}:{port}"
            self._acceptor = threading.Thread(target=self._accept_loop, daemon=True)
            self._acceptor.start()

    def _run(self, session: Session) -> None:
        try:
            self.handler(session)
        except BaseException as exc:  # surfaced through .errors
            self.errors.append(exc)
        finally:
            session.close()

    def _spawn(self, session: Session) -> None:
        t = threading.Thread(target=self._run, args=(session,), daemon=True)
        with self._accepted:
            t.start()
            self.threads.append(t)
            self._accepted.notify_all()

    def _accept_loop(self) -> None:
        while not self._closed:
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            self._spawn(SocketSession(conn, self.max_frame))

    def _connect_inproc(self) -> Session:
        client, server = inproc_pair(self.max_frame)
        self._spawn(server)
        return client

    def join(self, timeout: float | None = None, sessions: int | None = None) -> None:
        """Wait for session handlers to finish.

        TCP connections are accepted asynchronously, so a caller that knows
        how many clients connected passes ``sessions`` to first wait until
        that many have been accepted.
        """
        if sessions is not None:
            with self._accepted:
                if not self._accepted.wait_for(lambda: len(self.threads) >= sessions, timeout):
                    raise TransportError(f"only {len(self.threads)} of {sessions} sessions accepted")
        for t in list(self.threads):
            t.join(timeout)

    def close(self) -> None:
        self._closed = True
        if self._sock is not None:
            # close() alone does not wake a thread blocked in accept() on Linux
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()
            self._acceptor.join(5)
        else:
            with _registry_lock:
                if _inproc_servers.get(INPROC) is self:
                    del _inproc_servers[INPROC]

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


_inproc_servers: dict[str, Server] = {}
_registry_lock = threading.Lock()


def serve(endpoint: str, handler: Handler, max_frame: int = DEFAULT_MAX_FRAME) -> Server:
    return Server(endpoint, handler, max_frame)


def connect(endpoint: str, max_frame: int = DEFAULT_MAX_FRAME, timeout: float = 10.0) -> Session:
    addr = parse_endpoint(endpoint)
    if addr is None:
        with _registry_lock:
            srv = _inproc_servers.get(INPROC)
        if srv is None:
            raise TransportError("connection refused: no inproc server")
        return srv._connect_inproc()
    try:
        sock = socket.create_connection(addr, timeout=timeout)
    except OSError as exc:
        raise TransportError(f"connection refused: {endpoint}") from exc
    sock.settimeout(None)
    return SocketSession(sock, max_frame)
