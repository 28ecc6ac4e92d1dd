"""Message layer: typed envelopes over a simulated or a TCP socket transport.

Both transports deliver every message exactly once and preserve FIFO order
per ordered (sender, receiver) pair; there is no loss, duplication, or
retry modeling.  Messages between a node and itself are delivered directly
and are not counted as network traffic.

Wire format of the socket transport (all integers little-endian):

    frame     := u32 body_length, body
    body      := header, keys, versions, payload
    header    := u8 kind, u8 cause, u8 flags, u8 pad,
                 u32 sender, u32 receiver, u64 request_id,
                 i32 requester, i32 new_owner, i64 round_id, i32 stage,
                 u32 num_keys, u32 num_versions, u32 num_vectors, u32 dim
    keys      := u64 * num_keys
    versions  := u64 * num_versions
    payload   := f64 * (num_vectors * dim), vectors concatenated in order

``flags`` bit 0 marks a home-forwarded request (routing metadata).  Vector
payloads are raw IEEE-754 doubles (float32 stores are widened on the wire).
"""

from __future__ import annotations

import socket
import struct
import threading
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .runtime import SimRuntime


class MessageKind(IntEnum):
    PULL_REQ = 0
    PULL_RESP = 1
    PUSH_REQ = 2
    PUSH_ACK = 3
    LOCALIZE_REQ = 4
    LOCALIZE_FORWARD = 5
    LOCALIZE_GRANT = 6
    SYNC_EXCHANGE = 7


class Cause(IntEnum):
    """What a message is attributed to in per-cause accounting."""

    DIRECT = 0
    SAMPLING = 1
    SYNC = 2
    RELOCATION = 3


@dataclass
class Message:
    kind: MessageKind
    sender: int
    receiver: int
    keys: list[int] = field(default_factory=list)
    payload: list[np.ndarray] | None = None
    request_id: int = 0
    cause: Cause = Cause.DIRECT
    requester: int = -1
    new_owner: int = -1
    versions: list[int] | None = None
    round_id: int = -1
    stage: int = -1
    forwarded: bool = False

    def __post_init__(self):
        if self.payload is not None and self.keys and len(self.payload) not in (
            0,
            len(self.keys),
        ):
            raise ValueError("payload length must match keys length")


class MessageCounter:
    """Monotone per-kind and per-cause counts of inter-node messages."""

    def __init__(self):
        self._lock = threading.Lock()
        self.by_kind = {kind: 0 for kind in MessageKind}
        self.by_cause = {cause: 0 for cause in Cause}
        self.total = 0

    def record(self, msg: Message) -> None:
        with self._lock:
            self.by_kind[msg.kind] += 1
            self.by_cause[msg.cause] += 1
            self.total += 1

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "total": self.total,
                "by_kind": {k.name: v for k, v in self.by_kind.items()},
                "by_cause": {c.name: v for c, v in self.by_cause.items()},
            }


class RoutingError(Exception):
    pass


_HEADER = struct.Struct("<BBBBIIQiiqiIIII")
_LEN = struct.Struct("<I")


def encode_message(msg: Message) -> bytes:
    keys = msg.keys or []
    versions = msg.versions or []
    vectors = msg.payload or []
    dim = len(vectors[0]) if vectors else 0
    flags = 1 if msg.forwarded else 0
    parts = [
        _HEADER.pack(
            int(msg.kind),
            int(msg.cause),
            flags,
            0,
            msg.sender,
            msg.receiver,
            msg.request_id,
            msg.requester,
            msg.new_owner,
            msg.round_id,
            msg.stage,
            len(keys),
            len(versions),
            len(vectors),
            dim,
        )
    ]
    if keys:
        parts.append(np.asarray(keys, dtype="<u8").tobytes())
    if versions:
        parts.append(np.asarray(versions, dtype="<u8").tobytes())
    for vec in vectors:
        arr = np.asarray(vec, dtype="<f8")
        if arr.shape != (dim,):
            raise ValueError("payload vectors must share one dimension")
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return _LEN.pack(len(body)) + body


def decode_message(body: bytes) -> Message:
    (
        kind,
        cause,
        flags,
        _pad,
        sender,
        receiver,
        request_id,
        requester,
        new_owner,
        round_id,
        stage,
        num_keys,
        num_versions,
        num_vectors,
        dim,
    ) = _HEADER.unpack_from(body, 0)
    offset = _HEADER.size
    keys = np.frombuffer(body, dtype="<u8", count=num_keys, offset=offset)
    offset += 8 * num_keys
    versions = np.frombuffer(body, dtype="<u8", count=num_versions, offset=offset)
    offset += 8 * num_versions
    payload = None
    if num_vectors:
        flat = np.frombuffer(body, dtype="<f8", count=num_vectors * dim, offset=offset)
        payload = [flat[i * dim : (i + 1) * dim].copy() for i in range(num_vectors)]
    return Message(
        kind=MessageKind(kind),
        sender=sender,
        receiver=receiver,
        keys=[int(k) for k in keys],
        payload=payload,
        request_id=request_id,
        cause=Cause(cause),
        requester=requester,
        new_owner=new_owner,
        versions=[int(v) for v in versions] if num_versions else None,
        round_id=round_id,
        stage=stage,
        forwarded=bool(flags & 1),
    )


class SimTransport:
    """In-process transport on a virtual clock; fully deterministic per seed.

    Per-message latency is base + jitter drawn from a seeded RNG; scheduled
    delivery times per (sender, receiver) pair are forced non-decreasing so
    the FIFO contract holds even with random jitter.
    """

    def __init__(
        self,
        runtime: SimRuntime,
        num_nodes: int,
        latency_us: float = 50.0,
        jitter_us: float = 25.0,
        seed: int = 0,
    ):
        self.runtime = runtime
        self.num_nodes = num_nodes
        self.latency_us = latency_us
        self.jitter_us = jitter_us
        self.counter = MessageCounter()
        self._rng = np.random.default_rng(np.random.SeedSequence((seed, 0x7A4)))
        self._handlers: dict[int, callable] = {}
        self._last_sched: dict[tuple[int, int], float] = {}
        self._taps: list[callable] = []

    def register(self, node_id: int, handler) -> None:
        self._handlers[node_id] = handler

    def add_tap(self, tap) -> None:
        """Observe every delivery as (virtual_time, message); test hook."""
        self._taps.append(tap)

    def send(self, msg: Message) -> None:
        if msg.receiver not in self._handlers:
            raise RoutingError(f"unknown receiver node {msg.receiver}")
        now = self.runtime.now_us()
        if msg.sender == msg.receiver:
            self.runtime.call_soon(lambda: self._deliver(msg))
            return
        self.counter.record(msg)
        latency = self.latency_us
        if self.jitter_us > 0:
            latency += self.jitter_us * float(self._rng.random())
        pair = (msg.sender, msg.receiver)
        when = max(now + latency, self._last_sched.get(pair, 0.0))
        self._last_sched[pair] = when
        self.runtime.call_at(when, lambda: self._deliver(msg))

    def _deliver(self, msg: Message) -> None:
        for tap in self._taps:
            tap(self.runtime.now_us(), msg)
        self._handlers[msg.receiver](msg)


class SocketTransport:
    """TCP transport: one listening port per node, one outbound connection per
    ordered pair (TCP ordering on that connection provides per-pair FIFO)."""

    def __init__(self, node_id: int, addresses: dict[int, tuple[str, int]]):
        self.node_id = node_id
        self.addresses = dict(addresses)
        self.counter = MessageCounter()
        # Handler serialization is the receiver's concern (nodes use a
        # reentrant lock); the transport only guarantees per-connection order.
        self._handler = None
        self._out: dict[int, socket.socket] = {}
        self._out_locks: dict[int, threading.Lock] = {}
        self._lock = threading.Lock()
        self._closed = False
        host, port = self.addresses[node_id]
        self._server = socket.create_server((host, port))
        self._reader_threads: list[threading.Thread] = []
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)

    def register(self, node_id: int, handler) -> None:
        if node_id != self.node_id:
            raise RoutingError("socket transport handles its own node only")
        self._handler = handler
        self._accept_thread.start()

    def send(self, msg: Message) -> None:
        if msg.receiver not in self.addresses:
            raise RoutingError(f"unknown receiver node {msg.receiver}")
        if msg.receiver == self.node_id:
            self._handler(msg)
            return
        self.counter.record(msg)
        frame = encode_message(msg)
        with self._lock:
            sock = self._out.get(msg.receiver)
            if sock is None:
                sock = socket.create_connection(self.addresses[msg.receiver])
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                self._out[msg.receiver] = sock
                self._out_locks[msg.receiver] = threading.Lock()
            out_lock = self._out_locks[msg.receiver]
        with out_lock:
            sock.sendall(frame)

    def _accept_loop(self) -> None:
        while not self._closed:
            try:
                conn, _ = self._server.accept()
            except OSError:
                return
            thread = threading.Thread(target=self._read_loop, args=(conn,), daemon=True)
            self._reader_threads.append(thread)
            thread.start()

    def _read_loop(self, conn: socket.socket) -> None:
        buf = b""
        while True:
            try:
                chunk = conn.recv(65536)
            except OSError:
                return
            if not chunk:
                return
            buf += chunk
            while len(buf) >= 4:
                (length,) = _LEN.unpack_from(buf, 0)
                if len(buf) < 4 + length:
                    break
                body = buf[4 : 4 + length]
                buf = buf[4 + length :]
                self._handler(decode_message(body))

    def close(self) -> None:
        self._closed = True
        try:
            self._server.close()
        except OSError:
            pass
        with self._lock:
            for sock in self._out.values():
                try:
                    sock.close()
                except OSError:
                    pass
            self._out.clear()
