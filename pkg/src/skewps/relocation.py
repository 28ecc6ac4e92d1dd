"""Ownership-based management for relocated keys.

A relocated key has exactly one authoritative copy cluster-wide.  The key's
home node keeps the directory entry (current owner plus a version counter
that ticks on every ownership transfer) and is the single serialization
point for that key: transfers and remote accesses are forwarded through the
home node, whose processing order defines the key's total order.

Protocol for moving key k from owner O to requester R (home H):

    R -> H   LOCALIZE_REQ      H bumps the directory version and points the
                               directory at R before forwarding
    H -> O   LOCALIZE_FORWARD  O pops its copy and ships it
    O -> R   LOCALIZE_GRANT    R installs (value, version)

With R, H, O distinct that is 3 network messages; when two of the roles
coincide the self-hop is free and the cost drops to 2.  Remote pulls and
pushes travel the same H-then-owner route (request, forward, response).

A node that the directory already points at but that has not installed the
key yet (its grant is in flight) queues home-forwarded traffic for the key
and replays it, in arrival order, right after installing.  Pushes racing a
relocation are therefore applied exactly once, at whichever node owns the
key when the forwarded push is processed.

Owner hints: when enabled, responses teach the requester where the key
currently lives and the next remote access goes there directly; if the hint
is stale the contacted node bounces the request back to the home node, so
hints never affect correctness, only message counts.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass

import numpy as np

from .core import home_node_of
from .runtime import Future, resolved
from .transport import Cause, Message, MessageKind, RoutingError


class TechniqueMismatch(Exception):
    pass


@dataclass
class _Slot:
    value: np.ndarray
    version: int


@dataclass
class _DirEntry:
    owner: int
    version: int = 0


class _LocalizeBatch:
    __slots__ = ("remaining", "future", "started_us")

    def __init__(self, remaining: int, future: Future, started_us: float):
        self.remaining = remaining
        self.future = future
        self.started_us = started_us

    def arrived(self) -> None:
        self.remaining -= 1
        if self.remaining == 0:
            self.future.set_result(None)


class RelocationManager:
    def __init__(self, node):
        self._node = node
        self._config = node.config
        self.store: dict[int, _Slot] = {}
        self.directory: dict[int, _DirEntry] = {}
        self._pending_localize: set[int] = set()
        self._grant_waiters: dict[int, list[_LocalizeBatch]] = {}
        self._waiting: dict[int, deque[Message]] = {}
        self._hints: dict[int, int] = {}
        self._pending_ops: dict[int, Future] = {}
        self._req_ids = itertools.count(node.node_id + 1, node.config.num_nodes)
        self.version_log: list[tuple[int, int]] = []

    # -- setup ------------------------------------------------------------

    def install_initial(self, key: int, value: np.ndarray) -> None:
        """Preload a key homed at this node; the home owns it initially."""
        self.store[key] = _Slot(value, 0)
        self.directory[key] = _DirEntry(owner=self._node.node_id)

    # -- worker-facing operations ------------------------------------------

    def read_local_locked(self, key: int) -> np.ndarray | None:
        slot = self.store.get(key)
        return None if slot is None else slot.value.copy()

    def apply_push_locked(self, key: int, delta: np.ndarray) -> bool:
        slot = self.store.get(key)
        if slot is None:
            return False
        slot.value += delta
        return True

    def try_read(self, key: int) -> np.ndarray | None:
        with self._node.latch(key):
            return self.read_local_locked(key)

    def is_local(self, key: int) -> bool:
        return key in self.store

    def pull_remote(self, key: int, cause: Cause) -> Future:
        req_id = next(self._req_ids)
        fut = self._node.runtime.create_future()
        self._pending_ops[req_id] = fut
        self._node.send(
            Message(
                MessageKind.PULL_REQ,
                sender=self._node.node_id,
                receiver=self._route(key),
                keys=[key],
                request_id=req_id,
                requester=self._node.node_id,
                cause=cause,
            )
        )
        return fut

    def push_remote(self, key: int, delta: np.ndarray, cause: Cause) -> Future:
        req_id = next(self._req_ids)
        fut = self._node.runtime.create_future()
        self._pending_ops[req_id] = fut
        self._node.send(
            Message(
                MessageKind.PUSH_REQ,
                sender=self._node.node_id,
                receiver=self._route(key),
                keys=[key],
                payload=[delta],
                request_id=req_id,
                requester=self._node.node_id,
                cause=cause,
            )
        )
        return fut

    def localize(self, keys, cause: Cause = Cause.RELOCATION) -> Future:
        """Request ownership of the given relocated keys; resolves once every
        requested key has arrived (immediately if all are already local)."""
        for key in keys:
            if not self._node.is_relocated(key):
                raise TechniqueMismatch(f"key {key} is not managed by relocation")
        needed = []
        for key in keys:
            if key in self.store or key in needed:
                continue
            needed.append(key)
        if not needed:
            return resolved()
        batch = _LocalizeBatch(
            len(needed), self._node.runtime.create_future(), self._node.runtime.now_us()
        )
        for key in needed:
            self._grant_waiters.setdefault(key, []).append(batch)
            if key in self._pending_localize:
                continue
            self._pending_localize.add(key)
            self._node.send(
                Message(
                    MessageKind.LOCALIZE_REQ,
                    sender=self._node.node_id,
                    receiver=home_node_of(key, self._config),
                    keys=[key],
                    requester=self._node.node_id,
                    cause=cause,
                )
            )
        # A grant may have been installed between the locality check and the
        # waiter registration (thread runtime); settle those keys now.
        for key in needed:
            if key in self.store:
                self._settle_waiters(key)
        return batch.future

    def _route(self, key: int) -> int:
        if self._config.use_owner_hints:
            hint = self._hints.get(key)
            if hint is not None:
                return hint
        return home_node_of(key, self._config)

    # -- message handlers (run on the node's receive path) ------------------

    def on_message(self, msg: Message) -> None:
        kind = msg.kind
        if kind == MessageKind.LOCALIZE_REQ:
            self._on_localize_req(msg)
        elif kind == MessageKind.LOCALIZE_FORWARD:
            self._on_localize_forward(msg)
        elif kind == MessageKind.LOCALIZE_GRANT:
            self._on_localize_grant(msg)
        elif kind == MessageKind.PULL_REQ:
            self._on_pull_req(msg)
        elif kind == MessageKind.PUSH_REQ:
            self._on_push_req(msg)
        elif kind == MessageKind.PULL_RESP:
            self._on_response(msg, msg.payload[0])
        elif kind == MessageKind.PUSH_ACK:
            self._on_response(msg, None)
        else:
            raise RoutingError(f"unexpected message kind {kind}")

    def _on_localize_req(self, msg: Message) -> None:
        key = msg.keys[0]
        ent = self.directory[key]
        if ent.owner == msg.requester:
            return  # grant already in flight to (or held by) the requester
        ent.version += 1
        old_owner, ent.owner = ent.owner, msg.requester
        self._node.send(
            Message(
                MessageKind.LOCALIZE_FORWARD,
                sender=self._node.node_id,
                receiver=old_owner,
                keys=[key],
                versions=[ent.version],
                new_owner=msg.requester,
                cause=msg.cause,
                forwarded=True,
            )
        )

    def _on_localize_forward(self, msg: Message) -> None:
        key = msg.keys[0]
        with self._node.latch(key):
            slot = self.store.pop(key, None)
        if slot is None:
            # We are the in-flight previous owner; replay after our grant lands.
            self._waiting.setdefault(key, deque()).append(msg)
            return
        if self._config.use_owner_hints:
            self._hints[key] = msg.new_owner
        self._node.send(
            Message(
                MessageKind.LOCALIZE_GRANT,
                sender=self._node.node_id,
                receiver=msg.new_owner,
                keys=[key],
                payload=[slot.value],
                versions=[msg.versions[0]],
                cause=msg.cause,
            )
        )

    def _on_localize_grant(self, msg: Message) -> None:
        key = msg.keys[0]
        version = msg.versions[0]
        value = np.asarray(msg.payload[0], dtype=self._config.value_dtype)
        with self._node.latch(key):
            self.store[key] = _Slot(value, version)
        if self._config.record_version_log:
            self.version_log.append((key, version))
        self._pending_localize.discard(key)
        self._hints.pop(key, None)
        self._settle_waiters(key)
        self._drain_waiting(key)

    def _settle_waiters(self, key: int) -> None:
        for batch in self._grant_waiters.pop(key, []):
            batch.arrived()

    def _drain_waiting(self, key: int) -> None:
        queue = self._waiting.get(key)
        if not queue:
            return
        while queue and key in self.store:
            self.on_message(queue.popleft())
        if not queue:
            self._waiting.pop(key, None)

    def _on_pull_req(self, msg: Message) -> None:
        key = msg.keys[0]
        with self._node.latch(key):
            slot = self.store.get(key)
            value = None if slot is None else slot.value.copy()
            version = None if slot is None else slot.version
        if value is not None:
            self._node.send(
                Message(
                    MessageKind.PULL_RESP,
                    sender=self._node.node_id,
                    receiver=msg.requester,
                    keys=[key],
                    payload=[value],
                    versions=[version],
                    request_id=msg.request_id,
                    cause=msg.cause,
                )
            )
            return
        self._reroute(msg)

    def _on_push_req(self, msg: Message) -> None:
        key = msg.keys[0]
        with self._node.latch(key):
            slot = self.store.get(key)
            if slot is not None:
                slot.value += msg.payload[0]
        if slot is not None:
            self._node.send(
                Message(
                    MessageKind.PUSH_ACK,
                    sender=self._node.node_id,
                    receiver=msg.requester,
                    keys=[key],
                    request_id=msg.request_id,
                    cause=msg.cause,
                )
            )
            return
        self._reroute(msg)

    def _reroute(self, msg: Message) -> None:
        """Route a pull/push we cannot serve: queue if the directory is about
        to make us owner, forward if we are the home, else bounce to home."""
        key = msg.keys[0]
        if msg.forwarded:
            self._waiting.setdefault(key, deque()).append(msg)
            return
        home = home_node_of(key, self._config)
        if self._node.node_id == home:
            owner = self.directory[key].owner
            if owner == self._node.node_id:
                # Directory points at us but the grant has not landed yet.
                msg.forwarded = True
                self._waiting.setdefault(key, deque()).append(msg)
                return
            msg.sender = self._node.node_id
            msg.receiver = owner
            msg.forwarded = True
        else:
            # Stale owner hint; fall back to the home node.
            msg.sender = self._node.node_id
            msg.receiver = home
        self._node.send(msg)

    def _on_response(self, msg: Message, value) -> None:
        fut = self._pending_ops.pop(msg.request_id, None)
        if fut is None:
            raise RoutingError(f"unmatched response {msg.request_id}")
        if self._config.use_owner_hints and msg.keys[0] not in self.store:
            self._hints[msg.keys[0]] = msg.sender
        fut.set_result(value)
