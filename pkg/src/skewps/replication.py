"""Eager replication of hot keys with time-based staleness bounds.

Every node holds a replica of every replicated key.  Workers read the
replica plus their node's accumulated unsynced delta (so a node always sees
its own writes) and write by accumulating deltas locally; no network traffic
happens on the access path.  A periodic synchronization round all-reduces
the accumulated deltas of dirty keys with recursive doubling and folds the
sum into every replica, after which the accumulators reset.

Rounds exchange only dirty keys (a key written by nobody appears in no
payload) and run concurrently with workers: the round starts by atomically
swapping accumulators out, so writes landing mid-round simply join the next
round.  For non-power-of-two clusters the trailing nodes fold their
contribution into a partner before the doubling stages and receive the
total back afterwards.

Update clipping (optional): a delta whose L2 norm exceeds ``factor`` times
the tracked per-key mean norm is rescaled down to that bound.  The tracker
is an exponentially weighted mean of applied (post-clipping) norms, kept
per node; the first observed update initializes it unclipped.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .transport import Cause, Message, MessageKind
from .runtime import Future


class TechniqueMismatch(Exception):
    pass


@dataclass
class ClippingPolicy:
    enabled: bool = False
    factor: float = 2.0
    ewma_alpha: float = 0.1
    trackers: dict[int, float] = field(default_factory=dict)

    def apply(self, key: int, delta: np.ndarray) -> np.ndarray:
        if not self.enabled:
            return delta
        norm = float(np.linalg.norm(delta))
        if norm == 0.0:
            return delta
        mean = self.trackers.get(key)
        if mean is None:
            self.trackers[key] = norm
            return delta
        limit = self.factor * mean
        if norm > limit:
            delta = delta * (limit / norm)
            norm = limit
        self.trackers[key] = (1.0 - self.ewma_alpha) * mean + self.ewma_alpha * norm
        return delta


@dataclass
class _Replica:
    value: np.ndarray
    acc: np.ndarray
    dirty: bool = False


@dataclass
class SyncRound:
    round_id: int
    exchanged_keys: int
    started_us: float
    finished_us: float | None = None


class ReplicationManager:
    def __init__(self, node):
        self._node = node
        self._config = node.config
        self.replicas: dict[int, _Replica] = {}
        self.clip = ClippingPolicy(
            enabled=node.config.clip_enabled,
            factor=node.config.clip_factor,
            ewma_alpha=node.config.clip_ewma_alpha,
        )
        self._round: _RoundState | None = None
        self._round_queue: list[int] = []
        self._stage_buffer: dict[tuple[int, int], dict[int, np.ndarray]] = {}
        self._completions: list = []
        self.rounds_completed = 0

    # -- setup ------------------------------------------------------------

    def install_replica(self, key: int, value: np.ndarray) -> None:
        self.replicas[key] = _Replica(
            value=value, acc=np.zeros_like(value), dirty=False
        )

    @property
    def has_replicas(self) -> bool:
        return bool(self.replicas)

    def add_completion_listener(self, fn) -> None:
        """fn(node_id, round_id) invoked after a sync round finishes locally."""
        self._completions.append(fn)

    # -- worker-facing operations ------------------------------------------

    def read_locked(self, key: int) -> np.ndarray:
        rep = self.replicas.get(key)
        if rep is None:
            raise TechniqueMismatch(f"key {key} is not replicated")
        return rep.value + rep.acc

    def write_locked(self, key: int, delta: np.ndarray) -> None:
        rep = self.replicas.get(key)
        if rep is None:
            raise TechniqueMismatch(f"key {key} is not replicated")
        if not np.any(delta):
            return
        rep.acc += self.clip.apply(key, delta)
        rep.dirty = True

    def read(self, key: int) -> np.ndarray:
        with self._node.latch(key):
            return self.read_locked(key)

    def write(self, key: int, delta: np.ndarray) -> None:
        with self._node.latch(key):
            self.write_locked(key, delta)

    # -- synchronization rounds ---------------------------------------------

    def begin_round(self, round_id: int) -> None:
        """Swap accumulators and start the all-reduce for this round."""
        if self._round is not None:
            self._round_queue.append(round_id)
            return
        self._start_round(round_id)

    def _start_round(self, round_id: int) -> None:
        contributions: dict[int, np.ndarray] = {}
        for key, rep in self.replicas.items():
            with self._node.latch(key):
                if rep.dirty:
                    contributions[key] = rep.acc
                    rep.acc = np.zeros_like(rep.value)
                    rep.dirty = False
        self._round = _RoundState(round_id, contributions, self._node.runtime.now_us())
        self._pump()

    def on_message(self, msg: Message) -> None:
        if msg.kind != MessageKind.SYNC_EXCHANGE:
            raise TechniqueMismatch(f"unexpected message kind {msg.kind}")
        payload = {}
        if msg.keys:
            payload = {k: v for k, v in zip(msg.keys, msg.payload)}
        self._stage_buffer[(msg.round_id, msg.stage)] = payload
        self._pump()

    # Stage numbering: 0 = pre-fold, 1..m = doubling, m+1 = unfold.

    def _plan(self) -> tuple[int, int, int]:
        q = self._config.num_nodes
        m = q.bit_length() - 1
        base = 1 << m
        extra = q - base
        return base, extra, m

    def _pump(self) -> None:
        state = self._round
        if state is None:
            return
        rank = self._node.node_id
        base, extra, m = self._plan()
        while True:
            if state.next_stage == 0:  # pre-fold
                if extra == 0:
                    state.next_stage = 1
                    continue
                if rank >= base:
                    if not state.sent_stage0:
                        self._send_stage(rank - base, 0, state)
                        state.sent_stage0 = True
                    # Wait for the unfold result.
                    state.next_stage = m + 1
                    continue
                if rank < extra:
                    merged = self._take_stage(state.round_id, 0)
                    if merged is None:
                        return
                    _merge(state.partial, merged)
                state.next_stage = 1
                continue
            if 1 <= state.next_stage <= m:
                if rank >= base:
                    state.next_stage = m + 1
                    continue
                stage = state.next_stage
                partner = rank ^ (1 << (stage - 1))
                if not state.sent_doubling.get(stage):
                    self._send_stage(partner, stage, state)
                    state.sent_doubling[stage] = True
                merged = self._take_stage(state.round_id, stage)
                if merged is None:
                    return
                _merge(state.partial, merged)
                state.next_stage = stage + 1
                continue
            if state.next_stage == m + 1:  # unfold
                if rank >= base:
                    merged = self._take_stage(state.round_id, m + 1)
                    if merged is None:
                        return
                    state.partial = merged
                elif rank < extra and extra:
                    self._send_stage(rank + base, m + 1, state)
                self._finish_round(state)
                return

    def _send_stage(self, partner: int, stage: int, state: "_RoundState") -> None:
        keys = list(state.partial.keys())
        self._node.send(
            Message(
                MessageKind.SYNC_EXCHANGE,
                sender=self._node.node_id,
                receiver=partner,
                keys=keys,
                payload=[state.partial[k] for k in keys],
                cause=Cause.SYNC,
                round_id=state.round_id,
                stage=stage,
            )
        )

    def _take_stage(self, round_id: int, stage: int):
        return self._stage_buffer.pop((round_id, stage), None)

    def _finish_round(self, state: "_RoundState") -> None:
        for key, total in state.partial.items():
            rep = self.replicas[key]
            with self._node.latch(key):
                rep.value += np.asarray(total, dtype=rep.value.dtype)
        self._round = None
        self.rounds_completed += 1
        for fn in self._completions:
            fn(self._node.node_id, state.round_id)
        if self._round_queue:
            self._start_round(self._round_queue.pop(0))

    def exchanged_key_count(self) -> int:
        state = self._round
        return 0 if state is None else len(state.partial)


class _RoundState:
    __slots__ = ("round_id", "partial", "started_us", "next_stage", "sent_stage0", "sent_doubling")

    def __init__(self, round_id: int, partial: dict[int, np.ndarray], started_us: float):
        self.round_id = round_id
        self.partial = partial
        self.started_us = started_us
        self.next_stage = 0
        self.sent_stage0 = False
        self.sent_doubling: dict[int, bool] = {}


def _merge(into: dict[int, np.ndarray], other: dict[int, np.ndarray]) -> None:
    for key, delta in other.items():
        if key in into:
            into[key] = into[key] + np.asarray(delta)
        else:
            into[key] = np.asarray(delta)


class SyncScheduler:
    """Initiates sync rounds so consecutive starts are at least the staleness
    interval apart; an overrunning round pushes the next start to right after
    its completion without ever blocking workers."""

    def __init__(self, nodes, runtime, interval_us: float | None):
        self.nodes = nodes
        self.runtime = runtime
        self.interval_us = interval_us
        self.round_starts: list[float] = []
        self._next_round = 0
        self._pending: dict[int, set[int]] = {}
        self._round_done: dict[int, Future] = {}
        self._lock = threading.Lock()
        self._stopped = True
        self._timer = None
        self.active = interval_us is not None and any(
            n.replication.has_replicas for n in nodes
        )
        for node in nodes:
            node.replication.add_completion_listener(self._on_node_done)

    def start(self) -> None:
        if not self.active:
            return
        self._stopped = False
        when = self.runtime.now_us()
        if self.round_starts:
            # Honor the interval across pause/resume: never start a round
            # earlier than one interval after the previous round start.
            when = max(when, self.round_starts[-1] + self.interval_us)
        self._schedule(when)

    def stop(self) -> None:
        self._stopped = True
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None

    def _schedule(self, when: float) -> None:
        if self._stopped:
            return
        self._timer = self.runtime.call_at(when, self._fire)

    def _fire(self) -> None:
        if self._stopped:
            return
        fut = self.trigger_round()
        interval_target = self.runtime.now_us() + self.interval_us

        def _after(_fut):
            if not self._stopped:
                self._schedule(max(interval_target, self.runtime.now_us()))

        fut.add_done_callback(_after)

    def trigger_round(self) -> Future:
        """Start one round on every node; resolves when all nodes finished."""
        with self._lock:
            round_id = self._next_round
            self._next_round += 1
            self.round_starts.append(self.runtime.now_us())
            done = self.runtime.create_future()
            self._round_done[round_id] = done
            self._pending[round_id] = {n.node_id for n in self.nodes}
        for node in self.nodes:
            node.begin_sync_round(round_id)
        return done

    def _on_node_done(self, node_id: int, round_id: int) -> None:
        with self._lock:
            pending = self._pending.get(round_id)
            if pending is None:
                return
            pending.discard(node_id)
            if pending:
                return
            del self._pending[round_id]
            done = self._round_done.pop(round_id)
        done.set_result(round_id)

    def achieved_frequency_hz(self) -> float | None:
        """Observed round starts per second of (virtual) time."""
        if len(self.round_starts) < 2:
            return None
        span_us = self.round_starts[-1] - self.round_starts[0]
        if span_us <= 0:
            return None
        return (len(self.round_starts) - 1) / (span_us / 1e6)
