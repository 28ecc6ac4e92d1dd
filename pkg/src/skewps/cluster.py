"""Node assembly and cluster construction for both execution modes.

A node co-locates its share of the directory, the relocation store, replica
slots for every replicated key, the sampling manager, and its workers.  The
simulated cluster runs all nodes on one deterministic virtual-time event
loop; the socket cluster runs the same node objects against TCP transports
and real threads.
"""

from __future__ import annotations

import threading

import numpy as np

from .api import WorkerContext
from .core import (
    ClusterConfig,
    KeyDescriptor,
    ManagementTechnique,
    home_node_of,
    seeded_value,
)
from .relocation import RelocationManager
from .replication import ReplicationManager, SyncScheduler
from .runtime import SimRuntime, ThreadRuntime, gather
from .sampling import SamplingManager
from .transport import Cause, MessageKind, SimTransport, SocketTransport


class Latch:
    """Per-key lock with an acquisition counter (diagnostic only)."""

    __slots__ = ("_lock", "acquisitions")

    def __init__(self):
        self._lock = threading.Lock()
        self.acquisitions = 0

    def __enter__(self):
        self.acquisitions += 1
        self._lock.acquire()
        return self

    def __exit__(self, *exc):
        self._lock.release()
        return False


class Node:
    def __init__(self, node_id: int, config: ClusterConfig, runtime, transport, replicated_mask):
        self.node_id = node_id
        self.config = config
        self.runtime = runtime
        self.transport = transport
        self._replicated = replicated_mask
        self._latches: dict[int, Latch] = {}
        self._latch_guard = threading.Lock()
        self._serial_lock = threading.RLock()
        self.relocation = RelocationManager(self)
        self.replication = ReplicationManager(self)
        self.sampling = SamplingManager(self)
        if config.collect_access_histogram:
            self.direct_access = np.zeros(config.num_keys, dtype=np.int64)
            self.sampling_access = np.zeros(config.num_keys, dtype=np.int64)
        else:
            self.direct_access = None
            self.sampling_access = None
        transport.register(node_id, self.on_message)

    def is_replicated(self, key: int) -> bool:
        return bool(self._replicated[key])

    def is_relocated(self, key: int) -> bool:
        return not self._replicated[key]

    def descriptor(self, key: int) -> KeyDescriptor:
        """This node's current management view of a key."""
        if self.is_replicated(key):
            return KeyDescriptor(key, ManagementTechnique.REPLICATED, home_node_of(key, self.config))
        return KeyDescriptor(
            key,
            ManagementTechnique.RELOCATED,
            home_node_of(key, self.config),
            owner_hint=self.relocation._hints.get(key),
        )

    def latch(self, key: int) -> Latch:
        latch = self._latches.get(key)
        if latch is None:
            with self._latch_guard:
                latch = self._latches.setdefault(key, Latch())
        return latch

    def send(self, msg) -> None:
        self.transport.send(msg)

    def on_message(self, msg) -> None:
        with self._serial_lock:
            if msg.kind == MessageKind.SYNC_EXCHANGE:
                self.replication.on_message(msg)
            else:
                self.relocation.on_message(msg)

    def begin_sync_round(self, round_id: int) -> None:
        with self._serial_lock:
            self.replication.begin_round(round_id)

    def count_access(self, key: int, cause: Cause) -> None:
        if self.direct_access is None:
            return
        if cause == Cause.SAMPLING:
            self.sampling_access[key] += 1
        else:
            self.direct_access[key] += 1


def _replicated_mask(config: ClusterConfig, techniques) -> np.ndarray:
    if techniques is None:
        return np.zeros(config.num_keys, dtype=bool)
    if len(techniques) != config.num_keys:
        raise ValueError("techniques must cover every key")
    return np.array(
        [t == ManagementTechnique.REPLICATED for t in techniques], dtype=bool
    )


def _install_values(nodes, config, mask, init_fn):
    for key in range(config.num_keys):
        if mask[key]:
            for node in nodes:
                node.replication.install_replica(key, init_fn(key).copy())
        else:
            home = key // config.keys_per_node
            nodes[home].relocation.install_initial(key, init_fn(key))


class SimCluster:
    """Deterministic in-process cluster on a virtual clock."""

    def __init__(self, config: ClusterConfig, techniques=None, init_fn=None):
        self.config = config
        self.runtime = SimRuntime()
        self.transport = SimTransport(
            self.runtime,
            config.num_nodes,
            latency_us=config.net_latency_us,
            jitter_us=config.net_jitter_us,
            seed=config.rng_seed,
        )
        mask = _replicated_mask(config, techniques)
        self.nodes = [
            Node(i, config, self.runtime, self.transport, mask)
            for i in range(config.num_nodes)
        ]
        init_fn = init_fn or (lambda key: seeded_value(key, config))
        _install_values(self.nodes, config, mask, init_fn)
        self.scheduler = SyncScheduler(self.nodes, self.runtime, config.staleness_us)
        self.contexts = [
            WorkerContext(
                node,
                w,
                np.random.default_rng(
                    np.random.SeedSequence((config.rng_seed, 0x30B, node.node_id, w))
                ),
            )
            for node in self.nodes
            for w in range(config.workers_per_node)
        ]

    @property
    def counter(self):
        return self.transport.counter

    def start(self) -> None:
        self.scheduler.start()

    def run_tasks(self, coros) -> list:
        """Spawn coroutines and drive the loop until all complete."""
        tasks = [self.runtime.spawn(c) for c in coros]
        return self.runtime.run_until(gather([t.future for t in tasks]))

    def quiesce(self) -> None:
        """Stop periodic syncing and drain every in-flight event."""
        self.scheduler.stop()
        self.runtime.run_until_idle()

    def resume(self) -> None:
        self.scheduler.start()

    def final_sync(self) -> None:
        """One last round so replicas converge after workers stop."""
        if self.scheduler.active:
            self.scheduler.stop()
            self.scheduler.trigger_round()
            self.runtime.run_until_idle()

    def drain(self) -> None:
        self.quiesce()

    # -- global state inspection (no messages; harness/eval only) ----------

    def owner_of(self, key: int) -> int:
        home = key // self.config.keys_per_node
        return self.nodes[home].relocation.directory[key].owner

    def peek_value(self, key: int) -> np.ndarray:
        """Current global value of a key; call on a quiescent cluster.  For
        replicated keys this is node 0's view (replica plus unsynced delta)."""
        if self.nodes[0].is_replicated(key):
            return self.nodes[0].replication.read(key)
        slot = self.nodes[self.owner_of(key)].relocation.store.get(key)
        if slot is None:
            raise RuntimeError(f"key {key} is in transit; quiesce first")
        return slot.value.copy()

    def access_histogram(self) -> tuple[np.ndarray, np.ndarray]:
        direct = np.zeros(self.config.num_keys, dtype=np.int64)
        sampled = np.zeros(self.config.num_keys, dtype=np.int64)
        for node in self.nodes:
            if node.direct_access is not None:
                direct += node.direct_access
                sampled += node.sampling_access
        return direct, sampled


class SocketCluster:
    """Same node stack over TCP loopback transports and real threads."""

    def __init__(self, config: ClusterConfig, techniques=None, init_fn=None, base_port: int = 0):
        self.config = config
        self.runtime = ThreadRuntime()
        self.transports = []
        addresses = {}
        if base_port:
            addresses = {
                i: ("127.0.0.1", base_port + i) for i in range(config.num_nodes)
            }
        else:
            # Bind to ephemeral ports first, then share the address map.
            import socket as _socket

            socks = []
            for i in range(config.num_nodes):
                s = _socket.socket()
                s.bind(("127.0.0.1", 0))
                socks.append(s)
                addresses[i] = ("127.0.0.1", s.getsockname()[1])
            for s in socks:
                s.close()
        mask = _replicated_mask(config, techniques)
        self.nodes = []
        for i in range(config.num_nodes):
            transport = SocketTransport(i, addresses)
            self.transports.append(transport)
            self.nodes.append(Node(i, config, self.runtime, transport, mask))
        init_fn = init_fn or (lambda key: seeded_value(key, config))
        _install_values(self.nodes, config, mask, init_fn)
        self.scheduler = SyncScheduler(self.nodes, self.runtime, config.staleness_us)
        self.contexts = [
            WorkerContext(
                node,
                w,
                np.random.default_rng(
                    np.random.SeedSequence((config.rng_seed, 0x30B, node.node_id, w))
                ),
            )
            for node in self.nodes
            for w in range(config.workers_per_node)
        ]

    def start(self) -> None:
        self.scheduler.start()

    def run_tasks(self, coros, timeout_s: float = 120.0) -> list:
        futures = [self.runtime.spawn(c) for c in coros]
        return [f.wait(timeout_s) for f in futures]

    def message_total(self) -> int:
        return sum(t.counter.total for t in self.transports)

    def close(self) -> None:
        self.scheduler.stop()
        for t in self.transports:
            t.close()
        self.runtime.close()
