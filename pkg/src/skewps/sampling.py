"""Randomized sampling access with selectable conformity levels.

Applications register a fixed categorical target distribution over keys
together with the conformity level they require, then draw through a
prepare/pull pair: ``prepare_sample`` returns a handle instantly and kicks
off preparatory work, ``pull_sample`` delivers (key, value) pairs, all at
once or in partial pulls.  The level picks the scheme:

    L1  independent sampling   fresh iid draw per sample, localized ahead
    L2  pooled sample reuse    pools of G iid draws, each delivered U times
                               across U randomly ordered pool traversals
    L3  reuse with postponing  as L2, but a non-local sample is moved to the
                               end of its handle (at most once) while its
                               parameter relocates
    L4  local sampling         draws restricted to keys currently available
                               on this node, read without any network traffic

L1 draws are iid from the target.  The pooled scheme keeps first-order
frequencies exact while bounding the dependency between samples by U*G
positions.  Postponing permutes deliveries within one handle only, so each
handle's delivered multiset equals its drawn multiset and long-run
frequencies still match the target.  Local sampling gives no distributional
guarantee: a key owned elsewhere is simply never drawn.

Pool preparation runs ahead of consumption: the stream tracks how long pool
relocations took recently and how fast samples are being consumed, and
triggers the next pool once the remaining prepared samples cover less than
twice the estimated relocation time.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .runtime import Future
from .transport import Cause

PROB_TOLERANCE = 1e-9


class ConformityLevel(Enum):
    L1 = "L1"
    L2 = "L2"
    L3 = "L3"
    L4 = "L4"


class HandleExhausted(Exception):
    pass


class AliasTable:
    """Walker/Vose alias structure: O(n) build, O(1) categorical draws."""

    def __init__(self, probs):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size == 0:
            raise ValueError("probs must be a non-empty 1-d vector")
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise ValueError("probs must be finite and non-negative")
        total = probs.sum()
        if abs(total - 1.0) > PROB_TOLERANCE:
            raise ValueError(f"probabilities sum to {total}, expected 1")
        n = probs.size
        scaled = probs * (n / total)
        self.prob = np.ones(n)
        self.alias = np.arange(n)
        small = [i for i in range(n) if scaled[i] < 1.0]
        large = [i for i in range(n) if scaled[i] >= 1.0]
        while small and large:
            s = small.pop()
            l = large.pop()
            self.prob[s] = scaled[s]
            self.alias[s] = l
            scaled[l] -= 1.0 - scaled[s]
            (small if scaled[l] < 1.0 else large).append(l)

    def draw(self, rng: np.random.Generator, n: int | None = None):
        size = 1 if n is None else n
        idx = rng.integers(0, self.prob.size, size=size)
        accept = rng.random(size) < self.prob[idx]
        out = np.where(accept, idx, self.alias[idx])
        return int(out[0]) if n is None else out


@dataclass
class TargetDistribution:
    """Fixed categorical distribution over a key subset plus its level."""

    dist_id: int
    support: np.ndarray  # key ids
    probs: np.ndarray
    level: ConformityLevel
    alias: AliasTable

    @property
    def num_outcomes(self) -> int:
        return self.support.size


@dataclass
class _Sample:
    key: int
    postponed: bool = False


@dataclass
class SampleHandle:
    handle_id: int
    dist_id: int
    total: int
    delivered: int = 0
    queue: deque = field(default_factory=deque)

    @property
    def remaining(self) -> int:
        return self.total - self.delivered


def pool_delivery_order(rng: np.random.Generator, pool_keys: np.ndarray, use_frequency: int) -> np.ndarray:
    """U traversals of the pool, each in a fresh random order."""
    return np.concatenate(
        [pool_keys[rng.permutation(pool_keys.size)] for _ in range(use_frequency)]
    )


def iid_key_stream(dist: TargetDistribution, rng: np.random.Generator, n: int) -> np.ndarray:
    """n independent draws from the target; the L1 key sequence."""
    return dist.support[dist.alias.draw(rng, n)]


def pooled_key_stream(
    dist: TargetDistribution,
    rng: np.random.Generator,
    n: int,
    pool_size: int,
    use_frequency: int,
) -> np.ndarray:
    """The pooled-reuse key sequence: consecutive pools of G iid draws, each
    delivered as U randomly ordered traversals."""
    chunks = []
    produced = 0
    while produced < n:
        keys = dist.support[dist.alias.draw(rng, pool_size)]
        order = pool_delivery_order(rng, keys, use_frequency)
        chunks.append(order)
        produced += order.size
    return np.concatenate(chunks)[:n]


def should_trigger_pool_fill(
    unused_samples: int, est_relocation_s: float, consumption_per_s: float
) -> bool:
    """Prepare another pool once the unused supply covers less than twice the
    estimated relocation time at the observed consumption rate."""
    return unused_samples < 2.0 * est_relocation_s * consumption_per_s


class _PoolStream:
    """Node-level stream of pooled samples for one distribution."""

    def __init__(self, mgr: "SamplingManager", dist: TargetDistribution):
        self._mgr = mgr
        self._dist = dist
        self._rng = mgr.rng
        self.pool_size = mgr.node.config.pool_size
        self.use_frequency = mgr.node.config.use_frequency
        self._queue: deque[int] = deque()
        self._ready: deque[np.ndarray] = deque()
        self._pools_spawned = 0
        self.draw_log: list[int] = []
        self._reloc_durations_us: deque[float] = deque(
            maxlen=mgr.node.config.pool_estimator_window
        )
        self._taken_log: deque[tuple[float, int]] = deque(maxlen=64)
        self._taken_total = 0
        self._spawn_pool()  # bootstrap eagerly, before any duration estimate

    def take(self, n: int) -> list[int]:
        while len(self._queue) < n:
            self._activate_next()
        out = [self._queue.popleft() for _ in range(n)]
        self._taken_total += n
        self._taken_log.append((self._mgr.node.runtime.now_us(), self._taken_total))
        self._fill_check()
        return out

    def _activate_next(self) -> None:
        if not self._ready:
            self._spawn_pool()
        self._queue.extend(int(k) for k in self._ready.popleft())

    def _spawn_pool(self) -> None:
        keys = self._dist.support[self._dist.alias.draw(self._rng, self.pool_size)]
        self.draw_log.extend(int(k) for k in keys)
        order = pool_delivery_order(self._rng, keys, self.use_frequency)
        self._ready.append(order)
        self._pools_spawned += 1
        started = self._mgr.node.runtime.now_us()
        fut = self._mgr.localize_for_sampling(keys)
        fut.add_done_callback(
            lambda _f: self._reloc_durations_us.append(
                self._mgr.node.runtime.now_us() - started
            )
        )

    def unused_samples(self) -> int:
        return len(self._queue) + sum(len(p) for p in self._ready)

    def consumption_per_s(self) -> float | None:
        if len(self._taken_log) < 2:
            return None
        (t0, c0), (t1, c1) = self._taken_log[0], self._taken_log[-1]
        if t1 <= t0:
            return None
        return (c1 - c0) / ((t1 - t0) / 1e6)

    def _fill_check(self) -> None:
        if not self._reloc_durations_us:
            # No completed relocation yet; keep one pool prepared ahead.
            if not self._ready:
                self._spawn_pool()
            return
        rate = self.consumption_per_s()
        if rate is None:
            return
        est_s = float(np.mean(self._reloc_durations_us)) / 1e6
        if should_trigger_pool_fill(self.unused_samples(), est_s, rate):
            self._spawn_pool()


class _SchemeBase:
    level: ConformityLevel

    def __init__(self, mgr: "SamplingManager", dist: TargetDistribution):
        self.mgr = mgr
        self.dist = dist

    def prepare(self, handle: SampleHandle) -> None:
        raise NotImplementedError

    async def pull(self, handle: SampleHandle, n: int) -> tuple[list[int], list[np.ndarray]]:
        raise NotImplementedError

    # shared delivery helper: local read under one latch, else remote pull
    async def _fetch_values(self, keys: list[int]) -> list[np.ndarray]:
        node = self.mgr.node
        values: list = [None] * len(keys)
        pending = []
        for i, key in enumerate(keys):
            with node.latch(key):
                if node.is_replicated(key):
                    values[i] = node.replication.read_locked(key)
                else:
                    values[i] = node.relocation.read_local_locked(key)
            if values[i] is None:
                pending.append((i, node.relocation.pull_remote(key, Cause.SAMPLING)))
        for i, fut in pending:
            values[i] = np.asarray(await fut, dtype=node.config.value_dtype)
        return values


class IndependentSampling(_SchemeBase):
    level = ConformityLevel.L1

    def prepare(self, handle: SampleHandle) -> None:
        keys = iid_key_stream(self.dist, self.mgr.rng, handle.total)
        handle.queue.extend(_Sample(int(k)) for k in keys)
        self.mgr.localize_for_sampling(keys)

    async def pull(self, handle, n):
        keys = [handle.queue.popleft().key for _ in range(n)]
        return keys, await self._fetch_values(keys)


class PooledReuse(_SchemeBase):
    """Sample reuse over pools; dependency between samples is bounded by the
    pool footprint U*G."""

    level = ConformityLevel.L2

    def __init__(self, mgr, dist):
        super().__init__(mgr, dist)
        self.stream = _PoolStream(mgr, dist)

    @property
    def dependency_bound(self) -> int:
        return self.stream.pool_size * self.stream.use_frequency

    def prepare(self, handle: SampleHandle) -> None:
        keys = self.stream.take(handle.total)
        handle.queue.extend(_Sample(k) for k in keys)
        self.mgr.localize_for_sampling(keys)

    async def pull(self, handle, n):
        keys = [handle.queue.popleft().key for _ in range(n)]
        return keys, await self._fetch_values(keys)


class PooledReuseWithPostponing(PooledReuse):
    """As PooledReuse, but a sample whose key is not local is re-localized and
    moved to the end of its handle, at most once per sample; when an already
    postponed sample surfaces again it is accessed remotely if necessary."""

    level = ConformityLevel.L3

    async def pull(self, handle, n):
        node = self.mgr.node
        keys: list[int] = []
        values: list[np.ndarray] = []
        while len(keys) < n:
            sample = handle.queue.popleft()
            value = self._try_local(sample.key)
            if value is None and not sample.postponed:
                sample.postponed = True
                handle.queue.append(sample)
                self.mgr.localize_for_sampling([sample.key])
                continue
            if value is None:
                value = np.asarray(
                    await node.relocation.pull_remote(sample.key, Cause.SAMPLING),
                    dtype=node.config.value_dtype,
                )
            keys.append(sample.key)
            values.append(value)
        return keys, values

    def _try_local(self, key: int):
        node = self.mgr.node
        with node.latch(key):
            if node.is_replicated(key):
                return node.replication.read_locked(key)
            return node.relocation.read_local_locked(key)


class LocalSampling(_SchemeBase):
    """Draws only keys currently available on this node and reads them
    locally; no preparatory work, no network traffic on the happy path.

    If no key of the target's support is locally available the scheme falls
    back to one independent draw plus a localize (counted in
    ``fallback_draws``) so that a pull always completes.
    """

    level = ConformityLevel.L4
    MAX_TRIES = 16

    def __init__(self, mgr, dist):
        super().__init__(mgr, dist)
        self.fallback_draws = 0

    def prepare(self, handle: SampleHandle) -> None:
        pass  # nothing to do: keys are drawn at pull time

    async def pull(self, handle, n):
        keys: list[int] = []
        values: list[np.ndarray] = []
        for _ in range(n):
            key, value = self._draw_local()
            if value is None:
                key, value = await self._fallback()
            keys.append(key)
            values.append(value)
        return keys, values

    def _draw_local(self):
        # Rejection against the full target: cheap, and exact conditional
        # frequencies on the locally available support.
        for _ in range(self.MAX_TRIES):
            key = int(self.dist.support[self.dist.alias.draw(self.mgr.rng)])
            value = self._try_local(key)
            if value is not None:
                return key, value
        # Slow path: exact weighted draw over whatever is local right now.
        local = [
            (int(k), p)
            for k, p in zip(self.dist.support, self.dist.probs)
            if self._is_local(int(k))
        ]
        if not local:
            return -1, None
        weights = np.array([p for _, p in local])
        pick = self.mgr.rng.choice(len(local), p=weights / weights.sum())
        key = local[int(pick)][0]
        return key, self._try_local(key)

    async def _fallback(self):
        self.fallback_draws += 1
        key = int(self.dist.support[self.dist.alias.draw(self.mgr.rng)])
        self.mgr.localize_for_sampling([key])
        value = self._try_local(key)
        if value is None:
            value = np.asarray(
                await self.mgr.node.relocation.pull_remote(key, Cause.SAMPLING),
                dtype=self.mgr.node.config.value_dtype,
            )
        return key, value

    def _is_local(self, key: int) -> bool:
        node = self.mgr.node
        return node.is_replicated(key) or node.relocation.is_local(key)

    def _try_local(self, key: int):
        node = self.mgr.node
        with node.latch(key):
            if node.is_replicated(key):
                return node.replication.read_locked(key)
            return node.relocation.read_local_locked(key)


_SCHEMES = {
    ConformityLevel.L1: IndependentSampling,
    ConformityLevel.L2: PooledReuse,
    ConformityLevel.L3: PooledReuseWithPostponing,
    ConformityLevel.L4: LocalSampling,
}


class SamplingManager:
    def __init__(self, node):
        self.node = node
        self.rng = np.random.default_rng(
            np.random.SeedSequence((node.config.rng_seed, 0x5A3, node.node_id))
        )
        self._dists: dict[int, TargetDistribution] = {}
        self.schemes: dict[int, _SchemeBase] = {}
        self._dist_ids = itertools.count()
        self._handle_ids = itertools.count()

    def register_distribution(self, probs, level, support=None) -> int:
        """Build the draw structures and select the scheme admitted at the
        requested conformity level; returns the distribution reference."""
        if isinstance(level, str):
            level = ConformityLevel(level)
        probs = np.asarray(probs, dtype=np.float64)
        if support is None:
            support = np.arange(probs.size, dtype=np.int64)
        else:
            support = np.asarray(support, dtype=np.int64)
        if support.size != probs.size:
            raise ValueError("support and probs must have the same length")
        if np.any(support < 0) or np.any(support >= self.node.config.num_keys):
            raise ValueError("support keys out of range")
        dist_id = next(self._dist_ids)
        dist = TargetDistribution(dist_id, support, probs, level, AliasTable(probs))
        self._dists[dist_id] = dist
        self.schemes[dist_id] = _SCHEMES[level](self, dist)
        return dist_id

    def distribution(self, dist_id: int) -> TargetDistribution:
        return self._dists[dist_id]

    def prepare_sample(self, dist_id: int, n: int) -> SampleHandle:
        if dist_id not in self._dists:
            raise KeyError(f"unknown distribution {dist_id}")
        if n < 1:
            raise ValueError("sample count must be >= 1")
        handle = SampleHandle(next(self._handle_ids), dist_id, n)
        self.schemes[dist_id].prepare(handle)
        return handle

    async def pull_sample(self, handle: SampleHandle, n: int | None = None):
        if n is None:
            n = handle.remaining
        if n < 1 or n > handle.remaining:
            raise HandleExhausted(
                f"requested {n} of {handle.remaining} remaining samples"
            )
        keys, values = await self.schemes[handle.dist_id].pull(handle, n)
        handle.delivered += n
        for key in keys:
            self.node.count_access(key, Cause.SAMPLING)
        return keys, values

    def localize_for_sampling(self, keys) -> Future:
        """Issue an ownership request for the relocated, non-local keys among
        ``keys``; message traffic is attributed to sampling."""
        node = self.node
        wanted = [int(k) for k in keys if not node.is_replicated(int(k))]
        return node.relocation.localize(wanted, Cause.SAMPLING)
