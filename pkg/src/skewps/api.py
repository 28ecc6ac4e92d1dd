"""Uniform worker-facing access: pull/push over both techniques.

Application code never sees which technique manages a key: ``pull`` and
``push`` dispatch internally, and the technique check plus the local
allocation check happen under a single per-key latch acquisition.  Returned
values are dedicated working copies, so callers may mutate them freely.
Pulls block (``await``) until every value is available; pushes apply local
writes immediately and forward remote ones asynchronously, with ``flush``
awaiting all outstanding acknowledgements.
"""

from __future__ import annotations

import numpy as np

from .runtime import Future, gather
from .transport import Cause


class WorkerContext:
    """One handle per worker; offers direct access plus the sampling API."""

    def __init__(self, node, worker_id: int, rng: np.random.Generator):
        self.node = node
        self.worker_id = worker_id
        self.rng = rng
        self._outstanding: list[Future] = []

    @property
    def config(self):
        return self.node.config

    @property
    def runtime(self):
        return self.node.runtime

    # -- direct access -------------------------------------------------------

    async def pull(self, keys) -> list[np.ndarray]:
        node = self.node
        results: list = [None] * len(keys)
        pending: list[tuple[int, Future]] = []
        for i, key in enumerate(keys):
            self._check_key(key)
            with node.latch(key):
                if node.is_replicated(key):
                    results[i] = node.replication.read_locked(key)
                else:
                    results[i] = node.relocation.read_local_locked(key)
            if results[i] is None:
                pending.append((i, node.relocation.pull_remote(key, Cause.DIRECT)))
            node.count_access(key, Cause.DIRECT)
        if pending:
            values = await gather([fut for _, fut in pending])
            for (i, _), value in zip(pending, values):
                results[i] = np.asarray(value, dtype=node.config.value_dtype)
        return results

    def push(self, keys, deltas) -> None:
        if len(keys) != len(deltas):
            raise ValueError("keys and deltas must have the same length")
        node = self.node
        for key, delta in zip(keys, deltas):
            self._check_key(key)
            applied = False
            with node.latch(key):
                if node.is_replicated(key):
                    node.replication.write_locked(key, delta)
                    applied = True
                else:
                    applied = node.relocation.apply_push_locked(key, delta)
            if not applied:
                self._outstanding.append(
                    node.relocation.push_remote(key, delta, Cause.DIRECT)
                )
            node.count_access(key, Cause.DIRECT)

    def localize_hint(self, keys) -> None:
        """Fire-and-forget ownership request for relocated keys; replicated
        keys are ignored."""
        wanted = []
        for key in keys:
            self._check_key(key)
            if not self.node.is_replicated(key):
                wanted.append(key)
        if wanted:
            self.node.relocation.localize(wanted, Cause.RELOCATION)

    async def flush(self) -> None:
        """Wait for acknowledgement of every remote push issued so far."""
        outstanding, self._outstanding = self._outstanding, []
        pending = [f for f in outstanding if not f.done()]
        if pending:
            await gather(pending)

    async def advance(self, cost_us: float) -> None:
        """Account compute time: suspends for ``cost_us`` on the node clock."""
        await self.runtime.sleep(cost_us)

    # -- sampling access -------------------------------------------------------

    def register_distribution(self, probs, level, support=None) -> int:
        return self.node.sampling.register_distribution(probs, level, support)

    def prepare_sample(self, dist_id: int, n: int):
        return self.node.sampling.prepare_sample(dist_id, n)

    async def pull_sample(self, handle, n: int | None = None):
        return await self.node.sampling.pull_sample(handle, n)

    def _check_key(self, key) -> None:
        if not 0 <= key < self.node.config.num_keys:
            raise KeyError(f"key {key} out of range [0, {self.node.config.num_keys})")
