"""End-to-end checks of the full node stack over the TCP transport."""

import numpy as np
import pytest

from skewps.cluster import SocketCluster
from skewps.core import ClusterConfig, ManagementTechnique

REP = ManagementTechnique.REPLICATED
REL = ManagementTechnique.RELOCATED


@pytest.fixture
def cluster():
    cfg = ClusterConfig(
        num_nodes=2,
        num_keys=8,
        value_dim=3,
        workers_per_node=1,
        staleness_ms=None,
    )
    c = SocketCluster(
        cfg,
        techniques=[REP, REL, REL, REL, REL, REL, REL, REL],
        init_fn=lambda k: np.full(3, float(k)),
    )
    yield c
    c.close()


class TestSocketCluster:
    def test_remote_pull_and_push(self, cluster):
        ctx = cluster.contexts[0]

        async def job():
            vals = await ctx.pull([7])  # homed at node 1
            assert np.array_equal(vals[0], [7, 7, 7])
            ctx.push([7], [np.ones(3)])
            await ctx.flush()
            vals = await ctx.pull([7])
            return vals[0]

        (value,) = cluster.run_tasks([job()], timeout_s=30.0)
        assert np.array_equal(value, [8, 8, 8])
        assert cluster.message_total() >= 4

    def test_localize_moves_ownership(self, cluster):
        ctx = cluster.contexts[0]

        async def job():
            await ctx.node.relocation.localize([7])
            return ctx.node.relocation.is_local(7)

        (local,) = cluster.run_tasks([job()], timeout_s=30.0)
        assert local
        assert not cluster.nodes[1].relocation.is_local(7)

    def test_replica_sync_round_over_sockets(self, cluster):
        cluster.nodes[0].replication.write(0, np.array([1.0, 0.0, 0.0]))
        cluster.nodes[1].replication.write(0, np.array([0.0, 2.0, 0.0]))
        done = cluster.scheduler.trigger_round()
        done.wait(30.0)
        for node in cluster.nodes:
            np.testing.assert_allclose(node.replication.read(0), [1.0, 2.0, 0.0])

    def test_concurrent_workers_conserve_pushes(self, cluster):
        async def pusher(ctx, delta):
            for _ in range(25):
                ctx.push([3], [delta])
            await ctx.flush()

        cluster.run_tasks(
            [
                pusher(cluster.contexts[0], np.array([1.0, 0.0, 0.0])),
                pusher(cluster.contexts[1], np.array([0.0, 1.0, 0.0])),
            ],
            timeout_s=30.0,
        )
        owner = [n for n in cluster.nodes if n.relocation.is_local(3)]
        assert len(owner) == 1
        value = owner[0].relocation.try_read(3)
        np.testing.assert_allclose(value, [28.0, 28.0, 3.0])  # init 3 + 25 + base

    def test_sampling_over_sockets(self, cluster):
        mgr = cluster.nodes[0].sampling
        dist_id = mgr.register_distribution(np.full(8, 1 / 8), "L1")
        ctx = cluster.contexts[0]

        async def job():
            handle = ctx.prepare_sample(dist_id, 12)
            keys, values = await ctx.pull_sample(handle)
            return keys, values

        ((keys, values),) = cluster.run_tasks([job()], timeout_s=30.0)
        assert len(keys) == 12
        for k, v in zip(keys, values):
            assert v[0] == pytest.approx(float(k))
