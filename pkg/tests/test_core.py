import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from skewps.core import (
    ClusterConfig,
    ManagementTechnique,
    assign_techniques,
    home_key_range,
    home_node_of,
    load_cluster_config,
    replicate_top_k,
    seeded_value,
)

REP = ManagementTechnique.REPLICATED
REL = ManagementTechnique.RELOCATED


class TestAssignTechniques:
    def test_uniform_counts_never_replicate(self):
        assert assign_techniques([5, 5, 5, 5], 100.0) == [REL] * 4

    def test_single_hot_key(self):
        # mean = (1e6 + 999) / 1000 ~= 1000.999, threshold ~= 100099.9 < 1e6
        counts = [10**6] + [1] * 999
        out = assign_techniques(counts, 100.0)
        assert out[0] == REP
        assert all(t == REL for t in out[1:])

    def test_single_key_equals_own_mean(self):
        assert assign_techniques([1], 100.0) == [REL]

    def test_boundary_is_strict(self):
        # count == factor * mean stays relocated; strictly above replicates
        assert assign_techniques([200, 0, 0, 0], 4.0) == [REL] * 4
        assert assign_techniques([400, 0, 0, 0], 3.0)[0] == REP

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            assign_techniques([], 100.0)
        with pytest.raises(ValueError):
            assign_techniques([0, 0, 0], 100.0)
        with pytest.raises(ValueError):
            assign_techniques([1, 2], 0.0)

    @given(
        counts=st.lists(st.integers(min_value=0, max_value=10**6), min_size=2, max_size=50),
        factor=st.floats(min_value=0.5, max_value=200.0),
        bump=st.integers(min_value=1, max_value=10**6),
    )
    def test_monotone_in_own_count(self, counts, factor, bump):
        if not any(counts):
            counts[0] = 1
        base = assign_techniques(counts, factor)
        for i, t in enumerate(base):
            if t == REP:
                bumped = list(counts)
                bumped[i] += bump
                assert assign_techniques(bumped, factor)[i] == REP

    def test_deterministic(self):
        counts = [3, 1, 4, 1, 5, 900]
        assert assign_techniques(counts, 2.0) == assign_techniques(counts, 2.0)


class TestTopK:
    def test_exact_k(self):
        out = replicate_top_k([5, 1, 9, 7], 2)
        assert out == [REL, REL, REP, REP]

    def test_k_zero_and_overflow(self):
        assert replicate_top_k([1, 2], 0) == [REL, REL]
        assert replicate_top_k([1, 2], 10) == [REP, REP]


class TestHomeNode:
    def test_examples(self):
        cfg = ClusterConfig(num_nodes=4, num_keys=100)
        assert home_node_of(0, cfg) == 0
        assert home_node_of(99, cfg) == 3  # ceil(100/4)=25, 99//25=3
        assert home_node_of(50, ClusterConfig(num_nodes=1, num_keys=100)) == 0

    def test_ranges_partition_key_space(self):
        for q, n in [(1, 7), (3, 10), (4, 100), (5, 11), (8, 8), (7, 100)]:
            cfg = ClusterConfig(num_nodes=q, num_keys=n)
            seen = []
            for node in range(q):
                r = home_key_range(node, cfg)
                assert all(home_node_of(k, cfg) == node for k in r)
                seen.extend(r)
            assert seen == list(range(n))

    def test_out_of_range(self):
        cfg = ClusterConfig(num_nodes=2, num_keys=10)
        with pytest.raises(ValueError):
            home_node_of(10, cfg)
        with pytest.raises(ValueError):
            home_node_of(-1, cfg)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            ClusterConfig(num_nodes=0)
        with pytest.raises(ValueError):
            ClusterConfig(staleness_ms=0.0)
        ClusterConfig(staleness_ms=None)  # disabled syncing is fine

    def test_json_file(self, tmp_path):
        path = tmp_path / "cluster.json"
        path.write_text(json.dumps({"num_nodes": 3, "staleness_ms": 8.0}))
        cfg = load_cluster_config(path)
        assert cfg.num_nodes == 3 and cfg.staleness_ms == 8.0

    def test_key_value_file_with_overrides(self, tmp_path):
        path = tmp_path / "cluster.cfg"
        path.write_text(
            "num_nodes = 4\n"
            "staleness_ms = none   # disabled\n"
            "\n"
            "pool_size=16\n"
            "clip_enabled=true\n"
        )
        cfg = load_cluster_config(path, pool_size=32)
        assert cfg.num_nodes == 4
        assert cfg.staleness_ms is None
        assert cfg.pool_size == 32
        assert cfg.clip_enabled is True

    def test_unknown_field_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("bogus=1\n")
        with pytest.raises(ValueError):
            load_cluster_config(path)

    def test_seeded_value_is_reproducible_and_dim(self):
        cfg = ClusterConfig(value_dim=6, rng_seed=7)
        a, b = seeded_value(3, cfg), seeded_value(3, cfg)
        assert a.shape == (6,) and np.array_equal(a, b)
        assert not np.array_equal(a, seeded_value(4, cfg))
        assert seeded_value(3, ClusterConfig(value_dim=6, rng_seed=8)).tolist() != a.tolist()
