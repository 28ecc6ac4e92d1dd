"""Shared domain types, cluster configuration, and static technique assignment.

A model is a dense key space ``[0, num_keys)`` where every key maps to a
fixed-width vector of ``value_dim`` scalars.  Each key is managed by exactly
one technique for the whole run: hot keys are replicated on every node with
bounded staleness, long-tail keys keep a single owning copy that relocates
between nodes on demand.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path

import numpy as np

Key = int
NodeId = int


class ManagementTechnique(Enum):
    REPLICATED = "replicated"
    RELOCATED = "relocated"


@dataclass(frozen=True)
class ClusterConfig:
    """Static configuration shared by every node of a cluster.

    ``staleness_ms=None`` disables replica synchronization entirely
    (replicas diverge and evaluation falls back to node 0's copies).
    """

    num_nodes: int = 1
    workers_per_node: int = 1
    value_dim: int = 8
    num_keys: int = 64
    staleness_ms: float | None = 40.0
    replication_threshold_factor: float = 100.0
    pool_size: int = 250
    use_frequency: int = 16
    # Pool-preparation heuristic: relocation time is estimated as the mean
    # over this many recent pool localizations.
    pool_estimator_window: int = 8
    rng_seed: int = 0
    single_precision: bool = False
    # Transport model (simulated): fixed base latency plus seeded jitter.
    net_latency_us: float = 50.0
    net_jitter_us: float = 25.0
    # Remember the last responding owner of a relocated key and contact it
    # directly on the next remote access.  Off by default so that message
    # accounting follows the documented home-routed costs.
    use_owner_hints: bool = False
    # Update clipping for replicated keys.
    clip_enabled: bool = False
    clip_factor: float = 2.0
    clip_ewma_alpha: float = 0.1
    collect_access_histogram: bool = True
    record_version_log: bool = False

    def __post_init__(self):
        if self.num_nodes < 1:
            raise ValueError("num_nodes must be >= 1")
        if self.workers_per_node < 1:
            raise ValueError("workers_per_node must be >= 1")
        if self.value_dim < 1 or self.num_keys < 1:
            raise ValueError("value_dim and num_keys must be >= 1")
        if self.staleness_ms is not None and not self.staleness_ms > 0:
            raise ValueError("staleness_ms must be > 0 (or None to disable)")
        if self.replication_threshold_factor <= 0:
            raise ValueError("replication_threshold_factor must be > 0")
        if self.pool_size < 1 or self.use_frequency < 1:
            raise ValueError("pool_size and use_frequency must be >= 1")

    @property
    def value_dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self.single_precision else np.float64)

    @property
    def staleness_us(self) -> float | None:
        return None if self.staleness_ms is None else self.staleness_ms * 1000.0

    @property
    def keys_per_node(self) -> int:
        return math.ceil(self.num_keys / self.num_nodes)


@dataclass(frozen=True)
class KeyDescriptor:
    """Per-key management metadata: technique, directory authority, owner hint."""

    key: Key
    technique: ManagementTechnique
    home_node: NodeId
    owner_hint: NodeId | None = None


def assign_techniques(
    access_counts, threshold_factor: float
) -> list[ManagementTechnique]:
    """Pick a management technique per key from access-frequency statistics.

    A key is replicated iff its count strictly exceeds ``threshold_factor``
    times the mean count; every other key is relocated.  Computed once from
    dataset statistics before a run, never re-assigned online.
    """
    counts = np.asarray(access_counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise ValueError("access_counts must be a non-empty 1-d sequence")
    if np.any(counts < 0):
        raise ValueError("access_counts must be non-negative")
    if not np.any(counts > 0):
        raise ValueError("access_counts must contain at least one positive count")
    if threshold_factor <= 0:
        raise ValueError("threshold_factor must be positive")
    threshold = threshold_factor * counts.mean()
    return [
        ManagementTechnique.REPLICATED if c > threshold else ManagementTechnique.RELOCATED
        for c in counts
    ]


def replicate_top_k(access_counts, k: int) -> list[ManagementTechnique]:
    """Replicate exactly the k most frequently accessed keys (ties by key id)."""
    counts = np.asarray(access_counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise ValueError("access_counts must be a non-empty 1-d sequence")
    k = min(max(k, 0), counts.size)
    out = [ManagementTechnique.RELOCATED] * counts.size
    if k:
        top = np.argsort(-counts, kind="stable")[:k]
        for i in top:
            out[int(i)] = ManagementTechnique.REPLICATED
    return out


def home_node_of(key: Key, config: ClusterConfig) -> NodeId:
    """Directory authority for a key: contiguous ranges of equal width."""
    if not 0 <= key < config.num_keys:
        raise ValueError(f"key {key} out of range [0, {config.num_keys})")
    return key // config.keys_per_node


def home_key_range(node: NodeId, config: ClusterConfig) -> range:
    """Keys homed at ``node`` (may be empty for trailing nodes)."""
    width = config.keys_per_node
    lo = node * width
    hi = min(lo + width, config.num_keys)
    return range(lo, max(lo, hi))


_CONFIG_FIELDS = {f.name: f for f in fields(ClusterConfig)}


def _coerce_config_value(name: str, raw):
    if name not in _CONFIG_FIELDS:
        raise ValueError(f"unknown config field: {name}")
    if isinstance(raw, str):
        text = raw.strip()
        if text.lower() in ("none", "null", "inf"):
            return None
        if text.lower() in ("true", "false"):
            return text.lower() == "true"
        try:
            return int(text)
        except ValueError:
            return float(text)
    return raw


def load_cluster_config(path: str | Path, **overrides) -> ClusterConfig:
    """Read a ClusterConfig from JSON or ``key=value`` lines.

    Keyword overrides (typically CLI flags) win over file contents.
    """
    text = Path(path).read_text()
    stripped = text.lstrip()
    values: dict = {}
    if stripped.startswith("{"):
        for name, raw in json.loads(text).items():
            values[name] = _coerce_config_value(name, raw)
    else:
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"expected key=value, got: {line!r}")
            name, raw = line.split("=", 1)
            values[name.strip()] = _coerce_config_value(name.strip(), raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ClusterConfig(**values)


def seeded_value(key: Key, config: ClusterConfig, scale: float = 0.1) -> np.ndarray:
    """Deterministic per-key initial value, identical on any node and for any
    cluster size (keeps single-node and multi-node runs comparable)."""
    rng = np.random.default_rng(np.random.SeedSequence((config.rng_seed, 0x5EED, key)))
    return (scale * rng.standard_normal(config.value_dim)).astype(config.value_dtype)
