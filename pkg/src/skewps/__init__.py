"""skewps: a parameter server engine that manages each key with its own
technique (relocation for the long tail, bounded-staleness replication for
hot spots) and serves randomized sampling through a dedicated API with
selectable conformity levels.  Ships with a deterministic cluster
simulator, desk-scale training workloads, and a benchmark/verification
harness."""

from .core import (
    ClusterConfig,
    KeyDescriptor,
    ManagementTechnique,
    assign_techniques,
    home_node_of,
    load_cluster_config,
    replicate_top_k,
)
from .cluster import SimCluster, SocketCluster
from .sampling import ConformityLevel, SampleHandle, TargetDistribution
from .transport import Cause, Message, MessageKind

__all__ = [
    "ClusterConfig",
    "KeyDescriptor",
    "ManagementTechnique",
    "assign_techniques",
    "replicate_top_k",
    "home_node_of",
    "load_cluster_config",
    "SimCluster",
    "SocketCluster",
    "ConformityLevel",
    "SampleHandle",
    "TargetDistribution",
    "Cause",
    "Message",
    "MessageKind",
]
