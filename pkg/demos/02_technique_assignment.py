"""Choosing a management technique per key from access statistics.

Skewed workloads touch a few keys constantly and most keys rarely.  The
assignment rule replicates a key only when its access count exceeds 100
times the mean; everything else relocates.  On a zipf-shaped histogram that
puts a handful of hot keys under replication and the long tail under
relocation.
"""

import numpy as np

from skewps import ManagementTechnique, assign_techniques
from skewps.sampling import AliasTable
from skewps.workloads import zipf_probs

rng = np.random.default_rng(7)

num_keys = 20_000
draws = 2_000_000
print(f"simulating {draws:,} accesses over {num_keys:,} keys, zipf exponent 1.1 ...")
table = AliasTable(zipf_probs(num_keys, 1.1))
counts = np.bincount(table.draw(rng, draws), minlength=num_keys)

mean = counts.mean()
print(f"mean accesses per key: {mean:.0f}")
for rank in (0, 1, 9, 99, 999, num_keys - 1):
    print(f"  key at popularity rank {rank + 1:>6}: {counts[rank]:>8} accesses "
          f"({counts[rank] / mean:7.1f}x mean)")

techniques = assign_techniques(counts, threshold_factor=100.0)
replicated = [k for k, t in enumerate(techniques) if t is ManagementTechnique.REPLICATED]
print(f"\nreplicate if count > 100x mean  ->  {len(replicated)} keys replicated, "
      f"{num_keys - len(replicated)} relocated")
print(f"replicated keys carry {counts[replicated].sum() / draws:.1%} of all accesses")

print("\nlowering the factor replicates more of the head:")
for factor in (200.0, 100.0, 50.0, 25.0):
    n = sum(t is ManagementTechnique.REPLICATED for t in assign_techniques(counts, factor))
    print(f"  factor {factor:>5}: {n:>4} replicated keys")
