"""The replay memory keeps every past domain equally represented.

Six tiny domains are folded into a bank holding 16 clouds (8 pairs). After each
update the per-domain pair counts differ by at most one, and the total never
exceeds capacity.
"""

from pcpr.data import SyntheticDomainSpec, generate_domain
from pcpr.memory import MemoryBank

bank = MemoryBank(capacity_clouds=16, rng_seed=0)
for d in range(6):
    ds = generate_domain(SyntheticDomainSpec(seed=d, num_places=8, revisit_count=2, points_per_cloud=16), domain_id=d)
    bank.update(ds)
    print(f"after domain {d}: {len(bank)} pairs, per domain {bank.counts()}")

e = bank.entries[0]
print(f"\nfirst stored pair: domain {e.domain_id}, samples {e.anchor.sample_id} and {e.positive.sample_id}")
