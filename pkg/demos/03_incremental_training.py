"""Fine-tuning forgets, InCloud forgets less.

Four synthetic domains arrive one at a time. Each method trains on the newest
domain only and is evaluated on everything seen so far. The recall matrix rows
are steps and columns are domains, so forgetting shows up as a column shrinking
downward. Pass an epoch count to trade accuracy for speed (default 60, about 20 s
per method on one core).
"""

import sys

from pcpr.benchmark import run_benchmark
from pcpr.data import default_domains

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 60
domains = default_domains()
for d in domains:
    print(f"{d.name}: {len(d.train)} train, {len(d.test_database)} database, {len(d.test_queries)} queries")

for method in ("ft", "incloud"):
    run = run_benchmark(method, seed=0, domains=domains, epochs=epochs)
    print(f"\n{method}: mR@1 {run.mean_recall:.1f}  F {run.forgetting:.1f}  ({run.cpu_seconds:.0f}s)")
    print(run.matrix.to_csv(), end="")
