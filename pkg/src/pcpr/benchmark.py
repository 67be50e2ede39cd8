"""Desk-scale benchmark: the default synthetic domains and training settings.

Runs here are small enough for a laptop CPU (tens of seconds each) while still
showing forgetting under plain fine-tuning.
"""

import time
from dataclasses import dataclass, replace

from .data import default_domains
from .evaluation import forgetting, mean_recall_at_1
from .losses import DistillSpec
from .trainer import Protocol, TrainConfig, run_protocol

# 16 stored pairs: a sixth of one domain's training set, close to the
# memory-to-dataset ratio of K=256 on a full-size benchmark.
DESK_MEMORY_K = 32
DESK_BATCH_ANCHORS = 8
DESK_LAMBDA_INIT = 0.1


def desk_config(method="incloud", seed=0, **overrides):
    cfg = TrainConfig(
        method=method,
        seed=seed,
        memory_K=DESK_MEMORY_K,
        batch_anchors=DESK_BATCH_ANCHORS,
        distill=DistillSpec(lambda_init=DESK_LAMBDA_INIT),
    )
    return replace(cfg, **overrides)


@dataclass
class BenchmarkRun:
    method: str
    seed: int
    matrix: object
    mean_recall: float
    forgetting: float
    cpu_seconds: float


def run_benchmark(method, seed, domains=None, protocol=Protocol.FOUR_STEP, **overrides):
    """One protocol run of ``method`` on the default domains (or ``domains``)."""
    domains = default_domains() if domains is None else domains
    started = time.process_time()
    result = run_protocol(domains, desk_config(method, seed, **overrides), protocol)
    return BenchmarkRun(
        method,
        seed,
        result.matrix,
        mean_recall_at_1(result.matrix),
        forgetting(result.matrix) if result.matrix.steps > 1 else None,
        time.process_time() - started,
    )
