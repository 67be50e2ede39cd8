from pcpr.benchmark import DESK_BATCH_ANCHORS, DESK_LAMBDA_INIT, DESK_MEMORY_K, desk_config, run_benchmark
from pcpr.data import SyntheticDomainSpec, generate_domain
from pcpr.trainer import Method, Protocol


def tiny_domains(n=2):
    return [
        generate_domain(SyntheticDomainSpec(seed=40 + i, num_places=6, revisit_count=2, points_per_cloud=16), domain_id=i)
        for i in range(n)
    ]


def test_desk_config_defaults_and_overrides():
    cfg = desk_config("ft", seed=2)
    assert cfg.method is Method.FT and cfg.seed == 2
    assert cfg.memory_K == DESK_MEMORY_K and cfg.batch_anchors == DESK_BATCH_ANCHORS
    assert cfg.distill.lambda_init == DESK_LAMBDA_INIT
    assert desk_config(epochs=3).epochs == 3


def test_run_benchmark_reports_metrics():
    run = run_benchmark("incloud", 0, tiny_domains(), epochs=2)
    assert run.matrix.steps == 2
    assert 0 <= run.mean_recall <= 100
    assert run.forgetting is not None and run.cpu_seconds > 0


def test_single_step_run_has_no_forgetting():
    run = run_benchmark("joint", 0, tiny_domains(), Protocol.TWO_STEP, epochs=1)
    assert run.matrix.steps == 1 and run.forgetting is None
