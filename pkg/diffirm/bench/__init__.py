"""
Ground-truth benchmarks: the motivating SCM and the planted-causal graph fixture.
"""
from diffirm.bench.checks import QualityChecks
from diffirm.bench.graph_scm import (
    GraphBenchReport,
    audit_graph_scm,
    audit_passes,
    generate_graph_scm,
    graph_acceptance_checks,
    graph_train_config,
    run_graph_benchmark,
)
from diffirm.bench.scm import (
    ConditionalReport,
    MotivatingReport,
    closed_form_erm,
    conditional_checks,
    generate_scm,
    random_augmentation_baseline,
    run_acceptance_checks,
    run_motivating_experiment,
)

__all__ = [
    "QualityChecks",
    "GraphBenchReport", "audit_graph_scm", "audit_passes", "generate_graph_scm",
    "graph_acceptance_checks", "graph_train_config", "run_graph_benchmark",
    "ConditionalReport", "MotivatingReport", "closed_form_erm", "conditional_checks",
    "generate_scm", "random_augmentation_baseline", "run_acceptance_checks", "run_motivating_experiment",
]
