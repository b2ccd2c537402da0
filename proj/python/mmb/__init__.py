"""Mixture-of-Bayesian prompt ensembles for LLM judges."""

from ._core import (
    ClusterModel,
    FitResult,
    MmbError,
    bootstrap_mean_ci,
    by_fdr,
    evaluate,
    fit_bpe,
    fit_mmb,
    paired_permutation_test,
    predict,
    run_compare,
    run_eval,
    run_fit,
    run_report,
    spherical_kmeans,
    synth,
)

__all__ = [
    "ClusterModel",
    "FitResult",
    "MmbError",
    "bootstrap_mean_ci",
    "by_fdr",
    "evaluate",
    "fit_bpe",
    "fit_mmb",
    "paired_permutation_test",
    "predict",
    "run_compare",
    "run_eval",
    "run_fit",
    "run_report",
    "spherical_kmeans",
    "synth",
]
