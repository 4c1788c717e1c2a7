"""Secure remote state estimation under false-data-injection attacks."""

from .attack import Attacker, AttackSpec, corrupt_observation, stealth_transform, transform_innovation
from .detect import Detect, SafeFilter, learn_eta, learn_threshold, precompute_subset_covariances
from .harness import ExperimentConfig, MetricsReport, export_report, run_constrained_sweep, run_estimation_experiment, run_roc
from .kalman import FilterState, SteadyState, error_cov_step, kf_step, limiting_cov, riccati_fixed_point
from .process_model import StateTrajectory, SystemModel, generate_random_system, simulate
from .sec import SecEstimator, StepSchedules, write_slot_records

__all__ = [
    "AttackSpec",
    "Attacker",
    "Detect",
    "ExperimentConfig",
    "FilterState",
    "MetricsReport",
    "SafeFilter",
    "SecEstimator",
    "StateTrajectory",
    "SteadyState",
    "StepSchedules",
    "SystemModel",
    "corrupt_observation",
    "error_cov_step",
    "export_report",
    "generate_random_system",
    "kf_step",
    "learn_eta",
    "learn_threshold",
    "limiting_cov",
    "precompute_subset_covariances",
    "riccati_fixed_point",
    "run_constrained_sweep",
    "run_estimation_experiment",
    "run_roc",
    "simulate",
    "stealth_transform",
    "transform_innovation",
    "write_slot_records",
]
