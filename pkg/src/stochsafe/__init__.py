"""Safe control for unknown stochastic systems.

Identify drift and diffusion from replicated one-step data, certify
safety with barrier-function chains under the process generator, filter
controls through a min-norm QP, and verify by seeded Monte Carlo.
"""
from .autodiff import Dual2, value_grad_hess
from .barrier import (BarrierChain, EstimationError, EvaluationError,
                      GeneratorAffine, InvalidInitialStateError,
                      RelativeDegreeError, SafetyBound, ScalarField,
                      SupEstimate, build_chain, generator,
                      make_box_sup_estimator, sup_over_set, worst_case_bound)
from .benchmarks import (ACC_DEFAULTS, BENCHMARK_NAMES, ConfigurationError,
                         acc_barrier, acc_clf, benchmark, example1_barrier)
from .controller import (SafePolicy, StepRecord, clf_constraint,
                         safe_policy_eval, scbf_constraint,
                         write_qp_trace_csv)
from .diffusion import (DiffusionPosterior, ResidualDataset,
                        collect_residuals, map_sigma, read_residual_csv,
                        sample_sigma_posterior, write_posterior_csv,
                        write_residual_csv)
from .harness import (ExperimentConfig, MseReport, SafetyReport, TrialRecord,
                      binomial_ci, load_config, run_experiment, run_mse_eval,
                      run_safety_trial_batch)
from .qp import (ConstraintRow, QpInfeasibleError, QpSolution, QpSpec,
                 solve_qp)
from .sde import (IntegrationDivergedError, NoiseStream, SdeModel,
                  Trajectory, constant_policy, em_step, simulate, trial_rng,
                  write_trajectory_csv, zero_policy)
from .sysid import (Basis, BlrPosterior, DriftDataset, IllPosedError,
                    basis_from_names, collect_drift_data, fit_blr, fit_drift,
                    learned_model, load_posterior, pilot_noise_variance,
                    polynomial_basis_2d, predict_drift, read_drift_csv,
                    save_posterior, write_drift_csv)

__version__ = "0.1.0"

__all__ = [
    "ACC_DEFAULTS", "BENCHMARK_NAMES", "BarrierChain", "Basis",
    "BlrPosterior", "ConfigurationError", "ConstraintRow",
    "DiffusionPosterior", "DriftDataset", "Dual2", "EstimationError",
    "EvaluationError", "ExperimentConfig", "GeneratorAffine",
    "IllPosedError", "IntegrationDivergedError", "InvalidInitialStateError",
    "MseReport", "NoiseStream", "QpInfeasibleError", "QpSolution", "QpSpec",
    "RelativeDegreeError", "SafePolicy", "SafetyBound", "SafetyReport",
    "ScalarField", "SdeModel", "StepRecord", "SupEstimate", "Trajectory",
    "TrialRecord", "acc_barrier", "acc_clf", "basis_from_names", "benchmark",
    "binomial_ci", "build_chain", "clf_constraint", "collect_drift_data",
    "collect_residuals", "constant_policy", "em_step", "example1_barrier",
    "fit_blr", "fit_drift", "generator", "learned_model", "load_config",
    "load_posterior", "make_box_sup_estimator", "map_sigma",
    "pilot_noise_variance", "polynomial_basis_2d", "predict_drift",
    "read_drift_csv", "read_residual_csv", "run_experiment", "run_mse_eval",
    "run_safety_trial_batch", "safe_policy_eval", "sample_sigma_posterior",
    "save_posterior", "scbf_constraint", "simulate", "solve_qp",
    "sup_over_set", "trial_rng", "value_grad_hess", "worst_case_bound",
    "write_drift_csv", "write_posterior_csv", "write_qp_trace_csv",
    "write_residual_csv", "write_trajectory_csv", "zero_policy",
]
