"""Spectator-qubit dephasing mitigation: Bayesian engine, closed forms,
density-matrix Monte-Carlo simulator, and spectator-count strategy analysis
for a quantum-network memory under emulated entanglement generation."""

__version__ = "0.1.0"

from . import analytic, dm_sim, phase_dist, strategy
from .analytic import (DephasingModel, FitResult, SpamParams,
                       compensation_angle_gaussian, fidelity_one_spectator,
                       fit_fidelity_xy, fit_fidelity_z, mean_phase_after_outcome,
                       optimal_rephasing_time, sigma_of_n)
from .dm_sim import (DensityState, EnsembleOutcome, NuclearSpinSpec, Protocol,
                     ProtocolOutcome, ReadoutModel, Register, SequenceConfig,
                     bloch_of_memory, build_propagators, effective_a_par_te,
                     ensemble_run, entanglement_attempt, gate_based_step,
                     initial_state, measure_spectator, run_sequence,
                     standard_register, te_us_for_step)
from .phase_dist import (PhaseGrid, PhaseStats, SpectatorMeasurement,
                         bayes_update, fidelity_along, gate_posterior,
                         gaussian_prior, optimal_compensation,
                         optimal_readout_angle, phase_stats, syndrome_average,
                         uniform_grid)
from .strategy import (FidelityCurve, StrategyReport, curve_from_fit,
                       expected_fidelity, strategy_sweep, success_pmf)
