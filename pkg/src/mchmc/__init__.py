"""Microcanonical Hamiltonian and Langevin Monte Carlo samplers."""

from .bench import ExperimentConfig, ExperimentReport, emit_report, grid_search, run_experiment
from .decoherence import RngBatch, RngStream, full_bounce, partial_refresh
from .dynamics import SamplerState, leapfrog_step, minimal_norm_step, momentum_update, position_update
from .estimators import (MomentAccumulator, autocorr_neff, entropy_bias_cauchy, ess_from_curve,
                         second_moment_bias)
from .samplers import ChainResult, SamplerConfig, run, run_mchmc, run_mclmc, run_q2, run_uhmc
from .targets import TargetDistribution, make_target
from .tuning import TuningReport, autotune

__version__ = "0.1.0"
