"""Objective Bayesian analysis of Gaussian processes with separable correlation."""

from .correlation import CorrelationFamily, FactorModel
from .coverage import (
    CoverageReport, StudyConfig, Truth, equally_spaced_grid, propriety_probe, run_study,
    simulate_dataset,
)
from .data import DesignGrid, GpDataset, constant_mean
from .kron import KroneckerFactors, kron_logdet, kron_quadratic_form, kron_solve, kron_trace
from .likelihood import (
    gls_auxiliaries, log_integrated_theta, log_integrated_theta_sigma, log_likelihood,
)
from .mcmc import Chain, ChainControls, ProposalSpec, proposal_covariance, run_chain, summarize
from .mle import FisherInfo, MleResult, ScoringControls, fisher_scoring, integrated_score
from .priors import (
    PriorSpec, jeffreys_ind_log_prior, jeffreys_rule_log_prior, reference_log_prior,
)

__version__ = "0.1.0"
