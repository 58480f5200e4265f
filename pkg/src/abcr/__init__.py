"""Robust approximate Bayesian computation with M-estimating function summaries."""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .estfun import (DEFAULT_C1, DEFAULT_C2, EstimatingFunctionModel, TuningConstants,
                     consistency_k, huber_psi, huber_weight)
from .numerics import (RngStream, SpdMatrix, draw_mvn, draw_mvt, gauss_quadrature, kde_density,
                       matrix_sqrt)
from .toy import (ContaminationSpec, ToyModel, ToyTheta, toy_analytic_HJ, toy_psi, toy_psi_units,
                  toy_simulate, toy_solve)
from .lmm import (LmmDesign, LmmModel, LmmTheta, design_from_long, lmm_loglik, lmm_simulate,
                  lmm_solve, robust_reml2_psi)
from .priors import HalfCauchy, Normal, PriorSpec
from .godambe import MEstimate, estimate_H, estimate_J, fit_mestimate, sandwich
from .sampler import (AbcrConfig, Chain, SummaryContext, abcr_mcmc, calibrate_h, kernel_log,
                      summary_stat)
from .baselines import GridPosterior, el_wstat, el_wstat_units, full_mh, grid_posterior
from .harness import (EvidenceResult, SimStudyConfig, SimStudyRecord, fbst_evidence,
                      posterior_summaries, run_abcr, sensitivity_study, simulation_study)
