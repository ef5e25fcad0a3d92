"""Species richness estimation from zero-truncated abundance counts.

The model splits abundances into a parametric rare component (weight q)
and an arbitrary abundant component supported above a truncation
threshold tau.  The package provides conditional maximum-likelihood
fitting, efficiency diagnostics, data-driven threshold selection,
Monte Carlo evaluation, and sample-enlargement extrapolation, plus a CLI
(``truncrich``).
"""

from .counts import CountData, CountFormatError, load_counts, read_counts_file
from .families import (Family, NegativeBinomial, Poisson, PoissonMixture,
                       TruncatedPoissonSupport, family_from_string)
from .fit import (FitError, FitOptions, FitResult, chao, f_pseudo, fit_full,
                  fit_theta, n_classical, n_hat, q_hat, tau_min,
                  zelterman_theta)
from .efficiency import (asymptotic_covariance, efficient_score,
                         fisher_information, score_residual)
from .selection import SelectionTrace, TauRecord, bias_proxy, bootstrap_variance, select_tau
from .simulate import SimDesign, SimReport, UniformNuisance, CustomNuisance, generate, run_monte_carlo
from .growth import (GrowthCurve, bundled_corpus_path, extrapolate,
                     growth_curve, growth_experiment, tokenize)

__version__ = "0.1.0"
