"""paneltensor: counterfactual imputation for multi-outcome panel data.

Stacks a primary outcome and auxiliary control outcomes into a
unit x period x outcome tensor, imputes the missing untreated values of the
primary outcome by nuclear-norm completion of the unit-mode unfolding, and
turns the imputations into average relative treatment effects with residual
bootstrap uncertainty. Ships negative-binomial log-linear and single-layer
completion baselines, simulation benchmarks, and a CLI.
"""

__version__ = "0.1.0"

from .baselines import (
    NBFit,
    NBModelSpec,
    NegativeBinomialGLM,
    as_completion_dataset,
    delta_method_interval,
    fit_nb,
    impute_nb,
    matrix_completion_baseline,
)
from .causal import (
    bootstrap_interval,
    estimate_delta,
    impute_counterfactuals,
    panel_masked_matrix,
    select_lambda,
)
from .panel import CellEffect, Diagnostics, EffectEstimate, PanelDataset, assemble_tensor
from .simulate import (
    SimResult,
    SimScenario,
    generate,
    propensity_mask,
    rate_experiment,
    run_comparison,
)
from .solver import (
    CompletionFit,
    CovariateModel,
    MaskedMatrix,
    NumericalError,
    SoftImpute,
    SolverConfig,
    complete,
    complete_with_covariates,
    cross_validate_lambda,
    default_lambda_grid,
    observed_operator_norm,
    svt,
)
from .tensor import ModeMatrix, Tensor3, fold, mode_product, outer3, tucker_compose, unfold

__all__ = [
    "__version__",
    "CellEffect",
    "CompletionFit",
    "CovariateModel",
    "Diagnostics",
    "EffectEstimate",
    "MaskedMatrix",
    "ModeMatrix",
    "NBFit",
    "NBModelSpec",
    "NegativeBinomialGLM",
    "NumericalError",
    "PanelDataset",
    "SimResult",
    "SimScenario",
    "SoftImpute",
    "SolverConfig",
    "Tensor3",
    "as_completion_dataset",
    "assemble_tensor",
    "bootstrap_interval",
    "complete",
    "complete_with_covariates",
    "cross_validate_lambda",
    "default_lambda_grid",
    "delta_method_interval",
    "estimate_delta",
    "fit_nb",
    "fold",
    "generate",
    "impute_counterfactuals",
    "impute_nb",
    "matrix_completion_baseline",
    "mode_product",
    "observed_operator_norm",
    "outer3",
    "panel_masked_matrix",
    "propensity_mask",
    "rate_experiment",
    "run_comparison",
    "select_lambda",
    "svt",
    "tucker_compose",
    "unfold",
]
