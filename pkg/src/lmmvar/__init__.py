"""Variance-components linear mixed models with an additive decomposition of var(y)."""

from .bootstrap import BootstrapError, BootstrapResult, parametric_bootstrap
from .decomposition import (
    AttributionRow,
    AttributionTable,
    Decomposition,
    EmpiricalMoments,
    attribute,
    attribute_cross,
    attribute_fixed,
    attribute_random,
    compute_moments,
    decompose,
    lm_reference,
)
from .design import DataError, Dataset, ModelFrame, build_model_frame, load_sleepstudy, read_csv
from .estimator import VarianceDecomposition
from .formula import CorrelationIgnoredWarning, FormulaAst, FormulaError, RandomTerm, parse_formula, render_formula
from .inference import FitResult, solve_blue_blup
from .kernels import KernelState, identity_suite
from .reml import (
    ConvergenceWarning,
    DegenerateFrameError,
    RemlConfig,
    RemlReport,
    VarianceComponents,
    fit_reml,
    reml_equations,
    restricted_loglik,
    sigma_eps2_reformulations,
)

__version__ = "0.1.0"
