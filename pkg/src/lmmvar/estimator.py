"""Scikit-learn style front end: fit REML, BLUE/BLUP and the decomposition in one call."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.metrics import r2_score
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .bootstrap import parametric_bootstrap
from .decomposition import attribute, compute_moments, decompose
from .design import Dataset, ModelFrame, _level_label, build_model_frame
from .formula import parse_formula
from .inference import DEFAULT_COV_U_CAP, solve_blue_blup
from .reml import RemlConfig, fit_reml

__all__ = ["VarianceDecomposition"]


def _columns(X) -> dict:
    if isinstance(X, Dataset):
        return dict(X.columns)
    return {name: np.asarray(X[name]) for name in X.keys()}


class VarianceDecomposition(RegressorMixin, BaseEstimator):
    """Variance-components LMM with an additive decomposition of ``var(y)``.

    Parameters
    ----------
    formula : str, optional
        Model formula such as ``"Reaction ~ Days + (Days || Subject)"``. When
        given, ``fit`` takes a table (mapping, DataFrame or :class:`Dataset`).
        When omitted, ``fit`` takes arrays ``X``, ``y`` and ``random_blocks``.
    tol, tol_eqs, max_iter :
        REML stopping rule, see :class:`RemlConfig`.
    scale_y : bool
        Divide ``y`` by its sample standard deviation before fitting. Shares
        are unchanged; absolute quantities are then on the unit scale.
    n_bootstrap : int
        Parametric bootstrap replicates (0 disables).
    level, seed, n_jobs :
        Bootstrap interval level, RNG seed and worker count.
    cov_u_cap : int
        Largest ``p`` for which ``cov(u)`` is stored densely.

    Attributes
    ----------
    frame_ : ModelFrame
    reml_report_ : RemlReport
    variance_components_ : VarianceComponents
    intercept_ : float
    coef_ : ndarray of shape (k,)
    random_effects_ : ndarray of shape (p,)
    fit_result_ : FitResult
    moments_ : EmpiricalMoments
    decomposition_ : Decomposition
    attribution_ : AttributionTable
    bootstrap_ : BootstrapResult or None
    y_scale_ : float
        Factor ``y`` was divided by (1 unless ``scale_y``).
    """

    def __init__(self, formula=None, *, tol=1e-8, tol_eqs=1e-6, max_iter=500, scale_y=False,
                 n_bootstrap=0, level=0.95, seed=0, n_jobs=1, cov_u_cap=DEFAULT_COV_U_CAP):
        self.formula = formula
        self.tol = tol
        self.tol_eqs = tol_eqs
        self.max_iter = max_iter
        self.scale_y = scale_y
        self.n_bootstrap = n_bootstrap
        self.level = level
        self.seed = seed
        self.n_jobs = n_jobs
        self.cov_u_cap = cov_u_cap

    def _config(self) -> RemlConfig:
        return RemlConfig(tol=self.tol, tol_eqs=self.tol_eqs, max_iter=self.max_iter)

    def _frame(self, X, y, random_blocks) -> ModelFrame:
        if self.formula is not None:
            data = X if isinstance(X, Dataset) else Dataset.from_mapping(X)
            self.ast_ = parse_formula(self.formula)
            return build_model_frame(data, self.ast_)
        self.ast_ = None
        X, y = check_X_y(X, y, ensure_min_features=0, y_numeric=True)
        blocks = tuple(check_array(z, ensure_min_samples=len(y)) for z in (random_blocks or ()))
        for z in blocks:
            if z.shape[0] != len(y):
                raise ValueError("random blocks must have one row per observation")
        return ModelFrame(y, X, blocks)

    def fit(self, X, y=None, random_blocks=None):
        """Fit the model.

        Parameters
        ----------
        X : table or array of shape (n, k)
            The data table in formula mode, otherwise the fixed design
            without an intercept column.
        y : array of shape (n,), optional
            Response; ignored in formula mode.
        random_blocks : sequence of arrays of shape (n, p_i), optional
            Random-effect designs (array mode only).
        """
        frame = self._frame(X, y, random_blocks)
        self.y_scale_ = 1.0
        if self.scale_y:
            self.y_scale_ = float(np.std(frame.y, ddof=1))
            if self.y_scale_ > 0:
                frame = frame.with_response(frame.y / self.y_scale_)
        self.frame_ = frame
        self.reml_report_ = fit_reml(frame, self._config())
        self.variance_components_ = self.reml_report_.estimates
        fit = solve_blue_blup(frame, self.variance_components_, self.reml_report_, self.cov_u_cap)
        self.fit_result_ = fit
        self.intercept_ = fit.mu_hat
        self.coef_ = np.asarray(fit.beta_hat)
        self.random_effects_ = np.asarray(fit.u_tilde)
        self.moments_ = compute_moments(frame, self.cov_u_cap)
        self.decomposition_ = decompose(fit, self.moments_)
        self.attribution_ = attribute(fit, self.moments_, self.decomposition_)
        self.bootstrap_ = None
        if self.n_bootstrap:
            self.bootstrap_ = parametric_bootstrap(
                frame, fit, self.n_bootstrap, seed=self.seed, level=self.level,
                workers=self.n_jobs, config=self._config(),
            )
        self.n_features_in_ = frame.k
        return self

    @property
    def converged_(self) -> bool:
        check_is_fitted(self, "reml_report_")
        return self.reml_report_.converged

    def _designs(self, X, random_blocks):
        if self.ast_ is None:
            X = check_array(X, ensure_min_features=0)
            if X.shape[1] != self.frame_.k:
                raise ValueError(f"X has {X.shape[1]} columns, expected {self.frame_.k}")
            blocks = [check_array(z) for z in (random_blocks or ())]
            return X, blocks
        data = _columns(X)
        n = len(next(iter(data.values())))
        cols = [np.asarray(data[t], dtype=float) for t in self.ast_.fixed_terms]
        Xn = np.column_stack(cols) if cols else np.zeros((n, 0))
        blocks = []
        for spec, levels in zip(self.ast_.random_specs, self.frame_.level_labels):
            index = {lab: j for j, lab in enumerate(levels)}
            z = np.zeros((n, len(levels)))
            for row, v in enumerate(data[spec.group]):
                j = index.get(_level_label(v))
                if j is not None:
                    z[row, j] = 1.0
            if not spec.is_intercept:
                z *= np.asarray(data[spec.term], dtype=float)[:, None]
            blocks.append(z)
        return Xn, blocks

    def predict(self, X, random_blocks=None):
        """Conditional mean ``mu + X beta + sum_i Z_i u_i`` on the original ``y`` scale.

        Groups not seen during fitting contribute zero random effect; in array
        mode, omitting ``random_blocks`` gives the population-level prediction.
        """
        check_is_fitted(self, "fit_result_")
        Xn, blocks = self._designs(X, random_blocks)
        out = self.intercept_ + Xn @ self.coef_
        for i, z in enumerate(blocks):
            out = out + z @ self.fit_result_.u_block(i)
        return out * self.y_scale_

    def score(self, X, y=None, sample_weight=None, random_blocks=None):
        """Coefficient of determination of :meth:`predict` on ``(X, y)``."""
        if self.ast_ is not None:
            y = np.asarray(_columns(X)[self.ast_.response], dtype=float)
        return r2_score(y, self.predict(X, random_blocks), sample_weight=sample_weight)

    def shares(self) -> dict[str, float]:
        """Each attribution row as a fraction of ``sigma_y^2``, keyed ``"kind: label"``."""
        check_is_fitted(self, "attribution_")
        return {f"{row.kind}: {row.label}": row.share for row in self.attribution_.rows}
