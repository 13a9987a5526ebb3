"""Restricted maximum likelihood for the variance components.

The estimates solve the REML stationarity equations (with ``P = P_H^I``)::

    sigma_eps^2 = y'Py / (n - k - 1) = y'PPy / tr(P)
    sigma_eps^2 tr(P Z_i Z_i') = y'P Z_i Z_i' P y          (i = 1..r)

Iteration runs on the variance ratios ``gamma_i`` with ``sigma_eps^2``
profiled out through the first equation, on ``y`` rescaled to unit sample
variance. The multiplicative fixed-point update
``gamma_i <- gamma_i * y'PZ_iZ_i'Py / (sigma_eps^2 tr(PZ_iZ_i'))`` is
safeguarded by step-halving on the restricted log-likelihood; once a
projected Newton step on the profiled criterion is an ascent step it is
preferred, which gives quadratic convergence near the solution.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .design import ModelFrame
from .kernels import KernelState

__all__ = [
    "ConvergenceWarning",
    "DegenerateFrameError",
    "RemlConfig",
    "RemlReport",
    "VarianceComponents",
    "fit_reml",
    "reml_equations",
    "restricted_loglik",
    "sigma_eps2_reformulations",
]

logger = logging.getLogger(__name__)


class DegenerateFrameError(ValueError):
    pass


# residual variance (as a fraction of var(y)) below which the fit is treated
# as interpolating the response: sigma_eps^2 > 0 then has no REML maximum
MIN_RESIDUAL_FRACTION = 1e-10


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class VarianceComponents:
    sigma_eps2: float
    sigma_u2: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "sigma_eps2", float(self.sigma_eps2))
        object.__setattr__(self, "sigma_u2", tuple(float(s) for s in np.ravel(self.sigma_u2)))
        if not (np.isfinite(self.sigma_eps2) and self.sigma_eps2 > 0):
            raise ValueError(f"sigma_eps2 must be finite and > 0, got {self.sigma_eps2}")
        if any(not np.isfinite(s) or s < 0 for s in self.sigma_u2):
            raise ValueError(f"sigma_u2 must be finite and >= 0, got {self.sigma_u2}")

    @property
    def gamma(self) -> np.ndarray:
        return np.asarray(self.sigma_u2) / self.sigma_eps2

    def scaled(self, factor: float) -> "VarianceComponents":
        return VarianceComponents(self.sigma_eps2 * factor, tuple(s * factor for s in self.sigma_u2))


@dataclass(frozen=True)
class RemlConfig:
    """Stopping rule: both the relative parameter change and the equation
    residuals (unit-variance scale) must be below their tolerances."""

    tol: float = 1e-8
    tol_eqs: float = 1e-6
    max_iter: int = 500
    reentry_sweeps: int = 3
    boundary_threshold: float = 1e-9
    init: VarianceComponents | None = None


@dataclass(frozen=True)
class RemlReport:
    estimates: VarianceComponents
    iterations: int
    converged: bool
    residual_reml_eqs: tuple[float, ...]
    restricted_loglik: float
    boundary_flags: tuple[bool, ...]
    tolerance: float = 1e-6
    history: tuple[float, ...] = field(default=(), repr=False)
    newton_steps: int = 0
    factorization: str = ""


def _state(frame: ModelFrame, gamma) -> KernelState:
    return KernelState(frame.Z, frame.block_slices, gamma, frame.X)


def restricted_loglik(frame: ModelFrame, vc: VarianceComponents) -> float:
    """Restricted log-likelihood up to an additive constant::

        -1/2 [ (n-k-1) log s2 + log det H + log det((1,X)'H^{-1}(1,X)) + y'P_H^I y / s2 ]
    """
    if len(vc.sigma_u2) != frame.r:
        raise ValueError("one sigma_u2 per random block required")
    state = _state(frame, vc.gamma)
    nu = frame.n - frame.k - 1
    quad = float(frame.y @ state.p_hi_apply(frame.y))
    value = -0.5 * (nu * np.log(vc.sigma_eps2) + state.logdet_h + state.logdet_xtilde + quad / vc.sigma_eps2)
    if not np.isfinite(value):
        raise FloatingPointError("restricted log-likelihood is not finite")
    return float(value)


@dataclass
class _Eval:
    """Profiled quantities at one ``gamma`` (unit-variance working scale)."""

    gamma: np.ndarray
    state: KernelState
    py: np.ndarray
    sigma2: float
    loglik: float
    nu: int
    _frame: ModelFrame
    _pz: np.ndarray | None = None
    _scores: tuple | None = None

    @property
    def pz(self) -> np.ndarray:
        if self._pz is None:
            self._pz = self.state.p_hi_apply(self._frame.Z)
        return self._pz

    def scores(self):
        """``q_i = ||Z_i'Py||^2``, ``t_i = tr(Z_i'PZ_i)`` and the profiled gradient."""
        if self._scores is None:
            self._scores = self._compute_scores()
        return self._scores

    def _compute_scores(self):
        Z = self._frame.Z
        zpy = Z.T @ self.py
        q = np.array([zpy[sl] @ zpy[sl] for sl in self._frame.block_slices])
        t = np.array([np.sum(Z[:, sl] * self.pz[:, sl]) for sl in self._frame.block_slices])
        grad = 0.5 * (q / self.sigma2 - t)
        return q, t, grad, zpy

    def hessian(self, zpy, q):
        """Hessian of the profiled restricted log-likelihood in ``gamma``."""
        Z = self._frame.Z
        zpz = Z.T @ self.pz
        sls = self._frame.block_slices
        r = len(sls)
        Hm = np.empty((r, r))
        for i in range(r):
            for j in range(i, r):
                S = zpz[sls[i], sls[j]]
                cross = zpy[sls[j]] @ S.T @ zpy[sls[i]]
                val = 0.5 * (-2.0 * cross / self.sigma2
                             + q[i] * q[j] / (self.nu * self.sigma2 ** 2)
                             + np.sum(S * S))
                Hm[i, j] = Hm[j, i] = val
        return Hm


def _evaluate(frame: ModelFrame, gamma) -> _Eval:
    gamma = np.maximum(np.asarray(gamma, dtype=float), 0.0)
    # huge ratios can underflow 1'H^{-1}1; the non-finite result is caught below
    with np.errstate(divide="ignore", invalid="ignore"):
        state = _state(frame, gamma)
        nu = frame.n - frame.k - 1
        py = state.p_hi_apply(frame.y)
        quad = float(frame.y @ py)
    sigma2 = quad / nu
    if not sigma2 > 0 or not np.isfinite(sigma2):
        raise DegenerateFrameError("zero residual variance: y is reproduced exactly by the model")
    loglik = -0.5 * (nu * np.log(sigma2) + state.logdet_h + state.logdet_xtilde + nu)
    return _Eval(gamma, state, py, sigma2, float(loglik), nu, frame)


def reml_equations(frame: ModelFrame, vc: VarianceComponents) -> np.ndarray:
    """Residuals of the REML equations at ``vc``, in the units of ``y^2``.

    Entry 0 is ``|y'Py/(n-k-1) - y'PPy/tr(P)|`` (the two forms of the residual
    variance equation); entry ``i`` is ``|s2 tr(P Z_i Z_i') - y'P Z_i Z_i' P y|``.
    Here ``P = P_H^I`` at the ratios of ``vc`` and ``s2 = vc.sigma_eps2``.
    """
    state = _state(frame, vc.gamma)
    py = state.p_hi_apply(frame.y)
    nu = frame.n - frame.k - 1
    first = float(frame.y @ py) / nu
    second = float(py @ py) / state.trace_p_hi()
    res = [abs(first - second)]
    pz = state.p_hi_apply(frame.Z) if frame.r else None
    for sl in frame.block_slices:
        zpy = frame.Z[:, sl].T @ py
        t = np.sum(frame.Z[:, sl] * pz[:, sl])
        res.append(abs(vc.sigma_eps2 * t - zpy @ zpy))
    return np.array(res)


def sigma_eps2_reformulations(frame: ModelFrame, vc: VarianceComponents) -> tuple[float, float, float]:
    """Three equivalent expressions for the REML residual variance.

    With ``mu, beta`` the GLS estimates at ``vc`` and ``e = y - X beta``::

        (y - 1 mu - X beta)' H^{-1} (y - 1 mu - X beta) / (n-k-1)
        e' C H_C^{-1} C e / (n-k-1)
        e' C H_C^{-2} C e / tr(C P_H^C C)

    They coincide at a REML stationary point.
    """
    state = _state(frame, vc.gamma)
    y, X = frame.y, frame.X
    nu = frame.n - frame.k - 1
    beta = state.b_solve(state.Q.T @ y)
    mu = float(np.sum(state.p_h_apply(y))) / state.b
    full = y - mu - X @ beta
    e = y - X @ beta
    first = float(full @ state.h_inv_apply(full)) / nu
    ce = state.chc_inv_c_apply(e)
    second = float(e @ ce) / nu
    third = float(ce @ ce) / state.trace_p_hi()
    return first, second, third


def _initial_gamma(frame: ModelFrame, init: VarianceComponents | None, scale2: float) -> np.ndarray:
    if init is not None:
        return np.asarray(init.sigma_u2) / scale2 / (init.sigma_eps2 / scale2)
    r = frame.r
    # sigma_eps2 = 1/2 and each block contributes 1/(2r) of the unit variance;
    # dividing by the mean squared row norm keeps this invariant to Z scaling
    mean_sq = np.array([np.sum(z * z) / frame.n for z in frame.z_blocks])
    mean_sq = np.where(mean_sq > 0, mean_sq, 1.0)
    return (0.5 / r) / mean_sq / 0.5


def fit_reml(frame: ModelFrame, config: RemlConfig | None = None) -> RemlReport:
    """Estimate the variance components by REML.

    Components whose estimate reaches zero are clamped there and flagged;
    their equation residual is exempt from the convergence test. On
    non-convergence the best iterate is returned with ``converged=False``
    and a :class:`ConvergenceWarning` is issued.
    """
    config = config or RemlConfig()
    y = frame.y
    tss = float(np.sum((y - y.mean()) ** 2))
    if not tss > 0:
        raise DegenerateFrameError("response has zero variance; nothing to decompose")
    scale2 = tss / (frame.n - 1)
    work = frame.with_response((y - y.mean()) / np.sqrt(scale2))

    if frame.r == 0:
        ev = _evaluate(work, np.zeros(0))
        vc = VarianceComponents(ev.sigma2 * scale2, ())
        res = reml_equations(work, VarianceComponents(ev.sigma2, ()))
        return RemlReport(vc, 0, True, tuple(res), restricted_loglik(frame, vc), (), config.tol_eqs,
                          (ev.loglik,), 0, ev.state.method)

    gamma = _initial_gamma(frame, config.init, scale2)
    # block weight: variance a unit ratio adds per observation, for boundary tests
    weight = np.array([np.sum(z * z) / frame.n for z in work.z_blocks])
    weight = np.where(weight > 0, weight, 1.0)
    ev = _evaluate(work, gamma)
    history = [ev.loglik]
    frozen = np.zeros(frame.r, dtype=bool)
    sweeps_at_zero = np.zeros(frame.r, dtype=int)
    converged = False
    newton_steps = 0
    iteration = 0

    for iteration in range(1, config.max_iter + 1):
        q, t, grad, zpy = ev.scores()
        gamma_old, sigma_old = ev.gamma, ev.sigma2
        at_zero = gamma_old == 0

        # components sitting at zero: re-enter if the score points inward
        for i in np.flatnonzero(at_zero & ~frozen):
            if t[i] > 0 and grad[i] > 0:
                sweeps_at_zero[i] = 0
            else:
                sweeps_at_zero[i] += 1
                if sweeps_at_zero[i] > config.reentry_sweeps:
                    frozen[i] = True
        free = ~frozen & ((gamma_old > 0) | (grad > 0)) & (t > 0)

        candidate = None
        # projected Newton on the free set
        if np.any(free):
            Hm = ev.hessian(zpy, q)
            idx = np.flatnonzero(free)
            Hf = Hm[np.ix_(idx, idx)]
            try:
                if np.all(np.linalg.eigvalsh(Hf) < 0):
                    step = -np.linalg.solve(Hf, grad[idx])
                    lam = 1.0
                    for _ in range(8):
                        g_new = gamma_old.copy()
                        g_new[idx] = np.maximum(gamma_old[idx] + lam * step, 0.0)
                        trial = _evaluate(work, g_new)
                        if trial.loglik >= ev.loglik - 1e-12 * abs(ev.loglik):
                            candidate = trial
                            newton_steps += 1
                            break
                        lam *= 0.5
            except (np.linalg.LinAlgError, linalg.LinAlgError, DegenerateFrameError):
                candidate = None

        if candidate is None:
            # multiplicative fixed-point step, halved in log space until ascent
            ratio = np.ones(frame.r)
            pos = free & (t > 0)
            ratio[pos] = q[pos] / (ev.sigma2 * t[pos])
            target = gamma_old * ratio
            reenter = free & (gamma_old == 0)
            if np.any(reenter):
                target[reenter] = 1e-3 / weight[reenter]
            lam = 1.0
            for _ in range(30):
                g_new = gamma_old.copy()
                move = free & (gamma_old > 0)
                g_new[move] = gamma_old[move] * np.exp(lam * np.log(np.maximum(ratio[move], 1e-300)))
                g_new[reenter] = target[reenter]
                try:
                    trial = _evaluate(work, g_new)
                except (linalg.LinAlgError, FloatingPointError):
                    lam *= 0.5
                    continue
                if trial.loglik >= ev.loglik - 1e-12 * abs(ev.loglik):
                    candidate = trial
                    break
                lam *= 0.5
            if candidate is None:
                candidate = ev

        # clamp components that have collapsed onto the boundary
        g_new = candidate.gamma.copy()
        if np.any(small := (g_new > 0) & (g_new * weight < config.boundary_threshold)):
            _, _, g_grad, _ = candidate.scores()
            collapse = small & (g_grad <= 0)
            if np.any(collapse):
                g_new[collapse] = 0.0
                clamped = _evaluate(work, g_new)
                if clamped.loglik >= candidate.loglik - 1e-10 * abs(candidate.loglik):
                    candidate = clamped
        ev = candidate
        history.append(ev.loglik)
        if ev.sigma2 < MIN_RESIDUAL_FRACTION:
            raise DegenerateFrameError(
                "zero residual variance: the random-effect design reproduces "
                "the response exactly"
            )

        denom = np.maximum(np.abs(ev.gamma), 1e-12)
        change = max(
            float(np.max(np.abs(ev.gamma - gamma_old) / denom)) if frame.r else 0.0,
            abs(ev.sigma2 - sigma_old) / ev.sigma2,
        )
        _, _, grad_new, _ = ev.scores()
        res = _residuals(ev)
        interior = ev.gamma > 0
        eq_ok = res[0] <= config.tol_eqs and np.all(res[1:][interior] <= config.tol_eqs)
        boundary_ok = np.all(grad_new[~interior] <= config.tol_eqs)
        logger.debug("iter %d loglik %.12g change %.3g res %s", iteration, ev.loglik, change, res)
        if change <= config.tol and eq_ok and boundary_ok:
            converged = True
            break

    vc_work = VarianceComponents(ev.sigma2, tuple(ev.gamma * ev.sigma2))
    vc = vc_work.scaled(scale2)
    res = _residuals(ev)
    if not converged:
        warnings.warn(f"REML did not converge in {config.max_iter} iterations", ConvergenceWarning,
                      stacklevel=2)
    return RemlReport(
        estimates=vc,
        iterations=iteration,
        converged=converged,
        residual_reml_eqs=tuple(float(v) for v in res),
        restricted_loglik=restricted_loglik(frame, vc),
        boundary_flags=tuple(bool(g == 0) for g in ev.gamma),
        tolerance=config.tol_eqs,
        history=tuple(history),
        newton_steps=newton_steps,
        factorization=ev.state.method,
    )


def _residuals(ev: _Eval) -> np.ndarray:
    q, t, _, _ = ev.scores()
    first = abs(float(ev.py @ ev.py) / ev.state.trace_p_hi() - ev.sigma2)
    return np.concatenate([[first], np.abs(ev.sigma2 * t - q)])
