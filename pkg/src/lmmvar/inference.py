"""BLUE of the fixed effects and BLUP of the random effects.

Everything is expressed through ``C H_C^{-1} C`` so the results do not change
when columns of ``y``, ``X`` or ``Z`` are shifted by constants::

    beta  = B^{-1} X'C H_C^{-1} C y,           B = X'C H_C^{-1} C X
    cov(beta) = s2 B^{-1}
    u     = G Z'C H_C^{-1} C (y - X beta)   = G Z' P_H^I y
    cov(u) = s2 G Z' P_H^I Z G
    mu    = 1'P_H y / b,   var(mu) = s2 / b
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .design import ModelFrame
from .kernels import KernelState
from .reml import RemlReport, VarianceComponents

__all__ = ["FitResult", "solve_blue_blup", "DEFAULT_COV_U_CAP"]

DEFAULT_COV_U_CAP = 2000


@dataclass(frozen=True, eq=False)
class FitResult:
    """Point estimates and covariances at one set of variance components.

    ``cov_u`` is ``None`` when ``p`` exceeds the materialization cap; the
    block traces needed downstream are then computed from ``n x p`` products
    (see :meth:`sigma_u_block`).
    """

    vc: VarianceComponents
    mu_hat: float
    se_mu: float
    beta_hat: np.ndarray
    cov_beta: np.ndarray
    u_tilde: np.ndarray
    cov_u: np.ndarray | None
    frame: ModelFrame
    reml_report: RemlReport | None = None
    _pz: np.ndarray | None = None

    @property
    def converged(self) -> bool:
        return self.reml_report is None or self.reml_report.converged

    def u_block(self, i: int) -> np.ndarray:
        return self.u_tilde[self.frame.block_slices[i]]

    def sigma_u_block(self, i: int, j: int) -> np.ndarray:
        """``cov(u_i, u_j)``, the ``(i, j)`` block of ``cov_u``."""
        si, sj = self.frame.block_slices[i], self.frame.block_slices[j]
        if self.cov_u is not None:
            return self.cov_u[si, sj]
        g = self.vc.gamma
        return self.vc.sigma_eps2 * g[i] * g[j] * (self.frame.Z[:, si].T @ self._pz[:, sj])


def solve_blue_blup(
    frame: ModelFrame,
    vc: VarianceComponents,
    reml_report: RemlReport | None = None,
    cov_u_cap: int = DEFAULT_COV_U_CAP,
) -> FitResult:
    """Compute ``mu``, the BLUE ``beta`` and the BLUP ``u`` with their covariances."""
    if len(vc.sigma_u2) != frame.r:
        raise ValueError("one sigma_u2 per random block required")
    state = KernelState(frame.Z, frame.block_slices, vc.gamma, frame.X)
    s2 = vc.sigma_eps2
    y = frame.y

    beta = state.b_solve(state.Q.T @ y)
    cov_beta = s2 * state.b_inv()
    cov_beta = 0.5 * (cov_beta + cov_beta.T)
    mu = float(np.sum(state.p_h_apply(y))) / state.b
    se_mu = float(np.sqrt(s2 / state.b))

    py = state.p_hi_apply(y)
    col_gamma = state.col_gamma
    u = col_gamma * (frame.Z.T @ py)
    pz = state.p_hi_apply(frame.Z) if frame.r else np.zeros((frame.n, 0))
    p = frame.Z.shape[1]
    if p <= cov_u_cap:
        zpz = frame.Z.T @ pz
        cov_u = s2 * col_gamma[:, None] * (0.5 * (zpz + zpz.T)) * col_gamma[None, :]
    else:
        cov_u = None
    return FitResult(
        vc=vc,
        mu_hat=mu,
        se_mu=se_mu,
        beta_hat=beta,
        cov_beta=cov_beta,
        u_tilde=u,
        cov_u=cov_u,
        frame=frame,
        reml_report=reml_report,
        _pz=pz,
    )
