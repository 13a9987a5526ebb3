"""Centered Woodbury linear algebra for ``H = I + Z G Z'``.

All solves against ``H`` go through one cached Cholesky factor, either of the
``p_active x p_active`` capacitance matrix ``I + W'W`` with ``W = Z G^{1/2}``
(when ``p_active < n``) or of ``H`` itself. Blocks whose variance ratio is
exactly zero drop out of ``H`` and are excluded from the factorization.

Notation: ``C = I - 11'/n``, ``H_C = I + C Z G Z' C``, ``a = 1'H^{-1}1``,
``B = X'C H_C^{-1} C X`` and ``b = 1'P_H 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

__all__ = ["KernelState", "identity_suite"]


class KernelState:
    """Factorized ``H`` for one vector of variance ratios ``gamma``.

    Parameters
    ----------
    Z : ndarray, shape (n, p)
        Random-effect design, all blocks side by side.
    block_slices : sequence of slice
        Column range of each block in ``Z``.
    gamma : array_like, shape (r,)
        Ratios ``sigma_u_i^2 / sigma_eps^2``; must be non-negative.
    X : ndarray, shape (n, k), optional
        Fixed design without the intercept column. Needed for ``b``, ``B``
        and the projections.
    """

    def __init__(self, Z, block_slices, gamma, X=None):
        Z = np.asarray(Z, dtype=float)
        self.n = Z.shape[0]
        self.Z = Z
        self.block_slices = tuple(block_slices)
        gamma = np.asarray(gamma, dtype=float).reshape(-1)
        if gamma.shape[0] != len(self.block_slices):
            raise ValueError("one gamma per random block required")
        if np.any(gamma < 0) or not np.all(np.isfinite(gamma)):
            raise ValueError(f"variance ratios must be finite and >= 0, got {gamma}")
        self.gamma = gamma
        self.gamma.setflags(write=False)

        col_gamma = np.zeros(Z.shape[1])
        for g, sl in zip(gamma, self.block_slices):
            col_gamma[sl] = g
        self.col_gamma = col_gamma
        self.active_set = tuple(i for i, g in enumerate(gamma) if g > 0)
        active = col_gamma > 0
        self._W = Z[:, active] * np.sqrt(col_gamma[active])
        self.p_active = self._W.shape[1]
        self.fallback_used = False
        self._factor()

        self._ones_h = self.h_inv_apply(np.ones(self.n))
        self.a = float(self._ones_h.sum())
        self.X = None if X is None else np.asarray(X, dtype=float).reshape(self.n, -1)
        if self.X is not None:
            self._init_fixed()

    # -- factorization -------------------------------------------------
    def _factor(self):
        if self.p_active == 0:
            self.method = "identity"
            self.logdet_h = 0.0
            return
        if self.p_active < self.n:
            self.method = "woodbury"
            M = np.eye(self.p_active) + self._W.T @ self._W
        else:
            self.method = "dense"
            M = np.eye(self.n) + self._W @ self._W.T
        try:
            self._chol = linalg.cho_factor(M, lower=True)
            self.logdet_h = float(2.0 * np.sum(np.log(np.diag(self._chol[0]))))
        except linalg.LinAlgError:
            # H is SPD by construction; this only trips on overflowed ratios
            self.fallback_used = True
            self._lu = linalg.lu_factor(M)
            sign, logdet = np.linalg.slogdet(M)
            if sign <= 0 or not np.isfinite(logdet):
                raise linalg.LinAlgError("H is numerically singular (variance ratio overflow?)")
            self.logdet_h = float(logdet)
            self._chol = None

    def _solve(self, rhs):
        if self._chol is not None:
            return linalg.cho_solve(self._chol, rhs, check_finite=False)
        return linalg.lu_solve(self._lu, rhs, check_finite=False)

    def h_inv_apply(self, m):
        """``H^{-1} m`` for a vector or an ``n x q`` matrix."""
        m = np.asarray(m, dtype=float)
        if self.method == "identity":
            return m.copy()
        if self.method == "woodbury":
            return m - self._W @ self._solve(self._W.T @ m)
        return self._solve(m)

    def h_apply(self, m):
        m = np.asarray(m, dtype=float)
        return m + self._W @ (self._W.T @ m)

    def trace_h_inv(self) -> float:
        if self.method == "identity":
            return float(self.n)
        if self.method == "woodbury":
            # tr(W K^{-1} W') = tr(K^{-1} W'W) = p_active - tr(K^{-1})
            return float(self.n - self.p_active + np.trace(self._solve(np.eye(self.p_active))))
        return float(np.trace(self._solve(np.eye(self.n))))

    # -- centered operators --------------------------------------------
    def chc_inv_c_apply(self, m):
        """``C H_C^{-1} C m`` as ``H^{-1}m - a^{-1} H^{-1}1 (1'H^{-1}m)``; never forms ``H_C``."""
        hm = self.h_inv_apply(m)
        h1 = self._ones_h if hm.ndim == 1 else self._ones_h[:, None]
        return hm - h1 * (hm.sum(axis=0) / self.a)

    def trace_chc_inv_c(self) -> float:
        return self.trace_h_inv() - float(self._ones_h @ self._ones_h) / self.a

    def _init_fixed(self):
        k = self.X.shape[1]
        self.k = k
        if k == 0:
            self._Q = np.zeros((self.n, 0))
            self.B = np.zeros((0, 0))
            self._B_chol = None
            self.logdet_B = 0.0
            self._hx = np.zeros((self.n, 0))
            self.b = self.a
            return
        self._hx = self.h_inv_apply(self.X)
        xhx = self.X.T @ self._hx
        xh1 = self._hx.sum(axis=0)
        self._Q = self.chc_inv_c_apply(self.X)
        B = self.X.T @ self._Q
        self.B = 0.5 * (B + B.T)
        try:
            self._B_chol = linalg.cho_factor(self.B, lower=True)
        except linalg.LinAlgError:
            raise linalg.LinAlgError("X'C H_C^{-1} C X is singular (collinear covariates after centring)")
        self.logdet_B = float(2.0 * np.sum(np.log(np.diag(self._B_chol[0]))))
        self._xhx_chol = linalg.cho_factor(0.5 * (xhx + xhx.T), lower=True)
        self.b = float(self.a - xh1 @ linalg.cho_solve(self._xhx_chol, xh1, check_finite=False))

    def _require_x(self):
        if self.X is None:
            raise ValueError("this KernelState was built without a fixed design X")

    @property
    def Q(self):
        """``C H_C^{-1} C X``."""
        self._require_x()
        return self._Q

    def b_inv(self):
        self._require_x()
        if self.k == 0:
            return np.zeros((0, 0))
        return linalg.cho_solve(self._B_chol, np.eye(self.k), check_finite=False)

    def b_solve(self, rhs):
        self._require_x()
        if self.k == 0:
            return np.zeros((0,) + np.shape(rhs)[1:])
        return linalg.cho_solve(self._B_chol, rhs, check_finite=False)

    def p_h_apply(self, m):
        """``P_H m`` with ``P_H = H^{-1} - H^{-1}X (X'H^{-1}X)^{-1} X'H^{-1}``."""
        self._require_x()
        hm = self.h_inv_apply(m)
        if self.k == 0:
            return hm
        return hm - self._hx @ linalg.cho_solve(self._xhx_chol, self.X.T @ hm, check_finite=False)

    def p_hi_apply(self, m):
        """``P_H^I m``: the projection with the intercept-augmented design ``(1, X)``.

        Evaluated in its centred form ``C P_H^C C``, which is unaffected by
        shifting columns of ``X``.
        """
        self._require_x()
        cm = self.chc_inv_c_apply(m)
        if self.k == 0:
            return cm
        return cm - self._Q @ self.b_solve(self._Q.T @ m)

    def trace_p_hi(self) -> float:
        self._require_x()
        tr = self.trace_chc_inv_c()
        if self.k:
            tr -= float(np.sum(self.b_solve(self._Q.T) * self._Q.T))
        return tr

    @property
    def logdet_xtilde(self) -> float:
        """``log det((1, X)' H^{-1} (1, X)) = log a + log det B`` (Schur complement)."""
        self._require_x()
        return float(np.log(self.a) + self.logdet_B)


@dataclass(frozen=True)
class IdentityReport:
    """Maximum relative elementwise deviations of the dense identity checks."""

    ch: float
    p_hi: float
    cpc: float
    h_inv_apply: float
    chc_inv_c_apply: float

    @property
    def max_deviation(self) -> float:
        return max(self.ch, self.p_hi, self.cpc, self.h_inv_apply, self.chc_inv_c_apply)


def _rel_dev(a, b) -> float:
    scale = max(np.max(np.abs(b)), np.finfo(float).tiny) if np.size(b) else 1.0
    return float(np.max(np.abs(a - b)) / scale) if np.size(b) else 0.0


def identity_suite(state: KernelState, x_design) -> IdentityReport:
    """Check the centring identities densely for a small problem.

    Builds ``H``, ``H_C``, ``C``, ``P_H``, ``P_H^I`` and ``P_H^C`` explicitly
    and verifies

    * ``C H_C^{-1} = H_C^{-1} C = C H_C^{-1} C = H^{-1}(I - a^{-1} 1 1' H^{-1})``
    * ``P_H^I = P_H (I - b^{-1} 1 1' P_H)``
    * ``C P_H^C C = C P_H^C = P_H^C C = P_H^I``

    plus agreement of the two apply kernels with their dense counterparts.
    """
    n = state.n
    X = np.asarray(x_design, dtype=float).reshape(n, -1)
    k = X.shape[1]
    I = np.eye(n)
    one = np.ones((n, 1))
    C = I - one @ one.T / n
    ZGZ = (state.Z * state.col_gamma) @ state.Z.T
    H = I + ZGZ
    Hc = I + C @ ZGZ @ C
    Hi = np.linalg.inv(H)
    Hci = np.linalg.inv(Hc)
    a = float((one.T @ Hi @ one)[0, 0])

    rhs = Hi @ (I - one @ one.T @ Hi / a)
    ch = max(_rel_dev(C @ Hci, rhs), _rel_dev(Hci @ C, rhs), _rel_dev(C @ Hci @ C, rhs))

    if k:
        P_H = Hi - Hi @ X @ np.linalg.solve(X.T @ Hi @ X, X.T @ Hi)
    else:
        P_H = Hi
    Xt = np.column_stack([np.ones(n), X])
    P_HI = Hi - Hi @ Xt @ np.linalg.solve(Xt.T @ Hi @ Xt, Xt.T @ Hi)
    b = float((one.T @ P_H @ one)[0, 0])
    p_hi = _rel_dev(P_H @ (I - one @ one.T @ P_H / b), P_HI)

    if k:
        CX = C @ X
        P_HC = Hci - Hci @ CX @ np.linalg.solve(CX.T @ Hci @ CX, CX.T @ Hci)
    else:
        P_HC = Hci
    cpc = max(_rel_dev(C @ P_HC @ C, P_HI), _rel_dev(C @ P_HC, P_HI), _rel_dev(P_HC @ C, P_HI))

    probe = np.random.default_rng(0).standard_normal((n, 3))
    h_apply = _rel_dev(state.h_inv_apply(probe), Hi @ probe)
    chc_apply = _rel_dev(state.chc_inv_c_apply(probe), C @ Hci @ C @ probe)
    return IdentityReport(ch=ch, p_hi=p_hi, cpc=cpc, h_inv_apply=h_apply, chc_inv_c_apply=chc_apply)
