"""Additive decomposition of the sample variance of ``y``.

At REML estimates the sample variance splits exactly into four parts::

    sigma_y^2 = S_X^2 + S_Z^2 + S_XZ^2 + sigma_eps^2

with

* ``S_X^2  = beta' Sx beta - tr(Sx cov(beta))``        (fixed effects, bias corrected)
* ``S_Z^2  = tr(D Sz) + [u' Sz u - tr(Sz cov(u))]``    (population + data-specific)
* ``S_XZ^2 = 2 beta' Sxz u``                           (fixed/random cross term)

where ``Sx, Sz, Sxz`` are the centred cross-moment matrices of ``X`` and
``Z`` with divisor ``n - 1``. Each part is further attributed to single
covariates and random blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .design import ModelFrame
from .inference import DEFAULT_COV_U_CAP, FitResult

__all__ = [
    "AttributionRow",
    "AttributionTable",
    "Decomposition",
    "EmpiricalMoments",
    "LinearModelReference",
    "attribute",
    "attribute_cross",
    "attribute_fixed",
    "attribute_random",
    "compute_moments",
    "decompose",
    "lm_reference",
]

FIXED = "fixed"
RANDOM_POP = "random-population"
RANDOM_DATA = "random-data"
CROSS_FIXED = "cross-fixed"
CROSS_RANDOM = "cross-random"
RESIDUAL = "residual"


@dataclass(frozen=True, eq=False)
class EmpiricalMoments:
    sigma_hat_X: np.ndarray
    sigma_hat_Z: np.ndarray | None
    sigma_hat_XZ: np.ndarray
    sigma_hat_y2: float
    tss: float
    trace_Z: tuple[float, ...]
    cx: np.ndarray = field(repr=False)
    cz: np.ndarray = field(repr=False)
    block_slices: tuple[slice, ...] = field(repr=False, default=())

    def sigma_hat_Z_block(self, i: int, j: int) -> np.ndarray:
        si, sj = self.block_slices[i], self.block_slices[j]
        if self.sigma_hat_Z is not None:
            return self.sigma_hat_Z[si, sj]
        return self.cz[:, si].T @ self.cz[:, sj] / (self.cz.shape[0] - 1)


def compute_moments(frame: ModelFrame, cap: int = DEFAULT_COV_U_CAP) -> EmpiricalMoments:
    n = frame.n
    cx = frame.X - frame.X.mean(axis=0)
    cz = frame.Z - frame.Z.mean(axis=0)
    cy = frame.y - frame.y.mean()
    tss = float(cy @ cy)
    sz = cz.T @ cz / (n - 1) if cz.shape[1] <= cap else None
    trace_z = tuple(float(np.sum(cz[:, sl] ** 2) / (n - 1)) for sl in frame.block_slices)
    return EmpiricalMoments(
        sigma_hat_X=cx.T @ cx / (n - 1),
        sigma_hat_Z=sz,
        sigma_hat_XZ=cx.T @ cz / (n - 1),
        sigma_hat_y2=tss / (n - 1),
        tss=tss,
        trace_Z=trace_z,
        cx=cx,
        cz=cz,
        block_slices=frame.block_slices,
    )


def _trace_block_pair(fit: FitResult, moments: EmpiricalMoments, i: int, j: int) -> float:
    """``tr(Sz_ij cov(u_j, u_i))``."""
    if fit.cov_u is not None and moments.sigma_hat_Z is not None:
        return float(np.sum(moments.sigma_hat_Z_block(i, j) * fit.sigma_u_block(i, j)))
    # large p: go through n x n products, tr(C A_j P A_i) with A = Z Z'
    frame = fit.frame
    si, sj = frame.block_slices[i], frame.block_slices[j]
    g = fit.vc.gamma
    ca_j = moments.cz[:, sj] @ frame.Z[:, sj].T
    a_i_p = (fit._pz[:, si] @ frame.Z[:, si].T).T
    n = frame.n
    return float(fit.vc.sigma_eps2 * g[i] * g[j] * np.sum(ca_j * a_i_p) / (n - 1))


@dataclass(frozen=True)
class Decomposition:
    s_x2: float
    s_z2_pop: float
    s_z2_data: float
    s_xz2: float
    sigma_eps2: float
    sigma_y2: float
    r2: float
    r2_pop: float
    r2_marginal_naka: float
    r2_conditional_naka: float
    converged: bool = True

    @property
    def s_z2(self) -> float:
        return self.s_z2_pop + self.s_z2_data

    @property
    def summands(self) -> tuple[float, ...]:
        return (self.s_x2, self.s_z2_pop, self.s_z2_data, self.s_xz2, self.sigma_eps2)

    @property
    def identity_residual(self) -> float:
        """``|sigma_y^2 - sum of parts| / sigma_y^2``; zero at a REML stationary point."""
        return abs(self.sigma_y2 - sum(self.summands)) / self.sigma_y2


def decompose(fit: FitResult, moments: EmpiricalMoments) -> Decomposition:
    """The four-part decomposition and the R^2 summaries.

    ``converged`` mirrors the REML report; the identity is only exact at a
    stationary point, so a non-converged result is advisory.
    """
    beta, u = fit.beta_hat, fit.u_tilde
    sx = moments.sigma_hat_X
    s_x2 = float(beta @ sx @ beta - np.sum(sx * fit.cov_beta))
    sigma_u2 = np.asarray(fit.vc.sigma_u2)
    s_z2_pop = float(np.dot(sigma_u2, moments.trace_Z)) if len(sigma_u2) else 0.0
    r = fit.frame.r
    czu = moments.cz @ u if r else np.zeros(fit.frame.n)
    n = fit.frame.n
    quad_u = float(czu @ czu) / (n - 1)
    if fit.cov_u is not None and moments.sigma_hat_Z is not None:
        tr_u = float(np.sum(moments.sigma_hat_Z * fit.cov_u))
    else:
        tr_u = sum(_trace_block_pair(fit, moments, i, j) for i in range(r) for j in range(r))
    s_z2_data = quad_u - tr_u
    s_xz2 = float(2.0 * beta @ moments.sigma_hat_XZ @ u) if beta.size and r else 0.0
    s2 = fit.vc.sigma_eps2
    sy2 = moments.sigma_hat_y2

    # Nakagawa-Schielzeth comparators with the uncorrected fixed-effect variance
    sigma_f2 = float(beta @ sx @ beta)
    sigma_l2 = float(sum(s * np.sum(z * z) for s, z in zip(sigma_u2, fit.frame.z_blocks)) / n)
    naka_total = sigma_f2 + sigma_l2 + s2
    return Decomposition(
        s_x2=s_x2,
        s_z2_pop=s_z2_pop,
        s_z2_data=s_z2_data,
        s_xz2=s_xz2,
        sigma_eps2=s2,
        sigma_y2=sy2,
        r2=1.0 - s2 / sy2,
        r2_pop=(s_x2 + s_z2_pop) / (s_x2 + s_z2_pop + s2),
        r2_marginal_naka=sigma_f2 / naka_total,
        r2_conditional_naka=(sigma_f2 + sigma_l2) / naka_total,
        converged=fit.converged,
    )


@dataclass(frozen=True)
class AttributionRow:
    label: str
    kind: str
    value: float
    share: float


@dataclass(frozen=True)
class AttributionTable:
    rows: tuple[AttributionRow, ...]

    def total(self, *kinds: str) -> float:
        return float(sum(row.value for row in self.rows if row.kind in kinds))

    def select(self, *kinds: str) -> list[AttributionRow]:
        return [row for row in self.rows if row.kind in kinds]

    def combined(self, kinds: tuple[str, ...]) -> dict[str, float]:
        """Sum values per label over ``kinds`` (e.g. population + data per block)."""
        out: dict[str, float] = {}
        for row in self.rows:
            if row.kind in kinds:
                out[row.label] = out.get(row.label, 0.0) + row.value
        return out


def attribute_fixed(fit: FitResult, moments: EmpiricalMoments) -> list[float]:
    """Share of the fixed-effect variation carried by each covariate; sums to ``S_X^2``."""
    beta, sx = fit.beta_hat, moments.sigma_hat_X
    rows = beta * (sx @ beta) - np.sum(sx * fit.cov_beta, axis=1)
    return [float(v) for v in rows]


def attribute_random(fit: FitResult, moments: EmpiricalMoments) -> list[tuple[float, float]]:
    """Per block ``(population, data-specific)`` parts of the random-effect variation.

    The data-specific part of block ``i`` collects
    ``u_i' Sz_ij u_j - tr(Sz_ij cov(u_j, u_i))`` over all blocks ``j``.
    """
    frame = fit.frame
    n = frame.n
    parts = [moments.cz[:, sl] @ fit.u_tilde[sl] for sl in frame.block_slices]
    out = []
    for i in range(frame.r):
        pop = fit.vc.sigma_u2[i] * moments.trace_Z[i]
        data = 0.0
        for j in range(frame.r):
            data += float(parts[i] @ parts[j]) / (n - 1) - _trace_block_pair(fit, moments, i, j)
        out.append((float(pop), float(data)))
    return out


def attribute_cross(fit: FitResult, moments: EmpiricalMoments) -> tuple[list[float], list[float]]:
    """Cross term split over the ``k`` fixed covariates and the ``r`` random blocks.

    Each half sums to ``beta' Sxz u``, so all ``k + r`` values sum to ``S_XZ^2``.
    Empty lists when ``k == 0`` or ``r == 0``.
    """
    frame = fit.frame
    if frame.k == 0 or frame.r == 0:
        return [], []
    beta, u = fit.beta_hat, fit.u_tilde
    fixed = beta * (moments.sigma_hat_XZ @ u)
    cxb = moments.cx @ beta
    rand = [float(moments.cz[:, sl] @ u[sl] @ cxb) / (frame.n - 1) for sl in frame.block_slices]
    return [float(v) for v in fixed], rand


def attribute(fit: FitResult, moments: EmpiricalMoments, decomposition: Decomposition | None = None
              ) -> AttributionTable:
    """All partial attributions in one table, shares relative to ``sigma_y^2``."""
    frame = fit.frame
    sy2 = moments.sigma_hat_y2
    decomposition = decomposition or decompose(fit, moments)
    rows = []
    for label, value in zip(frame.column_labels_X, attribute_fixed(fit, moments)):
        rows.append(AttributionRow(label, FIXED, value, value / sy2))
    for label, (pop, data) in zip(frame.block_labels, attribute_random(fit, moments)):
        rows.append(AttributionRow(label, RANDOM_POP, pop, pop / sy2))
        rows.append(AttributionRow(label, RANDOM_DATA, data, data / sy2))
    fixed_x, rand_x = attribute_cross(fit, moments)
    for label, value in zip(frame.column_labels_X, fixed_x):
        rows.append(AttributionRow(label, CROSS_FIXED, value, value / sy2))
    for label, value in zip(frame.block_labels, rand_x):
        rows.append(AttributionRow(label, CROSS_RANDOM, value, value / sy2))
    s2 = decomposition.sigma_eps2
    rows.append(AttributionRow("Residual", RESIDUAL, s2, s2 / sy2))
    return AttributionTable(tuple(rows))


@dataclass(frozen=True)
class LinearModelReference:
    r2: float
    r2_adj: float
    ess: float
    rss: float
    tss: float
    s_x2: float
    sigma_eps2: float


def lm_reference(frame: ModelFrame) -> LinearModelReference:
    """Ordinary least squares of ``y`` on ``(1, X)``; random blocks are ignored."""
    n, k = frame.n, frame.k
    Xt = np.column_stack([np.ones(n), frame.X])
    coef, *_ = np.linalg.lstsq(Xt, frame.y, rcond=None)
    fitted = Xt @ coef
    resid = frame.y - fitted
    cy = frame.y - frame.y.mean()
    cf = fitted - fitted.mean()
    tss = float(cy @ cy)
    ess = float(cf @ cf)
    rss = float(resid @ resid)
    if abs(tss - ess - rss) > 1e-8 * max(tss, np.finfo(float).tiny):
        raise ArithmeticError(f"TSS != ESS + RSS ({tss} vs {ess + rss})")
    r2 = 1.0 - rss / tss
    r2_adj = 1.0 - (1.0 - r2) * (n - 1) / (n - k - 1)
    sigma_eps2 = rss / (n - k - 1)
    return LinearModelReference(
        r2=r2, r2_adj=r2_adj, ess=ess, rss=rss, tss=tss,
        s_x2=tss / (n - 1) - sigma_eps2, sigma_eps2=sigma_eps2,
    )
