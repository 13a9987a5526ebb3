"""Parametric-bootstrap percentile intervals for the decomposition shares."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed

from .decomposition import RANDOM_DATA, RANDOM_POP, RESIDUAL, attribute, compute_moments, decompose
from .design import ModelFrame
from .inference import FitResult, solve_blue_blup
from .reml import ConvergenceWarning, DegenerateFrameError, RemlConfig, fit_reml

__all__ = ["BootstrapError", "BootstrapResult", "parametric_bootstrap", "replicate_rng", "share_vector"]

MAX_FAILURE_RATE = 0.20


class BootstrapError(RuntimeError):
    pass


@dataclass(frozen=True)
class BootstrapResult:
    n_replicates: int
    level: float
    per_row: dict[str, tuple[float, float, float]]
    n_failed: int
    seed: int
    max_identity_residual: float = 0.0
    samples: dict[str, np.ndarray] | None = None


def replicate_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for one replicate, keyed by ``(seed, index)``.

    The draws of replicate ``index`` do not depend on how replicates are
    scheduled over workers.
    """
    if not (0 <= seed < 2**64 and 0 <= index < 2**64):
        raise ValueError("seed and replicate index must fit in 64 bits")
    return np.random.Generator(np.random.Philox(key=(int(seed) << 64) | int(index)))


def share_vector(fit: FitResult) -> dict[str, float]:
    """Every reported share of ``sigma_y^2`` keyed by a stable row label."""
    moments = compute_moments(fit.frame)
    decomp = decompose(fit, moments)
    table = attribute(fit, moments, decomp)
    sy2 = moments.sigma_hat_y2
    out = {
        "S_X^2": decomp.s_x2 / sy2,
        "S_Z^2": decomp.s_z2 / sy2,
        "S_Z^2 population": decomp.s_z2_pop / sy2,
        "S_Z^2 data-specific": decomp.s_z2_data / sy2,
        "S_XxZ^2": decomp.s_xz2 / sy2,
        "S_Z^2 data-specific + S_XxZ^2": (decomp.s_z2_data + decomp.s_xz2) / sy2,
        "residual": decomp.sigma_eps2 / sy2,
        "R2": decomp.r2,
        "R2_pop": decomp.r2_pop,
    }
    for row in table.rows:
        if row.kind == RESIDUAL:
            continue
        out[f"{row.kind}: {row.label}"] = row.share
    for label, value in table.combined((RANDOM_POP, RANDOM_DATA)).items():
        out[f"random: {label}"] = value / sy2
    out["__identity__"] = decomp.identity_residual
    return out


def _one_replicate(frame: ModelFrame, fit: FitResult, seed: int, index: int, config: RemlConfig):
    rng = replicate_rng(seed, index)
    y = fit.mu_hat + frame.X @ fit.beta_hat
    for z, s2 in zip(frame.z_blocks, fit.vc.sigma_u2):
        y = y + z @ (np.sqrt(s2) * rng.standard_normal(z.shape[1]))
    y = y + np.sqrt(fit.vc.sigma_eps2) * rng.standard_normal(frame.n)
    star = frame.with_response(y)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        try:
            report = fit_reml(star, config)
        except (DegenerateFrameError, np.linalg.LinAlgError, FloatingPointError):
            return None
    if not report.converged:
        return None
    return share_vector(solve_blue_blup(star, report.estimates, report))


def parametric_bootstrap(
    frame: ModelFrame,
    fit: FitResult,
    n: int,
    seed: int = 0,
    level: float = 0.95,
    workers: int = 1,
    config: RemlConfig | None = None,
    keep_samples: bool = False,
) -> BootstrapResult:
    """Equal-tail percentile intervals from ``n`` parametric resimulations.

    Each replicate draws ``u_i ~ N(0, s_u_i^2 I)`` and ``e ~ N(0, s_eps^2 I)``
    around the fitted mean, refits REML on the same design and recomputes all
    shares. Replicates that fail to converge are dropped and counted; more
    than 20% failures raise :class:`BootstrapError`.
    """
    if n < 2:
        raise ValueError("need at least 2 bootstrap replicates")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    if not fit.converged:
        raise BootstrapError("the original fit did not converge")
    base = config or RemlConfig()
    config = RemlConfig(tol=base.tol, tol_eqs=base.tol_eqs, max_iter=base.max_iter,
                        reentry_sweeps=base.reentry_sweeps,
                        boundary_threshold=base.boundary_threshold,
                        init=fit.vc if all(s > 0 for s in fit.vc.sigma_u2) else None)

    if workers == 1:
        results = [_one_replicate(frame, fit, seed, i, config) for i in range(n)]
    else:
        results = Parallel(n_jobs=workers)(
            delayed(_one_replicate)(frame, fit, seed, i, config) for i in range(n)
        )
    ok = [r for r in results if r is not None]
    n_failed = n - len(ok)
    if n_failed > MAX_FAILURE_RATE * n:
        raise BootstrapError(f"{n_failed} of {n} bootstrap refits failed to converge")

    point = share_vector(fit)
    alpha = 1.0 - level
    per_row, samples = {}, {}
    for key, value in point.items():
        if key == "__identity__":
            continue
        draws = np.array([r[key] for r in ok])
        lo, hi = np.quantile(draws, [alpha / 2, 1 - alpha / 2])
        per_row[key] = (float(value), float(lo), float(hi))
        samples[key] = draws
    max_id = max((r["__identity__"] for r in ok), default=0.0)
    return BootstrapResult(
        n_replicates=n,
        level=level,
        per_row=per_row,
        n_failed=n_failed,
        seed=seed,
        max_identity_residual=float(max_id),
        samples=samples if keep_samples else None,
    )
