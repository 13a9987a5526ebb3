"""Straight-from-definitions dense reference computations.

Nothing here touches the package's solver code: every matrix (V, H, H_C, C,
the projections) is formed explicitly and inverted with numpy.
"""

import numpy as np

from lmmvar.design import ModelFrame


def random_frame(rng, n, k, p_list, sigma_u2=None, sigma_eps2=1.0, onehot=None, beta=None):
    """Simulate a frame from the model with the given dimensions.

    Blocks are one-hot group indicators (``onehot[i]`` true) or dense Gaussian
    columns; intercept blocks always cover every level when ``n >= p_i``.
    """
    r = len(p_list)
    if onehot is None:
        onehot = [bool(rng.integers(2)) for _ in range(r)]
    if sigma_u2 is None:
        sigma_u2 = rng.uniform(0.2, 2.0, size=r)
    blocks = []
    for p, hot in zip(p_list, onehot):
        if hot:
            codes = rng.permutation(np.arange(n) % p) if n >= p else rng.integers(p, size=n)
            z = np.zeros((n, p))
            z[np.arange(n), codes] = 1.0
        else:
            z = rng.standard_normal((n, p)) / np.sqrt(p)
        blocks.append(z)
    X = rng.standard_normal((n, k))
    if k > 1:
        X[:, 1] += 0.5 * X[:, 0]
    beta = rng.normal(size=k) if beta is None else np.asarray(beta, float)
    y = 3.0 + X @ beta + np.sqrt(sigma_eps2) * rng.standard_normal(n)
    for z, s2 in zip(blocks, sigma_u2):
        y = y + z @ (np.sqrt(s2) * rng.standard_normal(z.shape[1]))
    return ModelFrame(y, X, tuple(blocks))


def centering(n):
    return np.eye(n) - np.ones((n, n)) / n


def dense_G(frame, vc):
    cols = np.concatenate([np.full(p, s / vc.sigma_eps2) for p, s in zip(frame.p, vc.sigma_u2)]) \
        if frame.r else np.zeros(0)
    return np.diag(cols)


def dense_fit(frame, vc):
    """GLS / BLUP at given variance components from the marginal covariance V."""
    n = frame.n
    y, X, Z = frame.y, frame.X, frame.Z
    D = vc.sigma_eps2 * dense_G(frame, vc)
    V = vc.sigma_eps2 * np.eye(n) + Z @ D @ Z.T
    Vi = np.linalg.inv(V)
    Xt = np.column_stack([np.ones(n), X])
    cov_theta = np.linalg.inv(Xt.T @ Vi @ Xt)
    theta = cov_theta @ Xt.T @ Vi @ y
    P = Vi - Vi @ Xt @ cov_theta @ Xt.T @ Vi
    u = D @ Z.T @ Vi @ (y - Xt @ theta)
    cov_u = D @ Z.T @ P @ Z @ D
    return {
        "mu": theta[0], "beta": theta[1:], "se_mu": np.sqrt(cov_theta[0, 0]),
        "cov_beta": cov_theta[1:, 1:], "u": u, "cov_u": cov_u, "V": V, "P": P,
    }


def dense_summands(frame, vc):
    """The five summands and the moments, every matrix formed explicitly."""
    n = frame.n
    C = centering(n)
    X, Z, y = frame.X, frame.Z, frame.y
    f = dense_fit(frame, vc)
    SX = X.T @ C @ X / (n - 1)
    SZ = Z.T @ C @ Z / (n - 1)
    SXZ = X.T @ C @ Z / (n - 1)
    sy2 = y @ C @ y / (n - 1)
    s_x2 = f["beta"] @ SX @ f["beta"] - np.trace(SX @ f["cov_beta"])
    pop = sum(s2 * np.trace(z.T @ C @ z) / (n - 1) for s2, z in zip(vc.sigma_u2, frame.z_blocks))
    data = f["u"] @ SZ @ f["u"] - np.trace(SZ @ f["cov_u"])
    xz = 2 * f["beta"] @ SXZ @ f["u"]
    return {**f, "s_x2": s_x2, "s_z2_pop": pop, "s_z2_data": data, "s_xz2": xz,
            "sigma_y2": sy2, "SX": SX, "SZ": SZ, "SXZ": SXZ, "C": C}


def dense_reml_loglik(frame, sigma_eps2, sigma_u2):
    """Textbook REML criterion -1/2[log|V| + log|X~'V^{-1}X~| + y'P y] (no constant)."""
    n = frame.n
    V = sigma_eps2 * np.eye(n)
    for z, s2 in zip(frame.z_blocks, sigma_u2):
        V = V + s2 * z @ z.T
    Vi = np.linalg.inv(V)
    Xt = np.column_stack([np.ones(n), frame.X])
    M = Xt.T @ Vi @ Xt
    P = Vi - Vi @ Xt @ np.linalg.solve(M, Xt.T @ Vi)
    return -0.5 * (np.linalg.slogdet(V)[1] + np.linalg.slogdet(M)[1] + frame.y @ P @ frame.y)


def rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.max(np.abs(b)) if b.size else 0.0, 1e-300)
    return float(np.max(np.abs(a - b)) / scale) if b.size else 0.0
