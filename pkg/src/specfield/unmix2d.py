"""Classical 2D unmixing: VCA endmember extraction and an FCLS abundance oracle."""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment


def simplex_project(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    K = v.shape[-1]
    u = np.sort(v, axis=-1)[..., ::-1]
    css = np.cumsum(u, axis=-1) - 1.0
    idx = np.arange(1, K + 1)
    cond = u - css / idx > 0
    rho = K - 1 - np.argmax(cond[..., ::-1], axis=-1)
    theta = np.take_along_axis(css, rho[..., None], axis=-1) / (rho[..., None] + 1.0)
    return np.maximum(v - theta, 0.0)


def _spectral_norm_power(A, iters=20, seed=0):
    x = np.random.default_rng(seed).standard_normal(A.shape[1])
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(iters):
        y = A @ x
        lam = np.linalg.norm(y)
        if lam == 0:
            return 0.0
        x = y / lam
    return lam


def fcls_solve(E, y, iters: int = 500, step: float | None = None) -> np.ndarray:
    """Minimise ||y - E a||^2 over the simplex with projected gradient descent.

    Starts from the uniform abundance and returns the best iterate seen.
    """
    E = np.asarray(E, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    K = E.shape[1]
    if K == 1:
        return np.ones(1)
    if iters < 1:
        raise ValueError("iters must be >= 1")
    G = E.T @ E
    Ety = E.T @ y
    if step is None:
        L = _spectral_norm_power(G)
        step = 0.9 / L if L > 0 else 1.0
    a = np.full(K, 1.0 / K)
    best, best_f = a, np.inf
    for _ in range(iters):
        f = 0.5 * a @ G @ a - Ety @ a
        if f < best_f:
            best, best_f = a, f
        a = simplex_project(a - step * (G @ a - Ety))
    f = 0.5 * a @ G @ a - Ety @ a
    if f < best_f:
        best = a
    return best


def vca_extract(Y, K: int, seed: int = 0, projective: bool = False) -> np.ndarray:
    """Vertex component analysis on a B x N pixel matrix; returns B x K endmembers.

    ``projective`` selects the scale-invariant projection (pixels divided by
    their component along the mean direction), which suits noiseless data with
    shading. Otherwise the affine, mean-removed projection is used.
    """
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2:
        raise ValueError(f"pixel matrix must be B x N, got shape {Y.shape}")
    B, N = Y.shape
    if K < 1 or K > min(B, N):
        raise ValueError(f"cannot extract K={K} endmembers from B={B} bands and N={N} pixels")
    if not np.all(np.isfinite(Y)):
        raise ValueError("pixel matrix has non-finite values")
    sv = np.linalg.svd(Y, compute_uv=False)
    rank = int(np.sum(sv > sv[0] * max(B, N) * np.finfo(float).eps)) if sv[0] > 0 else 0
    if rank < K:
        raise ValueError(f"pixel matrix has numerical rank {rank}, need at least K={K}")

    if K == 1:
        idx = [int(np.argmax(np.linalg.norm(Y, axis=0)))]
        return np.clip(Y[:, idx], 0.0, 1.0)

    rng = np.random.default_rng(seed)
    if projective:
        U, _, _ = np.linalg.svd(Y @ Y.T / N)
        x = U[:, :K].T @ Y
        u = x.mean(axis=1)
        denom = u @ x
        denom = np.where(np.abs(denom) < 1e-12, 1e-12, denom)
        proj = x / denom
    else:
        mean = Y.mean(axis=1, keepdims=True)
        Yo = Y - mean
        U, _, _ = np.linalg.svd(Yo @ Yo.T / N)
        xp = U[:, : K - 1].T @ Yo
        c = np.max(np.linalg.norm(xp, axis=0))
        proj = np.vstack([xp, np.full((1, N), c)])

    A = np.zeros((K, K))
    A[-1, 0] = 1.0
    idx = []
    for i in range(K):
        w = rng.random(K)
        f = w - A @ np.linalg.pinv(A) @ w
        f /= np.linalg.norm(f)
        v = f @ proj
        j = int(np.argmax(np.abs(v)))
        A[:, i] = proj[:, j]
        idx.append(j)
    return np.clip(Y[:, idx], 0.0, 1.0)


def spectral_angles(E1, E2) -> np.ndarray:
    """Pairwise spectral angles (K1 x K2) between columns; zero columns score pi/2."""
    E1 = np.asarray(E1, dtype=np.float64)
    E2 = np.asarray(E2, dtype=np.float64)
    n1 = np.linalg.norm(E1, axis=0)
    n2 = np.linalg.norm(E2, axis=0)
    denom = np.outer(n1, n2)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(denom > 0, (E1.T @ E2) / np.where(denom > 0, denom, 1.0), 0.0)
    return np.arccos(np.clip(cos, -1.0, 1.0))


def match_endmembers(E_est, E_true):
    """Hungarian assignment on spectral angle.

    Returns ``(perm, angles)`` where ``E_est[:, perm[k]]`` is matched to ``E_true[:, k]``.
    """
    cost = spectral_angles(E_est, E_true)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(cost.shape[1], dtype=int)
    perm[cols] = rows
    return perm, cost[rows, cols][np.argsort(cols)]
