"""Dense linear algebra used by the certification code.

Eigen-decompositions use cyclic Jacobi rotations in round-robin (parallel)
ordering: every round rotates n/2 disjoint index pairs at once, and n-1
rounds make a sweep that touches every off-diagonal pair exactly once.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Callable

import numpy as np

from ..errors import NumericalError, ShapeError

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


@lru_cache(maxsize=None)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Tournament schedule over n indices (a dummy index pads odd n)."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p < n and q < n:
                ps.append(min(p, q))
                qs.append(max(p, q))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _pair_rotation(app, aqq, apq):
    """Cosine/sine of the Jacobi rotation annihilating each (p, q) entry."""
    nz = apq != 0.0
    safe = np.where(nz, apq, 1.0)
    with np.errstate(over="ignore"):
        tau = (aqq - app) / (2.0 * safe)
    sign = np.where(tau >= 0.0, 1.0, -1.0)
    t = sign / (np.abs(tau) + np.hypot(1.0, tau))
    c = 1.0 / np.hypot(1.0, t)
    s = t * c
    return np.where(nz, c, 1.0), np.where(nz, s, 0.0)


def _rotate_columns(m, p, q, c, s):
    mp = m[:, p].copy()
    mq = m[:, q]
    m[:, p] = c * mp - s * mq
    m[:, q] = s * mp + c * mq


def _off_norm(a):
    off = a.copy()
    np.fill_diagonal(off, 0.0)
    return np.linalg.norm(off)


def sym_eig(s, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS):
    """Eigenvalues (non-increasing) and orthonormal eigenvectors of a symmetric matrix.

    The input is symmetrized as (S + S^T)/2.  Iteration stops once the
    off-diagonal Frobenius mass is below ``tol * ||S||_F``.
    """
    a = np.array(s, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"sym_eig expects a square matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericalError("sym_eig input has non-finite entries")
    n = a.shape[0]
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    scale = np.linalg.norm(a)
    if n == 1 or scale == 0.0:
        return np.diag(a).copy(), v
    rounds = _round_robin(n)
    polish = 1  # one sweep past the threshold squares the residual
    for _ in range(max_sweeps):
        if _off_norm(a) <= tol * scale:
            if polish == 0:
                break
            polish -= 1
        for p, q in rounds:
            c, s_ = _pair_rotation(a[p, p], a[q, q], a[p, q])
            _rotate_columns(a, p, q, c, s_)
            ap = a[p, :].copy()
            aq = a[q, :]
            a[p, :] = c[:, None] * ap - s_[:, None] * aq
            a[q, :] = s_[:, None] * ap + c[:, None] * aq
            a[p, q] = 0.0
            a[q, p] = 0.0
            _rotate_columns(v, p, q, c, s_)
    else:
        off = _off_norm(a)
        if off > tol * scale:
            raise NumericalError(
                f"Jacobi did not converge in {max_sweeps} sweeps "
                f"(off-diagonal residual {off / scale:.3e} relative)"
            )
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def complete_basis(u) -> np.ndarray:
    """Orthonormal basis of the orthogonal complement of the columns of ``u``."""
    u = np.asarray(u, dtype=np.float64)
    r, k = u.shape
    if k >= r:
        return np.zeros((r, 0))
    proj = np.eye(r) - u @ u.T
    _, vecs = sym_eig(proj)
    return vecs[:, : r - k]


def _one_sided_polish(b, v, tol=1e-13, max_sweeps=30):
    n = b.shape[1]
    if n < 2:
        return b, v
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        worst = 0.0
        for p, q in rounds:
            alpha = np.einsum("ij,ij->j", b[:, p], b[:, p])
            beta = np.einsum("ij,ij->j", b[:, q], b[:, q])
            gamma = np.einsum("ij,ij->j", b[:, p], b[:, q])
            denom = np.sqrt(alpha * beta)
            rel = np.abs(gamma) / np.where(denom > 0, denom, 1.0)
            gamma = np.where(rel > tol, gamma, 0.0)
            worst = max(worst, float(rel.max(initial=0.0)))
            c, s = _pair_rotation(alpha, beta, gamma)
            _rotate_columns(b, p, q, c, s)
            _rotate_columns(v, p, q, c, s)
        if worst <= tol:
            break
    return b, v


def svd(m):
    """Thin SVD ``m = U diag(sigma) V^T`` with sigma non-increasing.

    V comes from the Jacobi eigenbasis of the Gram matrix of the thinner
    side; the columns of ``m V`` are then polished to mutual orthogonality
    by one-sided Jacobi so small singular values keep their accuracy.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"svd expects a rank-2 matrix, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericalError("svd input has non-finite entries")
    r, c = m.shape
    if r < c:
        v, sig, u = svd(m.T)
        return u, sig, v
    _, v = sym_eig(m.T @ m)
    b, v = _one_sided_polish(m @ v, v.copy())
    sig = np.linalg.norm(b, axis=0)
    order = np.argsort(-sig, kind="stable")
    sig, b, v = sig[order], b[:, order], v[:, order]
    cutoff = max(r, c) * np.finfo(np.float64).eps * (sig[0] if c else 0.0)
    big = sig > cutoff
    u = np.zeros((r, c))
    u[:, big] = b[:, big] / sig[big]
    n_small = int((~big).sum())
    if n_small:
        u[:, ~big] = complete_basis(u[:, big])[:, :n_small]
        sig = np.where(big, sig, 0.0)
    return u, sig, v


def pca_project(features, k: int) -> np.ndarray:
    """Scores of the mean-centred rows on the top-k principal directions.

    Each score column is sign-canonicalized so its largest-magnitude entry
    is positive, which makes the output independent of channel order.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"features must be N x C, got {x.shape}")
    n, c = x.shape
    if n < 2:
        raise ShapeError("PCA needs at least two rows")
    if not 1 <= k <= min(n, c):
        raise ShapeError(f"k={k} outside [1, {min(n, c)}]")
    xc = x - x.mean(axis=0)
    _, vecs = sym_eig(xc.T @ xc / (n - 1))
    scores = xc @ vecs[:, :k]
    for j in range(k):
        col = scores[:, j]
        i = int(np.argmax(np.abs(col)))
        if col[i] < 0:
            scores[:, j] = -col
    return scores


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f(x))
        flat[i] = old - h
        fm = float(f(x))
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(a, b) -> float:
    """Norm-wise relative discrepancy ``||a - b|| / max(||a||, ||b||)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
