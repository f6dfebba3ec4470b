"""Truncated SVD of flattened feature maps and its right-vector-only backward pass.

All decompositions run in float64. Arrays may carry leading batch dimensions:
a stack ``(..., n, D)`` is decomposed matrix by matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .autograd.tensor import DTYPE, Function, ShapeError, Tensor

# relative floor on |sigma_i^2 - sigma_j^2| inside K, as a fraction of sigma_1^2
GAP_FLOOR = 1e-6
# singular values below this fraction of sigma_1 are treated as exact zeros
RANK_TOL = 1e-10


def flatten_feature_map(f: np.ndarray) -> np.ndarray:
    """H x W x D feature map -> (H*W) x D matrix; row ``h*W + w`` is site (h, w)."""
    f = np.asarray(f)
    if f.ndim != 3:
        raise ShapeError("flatten_feature_map", f.shape, detail="expected rank-3 H x W x D")
    h, w, d = f.shape
    return f.reshape(h * w, d)


def unflatten_feature_map(m: np.ndarray, height: int, width: int) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != height * width:
        raise ShapeError("unflatten_feature_map", m.shape, (height, width))
    return m.reshape(height, width, m.shape[1])


@dataclass
class TruncatedSVD:
    """Top-``k`` singular triplets of ``M`` plus the basis the backward pass needs.

    ``V`` holds the right singular vectors as rows (``k x D``), ``sigma`` the
    singular values in non-increasing order. ``basis``/``eigvals`` keep every
    right singular direction that was computed (columns), with eigenvalues
    ``sigma**2``; columns whose singular value is numerically zero are zeroed.
    """

    M: np.ndarray
    k: int
    V: np.ndarray
    sigma: np.ndarray
    U_cache: np.ndarray
    basis: np.ndarray
    eigvals: np.ndarray
    wide: bool  # H*W < D: decomposed through M M^T

    @property
    def shape(self) -> tuple:
        return self.M.shape[-2:]


def _canonical_signs(vectors: np.ndarray) -> np.ndarray:
    """+1/-1 per column so the column sum is positive (largest |entry| breaks ties)."""
    total = vectors.sum(axis=-2)
    idx = np.abs(vectors).argmax(axis=-2)
    peak = np.take_along_axis(vectors, idx[..., None, :], axis=-2)[..., 0, :]
    tie = np.abs(total) <= 1e-12 * np.abs(vectors).sum(axis=-2)
    ref = np.where(tie, peak, total)
    return np.where(ref < 0, -1.0, 1.0)


def truncated_svd(M, k: int, method: str = "eigh") -> TruncatedSVD:
    """Rank-``k`` SVD of ``M`` (shape ``(..., n, D)``).

    The smaller Gram matrix is diagonalised: ``M^T M`` when ``D <= n``,
    ``M M^T`` otherwise. ``method="eigh"`` uses LAPACK; ``method="jacobi"``
    uses :func:`jacobi_svd` (slow, for cross-checking).
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim < 2:
        raise ShapeError("truncated_svd", M.shape, detail="expected a matrix")
    n, d = M.shape[-2:]
    if not 1 <= k <= min(n, d):
        raise ValueError(f"truncated_svd: rank k={k} outside [1, min({n}, {d})]")
    if method == "jacobi":
        return _truncated_from_jacobi(M, k)
    if method != "eigh":
        raise ValueError(f"truncated_svd: unknown method {method!r}")

    wide = n < d
    Mt = np.swapaxes(M, -1, -2)
    if not wide:
        lam, vecs = np.linalg.eigh(Mt @ M)
        lam = np.clip(lam[..., ::-1], 0.0, None)
        basis = vecs[..., ::-1]
    else:
        lam, uvecs = np.linalg.eigh(M @ Mt)
        lam = np.clip(lam[..., ::-1], 0.0, None)
        uvecs = uvecs[..., ::-1]
        sig = np.sqrt(lam)
        valid = sig > RANK_TOL * np.maximum(sig[..., :1], np.finfo(float).tiny)
        safe = np.where(valid, sig, 1.0)
        basis = (Mt @ uvecs) / safe[..., None, :]
        basis = np.where(valid[..., None, :], basis, 0.0)
        lam = np.where(valid, lam, 0.0)
    basis = basis * _canonical_signs(basis)[..., None, :]
    sigma_all = np.sqrt(lam)
    sigma = sigma_all[..., :k]
    Vk = basis[..., :, :k]
    safe = np.where(sigma > 0, sigma, 1.0)
    U = np.where(sigma[..., None, :] > 0, (M @ Vk) / safe[..., None, :], 0.0)
    return TruncatedSVD(M=M, k=k, V=np.swapaxes(Vk, -1, -2), sigma=sigma, U_cache=U,
                        basis=basis, eigvals=lam, wide=wide)


def svd_backward(s: TruncatedSVD, grad_V, gap_floor: float = GAP_FLOOR) -> np.ndarray:
    """Gradient w.r.t. ``M`` of a loss that depends on the top-k right vectors only.

    ``grad_V`` has the shape of ``s.V`` (``k x D`` rows). Singular values
    are treated as constants, so only the ``V`` path contributes:

        grad_M = M B (C + C^T) B^T  +  [H*W < D]  M V_k diag(1/sigma_k^2) (P G)^T

    where ``B`` is the full right basis, ``C_ij = K_ij (g_i . b_j)`` for
    ``i < k``, ``K_ij = 1/(sigma_i^2 - sigma_j^2)`` off the diagonal, and
    ``P = I - B B^T`` projects onto the null space of ``M``.
    """
    G = np.asarray(grad_V, dtype=np.float64)
    if G.shape != s.V.shape:
        raise ShapeError("svd_backward", G.shape, s.V.shape)
    k = s.k
    M, B, lam = s.M, s.basis, s.eigvals
    r = lam.shape[-1]
    Gc = np.swapaxes(G, -1, -2)  # (..., D, k)

    lam_k = lam[..., :k]
    diff = lam_k[..., :, None] - lam[..., None, :]  # (..., k, r)
    floor = gap_floor * lam[..., :1, None]
    floor = np.maximum(floor, np.finfo(float).tiny)
    order = np.arange(r)[None, :] > np.arange(k)[:, None]
    direction = np.where(order, 1.0, -1.0)
    clamped = np.where(np.abs(diff) >= floor, diff, direction * floor)
    K = 1.0 / clamped
    K[..., np.arange(k), np.arange(k)] = 0.0
    if s.wide:
        K = np.where(lam[..., None, :] > 0, K, 0.0)

    proj = G @ B  # (..., k, r): g_i . b_j
    C = np.zeros(lam.shape + (r,), dtype=np.float64)
    C[..., :k, :] = K * proj
    core = C + np.swapaxes(C, -1, -2)
    MB = M @ B
    grad_M = MB @ core @ np.swapaxes(B, -1, -2)

    if s.wide:
        PG = Gc - B @ (np.swapaxes(B, -1, -2) @ Gc)
        inv = 1.0 / np.maximum(lam_k, np.maximum(floor[..., 0], np.finfo(float).tiny))
        grad_M = grad_M + (MB[..., :, :k] * inv[..., None, :]) @ np.swapaxes(PG, -1, -2)
    return grad_M


class _SVDRightVectors(Function):
    name = "truncated_svd"

    def forward(self, m, svd=None, backward_sign=1.0):
        self.saved = (svd, backward_sign)
        return svd.V.astype(DTYPE)

    def backward(self, g):
        svd, sign = self.saved
        return ((sign * svd_backward(svd, g)).astype(DTYPE),)


def svd_right_vectors(m: Tensor, k: int, backward_sign: float = 1.0) -> Tuple[Tensor, TruncatedSVD]:
    """Differentiable top-``k`` right singular vectors of a stack of matrices.

    Returns ``(V, svd)`` where ``V`` is a float32 Tensor ``(..., k, D)``
    connected to ``m``; ``svd.sigma`` is a constant. ``backward_sign=-1``
    corrupts the backward pass and exists only for fault-injection checks.
    """
    svd = truncated_svd(m.data, k)
    return _SVDRightVectors.apply(m, svd=svd, backward_sign=backward_sign), svd


def jacobi_svd(M, tol: float = 1e-15, max_sweeps: int = 60) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full thin SVD of a single matrix by one-sided (Hestenes) Jacobi rotations.

    Returns ``(U, sigma, Vt)`` with ``sigma`` non-increasing. Works on the
    transpose when the matrix is wide.
    """
    A = np.array(M, dtype=np.float64)
    if A.ndim != 2:
        raise ShapeError("jacobi_svd", A.shape, detail="expected a matrix")
    transposed = A.shape[0] < A.shape[1]
    if transposed:
        A = A.T.copy()
    n = A.shape[1]
    V = np.eye(n)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = A[:, p] @ A[:, p]
                beta = A[:, q] @ A[:, q]
                gamma = A[:, p] @ A[:, q]
                if abs(gamma) <= tol * np.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                ap, aq = A[:, p].copy(), A[:, q]
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                vp, vq = V[:, p].copy(), V[:, q]
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
        if not rotated:
            break
    sigma = np.linalg.norm(A, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    A, V = A[:, order], V[:, order]
    U = np.divide(A, sigma, out=np.zeros_like(A), where=sigma > 0)
    if transposed:
        return V, sigma, U.T
    return U, sigma, V.T


def _truncated_from_jacobi(M: np.ndarray, k: int) -> TruncatedSVD:
    if M.ndim != 2:
        raise ShapeError("truncated_svd", M.shape, detail="jacobi method takes one matrix")
    n, d = M.shape
    wide = n < d
    U, sigma, Vt = jacobi_svd(M)
    B = Vt.T
    lam = sigma ** 2
    valid = sigma > RANK_TOL * max(sigma[0], np.finfo(float).tiny)
    if wide:
        B = np.where(valid[None, :], B, 0.0)
        lam = np.where(valid, lam, 0.0)
    signs = _canonical_signs(B)
    B = B * signs
    U = U * signs
    return TruncatedSVD(M=M, k=k, V=B[:, :k].T.copy(), sigma=np.sqrt(lam[:k]),
                        U_cache=U[:, :k], basis=B, eigvals=lam, wide=wide)


def reconstruct(s: TruncatedSVD) -> np.ndarray:
    """Rank-k reconstruction ``U diag(sigma) V^T``."""
    return (s.U_cache * s.sigma[..., None, :]) @ s.V


def full_svd_oracle(M) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reference decomposition used by the verification suites."""
    return jacobi_svd(M)


def sigma_gaps(sigma: np.ndarray) -> Optional[float]:
    sigma = np.asarray(sigma)
    if sigma.size < 2:
        return None
    return float(np.min(-np.diff(sigma)))
