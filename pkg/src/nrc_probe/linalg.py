"""Dense linear-algebra kernels shared by all collapse metrics.

Every matrix in this package is a 2-D float64 numpy array with samples as
rows (N x h for features, N x t for targets). Weight matrices follow the
h_out x h_in layout, so their right singular vectors live in the layer's
input space.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_RCOND = 1e-12
ORTHO_TOL = 1e-10


class ZeroVarianceError(ValueError):
    """An alignment score is undefined because an input has no variance."""


def ensure_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array and reject empty or non-finite input."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if m.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.isfinite(m).all():
        raise ValueError(f"{name} contains non-finite entries")
    return m


@dataclass(frozen=True)
class SvdFactorization:
    """Thin SVD M = left @ diag(singular_values) @ right.T."""

    left: np.ndarray
    singular_values: np.ndarray
    right: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.left * self.singular_values) @ self.right.T


@dataclass(frozen=True)
class OrthonormalBasis:
    """Columns form an orthonormal basis of a subspace of R^ambient_dim."""

    basis: np.ndarray

    def __post_init__(self):
        b = ensure_matrix(self.basis, "basis")
        if b.shape[1] < 1 or b.shape[1] > b.shape[0]:
            raise ValueError(f"invalid subspace dimension for shape {b.shape}")
        gram = b.T @ b
        dev = np.abs(gram - np.eye(b.shape[1])).max()
        if dev > ORTHO_TOL:
            raise ValueError(f"columns are not orthonormal (max deviation {dev:.3e})")
        object.__setattr__(self, "basis", b)

    @property
    def ambient_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def subspace_dim(self) -> int:
        return self.basis.shape[1]


def center_columns(m) -> np.ndarray:
    """Subtract the per-column mean so every column sums to zero."""
    m = ensure_matrix(m)
    return m - m.mean(axis=0)


def covariance(h_centered) -> np.ndarray:
    """(1/N) H_c^T H_c for column-centered H_c with N >= 2 rows.

    Rejects visibly uncentered input: that always signals a caller bug,
    since every metric in this package centers before taking covariances.
    """
    h = ensure_matrix(h_centered, "H_centered")
    n = h.shape[0]
    if n < 2:
        raise ValueError("covariance needs at least 2 rows")
    mean_norm = float(np.linalg.norm(h.mean(axis=0)))
    if mean_norm > 1e-6:
        raise ValueError(f"input is not column-centered (mean norm {mean_norm:.3e})")
    c = h.T @ h / n
    return (c + c.T) / 2.0


def svd(m) -> SvdFactorization:
    """Thin SVD with singular values sorted descending.

    Non-convergence of the underlying LAPACK driver surfaces as
    numpy.linalg.LinAlgError.
    """
    m = ensure_matrix(m)
    u, s, vh = np.linalg.svd(m, full_matrices=False)
    return SvdFactorization(left=u, singular_values=s, right=vh.T)


def _fix_signs(basis: np.ndarray) -> np.ndarray:
    """Flip column signs so the largest-magnitude entry of each is positive."""
    idx = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[idx, np.arange(basis.shape[1])])
    signs[signs == 0] = 1.0
    return basis * signs


def top_cov_eigenspace(h_centered, k: int) -> OrthonormalBasis:
    """Top-k eigenvectors of the feature covariance of column-centered H.

    Equal to the top-k right singular vectors of H_centered. Deterministic
    sign convention: the largest-magnitude entry of each vector is positive.
    """
    h = ensure_matrix(h_centered, "H_centered")
    if not 1 <= k <= h.shape[1]:
        raise ValueError(f"k={k} out of range for {h.shape[1]} columns")
    f = svd(h)
    return OrthonormalBasis(_fix_signs(f.right[:, :k]))


def top_input_subspace(w, k: int) -> OrthonormalBasis:
    """Top-k right singular vectors of a weight matrix (h_out x h_in).

    The returned vectors live in the layer's input space.
    """
    w = ensure_matrix(w, "W")
    if not 1 <= k <= min(w.shape):
        raise ValueError(f"k={k} out of range for shape {w.shape}")
    f = svd(w)
    return OrthonormalBasis(_fix_signs(f.right[:, :k]))


def _truncated_pinv_solve(
    u: np.ndarray, s: np.ndarray, v: np.ndarray, y: np.ndarray, rcond: float
) -> np.ndarray:
    """Minimum-norm least-squares solution from a precomputed thin SVD."""
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((v.shape[0], y.shape[1]))
    keep = s > rcond * s[0]
    return v[:, keep] @ ((u[:, keep].T @ y) / s[keep, None])


def least_squares_pinv(h, y, rcond: float = DEFAULT_RCOND) -> np.ndarray:
    """B = H^+ Y via SVD, truncating singular values below rcond * sigma_max.

    B minimizes ||H B - Y||_F and, among minimizers, has minimum Frobenius
    norm. An all-zero H degenerates to B = 0 (logged, not raised).
    """
    h = ensure_matrix(h, "H")
    y = ensure_matrix(y, "Y")
    if h.shape[0] != y.shape[0]:
        raise ValueError(f"row mismatch: H has {h.shape[0]}, Y has {y.shape[0]}")
    if not h.any():
        log.warning("least_squares_pinv: all-zero design matrix, returning B = 0")
        return np.zeros((h.shape[1], y.shape[1]))
    f = svd(h)
    return _truncated_pinv_solve(f.left, f.singular_values, f.right, y, rcond)


def linear_cka(a, b) -> float:
    """Linear centered kernel alignment between two data matrices.

    ||B_c^T A_c||_F^2 / (||A_c^T A_c||_F * ||B_c^T B_c||_F) on column-centered
    inputs; equals the Gram-matrix HSIC form and lies in [0, 1]. Invariant to
    isotropic scaling, orthogonal rotation, and per-column shifts.
    """
    a_c = center_columns(a)
    b_c = center_columns(b)
    if a_c.shape[0] != b_c.shape[0]:
        raise ValueError(f"row mismatch: {a_c.shape[0]} vs {b_c.shape[0]}")
    na = float(np.linalg.norm(a_c.T @ a_c))
    nb = float(np.linalg.norm(b_c.T @ b_c))
    if na == 0.0 or nb == 0.0:
        raise ZeroVarianceError("CKA undefined: an input has zero variance")
    cross = float(np.linalg.norm(b_c.T @ a_c) ** 2)
    return float(np.clip(cross / (na * nb), 0.0, 1.0))


def principal_angle_cosines(u1: OrthonormalBasis, u2: OrthonormalBasis) -> np.ndarray:
    """Cosines of the principal angles between two subspaces.

    Singular values of U1^T U2: min(k1, k2) values in [0, 1], nonincreasing.
    """
    if u1.ambient_dim != u2.ambient_dim:
        raise ValueError(
            f"ambient dimension mismatch: {u1.ambient_dim} vs {u2.ambient_dim}"
        )
    s = np.linalg.svd(u1.basis.T @ u2.basis, compute_uv=False)
    return np.clip(s, 0.0, 1.0)


def stable_rank(m) -> float:
    """||M||_F^2 / sigma_max(M)^2, a smooth rank surrogate in [1, rank(M)]."""
    m = ensure_matrix(m)
    s = np.linalg.svd(m, compute_uv=False)
    if s[0] == 0.0:
        raise ValueError("stable rank of the zero matrix is undefined")
    return float((s**2).sum() / s[0] ** 2)
