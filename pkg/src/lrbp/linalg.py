"""Dense factorizations: symmetric eigendecomposition, SVD and PCA.

Everything is computed in float64 on top of LAPACK (via numpy). Singular and
eigenvectors are sign-normalized so that the largest-magnitude entry of each
vector is positive, which makes results reproducible across calls.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError

SYMMETRY_TOL = 1e-6


@dataclass(frozen=True)
class SymEigResult:
    """Eigenpairs sorted by descending absolute eigenvalue."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self):
        Q = self.eigenvectors
        return (Q * self.eigenvalues) @ Q.T


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray
    s: np.ndarray
    V: np.ndarray

    def reconstruct(self):
        return (self.U * self.s) @ self.V.T

    def tail_energy(self, m):
        """Squared Frobenius error of the best rank-``m`` approximation."""
        return float(np.sum(self.s[m:] ** 2))


@dataclass(frozen=True)
class PcaResult:
    components: np.ndarray  # c x m, orthonormal columns
    mean: np.ndarray
    explained_variance: np.ndarray  # length m
    retained_fraction: float


def as_matrix(A, name="matrix"):
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] < 1 or A.shape[1] < 1:
        raise DimensionError(f"{name} must be a non-empty 2-D array, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise DataError(f"{name} has non-finite entries")
    return A


def fix_signs(vectors):
    """Flip columns so the entry of largest magnitude in each is positive."""
    if vectors.size == 0:
        return vectors
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def symmetrize(W):
    return 0.5 * (W + W.T)


def sym_eig(W):
    """Eigendecomposition of a symmetric matrix.

    Inputs that are not symmetric to within a relative ``1e-6`` are replaced by
    their symmetric part ``(W + W.T) / 2`` before factorizing.
    """
    W = as_matrix(W, "W")
    if W.shape[0] != W.shape[1]:
        raise DimensionError(f"sym_eig needs a square matrix, got {W.shape}")
    scale = max(1.0, np.linalg.norm(W))
    if np.linalg.norm(W - W.T) / scale >= SYMMETRY_TOL:
        W = symmetrize(W)
    evals, evecs = np.linalg.eigh(W)
    # stable sort keeps LAPACK's ascending order among equal magnitudes
    order = np.argsort(-np.abs(evals), kind="stable")
    return SymEigResult(evals[order], fix_signs(evecs[:, order]))


def svd(A):
    """Thin SVD with descending singular values."""
    A = as_matrix(A, "A")
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    V = Vt.T
    # sign fixed on U; V follows so that U diag(s) V^T is unchanged
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return SvdResult(U * signs, s, V * signs)


def top_left_singular_vectors(A, m):
    return svd(A).U[:, :m]


def pca(samples, m):
    """Principal directions of the columns of ``samples`` (c x n).

    Columns are mean-centered first. Returns the top ``m`` directions together
    with the fraction of total variance they retain.
    """
    X = as_matrix(samples, "samples")
    c, n = X.shape
    if m < 1 or m > c:
        raise DimensionError(f"pca needs 1 <= m <= c={c}, got m={m}")
    mean = X.mean(axis=1)
    Xc = X - mean[:, None]
    res = svd(Xc)
    variances = res.s**2 / max(n - 1, 1)
    total = float(np.sum(variances))
    components = res.U[:, :m]
    if components.shape[1] < m:
        # fewer samples than requested directions: complete the basis
        components = _complete_basis(components, m)
        variances = np.concatenate([variances, np.zeros(m - variances.size)])
    explained = variances[:m]
    retained = 1.0 if total == 0.0 else float(np.sum(explained) / total)
    return PcaResult(components, mean, explained, retained)


def _complete_basis(Q, m):
    c, k = Q.shape
    # project the identity off span(Q) and take its dominant directions
    R = np.eye(c) - Q @ Q.T
    extra = svd(R).U[:, : m - k]
    return np.hstack([Q, extra])


def random_orthonormal(c, m, rng):
    """Haar-distributed ``c x m`` matrix with orthonormal columns."""
    G = rng.standard_normal((c, m))
    Q, R = np.linalg.qr(G)
    return Q * np.sign(np.diag(R))
