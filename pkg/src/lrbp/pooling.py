"""Second-order (bilinear) pooling of feature maps and its normalizations."""

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError

L2_EPS = 1e-12


@dataclass(frozen=True)
class FeatureMap:
    """Local descriptors of one image.

    ``X`` has shape ``(c, h*w)``; column ``i`` is the descriptor at spatial
    position ``(i // w, i % w)``.
    """

    X: np.ndarray
    h: int
    w: int

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            raise DimensionError(f"descriptors must be 2-D (c, h*w), got shape {X.shape}")
        if self.h < 1 or self.w < 1 or X.shape[1] != self.h * self.w:
            raise DimensionError(
                f"descriptor matrix {X.shape} does not match spatial size {self.h}x{self.w}"
            )
        if not np.all(np.isfinite(X)):
            raise DataError("feature map has non-finite entries")
        object.__setattr__(self, "X", X)

    @property
    def channels(self):
        return self.X.shape[0]

    @classmethod
    def from_grid(cls, grid):
        """Build from an ``(h, w, c)`` array."""
        grid = np.asarray(grid, dtype=np.float64)
        h, w, c = grid.shape
        return cls(grid.reshape(h * w, c).T, h, w)

    def to_grid(self):
        return self.X.T.reshape(self.h, self.w, self.channels)


@dataclass(frozen=True)
class PooledBilinear:
    B: np.ndarray
    normalized: tuple = ()

    @property
    def dim(self):
        return self.B.shape[0]


def bilinear_pool(fm):
    """``X X^T``: the sum of outer products of all local descriptors."""
    X = fm.X
    B = X @ X.T
    # matmul can leave ulp-level asymmetry
    B = 0.5 * (B + B.T)
    return PooledBilinear(B)


def pool_batch(X):
    """Pool a stack of descriptor matrices ``(n, c, hw) -> (n, c, c)``."""
    return np.einsum("ncl,ndl->ncd", X, X)


def vectorize(B):
    """Row-major flattening of a pooled matrix."""
    if isinstance(B, PooledBilinear):
        B = B.B
    return np.asarray(B, dtype=np.float64).reshape(-1)


def unvectorize(z):
    z = np.asarray(z, dtype=np.float64)
    c = int(round(np.sqrt(z.size)))
    if c * c != z.size:
        raise DimensionError(f"vector of length {z.size} is not a square matrix")
    return z.reshape(c, c)


def signed_sqrt(t):
    t = np.asarray(t, dtype=np.float64)
    return np.sign(t) * np.sqrt(np.abs(t))


def l2_normalize(z, eps=L2_EPS):
    z = np.asarray(z, dtype=np.float64)
    norm = np.linalg.norm(z)
    if norm <= eps:
        return z
    return z / norm


def project_features(fm, P):
    """Apply a shared ``c x m`` projection (a 1x1 convolution) to every descriptor."""
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] != fm.channels:
        raise DimensionError(f"projection of shape {P.shape} does not match {fm.channels} channels")
    return FeatureMap(P.T @ fm.X, fm.h, fm.w)


def normalize_pipeline_I(fm):
    """Signed square root on the descriptors; no l2 step."""
    return FeatureMap(signed_sqrt(fm.X), fm.h, fm.w)


def normalize_pipeline_II(B):
    """Signed square root followed by l2 normalization of ``vec(B)``."""
    return l2_normalize(signed_sqrt(vectorize(B)))


def normalize_pooled_batch(Bs):
    """Pipeline II applied to each matrix of a ``(n, c, c)`` stack."""
    S = signed_sqrt(Bs)
    norms = np.sqrt(np.sum(S * S, axis=(1, 2)))
    scale = np.where(norms > L2_EPS, norms, 1.0)
    return S / scale[:, None, None]
