"""Bilinear SVM classifiers on second-order statistics.

Two parameterizations are supported:

* the full trace-form classifier ``s(X) = tr(W^T X X^T) + b``;
* the low-rank Frobenius-margin classifier with ``W = U+ U+^T - U- U-^T`` so
  that ``s(X) = ||U+^T X||_F^2 - ||U-^T X||_F^2 + b`` can be evaluated without
  ever forming ``X X^T``.

The array-level functions work on stacks: descriptors ``X`` are ``(n, c, hw)``,
pooled matrices ``B`` are ``(n, c, c)`` and a model holds ``K`` one-vs-rest
classifiers along its leading axis. The single-classifier API at the bottom of
the module wraps them with ``K = 1``.

The hinge uses the standard placement ``max(0, 1 - y (s + b))`` and the
regularizer is ``(lam/2) (||U+ U+^T||^2 + ||U- U-^T||^2 + ||U+^T U-||^2)``.
Gradients are the exact derivatives of the batch-mean objective.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .linalg import sym_eig, symmetrize
from .pooling import FeatureMap, PooledBilinear, pool_batch


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------


@dataclass
class FullBilinearClassifier:
    W: np.ndarray
    b: float = 0.0

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.W.ndim != 2 or self.W.shape[0] != self.W.shape[1]:
            raise DimensionError(f"W must be square, got {self.W.shape}")
        self.b = float(self.b)

    @property
    def c(self):
        return self.W.shape[0]


@dataclass
class LowRankClassifier:
    Uplus: np.ndarray
    Uminus: np.ndarray
    b: float = 0.0

    def __post_init__(self):
        self.Uplus = _as_factor(self.Uplus)
        self.Uminus = _as_factor(self.Uminus)
        if self.Uplus.shape[0] != self.Uminus.shape[0]:
            raise DimensionError(
                f"U+ has {self.Uplus.shape[0]} rows but U- has {self.Uminus.shape[0]}"
            )
        self.b = float(self.b)

    @property
    def c(self):
        return self.Uplus.shape[0]

    @property
    def rank(self):
        return self.Uplus.shape[1] + self.Uminus.shape[1]

    @property
    def split(self):
        return self.Uplus.shape[1], self.Uminus.shape[1]

    def weight_matrix(self):
        return self.Uplus @ self.Uplus.T - self.Uminus @ self.Uminus.T

    def stacked(self):
        """``[U+, U-]`` as one ``c x r`` matrix."""
        return np.hstack([self.Uplus, self.Uminus])


def _as_factor(U):
    U = np.asarray(U, dtype=np.float64)
    if U.ndim == 1:
        U = U[:, None]
    if U.ndim != 2:
        raise DimensionError(f"factor must be 2-D, got shape {U.shape}")
    return U


@dataclass
class MarginExample:
    features: FeatureMap
    y: int

    def __post_init__(self):
        if self.y not in (-1, 1):
            raise ValueError(f"label must be +1 or -1, got {self.y}")


@dataclass
class FullModel:
    """``K`` full-rank one-vs-rest classifiers, ``W`` of shape ``(K, c, c)``."""

    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if self.W.ndim != 3 or self.W.shape[1] != self.W.shape[2]:
            raise DimensionError(f"W must be (K, c, c), got {self.W.shape}")
        if self.b.shape != (self.W.shape[0],):
            raise DimensionError(f"need {self.W.shape[0]} biases, got {self.b.shape}")

    kind = "full"

    @property
    def K(self):
        return self.W.shape[0]

    @property
    def c(self):
        return self.W.shape[1]

    @property
    def n_params(self):
        return self.W.size

    def classifiers(self):
        return [FullBilinearClassifier(W, b) for W, b in zip(self.W, self.b)]

    @classmethod
    def from_classifiers(cls, classifiers):
        return cls(np.stack([f.W for f in classifiers]), np.array([f.b for f in classifiers]))

    def scores_pooled(self, B):
        return full_scores(self.W, self.b, B)

    def scores(self, X):
        return self.scores_pooled(pool_batch(_check_stack(X, self.c)))


@dataclass
class LowRankModel:
    """``K`` low-rank classifiers sharing column counts ``p`` (U+) and ``q`` (U-).

    Classifiers with fewer columns are zero-padded, which changes neither
    scores nor regularizer values.
    """

    Uplus: np.ndarray
    Uminus: np.ndarray
    b: np.ndarray

    kind = "lowrank"

    def __post_init__(self):
        self.Uplus = np.asarray(self.Uplus, dtype=np.float64)
        self.Uminus = np.asarray(self.Uminus, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if self.Uplus.ndim != 3 or self.Uminus.ndim != 3:
            raise DimensionError("factors must be (K, c, cols) arrays")
        if self.Uplus.shape[:2] != self.Uminus.shape[:2]:
            raise DimensionError(
                f"U+ {self.Uplus.shape} and U- {self.Uminus.shape} disagree on (K, c)"
            )
        if self.b.shape != (self.Uplus.shape[0],):
            raise DimensionError(f"need {self.Uplus.shape[0]} biases, got {self.b.shape}")

    @property
    def K(self):
        return self.Uplus.shape[0]

    @property
    def c(self):
        return self.Uplus.shape[1]

    @property
    def rank(self):
        return self.Uplus.shape[2] + self.Uminus.shape[2]

    @property
    def n_params(self):
        return self.Uplus.size + self.Uminus.size

    def classifiers(self):
        return [
            LowRankClassifier(Up, Um, b) for Up, Um, b in zip(self.Uplus, self.Uminus, self.b)
        ]

    @classmethod
    def from_classifiers(cls, classifiers):
        if not classifiers:
            raise ValueError("need at least one classifier")
        c = classifiers[0].c
        if any(clf.c != c for clf in classifiers):
            raise DimensionError("classifiers disagree on the channel count")
        p = max(clf.Uplus.shape[1] for clf in classifiers)
        q = max(clf.Uminus.shape[1] for clf in classifiers)
        K = len(classifiers)
        Up = np.zeros((K, c, p))
        Um = np.zeros((K, c, q))
        for k, clf in enumerate(classifiers):
            Up[k, :, : clf.Uplus.shape[1]] = clf.Uplus
            Um[k, :, : clf.Uminus.shape[1]] = clf.Uminus
        return cls(Up, Um, np.array([clf.b for clf in classifiers]))

    def stacked(self):
        """``(K, c, p+q)`` array of ``[U+_k, U-_k]``."""
        return np.concatenate([self.Uplus, self.Uminus], axis=2)

    def weight_matrices(self):
        return np.einsum("kcp,kdp->kcd", self.Uplus, self.Uplus) - np.einsum(
            "kcq,kdq->kcd", self.Uminus, self.Uminus
        )

    def scores(self, X):
        return lowrank_scores(self.Uplus, self.Uminus, self.b, _check_stack(X, self.c))

    def scores_pooled(self, B):
        return lowrank_scores_pooled(self.Uplus, self.Uminus, self.b, B)


def _check_stack(X, c):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[1] != c:
        raise DimensionError(f"expected descriptors of shape (n, {c}, hw), got {X.shape}")
    return X


def init_lowrank(K, c, r, rng):
    """Random low-rank model with the equal ``r/2`` split; entries ~ N(0, 1/(c r))."""
    if r < 2 or r % 2:
        raise ValueError(f"rank must be even and >= 2, got {r}")
    std = 1.0 / np.sqrt(c * r)
    Up = rng.standard_normal((K, c, r // 2)) * std
    Um = rng.standard_normal((K, c, r // 2)) * std
    return LowRankModel(Up, Um, np.zeros(K))


# ---------------------------------------------------------------------------
# array-level scoring, loss and gradients
# ---------------------------------------------------------------------------


def _projections(Uplus, Uminus, X):
    """Squared norms of projected descriptors, ``(n, K, p)`` and ``(n, K, q)``."""
    p = Uplus.shape[2]
    U = np.concatenate([Uplus, Uminus], axis=2)
    K, c, r = U.shape
    Y = np.einsum("cj,ncl->njl", U.transpose(1, 0, 2).reshape(c, K * r), X, optimize=True)
    Y = Y.reshape(X.shape[0], K, r, X.shape[2])
    return Y, p


def lowrank_scores(Uplus, Uminus, b, X):
    """Frobenius-margin scores ``(n, K)`` computed directly from descriptors."""
    Y, p = _projections(Uplus, Uminus, X)
    E = np.sum(Y * Y, axis=3)
    return E[:, :, :p].sum(axis=2) - E[:, :, p:].sum(axis=2) + b


def lowrank_scores_pooled(Uplus, Uminus, b, B):
    """Trace-form scores ``tr(U+^T B U+) - tr(U-^T B U-) + b`` from pooled ``B``."""
    plus = np.einsum("ncd,kdp,kcp->nk", B, Uplus, Uplus, optimize=True)
    minus = np.einsum("ncd,kdq,kcq->nk", B, Uminus, Uminus, optimize=True)
    return plus - minus + b


def full_scores(W, b, B):
    K, c, _ = W.shape
    return B.reshape(B.shape[0], c * c) @ W.reshape(K, c * c).T + b


def hinge_terms(scores, Y):
    """Hinge values and the active mask; the kink itself counts as inactive."""
    h = 1.0 - Y * scores
    return np.maximum(h, 0.0), h > 0.0


def one_vs_rest_targets(labels, K):
    Y = -np.ones((labels.size, K))
    Y[np.arange(labels.size), labels] = 1.0
    return Y


def lowrank_regularizer(Uplus, Uminus):
    """Per-class ``||U+U+^T||^2 + ||U-U-^T||^2 + ||U+^T U-||^2`` as a length-K array."""
    Gp = np.einsum("kcp,kcs->kps", Uplus, Uplus)
    Gm = np.einsum("kcq,kcs->kqs", Uminus, Uminus)
    Gpm = np.einsum("kcp,kcq->kpq", Uplus, Uminus)
    return np.sum(Gp**2, axis=(1, 2)) + np.sum(Gm**2, axis=(1, 2)) + np.sum(Gpm**2, axis=(1, 2))


def lowrank_regularizer_grad(Uplus, Uminus, lam):
    """Gradient of ``(lam/2) * regularizer`` with respect to U+ and U-."""
    Gp = np.einsum("kcp,kcs->kps", Uplus, Uplus)
    Gm = np.einsum("kcq,kcs->kqs", Uminus, Uminus)
    Gpm = np.einsum("kcp,kcq->kpq", Uplus, Uminus)
    dUp = 2.0 * lam * np.einsum("kcp,kps->kcs", Uplus, Gp) + lam * np.einsum(
        "kcq,kpq->kcp", Uminus, Gpm
    )
    dUm = 2.0 * lam * np.einsum("kcq,kqs->kcs", Uminus, Gm) + lam * np.einsum(
        "kcp,kpq->kcq", Uplus, Gpm
    )
    return dUp, dUm


def lowrank_objective(Uplus, Uminus, b, X, Y, lam):
    """Sum over classes of batch-mean hinge plus ``(lam/2)`` regularizer."""
    losses, _ = hinge_terms(lowrank_scores(Uplus, Uminus, b, X), Y)
    return float(losses.mean(axis=0).sum() + 0.5 * lam * lowrank_regularizer(Uplus, Uminus).sum())


def lowrank_gradients(Uplus, Uminus, b, X, Y, lam):
    """Gradients of :func:`lowrank_objective`.

    The data terms are accumulated as ``X (X^T U)``; ``X X^T`` is never formed.
    """
    n = X.shape[0]
    Yproj, p = _projections(Uplus, Uminus, X)
    E = np.sum(Yproj * Yproj, axis=3)
    scores = E[:, :, :p].sum(axis=2) - E[:, :, p:].sum(axis=2) + b
    _, active = hinge_terms(scores, Y)
    coef = np.where(active, -Y, 0.0) / n  # d(mean hinge)/d(score)
    G = 2.0 * np.einsum("ncl,nkjl->kcj", X, coef[:, :, None, None] * Yproj, optimize=True)
    dUp, dUm = lowrank_regularizer_grad(Uplus, Uminus, lam)
    dUp = dUp + G[:, :, :p]
    dUm = dUm - G[:, :, p:]
    db = coef.sum(axis=0)
    return dUp, dUm, db


def full_objective(W, b, B, Y, lam):
    losses, _ = hinge_terms(full_scores(W, b, B), Y)
    return float(losses.mean(axis=0).sum() + 0.5 * lam * np.sum(W * W))


def full_gradients(W, b, B, Y, lam):
    n = B.shape[0]
    _, active = hinge_terms(full_scores(W, b, B), Y)
    coef = np.where(active, -Y, 0.0) / n
    dW = np.einsum("nk,ncd->kcd", coef, B) + lam * W
    return dW, coef.sum(axis=0)


def linear_svm_objective(w, b, Z, y, lam):
    """Soft-margin linear SVM on vectorized features ``Z`` of shape ``(n, d)``."""
    losses, _ = hinge_terms(Z @ w + b, y)
    return float(losses.mean() + 0.5 * lam * w @ w)


def linear_svm_gradients(w, b, Z, y, lam):
    n = Z.shape[0]
    _, active = hinge_terms(Z @ w + b, y)
    coef = np.where(active, -y, 0.0) / n
    return Z.T @ coef + lam * w, float(coef.sum())


# ---------------------------------------------------------------------------
# single-classifier API
# ---------------------------------------------------------------------------


def _single(clf):
    return clf.Uplus[None], clf.Uminus[None], np.array([clf.b])


def score_frobenius(clf, fm):
    if fm.channels != clf.c:
        raise DimensionError(f"classifier expects {clf.c} channels, map has {fm.channels}")
    Up, Um, b = _single(clf)
    return float(lowrank_scores(Up, Um, b, fm.X[None])[0, 0])


def score_via_pooled(clf, B):
    B = B.B if isinstance(B, PooledBilinear) else np.asarray(B, dtype=np.float64)
    if B.shape != (clf.c, clf.c):
        raise DimensionError(f"classifier expects {clf.c}x{clf.c} pooled input, got {B.shape}")
    Up, Um, b = _single(clf)
    return float(lowrank_scores_pooled(Up, Um, b, B[None])[0, 0])


def score_full(clf, B):
    B = B.B if isinstance(B, PooledBilinear) else np.asarray(B, dtype=np.float64)
    if B.shape != clf.W.shape:
        raise DimensionError(f"W is {clf.W.shape} but pooled input is {B.shape}")
    return float(np.trace(clf.W.T @ B) + clf.b)


def hinge(clf, ex):
    return max(0.0, 1.0 - ex.y * score_frobenius(clf, ex.features))


def regularizer(clf):
    Up, Um, _ = _single(clf)
    return float(lowrank_regularizer(Up, Um)[0])


def _stack_batch(batch, c):
    if not batch:
        raise ValueError("batch must not be empty")
    if any(ex.features.channels != c for ex in batch):
        raise DimensionError(f"every example must have {c} channels")
    shapes = {ex.features.X.shape for ex in batch}
    if len(shapes) == 1:
        X = np.stack([ex.features.X for ex in batch])
    else:
        # ragged spatial sizes: zero columns add nothing to any score
        hw = max(s[1] for s in shapes)
        X = np.zeros((len(batch), c, hw))
        for i, ex in enumerate(batch):
            X[i, :, : ex.features.X.shape[1]] = ex.features.X
    y = np.array([[float(ex.y)] for ex in batch])
    return X, y


def objective(clf, batch, lam):
    X, y = _stack_batch(batch, clf.c)
    return lowrank_objective(*_single(clf), X, y, lam)


def gradients(clf, batch, lam):
    """``(dU+, dU-, db)`` of :func:`objective` for a single classifier."""
    X, y = _stack_batch(batch, clf.c)
    dUp, dUm, db = lowrank_gradients(*_single(clf), X, y, lam)
    return dUp[0], dUm[0], float(db[0])


# ---------------------------------------------------------------------------
# truncation and spectra
# ---------------------------------------------------------------------------


def truncate_to_lowrank(full, r):
    """Keep the ``r`` eigenpairs of largest magnitude of the symmetrized ``W``.

    Positive eigenvalues go to U+ and negative ones to U-, so the split need
    not be balanced.
    """
    c = full.c
    if r < 1 or r > c:
        raise DimensionError(f"rank must be in [1, {c}], got {r}")
    eig = sym_eig(symmetrize(full.W))
    vals = eig.eigenvalues[:r]
    vecs = eig.eigenvectors[:, :r]
    pos = vals >= 0
    Up = vecs[:, pos] * np.sqrt(vals[pos])
    Um = vecs[:, ~pos] * np.sqrt(-vals[~pos])
    return LowRankClassifier(Up.reshape(c, -1), Um.reshape(c, -1), full.b)


def truncate_model(model, r):
    return LowRankModel.from_classifiers([truncate_to_lowrank(f, r) for f in model.classifiers()])


@dataclass
class Spectrum:
    mean: np.ndarray
    std: np.ndarray
    eigenvalues: np.ndarray = field(repr=False)  # (n_classifiers, c), descending

    def rows(self):
        return [
            {"rank_index": i + 1, "mean_eig": float(m), "std_eig": float(s)}
            for i, (m, s) in enumerate(zip(self.mean, self.std))
        ]

    def small_fraction(self, rel=0.1):
        """Fraction of eigenvalues below ``rel`` times the largest magnitude of their classifier."""
        peak = np.max(np.abs(self.eigenvalues), axis=1, keepdims=True)
        return float(np.mean(np.abs(self.eigenvalues) < rel * peak))


def spectrum(classifiers):
    """Per-rank mean and standard deviation of the descending eigenvalues."""
    if isinstance(classifiers, FullModel):
        classifiers = classifiers.classifiers()
    if not classifiers:
        raise ValueError("need at least one classifier")
    c = classifiers[0].c
    if any(f.c != c for f in classifiers):
        raise DimensionError("classifiers disagree on the channel count")
    evals = np.stack([np.sort(sym_eig(f.W).eigenvalues)[::-1] for f in classifiers])
    return Spectrum(evals.mean(axis=0), evals.std(axis=0), evals)
