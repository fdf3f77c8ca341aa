"""Co-decomposition of K low-rank classifiers into ``U_k ~ P V_k``.

``P`` (``c x m``) is shared by all classes and acts as a 1x1 convolution that
reduces the channel count; each class keeps compact factors ``V+_k, V-_k``
with ``m`` rows. The best ``P`` for the Frobenius reconstruction objective
spans the top-``m`` left singular vectors of ``[U_1, ..., U_K]``.
"""

from dataclasses import dataclass

import numpy as np

from .classifier import (
    LowRankClassifier,
    LowRankModel,
    _check_stack,
    hinge_terms,
    lowrank_regularizer,
    lowrank_regularizer_grad,
    lowrank_scores,
    lowrank_scores_pooled,
    one_vs_rest_targets,
)
from .errors import DimensionError
from .linalg import _complete_basis, pca, svd
from .pooling import FeatureMap, pool_batch

PSNR_EXACT = float("inf")


@dataclass
class CoDecomposedModel:
    P: np.ndarray
    Vplus: np.ndarray
    Vminus: np.ndarray
    b: np.ndarray

    kind = "codecomposed"

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.Vplus = np.asarray(self.Vplus, dtype=np.float64)
        self.Vminus = np.asarray(self.Vminus, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if self.P.ndim != 2:
            raise DimensionError(f"P must be 2-D, got {self.P.shape}")
        m = self.P.shape[1]
        if self.Vplus.ndim != 3 or self.Vminus.ndim != 3:
            raise DimensionError("V factors must be (K, m, cols) arrays")
        if self.Vplus.shape[:2] != (self.K, m) or self.Vminus.shape[:2] != (self.K, m):
            raise DimensionError(
                f"V factors {self.Vplus.shape}, {self.Vminus.shape} do not match P {self.P.shape}"
            )
        if self.b.shape != (self.K,):
            raise DimensionError(f"need {self.K} biases, got {self.b.shape}")

    @property
    def K(self):
        return self.Vplus.shape[0]

    @property
    def c(self):
        return self.P.shape[0]

    @property
    def m(self):
        return self.P.shape[1]

    @property
    def rank(self):
        return self.Vplus.shape[2] + self.Vminus.shape[2]

    @property
    def n_params(self):
        return self.P.size + self.Vplus.size + self.Vminus.size

    def reduced(self):
        """The compact classifiers as a :class:`LowRankModel` over ``m`` channels."""
        return LowRankModel(self.Vplus, self.Vminus, self.b)

    def expand(self):
        """Implied ``c``-channel classifiers ``U_k = P V_k``."""
        Up = np.einsum("cm,kmp->kcp", self.P, self.Vplus)
        Um = np.einsum("cm,kmq->kcq", self.P, self.Vminus)
        return LowRankModel(Up, Um, self.b.copy())

    def project(self, X):
        return np.einsum("cm,ncl->nml", self.P, _check_stack(X, self.c), optimize=True)

    def scores(self, X, path="I"):
        """Class scores ``(n, K)``.

        ``path="I"`` takes squared norms of ``V^T P^T X``; ``path="II"`` pools the
        projected descriptors into ``m x m`` matrices once and scores every class
        from them.
        """
        Z = self.project(X)
        if path == "I":
            return lowrank_scores(self.Vplus, self.Vminus, self.b, Z)
        if path == "II":
            return lowrank_scores_pooled(self.Vplus, self.Vminus, self.b, pool_batch(Z))
        raise ValueError(f"unknown scoring path {path!r}")

    def scores_pooled(self, B):
        Bm = np.einsum("cm,ncd,dj->nmj", self.P, B, self.P, optimize=True)
        return lowrank_scores_pooled(self.Vplus, self.Vminus, self.b, Bm)


def _as_lowrank_model(classifiers):
    if isinstance(classifiers, LowRankModel):
        return classifiers
    return LowRankModel.from_classifiers(list(classifiers))


def codecompose(classifiers, m):
    """Shared projection from the SVD of the stacked classifier factors."""
    model = _as_lowrank_model(classifiers)
    c = model.c
    if m < 1 or m > c:
        raise DimensionError(f"m must be in [1, {c}], got {m}")
    A = stack_factors(model)
    P = svd(A).U[:, :m]
    if P.shape[1] < m:
        P = _complete_basis(P, m)
    Vp = np.einsum("cm,kcp->kmp", P, model.Uplus)
    Vm = np.einsum("cm,kcq->kmq", P, model.Uminus)
    return CoDecomposedModel(P, Vp, Vm, model.b.copy())


def stack_factors(model):
    """``[U_1, ..., U_K]`` with ``U_k = [U+_k, U-_k]``, shape ``c x K r``."""
    S = model.stacked()
    return S.transpose(1, 0, 2).reshape(model.c, -1)


def pca_init(sample_maps, m):
    """PCA subspace of all local descriptors in ``sample_maps``.

    Accepts a list of :class:`FeatureMap` or an ``(n, c, hw)`` descriptor stack.
    """
    if isinstance(sample_maps, np.ndarray):
        X = sample_maps
        if X.ndim != 3 or X.shape[0] == 0:
            raise ValueError("need a non-empty (n, c, hw) stack of descriptors")
        D = X.transpose(1, 0, 2).reshape(X.shape[1], -1)
    else:
        sample_maps = list(sample_maps)
        if not sample_maps:
            raise ValueError("need at least one feature map")
        c = sample_maps[0].channels
        if any(fm.channels != c for fm in sample_maps):
            raise DimensionError("feature maps disagree on the channel count")
        D = np.hstack([fm.X for fm in sample_maps])
    return pca(D, m).components


def reconstruction_error(model, originals):
    """``sum_k ||U_k - P V_k||_F^2`` and its per-class terms."""
    orig = _as_lowrank_model(originals)
    if orig.K != model.K or orig.c != model.c:
        raise DimensionError(
            f"model has K={model.K}, c={model.c}; originals have K={orig.K}, c={orig.c}"
        )
    if orig.Uplus.shape[2] != model.Vplus.shape[2] or orig.Uminus.shape[2] != model.Vminus.shape[2]:
        raise DimensionError("factor column counts differ between model and originals")
    D = orig.stacked() - model.expand().stacked()
    per_class = np.sum(D * D, axis=(1, 2))
    return float(per_class.sum()), per_class


def psnr(model, originals):
    """Reconstruction fidelity in dB.

    Peak is the largest absolute entry over all stacked originals and MSE is
    averaged over every entry. Exact reconstruction gives ``inf``.
    """
    orig = _as_lowrank_model(originals)
    total, _ = reconstruction_error(model, orig)
    S = orig.stacked()
    peak = float(np.max(np.abs(S)))
    if peak == 0.0:
        raise ValueError("PSNR is undefined for all-zero originals")
    mse = total / S.size
    if mse == 0.0:
        return PSNR_EXACT
    return 10.0 * np.log10(peak**2 / mse)


def score_codecomposed(model, fm, k, path="I"):
    if not isinstance(fm, FeatureMap):
        raise TypeError("expected a FeatureMap")
    if fm.channels != model.c:
        raise DimensionError(f"model expects {model.c} channels, map has {fm.channels}")
    if not 0 <= k < model.K:
        raise IndexError(f"class index {k} out of range for K={model.K}")
    return float(model.scores(fm.X[None], path=path)[0, k])


# ---------------------------------------------------------------------------
# joint training objective
# ---------------------------------------------------------------------------


def codecomp_objective(model, X, labels, lam):
    """One-vs-rest hinge summed over classes plus the V-space regularizer."""
    X = _check_stack(X, model.c)
    if X.shape[0] == 0:
        raise ValueError("batch must not be empty")
    Y = one_vs_rest_targets(np.asarray(labels), model.K)
    losses, _ = hinge_terms(model.scores(X), Y)
    reg = lowrank_regularizer(model.Vplus, model.Vminus).sum()
    return float(losses.mean(axis=0).sum() + 0.5 * lam * reg)


def gradients_codecomposed(model, X, labels, lam):
    """Gradients ``(dP, dV+, dV-, db)`` of :func:`codecomp_objective`."""
    X = _check_stack(X, model.c)
    n = X.shape[0]
    if n == 0:
        raise ValueError("batch must not be empty")
    Y = one_vs_rest_targets(np.asarray(labels), model.K)
    P, Vp, Vm = model.P, model.Vplus, model.Vminus
    p = Vp.shape[2]
    Z = np.einsum("cm,ncl->nml", P, X, optimize=True)
    V = np.concatenate([Vp, Vm], axis=2)
    K, m, r = V.shape
    Yp = np.einsum("mj,nml->njl", V.transpose(1, 0, 2).reshape(m, K * r), Z, optimize=True)
    Yp = Yp.reshape(n, K, r, -1)
    E = np.sum(Yp * Yp, axis=3)
    scores = E[:, :, :p].sum(axis=2) - E[:, :, p:].sum(axis=2) + model.b
    _, active = hinge_terms(scores, Y)
    coef = np.where(active, -Y, 0.0) / n

    G = 2.0 * np.einsum("nml,nkjl->kmj", Z, coef[:, :, None, None] * Yp, optimize=True)
    dVp, dVm = lowrank_regularizer_grad(Vp, Vm, lam)
    dVp = dVp + G[:, :, :p]
    dVm = dVm - G[:, :, p:]

    # ds/dP = 2 X X^T P M_k with M_k = V+ V+^T - V- V-^T
    M = np.einsum("kmp,kjp->kmj", Vp, Vp) - np.einsum("kmq,kjq->kmj", Vm, Vm)
    Gi = np.einsum("nk,kmj->nmj", coef, M)
    XZ = np.einsum("ncl,nml->ncm", X, Z, optimize=True)
    dP = 2.0 * np.einsum("ncm,nmj->cj", XZ, Gi, optimize=True)
    return dP, dVp, dVm, coef.sum(axis=0)
