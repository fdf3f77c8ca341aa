"""One-vs-rest SGD training, evaluation and the rank/dimension sweep."""

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .bench import param_count
from .classifier import (
    FullModel,
    LowRankModel,
    full_gradients,
    full_objective,
    hinge_terms,
    init_lowrank,
    linear_svm_gradients,
    linear_svm_objective,
    lowrank_gradients,
    lowrank_objective,
    one_vs_rest_targets,
    truncate_model,
)
from .codecomp import (
    CoDecomposedModel,
    codecomp_objective,
    codecompose,
    gradients_codecomposed,
    pca_init,
    psnr,
)
from .errors import DataError, DimensionError
from .pooling import normalize_pooled_batch, pool_batch, signed_sqrt

log = logging.getLogger(__name__)

MODEL_KINDS = ("full", "lowrank", "codecomposed")
NORMALIZATIONS = ("none", "map", "pooled")


def default_normalization(kind):
    return "pooled" if kind == "full" else "map"


@dataclass
class TrainConfig:
    """SGD schedule and model shape.

    ``weight_decay`` doubles as the regularization weight of the hinge
    objective; optimizer-level decay is only applied to the shared projection
    ``P`` of a co-decomposed model. ``normalization`` is one of "none", "map"
    (signed square root on descriptors) or "pooled" (signed square root and l2
    on the pooled matrix, full models only). It defaults to "pooled" for full
    models and "map" otherwise.
    """

    model_kind: str = "lowrank"
    rank: int = 8
    m: int = None
    learning_rate: float = 1e-3
    anneal_factor: float = 0.25
    anneal_every: int = 10
    weight_decay: float = 5e-4
    momentum: float = 0.9
    batch_size: int = 12
    epochs: int = 30
    warmup_epochs: int = 5
    seed: int = 0
    normalization: str = None
    pca_samples: int = 256

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}")
        if self.normalization is None:
            self.normalization = default_normalization(self.model_kind)
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
        if self.normalization == "pooled" and self.model_kind != "full":
            raise ValueError("pooled normalization is only available for full models")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.anneal_factor <= 1:
            raise ValueError("anneal_factor must be in (0, 1]")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.anneal_every < 1:
            raise ValueError("batch_size and anneal_every must be >= 1, epochs >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.model_kind == "codecomposed" and self.m is None:
            raise ValueError("codecomposed models need m")

    def lr_at(self, epoch):
        return self.learning_rate * self.anneal_factor ** (epoch // self.anneal_every)


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    learning_rate: float
    objective: float
    train_accuracy: float
    test_accuracy: float
    seconds: float


@dataclass
class TrainReport:
    config: dict
    n_params: int
    epochs: list = field(default_factory=list)
    per_class_accuracy: list = field(default_factory=list)

    @property
    def final_test_accuracy(self):
        return self.epochs[-1].test_accuracy if self.epochs else float("nan")

    def rows(self):
        return [asdict(e) for e in self.epochs]


@dataclass
class EvalResult:
    accuracy: float
    per_class: np.ndarray
    confusion: np.ndarray  # confusion[true, predicted]

    def to_json(self):
        return {
            "accuracy": self.accuracy,
            "per_class": [None if np.isnan(v) else float(v) for v in self.per_class],
            "confusion": self.confusion.tolist(),
        }


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def sgd_step(params, grads, state, lr, momentum, weight_decay=0.0):
    """Momentum SGD on dicts of arrays.

    ``v <- momentum v - lr (g + wd p)``; ``p <- p + v``. ``weight_decay`` is a
    scalar or a per-parameter dict. Parameters missing from ``grads`` are left
    untouched. Returns new ``(params, state)`` dicts.
    """
    new_params, new_state = dict(params), dict(state)
    for name, g in grads.items():
        p = params[name]
        if np.shape(g) != np.shape(p):
            raise DimensionError(f"gradient for {name} has shape {np.shape(g)}, expected {np.shape(p)}")
        wd = weight_decay.get(name, 0.0) if isinstance(weight_decay, dict) else weight_decay
        v = state.get(name)
        v = np.zeros_like(p) if v is None else v
        v = momentum * v - lr * (g + wd * p)
        new_state[name] = v
        new_params[name] = p + v
    return new_params, new_state


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


def prepare_features(X, normalization):
    """Descriptors (or pooled matrices for "pooled") fed to the classifiers."""
    if normalization == "none":
        return X
    if normalization == "map":
        return signed_sqrt(X)
    if normalization == "pooled":
        return normalize_pooled_batch(pool_batch(X))
    raise ValueError(f"unknown normalization {normalization!r}")


def _training_inputs(X, cfg):
    """Pooled matrices for full models, descriptors otherwise."""
    F = prepare_features(X, cfg.normalization)
    if cfg.model_kind == "full" and cfg.normalization != "pooled":
        F = pool_batch(F)
    return F


def model_scores(model, X, normalization=None):
    """``(n, K)`` class scores for raw descriptors ``X`` of shape ``(n, c, hw)``."""
    if normalization is None:
        normalization = default_normalization(model.kind)
    F = prepare_features(np.asarray(X, dtype=np.float64), normalization)
    if normalization == "pooled":
        return model.scores_pooled(F)
    return model.scores(F)


def predict(scores):
    # argmax keeps the lowest index on ties
    return np.argmax(scores, axis=1)


def evaluate(model, X, labels, normalization=None, K=None):
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot evaluate on an empty split")
    K = model.K if K is None else K
    pred = predict(model_scores(model, X, normalization))
    confusion = np.zeros((K, K), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    totals = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(totals > 0, np.diag(confusion) / np.maximum(totals, 1), np.nan)
    return EvalResult(float(np.mean(pred == labels)), per_class, confusion)


def evaluate_dataset(model, ds, split="test", normalization=None):
    X, labels = ds.split(split)
    return evaluate(model, X, labels, normalization, K=ds.K)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


class _Problem:
    """Parameters plus objective/gradient closures for one model kind."""

    def __init__(self, cfg, F, labels, K, rng):
        self.cfg = cfg
        self.F = F
        self.Y = one_vs_rest_targets(labels, K)
        self.labels = labels
        lam = cfg.weight_decay
        self.lam = lam
        c = F.shape[1]
        kind = cfg.model_kind
        if kind == "full":
            self.params = {"W": np.zeros((K, c, c)), "b": np.zeros(K)}
        elif kind == "lowrank":
            if not 2 <= cfg.rank <= c:
                raise DimensionError(f"rank must be in [2, {c}], got {cfg.rank}")
            init = init_lowrank(K, c, cfg.rank, rng)
            self.params = {"Uplus": init.Uplus, "Uminus": init.Uminus, "b": init.b}
        else:
            if not 1 <= cfg.m < c:
                raise DimensionError(f"m must be in [1, {c}), got {cfg.m}")
            if cfg.rank % 2 or cfg.rank < 2 or cfg.rank > cfg.m:
                raise DimensionError(f"rank must be even and in [2, m={cfg.m}], got {cfg.rank}")
            n_pca = min(cfg.pca_samples, F.shape[0])
            sample = F[np.sort(rng.choice(F.shape[0], size=n_pca, replace=False))]
            P = pca_init(sample, cfg.m)
            init = init_lowrank(K, cfg.m, cfg.rank, rng)
            self.params = {"P": P, "Vplus": init.Uplus, "Vminus": init.Uminus, "b": init.b}

    def model(self, params=None):
        p = self.params if params is None else params
        kind = self.cfg.model_kind
        if kind == "full":
            return FullModel(p["W"], p["b"])
        if kind == "lowrank":
            return LowRankModel(p["Uplus"], p["Uminus"], p["b"])
        return CoDecomposedModel(p["P"], p["Vplus"], p["Vminus"], p["b"])

    def gradients(self, idx, phase):
        p, lam = self.params, self.lam
        F, Y = self.F[idx], self.Y[idx]
        kind = self.cfg.model_kind
        if kind == "full":
            dW, db = full_gradients(p["W"], p["b"], F, Y, lam)
            return {"W": dW, "b": db}
        if kind == "lowrank":
            dUp, dUm, db = lowrank_gradients(p["Uplus"], p["Uminus"], p["b"], F, Y, lam)
            return {"Uplus": dUp, "Uminus": dUm, "b": db}
        dP, dVp, dVm, db = gradients_codecomposed(self.model(), F, self.labels[idx], lam)
        grads = {"Vplus": dVp, "Vminus": dVm, "b": db}
        if phase == "joint":
            grads["P"] = dP
        return grads

    def objective(self):
        p, lam = self.params, self.lam
        kind = self.cfg.model_kind
        if kind == "full":
            return full_objective(p["W"], p["b"], self.F, self.Y, lam)
        if kind == "lowrank":
            return lowrank_objective(p["Uplus"], p["Uminus"], p["b"], self.F, self.Y, lam)
        return codecomp_objective(self.model(), self.F, self.labels, lam)

    def scores(self, F):
        model = self.model()
        if self.cfg.model_kind == "full":
            return model.scores_pooled(F)
        return model.scores(F)


def _phase(cfg, epoch):
    if cfg.model_kind == "codecomposed" and epoch < cfg.warmup_epochs:
        return "classifiers"
    return "joint"


def train(ds, cfg, callback=None):
    """Train ``K`` one-vs-rest classifiers with momentum SGD.

    The loss is the sum over classes of the batch-mean hinge plus the
    regularizer weighted by ``cfg.weight_decay``. Co-decomposed models start
    from a PCA projection of the training descriptors and first train only the
    per-class factors for ``cfg.warmup_epochs`` epochs before joint training.
    Results are bit-reproducible for a fixed seed.
    """
    if ds.K < 2:
        raise ValueError(f"need at least 2 classes, got K={ds.K}")
    X_train, y_train = ds.split("train")
    if y_train.size == 0:
        raise ValueError("training split is empty")
    X_test, y_test = ds.split("test")
    F_train = _training_inputs(X_train, cfg)
    F_test = _training_inputs(X_test, cfg) if y_test.size else None

    rng = np.random.default_rng(cfg.seed)
    prob = _Problem(cfg, F_train, y_train, ds.K, rng)
    decay = {"P": cfg.weight_decay}
    state = {}
    report = TrainReport(config=asdict(cfg), n_params=prob.model().n_params)
    n = y_train.size
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        phase = _phase(cfg, epoch)
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            grads = prob.gradients(idx, phase)
            prob.params, state = sgd_step(prob.params, grads, state, lr, cfg.momentum, decay)
        seconds = time.perf_counter() - t0
        train_acc = float(np.mean(predict(prob.scores(F_train)) == y_train))
        test_acc = (
            float(np.mean(predict(prob.scores(F_test)) == y_test)) if F_test is not None else float("nan")
        )
        record = EpochRecord(epoch + 1, phase, lr, prob.objective(), train_acc, test_acc, seconds)
        report.epochs.append(record)
        log.info(
            "epoch %d [%s] lr=%.2e obj=%.5f train=%.4f test=%.4f",
            record.epoch, phase, lr, record.objective, train_acc, test_acc,
        )
        if callback is not None:
            callback(record)
    model = prob.model()
    if y_test.size:
        report.per_class_accuracy = [
            None if np.isnan(v) else float(v)
            for v in evaluate(model, X_test, y_test, cfg.normalization, ds.K).per_class
        ]
    return model, report


# ---------------------------------------------------------------------------
# first-order baseline
# ---------------------------------------------------------------------------


@dataclass
class MeanPooledLinear:
    """One-vs-rest linear SVM on spatially averaged descriptors."""

    W: np.ndarray  # (K, c)
    b: np.ndarray

    kind = "baseline"

    @property
    def K(self):
        return self.W.shape[0]

    def scores(self, X):
        return X.mean(axis=2) @ self.W.T + self.b

    def scores_pooled(self, B):
        raise NotImplementedError("a first-order model has no pooled path")


def train_mean_pooled_baseline(ds, cfg):
    """Fit :class:`MeanPooledLinear` with the same SGD schedule as :func:`train`."""
    X, labels = ds.split("train")
    F = prepare_features(X, "map" if cfg.normalization == "map" else "none").mean(axis=2)
    Y = one_vs_rest_targets(labels, ds.K)
    rng = np.random.default_rng(cfg.seed)
    params = {"W": np.zeros((ds.K, F.shape[1])), "b": np.zeros(ds.K)}
    state = {}
    n = labels.size
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            s = F[idx] @ params["W"].T + params["b"]
            _, active = hinge_terms(s, Y[idx])
            coef = np.where(active, -Y[idx], 0.0) / idx.size
            grads = {
                "W": coef.T @ F[idx] + cfg.weight_decay * params["W"],
                "b": coef.sum(axis=0),
            }
            params, state = sgd_step(params, grads, state, cfg.lr_at(epoch), cfg.momentum)
    return MeanPooledLinear(params["W"], params["b"])


# ---------------------------------------------------------------------------
# trace-form vs vectorized SVM
# ---------------------------------------------------------------------------


@dataclass
class EquivalenceReport:
    W: np.ndarray
    w: np.ndarray
    max_iterate_gap: float
    max_objective_rel_gap: float
    objectives: list

    @property
    def asymmetry(self):
        return float(np.linalg.norm(self.W - self.W.T) / max(np.linalg.norm(self.W), 1e-300))


def train_equivalence_pair(B, y, lam=5e-4, lr=1e-3, momentum=0.9, epochs=20, batch_size=12, seed=0, W0=None):
    """Train the trace-form SVM on ``B`` and the linear SVM on ``vec(B)`` in lockstep.

    Both runs see the same mini-batches and step sizes; the largest entrywise
    gap between ``mat(w)`` and ``W`` over all iterates is reported together with
    the largest relative gap in objective values.
    """
    B = np.asarray(B, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, c, _ = B.shape
    Z = B.reshape(n, c * c)
    W = np.zeros((1, c, c)) if W0 is None else np.array(W0, dtype=np.float64)[None]
    full = {"W": W, "b": np.zeros(1)}
    lin = {"w": W.reshape(-1).copy(), "b": np.zeros(1)}
    full_state, lin_state = {}, {}
    Yk = y[:, None]
    rng = np.random.default_rng(seed)
    gap, obj_gap, objectives = 0.0, 0.0, []
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            dW, db = full_gradients(full["W"], full["b"], B[idx], Yk[idx], lam)
            full, full_state = sgd_step(full, {"W": dW, "b": db}, full_state, lr, momentum)
            dw, dbl = linear_svm_gradients(lin["w"], lin["b"][0], Z[idx], y[idx], lam)
            lin, lin_state = sgd_step(lin, {"w": dw, "b": np.array([dbl])}, lin_state, lr, momentum)
            gap = max(gap, float(np.max(np.abs(lin["w"].reshape(c, c) - full["W"][0]))))
        f_full = full_objective(full["W"], full["b"], B, Yk, lam)
        f_lin = linear_svm_objective(lin["w"], lin["b"][0], Z, y, lam)
        obj_gap = max(obj_gap, abs(f_full - f_lin) / max(abs(f_lin), 1e-300))
        objectives.append((f_full, f_lin))
    return EquivalenceReport(full["W"][0], lin["w"], gap, obj_gap, objectives)


# ---------------------------------------------------------------------------
# rank / dimension sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepRow:
    m: int
    r: int
    accuracy: float
    psnr_db: float
    param_bytes: int
    status: str = "ok"

    def csv_row(self):
        return {
            "m": self.m,
            "r": self.r,
            "accuracy": self.accuracy,
            "psnr_db": self.psnr_db,
            "param_bytes": self.param_bytes,
        }


def sweep(ds, ms, ranks, cfg, full_model=None):
    """Accuracy, PSNR and parameter bytes over a grid of ``(m, r)``.

    A full model is trained once with ``cfg`` (model kind forced to "full"),
    truncated to each rank and co-decomposed to each ``m`` without
    fine-tuning. A pre-trained ``full_model`` skips training and is evaluated
    with ``cfg.normalization``. A cell that fails is logged and reported with
    NaN metrics and status "failed".
    """
    if not ms or not ranks:
        raise ValueError("sweep grid must not be empty")
    if full_model is None:
        keep = cfg.normalization if cfg.model_kind == "full" else None
        full_cfg = TrainConfig(**{**asdict(cfg), "model_kind": "full", "m": None, "normalization": keep})
        full_model, _ = train(ds, full_cfg)
        normalization = full_cfg.normalization
    else:
        normalization = cfg.normalization
    X, labels = ds.split("test")
    rows = []
    for r in ranks:
        try:
            lowrank = truncate_model(full_model, r)
        except (DimensionError, ValueError) as exc:
            log.warning("rank %d failed: %s", r, exc)
            rows += [SweepRow(m, r, float("nan"), float("nan"), 0, "failed") for m in ms]
            continue
        for m in ms:
            try:
                model = codecompose(lowrank, m)
                acc = evaluate(model, X, labels, normalization, ds.K).accuracy
                fidelity = psnr(model, lowrank)
                nbytes = param_count("lrbp", c=ds.c, K=ds.K, m=m, r=r).total_bytes
                rows.append(SweepRow(m, r, acc, fidelity, nbytes))
            except (DimensionError, DataError, ValueError) as exc:
                log.warning("cell m=%d r=%d failed: %s", m, r, exc)
                rows.append(SweepRow(m, r, float("nan"), float("nan"), 0, "failed"))
    return rows
