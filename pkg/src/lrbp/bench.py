"""Analytic cost model and wall-clock benchmark for bilinear pooling variants.

Counts follow the usual comparison of full bilinear pooling, Random
Maclaurin, Tensor Sketch and the two low-rank evaluation paths. FLOPs are
counted as 2 per multiply-add; parameters are stored as 4-byte floats.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import DataError, DimensionError
from .pooling import FeatureMap

log = logging.getLogger(__name__)

METHODS = ("full_bilinear", "random_maclaurin", "tensor_sketch", "lrbp_I", "lrbp_II")
EXECUTABLE = ("full_bilinear", "random_maclaurin", "lrbp_I", "lrbp_II")
ANALYTIC_ONLY = ("tensor_sketch",)
BYTES_PER_PARAM = 4
MIB = 2**20

_ALIASES = {"full": "full_bilinear", "rm": "random_maclaurin", "ts": "tensor_sketch", "lrbp": "lrbp_II"}
_REQUIRED = {
    "full_bilinear": (),
    "random_maclaurin": ("d",),
    "tensor_sketch": ("d",),
    "lrbp_I": ("m", "r"),
    "lrbp_II": ("m", "r"),
}


@dataclass(frozen=True)
class CostModel:
    method: str
    feature_dim: int
    feature_flops: int
    classify_flops: int
    feature_params: int
    classifier_params: int

    @property
    def total_params(self):
        return self.feature_params + self.classifier_params

    @property
    def total_bytes(self):
        return BYTES_PER_PARAM * self.total_params

    @property
    def total_mib(self):
        return self.total_bytes / MIB

    def as_dict(self):
        out = asdict(self)
        out.update(total_params=self.total_params, total_bytes=self.total_bytes, total_mib=self.total_mib)
        return out


def _method(name):
    name = _ALIASES.get(name, name)
    if name not in METHODS:
        raise ValueError(f"unknown method {name!r}; choose from {METHODS}")
    return name


def cost_model(method, c, K, m=None, r=None, d=None, h=None, w=None):
    """Feature size, FLOPs and parameter counts for one method.

    ``h`` and ``w`` are only needed for FLOP counts and the LRBP-I feature size;
    quantities that need a missing argument are reported as ``None``.
    """
    method = _method(method)
    args = {"c": c, "K": K, "m": m, "r": r, "d": d}
    missing = [a for a in _REQUIRED[method] if args[a] is None]
    if missing:
        raise ValueError(f"{method} needs {', '.join(missing)}")
    for name, value in args.items():
        if value is not None and value <= 0:
            raise ValueError(f"{name} must be positive, got {value}")
    hw = None if h is None or w is None else h * w

    def need_hw(expr):
        return None if hw is None else expr()

    if method == "full_bilinear":
        dim = c * c
        feat = need_hw(lambda: 2 * hw * c * c)
        clf = 2 * K * c * c
        fparams, cparams = 0, K * c * c
    elif method == "random_maclaurin":
        dim = d
        # two d x c projections per location
        feat = need_hw(lambda: 2 * 2 * hw * c * d)
        clf = 2 * K * d
        fparams, cparams = 2 * c * d, K * d
    elif method == "tensor_sketch":
        dim = d
        feat = need_hw(lambda: int(round(2 * hw * (c + d * math.log2(d)))))
        clf = 2 * K * d
        fparams, cparams = 2 * c, K * d
    else:
        if m > c:
            raise DimensionError(f"m={m} exceeds c={c}")
        fparams, cparams = c * m, K * r * m
        if method == "lrbp_I":
            dim = need_hw(lambda: m * hw)
            feat = need_hw(lambda: 2 * hw * m * c)
            clf = need_hw(lambda: 2 * K * r * m * hw)
        else:
            dim = m * m
            feat = need_hw(lambda: 2 * hw * (m * c + m * m))
            clf = 2 * K * r * m * m
    return CostModel(method, dim, feat, clf, fparams, cparams)


def param_count(method, c, K, m=None, r=None, d=None):
    return cost_model(method, c, K, m=m, r=r, d=d)


def flop_estimate(method, h, w, c, K, m=None, r=None, d=None):
    return cost_model(method, c, K, m=m, r=r, d=d, h=h, w=w)


def table1(c=512, K=200, m=100, r=8, h=28, w=28, ds=(10_000, 8_192)):
    """Analytic rows for every method; RM/TS are reported for each ``d`` in ``ds``."""
    rows = []
    for method in METHODS:
        if method in ("random_maclaurin", "tensor_sketch"):
            rows += [(method, d, cost_model(method, c, K, d=d, h=h, w=w)) for d in ds]
        else:
            rows.append((method, None, cost_model(method, c, K, m=m, r=r, h=h, w=w)))
    return rows


# ---------------------------------------------------------------------------
# Random Maclaurin features
# ---------------------------------------------------------------------------


def rademacher(shape, rng):
    return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0


def random_maclaurin_pool(fm, W1, W2):
    """Sum over locations of ``(W1 x) * (W2 x) / sqrt(d)``.

    With ``W1``, ``W2`` of i.i.d. +-1 entries, ``<phi(x), phi(y)>`` is an
    unbiased estimate of ``<x, y>^2``.
    """
    X = fm.X if isinstance(fm, FeatureMap) else np.asarray(fm, dtype=np.float64)
    W1 = np.asarray(W1, dtype=np.float64)
    W2 = np.asarray(W2, dtype=np.float64)
    if W1.shape != W2.shape or W1.ndim != 2 or W1.shape[1] != X.shape[0]:
        raise DimensionError(f"projections {W1.shape}, {W2.shape} do not fit {X.shape[0]} channels")
    if not (np.all(np.abs(W1) == 1.0) and np.all(np.abs(W2) == 1.0)):
        raise DataError("Random Maclaurin projections must have entries in {-1, +1}")
    d = W1.shape[0]
    return np.sum((W1 @ X) * (W2 @ X), axis=1) / np.sqrt(d)


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------


@dataclass
class BenchRow:
    method: str
    h: int
    w: int
    c: int
    K: int
    m: int
    r: int
    d: int
    feature_ms: float
    classify_ms: float
    reps: int
    feature_mad_ms: float
    classify_mad_ms: float


BENCH_COLUMNS = [f for f in BenchRow.__dataclass_fields__]


@dataclass
class BenchReport:
    rows: list
    exponents: dict = field(default_factory=dict)
    crossover_hw: float = None
    expected_crossover_hw: float = None
    skipped: list = field(default_factory=list)

    def summary(self):
        return {
            "exponents": self.exponents,
            "crossover_hw": self.crossover_hw,
            "expected_crossover_hw": self.expected_crossover_hw,
            "skipped": self.skipped,
        }


def _kernels(method, c, hw, K, m, r, d, rng, max_classifier_bytes=512 * MIB):
    """Build ``(feature_fn, classify_fn)`` for one method and shape.

    Full bilinear classifiers larger than ``max_classifier_bytes`` are
    evaluated chunk by chunk against one shared block of class weights, so
    every score is still computed but memory stays bounded.
    """
    X = rng.standard_normal((c, hw))
    if method == "full_bilinear":
        per_class = c * c * 8
        chunk = int(max(1, min(K, max_classifier_bytes // per_class)))
        Wflat = rng.standard_normal((chunk, c * c))
        bounds = [(k, min(chunk, K - k)) for k in range(0, K, chunk)]

        def feature():
            return X @ X.T

        def classify(B):
            b = B.reshape(-1)
            return np.concatenate([Wflat[:n] @ b for _, n in bounds])

        return feature, classify
    if method == "random_maclaurin":
        W1, W2 = rademacher((d, c), rng), rademacher((d, c), rng)
        Wc = rng.standard_normal((K, d))
        scale = 1.0 / np.sqrt(d)

        def feature():
            return np.einsum("dl,dl->d", W1 @ X, W2 @ X) * scale

        def classify(phi):
            return Wc @ phi

        return feature, classify
    P = np.linalg.qr(rng.standard_normal((c, m)))[0]
    V = rng.standard_normal((m, K * r))
    signs = np.tile(np.r_[np.ones(r // 2), -np.ones(r - r // 2)], K)
    if method == "lrbp_I":

        def feature():
            return P.T @ X

        def classify(Z):
            Y = V.T @ Z
            return (np.einsum("jl,jl->j", Y, Y) * signs).reshape(K, r).sum(axis=1)

        return feature, classify
    if method == "lrbp_II":

        def feature():
            Z = P.T @ X
            return Z @ Z.T

        def classify(B):
            T = B @ V
            return (np.einsum("mj,mj->j", T, V) * signs).reshape(K, r).sum(axis=1)

        return feature, classify
    raise ValueError(f"{method} has no executable kernel")


def _time_call(fn, arg, reps, min_seconds):
    """Median and MAD of per-call milliseconds over ``reps`` repetitions."""
    call = (lambda: fn(arg)) if arg is not None else fn
    call()
    inner = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(inner):
            call()
        if time.perf_counter() - t0 >= min_seconds or inner >= 1 << 16:
            break
        inner *= 2
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        for _ in range(inner):
            call()
        samples.append((time.perf_counter() - t0) * 1e3 / inner)
    samples = np.array(samples)
    med = float(np.median(samples))
    return med, float(np.median(np.abs(samples - med)))


def side(hw):
    """``(h, w)`` for a spatial size: square when possible, else ``(hw, 1)``."""
    s = math.isqrt(hw)
    return (s, s) if s * s == hw else (hw, 1)


def star_grid(cs, hws, c0=None, hw0=None):
    """Shapes varying ``c`` at ``hw0`` and ``hw`` at ``c0`` (default: middle values)."""
    c0 = cs[len(cs) // 2] if c0 is None else c0
    hw0 = hws[len(hws) // 2] if hw0 is None else hw0
    shapes = [(c, hw0) for c in cs] + [(c0, hw) for hw in hws if (c0, hw) not in [(c, hw0) for c in cs]]
    return shapes, c0, hw0


def fit_exponent(xs, ys):
    """Slope of ``log y`` against ``log x`` by least squares."""
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    ok = np.isfinite(ys) & (ys > 0)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(xs[ok]), np.log(ys[ok]), 1)[0])


def find_crossover(hws, t_first, t_second):
    """Log-log interpolated ``hw`` where ``t_first`` stops being faster than ``t_second``."""
    hws = np.asarray(hws, dtype=float)
    diff = np.log(np.asarray(t_first)) - np.log(np.asarray(t_second))
    for i in range(len(hws) - 1):
        if diff[i] <= 0 < diff[i + 1]:
            a, b = np.log(hws[i]), np.log(hws[i + 1])
            frac = -diff[i] / (diff[i + 1] - diff[i])
            return float(np.exp(a + frac * (b - a)))
    return None


def time_benchmark(
    methods=EXECUTABLE,
    shapes=((512, 784),),
    reps=9,
    seed=0,
    K=200,
    m=100,
    r=8,
    d=8192,
    min_seconds=0.005,
    max_classifier_bytes=512 * MIB,
    parallel=False,
    c0=None,
    hw0=None,
):
    """Median wall-clock of feature computation and classification per image.

    ``shapes`` is a sequence of ``(c, hw)``. Tensor Sketch is analytic-only and
    listed in ``skipped``. For ``c < m`` the low-rank paths use ``m = c``
    (recorded in the row). Runs single-threaded unless ``parallel`` is set.
    """
    if reps < 5:
        raise ValueError("need at least 5 repetitions")
    if not shapes:
        raise ValueError("shape grid must not be empty")
    methods = [_method(mt) for mt in methods]
    report = BenchReport(rows=[])
    limits = None if parallel else 1
    with threadpool_limits(limits=limits):
        for method in methods:
            if method in ANALYTIC_ONLY:
                report.skipped.append({"method": method, "reason": "analytic-only"})
                continue
            for c, hw in shapes:
                # a projection cannot have more columns than channels
                m_eff = min(m, c)
                rng = np.random.default_rng([seed, c, hw])
                feature, classify = _kernels(
                    method, c, hw, K, m_eff, r, d, rng, max_classifier_bytes
                )
                f_ms, f_mad = _time_call(feature, None, reps, min_seconds)
                cl_ms, cl_mad = _time_call(classify, feature(), reps, min_seconds)
                h, w = side(hw)
                report.rows.append(
                    BenchRow(method, h, w, c, K, m_eff, r, d, f_ms, cl_ms, reps, f_mad, cl_mad)
                )
                log.info("%s c=%d hw=%d feature=%.4fms classify=%.4fms", method, c, hw, f_ms, cl_ms)
    if c0 is None or hw0 is None:
        # default to the most frequent value: the center of a star grid
        cs = [c for c, _ in shapes]
        hws = [hw for _, hw in shapes]
        c0 = max(set(cs), key=cs.count) if c0 is None else c0
        hw0 = max(set(hws), key=hws.count) if hw0 is None else hw0
    _fit(report, c0, hw0, K, m, r)
    return report


def _series(rows, method, vary, fixed, column):
    """Points ``(x, value)`` of ``method`` varying ``vary`` ("c" or "hw") at a fixed other axis."""
    pts = []
    for row in rows:
        if row.method != method:
            continue
        c, hw = row.c, row.h * row.w
        x, other = (c, hw) if vary == "c" else (hw, c)
        if fixed is None or other == fixed:
            pts.append((x, getattr(row, column)))
    pts.sort()
    return [p[0] for p in pts], [p[1] for p in pts]


def _fit(report, c0, hw0, K, m, r):
    rows, ex = report.rows, report.exponents
    xs, ys = _series(rows, "full_bilinear", "c", hw0, "feature_ms")
    if len(xs) >= 2:
        ex["full_bilinear_feature_vs_c"] = fit_exponent(xs, ys)
    for method in ("lrbp_I", "lrbp_II"):
        xs, ys = _series(rows, method, "hw", c0, "classify_ms")
        if len(xs) >= 2:
            ex[f"{method}_classify_vs_hw"] = fit_exponent(xs, ys)
    hw1, f1 = _series(rows, "lrbp_I", "hw", c0, "feature_ms")
    _, c1 = _series(rows, "lrbp_I", "hw", c0, "classify_ms")
    hw2, f2 = _series(rows, "lrbp_II", "hw", c0, "feature_ms")
    _, c2 = _series(rows, "lrbp_II", "hw", c0, "classify_ms")
    if len(hw1) >= 2 and hw1 == hw2:
        report.crossover_hw = find_crossover(hw1, np.add(f1, c1), np.add(f2, c2))
    if K * r > m:
        report.expected_crossover_hw = K * r * m / (K * r - m)


def write_rows_csv(path, rows, columns):
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row if isinstance(row, dict) else asdict(row))
