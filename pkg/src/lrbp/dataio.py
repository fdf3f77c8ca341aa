"""Feature datasets, the ``LRBP`` binary container, and synthetic data.

Container layout (little-endian)::

    "LRBP"  u32 version=1  u32 record_type
    type 1 (dataset):     h w c N K (u32), N labels (u32, 1-based),
                          N split flags (u8, 0=train 1=test),
                          N*c*h*w float32 in (sample, channel, row, col) order
    type 2 (low-rank):    c r K (u32), then per class U+ (c x r/2), U- (c x r/2), b
    type 3 (co-decomp.):  c m r K (u32), P (c x m), then per class V+ (m x r/2), V- (m x r/2), b
    type 4 (full):        c K (u32), then per class W (c x c), b

Matrices are stored row-major as float32. Labels are 0-based in memory.
"""

import csv
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classifier import FullModel, LowRankModel
from .codecomp import CoDecomposedModel
from .errors import CorruptionError, DataError, FormatError, ParseError, UnsupportedVersionError
from .linalg import random_orthonormal

MAGIC = b"LRBP"
VERSION = 1
RECORD_DATASET = 1
RECORD_LOWRANK = 2
RECORD_CODECOMP = 3
RECORD_FULL = 4

_RECORD_NAMES = {
    RECORD_DATASET: "dataset",
    RECORD_LOWRANK: "lowrank",
    RECORD_CODECOMP: "codecomposed",
    RECORD_FULL: "full",
}
PREAMBLE_BYTES = 12


@dataclass
class FeatureDataset:
    """Feature maps with class labels and a fixed train/test split.

    ``features`` is a float32 array of shape ``(N, c, h, w)``.
    """

    features: np.ndarray
    labels: np.ndarray
    is_test: np.ndarray
    K: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.is_test = np.asarray(self.is_test, dtype=bool).reshape(-1)
        self.K = int(self.K)
        if self.features.ndim != 4:
            raise DataError(f"features must be (N, c, h, w), got shape {self.features.shape}")
        N = self.features.shape[0]
        if self.labels.shape != (N,) or self.is_test.shape != (N,):
            raise DataError("labels and split flags must have one entry per sample")
        if N and (self.labels.min() < 0 or self.labels.max() >= self.K):
            raise DataError(f"labels must lie in [0, {self.K})")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features contain non-finite values")

    @property
    def N(self):
        return self.features.shape[0]

    @property
    def c(self):
        return self.features.shape[1]

    @property
    def h(self):
        return self.features.shape[2]

    @property
    def w(self):
        return self.features.shape[3]

    def descriptors(self, mask=None):
        """float64 descriptor stack ``(n, c, h*w)``."""
        F = self.features if mask is None else self.features[mask]
        return F.reshape(F.shape[0], self.c, self.h * self.w).astype(np.float64)

    def split(self, which):
        """``(X, labels)`` for ``which`` in {"train", "test", "all"}."""
        if which == "all":
            mask = np.ones(self.N, dtype=bool)
        elif which == "train":
            mask = ~self.is_test
        elif which == "test":
            mask = self.is_test
        else:
            raise ValueError(f"unknown split {which!r}")
        return self.descriptors(mask), self.labels[mask]

    def feature_map(self, i):
        from .pooling import FeatureMap

        return FeatureMap(self.descriptors(np.array([i]))[0], self.h, self.w)


# ---------------------------------------------------------------------------
# binary container
# ---------------------------------------------------------------------------


class _Reader:
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, n, what):
        if self.offset + n > len(self.data):
            raise CorruptionError(
                f"truncated file: need {n} bytes for {what}, {len(self.data) - self.offset} left",
                self.offset,
            )
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u32(self, count, what):
        return np.frombuffer(self.take(4 * count, what), dtype="<u4").astype(np.int64)

    def f32(self, count, what):
        return np.frombuffer(self.take(4 * count, what), dtype="<f4")

    def finish(self):
        if self.offset != len(self.data):
            raise CorruptionError(
                f"{len(self.data) - self.offset} unexpected trailing bytes", self.offset
            )


def _atomic_write(path, payload):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _preamble(record_type):
    return MAGIC + struct.pack("<II", VERSION, record_type)


def _u32(*values):
    return np.asarray(values, dtype="<u4").tobytes()


def _f32(array):
    return np.ascontiguousarray(array, dtype="<f4").tobytes()


def _open_record(path):
    data = Path(path).read_bytes()
    reader = _Reader(data)
    if reader.take(4, "magic") != MAGIC:
        raise FormatError(f"{path}: not an LRBP file (bad magic)")
    version = int(reader.u32(1, "version")[0])
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported format version {version}")
    record = int(reader.u32(1, "record type")[0])
    if record not in _RECORD_NAMES:
        raise FormatError(f"{path}: unknown record type {record}")
    return reader, record


def record_type(path):
    """Name of the record stored in ``path`` ("dataset", "lowrank", ...)."""
    _, record = _open_record(path)
    return _RECORD_NAMES[record]


def save_dataset(ds, path):
    payload = [
        _preamble(RECORD_DATASET),
        _u32(ds.h, ds.w, ds.c, ds.N, ds.K),
        _u32(*(ds.labels + 1)) if ds.N else b"",
        ds.is_test.astype(np.uint8).tobytes(),
        _f32(ds.features),
    ]
    _atomic_write(path, b"".join(payload))


def load_dataset(path):
    reader, record = _open_record(path)
    if record != RECORD_DATASET:
        raise FormatError(f"{path}: holds a {_RECORD_NAMES[record]} record, not a dataset")
    h, w, c, N, K = (int(v) for v in reader.u32(5, "dataset header"))
    labels = reader.u32(N, "labels")
    flags = np.frombuffer(reader.take(N, "split flags"), dtype=np.uint8)
    feats = reader.f32(N * c * h * w, "feature values").reshape(N, c, h, w)
    reader.finish()
    if N and (labels.min() < 1 or labels.max() > K):
        raise FormatError(f"{path}: labels outside [1, {K}]")
    if np.any(flags > 1):
        raise FormatError(f"{path}: split flags must be 0 or 1")
    return FeatureDataset(feats.copy(), labels - 1, flags == 1, K, {"path": str(path)})


def dataset_file_size(N, c, h, w):
    return PREAMBLE_BYTES + 20 + 4 * N + N + 4 * N * c * h * w


def _balanced(Vp, Vm):
    """Zero-pad U+/U- (or V+/V-) to the same column count."""
    half = max(Vp.shape[2], Vm.shape[2], 1)
    K, rows = Vp.shape[:2]
    out = []
    for V in (Vp, Vm):
        padded = np.zeros((K, rows, half))
        padded[:, :, : V.shape[2]] = V
        out.append(padded)
    return out[0], out[1], half


def _model_payload(model):
    if isinstance(model, LowRankModel):
        Up, Um, half = _balanced(model.Uplus, model.Uminus)
        parts = [_preamble(RECORD_LOWRANK), _u32(model.c, 2 * half, model.K)]
        for k in range(model.K):
            parts += [_f32(Up[k]), _f32(Um[k]), _f32([model.b[k]])]
    elif isinstance(model, CoDecomposedModel):
        Vp, Vm, half = _balanced(model.Vplus, model.Vminus)
        parts = [
            _preamble(RECORD_CODECOMP),
            _u32(model.c, model.m, 2 * half, model.K),
            _f32(model.P),
        ]
        for k in range(model.K):
            parts += [_f32(Vp[k]), _f32(Vm[k]), _f32([model.b[k]])]
    elif isinstance(model, FullModel):
        parts = [_preamble(RECORD_FULL), _u32(model.c, model.K)]
        for k in range(model.K):
            parts += [_f32(model.W[k]), _f32([model.b[k]])]
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    return b"".join(parts)


def save_model(model, path):
    _atomic_write(path, _model_payload(model))


def model_bytes(model):
    """Exact file bytes :func:`save_model` writes for ``model``."""
    return _model_payload(model)


def load_model(path, kind=None):
    """Load any model record; ``kind`` optionally pins the expected type."""
    reader, record = _open_record(path)
    name = _RECORD_NAMES[record]
    if record == RECORD_DATASET:
        raise FormatError(f"{path}: holds a dataset, not a model")
    if kind is not None and kind != name:
        raise FormatError(f"{path}: holds a {name} model, expected {kind}")
    if record == RECORD_LOWRANK:
        c, r, K = (int(v) for v in reader.u32(3, "low-rank header"))
        _check_even(r, reader)
        half = r // 2
        Up, Um, b = np.zeros((K, c, half)), np.zeros((K, c, half)), np.zeros(K)
        for k in range(K):
            Up[k] = reader.f32(c * half, f"U+ of class {k + 1}").reshape(c, half)
            Um[k] = reader.f32(c * half, f"U- of class {k + 1}").reshape(c, half)
            b[k] = reader.f32(1, f"bias of class {k + 1}")[0]
        reader.finish()
        return LowRankModel(Up, Um, b)
    if record == RECORD_CODECOMP:
        c, m, r, K = (int(v) for v in reader.u32(4, "co-decomposed header"))
        _check_even(r, reader)
        half = r // 2
        P = reader.f32(c * m, "projection").reshape(c, m).astype(np.float64)
        Vp, Vm, b = np.zeros((K, m, half)), np.zeros((K, m, half)), np.zeros(K)
        for k in range(K):
            Vp[k] = reader.f32(m * half, f"V+ of class {k + 1}").reshape(m, half)
            Vm[k] = reader.f32(m * half, f"V- of class {k + 1}").reshape(m, half)
            b[k] = reader.f32(1, f"bias of class {k + 1}")[0]
        reader.finish()
        return CoDecomposedModel(P, Vp, Vm, b)
    c, K = (int(v) for v in reader.u32(2, "full-model header"))
    W, b = np.zeros((K, c, c)), np.zeros(K)
    for k in range(K):
        W[k] = reader.f32(c * c, f"W of class {k + 1}").reshape(c, c)
        b[k] = reader.f32(1, f"bias of class {k + 1}")[0]
    reader.finish()
    return FullModel(W, b)


def _check_even(r, reader):
    if r % 2:
        raise CorruptionError(f"stored rank {r} is odd", reader.offset - 4)


def model_header_bytes(kind):
    return PREAMBLE_BYTES + 4 * {"lowrank": 3, "codecomposed": 4, "full": 2}[kind]


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def class_covariance_bases(K, c, rng, subspace_dim=None):
    """Orthonormal ``c x 2`` bases, optionally all inside one shared subspace."""
    if subspace_dim is None:
        return [random_orthonormal(c, 2, rng) for _ in range(K)]
    if not 2 <= subspace_dim <= c:
        raise ValueError(f"subspace_dim must be in [2, {c}], got {subspace_dim}")
    S = random_orthonormal(c, subspace_dim, rng)
    return [S @ random_orthonormal(subspace_dim, 2, rng) for _ in range(K)]


def synth_covariance_dataset(
    K,
    n_per_class,
    h,
    w,
    c,
    seed=0,
    alpha=4.0,
    test_fraction=0.5,
    relu=False,
    subspace_dim=None,
):
    """Zero-mean Gaussian descriptors with class-specific covariance.

    Descriptors of class ``k`` are i.i.d. ``N(0, I + alpha Q_k Q_k^T)`` with
    ``Q_k`` a random orthonormal ``c x 2`` basis, so every class has the same
    mean and only second-order statistics separate them. ``subspace_dim``
    confines all ``Q_k`` to one shared random subspace of that dimension.
    Each class contributes ``n_per_class`` maps, of which ``test_fraction`` go
    to the test split.
    """
    if K < 2:
        raise ValueError(f"need at least 2 classes, got {K}")
    if c < 4:
        raise ValueError(f"need at least 4 channels, got {c}")
    if n_per_class < 2 or h < 1 or w < 1:
        raise ValueError("n_per_class must be >= 2 and h, w >= 1")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    bases = class_covariance_bases(K, c, rng, subspace_dim)
    hw = h * w
    n_test = min(max(int(round(n_per_class * test_fraction)), 1), n_per_class - 1)
    gain = np.sqrt(1.0 + alpha) - 1.0
    feats, labels, is_test = [], [], []
    for k, Q in enumerate(bases):
        G = rng.standard_normal((n_per_class, c, hw))
        # (I + alpha Q Q^T)^{1/2} = I + (sqrt(1 + alpha) - 1) Q Q^T
        X = G + gain * np.einsum("cj,dj,ndl->ncl", Q, Q, G, optimize=True)
        feats.append(X)
        labels.append(np.full(n_per_class, k))
        is_test.append(np.arange(n_per_class) >= n_per_class - n_test)
    order = rng.permutation(K * n_per_class)
    X = np.concatenate(feats)[order]
    if relu:
        X = np.maximum(X, 0.0)
    provenance = {
        "generator": "synth_covariance",
        "seed": seed,
        "alpha": alpha,
        "subspace_dim": subspace_dim,
        "relu": relu,
    }
    return FeatureDataset(
        X.reshape(-1, c, h, w).astype(np.float32),
        np.concatenate(labels)[order],
        np.concatenate(is_test)[order],
        K,
        provenance,
    )


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CsvLayout:
    """Shape of each CSV row: ``label[, split], c*h*w values``.

    Values follow (channel, row, col) order; labels are 1-based; the optional
    split column holds 0 (train) or 1 (test). A first line whose label cell is
    not a number is taken as a header and skipped.
    """

    h: int
    w: int
    c: int
    split_column: bool = False

    @property
    def n_columns(self):
        return 1 + int(self.split_column) + self.c * self.h * self.w


def _is_number(cell):
    try:
        float(cell)
    except ValueError:
        return False
    return True


def csv_header(ds, split_column=True):
    head = ["label"] + (["split"] if split_column else [])
    return head + [f"c{k}_y{i}_x{j}" for k in range(ds.c) for i in range(ds.h) for j in range(ds.w)]


def import_csv_features(path, layout, K=None):
    rows, labels, flags = [], [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if lineno == 1 and not _is_number(row[0]):
                continue
            if len(row) != layout.n_columns:
                raise ParseError(
                    f"expected {layout.n_columns} columns, found {len(row)}", lineno
                )
            try:
                values = [float(cell) for cell in row]
            except ValueError as exc:
                raise ParseError(f"non-numeric cell ({exc})", lineno) from None
            if not all(np.isfinite(values)):
                raise ParseError("non-finite value", lineno)
            label = values[0]
            if label != int(label) or label < 1:
                raise ParseError(f"label must be a positive integer, got {row[0]!r}", lineno)
            offset = 1
            if layout.split_column:
                if values[1] not in (0.0, 1.0):
                    raise ParseError(f"split flag must be 0 or 1, got {row[1]!r}", lineno)
                flags.append(values[1] == 1.0)
                offset = 2
            else:
                flags.append(False)
            labels.append(int(label))
            rows.append(values[offset:])
    if not rows:
        raise ParseError("no data rows", 0)
    labels = np.array(labels)
    K = int(labels.max()) if K is None else int(K)
    if labels.max() > K:
        raise DataError(f"label {labels.max()} exceeds K={K}")
    feats = np.array(rows, dtype=np.float64).reshape(-1, layout.c, layout.h, layout.w)
    return FeatureDataset(feats.astype(np.float32), labels - 1, np.array(flags), K, {"path": str(path)})


def export_csv_features(ds, path, split_column=True):
    lines = [",".join(csv_header(ds, split_column))]
    flat = ds.features.reshape(ds.N, -1)
    for i in range(ds.N):
        head = [str(ds.labels[i] + 1)]
        if split_column:
            head.append(str(int(ds.is_test[i])))
        # repr of a float32 -> float64 value is exact and round-trips
        lines.append(",".join(head + [repr(float(v)) for v in flat[i]]))
    _atomic_write(path, ("\n".join(lines) + "\n").encode())
