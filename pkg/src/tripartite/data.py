"""Synthetic long-tailed datasets, batching, Many/Medium/Few bookkeeping and the dump format.

Dump format (text, UTF-8)::

    ltr-dump v1,<K>,<d>,<count>
    <label>,<x_0>,...,<x_{d-1}>          # count rows, %.17g
    classifier v1,<K>,<d>,<normalization>   # optional block
    <b_k>,<w_k0>,...,<w_k(d-1)>          # K rows

Training checkpoints are feature dumps (the encoded training set) followed by
the classifier block.
"""

import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .bank import MemoryBank, bank_update
from .errors import ConfigError, DumpFormatError
from .geometry import construct_etf
from .losses import Classifier, LabeledFeature, Normalization

DUMP_MAGIC = "ltr-dump v1"
CLASSIFIER_MAGIC = "classifier v1"


class ClassGeometry(str, Enum):
    SIMPLEX = "simplex"
    RANDOM = "random"


def longtail_counts(K, n1, imbalance_factor):
    """Exponential decay ``n_k = round(n1 * IF**(-(k-1)/(K-1)))`` (round half up)."""
    if K < 2:
        raise ConfigError("need K >= 2 classes")
    if imbalance_factor < 1:
        raise ConfigError(f"imbalance factor must be >= 1, got {imbalance_factor}")
    if n1 < imbalance_factor:
        raise ConfigError(
            f"n1={n1} < IF={imbalance_factor}: the tail class would round to zero samples"
        )
    k = np.arange(K)
    raw = n1 * np.power(float(imbalance_factor), -k / (K - 1))
    counts = np.floor(raw + 0.5).astype(np.int64)
    counts[0] = n1
    return counts


@dataclass(frozen=True)
class LongTailSpec:
    """Synthetic long-tailed Gaussian-mixture dataset.

    Class means are ``mean_scale`` times unit directions (a simplex ETF or
    random directions). If ``bayes_band = (lo, hi)`` is given, the scale is
    instead bisected until the Monte-Carlo nearest-mean accuracy on balanced
    data falls inside the band (in percent).
    """

    K: int = 100
    n1: int = 500
    imbalance_factor: float = 100.0
    input_dim: int = 32
    class_geometry: ClassGeometry = ClassGeometry.RANDOM
    noise_sigma: float = 1.0
    mean_scale: float = 3.0
    bayes_band: tuple | None = None
    test_per_class: int = 100
    seed: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, "class_geometry", ClassGeometry(self.class_geometry))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.bayes_band is not None:
            band = tuple(float(v) for v in self.bayes_band)
            if len(band) != 2 or not 0 <= band[0] < band[1] <= 100:
                raise ConfigError(f"bayes_band must be (lo, hi) within [0, 100], got {band}")
            object.__setattr__(self, "bayes_band", band)
        if self.input_dim < 1:
            raise ConfigError("input_dim must be >= 1")
        if not self.noise_sigma >= 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not self.mean_scale > 0:
            raise ConfigError("mean_scale must be > 0")
        if self.test_per_class < 1:
            raise ConfigError("test_per_class must be >= 1")
        if self.class_geometry is ClassGeometry.SIMPLEX and self.K - 1 > self.input_dim:
            raise ConfigError(
                f"simplex means for K={self.K} need input_dim >= {self.K - 1}, "
                f"got {self.input_dim}; use class_geometry='random'"
            )
        longtail_counts(self.K, self.n1, self.imbalance_factor)

    @property
    def counts(self):
        return longtail_counts(self.K, self.n1, self.imbalance_factor)


@dataclass
class Dataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    counts: np.ndarray
    means: np.ndarray

    @property
    def K(self):
        return self.counts.shape[0]

    @property
    def input_dim(self):
        return self.X_train.shape[1]

    def train_features(self):
        return [LabeledFeature(x, y) for x, y in zip(self.X_train, self.y_train)]


def _directions(spec, rng):
    if spec.class_geometry is ClassGeometry.SIMPLEX:
        return construct_etf(spec.K, spec.input_dim, rng)
    D = rng.normal(size=(spec.K, spec.input_dim))
    return D / np.linalg.norm(D, axis=1, keepdims=True)


def nearest_mean_accuracy(means, sigma, n_per_class, rng):
    """Monte-Carlo accuracy (percent) of the nearest-mean rule on balanced draws."""
    K, d = means.shape
    y = np.repeat(np.arange(K), n_per_class)
    X = means[y] + sigma * rng.normal(size=(y.size, d))
    d2 = (X * X).sum(1)[:, None] - 2 * X @ means.T + (means * means).sum(1)[None, :]
    return float(np.mean(np.argmin(d2, axis=1) == y) * 100.0)


def calibrate_mean_scale(directions, sigma, band, seed, n_per_class=200, iters=60):
    """Bisect the mean scale so nearest-mean accuracy lands inside ``band``.

    Uses common random numbers (one fixed noise draw), which makes accuracy
    monotone in the scale.
    """
    lo_acc, hi_acc = band
    target = 0.5 * (lo_acc + hi_acc)

    def acc(scale):
        return nearest_mean_accuracy(directions * scale, sigma, n_per_class,
                                     np.random.default_rng(seed))

    lo, hi = 0.0, 1.0
    while acc(hi) < target:
        hi *= 2.0
        if hi > 1e6:
            raise ConfigError(f"cannot reach nearest-mean accuracy {target}%")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        a = acc(mid)
        if lo_acc <= a <= hi_acc:
            return mid
        if a < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate_dataset(spec):
    """Draw the long-tailed train set and a balanced test set, fully seed-determined.

    Class ``k`` uses its own spawned random stream (train rows first, then
    test rows), so classes can be generated independently.
    """
    counts = spec.counts
    root = np.random.SeedSequence(spec.seed)
    mean_seq, calib_seq, *class_seqs = root.spawn(spec.K + 2)
    directions = _directions(spec, np.random.default_rng(mean_seq))
    scale = spec.mean_scale
    if spec.bayes_band is not None:
        calib_seed = int(calib_seq.generate_state(1)[0])
        scale = calibrate_mean_scale(directions, spec.noise_sigma, spec.bayes_band, calib_seed)
    means = directions * scale

    d = spec.input_dim
    Xtr, ytr, Xte, yte = [], [], [], []
    for k in range(spec.K):
        rng = np.random.default_rng(class_seqs[k])
        Xtr.append(means[k] + spec.noise_sigma * rng.normal(size=(counts[k], d)))
        Xte.append(means[k] + spec.noise_sigma * rng.normal(size=(spec.test_per_class, d)))
        ytr.append(np.full(counts[k], k, dtype=np.int64))
        yte.append(np.full(spec.test_per_class, k, dtype=np.int64))
    return Dataset(
        X_train=np.concatenate(Xtr),
        y_train=np.concatenate(ytr),
        X_test=np.concatenate(Xte),
        y_test=np.concatenate(yte),
        counts=counts,
        means=means,
    )


def batch_iter(n, batch_size, seed, epoch):
    """Instance-uniform shuffled index batches; the order depends only on ``(seed, epoch)``."""
    if batch_size < 1:
        raise ConfigError("batch size must be >= 1")
    perm = np.random.default_rng([int(seed), int(epoch)]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


@dataclass(frozen=True)
class SubsetSplit:
    many: frozenset
    medium: frozenset
    few: frozenset
    many_threshold: int = 100
    few_threshold: int = 20

    def class_subset(self, k):
        if k in self.many:
            return "many"
        if k in self.medium:
            return "medium"
        return "few"


def subset_split(train_counts, many_threshold=100, few_threshold=20):
    """Many: count > many_threshold; Few: count < few_threshold; Medium: the rest (inclusive)."""
    if not many_threshold > few_threshold > 0:
        raise ConfigError("need many_threshold > few_threshold > 0")
    counts = np.asarray(train_counts)
    many = frozenset(int(k) for k in np.flatnonzero(counts > many_threshold))
    few = frozenset(int(k) for k in np.flatnonzero(counts < few_threshold))
    medium = frozenset(int(k) for k in range(counts.size)) - many - few
    return SubsetSplit(many, medium, few, many_threshold, few_threshold)


# -- dump files ------------------------------------------------------------------


@dataclass
class Dump:
    K: int
    X: np.ndarray
    y: np.ndarray
    classifier: Classifier | None = None

    @property
    def d(self):
        return self.X.shape[1]


def _fmt_rows(first, M):
    lines = []
    for a, row in zip(first, M):
        lines.append(",".join([a] + ["%.17g" % v for v in row]))
    return lines


def write_dump(path, X, y, K, classifier=None):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2:
        X = X.reshape(len(y), -1)
    d = X.shape[1] if X.size else (classifier.d if classifier is not None else 0)
    lines = [f"{DUMP_MAGIC},{int(K)},{d},{len(y)}"]
    lines += _fmt_rows([str(int(v)) for v in y], X)
    if classifier is not None:
        lines.append(f"{CLASSIFIER_MAGIC},{classifier.K},{classifier.d},"
                     f"{classifier.normalization.value}")
        lines += _fmt_rows(["%.17g" % b for b in classifier.biases], classifier.weights)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_header(line, magic, lineno, path, n_ints):
    parts = [p.strip() for p in line.split(",")]
    if not parts or parts[0] != magic or len(parts) < 1 + n_ints:
        raise DumpFormatError(f"expected '{magic},...' header", lineno, path)
    try:
        ints = [int(p) for p in parts[1:1 + n_ints]]
    except ValueError:
        raise DumpFormatError("non-integer header field", lineno, path) from None
    if any(v < 0 for v in ints):
        raise DumpFormatError("negative header field", lineno, path)
    return ints, parts[1 + n_ints:]


def _parse_floats(parts, lineno, path):
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise DumpFormatError("non-numeric value", lineno, path) from None
    if not all(math.isfinite(v) for v in vals):
        raise DumpFormatError("non-finite value", lineno, path)
    return vals


def read_dump(path):
    """Parse a dump file; raises :class:`DumpFormatError` with the offending line number."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DumpFormatError(f"cannot read dump: {exc}", None, path) from None
    if not lines:
        raise DumpFormatError("empty file", 1, path)
    (K, d, count), _ = _parse_header(lines[0], DUMP_MAGIC, 1, path, 3)
    if len(lines) < 1 + count:
        raise DumpFormatError(f"expected {count} data rows, found {len(lines) - 1}",
                              len(lines) + 1, path)
    X = np.empty((count, d))
    y = np.empty(count, dtype=np.int64)
    for i in range(count):
        lineno = i + 2
        parts = lines[i + 1].split(",")
        if len(parts) != d + 1:
            raise DumpFormatError(f"expected {d + 1} fields, got {len(parts)}", lineno, path)
        try:
            label = int(parts[0])
        except ValueError:
            raise DumpFormatError("non-integer label", lineno, path) from None
        if not 0 <= label < K:
            raise DumpFormatError(f"label {label} outside [0, {K})", lineno, path)
        y[i] = label
        X[i] = _parse_floats(parts[1:], lineno, path)

    rest = [(n + 2 + count, ln) for n, ln in enumerate(lines[1 + count:]) if ln.strip()]
    classifier = None
    if rest:
        lineno, head = rest[0]
        (cK, cd), extra = _parse_header(head, CLASSIFIER_MAGIC, lineno, path, 2)
        if cK != K or cd != d:
            raise DumpFormatError(f"classifier block {cK}x{cd} does not match dump {K}x{d}",
                                  lineno, path)
        try:
            mode = Normalization(extra[0] if extra else "none")
        except ValueError:
            raise DumpFormatError(f"unknown normalization {extra[0]!r}", lineno, path) from None
        body = rest[1:]
        if len(body) != cK:
            where = body[cK][0] if len(body) > cK else lineno + len(body) + 1
            raise DumpFormatError(f"expected {cK} classifier rows, found {len(body)}", where, path)
        W = np.empty((cK, cd))
        b = np.empty(cK)
        for k, (ln_no, ln) in enumerate(body):
            parts = ln.split(",")
            if len(parts) != cd + 1:
                raise DumpFormatError(f"expected {cd + 1} fields, got {len(parts)}", ln_no, path)
            vals = _parse_floats(parts, ln_no, path)
            b[k] = vals[0]
            W[k] = vals[1:]
        classifier = Classifier(W, b, mode)
    return Dump(K=K, X=X, y=y, classifier=classifier)


__all__ = [
    "ClassGeometry", "Dataset", "Dump", "LongTailSpec", "MemoryBank", "SubsetSplit",
    "bank_update", "batch_iter", "calibrate_mean_scale", "generate_dataset", "longtail_counts",
    "nearest_mean_accuracy", "read_dump", "subset_split", "write_dump",
]
