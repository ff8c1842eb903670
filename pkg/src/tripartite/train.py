"""Two-stage training: tripartite stage 1, class-balanced classifier fine-tuning, evaluation."""

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .bank import MemoryBank, bank_update
from .data import batch_iter, subset_split, write_dump
from .errors import ConfigError, DivergenceError
from .geometry import metric_report
from .grads import grad_joint_wrt_classifier, tangent_project
from .losses import (
    Family,
    LossConfig,
    cb_weight,
    draw_negative_masks,
    joint_rows,
)
from .model import Model, ModelConfig, loss_and_grads

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "loss_total", "loss_sc", "loss_ss", "loss_cc", "lr",
                   "acc_all", "acc_many", "acc_medium", "acc_few")


@dataclass(frozen=True)
class TrainConfig:
    """``lr_stage2`` defaults to ``lr0``; ``metric_every = 0`` disables periodic metrics."""

    epochs_stage1: int = 200
    epochs_stage2: int = 20
    lr0: float = 0.05
    lr_stage2: float | None = None
    momentum: float = 0.9
    batch_size: int = 64
    weight_decay: float = 5e-4
    seed: int = 0
    loss: LossConfig = LossConfig()
    model: ModelConfig = ModelConfig()
    metric_every: int = 10

    def __post_init__(self):
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ConfigError("epoch counts must be >= 0")
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if self.lr_stage2 is not None and not self.lr_stage2 > 0:
            raise ConfigError(f"lr_stage2 must be > 0, got {self.lr_stage2}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.metric_every < 0:
            raise ConfigError("metric_every must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")

    @property
    def stage2_lr(self):
        return self.lr0 if self.lr_stage2 is None else self.lr_stage2


def cosine_lr(t, T, lr0):
    """``lr0 * (1 + cos(pi t / T)) / 2``; ``T = 0`` returns ``lr0``."""
    if T == 0:
        return float(lr0)
    if not 0 <= t <= T:
        raise ValueError(f"step {t} outside [0, {T}]")
    return lr0 * (1.0 + math.cos(math.pi * t / T)) / 2.0


def sgd_momentum_step(params, grads, velocity, lr, momentum, weight_decay,
                      unit_rows=(), no_decay=()):
    """In-place SGD with momentum on the arrays named in ``grads``.

    ``v = momentum * v + g + weight_decay * p`` then ``p -= lr * v``. Rows of
    the parameters named in ``unit_rows`` are kept on the unit sphere: ``v``
    loses its radial component before the step and rows are renormalized
    after it. Names in ``no_decay`` skip weight decay.
    """
    for name, g in grads.items():
        p = params[name]
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= momentum
        v += g
        if weight_decay and name not in no_decay:
            v += weight_decay * p
        if name in unit_rows:
            v[...] = tangent_project(p, v)
        p -= lr * v
        if name in unit_rows:
            norms = np.linalg.norm(p, axis=1, keepdims=True)
            # an overflowed row has no direction left; poison it so the
            # divergence guard sees it instead of a silent zero row
            norms[~np.isfinite(norms) | (norms == 0)] = np.nan
            p /= norms


def _bias_names(params):
    return {n for n in params if n.endswith(".b")}


def _unit_names(model):
    return {"clf.W"} if model.normalization.normalizes_classifier else set()


def _subset_acc(correct, y, classes):
    sel = np.isin(y, list(classes))
    if not sel.any():
        return None
    return 100.0 * correct[sel].mean()


@dataclass
class TrainResult:
    model: Model
    history: list
    metrics: dict = field(default_factory=dict)
    bank: MemoryBank | None = None


def _check_finite(loss, epoch, last_finite, step):
    if not math.isfinite(loss):
        raise DivergenceError(epoch, last_finite, step)


def _epoch_row(epoch, sums, n, lr, correct, y, split):
    return {
        "epoch": epoch,
        "loss_total": (sums[0] + sums[1] + sums[2]) / n,
        "loss_sc": sums[0] / n,
        "loss_ss": sums[1] / n,
        "loss_cc": sums[2] / n,
        "lr": lr,
        "acc_all": 100.0 * correct.mean(),
        "acc_many": _subset_acc(correct, y, split.many),
        "acc_medium": _subset_acc(correct, y, split.medium),
        "acc_few": _subset_acc(correct, y, split.few),
    }


def build_model(dataset, cfg):
    rng = np.random.default_rng([cfg.seed, 0xC0DE])
    return Model(dataset.input_dim, dataset.K, cfg.model, cfg.loss.normalization, rng)


def train_stage1(model, dataset, cfg):
    """Batch SGD on the tripartite loss for ``cfg.epochs_stage1`` epochs.

    The order of batches depends on ``(seed, epoch)``, negative masks on
    ``(seed, epoch, 1)``; the memory bank is updated after each batch's loss,
    so a sample is contrasted against projections from earlier batches.
    Per-class metrics are recorded every ``metric_every`` epochs and at the end.
    """
    X, y = dataset.X_train, dataset.y_train
    n = y.size
    if n == 0:
        raise ConfigError("empty training set")
    lc = cfg.loss
    K = dataset.K
    split = subset_split(dataset.counts)
    bank = MemoryBank.empty(K, cfg.model.proj_dim)
    velocity = {}
    no_decay = _bias_names(model.params)
    unit = _unit_names(model)
    E = cfg.epochs_stage1
    batches_per_epoch = math.ceil(n / cfg.batch_size)
    T = E * batches_per_epoch
    history, metrics = [], {}
    step = 0
    last_finite = 0
    for epoch in range(1, E + 1):
        mask_rng = np.random.default_rng([cfg.seed, epoch, 1])
        sums = [0.0, 0.0, 0.0]
        correct = np.zeros(n, dtype=bool)
        ys = np.empty(n, dtype=np.int64)
        pos = 0
        lr = cfg.lr0
        for idx in batch_iter(n, cfg.batch_size, cfg.seed, epoch):
            yb = y[idx]
            keep = None
            if lc.family is Family.BCE and lc.r < 1:
                keep = draw_negative_masks(yb, K, lc.r, mask_rng)
            res = loss_and_grads(model, X[idx], yb, bank, lc, keep)
            _check_finite(res.loss.total, epoch, last_finite, step)
            lr = cosine_lr(step, T, cfg.lr0)
            sgd_momentum_step(model.params, res.grads, velocity, lr, cfg.momentum,
                              cfg.weight_decay, unit, no_decay)
            if res.z is not None:
                bank = bank_update(bank, res.z_labels, res.z)
            b = idx.size
            sums[0] += res.loss.sc * b
            sums[1] += res.loss.ss * b
            sums[2] += res.loss.cc * b
            correct[pos:pos + b] = np.argmax(res.logits, axis=1) == yb
            ys[pos:pos + b] = yb
            pos += b
            step += 1
        if not all(np.isfinite(p).all() for p in model.params.values()):
            raise DivergenceError(epoch, last_finite, step)
        last_finite = epoch
        row = _epoch_row(epoch, sums, n, lr, correct, ys, split)
        history.append(row)
        log.info("stage1 epoch %d loss %.5f acc %.2f", epoch, row["loss_total"], row["acc_all"])
        if cfg.metric_every and (epoch % cfg.metric_every == 0 or epoch == E):
            metrics[epoch] = training_metrics(model, dataset)
    return TrainResult(model, history, metrics, bank)


def training_metrics(model, dataset):
    """Per-class metrics of the encoded training set and the classifier."""
    return metric_report(model.features(dataset.X_train), dataset.y_train,
                         model.classifier.weights, dataset.K)


def finetune_stage2(model, dataset, cfg, epoch_offset=0):
    """Fine-tune only the classifier with the class-balanced joint loss (``r = 1``).

    Encoder and projector are frozen, so training features are computed once.
    Returns ``(model, history)``; ``epochs_stage2 = 0`` leaves the model untouched.
    """
    E = cfg.epochs_stage2
    history = []
    if E == 0:
        return model, history
    X = model.features(dataset.X_train)
    y = dataset.y_train
    n = y.size
    clf = model.classifier
    family = cfg.loss.family
    weights = cb_weight(dataset.counts, cfg.loss.beta)
    split = subset_split(dataset.counts)
    velocity = {}
    unit = _unit_names(model)
    T = E * math.ceil(n / cfg.batch_size)
    step = 0
    last_finite = epoch_offset
    params = {"clf.W": clf.weights, "clf.b": clf.biases}
    for e in range(1, E + 1):
        epoch = epoch_offset + e
        sum_sc = 0.0
        correct = np.zeros(n, dtype=bool)
        ys = np.empty(n, dtype=np.int64)
        pos = 0
        lr = cfg.stage2_lr
        for idx in batch_iter(n, cfg.batch_size, cfg.seed, epoch):
            Xb, yb = X[idx], y[idx]
            sw = weights[yb]
            logits = clf.logits(Xb)
            rows, _ = joint_rows(logits, yb, family, None, sw / yb.size)
            loss = math.fsum(rows)
            _check_finite(loss, epoch, last_finite, step)
            dW, db = grad_joint_wrt_classifier(Xb, yb, clf, None, family, sw)
            lr = cosine_lr(step, T, cfg.stage2_lr)
            sgd_momentum_step(params, {"clf.W": dW, "clf.b": db}, velocity, lr, cfg.momentum,
                              cfg.weight_decay, unit, {"clf.b"})
            b = idx.size
            sum_sc += loss * b
            correct[pos:pos + b] = np.argmax(logits, axis=1) == yb
            ys[pos:pos + b] = yb
            pos += b
            step += 1
        if not (np.isfinite(clf.weights).all() and np.isfinite(clf.biases).all()):
            raise DivergenceError(epoch, last_finite, step)
        last_finite = epoch
        history.append(_epoch_row(epoch, [sum_sc, 0.0, 0.0], n, lr, correct, ys, split))
    return model, history


@dataclass
class EvalReport:
    """Percent accuracies; a subset with no classes is ``None`` (absent, not 0)."""

    acc_many: float | None
    acc_medium: float | None
    acc_few: float | None
    acc_all: float
    per_class_accuracy: np.ndarray

    def row(self):
        return {"acc_many": self.acc_many, "acc_medium": self.acc_medium,
                "acc_few": self.acc_few, "acc_all": self.acc_all}

    def table(self):
        """Aligned ``Many / Med. / Few / All`` table."""
        cells = [_fmt_acc(v) for v in (self.acc_many, self.acc_medium, self.acc_few, self.acc_all)]
        head = "".join(f"{h:>8s}" for h in ("Many", "Med.", "Few", "All"))
        return head + "\n" + "".join(f"{c:>8s}" for c in cells)


def _fmt_acc(v):
    return "NA" if v is None else f"{v:.2f}"


def evaluate(model, X_test, y_test, split):
    """Per-class, Many/Medium/Few and overall accuracy of the argmax prediction.

    Subset accuracies average the per-class accuracies of the subset's classes;
    ``acc_all`` is the plain sample accuracy (equal to the class mean on a
    balanced test set).
    """
    y_test = np.asarray(y_test, dtype=np.int64)
    if y_test.size == 0:
        raise ConfigError("empty test set")
    K = model.K
    pred = model.predict(X_test)
    correct = pred == y_test
    hits = np.bincount(y_test, weights=correct, minlength=K)
    tot = np.bincount(y_test, minlength=K)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(tot > 0, 100.0 * hits / np.maximum(tot, 1), np.nan)

    def subset(classes):
        vals = [per_class[k] for k in sorted(classes) if tot[k] > 0]
        return float(np.mean(vals)) if vals else None

    return EvalReport(
        acc_many=subset(split.many),
        acc_medium=subset(split.medium),
        acc_few=subset(split.few),
        acc_all=float(100.0 * correct.mean()),
        per_class_accuracy=per_class,
    )


@dataclass
class RunResult:
    model: Model
    history: list
    metrics: dict
    stage1_eval: EvalReport
    final_eval: EvalReport


def run_training(dataset, cfg, on_stage1=None):
    """Build a model, train stage 1, optionally fine-tune, and evaluate both stages.

    ``on_stage1(model)`` is called between the stages (e.g. to checkpoint).
    """
    model = build_model(dataset, cfg)
    res = train_stage1(model, dataset, cfg)
    split = subset_split(dataset.counts)
    ev1 = evaluate(model, dataset.X_test, dataset.y_test, split)
    if on_stage1 is not None:
        on_stage1(model)
    history = list(res.history)
    ev2 = ev1
    if cfg.epochs_stage2 > 0:
        _, h2 = finetune_stage2(model, dataset, cfg, epoch_offset=cfg.epochs_stage1)
        history += h2
        ev2 = evaluate(model, dataset.X_test, dataset.y_test, split)
    return RunResult(model, history, res.metrics, ev1, ev2)


# -- artifacts ------------------------------------------------------------------


def fmt_value(v):
    """CSV cell: ``NA`` for absent/nan, ``%.17g`` for reals, ``str`` otherwise."""
    if v is None:
        return "NA"
    if isinstance(v, (float, np.floating)):
        return "NA" if math.isnan(v) else "%.17g" % v
    return str(v)


def write_csv(path, columns, rows):
    """Header plus one line per row; rows are dicts keyed by column or plain sequences."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            cells = [r[c] for c in columns] if isinstance(r, dict) else r
            w.writerow([fmt_value(v) for v in cells])


def write_history(path, history):
    write_csv(path, HISTORY_COLUMNS, history)


def write_checkpoint(path, model, dataset):
    """Encoded training set plus classifier block, in the dump format."""
    write_dump(path, model.features(dataset.X_train), dataset.y_train, dataset.K,
               classifier=model.classifier)


# -- uniform-only dynamics --------------------------------------------------------


@dataclass
class EtfTrajectory:
    """Arrays of shape ``(steps + 1, inits)``: loss before each step and ETF deviations."""

    loss: np.ndarray
    max_cos_dev: np.ndarray
    max_norm_dev: np.ndarray
    W: np.ndarray


def uniform_descent(K, d, steps, lr, rng, inits=1, family=Family.BCE, include_positive=False,
                    W0=None):
    """Projected gradient descent on the uniform loss alone over ``K`` unit vectors in ``R^d``.

    ``inits`` independent random starts (or the given ``W0`` of shape
    ``(inits, K, d)``) are run side by side. Records the initial state and the
    state after every step.
    """
    if K < 2 or d < 1:
        raise ConfigError("need K >= 2 and d >= 1")
    if steps < 0 or not lr > 0:
        raise ConfigError("need steps >= 0 and lr > 0")
    W = rng.normal(size=(inits, K, d)) if W0 is None else np.array(W0, dtype=np.float64)
    W = W.reshape(-1, K, d)
    n = W.shape[0]
    W /= np.linalg.norm(W, axis=2, keepdims=True)
    labels = np.tile(np.arange(K), n)
    weights = np.full(n * K, 1.0 / K)
    iu = np.triu_indices(K, 1)
    target = -1.0 / (K - 1)
    loss = np.empty((steps + 1, n))
    cos_dev = np.empty((steps + 1, n))
    norm_dev = np.empty((steps + 1, n))
    for t in range(steps + 1):
        U = W @ W.transpose(0, 2, 1)
        rows, dU = _uniform_kernel(family)(U.reshape(n * K, K), labels, weights, include_positive)
        loss[t] = rows.reshape(n, K).sum(axis=1)
        norms = np.linalg.norm(W, axis=2)
        C = U / (norms[:, :, None] * norms[:, None, :])
        cos_dev[t] = np.abs(C[:, iu[0], iu[1]] - target).max(axis=1)
        norm_dev[t] = (norms.max(axis=1) - norms.min(axis=1)) / norms.max(axis=1)
        if t == steps:
            break
        dU = dU.reshape(n, K, K)
        G = (dU + dU.transpose(0, 2, 1)) @ W
        G -= np.sum(G * W, axis=2, keepdims=True) * W
        W = W - lr * G
        W /= np.linalg.norm(W, axis=2, keepdims=True)
    return EtfTrajectory(loss, cos_dev, norm_dev, W)


def _uniform_kernel(family):
    if Family(family) is Family.BCE:
        return lambda S, y, w, pos: kernels.bce_rows(S, y, None, w, include_positive=pos)
    return lambda S, y, w, pos: kernels.ce_rows(S, y, None, w)
