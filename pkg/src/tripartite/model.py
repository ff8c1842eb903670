"""Encoder / classifier / projector model with hand-written backpropagation."""

import math
from dataclasses import dataclass, field

import numpy as np

from . import reference as ref
from .bank import MemoryBank
from .errors import ConfigError
from .grads import normalization_backward
from .losses import (
    Classifier,
    Family,
    LossBreakdown,
    LossConfig,
    Normalization,
    contrastive_rows,
    joint_rows,
    uniform_rows,
)


def _relu(a):
    return np.maximum(a, 0.0)


def _relu_grad(a, h):
    return (a > 0).astype(np.float64)


def _tanh_grad(a, h):
    return 1.0 - h * h


ACTIVATIONS = {
    "relu": (_relu, _relu_grad),
    "tanh": (np.tanh, _tanh_grad),
}


@dataclass(frozen=True)
class ModelConfig:
    """``encoder`` is ``"mlp"`` (hidden layers, then a linear map to ``feature_dim``)
    or ``"identity"`` (features are the raw inputs)."""

    encoder: str = "mlp"
    hidden: tuple = (64,)
    activation: str = "relu"
    feature_dim: int = 16
    proj_hidden: int = 16
    proj_dim: int = 8

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.encoder not in ("mlp", "identity"):
            raise ConfigError(f"unknown encoder {self.encoder!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if min((self.feature_dim, self.proj_hidden, self.proj_dim) + self.hidden) < 1:
            raise ConfigError("layer sizes must be >= 1")


def _uniform_init(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class Forward:
    X: np.ndarray
    enc_cache: list
    x: np.ndarray
    x_eff: np.ndarray
    logits: np.ndarray
    proj_cache: tuple = None
    p: np.ndarray = None


class Model:
    """MLP (or identity) encoder, linear classifier, two-layer projector.

    Parameters live in ``self.params`` (an ordered name -> array dict) so the
    optimizer and gradcheck can treat them uniformly; the classifier's arrays
    are shared with ``self.classifier``.
    """

    def __init__(self, input_dim, K, cfg=ModelConfig(), normalization=Normalization.CLASSIFIER,
                 rng=None):
        if K < 2:
            raise ConfigError("need K >= 2 classes")
        rng = np.random.default_rng(0) if rng is None else rng
        self.cfg = cfg
        self.input_dim = int(input_dim)
        self.act, self.act_grad = ACTIVATIONS[cfg.activation]
        self.params = {}
        self.n_enc = 0
        if cfg.encoder == "mlp":
            sizes = (self.input_dim,) + cfg.hidden + (cfg.feature_dim,)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
                self.params[f"enc.{i}.W"] = _uniform_init(rng, a, b)
                self.params[f"enc.{i}.b"] = np.zeros(b)
            self.n_enc = len(sizes) - 1
            d = cfg.feature_dim
        else:
            d = self.input_dim
        self.feature_dim = d

        W = rng.normal(size=(K, d))
        W /= np.linalg.norm(W, axis=1, keepdims=True)
        self.classifier = Classifier(W, np.zeros(K), normalization)
        self.params["clf.W"] = self.classifier.weights
        self.params["clf.b"] = self.classifier.biases

        self.params["proj.0.W"] = _uniform_init(rng, d, cfg.proj_hidden)
        self.params["proj.0.b"] = np.zeros(cfg.proj_hidden)
        self.params["proj.1.W"] = _uniform_init(rng, cfg.proj_hidden, cfg.proj_dim)
        self.params["proj.1.b"] = np.zeros(cfg.proj_dim)

    @property
    def K(self):
        return self.classifier.K

    @property
    def normalization(self):
        return self.classifier.normalization

    def encoder_names(self):
        return [n for n in self.params if n.startswith("enc.")]

    def projector_names(self):
        return [n for n in self.params if n.startswith("proj.")]

    def get_flat(self):
        return np.concatenate([p.ravel() for p in self.params.values()])

    def set_flat(self, theta):
        i = 0
        for p in self.params.values():
            p[...] = theta[i:i + p.size].reshape(p.shape)
            i += p.size

    # -- forward -------------------------------------------------------------

    def features(self, X):
        h = np.asarray(X, dtype=np.float64)
        for i in range(self.n_enc):
            a = h @ self.params[f"enc.{i}.W"] + self.params[f"enc.{i}.b"]
            h = a if i == self.n_enc - 1 else self.act(a)
        return h

    def forward(self, X, project=True):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.input_dim:
            raise ConfigError(f"input dim {X.shape[-1]} != {self.input_dim}")
        cache = []
        h = X
        for i in range(self.n_enc):
            a = h @ self.params[f"enc.{i}.W"] + self.params[f"enc.{i}.b"]
            out = a if i == self.n_enc - 1 else self.act(a)
            cache.append((h, a, out))
            h = out
        x = h
        x_eff = self.classifier.effective_features(x)
        logits = x_eff @ self.classifier.effective_weights().T + self.classifier.biases
        fwd = Forward(X, cache, x, x_eff, logits)
        if project:
            a1 = x @ self.params["proj.0.W"] + self.params["proj.0.b"]
            h1 = self.act(a1)
            fwd.p = h1 @ self.params["proj.1.W"] + self.params["proj.1.b"]
            fwd.proj_cache = (a1, h1)
        return fwd

    def project(self, X):
        """Unit-norm projections ``z`` of inputs ``X``."""
        p = self.forward(X).p
        return p / np.linalg.norm(p, axis=1, keepdims=True)

    def predict(self, X):
        return np.argmax(self.forward(X, project=False).logits, axis=1)

    # -- backward ------------------------------------------------------------

    def backward(self, fwd, d_logits, dW_eff_extra=None, d_p=None):
        """Gradients of every parameter given upstream gradients.

        ``d_logits`` is ``d loss / d logits``; ``dW_eff_extra`` adds a gradient
        on the effective classifier vectors (the uniform term); ``d_p`` is the
        gradient on the raw projector output.
        """
        clf = self.classifier
        W_eff = clf.effective_weights()
        grads = {}
        dW_eff = d_logits.T @ fwd.x_eff
        if dW_eff_extra is not None:
            dW_eff = dW_eff + dW_eff_extra
        grads["clf.W"] = (normalization_backward(dW_eff, clf.weights)
                          if clf.normalization.normalizes_classifier else dW_eff)
        grads["clf.b"] = d_logits.sum(axis=0)

        dx = d_logits @ W_eff
        if clf.normalization.normalizes_features:
            dx = normalization_backward(dx, fwd.x)

        if d_p is not None:
            a1, h1 = fwd.proj_cache
            grads["proj.1.W"] = h1.T @ d_p
            grads["proj.1.b"] = d_p.sum(axis=0)
            da1 = (d_p @ self.params["proj.1.W"].T) * self.act_grad(a1, h1)
            grads["proj.0.W"] = fwd.x.T @ da1
            grads["proj.0.b"] = da1.sum(axis=0)
            dx = dx + da1 @ self.params["proj.0.W"].T
        else:
            for name in self.projector_names():
                grads[name] = np.zeros_like(self.params[name])

        dh = dx
        for i in reversed(range(self.n_enc)):
            h_in, a, out = fwd.enc_cache[i]
            da = dh if i == self.n_enc - 1 else dh * self.act_grad(a, out)
            grads[f"enc.{i}.W"] = h_in.T @ da
            grads[f"enc.{i}.b"] = da.sum(axis=0)
            dh = da @ self.params[f"enc.{i}.W"].T
        return grads


@dataclass
class StepResult:
    loss: LossBreakdown
    grads: dict
    logits: np.ndarray
    z: np.ndarray = None
    z_labels: np.ndarray = None
    extras: dict = field(default_factory=dict)


def loss_and_grads(model, X, y, bank, cfg, keep=None, sample_weights=None):
    """Tripartite batch loss and gradients for every model parameter.

    Mirrors :func:`tripartite.losses.tripartite_loss` term by term; ``keep`` is
    the frozen negative mask (BCE joint only), ``sample_weights`` multiplies
    each sample's joint loss (class-balanced fine-tuning).
    """
    y = np.asarray(y, dtype=np.int64)
    B = y.size
    if B == 0:
        raise ValueError("empty batch")
    need_proj = cfg.lambda_ss > 0
    fwd = model.forward(X, project=need_proj)

    w = np.full(B, 1.0 / B)
    if sample_weights is not None:
        w = w * np.asarray(sample_weights, dtype=np.float64)
    joint_keep = keep if cfg.family is Family.BCE else None
    rows, d_logits = joint_rows(fwd.logits, y, cfg.family, joint_keep, w)
    sc = math.fsum(rows)

    ss = 0.0
    d_p = None
    z = None
    skipped = 0
    z_labels = None
    if need_proj:
        # a projection that is exactly zero (all hidden units dead) has no
        # direction: it sits out the contrastive term and the bank update
        live = np.any(fwd.p != 0, axis=1)
        rows, dcos, Zn, _, active = contrastive_rows(
            fwd.p[live], y[live], bank, cfg.tau, cfg.contrastive_family,
            np.full(int(live.sum()), cfg.lambda_ss / B)
        )
        ss = math.fsum(rows)
        skipped = int(B - active.sum())
        z, z_labels = Zn, y[live]
        if active.any():
            d_p = np.zeros_like(fwd.p)
            d_p[live] = normalization_backward(dcos @ bank.slots, fwd.p[live])

    cc = 0.0
    dW_extra = None
    if cfg.lambda_cc > 0:
        K = model.K
        W_eff = model.classifier.effective_weights()
        rows, dU = uniform_rows(W_eff, cfg.uniform_family, cfg.include_cc_positive,
                                np.full(K, cfg.lambda_cc / K))
        cc = math.fsum(rows)
        dW_extra = (dU + dU.T) @ W_eff

    grads = model.backward(fwd, d_logits, dW_extra, d_p)
    return StepResult(LossBreakdown(sc=sc, ss=ss, cc=cc, skipped=skipped), grads, fwd.logits, z,
                      z_labels)


def model_gradcheck_problem(seed, family):
    """Small random model + batch for checking :func:`loss_and_grads` by finite differences."""
    rng = np.random.default_rng(seed)
    mode = [Normalization.CLASSIFIER, Normalization.BOTH][seed % 2]
    cfg = LossConfig(family=family, lambda_ss=0.7, lambda_cc=1.3, tau=0.5, r=0.6,
                     include_cc_positive=bool(seed % 3 == 0), normalization=mode)
    mcfg = ModelConfig(hidden=(5,), activation=["tanh", "relu"][seed % 2], feature_dim=3,
                       proj_hidden=4, proj_dim=3)
    K, B, D = 4, 6, 4
    model = Model(D, K, mcfg, mode, rng)
    model.params["clf.b"][:] = rng.normal(scale=0.3, size=K)
    for name in model.encoder_names() + model.projector_names():
        if name.endswith(".b"):
            model.params[name][:] = rng.normal(scale=0.2, size=model.params[name].shape)
    X = rng.normal(size=(B, D))
    y = rng.integers(K, size=B)
    slots = rng.normal(size=(K, mcfg.proj_dim))
    slots /= np.linalg.norm(slots, axis=1, keepdims=True)
    init = rng.random(K) < 0.75
    init[y[0]] = True
    bank = MemoryBank(np.where(init[:, None], slots, 0.0), init)
    keep = rng.random((B, K)) < cfg.r
    keep[np.arange(B), y] = True

    res = loss_and_grads(model, X, y, bank, cfg, keep)
    analytic = np.concatenate([res.grads[n].ravel() for n in model.params])
    theta0 = model.get_flat()

    def f(theta):
        model.set_flat(theta)
        val = reference_loss(model, X, y, bank, cfg, keep)
        model.set_flat(theta0)
        return val

    return analytic, f, theta0.copy()


def reference_loss(model, X, y, bank, cfg, keep=None, dtype=ref.EXT):
    """Tripartite batch loss through a plain-numpy forward pass in ``dtype``."""
    P = {n: np.asarray(v, dtype=dtype) for n, v in model.params.items()}
    act = {"relu": lambda a: np.maximum(a, 0), "tanh": np.tanh}[model.cfg.activation]
    h = np.asarray(X, dtype=dtype)
    for i in range(model.n_enc):
        a = h @ P[f"enc.{i}.W"] + P[f"enc.{i}.b"]
        h = a if i == model.n_enc - 1 else act(a)
    mode = model.normalization
    S = ref.logits(h, P["clf.W"], P["clf.b"], mode.normalizes_features, mode.normalizes_classifier)
    B = len(y)
    total = ref.joint_loss(S, y, cfg.family.value, keep)
    if cfg.lambda_ss > 0:
        p = act(h @ P["proj.0.W"] + P["proj.0.b"]) @ P["proj.1.W"] + P["proj.1.b"]
        total = total + ref.contrastive_loss(p, y, np.asarray(bank.slots, dtype=dtype),
                                             bank.initialized, dtype(cfg.tau),
                                             cfg.contrastive_family.value,
                                             dtype(cfg.lambda_ss) / B)
    if cfg.lambda_cc > 0:
        W = P["clf.W"]
        W = W / np.sqrt(np.sum(W * W, axis=1, keepdims=True))
        total = total + ref.uniform_loss(W, cfg.uniform_family.value, cfg.include_cc_positive,
                                         dtype(cfg.lambda_cc) / model.K)
    return total
