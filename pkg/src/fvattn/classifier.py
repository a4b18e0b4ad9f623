"""Two-layer classifier head over Fisher Vectors.

``logits = GELU(LayerNorm(x W1 + b1)) W2 + b2`` trained with cross-entropy and
Adam under a step learning-rate schedule with early stopping on validation loss.
"""

from __future__ import annotations

import copy
import math
from decimal import Decimal
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import EmptySplit, LabelMismatch, ShapeMismatch
from .tensorio import read_bundle, write_bundle

LN_EPS = 1e-5
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x ** 3)))


def gelu_grad(x):
    t = np.tanh(GELU_C * (x + GELU_A * x ** 3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)


def num_outputs(task: str, num_labels: int) -> int:
    return 2 if task == "binary" else num_labels


@dataclass
class HeadParams:
    w1: np.ndarray
    b1: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, fv_len: int, hidden: int, n_out: int, seed: int = 0) -> "HeadParams":
        rng = np.random.default_rng(seed)
        b_in = 1.0 / math.sqrt(fv_len)
        b_hid = 1.0 / math.sqrt(hidden)
        return cls(
            rng.uniform(-b_in, b_in, (fv_len, hidden)),
            rng.uniform(-b_in, b_in, hidden),
            np.ones(hidden),
            np.zeros(hidden),
            rng.uniform(-b_hid, b_hid, (hidden, n_out)),
            rng.uniform(-b_hid, b_hid, n_out),
        )

    @classmethod
    def zeros_like(cls, other: "HeadParams") -> "HeadParams":
        return cls(*(np.zeros_like(a) for a in other.arrays()))

    @staticmethod
    def names() -> list[str]:
        return [f.name for f in fields(HeadParams)]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in self.names()]

    @property
    def fv_len(self) -> int:
        return self.w1.shape[0]

    @property
    def n_out(self) -> int:
        return self.w2.shape[1]


def _check_input(params: HeadParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != params.fv_len:
        raise ShapeMismatch(f"inputs of shape {X.shape} do not match W1 rows {params.fv_len}")
    return X


def _forward(params: HeadParams, X):
    h = X @ params.w1 + params.b1
    mu = h.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(((h - mu) ** 2).mean(axis=1, keepdims=True) + LN_EPS)
    hn = (h - mu) * inv_std
    y = params.ln_gain * hn + params.ln_bias
    a = gelu(y)
    logits = a @ params.w2 + params.b2
    return logits, (X, hn, inv_std, y, a)


def forward(params: HeadParams, X) -> np.ndarray:
    return _forward(params, _check_input(params, X))[0]


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _check_labels(labels, task, n, n_out):
    y = np.asarray(labels)
    if task == "multilabel":
        if y.shape != (n, n_out) or not np.isin(y, (0, 1)).all():
            raise LabelMismatch(f"multilabel targets must be a 0/1 matrix of shape {(n, n_out)}")
        return y.astype(np.float64)
    if task not in ("binary", "multiclass"):
        raise LabelMismatch(f"unknown task {task!r}")
    y = y.reshape(-1)
    if y.shape != (n,) or np.any(y < 0) or np.any(y >= n_out) or not np.all(y == np.round(y)):
        raise LabelMismatch(f"class labels must be {n} integers in [0, {n_out})")
    return y.astype(np.int64)


def loss_from_logits(logits, labels, task: str):
    """Cross-entropy and its gradient w.r.t. the logits.

    Softmax cross-entropy averaged over samples for binary/multiclass; per-label
    sigmoid cross-entropy averaged over samples and labels for multilabel.
    """
    n, c = logits.shape
    y = _check_labels(labels, task, n, c)
    if task == "multilabel":
        loss = float(np.mean(_softplus(logits) - y * logits))
        grad = (1.0 / (1.0 + np.exp(-logits)) - y) / (n * c)
        return loss, grad
    logp = _log_softmax(logits)
    loss = float(-np.mean(logp[np.arange(n), y]))
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


def loss_and_grad(params: HeadParams, X, labels, task: str) -> tuple[float, HeadParams]:
    X = _check_input(params, X)
    logits, (X, hn, inv_std, y, a) = _forward(params, X)
    loss, dz = loss_from_logits(logits, labels, task)
    dw2 = a.T @ dz
    db2 = dz.sum(axis=0)
    dy = (dz @ params.w2.T) * gelu_grad(y)
    dgain = (dy * hn).sum(axis=0)
    dbias = dy.sum(axis=0)
    dhn = dy * params.ln_gain
    dh = inv_std * (dhn - dhn.mean(axis=1, keepdims=True)
                    - hn * (dhn * hn).mean(axis=1, keepdims=True))
    dw1 = X.T @ dh
    db1 = dh.sum(axis=0)
    return loss, HeadParams(dw1, db1, dgain, dbias, dw2, db2)


def predict_proba(params: HeadParams, X, task: str) -> np.ndarray:
    logits = forward(params, X)
    if task == "multilabel":
        return 1.0 / (1.0 + np.exp(-logits))
    return np.exp(_log_softmax(logits))


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 20
    decay_epochs: tuple = (10, 15)
    decay_factor: float = 0.1
    batch_size: int = 32
    seed: int = 0
    early_stop_patience: int = 5
    hidden: int = 512
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.hidden < 1:
            raise ValueError("epochs, batch_size and hidden must be positive")
        if any(not 1 <= e <= self.epochs for e in self.decay_epochs):
            raise ValueError(f"decay epochs {self.decay_epochs} must lie in [1, {self.epochs}]")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch: decayed once per milestone already passed."""
        passed = sum(1 for e in self.decay_epochs if epoch > e)
        # decimal power keeps 0.1**2 == 0.01 exactly
        return self.lr * float(Decimal(repr(self.decay_factor)) ** passed)

    def to_json(self) -> dict:
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d


class Adam:
    def __init__(self, params: HeadParams, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = HeadParams.zeros_like(params)
        self.v = HeadParams.zeros_like(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params: HeadParams, grads: HeadParams, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name in HeadParams.names():
            p, g = getattr(params, name), getattr(grads, name)
            m, v = getattr(self.m, name), getattr(self.v, name)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    params: HeadParams
    log: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


def train(train_X, train_y, val_X, val_y, task: str, cfg: TrainConfig | None = None,
          n_out: int | None = None) -> TrainResult:
    """Fit a head by minibatch Adam; returns the parameters of the best validation epoch."""
    cfg = cfg or TrainConfig()
    train_X = np.asarray(train_X, dtype=np.float64)
    val_X = np.asarray(val_X, dtype=np.float64)
    if len(train_X) == 0 or len(val_X) == 0:
        raise EmptySplit("train and validation splits must be nonempty")
    train_y = np.asarray(train_y)
    val_y = np.asarray(val_y)
    if n_out is None:
        n_out = train_y.shape[1] if task == "multilabel" else (2 if task == "binary" else int(train_y.max()) + 1)
    params = HeadParams.init(train_X.shape[1], cfg.hidden, n_out, cfg.seed)
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed + 1)

    best = (math.inf, copy.deepcopy(params), 0)
    log = []
    stale = 0
    stopped = False
    n = len(train_X)
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grad(params, train_X[idx], train_y[idx], task)
            opt.step(params, grads, lr)
            total += loss * len(idx)
        val_loss = loss_from_logits(forward(params, val_X), val_y, task)[0]
        log.append({"epoch": epoch, "train_loss": total / n, "val_loss": val_loss, "lr": lr})
        if val_loss < best[0]:
            best = (val_loss, copy.deepcopy(params), epoch)
            stale = 0
        else:
            stale += 1
            if stale > cfg.early_stop_patience:
                stopped = True
                break
    return TrainResult(best[1], log, best[2], stopped)


def save_head(path, params: HeadParams, meta: dict | None = None) -> None:
    write_bundle(path, {n: getattr(params, n) for n in HeadParams.names()}, meta or {})


def load_head(path) -> tuple[HeadParams, dict]:
    tensors, meta = read_bundle(path)
    return HeadParams(*(tensors[n] for n in HeadParams.names())), meta
