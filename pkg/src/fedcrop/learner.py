"""From-scratch numpy models: a one-step LSTM classifier with ReLU dense head,
and plain softmax regression. Both train with sparse categorical
cross-entropy under SGD or Adam, in float64 throughout.

Parameter layout of the LSTM classifier (kernels act on ``[h_prev, x]``)::

    lstm/W_forget, lstm/W_input, lstm/W_candidate, lstm/W_output   [H, H + D]
    lstm/b_forget, lstm/b_input, lstm/b_candidate, lstm/b_output   [H]
    dense{k}/W [in, out], dense{k}/b [out]      (ReLU)
    out/W [in, C], out/b [C]                    (softmax applied in the loss)

The four gate kernels are stored back to back, so in a flat parameter vector
they form one ``[4H, H + D]`` block.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .data import Dataset, batches
from .errors import ConfigurationError, DataError, ShapeError
from .params import ParameterSet, Tensor, schema_of

GATES = ("forget", "input", "candidate", "output")
KINDS = ("lstm-classifier", "softmax-regression")


@dataclass
class LearnerConfig:
    kind: str = "lstm-classifier"
    input_dim: int = 7
    num_classes: int = 22
    hidden_size: int = 64
    dense_sizes: tuple[int, ...] = (64, 32)
    optimizer: str = "adam"
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        self.dense_sizes = tuple(int(d) for d in self.dense_sizes)
        self.validate()

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown learner kind {self.kind!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        dims = [self.input_dim, self.num_classes, self.hidden_size, *self.dense_sizes]
        if any(int(d) < 1 for d in dims) or self.num_classes < 2:
            raise ConfigurationError(f"invalid model dimensions {dims}")
        # learning_rate == 0 is allowed: it freezes the model
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise ConfigurationError(f"learning rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_epsilon > 0):
            raise ConfigurationError("invalid Adam hyper-parameters")

    def replace(self, **changes) -> "LearnerConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dense_sizes"] = list(self.dense_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LearnerConfig":
        return cls(**d)


def layout(config: LearnerConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) pairs of the model's parameters."""
    D, C = config.input_dim, config.num_classes
    entries: list[tuple[str, tuple[int, ...]]] = []
    width = D
    if config.kind == "lstm-classifier":
        H = config.hidden_size
        entries += [(f"lstm/W_{g}", (H, H + D)) for g in GATES]
        entries += [(f"lstm/b_{g}", (H,)) for g in GATES]
        width = H
        for k, size in enumerate(config.dense_sizes, start=1):
            entries += [(f"dense{k}/W", (width, size)), (f"dense{k}/b", (size,))]
            width = size
    entries += [("out/W", (width, C)), ("out/b", (C,))]
    return entries


def schema_id(config: LearnerConfig) -> str:
    return schema_of(layout(config))


def init_model(config: LearnerConfig, seed: int | None = None) -> ParameterSet:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    tensors = []
    for name, shape in layout(config):
        if len(shape) == 1:
            arr = np.zeros(shape)
        else:
            if name.startswith("lstm/"):
                fan_out, fan_in = shape
            else:
                fan_in, fan_out = shape
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-limit, limit, size=shape)
        tensors.append(Tensor(name, arr))
    return ParameterSet(tensors)


# ---------------------------------------------------------------------------
# activations


def sigmoid(z):
    # tanh form: no overflow for large |z|
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


# ---------------------------------------------------------------------------
# single LSTM cell


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        if self.h.shape != self.c.shape:
            raise ShapeError(f"hidden {self.h.shape} and cell {self.c.shape} differ")

    @classmethod
    def zeros(cls, hidden_size: int) -> "LstmState":
        return cls(np.zeros(hidden_size), np.zeros(hidden_size))


@dataclass
class GateTrace:
    forget: np.ndarray
    input: np.ndarray
    candidate: np.ndarray
    output: np.ndarray


def _gate_block(weights: ParameterSet) -> tuple[np.ndarray, np.ndarray]:
    try:
        W = np.concatenate([weights[f"lstm/W_{g}"] for g in GATES], axis=0)
        b = np.concatenate([weights[f"lstm/b_{g}"] for g in GATES])
    except KeyError as exc:
        raise ShapeError(f"parameter set lacks LSTM tensor {exc}") from None
    return W, b


def _lstm_step(W, b, x, h, c):
    H = h.shape[1]
    z = np.concatenate([h, x], axis=1)
    a = z @ W.T + b
    f = sigmoid(a[:, :H])
    i = sigmoid(a[:, H:2 * H])
    g = np.tanh(a[:, 2 * H:3 * H])
    o = sigmoid(a[:, 3 * H:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (z, c, f, i, g, o, tc)


def _lstm_step_backward(W, cache, dh, dc_next):
    z, c_prev, f, i, g, o, tc = cache
    H = f.shape[1]
    dc = dh * o * (1.0 - tc * tc) + dc_next
    da = np.empty((dh.shape[0], 4 * H))
    da[:, :H] = dc * c_prev * f * (1.0 - f)
    da[:, H:2 * H] = dc * g * i * (1.0 - i)
    da[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
    da[:, 3 * H:] = dh * tc * o * (1.0 - o)
    dW = da.T @ z
    db = da.sum(axis=0)
    dz = da @ W
    return dW, db, dz[:, :H], dz[:, H:], dc * f


def lstm_cell_forward(weights: ParameterSet, x, prev: LstmState) -> tuple[LstmState, GateTrace]:
    """One LSTM step for a single input vector."""
    W, b = _gate_block(weights)
    H = W.shape[0] // 4
    x = np.asarray(x, dtype=np.float64)
    if prev.h.shape != (H,) or x.shape != (W.shape[1] - H,):
        raise ShapeError(
            f"expected x of length {W.shape[1] - H} and state of length {H}, "
            f"got {x.shape} and {prev.h.shape}")
    h, c, (_, _, f, i, g, o, _) = _lstm_step(W, b, x[None, :], prev.h[None, :], prev.c[None, :])
    return LstmState(h[0], c[0]), GateTrace(f[0], i[0], g[0], o[0])


# ---------------------------------------------------------------------------
# whole network on a flat parameter vector


class _Net:
    """Views of one flat vector shaped as the network's parameter blocks."""

    def __init__(self, entries, flat):
        self.flat = flat
        views, pos = {}, 0
        for name, shape in entries:
            n = math.prod(shape)
            views[name] = flat[pos:pos + n].reshape(shape)
            pos += n
        self.views = views
        self.lstm = "lstm/W_forget" in views
        if self.lstm:
            H, Z = views["lstm/W_forget"].shape
            self.W_gates = flat[:4 * H * Z].reshape(4 * H, Z)
            self.b_gates = flat[4 * H * Z:4 * H * Z + 4 * H]
            self.hidden = H
        self.dense = []
        k = 1
        while f"dense{k}/W" in views:
            self.dense.append((views[f"dense{k}/W"], views[f"dense{k}/b"]))
            k += 1
        self.out = (views["out/W"], views["out/b"])

    @property
    def input_dim(self) -> int:
        if self.lstm:
            return self.W_gates.shape[1] - self.hidden
        return (self.dense[0][0] if self.dense else self.out[0]).shape[0]


def _entries_of(params: ParameterSet):
    return list(zip(params.names, params.shapes))


def _check_features(net: _Net, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.input_dim:
        raise ShapeError(f"features must be [batch, {net.input_dim}], got {list(X.shape)}")
    return X


def _forward(net: _Net, X):
    caches = []
    if net.lstm:
        n = X.shape[0]
        zeros = np.zeros((n, net.hidden))
        act, _, lstm_cache = _lstm_step(net.W_gates, net.b_gates, X, zeros, zeros)
        caches.append(lstm_cache)
    else:
        act = X
    for W, b in net.dense:
        pre = act @ W + b
        caches.append((act, pre))
        act = np.maximum(pre, 0.0)
    W, b = net.out
    return act @ W + b, act, caches


def _check_labels(labels, n, num_classes) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise DataError("labels must be integers")
        y = y.astype(np.int64)
    if n and (y.min() < 0 or y.max() >= num_classes):
        raise DataError(f"label outside [0, {num_classes})")
    return y


def _loss_and_grad(net: _Net, X, y, g: _Net | None = None):
    """Mean cross-entropy; writes the gradient into ``g`` (same layout) when given."""
    logits, last, caches = _forward(net, X)
    n = X.shape[0]
    logp = log_softmax(logits)
    loss = -float(logp[np.arange(n), y].mean())
    if g is None:
        return loss

    d = np.exp(logp)
    d[np.arange(n), y] -= 1.0
    d /= n
    W, _ = net.out
    g.out[0][...] = last.T @ d
    g.out[1][...] = d.sum(axis=0)
    dact = d @ W.T
    for k in range(len(net.dense) - 1, -1, -1):
        act_in, pre = caches[k + int(net.lstm)]
        dpre = dact * (pre > 0)
        g.dense[k][0][...] = act_in.T @ dpre
        g.dense[k][1][...] = dpre.sum(axis=0)
        dact = dpre @ net.dense[k][0].T
    if net.lstm:
        dW, db, _, _, _ = _lstm_step_backward(net.W_gates, caches[0], dact, 0.0)
        g.W_gates[...] = dW
        g.b_gates[...] = db
    return loss


def _net_of(params: ParameterSet) -> _Net:
    return _Net(_entries_of(params), params.to_vector())


def forward(params: ParameterSet, features) -> np.ndarray:
    """Pre-softmax logits ``[batch, num_classes]``; each row is a length-1 sequence."""
    net = _net_of(params)
    X = _check_features(net, features)
    return _forward(net, X)[0]


def predict(params: ParameterSet, features) -> np.ndarray:
    return np.argmax(forward(params, features), axis=1)


def loss(logits, labels) -> float:
    """Sparse categorical cross-entropy, mean over the batch."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeError("logits must be a matrix")
    y = _check_labels(labels, logits.shape[0], logits.shape[1])
    if not np.all(np.isfinite(logits)):
        raise DataError("non-finite logits")
    return -float(log_softmax(logits)[np.arange(len(y)), y].mean())


def backward(params: ParameterSet, features, labels) -> ParameterSet:
    """Gradient of the mean cross-entropy w.r.t. every parameter."""
    net = _net_of(params)
    X = _check_features(net, features)
    y = _check_labels(labels, X.shape[0], net.out[1].shape[0])
    g = _Net(_entries_of(params), np.zeros_like(net.flat))
    _loss_and_grad(net, X, y, g)
    return params.with_vector(g.flat)


def loss_and_gradient(params: ParameterSet, features, labels) -> tuple[float, ParameterSet]:
    net = _net_of(params)
    X = _check_features(net, features)
    y = _check_labels(labels, X.shape[0], net.out[1].shape[0])
    g = _Net(_entries_of(params), np.zeros_like(net.flat))
    value = _loss_and_grad(net, X, y, g)
    return value, params.with_vector(g.flat)


def dataset_loss(params: ParameterSet, dataset: Dataset) -> float:
    net = _net_of(params)
    X = _check_features(net, dataset.features)
    return _loss_and_grad(net, X, dataset.labels)


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def _update_flat(theta: np.ndarray, g: np.ndarray, state: OptimizerState, config: LearnerConfig) -> None:
    lr = config.learning_rate
    state.step += 1
    if config.optimizer == "sgd":
        theta -= lr * g
        return
    if state.m is None:
        state.m = np.zeros_like(theta)
        state.v = np.zeros_like(theta)
    b1, b2 = config.adam_beta1, config.adam_beta2
    m, v = state.m, state.v
    tmp = np.multiply(g, 1.0 - b1)
    m *= b1
    m += tmp
    np.multiply(g, g, out=tmp)
    tmp *= 1.0 - b2
    v *= b2
    v += tmp
    # theta -= lr * m_hat / (sqrt(v_hat) + eps)
    np.divide(v, 1.0 - b2 ** state.step, out=tmp)
    np.sqrt(tmp, out=tmp)
    tmp += config.adam_epsilon
    np.divide(m, tmp, out=tmp)
    tmp *= lr / (1.0 - b1 ** state.step)
    theta -= tmp


def optimizer_step(params: ParameterSet, grads: ParameterSet, state: OptimizerState | None,
                   config: LearnerConfig) -> tuple[ParameterSet, OptimizerState]:
    """``p - lr * g`` for sgd; bias-corrected Adam otherwise."""
    if params.schema_id != grads.schema_id:
        raise ShapeError("gradient schema does not match parameters")
    state = OptimizerState() if state is None else state
    theta = params.to_vector()
    _update_flat(theta, grads.to_vector(), state, config)
    return params.with_vector(theta), state


# ---------------------------------------------------------------------------
# local training and evaluation


class LocalTraining(NamedTuple):
    params: ParameterSet
    epoch_losses: list[float]


def train_local(params: ParameterSet, shard: Dataset, config: LearnerConfig,
                rng: np.random.Generator | None = None) -> LocalTraining:
    """Run ``config.epochs`` passes of minibatch training over ``shard``.

    Each epoch reshuffles the shard once with ``rng`` (default: seeded from
    ``config.seed``) and walks its ceil(n / batch_size) batches in order.
    The optimizer state starts fresh on every call.
    """
    if len(shard) == 0:
        raise DataError("cannot train on an empty shard")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    net = _net_of(params)
    X = _check_features(net, shard.features)
    y = _check_labels(shard.labels, X.shape[0], net.out[1].shape[0])
    theta = net.flat
    g = _Net(_entries_of(params), np.zeros_like(theta))
    state = OptimizerState()
    losses = []
    for _ in range(config.epochs):
        total = 0.0
        for idx in batches(len(y), config.batch_size, rng):
            total += _loss_and_grad(net, X[idx], y[idx], g) * len(idx)
            _update_flat(theta, g.flat, state, config)
        losses.append(total / len(y))
    if not np.all(np.isfinite(theta)):
        raise FloatingPointError("training diverged to non-finite parameters")
    return LocalTraining(params.with_vector(theta), losses)


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    loss: float
    per_class_counts: list[tuple[int, int, int, int]] = field(default_factory=list)

    def to_dict(self, counts: bool = False) -> dict:
        d = {"accuracy": self.accuracy, "precision": self.precision,
             "recall": self.recall, "f1": self.f1, "loss": self.loss}
        if counts:
            d["per_class_counts"] = [list(c) for c in self.per_class_counts]
        return d


def metrics_from_counts(tp: int, tn: int, fp: int, fn: int) -> tuple[float, float, float, float]:
    """Accuracy, precision, recall and F1 of one one-vs-rest confusion table."""
    total = tp + tn + fp + fn
    acc = (tp + tn) / total if total else 0.0
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return acc, prec, rec, f1


def classification_metrics(y_true, y_pred, num_classes: int, loss_value: float = 0.0) -> MetricsReport:
    """Micro accuracy; precision/recall/F1 macro-averaged over all classes.

    A class that never occurs in either vector scores 0 and still counts in
    the average. Class terms are summed in class order so results are
    reproducible to the last bit.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    n = y_true.size
    if n == 0:
        raise DataError("cannot evaluate on an empty dataset")
    cm = np.bincount(y_true * num_classes + y_pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = n - tp - fp - fn
    per_class = [metrics_from_counts(*map(int, t)) for t in zip(tp, tn, fp, fn)]
    return MetricsReport(
        accuracy=float(tp.sum()) / n,
        precision=sum(p[1] for p in per_class) / num_classes,
        recall=sum(p[2] for p in per_class) / num_classes,
        f1=sum(p[3] for p in per_class) / num_classes,
        loss=float(loss_value),
        per_class_counts=[tuple(map(int, t)) for t in zip(tp, tn, fp, fn)],
    )


def evaluate(params: ParameterSet, dataset: Dataset) -> MetricsReport:
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    logits = forward(params, dataset.features)
    num_classes = logits.shape[1]
    return classification_metrics(dataset.labels, logits.argmax(axis=1), num_classes,
                                  loss(logits, dataset.labels))
