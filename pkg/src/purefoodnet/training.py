"""Reverse-mode gradients, the cross-entropy objective, Nesterov-momentum
SGD with step decay, Glorot initialization, the training loop with early
stopping, and fit diagnostics.

Each `*_backward` consumes the cache produced by its forward twin in
`layers` and returns input gradients (plus parameter gradients where the
layer has any). The training loop evaluates gradients at the Nesterov
lookahead point theta + mu*v, then applies v <- mu*v - lr*grad and
theta <- theta + v.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from . import models as M
from .errors import ConfigError, NonFiniteError, ShapeError
from .seeding import make_rng
from .tensor import Tensor4

GradStore = dict[str, np.ndarray]

LOG_FLOOR = 1e-12


def glorot_init(shape, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples in +-sqrt(6 / (fan_in + fan_out)).

    Dense (n_in, n_out) shapes use the two dims directly; conv banks
    (f, k, k, c) use receptive-field fans k*k*c and k*k*f.
    """
    if len(shape) == 2:
        fan_in, fan_out = shape
    elif len(shape) == 4:
        f, k1, k2, c = shape
        fan_in = k1 * k2 * c
        fan_out = k1 * k2 * f
    else:
        raise ShapeError(f"no fan rule for shape {shape}")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _as_rows(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor4) else np.asarray(x)
    return arr.reshape(arr.shape[0], -1)


def _check_one_hot(labels: np.ndarray):
    if not (np.isin(labels, (0.0, 1.0)).all() and (labels.sum(axis=1) == 1).all()):
        raise ValueError("labels must be one-hot rows (exactly one 1, rest 0)")


def cross_entropy_loss(probs, labels) -> float:
    """Mean over the batch of -log(probability of the true class)."""
    p = _as_rows(probs)
    y = _as_rows(labels)
    if p.shape != y.shape:
        raise ShapeError(f"probs shape {p.shape} != labels shape {y.shape}")
    _check_one_hot(y)
    true_p = (p * y).sum(axis=1)
    return float(-np.log(np.maximum(true_p, LOG_FLOOR)).mean())


# ---------------------------------------------------------------------------
# Per-layer backward passes.
# ---------------------------------------------------------------------------

def conv2d_backward(d: np.ndarray, cache: L.ConvCache):
    """Returns (dx, dfilters, dbias) for a conv forward (fused ReLU included)."""
    if cache.relu_mask is not None:
        d = d * cache.relu_mask
    windows, filters, g = cache.windows, cache.filters, cache.geometry
    db = d.sum(axis=(0, 1, 2))
    dw = np.tensordot(d, windows, axes=([0, 1, 2], [0, 1, 2])).transpose(0, 2, 3, 1)
    oh, ow = d.shape[1], d.shape[2]
    dxp = np.zeros(cache.padded_shape, dtype=d.dtype)
    for p in range(g.k):
        for q in range(g.k):
            # Output cell (r, t) read padded cell (r*s + p, t*s + q) through tap (p, q).
            contrib = np.tensordot(d, filters[:, p, q, :], axes=([3], [0]))
            dxp[:, p:p + g.s * (oh - 1) + 1:g.s,
                q:q + g.s * (ow - 1) + 1:g.s, :] += contrib
    if g.z:
        dx = dxp[:, g.z:-g.z, g.z:-g.z, :]
    else:
        dx = dxp
    return dx, dw, db


def pool_backward(d: np.ndarray, cache: L.PoolCache) -> np.ndarray:
    window, stride = cache.window, cache.stride
    n, oh, ow, c = d.shape
    dx = np.zeros(cache.in_shape, dtype=d.dtype)
    if cache.mode == "max":
        rows = cache.argmax // window
        cols = cache.argmax % window
        ii = np.arange(n).reshape(n, 1, 1, 1)
        hh = np.arange(oh).reshape(1, oh, 1, 1)
        ww = np.arange(ow).reshape(1, 1, ow, 1)
        cc = np.arange(c).reshape(1, 1, 1, c)
        np.add.at(dx, (ii, hh * stride + rows, ww * stride + cols, cc), d)
    else:
        per = d / (window * window)
        for p in range(window):
            for q in range(window):
                dx[:, p:p + stride * (oh - 1) + 1:stride,
                   q:q + stride * (ow - 1) + 1:stride, :] += per
    return dx


def flatten_backward(d: np.ndarray, cache: L.FlattenCache) -> np.ndarray:
    return d.reshape(cache.in_shape)


def _dense_backward_from_pre(d_pre: np.ndarray, cache: L.DenseCache):
    dw = cache.x2d.T @ d_pre
    db = d_pre.sum(axis=0)
    dx2d = d_pre @ cache.weights.T
    return dx2d.reshape(d_pre.shape[0], 1, 1, -1), dw, db


def dense_backward(d: np.ndarray, cache: L.DenseCache):
    """Returns (dx, dweights, dbias), undoing the fused activation first."""
    d2d = d.reshape(d.shape[0], -1)
    if cache.relu_mask is not None:
        d_pre = d2d * cache.relu_mask
    elif cache.probs is not None:
        p = cache.probs
        d_pre = p * (d2d - (d2d * p).sum(axis=1, keepdims=True))
    else:
        d_pre = d2d
    return _dense_backward_from_pre(d_pre, cache)


def relu_backward(d: np.ndarray, cache: L.ReluCache) -> np.ndarray:
    return d * cache.positive


def softmax_backward(d: np.ndarray, cache: L.SoftmaxCache) -> np.ndarray:
    p = cache.probs
    return p * (d - (d * p).sum(axis=-1, keepdims=True))


def dropout_backward(d: np.ndarray, cache: L.DropoutCache) -> np.ndarray:
    return d if cache.mask is None else d * cache.mask


def batchnorm_backward(d: np.ndarray, cache: L.BatchNormCache):
    """Returns (dx, dgamma, dbeta). Handles both batch-stat and running-stat
    forwards; the latter treats mean/var as constants."""
    x_hat, inv_std, gamma, count = cache
    dgamma = (d * x_hat).sum(axis=(0, 1, 2))
    dbeta = d.sum(axis=(0, 1, 2))
    if count is None:
        dx = d * (gamma * inv_std)
    else:
        dx = (gamma * inv_std / count) * (count * d - dbeta - x_hat * dgamma)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# Whole-model objective and gradients.
# ---------------------------------------------------------------------------

def loss_and_gradients(spec: M.ModelSpec, params: M.ParamStore, x: Tensor4,
                       labels: np.ndarray, l2_strength: float = 0.0,
                       l1_strength: float = 0.0,
                       rng: np.random.Generator | None = None,
                       update_stats: bool = True):
    """Training-mode forward plus full backward.

    Returns (loss, grads, probs) where loss is the regularized objective,
    grads covers exactly the trainable parameters, and probs is the softmax
    output. The cross-entropy/softmax pair is differentiated jointly as
    (probs - labels) / batch through the predictor's pre-activation.
    """
    last = spec.layers[-1] if spec.layers else None
    if last is None or last.kind != "dense" or last.activation != "softmax":
        raise ConfigError("training needs a dense softmax predictor as the final layer")
    probs, caches = M.forward_with_caches(spec, params, x, training=True, rng=rng,
                                          update_stats=update_stats)
    y = _as_rows(labels)
    loss = cross_entropy_loss(probs, y)
    penalized = [n for n in M.penalized_weight_names(spec)]
    if l2_strength:
        loss += L.l2_penalty((params[n] for n in penalized), l2_strength)
    if l1_strength:
        loss += L.l1_penalty((params[n] for n in penalized), l1_strength)

    grads: GradStore = {}
    trainable_idx = [i for i, layer in enumerate(spec.layers)
                     if layer.trainable and layer.kind in ("conv", "dense", "batchnorm")]
    if not trainable_idx:
        return loss, grads, probs
    lowest = trainable_idx[0]

    d_pre = (_as_rows(probs) - y) / y.shape[0]
    d, dw, db = _dense_backward_from_pre(d_pre.astype(probs.dtype), caches[-1][1])
    if last.trainable:
        grads[f"{last.name}.weights"] = dw
        grads[f"{last.name}.bias"] = db

    for idx in range(len(spec.layers) - 2, -1, -1):
        if idx < lowest:
            break
        layer, cache = caches[idx]
        if layer.kind == "conv":
            d, dw, db = conv2d_backward(d, cache)
            if layer.trainable:
                grads[f"{layer.name}.filters"] = dw
                grads[f"{layer.name}.bias"] = db
        elif layer.kind == "pool":
            d = pool_backward(d, cache)
        elif layer.kind == "flatten":
            d = flatten_backward(d, cache)
        elif layer.kind == "dense":
            d, dw, db = dense_backward(d, cache)
            if layer.trainable:
                grads[f"{layer.name}.weights"] = dw
                grads[f"{layer.name}.bias"] = db
        elif layer.kind == "dropout":
            d = dropout_backward(d, cache)
        else:
            d, dgamma, dbeta = batchnorm_backward(d, cache)
            if layer.trainable:
                grads[f"{layer.name}.gamma"] = dgamma
                grads[f"{layer.name}.beta"] = dbeta

    if l2_strength or l1_strength:
        for name in penalized:
            if name in grads:
                w = params[name]
                if l2_strength:
                    grads[name] = grads[name] + 2.0 * l2_strength * w
                if l1_strength:
                    grads[name] = grads[name] + l1_strength * np.sign(w)
    return loss, grads, probs


def backward(spec: M.ModelSpec, params: M.ParamStore, x: Tensor4,
             labels: np.ndarray, l2_strength: float = 0.0,
             l1_strength: float = 0.0,
             rng: np.random.Generator | None = None) -> GradStore:
    """Gradients of the regularized objective for every trainable parameter."""
    _, grads, _ = loss_and_gradients(spec, params, x, labels, l2_strength,
                                     l1_strength, rng)
    return grads


# ---------------------------------------------------------------------------
# Optimizer.
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Nesterov-momentum SGD state with a step-decay learning-rate schedule."""

    learning_rate: float = 0.01
    momentum: float = 0.9
    decay_factor: float = 0.5
    decay_interval: int = 20
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ConfigError(f"decay factor must be in (0, 1], got {self.decay_factor}")
        if self.decay_interval < 1:
            raise ConfigError(f"decay interval must be >= 1, got {self.decay_interval}")


def scheduled_lr(state: OptimizerState, epoch: int) -> float:
    """Step decay: the base rate is multiplied by decay_factor once per
    completed decay_interval. Epochs are 1-based."""
    if epoch < 1:
        raise ValueError(f"epoch must be >= 1, got {epoch}")
    return state.learning_rate * state.decay_factor ** ((epoch - 1) // state.decay_interval)


def lookahead_params(params: M.ParamStore, state: OptimizerState,
                     trainable_names) -> M.ParamStore:
    """The Nesterov evaluation point theta + mu*v.

    Parameters without velocity (including running statistics and frozen
    tensors) are shared by reference, so in-place stat updates during the
    lookahead forward land in the caller's store.
    """
    shifted = M.ParamStore()
    trainable = set(trainable_names)
    for name, arr in params.items():
        v = state.velocity.get(name)
        if name in trainable and v is not None and state.momentum != 0.0:
            shifted[name] = arr + state.momentum * v
        else:
            shifted[name] = arr
    return shifted


def sgd_nesterov_step(params: M.ParamStore, grads: GradStore,
                      state: OptimizerState, lr: float | None = None) -> None:
    """v <- mu*v - lr*grad; theta <- theta + v, applied in place.

    `grads` must hold gradients evaluated at the lookahead point (see
    `lookahead_params`); only parameters present in `grads` move.
    """
    if lr is None:
        lr = state.learning_rate
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"gradient for {name!r} is not finite")
        if g.shape != params[name].shape:
            raise ShapeError(
                f"gradient for {name!r} has shape {g.shape}, parameter is {params[name].shape}"
            )
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(params[name])
            state.velocity[name] = v
        v *= state.momentum
        v -= lr * g.astype(v.dtype, copy=False)
        params[name] = params[name] + v


# ---------------------------------------------------------------------------
# Training loop.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    decay_factor: float = 0.5
    decay_interval: int = 20
    patience: int | None = 5  # None disables early stopping
    l2_strength: float = 0.0
    l1_strength: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.patience is not None and self.patience < 0:
            raise ConfigError(f"patience must be >= 0, got {self.patience}")
        if self.l2_strength < 0 or self.l1_strength < 0:
            raise ConfigError("penalty strengths must be >= 0")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    train_top1: float
    val_loss: float
    val_top1: float
    lr: float


@dataclass
class EarlyStopState:
    """Tracks the best validation metric and the snapshot taken at it."""

    patience: int | None
    best_val_metric: float = -math.inf
    best_epoch: int = 0
    snapshot: M.ParamStore | None = None
    epochs_since_best: int = 0

    def update(self, epoch: int, metric: float, params: M.ParamStore) -> bool:
        """Record this epoch; returns True when training should stop."""
        if metric > self.best_val_metric:
            self.best_val_metric = metric
            self.best_epoch = epoch
            self.snapshot = params.copy()
            self.epochs_since_best = 0
            return False
        self.epochs_since_best += 1
        return self.patience is not None and self.epochs_since_best > self.patience


@dataclass
class TrainResult:
    params: M.ParamStore  # snapshot from the best validation epoch
    history: list[EpochStats]
    best_epoch: int
    best_val_top1: float
    stopped_early: bool


def _top1_hits(probs, labels: np.ndarray) -> int:
    p = _as_rows(probs)
    return int((p.argmax(axis=1) == labels.argmax(axis=1)).sum())


def _memory_batches(x: Tensor4, labels: np.ndarray, batch_size: int,
                    order: np.ndarray | None):
    n = x.i
    if labels.shape[0] != n:
        raise ShapeError(f"{n} images but {labels.shape[0]} label rows")
    idx = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        take = idx[start:start + batch_size]
        yield Tensor4(x.data[take]), labels[take]


def _train_batches(train_set, epoch: int, config: TrainConfig):
    if callable(train_set):
        yield from train_set(epoch)
        return
    x, labels = train_set
    order = make_rng(config.seed, "shuffle", epoch).permutation(x.i)
    yield from _memory_batches(x, labels, config.batch_size, order)


def _val_batches(val_set, config: TrainConfig):
    if callable(val_set):
        yield from val_set()
        return
    x, labels = val_set
    yield from _memory_batches(x, labels, config.batch_size, None)


def evaluate_loss_top1(spec: M.ModelSpec, params: M.ParamStore, batches):
    """Inference-mode mean cross-entropy and top-1 accuracy over batches."""
    loss_sum = 0.0
    hits = 0
    count = 0
    for xb, yb in batches:
        probs = M.forward(spec, params, xb)
        y = _as_rows(yb)
        loss_sum += cross_entropy_loss(probs, y) * xb.i
        hits += _top1_hits(probs, y)
        count += xb.i
    if count == 0:
        return math.nan, math.nan
    return loss_sum / count, hits / count


def train(spec: M.ModelSpec, params: M.ParamStore, train_set, val_set,
          config: TrainConfig = TrainConfig()) -> TrainResult:
    """Run the full optimization loop.

    `train_set` is either an in-memory pair (Tensor4, one-hot labels), which
    the loop shuffles and slices into `config.batch_size` mini-batches per
    epoch, or a callable `epoch -> iterable of (Tensor4, labels)` batches
    (the hook data pipelines use to inject augmentation). `val_set` is a pair
    or a zero-argument callable; pass None to skip validation, which then
    requires patience=None.

    `params` is updated in place epoch by epoch; the returned result carries
    the snapshot from the best validation epoch (final params when there is
    no validation). Identical seeds and data reproduce history and parameters
    bit for bit.
    """
    if val_set is None and config.patience is not None:
        raise ConfigError("early stopping needs a validation set (or set patience=None)")
    opt = OptimizerState(learning_rate=config.learning_rate, momentum=config.momentum,
                         decay_factor=config.decay_factor,
                         decay_interval=config.decay_interval)
    trainable = M.trainable_param_names(spec)
    stopper = EarlyStopState(patience=config.patience)
    history: list[EpochStats] = []
    stopped_early = False

    for epoch in range(1, config.epochs + 1):
        lr = scheduled_lr(opt, epoch)
        loss_sum = 0.0
        hits = 0
        count = 0
        batch_index = 0
        for xb, yb in _train_batches(train_set, epoch, config):
            rng = make_rng(config.seed, "dropout", epoch, batch_index)
            shifted = lookahead_params(params, opt, trainable)
            loss, grads, probs = loss_and_gradients(
                spec, shifted, xb, yb,
                l2_strength=config.l2_strength, l1_strength=config.l1_strength,
                rng=rng)
            loss_sum += loss * xb.i
            hits += _top1_hits(probs, _as_rows(yb))
            count += xb.i
            if grads:
                sgd_nesterov_step(params, grads, opt, lr)
            batch_index += 1
        if count == 0:
            raise ConfigError("training set produced no batches")
        train_loss, train_top1 = loss_sum / count, hits / count

        if val_set is None:
            val_loss = val_top1 = math.nan
        else:
            val_loss, val_top1 = evaluate_loss_top1(spec, params, _val_batches(val_set, config))
            if math.isnan(val_top1) and config.patience is not None:
                raise ConfigError("early stopping needs at least one validation sample")
        history.append(EpochStats(epoch, train_loss, train_top1, val_loss, val_top1, lr))

        if val_set is None:
            continue
        if stopper.update(epoch, val_top1, params):
            stopped_early = True
            break

    if stopper.snapshot is None:
        best_params = params.copy()
        best_epoch = history[-1].epoch
        best_val = history[-1].val_top1
    else:
        best_params = stopper.snapshot
        best_epoch = stopper.best_epoch
        best_val = stopper.best_val_metric
    return TrainResult(best_params, history, best_epoch, best_val, stopped_early)


# ---------------------------------------------------------------------------
# History CSV.
# ---------------------------------------------------------------------------

HISTORY_HEADER = "epoch,train_loss,train_top1,val_loss,val_top1,lr"


def history_to_csv(history) -> str:
    lines = [HISTORY_HEADER]
    for row in history:
        lines.append(f"{row.epoch},{row.train_loss!r},{row.train_top1!r},"
                     f"{row.val_loss!r},{row.val_top1!r},{row.lr!r}")
    return "\n".join(lines) + "\n"


def history_from_csv(text: str) -> list[EpochStats]:
    from .errors import DataFormatError

    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != HISTORY_HEADER:
        raise DataFormatError(f"history CSV must start with {HISTORY_HEADER!r}")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 6:
            raise DataFormatError(f"line {lineno}: expected 6 columns, got {len(parts)}")
        try:
            out.append(EpochStats(int(parts[0]), *(float(p) for p in parts[1:])))
        except ValueError:
            raise DataFormatError(f"line {lineno}: bad number in {line!r}") from None
    return out


def write_history_csv(path, history) -> None:
    from .tensor import atomic_write_bytes

    atomic_write_bytes(path, history_to_csv(history).encode("utf-8"))


def read_history_csv(path) -> list[EpochStats]:
    with open(path, "rb") as fh:
        return history_from_csv(fh.read().decode("utf-8"))


# ---------------------------------------------------------------------------
# Fit diagnostics.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitThresholds:
    """Error-rate cutoffs: low/high bounds on train error and the allowed
    train/validation gap."""

    low_error: float = 0.10
    high_error: float = 0.30
    gap: float = 0.15

    def __post_init__(self):
        if not 0.0 <= self.low_error <= self.high_error <= 1.0:
            raise ConfigError(
                f"need 0 <= low_error <= high_error <= 1, got "
                f"{self.low_error}, {self.high_error}"
            )
        if self.gap < 0:
            raise ConfigError(f"gap threshold must be >= 0, got {self.gap}")


@dataclass(frozen=True)
class FitVerdict:
    label: str  # underfitting | overfitting | good_fit | inconclusive
    train_error: float
    val_error: float
    gap: float


def diagnose_fit(history, thresholds: FitThresholds = FitThresholds()) -> FitVerdict:
    """Classify the final epoch's error pattern.

    High train error means the model never fit (underfitting); low train
    error with a large validation gap means it memorized (overfitting); low
    errors on both sides with a small gap is a good fit; anything else is
    inconclusive.
    """
    if not history:
        raise ValueError("history must contain at least one epoch")
    last = history[-1]
    train_error = 1.0 - last.train_top1
    val_error = 1.0 - last.val_top1
    gap = val_error - train_error
    t = thresholds
    if train_error > t.high_error:
        label = "underfitting"
    elif train_error <= t.low_error and gap > t.gap:
        label = "overfitting"
    elif train_error <= t.low_error and val_error <= t.low_error and gap <= t.gap:
        label = "good_fit"
    else:
        label = "inconclusive"
    return FitVerdict(label, train_error, val_error, gap)
