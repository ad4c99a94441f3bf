"""Dense feed-forward binary classifier in NumPy.

ReLU hidden layers, a single sigmoid output unit, inverted dropout after
every hidden activation, Adam with coupled L2 weight decay, a
reduce-on-plateau learning-rate schedule and early stopping on the
validation loss.  Parameters are kept as a flat list
``[W1, b1, W2, b2, ...]`` with ``W`` shaped ``(fan_in, fan_out)``.
"""
import itertools
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import checkpoint
from .dataio import Dataset
from .errors import DimensionError, InsufficientData, NumericalError, SearchFailed

PROB_CLAMP = 1e-7
MIN_DECREASING_WIDTH = 16


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_dim: int = 128
    n_hidden_layers: int = 2
    decreasing_dims: bool = False
    dropout_rate: float = 0.0
    weight_decay: float = 0.0
    learning_rate: float = 1e-4
    scheduler_factor: float = 0.5
    max_epochs: int = 500
    patience_early_stop: int = 20
    patience_scheduler: int = 10
    batch_size: int = 128
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_dim < 1 or self.n_hidden_layers < 1:
            raise ValueError("input_dim, hidden_dim and n_hidden_layers must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.weight_decay < 0 or self.learning_rate < 0:
            raise ValueError("weight_decay and learning_rate must be non-negative")
        if not 0.0 < self.scheduler_factor <= 1.0:
            raise ValueError("scheduler_factor must lie in (0, 1]")
        if min(self.max_epochs, self.patience_early_stop, self.patience_scheduler) < 0:
            raise ValueError("epoch budgets and patiences must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def hidden_widths(self):
        if not self.decreasing_dims:
            return [self.hidden_dim] * self.n_hidden_layers
        floor = min(MIN_DECREASING_WIDTH, self.hidden_dim)
        return [max(self.hidden_dim >> i, floor) for i in range(self.n_hidden_layers)]

    def layer_shapes(self):
        dims = [self.input_dim, *self.hidden_widths(), 1]
        return list(zip(dims[:-1], dims[1:]))

    def replace(self, **changes):
        return replace(self, **changes)

    def to_mapping(self):
        return asdict(self)

    @classmethod
    def from_mapping(cls, block):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in block.items() if k in names})


def default_mlp_grid(input_dim, **fixed):
    """Exhaustive grid over the published hyperparameter ranges.

    Any keyword that names a tuned field replaces that axis (pass a list);
    other keywords are fixed settings shared by every candidate.
    """
    axes = {
        "hidden_dim": [64, 128, 256, 512],
        "n_hidden_layers": [2, 3, 4, 5],
        "dropout_rate": [0.0, 0.25, 0.5, 0.75],
        "weight_decay": [0.0, 5e-4],
        "decreasing_dims": [False, True],
        "scheduler_factor": [0.1, 0.5],
    }
    for key in list(fixed):
        if key in axes:
            value = fixed.pop(key)
            axes[key] = list(value) if isinstance(value, (list, tuple)) else [value]
    keys = list(axes)
    return [
        MlpConfig(input_dim=input_dim, **dict(zip(keys, combo)), **fixed)
        for combo in itertools.product(*(axes[k] for k in keys))
    ]


# -- elementwise helpers --------------------------------------------------------

def sigmoid(z):
    z = np.asarray(z)
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logit(p, eps=0.0):
    p = np.asarray(p, dtype=np.float64)
    if eps:
        p = np.clip(p, eps, 1.0 - eps)
    with np.errstate(divide="ignore"):
        return np.log(p) - np.log1p(-p)


def bce_loss(probs, labels):
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    p = np.asarray(probs, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.size == 0:
        raise InsufficientData("BCE of an empty sample")
    if p.shape != y.shape:
        raise DimensionError(f"{p.size} probabilities for {y.size} labels")
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def _logit_bce(z, y):
    # softplus(z) - y*z, the unclamped BCE of sigmoid(z)
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


# -- parameters -----------------------------------------------------------------

def init_params(config, rng):
    """He-uniform weights scaled by fan-in, zero biases."""
    dtype = np.dtype(config.dtype)
    params = []
    for fan_in, fan_out in config.layer_shapes():
        limit = np.sqrt(6.0 / fan_in)
        params.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype))
        params.append(np.zeros(fan_out, dtype=dtype))
    return params


def sample_masks(config, n, rng, shared=False):
    """Inverted-dropout masks for each hidden layer, or ``None`` when disabled.

    With ``shared=True`` one mask per layer is broadcast over the batch.
    """
    p = config.dropout_rate
    if p == 0.0:
        return None
    rows = 1 if shared else n
    dtype = np.dtype(config.dtype)
    return [
        (rng.random((rows, w)) >= p).astype(dtype) / dtype.type(1.0 - p)
        for w in config.hidden_widths()
    ]


def forward_pass(params, X, masks=None):
    """Return the output logits and the activation cache used by backprop."""
    n_layers = len(params) // 2
    h = X
    cache = []
    for k in range(n_layers):
        W, b = params[2 * k], params[2 * k + 1]
        if h.shape[-1] != W.shape[0]:
            raise DimensionError(f"layer {k} expects {W.shape[0]} inputs, got {h.shape[-1]}")
        z = h @ W + b
        if k == n_layers - 1:
            cache.append((h, None, None))
            return z[:, 0], cache
        a = np.maximum(z, 0)
        mask = None if masks is None else masks[k]
        cache.append((h, z, mask))
        h = a if mask is None else a * mask
    raise DimensionError("network has no layers")


def backward_pass(params, cache, logits, y, weight_decay=0.0):
    """Gradients of ``mean BCE(sigmoid(logits), y) + weight_decay/2 * sum(theta**2)``."""
    n = logits.shape[0]
    grads = [None] * len(params)
    delta = ((sigmoid(logits) - y) / n)[:, None].astype(logits.dtype)
    for k in range(len(params) // 2 - 1, -1, -1):
        h, _, _ = cache[k]
        W = params[2 * k]
        grads[2 * k] = h.T @ delta
        grads[2 * k + 1] = delta.sum(axis=0)
        if k == 0:
            break
        upstream = delta @ W.T
        _, z_prev, mask_prev = cache[k - 1]
        if mask_prev is not None:
            upstream = upstream * mask_prev
        delta = upstream * (z_prev > 0)
    if weight_decay:
        grads = [g + weight_decay * p for g, p in zip(grads, params)]
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient")
    return grads


def loss_and_grads(params, X, y, masks=None, weight_decay=0.0):
    logits, cache = forward_pass(params, X, masks)
    loss = _logit_bce(logits, y)
    if weight_decay:
        loss += 0.5 * weight_decay * float(sum(np.sum(p.astype(np.float64) ** 2) for p in params))
    return loss, backward_pass(params, cache, logits, y, weight_decay)


# -- trained model ----------------------------------------------------------------

@dataclass(frozen=True)
class TrainedMlp:
    params: tuple = field(repr=False)
    config: MlpConfig
    best_epoch: int = 0
    valid_bce_at_best: float = float("nan")
    history: tuple = field(default=(), repr=False)

    @property
    def weights(self):
        return self.params[0::2]

    @property
    def biases(self):
        return self.params[1::2]

    def _as_input(self, X):
        X = np.asarray(X)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.config.input_dim:
            raise DimensionError(f"expected {self.config.input_dim} features, got {X.shape[1]}")
        return X.astype(self.config.dtype, copy=False)

    def predict_logit(self, X):
        logits, _ = forward_pass(list(self.params), self._as_input(X))
        return logits.astype(np.float64)

    def predict_proba(self, X):
        return sigmoid(self.predict_logit(X))

    def score(self, X):
        """Calibration score: the raw output logit."""
        return self.predict_logit(X)

    def to_checkpoint(self):
        return checkpoint.dumps("mlp", {
            "config": self.config.to_mapping(),
            "params": [checkpoint.encode_array(p) for p in self.params],
            "best_epoch": self.best_epoch,
            "valid_bce_at_best": self.valid_bce_at_best,
            "history": list(self.history),
        })

    @classmethod
    def from_checkpoint(cls, text):
        doc = checkpoint.loads(text, "mlp") if isinstance(text, str) else text
        return cls(
            params=tuple(checkpoint.decode_array(a) for a in doc["params"]),
            config=MlpConfig.from_mapping(doc["config"]),
            best_epoch=doc["best_epoch"],
            valid_bce_at_best=doc["valid_bce_at_best"],
            history=tuple(doc["history"]),
        )


def forward(model, x, mode="eval", dropout_rng=None):
    """Forward one fingerprint (or a batch) through ``model``.

    Returns ``(logit, prob)``; scalars for a single fingerprint.  Train mode
    draws fresh dropout masks from ``dropout_rng``.
    """
    X = model._as_input(x)
    masks = None
    if mode == "train":
        if model.config.dropout_rate > 0 and dropout_rng is None:
            raise ValueError("train-mode forward with dropout needs an RNG stream")
        if dropout_rng is not None:
            masks = sample_masks(model.config, X.shape[0], dropout_rng)
    elif mode != "eval":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    logits, _ = forward_pass(list(model.params), X, masks)
    logits = logits.astype(np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericalError("non-finite network output")
    probs = sigmoid(logits)
    if np.ndim(x) == 1:
        return float(logits[0]), float(probs[0])
    return logits, probs


def backward(model, X, y, masks=None):
    """Exact gradients of the mean-batch training loss for ``model``'s parameters."""
    X = model._as_input(X)
    y = np.asarray(y, dtype=X.dtype).ravel()
    if X.shape[0] == 0:
        raise InsufficientData("empty batch")
    _, grads = loss_and_grads(list(model.params), X, y, masks, model.config.weight_decay)
    return grads


# -- optimisation -------------------------------------------------------------------

class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


class PlateauSchedule:
    """Early stopping plus reduce-on-plateau bookkeeping on a loss to minimise."""

    def __init__(self, initial_loss, patience_early_stop, patience_scheduler, factor):
        self.best = initial_loss
        self.best_epoch = 0
        self.bad_epochs = 0
        self.since_reduce = 0
        self.patience_early_stop = patience_early_stop
        self.patience_scheduler = patience_scheduler
        self.factor = factor

    def update(self, epoch, loss, optimizer):
        """Record one epoch; returns ``(improved, stop)``."""
        if loss < self.best:
            self.best, self.best_epoch = loss, epoch
            self.bad_epochs = self.since_reduce = 0
            return True, False
        self.bad_epochs += 1
        self.since_reduce += 1
        if self.since_reduce >= self.patience_scheduler:
            optimizer.lr *= self.factor
            self.since_reduce = 0
        return False, self.bad_epochs >= self.patience_early_stop


def as_xy(data, dtype=np.float64):
    if isinstance(data, Dataset):
        return data.fps.astype(dtype), data.labels.astype(dtype)
    X, y = data
    return np.asarray(X).astype(dtype), np.asarray(y).astype(dtype).ravel()


def iterate_minibatches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _check_valid_loss(loss):
    if not np.isfinite(loss):
        raise NumericalError(f"validation loss is {loss}")
    return loss


def train_mlp(train, valid, config):
    """Fit an MLP with Adam, keeping the parameters of the best validation epoch.

    Epoch 0 is the initialisation; the returned model is the best of
    epochs ``0..stop``.
    """
    X, y = as_xy(train, config.dtype)
    Xv, yv = as_xy(valid, config.dtype)
    if len(X) == 0 or len(Xv) == 0:
        raise InsufficientData("training and validation sets must be non-empty")
    if X.shape[1] != config.input_dim or Xv.shape[1] != config.input_dim:
        raise DimensionError(f"config.input_dim={config.input_dim} but data has {X.shape[1]} features")
    rng = np.random.default_rng(config.seed)
    params = init_params(config, rng)

    def valid_bce():
        logits, _ = forward_pass(params, Xv)
        return _check_valid_loss(bce_loss(sigmoid(logits.astype(np.float64)), yv))

    optimizer = Adam(params, config.learning_rate)
    schedule = PlateauSchedule(
        valid_bce(), config.patience_early_stop, config.patience_scheduler, config.scheduler_factor
    )
    best_params = [p.copy() for p in params]
    history = [schedule.best]
    for epoch in range(1, config.max_epochs + 1):
        for idx in iterate_minibatches(len(X), config.batch_size, rng):
            masks = sample_masks(config, len(idx), rng)
            _, grads = loss_and_grads(params, X[idx], y[idx], masks, config.weight_decay)
            optimizer.step(params, grads)
        loss = valid_bce()
        history.append(loss)
        improved, stop = schedule.update(epoch, loss, optimizer)
        if improved:
            best_params = [p.copy() for p in params]
        if stop:
            break
    for p in best_params:
        p.flags.writeable = False
    return TrainedMlp(tuple(best_params), config, schedule.best_epoch, schedule.best, tuple(history))


# -- model selection -------------------------------------------------------------------

@dataclass
class GridResult:
    best_config: object
    best_model: object
    best_index: int
    scores: list
    failures: dict


def _fit_candidate(config, train, valid):
    from .forest import ForestConfig, train_forest

    if isinstance(config, ForestConfig):
        model = train_forest(train, config)
    elif isinstance(config, MlpConfig):
        model = train_mlp(train, valid, config)
    else:
        raise TypeError(f"no trainer for {type(config).__name__}")
    Xv, yv = as_xy(valid)
    return model, bce_loss(model.predict_proba(Xv), yv)


def grid_search(space, train, valid, tie_tol=1e-12):
    """Train every candidate and keep the one with the lowest validation BCE.

    A candidate must beat the incumbent by more than ``tie_tol`` to replace
    it, so ties go to the earliest candidate.
    """
    space = list(space)
    if not space:
        raise ValueError("empty search space")
    scores, failures = [], {}
    best = None
    for i, cfg in enumerate(space):
        try:
            model, score = _fit_candidate(cfg, train, valid)
        except (ArithmeticError, ValueError) as exc:
            failures[i] = exc
            scores.append(float("nan"))
            continue
        scores.append(score)
        if not np.isfinite(score):
            failures[i] = NumericalError(f"validation BCE {score}")
            continue
        if best is None or score < best[2] - tie_tol:
            best = (i, model, score)
    if best is None:
        raise SearchFailed(failures)
    i, model, _ = best
    return GridResult(space[i], model, i, scores, failures)
