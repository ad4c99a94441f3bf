"""Train-time uncertainty wrappers around the MLP core.

* :class:`DeepEnsemble` averages the probabilities of independently
  initialised MLPs.
* :class:`McDropoutModel` keeps dropout active at inference and averages
  many stochastic passes.
* :class:`BnnModel` is a Bayes-by-Backprop network with a factorised
  Gaussian posterior ``N(mu, softplus(rho)**2)`` and a fixed zero-mean
  Gaussian prior.
"""
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .errors import EnsembleError, InsufficientData, NumericalError
from .nn import (
    Adam,
    MlpConfig,
    PlateauSchedule,
    TrainedMlp,
    as_xy,
    backward_pass,
    bce_loss,
    forward_pass,
    init_params,
    iterate_minibatches,
    logit,
    sample_masks,
    sigmoid,
    train_mlp,
    _logit_bce,
)
from .seeding import derive_seed

SCORE_CLAMP = 1e-12


def _score_from_prob(p):
    return logit(p, SCORE_CLAMP)


# -- deep ensemble ---------------------------------------------------------------

@dataclass(frozen=True)
class DeepEnsemble:
    members: tuple = field(repr=False)
    config: MlpConfig

    def __post_init__(self):
        if len(self.members) < 1:
            raise ValueError("an ensemble needs at least one member")

    def member_probs(self, X):
        return np.stack([m.predict_proba(X) for m in self.members])

    def predict_proba(self, X):
        return self.member_probs(X).mean(axis=0)

    def score(self, X):
        return _score_from_prob(self.predict_proba(X))

    def to_checkpoint(self):
        return checkpoint.dumps("ensemble", {
            "config": self.config.to_mapping(),
            "members": [json.loads(m.to_checkpoint()) for m in self.members],
        })

    @classmethod
    def from_checkpoint(cls, text):
        doc = checkpoint.loads(text, "ensemble")
        members = tuple(TrainedMlp.from_checkpoint(m) for m in doc["members"])
        return cls(members, MlpConfig.from_mapping(doc["config"]))


def member_seed(master_seed, index):
    return derive_seed(master_seed, "member", index)


def train_ensemble(train, valid, config, n_members=25, master_seed=0, n_jobs=1):
    """Train ``n_members`` MLPs that differ only in their seed.

    Member ``i`` uses ``member_seed(master_seed, i)`` for initialisation,
    batch order and dropout, so the result does not depend on ``n_jobs``.
    """
    if n_members < 1:
        raise ValueError("n_members must be positive")
    configs = [config.replace(seed=member_seed(master_seed, i)) for i in range(n_members)]

    def fit(cfg):
        try:
            return train_mlp(train, valid, cfg)
        except (ArithmeticError, ValueError) as exc:
            return exc

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(fit, configs))
    else:
        results = [fit(cfg) for cfg in configs]
    failures = {i: r for i, r in enumerate(results) if isinstance(r, Exception)}
    if failures:
        raise EnsembleError(failures)
    return DeepEnsemble(tuple(results), config)


def predict_ensemble(ensemble, x):
    p = ensemble.predict_proba(x)
    return float(p[0]) if np.ndim(x) == 1 else p


# -- MC dropout ------------------------------------------------------------------------

@dataclass(frozen=True)
class McDropoutModel:
    base: TrainedMlp
    n_passes: int = 400
    seed: int = 0

    def __post_init__(self):
        if self.n_passes < 1:
            raise ValueError("n_passes must be at least 1")

    def pass_probs(self, X):
        """Probabilities of every stochastic pass, shape ``(n_passes, n)``.

        Each pass samples one dropout mask per layer and applies it to the
        whole batch, so a sample's prediction does not depend on what else
        is in the batch.  The first layer is mask-free and computed once.
        """
        cfg = self.base.config
        X = self.base._as_input(X)
        params = list(self.base.params)
        n_layers = len(params) // 2
        first = np.maximum(X @ params[0] + params[1], 0)
        rng = np.random.default_rng(self.seed)
        out = np.empty((self.n_passes, len(X)))
        for s in range(self.n_passes):
            masks = sample_masks(cfg, 1, rng, shared=True)
            h = first if masks is None else first * masks[0]
            for k in range(1, n_layers):
                z = h @ params[2 * k] + params[2 * k + 1]
                if k == n_layers - 1:
                    h = z
                    break
                h = np.maximum(z, 0)
                if masks is not None:
                    h = h * masks[k]
            out[s] = sigmoid(h[:, 0].astype(np.float64))
        return out

    def predict_proba(self, X):
        if self.base.config.dropout_rate == 0:
            # every pass is the eval forward; skip the rounding of the average
            return self.base.predict_proba(X)
        return self.pass_probs(X).mean(axis=0)

    def score(self, X):
        return _score_from_prob(self.predict_proba(X))

    def to_checkpoint(self):
        return checkpoint.dumps("mc_dropout", {
            "base": json.loads(self.base.to_checkpoint()),
            "n_passes": self.n_passes,
            "seed": self.seed,
        })

    @classmethod
    def from_checkpoint(cls, text):
        doc = checkpoint.loads(text, "mc_dropout")
        return cls(TrainedMlp.from_checkpoint(doc["base"]), doc["n_passes"], doc["seed"])


def predict_mc_dropout(model, x):
    p = model.predict_proba(x)
    return float(p[0]) if np.ndim(x) == 1 else p


# -- Bayes by Backprop ---------------------------------------------------------------

def softplus(x):
    x = np.asarray(x)
    # stable form, several times faster than logaddexp
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


@dataclass(frozen=True)
class BnnModel:
    mu: tuple = field(repr=False)
    rho: tuple = field(repr=False)
    config: MlpConfig
    prior_sigma: float = 1.0
    n_train_samples: int = 1
    n_infer_samples: int = 100
    inference_seed: int = 0
    best_epoch: int = 0
    valid_bce_at_best: float = float("nan")

    @property
    def sigma(self):
        return tuple(softplus(r) for r in self.rho)

    def _as_input(self, X):
        X = np.asarray(X)
        if X.ndim == 1:
            X = X[None, :]
        return X.astype(self.config.dtype, copy=False)

    def sample_probs(self, X, n_samples=None, seed=None):
        """Probabilities under ``n_samples`` posterior weight draws, shape ``(S, n)``."""
        S = self.n_infer_samples if n_samples is None else n_samples
        rng = np.random.default_rng(self.inference_seed if seed is None else seed)
        X = self._as_input(X)
        sig = self.sigma
        out = np.empty((S, len(X)))
        for s in range(S):
            w = [m + sg * rng.standard_normal(m.shape, dtype=m.dtype) for m, sg in zip(self.mu, sig)]
            logits, _ = forward_pass(w, X)
            out[s] = sigmoid(logits.astype(np.float64))
        return out

    def predict_proba(self, X, n_samples=None, seed=None):
        return self.sample_probs(X, n_samples, seed).mean(axis=0)

    def score(self, X):
        return _score_from_prob(self.predict_proba(X))

    def to_checkpoint(self):
        return checkpoint.dumps("bnn", {
            "config": self.config.to_mapping(),
            "mu": [checkpoint.encode_array(a) for a in self.mu],
            "rho": [checkpoint.encode_array(a) for a in self.rho],
            "prior_sigma": self.prior_sigma,
            "n_train_samples": self.n_train_samples,
            "n_infer_samples": self.n_infer_samples,
            "inference_seed": self.inference_seed,
            "best_epoch": self.best_epoch,
            "valid_bce_at_best": self.valid_bce_at_best,
        })

    @classmethod
    def from_checkpoint(cls, text):
        doc = checkpoint.loads(text, "bnn")
        return cls(
            mu=tuple(checkpoint.decode_array(a) for a in doc["mu"]),
            rho=tuple(checkpoint.decode_array(a) for a in doc["rho"]),
            config=MlpConfig.from_mapping(doc["config"]),
            prior_sigma=doc["prior_sigma"],
            n_train_samples=doc["n_train_samples"],
            n_infer_samples=doc["n_infer_samples"],
            inference_seed=doc["inference_seed"],
            best_epoch=doc["best_epoch"],
            valid_bce_at_best=doc["valid_bce_at_best"],
        )


def kl_divergence(mu, rho, prior_sigma):
    """Closed-form ``KL[N(mu, softplus(rho)^2) || N(0, prior_sigma^2)]`` summed over parameters."""
    return _kl_from_sigma(mu, [softplus(np.asarray(r, dtype=np.float64)) for r in rho], prior_sigma)


def _kl_from_sigma(mu, sigma, prior_sigma):
    total = 0.0
    sp2 = prior_sigma ** 2
    for m, s in zip(mu, sigma):
        terms = np.log(prior_sigma / s) + (s * s + m * m) / (2.0 * sp2) - 0.5
        total += float(np.sum(terms, dtype=np.float64))
    return total


def elbo_loss(bnn, X, y, n_batches, rng=None, eps=None):
    """Minibatch ELBO loss and its gradients with respect to ``mu`` and ``rho``.

    ``loss = KL / (n_batches * batch_size) + mean BCE`` under one
    reparameterised weight draw ``w = mu + softplus(rho) * eps``.  Summed
    over an epoch this is the negative ELBO divided by the training-set
    size.  Pass ``eps`` (one array per parameter) to fix the draw.

    Returns ``(loss, grad_mu, grad_rho)``.
    """
    X = bnn._as_input(X)
    y = np.asarray(y, dtype=X.dtype).ravel()
    if len(X) == 0:
        raise InsufficientData("empty batch")
    if n_batches < 1:
        raise ValueError("n_batches must be at least 1")
    if eps is None:
        eps = [rng.standard_normal(m.shape, dtype=m.dtype) for m in bnn.mu]
    sig = [softplus(r) for r in bnn.rho]
    w = [m + s * e for m, s, e in zip(bnn.mu, sig, eps)]
    logits, cache = forward_pass(w, X)
    kl_weight = 1.0 / (n_batches * len(X))
    loss = _logit_bce(logits, y) + kl_weight * _kl_from_sigma(bnn.mu, sig, bnn.prior_sigma)
    if not np.isfinite(loss):
        raise NumericalError(f"ELBO loss is {loss}")
    gw = backward_pass(w, cache, logits, y)
    sp2 = bnn.prior_sigma ** 2
    grad_mu, grad_rho = [], []
    for g, m, r, s, e in zip(gw, bnn.mu, bnn.rho, sig, eps):
        grad_mu.append(g + kl_weight * m / sp2)
        # d softplus(r)/dr = sigmoid(r) = 1 - exp(-softplus(r))
        grad_rho.append((g * e + kl_weight * (s / sp2 - 1.0 / s)) * -np.expm1(-s))
    return loss, grad_mu, grad_rho


def train_bnn(train, valid, config, seed=0, prior_sigma=1.0, n_train_samples=1,
              n_infer_samples=100, rho_init=-3.0):
    """Fit a Bayes-by-Backprop network with Adam on ``(mu, rho)``.

    Architecture, learning rate, schedule and early stopping come from
    ``config``; its dropout and weight decay are not used (the prior is
    the regulariser).  Validation BCE is computed on the predictive mean of
    ``n_infer_samples`` draws from a fixed stream, so epochs are compared
    on the same noise.
    """
    X, y = as_xy(train, config.dtype)
    Xv, yv = as_xy(valid, config.dtype)
    if len(X) == 0 or len(Xv) == 0:
        raise InsufficientData("training and validation sets must be non-empty")
    rng = np.random.default_rng(seed)
    mu = init_params(config, rng)
    rho = [np.full_like(m, rho_init) for m in mu]
    valid_seed = derive_seed(seed, "valid")
    infer_seed = derive_seed(seed, "infer")

    def snapshot(best_epoch=0, best=float("nan")):
        return BnnModel(
            tuple(m.copy() for m in mu), tuple(r.copy() for r in rho), config, prior_sigma,
            n_train_samples, n_infer_samples, infer_seed, best_epoch, best,
        )

    def valid_bce():
        p = snapshot().predict_proba(Xv, n_infer_samples, valid_seed)
        loss = bce_loss(p, yv)
        if not np.isfinite(loss):
            raise NumericalError(f"validation loss is {loss}")
        return loss

    params = mu + rho
    optimizer = Adam(params, config.learning_rate)
    schedule = PlateauSchedule(
        valid_bce(), config.patience_early_stop, config.patience_scheduler, config.scheduler_factor
    )
    best = snapshot()
    n_batches = -(-len(X) // config.batch_size)
    for epoch in range(1, config.max_epochs + 1):
        for idx in iterate_minibatches(len(X), config.batch_size, rng):
            current = BnnModel(tuple(mu), tuple(rho), config, prior_sigma)
            gm = [np.zeros_like(m) for m in mu]
            gr = [np.zeros_like(r) for r in rho]
            for _ in range(n_train_samples):
                _, dm, dr = elbo_loss(current, X[idx], y[idx], n_batches, rng)
                for a, b in zip(gm + gr, dm + dr):
                    a += b / n_train_samples
            optimizer.step(params, gm + gr)
        loss = valid_bce()
        improved, stop = schedule.update(epoch, loss, optimizer)
        if improved:
            best = snapshot()
        if stop:
            break
    result = BnnModel(
        best.mu, best.rho, config, prior_sigma, n_train_samples, n_infer_samples,
        infer_seed, schedule.best_epoch, schedule.best,
    )
    for a in result.mu + result.rho:
        a.flags.writeable = False
    return result


def predict_bnn(bnn, x, n_infer_samples=None, seed=None):
    p = bnn.predict_proba(x, n_infer_samples, seed)
    return float(p[0]) if np.ndim(x) == 1 else p
