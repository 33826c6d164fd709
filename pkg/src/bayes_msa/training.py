"""Loss assembly, Adam, and the epoch loop with early stopping."""

import copy
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import InvalidValue, ShapeError, TrainingDiverged
from .variational import DivergenceKind, DivergenceSpec, divergence

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    validation_fraction: float = 0.2
    divergence: DivergenceSpec = field(default_factory=DivergenceSpec)
    obs_sigma: float = 0.05
    patience: int = 10
    min_delta: float = 1e-6
    seed: int = 0
    divergence_weight: float = 1.0
    dropout: float = 0.0
    max_grad_norm: float | None = None

    def __post_init__(self):
        if isinstance(self.divergence, dict):
            self.divergence = DivergenceSpec(**self.divergence)
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidValue("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0 or not self.obs_sigma > 0:
            raise InvalidValue("learning_rate and obs_sigma must be positive")
        if not 0 < self.validation_fraction < 1:
            raise InvalidValue("validation_fraction must lie in (0, 1)")
        if self.patience < 0 or self.divergence_weight < 0:
            raise InvalidValue("patience and divergence_weight must be >= 0")
        if not 0 <= self.dropout < 1:
            raise InvalidValue("dropout must lie in [0, 1)")

    def to_dict(self):
        d = dict(self.__dict__)
        d["divergence"] = self.divergence.to_dict()
        return d


@dataclass
class TrainReport:
    train_loss: list
    val_loss: list
    epochs_run: int
    stopped_early: bool
    best_epoch: int
    wall_time: float = field(default=0.0, compare=False)


def gaussian_nll(predicted, target, obs_sigma):
    """Independent Gaussian NLL, summed over horizon steps and averaged over rows."""
    target = np.asarray(target, dtype=np.float64)
    if target.ndim == 1:
        target = target[None]
    if predicted.shape != target.shape:
        raise ShapeError(f"prediction {predicted.shape} and target {target.shape} differ")
    if not obs_sigma > 0:
        raise InvalidValue("obs_sigma must be positive")
    rows, H = target.shape
    sq = ad.sum(ad.square(ad.sub(predicted, ad.constant(target))))
    const = H * 0.5 * (LOG_2PI + 2.0 * math.log(obs_sigma))
    return ad.add(ad.scale(sq, 1.0 / (2.0 * obs_sigma ** 2 * rows)), ad.constant(const))


def batch_loss(model, inputs, targets, config, num_batches, rng, train=True):
    """Mean NLL over the batch plus the divergence share of one batch.

    One weight sample is drawn for the whole batch in Bayesian mode.
    """
    if len(inputs) == 0:
        raise InvalidValue("empty batch")
    bayes = model.config.bayesian
    pred = model.forward(inputs, rng if bayes else None,
                         dropout=config.dropout if train else 0.0, dropout_rng=rng)
    loss = gaussian_nll(pred, targets, config.obs_sigma)
    if bayes and config.divergence.kind is not DivergenceKind.NONE and config.divergence_weight > 0:
        div = divergence(model.variational(), None, config.divergence, rng)
        loss = ad.add(loss, ad.scale(div, config.divergence_weight / num_batches))
    return loss


class Adam:
    """Adam with bias-corrected moments (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = {"t": 0,
                      "m": [np.zeros_like(p.value) for p in self.params],
                      "v": [np.zeros_like(p.value) for p in self.params]}

    def step(self, max_grad_norm=None):
        grads = [p.adjoint for p in self.params]
        if max_grad_norm is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > max_grad_norm:
                grads = [g * (max_grad_norm / norm) for g in grads]
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        ad.zero_grad(self.params)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place Adam update of the leaf values in ``params``."""
    if len(params) != len(grads) or len(params) != len(state["m"]):
        raise ShapeError("params, grads and optimizer state differ in length")
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g.shape != p.value.shape or m.shape != p.value.shape:
            raise ShapeError(f"gradient/state shape mismatch for parameter {p.value.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def validation_loss(model, windows, obs_sigma):
    """Mean NLL on ``windows`` at the posterior mean (zero noise)."""
    pred = model.forward(windows.inputs, None)
    return gaussian_nll(pred, windows.targets, obs_sigma).item()


def train(model, train_windows, val_windows, config, log=None):
    """Run up to ``config.epochs`` epochs; restores the best-validation parameters."""
    if len(train_windows) == 0 or len(val_windows) == 0:
        raise InvalidValue("training and validation windows must be nonempty")
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    opt = Adam(params, lr=config.learning_rate)
    n = len(train_windows)
    num_batches = math.ceil(n / config.batch_size)
    best_val, best_state, best_epoch = math.inf, copy.deepcopy(model.state()), 0
    train_hist, val_hist = [], []
    bad, stopped = 0, False
    t0 = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for b in range(num_batches):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            loss = batch_loss(model, train_windows.inputs[idx], train_windows.targets[idx],
                              config, num_batches, rng)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}", epoch)
            opt.zero_grad()
            ad.backward(loss)
            opt.step(config.max_grad_norm)
            total += value * len(idx)
        train_hist.append(total / n)
        val = validation_loss(model, val_windows, config.obs_sigma)
        if not math.isfinite(val):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}", epoch)
        val_hist.append(val)
        if log is not None:
            log(epoch, train_hist[-1], val)
        if val < best_val - config.min_delta:
            best_val, best_state, best_epoch = val, copy.deepcopy(model.state()), epoch
            bad = 0
        else:
            bad += 1
            if config.patience > 0 and bad >= config.patience:
                stopped = True
                break
    model.load_state(best_state)
    return TrainReport(train_hist, val_hist, len(train_hist), stopped, best_epoch,
                       time.perf_counter() - t0)
