"""RProp/SGD updates and the training loop for the three training strategies.

Strategies:

``scratch``
    every parameter starts random and is optimized.
``init_linear``
    the quantization layers come from an existing linear network (or
    codebook), then everything is optimized.
``retrain_top``
    the quantization layers come from an existing network or codebook and
    stay frozen; only the classifier is optimized.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import bownet
from .bownet import BowNetwork
from .codebook import Codebook

log = logging.getLogger(__name__)

__all__ = [
    "STRATEGIES",
    "RpropState",
    "TrainConfig",
    "TrainLog",
    "TrainingDiverged",
    "rprop_step",
    "sgd_step",
    "initial_network",
    "train",
]

STRATEGIES = ("scratch", "init_linear", "retrain_top")


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite gradient or loss; keeps the last finite network."""

    def __init__(self, message, last_network=None):
        super().__init__(message)
        self.last_network = last_network


@dataclass
class RpropState:
    steps: list
    prev_sign: list
    eta_plus: float = 1.2
    eta_minus: float = 0.5
    step_min: float = 1e-8
    step_max: float = 1.0

    def __post_init__(self):
        if not 0 < self.eta_minus < 1 < self.eta_plus:
            raise ValueError("need 0 < eta_minus < 1 < eta_plus")
        if not 0 < self.step_min <= self.step_max:
            raise ValueError("need 0 < step_min <= step_max")

    @classmethod
    def for_params(cls, params, step_init=0.01, **kw) -> "RpropState":
        return cls([np.full(np.shape(p), float(step_init)) for p in params],
                   [np.zeros(np.shape(p)) for p in params], **kw)


def _check_finite(grads):
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged("diverged: non-finite gradient")


def rprop_step(params, grads, state: RpropState):
    """One iRprop- update. Returns ``(new_params, state)``; ``state`` is updated.

    A sign change shrinks the step and clears the remembered sign, so the
    following iteration neither grows nor shrinks that step.
    """
    if len(params) != len(grads) or len(params) != len(state.steps):
        raise ValueError("parameter, gradient and state lists differ in length")
    _check_finite(grads)
    new = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if np.shape(p) != np.shape(g):
            raise ValueError("gradient shape does not match parameter")
        s = np.sign(g)
        agree = s * state.prev_sign[i]
        step = state.steps[i]
        step = np.where(agree > 0, np.minimum(step * state.eta_plus, state.step_max), step)
        step = np.where(agree < 0, np.maximum(step * state.eta_minus, state.step_min), step)
        state.steps[i] = step
        state.prev_sign[i] = np.where(agree < 0, 0.0, s)
        new.append(p - s * step)
    return new, state


def sgd_step(params, grads, rate):
    if not rate > 0:
        raise ValueError("learning rate must be positive")
    _check_finite(grads)
    return [p - rate * g for p, g in zip(params, grads)]


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "scratch"
    optimizer: str = "rprop"
    learning_rate: float = 0.1
    batch_size: int = None  # None: full batch
    max_epochs: int = 500
    tolerance: float = 1e-6
    patience: int = 5
    seed: int = 0
    step_init: float = 0.01
    eta_plus: float = 1.2
    eta_minus: float = 0.5
    step_min: float = 1e-8
    step_max: float = 1.0
    assignment: str = "soft"

    def __post_init__(self):
        if self.assignment not in ("soft", "hard"):
            raise ValueError("assignment must be 'soft' or 'hard'")
        if self.assignment == "hard" and self.strategy != "retrain_top":
            # argmax has no gradient; only a frozen codebook can use it
            raise ValueError("hard assignment is only trainable with retrain_top")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.optimizer not in ("rprop", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch size must be positive")


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    accuracies: list = field(default_factory=list)
    accepted: list = field(default_factory=list)
    best_epoch: int = 0
    stopped: str = ""

    def lines(self):
        return [f"epoch {k} loss {v:.17g} accuracy {a:.17g}"
                for k, (v, a) in enumerate(zip(self.losses, self.accuracies), start=1)]

    def write(self, path) -> None:
        with open(path, "w") as f:
            for ln in self.lines():
                f.write(ln + "\n")


def initial_network(strategy, dims, num_words, num_classes, map_spec=None,
                    source=None, seed=0) -> BowNetwork:
    """Starting point of :func:`train` for a strategy.

    ``source`` is a :class:`BowNetwork`, a :class:`Codebook` or a list of
    codebooks (one per channel); it is required unless training from scratch.
    The classifier is copied from a source network when its shape fits,
    otherwise drawn at random.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    rng = np.random.default_rng(seed)
    fresh = bownet.init_network(dims, num_words, num_classes, map_spec, rng)
    if strategy == "scratch":
        return fresh
    if source is None:
        raise ValueError(f"strategy {strategy} needs a pre-trained network or codebook")
    if isinstance(source, (Codebook, list, tuple)):
        return bownet.network_from_codebooks(source, num_classes, map_spec,
                                             fresh.out_weights, fresh.out_bias)
    quant = [(W.copy(), b.copy()) for W, b in source.quant]
    same_top = (source.map_spec == map_spec and source.num_classes == num_classes)
    if same_top:
        return BowNetwork(quant, source.out_weights.copy(), source.out_bias.copy(), map_spec)
    return BowNetwork(quant, fresh.out_weights, fresh.out_bias, map_spec)


class _TopOnly:
    """Cached classifier inputs: with frozen codebooks the problem is plain
    multinomial logistic regression on fixed features."""

    def __init__(self, net, seqs, labels, assignment="soft"):
        self.phi = np.array([bownet.map_features(net, bownet.encode_channels(net, s, assignment))
                             for s in seqs])
        self.onehot = np.zeros((len(labels), net.num_classes))
        self.onehot[np.arange(len(labels)), np.asarray(labels) - 1] = 1.0

    def __call__(self, net, idx):
        phi = self.phi[idx]
        z = phi @ net.out_weights + net.out_bias
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        y = self.onehot[idx]
        lval = float(np.mean(-np.log(np.maximum((p * y).sum(axis=1), bownet.LOSS_FLOOR))))
        e = (p - y) / len(idx)
        return lval, [phi.T @ e, e.sum(axis=0)], p


def train(net: BowNetwork, seqs, labels, config: TrainConfig = TrainConfig()):
    """Optimize ``net`` on labelled sequences; returns ``(network, TrainLog)``.

    With full-batch RProp the returned network is the one with the lowest
    training objective seen. Training stops when the best objective improved
    by less than ``tolerance`` (relative) over ``patience`` epochs.
    """
    seqs = list(seqs)
    labels = np.asarray(labels, dtype=np.int64)
    if not seqs or len(seqs) != labels.size:
        raise ValueError("need a non-empty list of sequences with one label each")
    if np.unique(labels).size < 2:
        warnings.warn("training data contains a single class", RuntimeWarning,
                      stacklevel=2)
    frozen = config.strategy == "retrain_top"
    n = len(seqs)
    top = _TopOnly(net, seqs, labels, config.assignment) if frozen else None

    def evaluate(current, idx):
        if frozen:
            lval, g, p = top(current, idx)
            return lval, [None] * (len(params) - 2) + g, p
        grads, lval, p = bownet.batch_gradient(
            current, [(seqs[i], labels[i]) for i in idx], return_posteriors=True)
        return lval, grads.as_list(), p

    params = [p.copy() for p in net.params()]
    first = len(params) - 2 if frozen else 0
    state = RpropState.for_params(params[first:], config.step_init,
                                  eta_plus=config.eta_plus, eta_minus=config.eta_minus,
                                  step_min=config.step_min, step_max=config.step_max)
    rng = np.random.default_rng(config.seed)
    full = np.arange(n)
    tlog = TrainLog()
    best_loss, best_params = np.inf, params
    history = []

    for epoch in range(1, config.max_epochs + 1):
        current = net.with_params(params)
        if config.batch_size is None or config.batch_size >= n:
            batches = [full]
        else:
            order = rng.permutation(n)
            batches = [order[i:i + config.batch_size] for i in range(0, n, config.batch_size)]
        epoch_loss, correct = 0.0, 0
        for bi, idx in enumerate(batches):
            if bi:
                current = net.with_params(params)
            lval, grads, post = evaluate(current, idx)
            if not np.isfinite(lval):
                raise TrainingDiverged("diverged: non-finite loss",
                                       net.with_params(best_params))
            epoch_loss += lval * len(idx)
            correct += int(np.sum(np.argmax(post, axis=1) + 1 == labels[idx]))
            if bi == 0 and len(batches) == 1 and lval <= best_loss:
                best_loss, best_params = lval, [p.copy() for p in params]
                tlog.best_epoch = epoch
            try:
                if config.optimizer == "rprop":
                    upd, state = rprop_step(params[first:], grads[first:], state)
                else:
                    upd = sgd_step(params[first:], grads[first:], config.learning_rate)
            except TrainingDiverged as exc:
                exc.last_network = net.with_params(best_params)
                raise
            if not all(np.all(np.isfinite(u)) for u in upd):
                raise TrainingDiverged("diverged: non-finite parameters",
                                       net.with_params(best_params))
            params = params[:first] + upd
        epoch_loss /= n
        tlog.losses.append(epoch_loss)
        tlog.accuracies.append(correct / n)
        if len(batches) > 1:
            # minibatch mode: keep the latest parameters
            best_loss, best_params, tlog.best_epoch = epoch_loss, params, epoch
        tlog.accepted.append(tlog.best_epoch == epoch)
        history.append(best_loss)
        log.debug("epoch %d loss %.6g accuracy %.4f", epoch, epoch_loss, correct / n)
        if len(history) > config.patience:
            ref = history[-1 - config.patience]
            if ref - history[-1] <= config.tolerance * max(abs(ref), 1e-300):
                tlog.stopped = "converged"
                break
    else:
        tlog.stopped = "max_epochs"
    return net.with_params(best_params), tlog
