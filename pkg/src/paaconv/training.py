"""Mini-batch SGD with classical momentum over blocks."""
import csv
import logging
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, InvalidInputError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 4
    epochs: int = 200
    seed: int = 0
    checkpoint_every: int = 0
    lr_decay: float = 1.0
    lr_decay_every: int = 0

    def validate(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.checkpoint_every < 0 or self.lr_decay_every < 0 or not self.lr_decay > 0:
            raise ConfigError("checkpoint_every, lr_decay_every must be >= 0 and lr_decay > 0")
        return self

    def lr_at(self, epoch):
        """Learning rate for ``epoch`` (0-based) under the optional step decay."""
        if not self.lr_decay_every:
            return self.learning_rate
        return self.learning_rate * self.lr_decay ** (epoch // self.lr_decay_every)


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    train_oa: float


@dataclass
class TrainState:
    net: object
    velocity: OrderedDict
    epoch: int = 0
    history: list = field(default_factory=list)


def sgd_momentum_step(params, velocity, grads, lr, momentum):
    """``v <- momentum * v + g``; ``w <- w - lr * v``, in place. Returns both mappings."""
    for name, g in grads.items():
        w, v = params[name], velocity[name]
        if np.shape(w) != np.shape(g) or np.shape(v) != np.shape(g):
            raise ShapeError(f"shape mismatch for {name}: {np.shape(w)}, {np.shape(v)}, {np.shape(g)}")
        v *= momentum
        v += g
        w -= lr * v
    return params, velocity


def _check_labels(blocks, n_classes):
    for b_i, b in enumerate(blocks):
        if len(b) == 0:
            raise InvalidInputError(f"block {b_i} is empty")
        bad = (b.labels < 0) | (b.labels >= n_classes)
        if bad.any():
            p_i = int(np.flatnonzero(bad)[0])
            raise InvalidInputError(
                f"block {b_i}, point {p_i}: label {b.labels[p_i]} is unlabeled or outside [0, {n_classes})"
            )


def train(net, blocks, cfg, state=None, on_epoch_end=None):
    """Train ``net`` in place on ``blocks``; returns the :class:`TrainState`.

    Blocks are shuffled every epoch by a generator seeded from ``cfg.seed``;
    per-block gradients are summed in batch order and averaged. The loss and
    accuracy recorded per epoch come from the forward passes preceding each
    update. ``on_epoch_end(state)`` runs after every epoch.
    """
    cfg.validate()
    _check_labels(blocks, net.config.n_classes)
    if state is None:
        state = TrainState(net, OrderedDict((k, np.zeros_like(v)) for k, v in net.params.items()))
    rng = np.random.default_rng(cfg.seed)
    for _ in range(state.epoch):
        rng.permutation(len(blocks))
    prepared = [net.prepare(b.positions, b.features) for b in blocks]
    while state.epoch < cfg.epochs:
        lr = cfg.lr_at(state.epoch)
        perm = rng.permutation(len(blocks))
        losses, correct, total = [], 0, 0
        for start in range(0, len(perm), cfg.batch_size):
            batch = perm[start:start + cfg.batch_size]
            acc = None
            for i in batch:
                b = blocks[i]
                loss, grads, logits = net.loss_and_grads(b.positions, b.features, b.labels, prepared[i])
                losses.append(loss)
                correct += int((logits.argmax(axis=1) == b.labels).sum())
                total += len(b)
                if acc is None:
                    acc = grads
                else:
                    for k in acc:
                        acc[k] = acc[k] + grads[k]
            for k in acc:
                acc[k] = acc[k] / len(batch)
            sgd_momentum_step(net.params, state.velocity, acc, lr, cfg.momentum)
        state.epoch += 1
        stats = EpochStats(state.epoch, float(np.mean(losses)), correct / total)
        state.history.append(stats)
        logger.debug("epoch %d loss %.5f oa %.4f", stats.epoch, stats.mean_loss, stats.train_oa)
        if on_epoch_end is not None:
            on_epoch_end(state)
    return state


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "train_oa"])
        for s in history:
            w.writerow([s.epoch, repr(s.mean_loss), repr(s.train_oa)])
