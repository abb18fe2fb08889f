"""End-to-end training: loss, Adam with exponential decay, class balancing, augmentation."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import stratified_split
from .errors import ShapeError, TrainingError
from .model import NcaParams, forward, init_params, rollout_logits

log = logging.getLogger(__name__)


# --- loss ------------------------------------------------------------------

def cross_entropy(logits, label):
    """``-log softmax(logits)[label]`` with max-subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < z.shape[-1]:
        raise ShapeError(f"label {label} outside [0, {z.shape[-1]})")
    shifted = z - z.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[label])


LOSSES = {"softmax": ad.softmax_cross_entropy, "sigmoid": ad.sigmoid_cross_entropy}


# --- optimizer -------------------------------------------------------------

@dataclass
class AdamState:
    lr0: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.9999
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def lr(self):
        return lr_at(self.t, self.lr0, self.decay)


def lr_at(t, lr0=4e-4, decay=0.9999):
    """Learning rate after ``t`` optimizer steps (decayed once per step)."""
    if t < 0:
        raise ValueError("t must be >= 0")
    return lr0 * decay ** t


def adam_step(params, grads, state):
    """One bias-corrected Adam update; returns ``(new_params, state)``.

    ``params``/``grads`` are dicts of arrays (or :class:`NcaParams`). The step
    size used is ``lr_at(state.t)`` before ``t`` is incremented.
    """
    as_params = isinstance(params, NcaParams)
    p = params.as_dict() if as_params else params
    g = grads.as_dict() if isinstance(grads, NcaParams) else grads
    lr = state.lr()
    state.t += 1
    c1 = 1 - state.beta1 ** state.t
    c2 = 1 - state.beta2 ** state.t
    new = {}
    for name, value in p.items():
        gi = g[name]
        if gi.shape != value.shape:
            raise ShapeError(f"gradient for {name} has shape {gi.shape}, parameter {value.shape}")
        m = state.m.get(name, np.zeros_like(value))
        v = state.v.get(name, np.zeros_like(value))
        m = state.beta1 * m + (1 - state.beta1) * gi
        v = state.beta2 * v + (1 - state.beta2) * gi * gi
        state.m[name], state.v[name] = m, v
        step = (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(value.dtype)
        new[name] = value - step
    return (NcaParams.from_dict(new) if as_params else new), state


# --- sampling & augmentation -----------------------------------------------

def balance_target(counts):
    """Per-class quota: the mean class count, rounded half up."""
    return int(math.floor(np.mean(counts) + 0.5))


def balanced_epoch(labels, rng, num_classes=None):
    """Indices for one class-balanced epoch.

    Every class contributes exactly ``balance_target`` samples: classes
    above it are undersampled without replacement, classes below it are
    oversampled with replacement. The result is shuffled.
    """
    labels = np.asarray(labels)
    classes = np.arange(num_classes) if num_classes is not None else np.unique(labels)
    pools = [np.flatnonzero(labels == c) for c in classes]
    empty = [int(c) for c, pool in zip(classes, pools) if len(pool) == 0]
    if empty or len(pools) == 0:
        raise ValueError(f"cannot balance: classes without samples: {empty}")
    quota = balance_target([len(pool) for pool in pools])
    picks = [rng.choice(pool, size=quota, replace=len(pool) < quota) for pool in pools]
    return rng.permutation(np.concatenate(picks))


def dihedral(image, rotation, flip):
    """Rotate clockwise by ``rotation`` quarter turns, then mirror left-right if ``flip``."""
    out = np.rot90(image, -rotation, axes=(0, 1))
    if flip:
        out = out[:, ::-1]
    return out


def augment(image, rng):
    """Uniformly random element of the 8 square symmetries."""
    image = np.asarray(image)
    if image.shape[0] != image.shape[1]:
        raise ShapeError(f"augmentation needs a square image, got {image.shape[:2]}")
    choice = int(rng.integers(8))
    return np.ascontiguousarray(dihedral(image, choice % 4, choice >= 4))


# --- fitting ---------------------------------------------------------------

@dataclass
class TrainPlan:
    batch_size: int = 16
    epochs: int = 32
    lr0: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.9999
    loss: str = "softmax"
    augment: bool = True
    balance: bool = True
    val_fraction: float = 0.15

    def optimizer(self):
        return AdamState(self.lr0, self.beta1, self.beta2, self.eps, self.decay)


@dataclass
class FitResult:
    params: NcaParams
    history: list
    optimizer: AdamState

    def metrics_lines(self):
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.history)


def _sample_rng(seed, epoch, position):
    return np.random.default_rng([seed, epoch, position])


def sample_gradients(image, label, params, config, rng, loss="softmax"):
    """Loss and parameter gradients for a single image on its own tape."""
    fw = forward(image, params, config, rng=rng)
    value = LOSSES[loss](fw.logits, int(label))
    grads = fw.tape.backward(value)
    return float(value.value), grads, fw.logits.value


def evaluate_loss(dataset, params, config, seed, loss="softmax"):
    """Mean loss and accuracy with per-sample masks drawn from ``seed``."""
    if len(dataset) == 0:
        return float("nan"), float("nan")
    losses, hits = [], 0
    for i, (img, y) in enumerate(zip(dataset.images, dataset.labels)):
        z = rollout_logits(img, params, config, rng=np.random.default_rng([seed, i]))
        tape = ad.Tape(enabled=False)
        losses.append(float(LOSSES[loss](tape.constant(z), int(y)).value))
        hits += int(np.argmax(z) == y)
    return float(np.mean(losses)), hits / len(dataset)


def fit(train_set, config, plan, seed, val_set=None, params=None, progress=None):
    """Train from scratch (or from ``params``) and return a :class:`FitResult`.

    Without ``val_set`` a stratified ``plan.val_fraction`` holdout is split
    off ``train_set``. Everything downstream of ``seed`` is deterministic.
    """
    if len(train_set) == 0:
        raise TrainingError("empty training set")
    if val_set is None and plan.val_fraction > 0:
        train_set, val_set = stratified_split(train_set, plan.val_fraction, seed)
    if params is None:
        params = init_params(config, np.random.default_rng([seed, 0xC0FFEE]))
    params.check(config)
    state = plan.optimizer()
    history = []
    labels = train_set.labels
    for epoch in range(plan.epochs):
        t0 = time.perf_counter()
        epoch_rng = np.random.default_rng([seed, epoch, 0xE0C4])
        if plan.balance:
            order = balanced_epoch(labels, epoch_rng)
        else:
            order = epoch_rng.permutation(len(labels))
        losses, hits = [], 0
        for start in range(0, len(order), plan.batch_size):
            batch = order[start:start + plan.batch_size]
            total = None
            for offset, idx in enumerate(batch):
                rng = _sample_rng(seed, epoch, start + offset)
                image = augment(train_set.images[idx], rng) if plan.augment else train_set.images[idx]
                value, grads, logits = sample_gradients(image, labels[idx], params, config, rng, plan.loss)
                if not math.isfinite(value):
                    raise TrainingError(
                        f"non-finite loss {value} at epoch {epoch}, step {state.t}, sample {int(idx)}; "
                        f"max |logit| = {np.abs(logits).max():.3g}"
                    )
                losses.append(value)
                hits += int(np.argmax(logits) == labels[idx])
                if total is None:
                    total = {k: g.astype(np.float64) for k, g in grads.items()}
                else:
                    for k, g in grads.items():
                        total[k] += g
            mean = {k: (g / len(batch)).astype(params.dtype) for k, g in total.items()}
            params, state = adam_step(params, mean, state)
        record = {
            "epoch": epoch + 1,
            "train_loss": float(np.mean(losses)),
            "train_acc": hits / len(order),
            "lr": state.lr(),
        }
        if val_set is not None and len(val_set):
            record["val_loss"], record["val_acc"] = evaluate_loss(val_set, params, config, seed, plan.loss)
        else:
            record["val_loss"] = record["val_acc"] = None
        history.append(record)
        log.info("epoch %d done in %.1fs: %s", epoch + 1, time.perf_counter() - t0, record)
        if progress is not None:
            progress(record)
    return FitResult(params, history, state)
