"""Neural cellular automaton classifier: seed, transition rule, rollout and head."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .errors import ShapeError

PARAM_NAMES = ("k1", "k2", "W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4")


@dataclass(frozen=True)
class NcaConfig:
    channels: int = 128
    steps: int = 64
    update_hidden: int = 128
    classifier_hidden: int = 128
    num_classes: int = 13
    fire_rate: float = 0.5

    def __post_init__(self):
        if self.channels < 3:
            raise ShapeError(f"channels must be >= 3 (RGB lives in 0..2), got {self.channels}")
        if self.steps < 0:
            raise ShapeError(f"steps must be >= 0, got {self.steps}")
        if min(self.update_hidden, self.classifier_hidden, self.num_classes) < 1:
            raise ShapeError("hidden sizes and num_classes must be positive")
        if not 0 < self.fire_rate <= 1:
            raise ShapeError(f"fire_rate must lie in (0, 1], got {self.fire_rate}")

    def param_shapes(self):
        n, hu, hc, C = self.channels, self.update_hidden, self.classifier_hidden, self.num_classes
        return {
            "k1": (n, 3, 3),
            "k2": (n, 3, 3),
            "W1": (hu, 3 * n),
            "b1": (hu,),
            "W2": (n, hu),
            "b2": (n,),
            "W3": (hc, n),
            "b3": (hc,),
            "W4": (C, hc),
            "b4": (C,),
        }


STANDARD_CONFIG = NcaConfig()


def count_params(config):
    """Closed-form number of trainable scalars."""
    n, hu, hc, C = config.channels, config.update_hidden, config.classifier_hidden, config.num_classes
    return 18 * n + 3 * n * hu + hu + hu * n + n + n * hc + hc + hc * C + C


@dataclass
class NcaParams:
    k1: np.ndarray
    k2: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    W4: np.ndarray
    b4: np.ndarray

    def as_dict(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @classmethod
    def from_dict(cls, arrays):
        missing = [name for name in PARAM_NAMES if name not in arrays]
        if missing:
            raise ShapeError(f"missing parameter arrays: {missing}")
        return cls(**{name: arrays[name] for name in PARAM_NAMES})

    def astype(self, dtype):
        return NcaParams(**{k: v.astype(dtype) for k, v in self.as_dict().items()})

    def copy(self):
        return NcaParams(**{k: v.copy() for k, v in self.as_dict().items()})

    @property
    def dtype(self):
        return self.k1.dtype

    def size(self):
        return sum(v.size for v in self.as_dict().values())

    def check(self, config):
        for name, shape in config.param_shapes().items():
            got = getattr(self, name).shape
            if got != shape:
                raise ShapeError(f"parameter {name} has shape {got}, config expects {shape}")


def init_params(config, rng, dtype=np.float32):
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, zero final update layer.

    Zeroing ``W2``/``b2`` makes the initial update the identity map.
    """
    shapes = config.param_shapes()

    def uniform(name, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shapes[name]).astype(dtype)

    return NcaParams(
        k1=uniform("k1", 9),
        k2=uniform("k2", 9),
        W1=uniform("W1", 3 * config.channels),
        b1=np.zeros(shapes["b1"], dtype),
        W2=np.zeros(shapes["W2"], dtype),
        b2=np.zeros(shapes["b2"], dtype),
        W3=uniform("W3", config.channels),
        b3=np.zeros(shapes["b3"], dtype),
        W4=uniform("W4", config.classifier_hidden),
        b4=np.zeros(shapes["b4"], dtype),
    )


def make_seed(image, n, dtype=np.float32):
    """RGB image in channels 0..2, zeros in the ``n - 3`` hidden channels."""
    image = np.asarray(image)
    if n < 3:
        raise ShapeError(f"seed needs at least 3 channels, got {n}")
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ShapeError(f"expected an (H, W, 3) RGB image, got {image.shape}")
    seed = np.zeros(image.shape[:2] + (n,), dtype=dtype)
    seed[..., :3] = image
    return seed


def draw_masks(rng, steps, height, width, fire_rate):
    """One Bernoulli(fire_rate) bit per cell per step."""
    return rng.random((steps, height, width)) < fire_rate


# --- tape-level building blocks -------------------------------------------

def param_leaves(tape, params):
    return {name: tape.leaf(value, name=name) for name, value in params.as_dict().items()}


def _perceive(x, P):
    return ad.concat([x, ad.depthwise_conv3x3(x, P["k1"]), ad.depthwise_conv3x3(x, P["k2"])])


def _update(p, P):
    return ad.linear(ad.relu(ad.linear(p, P["W1"], P["b1"])), P["W2"], P["b2"])


def _step(x, P, mask, fused=True):
    if fused:
        hidden = ad.perceive_linear(x, P["k1"], P["k2"], P["W1"], P["b1"])
        update = ad.linear(ad.relu(hidden), P["W2"], P["b2"])
    else:
        update = _update(_perceive(x, P), P)
    return ad.masked_add(x, update, mask)


def _head(v, P):
    return ad.linear(ad.relu(ad.linear(v, P["W3"], P["b3"])), P["W4"], P["b4"])


@dataclass
class Forward:
    """Everything recorded by one forward pass of one image."""

    tape: ad.Tape
    leaves: dict
    final_state: ad.Tensor
    features: ad.Tensor
    argmax_pos: np.ndarray
    logits: ad.Tensor
    masks: np.ndarray
    states: list = field(default_factory=list)


def forward(image, params, config, rng=None, masks=None, tape=None, keep_states=False, fused=True):
    """Seed -> ``config.steps`` NCA steps -> channel max -> classifier logits.

    Exactly one of ``rng`` (fresh masks) and ``masks`` (replay) is used;
    ``masks`` wins when both are given. ``fused=False`` runs the literal
    perceive/concat/linear composition instead of the folded kernel.
    """
    if tape is None:
        tape = ad.Tape()
    seed = make_seed(image, config.channels, dtype=params.dtype)
    H, W = seed.shape[:2]
    if masks is None:
        if rng is None:
            raise ValueError("forward needs either an rng or recorded masks")
        masks = draw_masks(rng, config.steps, H, W, config.fire_rate)
    masks = np.asarray(masks, dtype=bool)
    if masks.shape != (config.steps, H, W):
        raise ShapeError(f"masks shape {masks.shape}, expected {(config.steps, H, W)}")
    P = param_leaves(tape, params)
    x = tape.constant(seed, name=None)
    states = [x] if keep_states else []
    for t in range(config.steps):
        x = _step(x, P, masks[t], fused)
        if keep_states:
            states.append(x)
    v, pos = ad.channel_max(x)
    logits = _head(v, P)
    return Forward(tape, P, x, v, pos, logits, masks, states)


# --- plain array API -------------------------------------------------------

def _plain(params):
    tape = ad.Tape(enabled=False)
    return tape, {name: tape.constant(v) for name, v in params.as_dict().items()}


def perceive(state, k1, k2):
    """Per-cell perception vector ``[c, N*k1, N*k2]`` for every cell."""
    tape = ad.Tape(enabled=False)
    out = _perceive(tape.constant(state), {"k1": tape.constant(k1), "k2": tape.constant(k2)})
    return out.value


def nca_step(state, params, mask, fused=True):
    tape, P = _plain(params)
    return _step(tape.constant(state), P, mask, fused).value


def channel_max(grid):
    """Plain-array channel max: ``(values, argmax_positions)``."""
    v, pos = ad.channel_max(ad.Tape(enabled=False).constant(np.asarray(grid)))
    return v.value, pos


@dataclass
class Rollout:
    final_state: np.ndarray
    features: np.ndarray
    masks: np.ndarray
    argmax_pos: np.ndarray


def rollout(image, params, config, rng=None, masks=None):
    """Inference rollout (no tape). Replaying returned masks reproduces it bit-exactly."""
    fw = forward(image, params, config, rng=rng, masks=masks, tape=ad.Tape(enabled=False))
    return Rollout(fw.final_state.value, fw.features.value, fw.masks, fw.argmax_pos)


def sigmoid(z):
    z = np.asarray(z)
    # split by sign so exp never overflows
    out = np.empty_like(z, dtype=np.result_type(z.dtype, np.float32))
    pos = z >= 0
    out[pos] = 1 / (1 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1 + ez)
    return out


@dataclass
class Classification:
    logits: np.ndarray
    probs: np.ndarray

    @property
    def predicted(self):
        return int(np.argmax(self.logits))


def classify(features, params):
    """Classifier head on a pooled feature vector; ``probs`` are elementwise sigmoids."""
    features = np.asarray(features)
    if features.shape != (params.W3.shape[1],):
        raise ShapeError(f"feature length {features.shape} does not match W3 {params.W3.shape}")
    tape, P = _plain(params)
    logits = _head(tape.constant(features.astype(params.dtype, copy=False)), P).value
    return Classification(logits, sigmoid(logits))


def predict_logits(image, params, config, rng=None, masks=None, mc=1):
    """Logits for one image, averaged over ``mc`` independent mask draws."""
    if mc <= 1 or masks is not None:
        return rollout_logits(image, params, config, rng=rng, masks=masks)
    acc = None
    for _ in range(mc):
        z = rollout_logits(image, params, config, rng=rng).astype(np.float64)
        acc = z if acc is None else acc + z
    return (acc / mc).astype(params.dtype)


def rollout_logits(image, params, config, rng=None, masks=None):
    fw = forward(image, params, config, rng=rng, masks=masks, tape=ad.Tape(enabled=False))
    return fw.logits.value


def with_config(config, **changes):
    return replace(config, **changes)


def config_fields():
    return [f.name for f in fields(NcaConfig)]
