"""Flat ``key = value`` configuration files (``#`` starts a comment)."""

from __future__ import annotations

from dataclasses import fields, replace
from pathlib import Path

from .errors import ConfigError, ShapeError
from .model import NcaConfig
from .train import TrainPlan


def _bool(text):
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{text!r} is not a boolean")


# config key -> (target, attribute, parser)
KEYS = {
    "channels": ("model", "channels", int),
    "steps": ("model", "steps", int),
    "update_hidden": ("model", "update_hidden", int),
    "classifier_hidden": ("model", "classifier_hidden", int),
    "num_classes": ("model", "num_classes", int),
    "fire_rate": ("model", "fire_rate", float),
    "batch_size": ("plan", "batch_size", int),
    "epochs": ("plan", "epochs", int),
    "lr": ("plan", "lr0", float),
    "beta1": ("plan", "beta1", float),
    "beta2": ("plan", "beta2", float),
    "eps": ("plan", "eps", float),
    "lr_decay": ("plan", "decay", float),
    "loss": ("plan", "loss", str),
    "augment": ("plan", "augment", _bool),
    "balance": ("plan", "balance", _bool),
    "val_fraction": ("plan", "val_fraction", float),
    "eval_seed": ("eval", "eval_seed", int),
    "mc": ("eval", "mc", int),
}


def parse_config(text, base_model=None, base_plan=None):
    """Return ``(NcaConfig, TrainPlan, eval_options)`` from config text."""
    values = {"model": {}, "plan": {}, "eval": {}}
    lines = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError("unknown configuration key", key=key, line=lineno)
        target, attr, parser = KEYS[key]
        try:
            values[target][attr] = parser(value)
        except ValueError:
            raise ConfigError(f"cannot parse value {value!r}", key=key, line=lineno) from None
        lines[attr] = (key, lineno)
    loss = values["plan"].get("loss")
    if loss is not None and loss not in ("softmax", "sigmoid"):
        key, lineno = lines["loss"]
        raise ConfigError("loss must be 'softmax' or 'sigmoid'", key=key, line=lineno)
    base = base_model or NcaConfig()
    # every NcaConfig constraint is per-field, so checking one value at a time pins the culprit
    for attr, value in values["model"].items():
        try:
            replace(base, **{attr: value})
        except ShapeError as exc:
            key, lineno = lines[attr]
            raise ConfigError(str(exc), key=key, line=lineno) from None
    model = replace(base, **values["model"])
    plan = replace(base_plan or TrainPlan(), **values["plan"])
    return model, plan, values["eval"]


def read_config(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"))


def format_config(model, plan=None):
    inverse = {(target, attr): key for key, (target, attr, _) in KEYS.items()}
    lines = [f"{inverse[('model', f.name)]} = {getattr(model, f.name)}" for f in fields(model)]
    if plan is not None:
        lines += [f"{inverse[('plan', f.name)]} = {getattr(plan, f.name)}" for f in fields(plan)]
    return "\n".join(lines) + "\n"
