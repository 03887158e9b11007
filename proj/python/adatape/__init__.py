# SPDX-License-Identifier: Apache-2.0
"""Adaptive tape reading for transformer encoders (C++ core)."""

import json

from ._adatape import (
    BankExhaustedError,
    ConfigError,
    Error,
    FormatError,
    IoError,
    LengthError,
    Model,
    NumericError,
    ShapeError,
    atr_read,
    default_config,
    evaluate_checkpoint,
    gen_parity,
    grad_check,
    layernorm_diagnostic,
    patchify,
    resolve_config,
    synthetic_images,
    train,
)

__all__ = [
    "BankExhaustedError",
    "ConfigError",
    "Error",
    "FormatError",
    "IoError",
    "LengthError",
    "Model",
    "NumericError",
    "ShapeError",
    "atr_read",
    "config",
    "default_config",
    "evaluate_checkpoint",
    "gen_parity",
    "grad_check",
    "layernorm_diagnostic",
    "patchify",
    "resolve_config",
    "synthetic_images",
    "train",
]


def config(task="parity", **overrides):
    """Resolved run config as a dict; nested keys merge into the task defaults."""
    base = json.loads(default_config(task))
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            base[key].update(value)
        else:
            base[key] = value
    return json.loads(resolve_config(json.dumps(base)))
