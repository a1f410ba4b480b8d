"""Python front end for the glad adaptation toolkit.

Config overrides are plain ``{"key": "value"}`` dicts using the same keys as
the command-line ``--set`` option; see :func:`config_keys`.
"""

import json

from ._core import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    DomainError,
    GladError,
    LoraLinear,
    NumericError,
    config_keys,
    cosine_lr,
    fuse_gradients,
    harmonic_mean,
    project_conflict,
    render,
    sam_perturbation,
)
from . import _core


def _stringify(overrides):
    out = {}
    for key, value in (overrides or {}).items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        out[key] = str(value)
    return out


def default_config(overrides=None):
    return dict(_core.default_config(_stringify(overrides)))


def config_hash(overrides=None):
    return _core.config_hash(_stringify(overrides))


def generate_task(overrides=None, seed=1):
    """Synthetic task as nested lists: prototypes' texts plus train/test splits."""
    return _core.generate_task(_stringify(overrides), seed)


def run(overrides=None, out_dir=""):
    """Train and evaluate one configuration; returns the run record as a dict."""
    return json.loads(_core.run_json(_stringify(overrides), str(out_dir)))


def ablate(overrides=None):
    """Run ablation rows (a)-(e); returns a list of run records."""
    return json.loads(_core.ablate_json(_stringify(overrides)))


def render_records(records, fmt="markdown"):
    return render(json.dumps(records), fmt)


__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "DimensionError",
    "DomainError",
    "GladError",
    "LoraLinear",
    "NumericError",
    "ablate",
    "config_hash",
    "config_keys",
    "cosine_lr",
    "default_config",
    "fuse_gradients",
    "generate_task",
    "harmonic_mean",
    "project_conflict",
    "render_records",
    "run",
    "sam_perturbation",
]
