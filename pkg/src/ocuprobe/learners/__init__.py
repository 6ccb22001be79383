"""Native one-class and binary learners plus versioned JSON persistence."""

from __future__ import annotations

import json
from pathlib import Path

from ..errors import ModelFormatError
from .gbt import GbtConfig, GbtModel, train_gbt
from .iforest import IsoForestModel, c_factor, train_iforest
from .lof import LofModel, train_lof
from .ocsvm import OcsvmModel, default_gamma, train_ocsvm

MODEL_VERSION = 1

_KINDS = {
    "ocsvm": OcsvmModel,
    "iforest": IsoForestModel,
    "lof": LofModel,
    "gbt": GbtModel,
}
_KIND_OF = {cls: kind for kind, cls in _KINDS.items()}


def model_to_dict(model) -> dict:
    kind = _KIND_OF.get(type(model))
    if kind is None:
        raise TypeError(f"not a model: {type(model).__name__}")
    return {"v": MODEL_VERSION, "kind": kind, **model.to_dict()}


def model_from_dict(d: dict):
    if not isinstance(d, dict):
        raise ModelFormatError("model document must be a JSON object")
    if d.get("v") != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {d.get('v')!r}")
    cls = _KINDS.get(d.get("kind"))
    if cls is None:
        raise ModelFormatError(f"unknown model kind {d.get('kind')!r}")
    try:
        return cls.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed {d['kind']} model: {exc}") from exc


def save_model(model, path: Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), separators=(",", ":")) + "\n")


def load_model(path: Path):
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc
    return model_from_dict(d)


__all__ = [
    "GbtConfig",
    "GbtModel",
    "IsoForestModel",
    "LofModel",
    "OcsvmModel",
    "c_factor",
    "default_gamma",
    "load_model",
    "model_from_dict",
    "model_to_dict",
    "save_model",
    "train_gbt",
    "train_iforest",
    "train_lof",
    "train_ocsvm",
]
