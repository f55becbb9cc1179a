"""Versioned JSON model files.

All parameters are written as decimal floats (``repr`` round-trips exactly),
so a saved and reloaded model evaluates bit-identically.
"""

from __future__ import annotations

import json

from ..priors import prior_from_dict
from .layers import LAYER_KINDS
from .model import FlowModel

SCHEMA = "flowlab.model"
VERSION = 1


def model_to_dict(model: FlowModel) -> dict:
    return {
        "schema": SCHEMA,
        "version": VERSION,
        "dim": model.dim,
        "n_classes": model.n_classes,
        "seed": model.seed,
        "class_probs": model.class_probs.tolist(),
        "layers": [layer.to_dict() for layer in model.layers],
        "prior": model.prior.to_dict(),
    }


def model_from_dict(d: dict) -> FlowModel:
    if d.get("schema") != SCHEMA:
        raise ValueError(f"not a model file (schema={d.get('schema')!r})")
    if d.get("version") != VERSION:
        raise ValueError(f"unsupported model file version {d.get('version')!r}")
    layers = []
    for ld in d["layers"]:
        try:
            layers.append(LAYER_KINDS[ld["kind"]].from_dict(ld))
        except KeyError:
            raise ValueError(f"unknown layer kind {ld.get('kind')!r}") from None
    return FlowModel(d["dim"], d["n_classes"], layers, prior_from_dict(d["prior"]),
                     class_probs=d["class_probs"], seed=d.get("seed"))


def save_model(model: FlowModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=1)
        fh.write("\n")


def load_model(path) -> FlowModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
