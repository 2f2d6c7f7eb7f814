"""Versioned JSON checkpoints: named arrays with their shapes and row-major values."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

from .diff_core import MlpParams, Normalizer

FORMAT = "nlbac-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def mlp_to_layers(prefix: str, params: MlpParams) -> dict[str, np.ndarray]:
    out = {}
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        out[f"{prefix}.W{l}"] = w
        out[f"{prefix}.b{l}"] = b
    return out


def mlp_from_layers(prefix: str, layers: dict[str, np.ndarray], activation: str) -> MlpParams:
    weights, biases = [], []
    l = 0
    while f"{prefix}.W{l}" in layers:
        weights.append(layers[f"{prefix}.W{l}"])
        biases.append(layers[f"{prefix}.b{l}"])
        l += 1
    if not weights:
        raise CheckpointError(f"no layers named {prefix}.W*")
    sizes = [weights[0].shape[1]] + [w.shape[0] for w in weights]
    return MlpParams(sizes, weights, biases, activation)


def normalizer_to_layers(prefix: str, norm: Normalizer) -> dict[str, np.ndarray]:
    return {f"{prefix}.shift": norm.shift, f"{prefix}.scale": norm.scale}


def normalizer_from_layers(prefix: str, layers: dict[str, np.ndarray]) -> Normalizer:
    return Normalizer(layers[f"{prefix}.shift"], layers[f"{prefix}.scale"])


def save(path: str | Path, layers: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> None:
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "meta": meta or {},
        "layers": {
            name: {"shape": list(np.shape(a)), "values": np.asarray(a, dtype=np.float64).ravel().tolist()}
            for name, a in layers.items()
        },
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint (format={doc.get('format')!r})")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {doc.get('version')}")
    layers = {}
    for name, entry in doc["layers"].items():
        values = np.asarray(entry["values"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if values.size != int(np.prod(shape)):
            raise CheckpointError(f"{path}: layer {name} has {values.size} values for shape {shape}")
        layers[name] = values.reshape(shape)
    return layers, doc.get("meta", {})
