"""JSON checkpoint container for a trained model state."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelState

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _tensor(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": a.ravel(order="C").tolist()}


def _array(obj: dict) -> np.ndarray:
    return np.array(obj["data"], dtype=np.float64).reshape(obj["shape"])


def save(state: ModelState, path, extra: dict | None = None) -> None:
    """Write config, every tensor (row-major float64) and the dropout RNG state.

    ``extra`` carries run provenance (training config, data options, id maps).
    """
    doc = {
        "format_version": FORMAT_VERSION,
        "model_config": state.config.to_dict(),
        "params": {name: _tensor(v) for name, v in state.params.items()},
        "patient_fixed": _tensor(state.patient_fixed),
        "rng_state": state.rng.bit_generator.state,
        "extra": extra or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load(path) -> tuple[ModelState, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {doc.get('format_version')!r}")
    config = ModelConfig(**doc["model_config"])
    params = {name: _array(t) for name, t in doc["params"].items()}
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = doc["rng_state"]
    return ModelState(config, params, _array(doc["patient_fixed"]), rng), doc.get("extra", {})
