"""Embedding export: one JSON record per sample, in split order."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import LabeledSample, stack
from .tensor import no_grad


def image_embeddings(model, samples: Sequence[LabeledSample], chunk: int = 256) -> np.ndarray:
    images, _ = stack(samples)
    out = []
    with no_grad():
        for start in range(0, len(images), chunk):
            emb, _ = model.vision(images[start : start + chunk])
            out.append(emb.data)
    return np.concatenate(out)


def export_embeddings(model, samples: Sequence[LabeledSample], path) -> Path:
    """Write f32-rounded unit-norm image embeddings with their labels."""
    emb = image_embeddings(model, samples).astype(np.float32)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for i, (s, e) in enumerate(zip(samples, emb)):
            rec = {"index": i, "embedding": [float(v) for v in e], **s.record()}
            fh.write(json.dumps(rec) + "\n")
    return path
