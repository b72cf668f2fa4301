"""Similarity-map export: grayscale PNG plus a JSON sidecar with the value range.

The PNG is min-max normalized (a constant map renders black), so the sidecar
is what preserves the absolute scale.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image


def similarity_to_array(sim) -> np.ndarray:
    if isinstance(sim, torch.Tensor):
        sim = sim.detach().cpu().numpy()
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim == 3 and sim.shape[0] == 1:
        sim = sim[0]
    if sim.ndim != 2:
        raise ValueError(f"expected a single (h, w) similarity map, got shape {sim.shape}")
    return sim


def save_similarity_png(sim, path, upscale: int = 8) -> dict:
    """Write the map as an 8-bit PNG (nearest-neighbor upscaled) and a sidecar JSON.

    Returns the sidecar contents: value range, map shape, and upscale factor.
    """
    if upscale < 1:
        raise ValueError("upscale must be >= 1")
    arr = similarity_to_array(sim)
    vmin, vmax = float(arr.min()), float(arr.max())
    if vmax > vmin:
        norm = (arr - vmin) / (vmax - vmin)
    else:
        norm = np.zeros_like(arr)
    pixels = (norm * 255.0).round().astype(np.uint8)
    if upscale > 1:
        pixels = np.kron(pixels, np.ones((upscale, upscale), dtype=np.uint8))
    path = Path(path)
    Image.fromarray(pixels, mode="L").save(path, format="PNG")
    sidecar = {
        "min": vmin,
        "max": vmax,
        "shape": list(arr.shape),
        "upscale": upscale,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return sidecar
