"""Whole-volume inference: windows in, source-grid label mask out."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .baselines import UnetConfig, build_unet
from .network import NetworkConfig, decode, init_params
from .preprocess import PreparedVolume, prepare_volume, window_indices
from .quantify import map_prediction_to_source
from .volume_io import CtVolume, LabelMask
from .weights import load_weights, save_weights


def window_batch(slices: np.ndarray, targets) -> torch.Tensor:
    n = slices.shape[0]
    return torch.from_numpy(np.stack([slices[window_indices(n, t)] for t in targets]))


@torch.no_grad()
def predict_prepared(model, prep: PreparedVolume, batch_size: int = 1) -> np.ndarray:
    """Labels for every slice of ``prep`` in 256x256 space, shape (D, 256, 256)."""
    model.eval()
    dtype = next(model.parameters()).dtype
    n = prep.slices.shape[0]
    out = np.empty((n, *prep.slices.shape[1:]), dtype=np.uint8)
    for start in range(0, n, batch_size):
        targets = range(start, min(n, start + batch_size))
        x = window_batch(prep.slices, targets).to(dtype)
        out[start:start + len(targets)] = decode(model.logits(x))
    return out


def segment_volume(model, volume: CtVolume, batch_size: int = 1, size: int = 256) -> LabelMask:
    prep = prepare_volume(volume, size=size)
    pred = predict_prepared(model, prep, batch_size)
    return map_prediction_to_source(pred, prep.crop_box, prep.source_shape)


def save_model(model, path, extra: dict | None = None) -> None:
    kind = getattr(model, "kind", None) or _kind_of(model)
    meta = {"model": kind, "config": model.config.to_dict(), "format": "pneumoseg-weights"}
    meta.update(extra or {})
    save_weights(model.state_dict(), path, meta)


def _kind_of(model) -> str:
    name = type(model).__name__
    return {"ConvLstmAttentionNet": "convlstm", "Unet2D": "unet2d", "Unet3D": "unet3d"}[name]


def build_model(kind: str, config: dict | None = None, seed: int = 0):
    if kind == "convlstm":
        return init_params(NetworkConfig(**(config or {})), seed)
    return build_unet(kind, UnetConfig(**config) if config else None, seed)


def load_model(path):
    tensors, meta = load_weights(path)
    model = build_model(meta["model"], meta["config"])
    own = model.state_dict()
    for name, t in tensors.items():
        if name not in own or tuple(own[name].shape) != tuple(t.shape):
            raise ValueError(f"{path}: tensor {name!r} does not fit the {meta['model']} model")
    if any(t.dtype == torch.float64 for t in tensors.values()):
        model = model.double()
    model.load_state_dict(tensors)
    model.eval()
    return model, meta
