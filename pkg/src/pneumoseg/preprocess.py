"""Data preparation: body crop, 256x256 resize, HU window, augmentation, slice windows."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .volume_io import CtVolume

TARGET_SIZE = 256
CONTEXT_RADIUS = 5
WINDOW_LEN = 2 * CONTEXT_RADIUS + 1

HU_CLIP_LOW = -1024.0
HU_CLIP_HIGH = 600.0
BODY_THRESHOLD_HU = -500

ROTATION_RANGE = (-10.0, 10.0)
TRANSLATION_RANGE = (-10.0, 10.0)
SCALE_RANGE = (0.9, 1.05)


class PreprocessError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentParams:
    rotation_deg: float = 0.0
    translate_px: tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0
    seed: int | None = None

    def __post_init__(self):
        lo, hi = ROTATION_RANGE
        if not lo <= self.rotation_deg <= hi:
            raise PreprocessError(f"rotation {self.rotation_deg} outside [{lo}, {hi}] degrees")
        lo, hi = TRANSLATION_RANGE
        if len(self.translate_px) != 2 or not all(lo <= t <= hi for t in self.translate_px):
            raise PreprocessError(f"translation {self.translate_px} outside [{lo}, {hi}] px")
        lo, hi = SCALE_RANGE
        if not lo <= self.scale <= hi:
            raise PreprocessError(f"scale {self.scale} outside [{lo}, {hi}]")

    @property
    def is_identity(self) -> bool:
        return self.rotation_deg == 0 and tuple(self.translate_px) == (0, 0) and self.scale == 1

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "AugmentParams":
        return cls(
            rotation_deg=float(rng.uniform(*ROTATION_RANGE)),
            translate_px=(float(rng.uniform(*TRANSLATION_RANGE)), float(rng.uniform(*TRANSLATION_RANGE))),
            scale=float(rng.uniform(*SCALE_RANGE)),
        )


@dataclass(frozen=True, eq=False)
class SliceWindow:
    """Normalized 11-slice context stack around ``target_index``."""

    pixels: np.ndarray
    target_index: int
    crop_box: tuple[int, int, int, int]
    scale: tuple[float, float]

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] != WINDOW_LEN:
            raise PreprocessError(f"window must hold {WINDOW_LEN} slices, got shape {self.pixels.shape}")


@dataclass(frozen=True, eq=False)
class PreparedVolume:
    """A volume after crop, resize and normalization; slices are 256x256 in [0, 1]."""

    slices: np.ndarray
    crop_box: tuple[int, int, int, int]
    scale: tuple[float, float]
    source_shape: tuple[int, int, int]
    labels: np.ndarray | None = None


def body_crop(volume: CtVolume, threshold: float = BODY_THRESHOLD_HU):
    """Crop to the in-plane bounding box of the largest 6-connected body component.

    Returns ``(crop_box, cropped_voxels)`` with ``crop_box = (row0, row1, col0, col1)``
    half-open, shared by every slice.
    """
    body = volume.voxels > threshold
    if not body.any():
        raise PreprocessError("no body found: no voxel above threshold")
    structure = ndimage.generate_binary_structure(3, 1)
    labelled, n = ndimage.label(body, structure=structure)
    if n > 1:
        sizes = np.bincount(labelled.ravel())
        sizes[0] = 0
        body = labelled == int(np.argmax(sizes))
    rows = np.flatnonzero(body.any(axis=(0, 2)))
    cols = np.flatnonzero(body.any(axis=(0, 1)))
    box = (int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1)
    return box, volume.voxels[:, box[0]:box[1], box[2]:box[3]]


def normalize_slice(hu) -> np.ndarray:
    hu = np.asarray(hu, dtype=np.float64)
    return (np.clip(hu, HU_CLIP_LOW, HU_CLIP_HIGH) - HU_CLIP_LOW) / (HU_CLIP_HIGH - HU_CLIP_LOW)


def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    """Source index sampled by each output pixel under half-pixel-centre nearest resampling."""
    idx = np.floor((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64)
    return np.minimum(idx, n_in - 1)


def resize(image, out_shape: tuple[int, int], is_label: bool = False) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim < 2 or min(image.shape[-2:]) < 2:
        raise PreprocessError(f"degenerate input dimensions {image.shape}")
    h, w = image.shape[-2:]
    oh, ow = out_shape
    if (h, w) == (oh, ow):
        return image.copy()
    if is_label:
        return image[..., nearest_indices(h, oh)[:, None], nearest_indices(w, ow)[None, :]]
    lead = image.shape[:-2]
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float64)).reshape(1, -1, h, w)
    out = F.interpolate(t, size=(oh, ow), mode="bilinear", align_corners=False)
    return out.reshape(*lead, oh, ow).numpy()


def resize_to_256(image, is_label: bool = False) -> np.ndarray:
    return resize(image, (TARGET_SIZE, TARGET_SIZE), is_label=is_label)


def _affine(params: AugmentParams, shape: tuple[int, int]):
    """Output->input mapping for rotation about the centre, then translation, then scaling."""
    h, w = shape
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    theta = math.radians(params.rotation_deg)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    # forward map in (row, col): y = s * (R (x - c) + t) + c
    shift = np.array([params.translate_px[1], params.translate_px[0]])
    forward = params.scale * rot
    offset_fwd = params.scale * (-rot @ centre + shift) + centre
    inverse = np.linalg.inv(forward)
    return inverse, -inverse @ offset_fwd


def augment(window: SliceWindow, mask, params: AugmentParams):
    """Apply one shared affine transform to all window slices and the label slice(s).

    Images use bilinear interpolation, labels nearest; pixels mapped from
    outside the frame become 0.
    """
    mask = np.asarray(mask)
    if params.is_identity:
        return window, mask.copy()
    matrix, offset = _affine(params, window.pixels.shape[-2:])

    def warp(stack, order):
        flat = stack.reshape(-1, *stack.shape[-2:])
        out = np.stack([
            ndimage.affine_transform(s, matrix, offset=offset, order=order, mode="constant", cval=0)
            for s in flat
        ])
        return out.reshape(stack.shape)

    pixels = np.clip(warp(window.pixels, 1), 0.0, 1.0).astype(window.pixels.dtype)
    out = SliceWindow(pixels=pixels, target_index=window.target_index,
                      crop_box=window.crop_box, scale=window.scale)
    return out, warp(mask, 0).astype(mask.dtype)


def window_indices(n_slices: int, target: int) -> np.ndarray:
    """Slice indices of the window around ``target``; out-of-volume context replicates the edge."""
    return np.clip(np.arange(target - CONTEXT_RADIUS, target + CONTEXT_RADIUS + 1), 0, n_slices - 1)


def prepare_volume(volume: CtVolume, labels=None, size: int = TARGET_SIZE,
                   dtype=np.float32) -> PreparedVolume:
    crop_box, cropped = body_crop(volume)
    r0, r1, c0, c1 = crop_box
    slices = normalize_slice(resize(cropped.astype(np.float64), (size, size))).astype(dtype)
    lab = None
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != volume.shape:
            raise PreprocessError(f"label shape {labels.shape} does not match volume {volume.shape}")
        lab = resize(labels[:, r0:r1, c0:c1], (size, size), is_label=True)
    scale = (size / (r1 - r0), size / (c1 - c0))
    return PreparedVolume(slices=slices, crop_box=crop_box, scale=scale,
                          source_shape=volume.shape, labels=lab)


def windows_from_prepared(prep: PreparedVolume, indices) -> list[SliceWindow]:
    n = prep.slices.shape[0]
    out = []
    for idx in indices:
        idx = int(idx)
        if not 0 <= idx < n:
            raise PreprocessError(f"slice index {idx} out of range for {n} slices")
        out.append(SliceWindow(pixels=prep.slices[window_indices(n, idx)], target_index=idx,
                               crop_box=prep.crop_box, scale=prep.scale))
    return out


def make_windows(volume: CtVolume, indices, size: int = TARGET_SIZE) -> list[SliceWindow]:
    for idx in indices:
        if not 0 <= int(idx) < volume.shape[0]:
            raise PreprocessError(f"slice index {idx} out of range for {volume.shape[0]} slices")
    return windows_from_prepared(prepare_volume(volume, size=size), indices)
