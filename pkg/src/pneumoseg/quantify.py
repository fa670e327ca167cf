"""Lesion volumes and pneumonia burden in physical units.

Total pneumonia volume is GGO + high-opacity. The high-opacity class merges
consolidation with pleural effusion, so scans with effusion overstate the
consolidation share; the classes cannot be separated after training.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .preprocess import nearest_indices
from .volume_io import CLASS_CODES, GGO, HIGH_OPACITY, LabelMask, voxel_volume_ml


class QuantifyError(ValueError):
    pass


@dataclass(frozen=True)
class QuantReport:
    patient_id: str
    ggo_ml: float
    high_opacity_ml: float
    total_pneumonia_ml: float
    lung_ml: float | None = None
    burden_pct: float | None = None

    CSV_HEADER = ("patient_id", "ggo_ml", "high_ml", "pneumonia_ml", "lung_ml", "burden_pct")

    def csv_row(self) -> list:
        def fmt(v):
            return "" if v is None else repr(float(v))
        return [self.patient_id, fmt(self.ggo_ml), fmt(self.high_opacity_ml),
                fmt(self.total_pneumonia_ml), fmt(self.lung_ml), fmt(self.burden_pct)]


def class_volume(mask: LabelMask, class_code: int, spacing) -> float:
    if class_code not in CLASS_CODES:
        raise QuantifyError(f"unknown class code {class_code}")
    return int(np.count_nonzero(mask.labels == class_code)) * voxel_volume_ml(spacing)


def lung_volume(mask: LabelMask, spacing) -> float:
    if mask.lung is None:
        raise QuantifyError("mask has no lung mask")
    return int(np.count_nonzero(mask.lung)) * voxel_volume_ml(spacing)


def pneumonia_burden(mask: LabelMask, spacing=(1.0, 1.0, 1.0)) -> float:
    """100 * (GGO + high-opacity) / lung, in percent.

    Spacing cancels in the ratio; it is accepted so callers can pass the
    scan's geometry uniformly.
    """
    if mask.lung is None or not mask.lung.any():
        raise QuantifyError("empty lung mask")
    lesion = class_volume(mask, GGO, spacing) + class_volume(mask, HIGH_OPACITY, spacing)
    return 100.0 * lesion / lung_volume(mask, spacing)


def quantify(mask: LabelMask, spacing, patient_id: str = "", lung=None) -> QuantReport:
    if lung is not None:
        mask = LabelMask(labels=mask.labels, lung=lung)
    ggo = class_volume(mask, GGO, spacing)
    high = class_volume(mask, HIGH_OPACITY, spacing)
    lung_ml = burden = None
    if mask.lung is not None:
        lung_ml = lung_volume(mask, spacing)
        burden = pneumonia_burden(mask, spacing)
    return QuantReport(patient_id, ggo, high, ggo + high, lung_ml, burden)


def map_prediction_to_source(pred, crop_box, source_shape) -> LabelMask:
    """Nearest-neighbour inverse of crop + resize: (D, h, w) labels -> source grid."""
    pred = np.asarray(pred)
    d, hh, ww = (int(s) for s in source_shape)
    r0, r1, c0, c1 = crop_box
    if not (0 <= r0 < r1 <= hh and 0 <= c0 < c1 <= ww):
        raise QuantifyError(f"crop box {crop_box} is invalid for source shape {tuple(source_shape)}")
    if pred.ndim != 3 or pred.shape[0] != d:
        raise QuantifyError(f"prediction shape {pred.shape} inconsistent with source slices {d}")
    rows = nearest_indices(pred.shape[1], r1 - r0)
    cols = nearest_indices(pred.shape[2], c1 - c0)
    labels = np.zeros((d, hh, ww), dtype=np.uint8)
    labels[:, r0:r1, c0:c1] = pred[:, rows[:, None], cols[None, :]]
    return LabelMask(labels=labels)


def write_quant_csv(reports, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(QuantReport.CSV_HEADER)
        for r in reports:
            writer.writerow(r.csv_row())
