"""Agreement statistics between reference and automatic segmentations."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .quantify import class_volume, pneumonia_burden
from .volume_io import BACKGROUND, CLASS_CODES, CLASS_NAMES, GGO, HIGH_OPACITY, LabelMask

SIGNIFICANCE = 0.05
LOA_Z = 1.96
EXACT_WILCOXON_MAX_N = 25


class EvaluationError(ValueError):
    pass


def _labels(mask) -> np.ndarray:
    return mask.labels if isinstance(mask, LabelMask) else np.asarray(mask)


def dice(pred, gt, class_code: int) -> float:
    """2TP / (2TP + FP + FN) over voxels of ``class_code``; 1.0 when the class is absent from both."""
    p, g = _labels(pred), _labels(gt)
    if p.shape != g.shape:
        raise EvaluationError(f"shape mismatch: {p.shape} vs {g.shape}")
    p, g = p == class_code, g == class_code
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def lesion_dice(pred, gt) -> float:
    """Mean Dice over the lesion classes present in either mask (1.0 if neither has lesions)."""
    p, g = _labels(pred), _labels(gt)
    present = [c for c in (GGO, HIGH_OPACITY) if (p == c).any() or (g == c).any()]
    if not present:
        return 1.0
    return float(np.mean([dice(p, g, c) for c in present]))


def spearman(xs, ys) -> tuple[float, float]:
    """Rank correlation (average ranks for ties) and its two-sided t-approximation p-value."""
    x, y = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise EvaluationError(f"length mismatch: {x.shape} vs {y.shape}")
    n = len(x)
    if n < 3:
        raise EvaluationError("spearman needs at least 3 pairs")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise EvaluationError("constant input: rank correlation undefined")
    rx, ry = stats.rankdata(x), stats.rankdata(y)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    rho = float(np.dot(rx, ry) / math.sqrt(np.dot(rx, rx) * np.dot(ry, ry)))
    rho = max(-1.0, min(1.0, rho))
    if abs(rho) == 1.0:
        return rho, 0.0
    t = rho * math.sqrt((n - 2) / (1 - rho * rho))
    return rho, float(2 * stats.t.sf(abs(t), n - 2))


@dataclass
class BlandAltman:
    bias: float
    loa_low: float
    loa_high: float
    sd: float
    means: list[float]
    diffs: list[float]


def bland_altman(xs, ys) -> BlandAltman:
    x, y = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise EvaluationError(f"length mismatch: {x.shape} vs {y.shape}")
    if len(x) < 2:
        raise EvaluationError("bland-altman needs at least 2 pairs")
    d = x - y
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    return BlandAltman(bias, bias - LOA_Z * sd, bias + LOA_Z * sd, sd,
                       ((x + y) / 2).tolist(), d.tolist())


def _signed_rank_null(doubled_ranks: np.ndarray) -> np.ndarray:
    """Null distribution of the doubled positive-rank sum: counts indexed by sum."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r]
        counts += shifted
    return counts / counts.sum()


def wilcoxon_signed_rank(xs, ys, return_statistic: bool = False):
    """Two-sided paired signed-rank test.

    Zero differences are dropped; tied |d| share average ranks. Exact null
    distribution for up to 25 non-zero pairs, otherwise the normal
    approximation with tie and continuity corrections.
    """
    x, y = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise EvaluationError(f"length mismatch: {x.shape} vs {y.shape}")
    d = x - y
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise EvaluationError("all differences are zero")
    ranks = stats.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= EXACT_WILCOXON_MAX_N:
        doubled = np.rint(2 * ranks).astype(np.int64)
        pmf = _signed_rank_null(doubled)
        w2 = int(round(2 * w_plus))
        p = 2 * min(pmf[:w2 + 1].sum(), pmf[w2:].sum())
    else:
        mean = n * (n + 1) / 4
        _, tie_counts = np.unique(np.abs(d), return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24 - float((tie_counts ** 3 - tie_counts).sum()) / 48
        z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
        p = 2 * stats.norm.sf(z)
    p = float(min(1.0, p))
    return (w_plus, p) if return_statistic else p


@dataclass
class PatientRow:
    patient_id: str
    fold: int | None
    dice: dict[str, float]
    lesion_dice: float
    expert_ml: dict[str, float]
    auto_ml: dict[str, float]


@dataclass
class EvalReport:
    n_patients: int
    dice: dict[str, dict]
    lesion_dice: dict
    spearman: dict[str, dict | None]
    bland_altman: dict[str, dict | None]
    wilcoxon_p: dict[str, float | None]
    significance_level: float = SIGNIFICANCE
    rows: list[PatientRow] = field(default_factory=list)

    def summary(self) -> dict:
        out = asdict(self)
        out.pop("rows")
        for ba in out["bland_altman"].values():
            if ba:
                ba.pop("means", None)
                ba.pop("diffs", None)
        return out


VOLUME_TYPES = ("ggo", "high_opacity", "pneumonia")


def _mean_sd(values) -> dict:
    v = np.asarray(values, dtype=float)
    return {"mean": float(v.mean()) if len(v) else None,
            "sd": float(v.std(ddof=1)) if len(v) > 1 else None,
            "n": int(len(v))}


def _volumes(mask: LabelMask, spacing) -> dict[str, float]:
    ggo = class_volume(mask, GGO, spacing)
    high = class_volume(mask, HIGH_OPACITY, spacing)
    return {"ggo": ggo, "high_opacity": high, "pneumonia": ggo + high}


def build_report(pred_masks: dict, gt_masks: dict, spacings: dict, folds: dict | None = None) -> EvalReport:
    """Per-patient Dice and volumes plus cohort agreement statistics.

    Statistics that are undefined for the cohort (too few patients, constant
    volumes, identical pairs) are reported as ``None``.
    """
    if set(pred_masks) != set(gt_masks):
        missing = sorted(set(pred_masks) ^ set(gt_masks))
        raise EvaluationError(f"patient sets differ: {missing}")
    ids = sorted(gt_masks)
    if not ids:
        raise EvaluationError("no patients to evaluate")
    rows = []
    for pid in ids:
        pred, gt, spacing = pred_masks[pid], gt_masks[pid], spacings[pid]
        expert, auto = _volumes(gt, spacing), _volumes(pred, spacing)
        if gt.lung is not None and gt.lung.any():
            expert["burden"] = pneumonia_burden(gt, spacing)
            auto["burden"] = pneumonia_burden(LabelMask(pred.labels, gt.lung), spacing)
        rows.append(PatientRow(
            patient_id=pid,
            fold=None if folds is None else folds.get(pid),
            dice={CLASS_NAMES[c]: dice(pred, gt, c) for c in CLASS_CODES},
            lesion_dice=lesion_dice(pred, gt),
            expert_ml=expert,
            auto_ml=auto,
        ))

    dice_summary = {CLASS_NAMES[c]: _mean_sd([r.dice[CLASS_NAMES[c]] for r in rows]) for c in CLASS_CODES}
    lesion = {"across_patients": _mean_sd([r.lesion_dice for r in rows])}
    if folds is not None:
        per_fold = {}
        for r in rows:
            per_fold.setdefault(r.fold, []).append(r.lesion_dice)
        lesion["across_folds"] = _mean_sd([np.mean(v) for _, v in sorted(per_fold.items())])

    kinds = list(VOLUME_TYPES) + (["burden"] if all("burden" in r.expert_ml for r in rows) else [])
    sp, ba, wil = {}, {}, {}
    for kind in kinds:
        xs = [r.expert_ml[kind] for r in rows]
        ys = [r.auto_ml[kind] for r in rows]
        try:
            rho, p = spearman(ys, xs)
            sp[kind] = {"rho": rho, "p": p, "significant": p < SIGNIFICANCE}
        except EvaluationError:
            sp[kind] = None
        try:
            ba[kind] = asdict(bland_altman(ys, xs))
        except EvaluationError:
            ba[kind] = None
        try:
            wil[kind] = wilcoxon_signed_rank(ys, xs)
        except EvaluationError:
            wil[kind] = None
    return EvalReport(len(rows), dice_summary, lesion, sp, ba, wil, SIGNIFICANCE, rows)


def write_report(report: EvalReport, out_dir) -> dict[str, Path]:
    """Write report.csv, summary.json, ba_points.csv and scatter_points.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in ("report.csv", "summary.json", "ba_points.csv", "scatter_points.csv")}
    kinds = [k for k in report.spearman]
    with open(paths["report.csv"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "fold", "dice_background", "dice_ggo", "dice_high_opacity", "dice_lesion"]
                   + [f"expert_{k}" for k in kinds] + [f"auto_{k}" for k in kinds])
        for r in report.rows:
            w.writerow([r.patient_id, "" if r.fold is None else r.fold]
                       + [repr(r.dice[CLASS_NAMES[c]]) for c in CLASS_CODES] + [repr(r.lesion_dice)]
                       + [repr(r.expert_ml[k]) for k in kinds] + [repr(r.auto_ml[k]) for k in kinds])
    paths["summary.json"].write_text(json.dumps(report.summary(), indent=2), encoding="utf-8")
    with open(paths["ba_points.csv"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["volume_type", "patient_id", "mean", "diff"])
        for k in kinds:
            if report.bland_altman.get(k):
                ba = report.bland_altman[k]
                for r, m, d in zip(report.rows, ba["means"], ba["diffs"]):
                    w.writerow([k, r.patient_id, repr(m), repr(d)])
    with open(paths["scatter_points.csv"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["volume_type", "patient_id", "expert", "auto"])
        for k in kinds:
            for r in report.rows:
                w.writerow([k, r.patient_id, repr(r.expert_ml[k]), repr(r.auto_ml[k])])
    return paths
