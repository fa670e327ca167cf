"""Deterministic ellipsoid lung phantoms with analytically known lesion volumes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .volume_io import (
    GGO, HIGH_OPACITY, HU_MAX, HU_MIN, CtVolume, Dataset, LabelMask, save_mask, save_volume,
    voxel_volume_ml, write_manifest,
)

AIR_HU = -1000.0
SOFT_TISSUE_HU = 40.0
LUNG_HU = -850.0
GGO_BAND = (-700.0, -400.0)
HIGH_OPACITY_BAND = (-50.0, 100.0)

DEFAULT_HU_RANGE = {GGO: (-650.0, -450.0), HIGH_OPACITY: (-45.0, -15.0)}
# lesion radii in mm; GGO draws a per-phantom severity log-uniformly from its range
GGO_RADIUS_MM = (12.0, 26.0)
HIGH_OPACITY_RADIUS_MM = (12.0, 16.0)
_BANDS = {GGO: GGO_BAND, HIGH_OPACITY: HIGH_OPACITY_BAND}


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]

    def voxelize(self, shape) -> np.ndarray:
        """Voxels whose centre satisfies sum(((idx - c) / r)**2) <= 1."""
        zz, yy, xx = np.ogrid[:shape[0], :shape[1], :shape[2]]
        (cz, cy, cx), (rz, ry, rx) = self.center, self.radii
        return ((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


@dataclass(frozen=True)
class Lesion:
    label: int
    ellipsoid: Ellipsoid
    hu_range: tuple[float, float]
    hu: float | None = None

    def __post_init__(self):
        if self.label not in _BANDS:
            raise PhantomError(f"lesion class must be GGO or high-opacity, got {self.label}")
        lo, hi = _BANDS[self.label]
        a, b = self.hu_range
        if not (lo < a <= b < hi):
            raise PhantomError(f"HU range {self.hu_range} not inside the class band ({lo}, {hi})")
        if self.hu is not None and not a <= self.hu <= b:
            raise PhantomError(f"lesion HU {self.hu} outside its range {self.hu_range}")

    @property
    def value(self) -> float:
        return self.hu if self.hu is not None else 0.5 * (self.hu_range[0] + self.hu_range[1])


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int] = (16, 96, 96)
    spacing: tuple[float, float, float] = (5.0, 3.0, 3.0)
    body: Ellipsoid = Ellipsoid((7.5, 48.0, 48.0), (160.0, 34.0, 38.0))
    lungs: tuple[Ellipsoid, Ellipsoid] = (
        Ellipsoid((7.5, 48.0, 31.0), (6.4, 24.0, 13.0)),
        Ellipsoid((7.5, 48.0, 65.0), (6.4, 24.0, 13.0)),
    )
    lesions: tuple[Lesion, ...] = ()
    noise_sd: float = 20.0
    seed: int = 0
    patient_id: str = "phantom"


@dataclass
class Phantom:
    volume: CtVolume
    mask: LabelMask
    analytic_ml: dict[int, float]
    noiseless: np.ndarray = field(repr=False)


def generate_phantom(spec: PhantomSpec) -> Phantom:
    shape = tuple(spec.shape)
    body = spec.body.voxelize(shape)
    lung = np.zeros(shape, dtype=bool)
    for lobe in spec.lungs:
        lung |= lobe.voxelize(shape)
    lung &= body

    hu = np.full(shape, AIR_HU)
    hu[body] = SOFT_TISSUE_HU
    hu[lung] = LUNG_HU
    labels = np.zeros(shape, dtype=np.uint8)
    counts = {GGO: 0, HIGH_OPACITY: 0}
    taken = np.zeros(shape, dtype=bool)
    for k, lesion in enumerate(spec.lesions):
        vox = lesion.ellipsoid.voxelize(shape)
        if not vox.any():
            raise PhantomError(f"lesion {k} covers no voxel")
        if (vox & ~lung).any():
            raise PhantomError(f"lesion {k} is not contained in the lungs")
        if (vox & taken).any():
            raise PhantomError(f"lesion {k} overlaps an earlier lesion")
        taken |= vox
        hu[vox] = lesion.value
        labels[vox] = lesion.label
        counts[lesion.label] += int(vox.sum())

    rng = np.random.default_rng(spec.seed)
    noisy = hu + rng.normal(0.0, spec.noise_sd, size=shape) if spec.noise_sd > 0 else hu
    voxels = np.clip(np.rint(noisy), HU_MIN, HU_MAX).astype(np.int16)
    ml = voxel_volume_ml(spec.spacing)
    analytic = {cls: n * ml for cls, n in counts.items()}
    analytic["lung"] = int(lung.sum()) * ml
    return Phantom(
        volume=CtVolume(voxels=voxels, spacing=spec.spacing, patient_id=spec.patient_id),
        mask=LabelMask(labels=labels, lung=lung),
        analytic_ml=analytic,
        noiseless=hu,
    )


def _jitter(e: Ellipsoid, rng, centre_px: float, radius_rel: tuple[float, float]) -> Ellipsoid:
    c = tuple(float(v) for v in np.asarray(e.center) + np.r_[0.0, rng.uniform(-centre_px, centre_px, 2)])
    s = rng.uniform(*radius_rel)
    return Ellipsoid(c, (e.radii[0], e.radii[1] * s, e.radii[2] * s))


def _place_lesion(rng, label, lungs, lung_vox, taken, shape, spacing, radius_mm, hu_range, tries=200):
    for _ in range(tries):
        lobe = lungs[rng.integers(len(lungs))]
        r_mm = radius_mm * np.exp(rng.uniform(-0.1, 0.1, 3))
        radii = tuple(float(r / s) for r, s in zip(r_mm, spacing))
        u = rng.uniform(-1, 1, 3)
        centre = tuple(float(c + 0.75 * r * v) for c, r, v in zip(lobe.center, lobe.radii, u))
        ell = Ellipsoid(centre, radii)
        vox = ell.voxelize(shape)
        if vox.any() and not (vox & ~lung_vox).any() and not (vox & taken).any():
            hu = float(rng.uniform(*hu_range))
            return Lesion(label, ell, hu_range, hu), vox
    return None, None


def random_spec(rng: np.random.Generator, base: PhantomSpec, patient_id: str,
                high_opacity_prob: float = 0.5) -> PhantomSpec:
    """Jitter body/lung geometry and draw 1-3 GGO lesions (plus sometimes one high-opacity)."""
    body = _jitter(base.body, rng, 1.0, (0.95, 1.03))
    lungs = tuple(_jitter(l, rng, 1.0, (0.9, 1.05)) for l in base.lungs)
    shape = base.shape
    lung_vox = np.zeros(shape, dtype=bool)
    for l in lungs:
        lung_vox |= l.voxelize(shape)
    lung_vox &= body.voxelize(shape)
    taken = np.zeros(shape, dtype=bool)
    lesions = []
    # per-phantom disease severity spreads cohort lesion volume over more than a decade
    severity = float(np.exp(rng.uniform(*np.log(GGO_RADIUS_MM))))
    for _ in range(int(rng.integers(1, 4))):
        lesion, vox = _place_lesion(rng, GGO, lungs, lung_vox, taken, shape, base.spacing,
                                    severity, DEFAULT_HU_RANGE[GGO])
        if lesion is None:
            lesion, vox = _place_lesion(rng, GGO, lungs, lung_vox, taken, shape, base.spacing,
                                        GGO_RADIUS_MM[0], DEFAULT_HU_RANGE[GGO])
        if lesion is not None:
            lesions.append(lesion)
            taken |= vox
    if rng.uniform() < high_opacity_prob:
        lesion, vox = _place_lesion(rng, HIGH_OPACITY, lungs, lung_vox, taken, shape, base.spacing,
                                    float(rng.uniform(*HIGH_OPACITY_RADIUS_MM)), DEFAULT_HU_RANGE[HIGH_OPACITY])
        if lesion is not None:
            lesions.append(lesion)
    return replace(base, body=body, lungs=lungs, lesions=tuple(lesions),
                   seed=int(rng.integers(2**31)), patient_id=patient_id)


def generate_cohort(n: int, out_dir, base_spec: PhantomSpec | None = None, seed: int = 0,
                    high_opacity_prob: float = 0.5) -> Dataset:
    """Write ``n`` jittered phantoms plus ``manifest.tsv`` and ``truth.csv`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, truth = [], ["patient_id,ggo_ml,high_ml,lung_ml"]
    for spec in cohort_specs(n, base_spec, seed, high_opacity_prob):
        pid = spec.patient_id
        ph = generate_phantom(spec)
        vol_path, mask_path = out / f"{pid}.vol", out / f"{pid}.mask"
        save_volume(ph.volume, vol_path)
        save_mask(ph.mask, mask_path, patient_id=pid)
        records.append((pid, vol_path, mask_path))
        a = ph.analytic_ml
        truth.append(f"{pid},{a[GGO]!r},{a[HIGH_OPACITY]!r},{a['lung']!r}")
    dataset = Dataset(records=records, manifest_path=out / "manifest.tsv")
    write_manifest(dataset, dataset.manifest_path)
    (out / "truth.csv").write_text("\n".join(truth) + "\n", encoding="utf-8")
    return dataset


def cohort_specs(n: int, base_spec: PhantomSpec | None = None, seed: int = 0,
                 high_opacity_prob: float = 0.5) -> list[PhantomSpec]:
    if n < 1:
        raise PhantomError("cohort size must be >= 1")
    base = base_spec or PhantomSpec()
    width = max(3, len(str(n - 1)))
    return [random_spec(np.random.default_rng([seed, i]), base, f"P{i:0{width}d}", high_opacity_prob)
            for i in range(n)]
