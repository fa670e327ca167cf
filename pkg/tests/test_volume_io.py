import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pneumoseg.synthdata import PhantomSpec, generate_phantom
from pneumoseg.volume_io import (
    GGO, HEADER_SIZE, HIGH_OPACITY, VOLUME_MAGIC, CtVolume, Dataset, LabelMask, VolumeFormatError,
    _pack_header, load_mask, load_volume, read_manifest, save_mask, save_volume, voxel_volume_ml,
    write_manifest,
)


def _raw_volume(path, voxels, spacing):
    header = _pack_header(VOLUME_MAGIC, 1, voxels.shape, spacing, 0, "raw")
    path.write_bytes(header + voxels.astype("<i2").tobytes())


def test_header_is_128_bytes(tmp_path):
    vol = CtVolume(np.zeros((1, 2, 3), np.int16), (1, 1, 1), "x")
    save_volume(vol, tmp_path / "v.vol")
    assert (tmp_path / "v.vol").stat().st_size == HEADER_SIZE + 12
    assert (tmp_path / "v.vol").read_bytes()[:8] == b"PNSVOL01"


def test_phantom_volume_round_trip(tmp_path):
    ph = generate_phantom(PhantomSpec(shape=(16, 64, 64), spacing=(1.0, 1.0, 1.0)))
    save_volume(ph.volume, tmp_path / "p.vol")
    back = load_volume(tmp_path / "p.vol")
    assert back.shape == (16, 64, 64)
    assert back.spacing == (1.0, 1.0, 1.0)
    assert np.array_equal(back.voxels, ph.volume.voxels)
    assert back.patient_id == ph.volume.patient_id


def test_zero_spacing_rejected(tmp_path):
    _raw_volume(tmp_path / "bad.vol", np.zeros((2, 2, 2), np.int16), (0.0, 1.0, 1.0))
    with pytest.raises(VolumeFormatError, match="non-positive spacing"):
        load_volume(tmp_path / "bad.vol")


def test_hu_out_of_range_rejected(tmp_path):
    vox = np.zeros((2, 2, 2), np.int16)
    vox[1, 1, 1] = 5000
    _raw_volume(tmp_path / "bad.vol", vox, (1.0, 1.0, 1.0))
    with pytest.raises(VolumeFormatError, match="HU out of range"):
        load_volume(tmp_path / "bad.vol")


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_volume(tmp_path / "absent.vol")
    (tmp_path / "short.vol").write_bytes(b"PNSVOL01" + b"\0" * 10)
    with pytest.raises(VolumeFormatError, match="malformed header"):
        load_volume(tmp_path / "short.vol")
    (tmp_path / "magic.vol").write_bytes(b"NOTAVOL!" + b"\0" * 200)
    with pytest.raises(VolumeFormatError, match="malformed header"):
        load_volume(tmp_path / "magic.vol")
    vol = CtVolume(np.zeros((2, 2, 2), np.int16), (1, 1, 1))
    save_volume(vol, tmp_path / "trunc.vol")
    data = (tmp_path / "trunc.vol").read_bytes()
    (tmp_path / "trunc.vol").write_bytes(data[:-2])
    with pytest.raises(VolumeFormatError):
        load_volume(tmp_path / "trunc.vol")


def test_in_memory_invariants():
    with pytest.raises(VolumeFormatError):
        CtVolume(np.zeros((2, 2)), (1, 1, 1))
    with pytest.raises(VolumeFormatError):
        CtVolume(np.zeros((0, 2, 2)), (1, 1, 1))
    with pytest.raises(VolumeFormatError):
        CtVolume(np.full((1, 1, 1), 0.5), (1, 1, 1))
    with pytest.raises(VolumeFormatError, match="non-positive"):
        CtVolume(np.zeros((1, 1, 1)), (1, float("inf"), 1))
    with pytest.raises(VolumeFormatError, match="unknown class code"):
        LabelMask(np.full((1, 1, 1), 3))
    with pytest.raises(VolumeFormatError, match="lung mask shape"):
        LabelMask(np.zeros((1, 2, 2)), lung=np.zeros((1, 2, 3)))
    vol = CtVolume(np.zeros((1, 2, 2)), (1, 1, 1))
    with pytest.raises(ValueError):
        vol.voxels[0, 0, 0] = 1


def test_mask_with_label_3_rejected(tmp_path):
    from pneumoseg.volume_io import MASK_MAGIC
    header = _pack_header(MASK_MAGIC, 2, (1, 2, 2), (0, 0, 0), 0, "")
    (tmp_path / "m.mask").write_bytes(header + bytes([0, 1, 2, 3]))
    with pytest.raises(VolumeFormatError, match="unknown class code"):
        load_mask(tmp_path / "m.mask")


def test_mask_shape_mismatch(tmp_path):
    save_mask(LabelMask(np.zeros((15, 64, 64))), tmp_path / "m.mask")
    with pytest.raises(VolumeFormatError, match="shape mismatch"):
        load_mask(tmp_path / "m.mask", (16, 64, 64))
    assert load_mask(tmp_path / "m.mask", (15, 64, 64)).shape == (15, 64, 64)


def test_all_zero_mask_round_trip(tmp_path):
    m = LabelMask(np.zeros((3, 4, 5)))
    save_mask(m, tmp_path / "z.mask")
    back = load_mask(tmp_path / "z.mask")
    assert back == m and not back.labels.any() and back.lung is None


def test_phantom_mask_round_trip_counts(tmp_path, phantom):
    save_mask(phantom.mask, tmp_path / "p.mask", patient_id="P")
    back = load_mask(tmp_path / "p.mask", phantom.volume.shape)
    assert back == phantom.mask
    for c in (0, GGO, HIGH_OPACITY):
        assert np.count_nonzero(back.labels == c) == np.count_nonzero(phantom.mask.labels == c)
    assert np.array_equal(back.lung, phantom.mask.lung)


@settings(max_examples=40, deadline=None)
@given(labels=arrays(np.uint8, st.tuples(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6)),
                     elements=st.integers(0, 2)),
       with_lung=st.booleans())
def test_random_mask_round_trip(tmp_path_factory, labels, with_lung):
    lung = (labels % 2 == 0) if with_lung else None
    m = LabelMask(labels, lung)
    path = tmp_path_factory.mktemp("m") / "r.mask"
    save_mask(m, path)
    assert load_mask(path, labels.shape) == m


@settings(max_examples=40, deadline=None)
@given(voxels=arrays(np.int16, st.tuples(st.integers(1, 3), st.integers(1, 5), st.integers(1, 5)),
                     elements=st.integers(-3024, 3071)),
       spacing=st.tuples(*[st.floats(0.01, 20, allow_nan=False)] * 3))
def test_random_volume_round_trip(tmp_path_factory, voxels, spacing):
    path = tmp_path_factory.mktemp("v") / "r.vol"
    save_volume(CtVolume(voxels, spacing, "id"), path)
    back = load_volume(path)
    assert np.array_equal(back.voxels, voxels)
    assert back.spacing == tuple(float(s) for s in spacing)


@pytest.mark.parametrize("spacing, ml", [((1, 1, 1), 0.001), ((1.25, 0.7, 0.7), 0.0006125), ((10, 10, 10), 1.0)])
def test_voxel_volume_ml(spacing, ml):
    assert voxel_volume_ml(spacing) == pytest.approx(ml, rel=1e-12)


@given(st.tuples(*[st.floats(0.01, 50)] * 3), st.integers(0, 2), st.floats(0.1, 10))
def test_voxel_volume_multiplicative(spacing, axis, k):
    scaled = list(spacing)
    scaled[axis] *= k
    assert voxel_volume_ml(scaled) == pytest.approx(k * voxel_volume_ml(spacing), rel=1e-12)


def test_voxel_volume_rejects_nonpositive():
    with pytest.raises(VolumeFormatError):
        voxel_volume_ml((1, 0, 1))


def test_manifest_round_trip_and_errors(tmp_path, small_cohort):
    ds = read_manifest(small_cohort.manifest_path)
    assert ds.patient_ids == small_cohort.patient_ids
    text = small_cohort.manifest_path.read_text().splitlines()
    assert all(len(line.split("\t")) == 3 for line in text)
    out = tmp_path / "copy.tsv"
    write_manifest(ds, out)
    assert read_manifest(out).records == ds.records
    (tmp_path / "bad.tsv").write_text("P1\tmissing.vol\tmissing.mask\n")
    with pytest.raises(FileNotFoundError):
        read_manifest(tmp_path / "bad.tsv")
    with pytest.raises(VolumeFormatError, match="duplicate"):
        Dataset(records=[("a", "x", "y"), ("a", "x", "y")])


def test_header_layout_documented(tmp_path):
    vol = CtVolume(np.arange(6, dtype=np.int16).reshape(1, 2, 3), (2.5, 0.5, 0.75), "abc")
    save_volume(vol, tmp_path / "v.vol")
    raw = (tmp_path / "v.vol").read_bytes()
    assert raw[8] == 1
    assert struct.unpack_from("<3I", raw, 12) == (1, 2, 3)
    assert struct.unpack_from("<3d", raw, 24) == (2.5, 0.5, 0.75)
    assert raw[52:55] == b"abc"
    assert np.array_equal(np.frombuffer(raw[128:], "<i2"), np.arange(6))
