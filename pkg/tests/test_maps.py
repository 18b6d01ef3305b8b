"""Raster formats, attention-map invariants, manifests."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from attnmine import maps
from attnmine.errors import (
    BadMagicError,
    DataError,
    DegenerateMapError,
    InvalidMapError,
    NanPayloadError,
    ShapeError,
    TruncatedFileError,
)
from attnmine.maps import (
    AttentionMap,
    KnowledgeMask,
    Manifest,
    PseudoLabelSet,
    SampleRecord,
    SampleSet,
    atnm_bytes_to_raster,
    export_pgm,
    load_map,
    normalize_spatial,
    raster_to_atnm_bytes,
    read_frame,
    read_pnm,
    save_map,
    write_ppm,
)


# ---------------------------------------------------------------------------
# AttentionMap / mask invariants
# ---------------------------------------------------------------------------

def test_map_rejects_bad_payloads():
    with pytest.raises(InvalidMapError):
        AttentionMap(np.array([1.0, 2.0]))  # 1-D
    with pytest.raises(InvalidMapError):
        AttentionMap(np.array([[1.0, -0.5]]))
    with pytest.raises(InvalidMapError):
        AttentionMap(np.array([[1.0, np.nan]]))
    with pytest.raises(InvalidMapError):
        AttentionMap(np.array([[0.5, 0.6]]), normalized=True)  # sums to 1.1


def test_mask_must_be_binary():
    KnowledgeMask(np.array([[0.0, 1.0], [1.0, 0.0]]))
    with pytest.raises(InvalidMapError):
        KnowledgeMask(np.array([[0.5, 1.0]]))


def test_pseudo_label_set_checks_dims():
    a = AttentionMap(np.ones((2, 2)))
    b = AttentionMap(np.ones((3, 3)))
    with pytest.raises(ShapeError):
        PseudoLabelSet(("s1", "s2"), [a, b])
    with pytest.raises(InvalidMapError):
        PseudoLabelSet((), [])
    ok = PseudoLabelSet(("s1", "s2"), [a, AttentionMap(np.ones((2, 2)))])
    assert len(ok) == 2


def test_sample_record_checks_dims():
    frame = np.zeros((3, 4, 4))
    labels = PseudoLabelSet(("s1",), [AttentionMap(np.ones((4, 4)))])
    SampleRecord(frame, labels)  # fine
    bad = PseudoLabelSet(("s1",), [AttentionMap(np.ones((2, 2)))])
    with pytest.raises(ShapeError):
        SampleRecord(frame, bad)
    with pytest.raises(ShapeError):
        SampleRecord(np.zeros((1, 4, 4)), labels)


# ---------------------------------------------------------------------------
# normalize_spatial
# ---------------------------------------------------------------------------

def test_normalize_examples():
    out = normalize_spatial(AttentionMap(np.full((2, 2), 2.0)))
    assert np.array_equal(out.values, np.full((2, 2), 0.25))
    assert out.normalized
    out2 = normalize_spatial(AttentionMap(np.array([[1.0, 3.0]])))
    assert np.array_equal(out2.values, np.array([[0.25, 0.75]]))


def test_normalize_is_identity_on_normalized_maps():
    m = normalize_spatial(AttentionMap(np.array([[1.0, 3.0]])))
    again = normalize_spatial(m)
    assert again is m


def test_normalize_rejects_zero_map():
    with pytest.raises(DegenerateMapError):
        normalize_spatial(AttentionMap(np.zeros((2, 2))))


# ---------------------------------------------------------------------------
# ATNM format
# ---------------------------------------------------------------------------

def test_atnm_layout_by_hand():
    m = AttentionMap(np.array([[1.0, 0.0], [0.0, 0.0]]), normalized=True)
    blob = raster_to_atnm_bytes(m.values, m.normalized)
    # magic, version u32, width u32, height u32, normalized u8
    assert blob[:4] == b"ATNM"
    assert struct.unpack("<I", blob[4:8])[0] == 1
    assert struct.unpack("<I", blob[8:12])[0] == 2
    assert struct.unpack("<I", blob[12:16])[0] == 2
    assert blob[16] == 1
    assert len(blob) == 17 + 4 * 8
    first_bits = struct.unpack("<Q", blob[17:25])[0]
    assert first_bits == 0x3FF0000000000000  # IEEE-754 for 1.0
    assert struct.unpack("<Q", blob[25:33])[0] == 0


def test_atnm_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(23)
    vals = rng.random((5, 7))
    m = normalize_spatial(AttentionMap(vals))
    p = tmp_path / "m.atnm"
    save_map(m, p)
    again = load_map(p)
    assert again.values.tobytes() == m.values.tobytes()
    assert again.normalized == m.normalized
    save_map(again, tmp_path / "m2.atnm")
    assert (tmp_path / "m.atnm").read_bytes() == (tmp_path / "m2.atnm").read_bytes()


def test_atnm_bad_magic():
    with pytest.raises(BadMagicError):
        atnm_bytes_to_raster(b"XXXX" + bytes(29))


def test_atnm_truncation():
    good = raster_to_atnm_bytes(np.ones((2, 2)), False)
    with pytest.raises(TruncatedFileError):
        atnm_bytes_to_raster(good[:3])
    with pytest.raises(TruncatedFileError):
        atnm_bytes_to_raster(good[:10])
    with pytest.raises(TruncatedFileError):
        atnm_bytes_to_raster(good[:-1])
    with pytest.raises(DataError):
        atnm_bytes_to_raster(good + b"\x00")


def test_atnm_rejects_nan_payload():
    blob = raster_to_atnm_bytes(np.ones((2, 2)), False)
    bad = blob[:17] + struct.pack("<d", float("nan")) + blob[25:]
    with pytest.raises(NanPayloadError):
        atnm_bytes_to_raster(bad)


def test_atnm_version_check():
    blob = raster_to_atnm_bytes(np.ones((1, 1)), False)
    bad = blob[:4] + struct.pack("<I", 9) + blob[8:]
    with pytest.raises(DataError):
        atnm_bytes_to_raster(bad)


@given(hnp.arrays(np.float64, (3, 4),
                  elements=st.floats(0, 100, allow_nan=False, width=64)))
@settings(max_examples=30, deadline=None)
def test_atnm_round_trip_property(vals):
    blob = raster_to_atnm_bytes(vals, False)
    back, normalized = atnm_bytes_to_raster(blob)
    assert not normalized
    assert back.tobytes() == np.ascontiguousarray(vals).tobytes()


# ---------------------------------------------------------------------------
# PGM / PPM
# ---------------------------------------------------------------------------

def test_pgm_header_and_scaling(tmp_path):
    m = AttentionMap(np.array([[0.0, 1.0], [0.5, 0.25]]))
    p = tmp_path / "m.pgm"
    export_pgm(m, p)
    blob = p.read_bytes()
    assert blob.startswith(b"P5\n2 2\n255\n")
    pixels = blob[len(b"P5\n2 2\n255\n"):]
    assert len(pixels) == 4
    assert pixels[0] == 0 and pixels[1] == 255
    assert pixels[2] == 128  # 0.5 of the range, rounds to 128


def test_pgm_constant_map_is_midgray(tmp_path):
    p = tmp_path / "c.pgm"
    export_pgm(AttentionMap(np.full((3, 3), 0.7)), p)
    pixels = p.read_bytes()[len(b"P5\n3 3\n255\n"):]
    assert all(b == 128 for b in pixels)


def test_ppm_round_trip(tmp_path):
    rng = np.random.default_rng(29)
    frame = rng.random((3, 4, 6))
    p = tmp_path / "f.ppm"
    write_ppm(frame, p)
    back = read_frame(p)
    assert back.shape == (3, 4, 6)
    # 8-bit quantization: off by at most half a step
    assert np.abs(back - frame).max() <= 0.5 / 255 + 1e-12


def test_pgm_reader_handles_comments(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# a comment\n2 1\n255\n\x00\xff")
    arr = read_pnm(p)
    assert np.allclose(arr, [[0.0, 1.0]])


def test_pnm_reader_errors(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"GIF89a")
    with pytest.raises(BadMagicError):
        read_pnm(p)
    p.write_bytes(b"P6\n2 2\n255\n\x00")
    with pytest.raises(TruncatedFileError):
        read_pnm(p)


# ---------------------------------------------------------------------------
# manifests and the sample set
# ---------------------------------------------------------------------------

def _write_sample(tmp_path, idx, split, with_gt=True, with_mask=True):
    rng = np.random.default_rng(idx)
    write_ppm(rng.random((3, 4, 4)), tmp_path / f"frame_{idx:03d}.ppm")
    for s in (1, 2):
        m = normalize_spatial(AttentionMap(rng.random((4, 4)) + 0.01))
        save_map(m, tmp_path / f"label_{idx:03d}_s{s}.atnm")
    mask = "-"
    if with_mask:
        maps.save_raster((rng.random((4, 4)) > 0.5).astype(float),
                         tmp_path / f"mask_{idx:03d}.atnm")
        mask = f"mask_{idx:03d}.atnm"
    gt = "-"
    if with_gt:
        g = normalize_spatial(AttentionMap(rng.random((4, 4)) + 0.01))
        save_map(g, tmp_path / f"gt_{idx:03d}.atnm")
        gt = f"gt_{idx:03d}.atnm"
    return "\t".join([
        split,
        f"frame_{idx:03d}.ppm",
        f"label_{idx:03d}_s1.atnm;label_{idx:03d}_s2.atnm",
        mask,
        gt,
    ])


def test_manifest_round_trip(tmp_path):
    lines = [_write_sample(tmp_path, i, "train" if i < 3 else "val")
             for i in range(4)]
    mpath = tmp_path / "manifest.tsv"
    mpath.write_text("\n".join(lines) + "\n")
    man = Manifest.load(mpath)
    assert len(man.entries) == 4
    assert man.n_sources() == 2
    assert [e.split for e in man.entries] == ["train"] * 3 + ["val"]
    man.save(tmp_path / "again.tsv")
    assert (tmp_path / "again.tsv").read_text() == mpath.read_text()


def test_manifest_split_stride(tmp_path):
    lines = [_write_sample(tmp_path, i, "train") for i in range(6)]
    mpath = tmp_path / "m.tsv"
    mpath.write_text("\n".join(lines) + "\n")
    man = Manifest.load(mpath)
    assert len(man.split("train")) == 6
    assert len(man.split("train", stride=2)) == 3
    assert man.split("val") == []
    with pytest.raises(DataError):
        man.split("train", stride=0)


def test_manifest_rejects_bad_lines(tmp_path):
    with pytest.raises(DataError):
        Manifest.parse_line("train\tonly_three\tfields")
    with pytest.raises(DataError):
        Manifest.parse_line("weird\ta.ppm\tb.atnm\t-\t-")
    with pytest.raises(DataError):
        Manifest.parse_line("train\ta.ppm\t\t-\t-")
    mpath = tmp_path / "m.tsv"
    mpath.write_text("train\tmissing.ppm\tmissing.atnm\t-\t-\n")
    with pytest.raises(DataError):
        Manifest.load(mpath)
    with pytest.raises(DataError):
        Manifest.load(tmp_path / "nope.tsv")


def test_sample_set_counts_gt_reads(tmp_path):
    lines = [_write_sample(tmp_path, i, "train") for i in range(3)]
    mpath = tmp_path / "m.tsv"
    mpath.write_text("\n".join(lines) + "\n")
    man = Manifest.load(mpath)
    ds = SampleSet(man.base_dir, man.split("train"))
    assert len(ds) == 3
    assert ds.gt_reads == 0
    f = ds.frame(0)
    labels = ds.labels(0)
    mk = ds.mask(0)
    assert f.shape == (3, 4, 4)
    assert labels.source_names == ("s1", "s2")
    assert mk is not None and set(np.unique(mk.values)) <= {0.0, 1.0}
    assert ds.gt_reads == 0  # frames/labels/masks don't count
    assert ds.has_ground_truth(1)
    ds.ground_truth(1)
    ds.ground_truth(2)
    assert ds.gt_reads == 2


def test_sample_set_missing_gt(tmp_path):
    line = _write_sample(tmp_path, 0, "test", with_gt=False)
    mpath = tmp_path / "m.tsv"
    mpath.write_text(line + "\n")
    man = Manifest.load(mpath)
    ds = SampleSet(man.base_dir, man.split("test"))
    assert not ds.has_ground_truth(0)
    with pytest.raises(DataError):
        ds.ground_truth(0)
