import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gla.errors import FrameLoadError, StructuralError, ValidationError
from gla.frames import (RA_LUT, HEAT_LUT, DatasetManifest, GroundTruth, ManifestEntry, RAFrame, apply_colormap,
                        load_frame, lut_lookup, luminance, normalize_frame, resize_frame, save_frame)

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False, width=32)


# -- normalize_frame ----------------------------------------------------------

def test_affine_midpoint():
    raw = np.array([[2.0, 6.0, 10.0]])
    assert normalize_frame(raw)[0, 1] == 0.5


def test_constant_frame_maps_to_half():
    assert np.all(normalize_frame(np.full((4, 5), 3.7)) == 0.5)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_input_rejected(bad):
    raw = np.ones((3, 3))
    raw[1, 1] = bad
    with pytest.raises(ValidationError):
        normalize_frame(raw)


def test_empty_input_rejected():
    with pytest.raises(ValidationError):
        normalize_frame(np.zeros((0,)))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (6, 7), elements=finite))
def test_normalize_range_and_idempotence(raw):
    out = normalize_frame(raw)
    assert out.min() >= 0 and out.max() <= 1
    if np.ptp(raw) > 0 and np.ptp(out) > 0:
        assert out.min() == 0.0 and out.max() == 1.0
        np.testing.assert_allclose(normalize_frame(out), out, atol=1e-6)


# -- colormap --------------------------------------------------------------------

def test_replicate_mode_copies_gray():
    g = np.random.default_rng(0).random((1, 8, 8)).astype(np.float32)
    out = apply_colormap(g, "replicate")
    assert out.shape == (3, 8, 8)
    for c in range(3):
        np.testing.assert_array_equal(out[c], g[0])


def test_lut_endpoints_are_exact():
    out = apply_colormap(np.array([[0.0, 1.0]]), "lut")
    np.testing.assert_array_equal(out[:, 0, 0], RA_LUT[0].astype(np.float32))
    np.testing.assert_array_equal(out[:, 0, 1], RA_LUT[255].astype(np.float32))


@pytest.mark.parametrize("lut", [RA_LUT, HEAT_LUT], ids=["ra", "heat"])
def test_lut_luminance_strictly_increasing(lut):
    lum = luminance(lut)
    assert np.all(np.diff(lum) > 0)
    assert lut.min() >= 0 and lut.max() <= 1


def test_lut_output_in_unit_range():
    out = apply_colormap(np.linspace(0, 1, 500)[None], "lut")
    assert out.min() >= 0 and out.max() <= 1


def test_lut_inverts_by_nearest_entry():
    gray = np.linspace(0, 1, 1024)
    rgb = lut_lookup(gray)
    dist = ((rgb[:, None, :] - RA_LUT[None, :, :]) ** 2).sum(-1)
    recovered = dist.argmin(axis=1) / 255.0
    assert np.max(np.abs(recovered - gray)) <= 1 / 255 + 1e-12


def test_colormap_rejects_multichannel_and_bad_mode():
    with pytest.raises(StructuralError):
        apply_colormap(np.zeros((3, 4, 4)))
    with pytest.raises(ValidationError):
        apply_colormap(np.zeros((4, 4)), "sepia")


# -- resize ---------------------------------------------------------------------------

def test_same_size_resize_is_bit_identical():
    x = np.random.default_rng(1).random((1, 16, 16)).astype(np.float32)
    assert resize_frame(x, (16, 16)).tobytes() == x.tobytes()


def test_constant_frame_resizes_to_constant():
    out = resize_frame(np.full((1, 20, 20), 0.3, np.float32), (37, 11))
    assert np.all(out == np.float32(0.3))


def test_blob_round_trip():
    r, c = np.indices((32, 32))
    blob = np.exp(-((r - 15.3) ** 2 + (c - 17.1) ** 2) / (2 * 3.0 ** 2)).astype(np.float32)
    back = resize_frame(resize_frame(blob, (64, 64)), (32, 32))
    assert np.max(np.abs(back - blob)) < 0.05


def test_resize_rejects_tiny_target():
    with pytest.raises(ValidationError):
        resize_frame(np.zeros((16, 16)), (4, 16))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, (1, 9, 12), elements=st.floats(0, 1, width=32)),
       st.integers(8, 40), st.integers(8, 40))
def test_resize_stays_in_input_range(x, h, w):
    out = resize_frame(x, (h, w))
    assert out.shape == (1, h, w)
    assert out.min() >= x.min() and out.max() <= x.max()


def test_resize_frame_object_keeps_metadata():
    f = RAFrame(np.zeros((1, 16, 16)), source_id="a", label="empty", ground_truth=GroundTruth("empty"))
    g = resize_frame(f, (32, 32))
    assert g.hw == (32, 32) and g.source_id == "a" and g.label == "empty"


# -- RAFrame -------------------------------------------------------------------------------

def test_frame_is_read_only():
    f = RAFrame(np.zeros((1, 4, 4)))
    with pytest.raises(ValueError):
        f.pixels[0, 0, 0] = 1.0


def test_frame_validation():
    with pytest.raises(StructuralError):
        RAFrame(np.zeros((2, 4, 4)))
    with pytest.raises(ValidationError):
        RAFrame(np.full((1, 2, 2), np.nan))
    with pytest.raises(ValidationError):
        RAFrame(np.zeros((1, 2, 2)), label="cat")
    with pytest.raises(ValidationError):
        GroundTruth("person")


# -- persistence ------------------------------------------------------------------------------

def _person_frame():
    px = np.random.default_rng(3).random((1, 12, 12)).astype(np.float32)
    gt = GroundTruth("person", (4.5, 7.0), 2.0)
    return RAFrame(px, source_id="p0", label="person", ground_truth=gt,
                   meta={"seed": 5, "mode": "image_level", "params_digest": "abc"})


def test_round_trip_is_bit_exact(tmp_path):
    f = _person_frame()
    save_frame(tmp_path / "f", f)
    g = load_frame(tmp_path / "f")
    assert g.pixels.tobytes() == f.pixels.tobytes()
    assert g.ground_truth == f.ground_truth and g.label == "person" and g.meta["seed"] == 5
    assert (tmp_path / "f.png").exists()


def test_truncated_payload_reports_size_mismatch(tmp_path):
    save_frame(tmp_path / "f", _person_frame())
    raw = tmp_path / "f.f32"
    raw.write_bytes(raw.read_bytes()[:-4])
    with pytest.raises(FrameLoadError, match="size mismatch"):
        load_frame(tmp_path / "f")


def test_person_without_center_rejected(tmp_path):
    save_frame(tmp_path / "f", _person_frame())
    side = tmp_path / "f.json"
    d = json.loads(side.read_text())
    d["blob_center"] = None
    side.write_text(json.dumps(d))
    with pytest.raises(ValidationError, match="blob_center"):
        load_frame(tmp_path / "f")


@pytest.mark.parametrize("field", ["shape", "label", "params_digest"])
def test_missing_sidecar_field_is_named(tmp_path, field):
    save_frame(tmp_path / "f", _person_frame())
    side = tmp_path / "f.json"
    d = json.loads(side.read_text())
    del d[field]
    side.write_text(json.dumps(d))
    with pytest.raises(FrameLoadError, match=field):
        load_frame(tmp_path / "f")


def test_corrupt_sidecar(tmp_path):
    save_frame(tmp_path / "f", _person_frame())
    (tmp_path / "f.json").write_text("{not json")
    with pytest.raises(FrameLoadError):
        load_frame(tmp_path / "f")


# -- manifest ------------------------------------------------------------------------------------

def _entries():
    return [ManifestEntry("frames/a", "empty", GroundTruth("empty"), 1, "image_level", "train"),
            ManifestEntry("frames/b", "person", GroundTruth("person", (3.0, 4.0), 2.0), 2, "image_level", "val")]


def test_manifest_round_trip(tmp_path):
    m = DatasetManifest(_entries(), "d1", {}, (0.7, 0.15, 0.15))
    m.save(tmp_path / "manifest.json")
    back = DatasetManifest.load_file(tmp_path)
    assert back.to_dict() == m.to_dict()
    assert back.split_assignments == {"frames/a": "train", "frames/b": "val"}
    assert back.label_counts() == {"empty": 1, "person": 1}


def test_manifest_rejects_duplicate_paths_and_bad_fractions():
    e = _entries()
    with pytest.raises(ValidationError):
        DatasetManifest([e[0], e[0]], "d", {}, (0.7, 0.15, 0.15))
    with pytest.raises(ValidationError):
        DatasetManifest(e, "d", {}, (0.7, 0.2, 0.2))
    assert math.isclose(sum((0.7, 0.15, 0.15)), 1.0)
