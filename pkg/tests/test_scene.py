import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatsem.scene import (ATTR_DIM, CropView, GaussianScene, PLY_ATTRIBUTES, PlyError,
                            SceneValidationError, SemanticFeatureField, load_feature_field,
                            load_scene_ply, normalize_quaternions, save_feature_field,
                            save_scene_ply)

from conftest import random_scene


def write_ply(path, rows, names):
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(rows)}"]
    header += [f"property float {n}" for n in names] + ["end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode())
        fh.write(np.asarray(rows, "<f4").tobytes())


def test_attribute_count():
    assert ATTR_DIM == 59
    assert len(PLY_ATTRIBUTES) == 59


def test_raw_activation_single_vertex(tmp_path):
    row = np.zeros(59, np.float32)
    row[6] = 1.0  # rot_0 = w
    write_ply(tmp_path / "one.ply", [row], PLY_ATTRIBUTES)
    s = load_scene_ply(tmp_path / "one.ply", "raw")
    assert len(s) == 1
    np.testing.assert_array_equal(s.scales[0], [1, 1, 1])
    assert s.opacities[0] == 0.5
    np.testing.assert_array_equal(s.rotations[0], [1, 0, 0, 0])


def test_roundtrip_activated_bit_exact(tmp_path, scene100):
    save_scene_ply(scene100, tmp_path / "s.ply")
    back = load_scene_ply(tmp_path / "s.ply", "activated")
    assert back.attributes(np.float32).tobytes() == scene100.attributes(np.float32).tobytes()


def test_roundtrip_raw_close(tmp_path, scene100):
    save_scene_ply(scene100, tmp_path / "s.ply", activation="raw")
    back = load_scene_ply(tmp_path / "s.ply", "raw")
    np.testing.assert_allclose(back.attributes(), scene100.attributes(), rtol=1e-5, atol=1e-6)


def test_missing_attribute(tmp_path):
    names = [n for n in PLY_ATTRIBUTES if n != "f_rest_44"]
    write_ply(tmp_path / "bad.ply", [np.ones(len(names))], names)
    with pytest.raises(PlyError, match="missing attribute f_rest_44"):
        load_scene_ply(tmp_path / "bad.ply")


def test_non_finite_names_index(tmp_path):
    rows = np.zeros((3, 59), np.float32)
    rows[:, 6] = 1
    rows[2, 0] = np.nan
    write_ply(tmp_path / "nan.ply", rows, PLY_ATTRIBUTES)
    with pytest.raises(SceneValidationError, match="primitive 2"):
        load_scene_ply(tmp_path / "nan.ply")


def test_non_binary_rejected(tmp_path):
    (tmp_path / "a.ply").write_bytes(b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n")
    with pytest.raises(PlyError):
        load_scene_ply(tmp_path / "a.ply")


def test_quaternions_normalized_on_load(tmp_path):
    row = np.zeros(59, np.float32)
    row[6:10] = [2, 0, 0, 0]
    write_ply(tmp_path / "q.ply", [row], PLY_ATTRIBUTES)
    s = load_scene_ply(tmp_path / "q.ply", "raw")
    assert abs(np.linalg.norm(s.rotations[0]) - 1) < 1e-6


@given(st.lists(st.floats(-10, 10), min_size=4, max_size=4).filter(
    lambda v: np.linalg.norm(v) > 1e-3))
def test_normalize_quaternions_unit(q):
    out = normalize_quaternions(np.array([q], np.float32))
    assert abs(np.linalg.norm(out[0].astype(np.float64)) - 1) < 1e-6


def test_scene_validation():
    s = random_scene(5)
    s.validate()
    with pytest.raises(SceneValidationError, match="primitive 3"):
        s.replace(opacities=np.array([0.5, 0.5, 0.5, 1.5, 0.5])).validate()
    sc = s.scales.copy()
    sc[1, 2] = -1
    with pytest.raises(SceneValidationError, match="scale at primitive 1"):
        s.replace(scales=sc).validate()


def test_scene_arrays_read_only(scene100):
    with pytest.raises(ValueError):
        scene100.centers[0, 0] = 5.0


def test_primitive_view(scene100):
    g = scene100[3]
    np.testing.assert_array_equal(g.as_vector(), scene100.attributes(np.float32)[3])
    assert len(list(scene100)) == 100


def test_from_attributes_roundtrip(scene100):
    a = scene100.attributes()
    b = GaussianScene.from_attributes(a).attributes()
    np.testing.assert_array_equal(a.astype(np.float32), b.astype(np.float32))


def test_feature_field_roundtrip(tmp_path, rng):
    rows = rng.normal(size=(20, 8))
    rows[[3, 7]] = 0
    f = SemanticFeatureField.from_rows(rows, scene_id="x")
    assert f.check_unit()
    assert not f.labeled[3] and not f.labeled[7]
    save_feature_field(f, tmp_path / "f.ssff")
    g = load_feature_field(tmp_path / "f.ssff")
    assert g.features.tobytes() == f.features.tobytes()
    np.testing.assert_array_equal(g.labeled, f.labeled)


def test_feature_field_bad_magic(tmp_path):
    (tmp_path / "x.ssff").write_bytes(b"NOPE" + struct.pack("<IQI", 1, 0, 0))
    with pytest.raises(ValueError, match="magic"):
        load_feature_field(tmp_path / "x.ssff")


def test_feature_field_truncated(tmp_path, rng):
    f = SemanticFeatureField.from_rows(rng.normal(size=(4, 3)))
    save_feature_field(f, tmp_path / "f.ssff")
    data = (tmp_path / "f.ssff").read_bytes()
    (tmp_path / "f.ssff").write_bytes(data[:-2])
    with pytest.raises(ValueError, match="size"):
        load_feature_field(tmp_path / "f.ssff")


def test_crop_view_dict_roundtrip():
    v = CropView(np.array([1, 4, 9]), "local", [{"op": "crop", "k": 3}])
    w = CropView.from_dict(v.to_dict())
    np.testing.assert_array_equal(v.indices, w.indices)
    assert w.kind == "local" and w.augmentation_log == v.augmentation_log


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2 ** 31))
def test_roundtrip_property(tmp_path_factory, n, seed):
    s = random_scene(n, seed)
    p = tmp_path_factory.mktemp("rt") / "s.ply"
    save_scene_ply(s, p)
    assert load_scene_ply(p, "activated").attributes(np.float32).tobytes() == \
        s.attributes(np.float32).tobytes()
