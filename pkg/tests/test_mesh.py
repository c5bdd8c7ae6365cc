import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxdae import mesh as V
from voxdae.datasets import (MODELNET10, DatasetError, DatasetManifest, SYNTHETIC_CLASSES, load_dataset,
                             synthetic_shapes, synthetic_split)

TETRA = """OFF
4 4 0
0 0 0
1 0 0
0 1 0
0 0 1
3 0 1 2
3 0 1 3
3 0 2 3
3 1 2 3
"""


def test_parse_tetrahedron():
    m = V.parse_off(TETRA)
    assert m.vertices.shape == (4, 3)
    assert m.faces.shape == (4, 3)
    np.testing.assert_array_equal(m.faces[3], [1, 2, 3])


def test_parse_glued_header_matches_spaced():
    glued = TETRA.replace("OFF\n4 4 0", "OFF4 4 0").encode()
    a, b = V.parse_off(TETRA.encode()), V.parse_off(glued)
    np.testing.assert_array_equal(a.vertices, b.vertices)
    np.testing.assert_array_equal(a.faces, b.faces)


def test_parse_fan_triangulates_ngons():
    text = "OFF\n# a pentagon\n5 1 0\n0 0 0\n1 0 0\n1 1 0\n0.5 1.5 0\n0 1 0\n5 0 1 2 3 4\n"
    m = V.parse_off(text)
    np.testing.assert_array_equal(m.faces, [[0, 1, 2], [0, 2, 3], [0, 3, 4]])


def test_too_few_vertices_warns():
    with pytest.warns(UserWarning, match="cannot enclose"):
        V.parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")


def test_parse_ignores_comments_and_color():
    text = "OFF\n# comment\n4 1 0\n0 0 0\n1 0 0\n0 1 0 # trailing\n0 0 1\n3 0 1 2 255 0 0\n"
    m = V.parse_off(text)
    assert m.faces.shape == (1, 3)


def test_parse_missing_header():
    with pytest.raises(V.OffHeaderError) as exc:
        V.parse_off("PLY\n3 1 0\n")
    assert exc.value.line == 1


def test_parse_count_mismatch():
    text = "OFF\n4 4 0\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 1 2\n"
    with pytest.raises(V.OffCountError, match="expected 4 faces"):
        V.parse_off(text)


def test_parse_index_out_of_range():
    text = TETRA.replace("3 1 2 3", "3 1 2 99")
    with pytest.raises(V.OffIndexError) as exc:
        V.parse_off(text)
    assert exc.value.line == 10


def test_parse_short_face():
    with pytest.raises(V.OffCountError):
        V.parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n4 0 1 2\n")


def test_off_roundtrip():
    m = V.sphere_mesh(0.7, 1)
    again = V.parse_off(V.write_off(m))
    np.testing.assert_array_equal(m.vertices, again.vertices)
    np.testing.assert_array_equal(m.faces, again.faces)
    third = V.parse_off(V.write_off(again))
    np.testing.assert_array_equal(third.vertices, again.vertices)


@given(st.lists(st.tuples(*[st.floats(-1e6, 1e6, allow_nan=False)] * 3), min_size=4, max_size=8))
@settings(max_examples=30)
def test_off_roundtrip_property(points):
    m = V.Mesh(np.array(points), np.array([[0, 1, 2], [0, 2, 3]]))
    again = V.parse_off(V.write_off(m))
    np.testing.assert_array_equal(m.vertices, again.vertices)


def test_rotation_identity_and_closure():
    m = V.sphere_mesh(1.0, 1)
    m.vertices = m.vertices * [1.0, 2.0, 3.0] + 0.5
    np.testing.assert_array_equal(V.rotate_mesh(m, 0).vertices, m.vertices)
    twice = V.rotate_mesh(V.rotate_mesh(m, 6), 6)
    np.testing.assert_allclose(twice.vertices, m.vertices, atol=1e-9)


def test_rotation_quarter_turn_swaps_footprint():
    m = V.box_mesh((0, 0, 0), (4, 2, 1))
    r = V.rotate_mesh(m, 3)
    ext = r.vertices.max(axis=0) - r.vertices.min(axis=0)
    np.testing.assert_allclose(ext, [2, 4, 1], atol=1e-9)


def test_rotation_about_other_axis():
    m = V.box_mesh((0, 0, 0), (4, 2, 1))
    r = V.rotate_mesh(m, 3, axis=0)
    ext = r.vertices.max(axis=0) - r.vertices.min(axis=0)
    np.testing.assert_allclose(ext, [4, 1, 2], atol=1e-9)


def test_voxelize_full_cube():
    g = V.voxelize(V.box_mesh((-1, -1, -1), (1, 1, 1)))
    assert g.occupancy.shape == (30, 30, 30)
    assert g.count == 24 ** 3
    assert g.occupancy[3:27, 3:27, 3:27].all()
    assert g.padding_is_empty()


def test_voxelize_sphere_volume():
    g = V.voxelize(V.sphere_mesh(5.0, 3))
    expected = math.pi / 6 * 12 ** 3 * 8
    assert abs(g.count - expected) <= 0.10 * expected
    assert g.padding_is_empty()


def test_voxelize_is_solid():
    g = V.voxelize(V.box_mesh((0, 0, 0), (10, 10, 10)))
    # centre voxel is enclosed, not on the surface
    assert g.occupancy[15, 15, 15] == 1


def test_voxelize_open_surface_is_not_filled():
    # a single square: nothing encloses volume, so only a sheet is marked
    m = V.Mesh(np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0.0]]), np.array([[0, 1, 2], [0, 2, 3]]))
    g = V.voxelize(m, supersample=1)
    assert 0 < g.count <= 2 * 24 * 24
    assert g.padding_is_empty()


def test_voxelize_degenerate():
    m = V.Mesh(np.zeros((4, 3)), np.array([[0, 1, 2]]))
    with pytest.raises(V.DegenerateMeshError):
        V.voxelize(m)
    with pytest.raises(V.DegenerateMeshError):
        V.voxelize(V.Mesh(np.eye(4, 3), np.zeros((0, 3), dtype=int)))


@pytest.mark.parametrize("ext", [(10, 6, 20), (3, 7, 5), (12, 12, 4)])
def test_voxelize_rotation_consistent_at_quarter_turns(ext):
    m = V.box_mesh((0, 0, 0), ext)
    a = V.voxelize(m).occupancy
    b = V.voxelize(V.rotate_mesh(m, 3)).occupancy
    np.testing.assert_array_equal(b, np.rot90(a, 1, axes=(1, 2)))


@given(st.tuples(*[st.floats(0.5, 10)] * 3), st.integers(0, 11))
@settings(max_examples=15, deadline=None)
def test_padding_always_empty(ext, k):
    g = V.voxelize(V.rotate_mesh(V.box_mesh((0, 0, 0), ext), k), supersample=2)
    assert g.padding_is_empty()
    assert set(np.unique(g.occupancy)) <= {0, 1}


def test_augment_yields_twelve():
    grids = V.augment(V.box_mesh((0, 0, 0), (3, 2, 1)), supersample=1)
    assert [g.rotation for g in grids] == list(range(12))


def test_voxg_roundtrip(tmp_path):
    occ = (np.random.default_rng(0).random((30, 30, 30)) < 0.2).astype(np.uint8)
    g = V.VoxelGrid(occ, label=3)
    V.write_voxg(g, tmp_path / "a.voxg")
    back = V.read_voxg(tmp_path / "a.voxg")
    np.testing.assert_array_equal(back.occupancy, occ)
    assert back.label == 3
    V.write_voxg(V.VoxelGrid(occ), tmp_path / "b.voxg")
    assert V.read_voxg(tmp_path / "b.voxg").label is None


def test_voxg_layout_is_x_fastest():
    occ = np.zeros((2, 3, 4), dtype=np.uint8)  # z, y, x
    occ[0, 0, 1] = 1  # x = 1
    data = V.VoxelGrid(occ).to_bytes()
    assert data[:4] == b"VOXG" and data[4] == 1
    assert np.frombuffer(data[5:17], "<u4").tolist() == [4, 3, 2]
    assert data[17 + 1] == 1 and sum(data[17 : 17 + 24]) == 1
    assert data[-2:] == b"\xff\xff"


def test_voxg_without_label_trailer():
    data = V.VoxelGrid(np.zeros((2, 2, 2), np.uint8), label=5).to_bytes()[:-2]
    assert V.VoxelGrid.from_bytes(data).label is None


def test_voxg_bad_magic():
    with pytest.raises(ValueError):
        V.VoxelGrid.from_bytes(b"NOPE" + bytes(20))


# --- datasets -----------------------------------------------------------------------


def _fake_modelnet(root, classes, n_train=3, n_test=2):
    box = V.write_off(V.box_mesh((0, 0, 0), (2, 1, 1)))
    for c in classes:
        for phase, n in (("train", n_train), ("test", n_test)):
            d = root / c / phase
            d.mkdir(parents=True)
            for i in range(n):
                (d / f"{c}_{i + 1:04d}.off").write_text(box)


def test_manifest_split_rule(tmp_path):
    _fake_modelnet(tmp_path, MODELNET10, n_train=85, n_test=25)
    man = DatasetManifest.scan(tmp_path, 10, "train")
    assert all(len(v) == 80 for v in man.models.values())
    assert man.models["bed"][0].name == "bed_0001.off"
    test = DatasetManifest.scan(tmp_path, 10, "test")
    assert all(len(v) == 20 for v in test.models.values())
    assert not set(man.models["bed"]) & set(test.models["bed"])


def test_load_dataset_order_and_disjointness(tmp_path):
    _fake_modelnet(tmp_path, MODELNET10, n_train=2, n_test=1)
    train = list(load_dataset(tmp_path, 10, "train", with_rotations=True))
    assert len(train) == 10 * 2 * 12
    assert [g.rotation for g in train[:13]] == list(range(12)) + [0]
    assert [g.label for g in train[::24]] == list(range(10))
    test = list(load_dataset(tmp_path, 10, "test", with_rotations=False))
    assert len(test) == 10
    assert not {g.source for g in train} & {g.source for g in test}


def test_load_dataset_missing_class(tmp_path):
    _fake_modelnet(tmp_path, MODELNET10[:3])
    with pytest.raises(DatasetError, match="found: bathtub, bed, chair"):
        list(load_dataset(tmp_path, 10, "train"))


@pytest.mark.parametrize("kind", SYNTHETIC_CLASSES)
def test_synthetic_shapes(kind):
    grids = synthetic_shapes(kind, 5, np.random.default_rng(0))
    for g in grids:
        assert g.padding_is_empty()
        assert g.count > 0
        assert g.label == SYNTHETIC_CLASSES.index(kind)


def test_synthetic_split_is_deterministic_and_disjoint():
    tr1, te1 = synthetic_split(3, 2, seed=4)
    tr2, te2 = synthetic_split(3, 2, seed=4)
    for a, b in zip(tr1 + te1, tr2 + te2):
        np.testing.assert_array_equal(a.occupancy, b.occupancy)
    assert len(tr1) == 12 and len(te1) == 8
    assert not {g.source for g in tr1} & {g.source for g in te1}
