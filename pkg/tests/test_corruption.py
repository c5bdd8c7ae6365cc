import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxdae.corruption import (NoiseSpec, apply_random_noise, apply_slicing_noise, corrupt, draw_slices,
                               noise_floor, slice_count)
from voxdae.mesh import VoxelGrid


def _grid(seed=0, frac=0.3):
    occ = np.zeros((30, 30, 30), dtype=np.uint8)
    occ[3:27, 3:27, 3:27] = np.random.default_rng(seed).random((24, 24, 24)) < frac
    return VoxelGrid(occ)


def test_random_noise_p_zero_is_identity():
    g = _grid()
    np.testing.assert_array_equal(apply_random_noise(g, 0.0, np.random.default_rng(0)).occupancy, g.occupancy)


def test_random_noise_on_empty_grid():
    g = VoxelGrid(np.zeros((30, 30, 30), np.uint8))
    assert apply_random_noise(g, 0.7, np.random.default_rng(0)).count == 0


def test_random_noise_survivor_count():
    occ = np.zeros((30, 30, 30), dtype=np.uint8)
    occ.reshape(-1)[:4000] = 1
    out = apply_random_noise(VoxelGrid(occ), 0.5, np.random.default_rng(1))
    assert abs(out.count - 2000) <= 150


def test_slicing_counts_follow_thirty():
    assert [slice_count(p) for p in (0.10, 0.20, 0.30)] == [3, 6, 9]
    assert slice_count(0.30, base=24) == 7


def test_slicing_removes_exactly_n_distinct_planes():
    pairs = draw_slices(0.30, np.random.default_rng(0))
    assert len(pairs) == 9 and len(set(pairs)) == 9
    full = VoxelGrid(np.ones((30, 30, 30), np.uint8))
    out = apply_slicing_noise(full, 0.30, np.random.default_rng(0))
    zeroed = sum(1 for a in range(3) for i in range(30) if not np.take(out.occupancy, i, axis=a).any())
    assert zeroed == 9


def test_slicing_zero_percent_identity():
    g = _grid()
    np.testing.assert_array_equal(apply_slicing_noise(g, 0.0, np.random.default_rng(0)).occupancy, g.occupancy)


def test_slicing_rejects_bad_percent():
    with pytest.raises(ValueError):
        apply_slicing_noise(_grid(), 1.2, np.random.default_rng(0))


def test_slicing_active_region_base():
    pairs = draw_slices(1.0, np.random.default_rng(0), base=24)
    assert len(pairs) == 24
    assert all(3 <= i < 27 for _, i in pairs)


@given(seed=st.integers(0, 2 ** 32 - 1), p=st.floats(0, 1), pct=st.floats(0, 1))
@settings(max_examples=25, deadline=None)
def test_corruptions_are_contractions_and_reproducible(seed, p, pct):
    g = _grid(seed % 7)
    for noise in (NoiseSpec("random", p=p), NoiseSpec("slicing", percent=pct)):
        a = corrupt(g, noise, np.random.default_rng(seed))
        b = corrupt(g, noise, np.random.default_rng(seed))
        assert np.all(a.occupancy <= g.occupancy)
        np.testing.assert_array_equal(a.occupancy, b.occupancy)
        assert a.count <= g.count


def test_noise_floor_units():
    g = _grid()
    c = apply_random_noise(g, 0.5, np.random.default_rng(3))
    assert noise_floor(g, c) == pytest.approx(100 * (g.count - c.count) / 13824)
    assert noise_floor(g, g) == 0


def test_noise_spec_parsing():
    assert NoiseSpec.parse("random:0.5") == NoiseSpec("random", p=0.5)
    assert NoiseSpec.parse("slice:0.30", seed=4) == NoiseSpec("slicing", percent=0.3, seed=4)
    assert NoiseSpec.parse("none").kind == "none"
    for bad in ("random", "slice:x", "gauss:0.1", "random:2"):
        with pytest.raises(ValueError):
            NoiseSpec.parse(bad)
    assert NoiseSpec.parse("slice:0.3").label() == "slice:0.3"
