import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxdae import evaluate as E
from voxdae import model as M
from voxdae.corruption import NoiseSpec, corrupt, noise_floor
from voxdae.datasets import synthetic_split
from voxdae.mesh import VoxelGrid

NARROW = M.ModelSpec(conv1=(4, 9, 3), conv2=(8, 4, 2), deconv1=(4, 5, 2))


@pytest.fixture(scope="module")
def split():
    return synthetic_split(3, 2, seed=1)


@pytest.fixture(scope="module")
def net():
    return M.init_model(NARROW, 0, scheme="he")


def test_error_of_exact_reconstruction_is_zero(split):
    g = split[0][0]
    assert E.reconstruction_error(g.occupancy.astype(float), g) == 0.0


def test_error_of_empty_reconstruction(split):
    g = split[0][0]
    assert E.reconstruction_error(np.zeros((30, 30, 30)), g) == pytest.approx(100 * g.count / 13824)


def test_error_denominator_is_active_region():
    a = np.zeros((30, 30, 30))
    b = a.copy()
    b[0, 0, 0] = 1  # a padding voxel still counts as a mismatch
    assert E.reconstruction_error(a, b) == 100 / 13824


@given(st.integers(0, 2 ** 31), st.floats(0.05, 0.95))
@settings(max_examples=20, deadline=None)
def test_error_symmetric_and_zero_iff_equal(seed, frac):
    rng = np.random.default_rng(seed)
    a = (rng.random((30, 30, 30)) < frac).astype(np.uint8)
    b = (rng.random((30, 30, 30)) < frac).astype(np.uint8)
    assert E.reconstruction_error(a, b) == E.reconstruction_error(b, a)
    assert (E.reconstruction_error(a, b) == 0) == np.array_equal(a, b)


def test_identity_reconstructor_scores_noise_floor(split):
    g = split[1][0]
    noisy = corrupt(g, NoiseSpec("random", p=0.5), np.random.default_rng(0))
    assert E.reconstruction_error(noisy.occupancy, g) == noise_floor(g, noisy)


def test_error_shape_check():
    with pytest.raises(ValueError):
        E.reconstruction_error(np.zeros((24, 24, 24)), np.zeros((30, 30, 30)))


def test_report_mean_and_csv():
    rows = [("a", {"error_percent": 1.0}), ("b", {"error_percent": 2.0}), ("c", {"error_percent": 4.5})]
    r = E.EvalReport("t", rows, noise="random:0.5", checkpoint="abc", config="def", timestamp=1, runtime_ms=3)
    assert abs(r.mean()["error_percent"] - 2.5) < 1e-9
    text = r.to_csv()
    assert text.splitlines()[4:] == ["class,error_percent", "a,1.000000", "b,2.000000", "c,4.500000",
                                     "mean,2.500000"]
    assert "Mean" in r.to_table()
    again = E.EvalReport("t", rows, noise="random:0.5", checkpoint="abc", config="def", timestamp=99)
    assert again.to_csv() == text


def test_denoise_table_is_reproducible(net, split):
    test = split[1]
    noise = NoiseSpec("random", p=0.5, seed=3)
    a = E.denoise_table(net, test, noise, class_names=["box", "cylinder", "cross", "l-shape"])
    b = E.denoise_table(net, test, noise, class_names=["box", "cylinder", "cross", "l-shape"])
    assert a.to_csv() == b.to_csv()
    assert [n for n, _ in a.rows] == ["box", "cylinder", "cross", "l-shape"]
    assert set(a.columns) == {"error_percent", "noise_floor_percent"}
    assert a.checkpoint == net.digest()


def test_interpolation_endpoints(net, split):
    src, dst = split[0][0], split[0][3]
    out = E.interpolate(net, src, dst)
    assert len(out) == 10
    np.testing.assert_array_equal(out[0], M.decode(net, M.encode(net, src)))
    np.testing.assert_array_equal(out[-1], M.decode(net, M.encode(net, dst)))
    same = E.interpolate(net, src, src)
    for o in same[1:]:
        np.testing.assert_array_equal(o, same[0])
    with pytest.raises(ValueError):
        E.interpolate(net, src, dst, steps=1)


def test_embeddings_shape_and_roundtrip(net, split, tmp_path):
    emb = E.extract_embeddings(net, split[0], batch=5)
    assert emb.features.shape == (12, NARROW.bottleneck)
    assert emb.labels.tolist() == [0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]
    emb.save(tmp_path / "e.npz")
    back = E.EmbeddingSet.load(tmp_path / "e.npz")
    np.testing.assert_array_equal(back.features, emb.features)
    assert back.sources == emb.sources
    with pytest.raises(ValueError):
        E.EmbeddingSet(np.zeros((3, 2)), np.zeros(2))


def _clusters(rng, n, shift, labels=None):
    x = rng.standard_normal((2 * n, 20))
    y = np.repeat([0, 1], n)
    x[y == 1] += shift
    return E.EmbeddingSet(x, y if labels is None else labels)


def test_probe_separable_clusters():
    rng = np.random.default_rng(0)
    assert E.linear_probe(_clusters(rng, 30, 6.0), _clusters(rng, 20, 6.0)) == 100.0


def test_probe_random_labels_near_chance():
    accs = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        tr = E.EmbeddingSet(rng.standard_normal((100, 20)), rng.permutation(np.repeat([0, 1], 50)))
        te = E.EmbeddingSet(rng.standard_normal((100, 20)), rng.permutation(np.repeat([0, 1], 50)))
        accs.append(E.linear_probe(tr, te, seed=seed))
    assert abs(np.mean(accs) - 50) <= 10


def test_probe_deterministic():
    rng = np.random.default_rng(4)
    tr, te = _clusters(rng, 20, 1.0), _clusters(rng, 20, 1.0)
    assert E.linear_probe(tr, te, seed=2) == E.linear_probe(tr, te, seed=2)


def test_fine_tune_runs(net, split):
    acc = E.fine_tune_eval(net, split[0], split[1], 4, E.FineTuneConfig(epochs=3, hidden=8))
    assert 0 <= acc <= 100
    joint = E.fine_tune(net.copy(), split[0], 4, E.FineTuneConfig(epochs=1, hidden=8, joint=True))
    assert joint.params["out.weight"].shape == (4, 8)


def test_bench_reports_positive_ms(net):
    assert E.bench_inference(net, n=2) > 0


def test_render_outputs(tmp_path):
    vol = np.zeros((30, 30, 30))
    vol[10:20, 12:14, 5:8] = 1
    paths = E.render_slices(VoxelGrid(vol.astype(np.uint8)), tmp_path / "out" / "shape", scale=2)
    names = sorted(p.name for p in paths)
    assert names == ["shape.obj", "shape_montage.ppm", "shape_x.pgm", "shape_y.pgm", "shape_z.pgm"]
    pgm = (tmp_path / "out" / "shape_z.pgm").read_bytes()
    assert pgm.startswith(b"P5\n60 60\n255\n") and len(pgm) == len(b"P5\n60 60\n255\n") + 3600
    obj = (tmp_path / "out" / "shape.obj").read_text().splitlines()
    assert sum(l.startswith("v ") for l in obj) == 8 * 60
    assert sum(l.startswith("f ") for l in obj) == 6 * 60
    assert (tmp_path / "out" / "shape_montage.ppm").read_bytes().startswith(b"P6\n")
