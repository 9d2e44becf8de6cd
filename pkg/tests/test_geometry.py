import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cdseg import geometry as geo
from cdseg.diffusion import PerturbSpec


def make_cloud(positions, labels=None, features=None, k=4):
    positions = np.asarray(positions, dtype=float)
    n = len(positions)
    if features is None:
        features = np.zeros((n, 2))
    if labels is None:
        labels = np.zeros(n, dtype=int)
    return geo.PointCloud(positions, features, labels, np.array([n]), k)


def random_cloud(rng, n=100, batches=1, k=4):
    sizes = rng.integers(1, n, batches) if batches > 1 else [n]
    clouds = [make_cloud(rng.uniform(0, 5, (s, 3)),
                         labels=rng.integers(0, k, s),
                         features=rng.standard_normal((s, 2)), k=k)
              for s in sizes]
    return geo.concat_clouds(clouds)


class TestPointCloud:
    def test_offsets_validation(self):
        with pytest.raises(ValueError, match="offsets"):
            geo.PointCloud(np.zeros((3, 3)), np.zeros((3, 1)),
                           np.zeros(3, dtype=int), np.array([2]))

    def test_label_range_validation(self):
        with pytest.raises(ValueError, match="labels"):
            make_cloud(np.zeros((2, 3)), labels=np.array([0, 9]), k=4)


class TestSerialize:
    def test_single_point(self):
        order = geo.serialize(make_cloud([[0.5, 0.5, 0.5]]), "Z", 0.1)
        assert order.permutation.tolist() == [0]

    def test_morton_hand_case(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
        order = geo.serialize(make_cloud(pts), "Z", 1.0)
        assert order.codes.tolist() == [0, 1, 2, 3]
        assert order.permutation.tolist() == [0, 1, 2, 3]

    @pytest.mark.parametrize("order_name", geo.ORDERS)
    def test_permutation_bijection(self, order_name):
        rng = np.random.default_rng(0)
        cloud = random_cloud(rng, n=200, batches=3)
        so = geo.serialize(cloud, order_name, 0.05)
        assert sorted(so.permutation.tolist()) == list(range(cloud.num_points))

    @pytest.mark.parametrize("order_name", geo.ORDERS)
    def test_codes_nondecreasing_per_batch(self, order_name):
        rng = np.random.default_rng(1)
        cloud = random_cloud(rng, n=150, batches=2)
        so = geo.serialize(cloud, order_name, 0.05)
        start = 0
        for end in cloud.offsets:
            sorted_codes = so.codes[so.permutation[start:end]]
            assert np.all(np.diff(sorted_codes.astype(np.int64)) >= 0)
            start = end

    def test_overflow_raises(self):
        cloud = make_cloud([[0, 0, 0], [1e6, 0, 0]])
        with pytest.raises(geo.ResolutionError, match="coarser"):
            geo.serialize(cloud, "Z", 1e-4)

    def test_hilbert_locality_beats_z(self):
        h_dists, z_dists = [], []
        for seed in range(20):
            rng = np.random.default_rng(seed)
            pos = rng.uniform(0, 1, (1000, 3))
            h_dists.append(geo.neighbor_rank_distance(pos, "Hilbert", 1 / 64))
            z_dists.append(geo.neighbor_rank_distance(pos, "Z", 1 / 64))
        assert np.mean(h_dists) <= np.mean(z_dists)

    def test_rank_distance_on_line(self):
        # Points along a line: every nearest neighbor is adjacent in any order.
        pos = np.stack([np.linspace(0, 1, 32), np.zeros(32), np.zeros(32)], axis=1)
        assert geo.neighbor_rank_distance(pos, "Z", 1 / 64) == 1.0


class TestVoxelize:
    def test_unanimous_majority(self):
        cloud = make_cloud([[0.001, 0, 0], [0.002, 0, 0]], labels=np.array([1, 1]))
        out, _ = geo.voxelize(cloud, 0.02)
        assert out.num_points == 1 and out.labels.tolist() == [1]

    def test_identity_when_fine(self):
        rng = np.random.default_rng(2)
        cloud = random_cloud(rng, n=50)
        out, _ = geo.voxelize(cloud, 1e-6)
        assert out.num_points == cloud.num_points

    def test_hand_bucketing(self):
        pts = [[0, 0, 0], [0.01, 0, 0], [0.05, 0, 0], [0.06, 0, 0]]
        out, _ = geo.voxelize(make_cloud(pts), 0.02)
        assert out.num_points == 3

    def test_majority_tie_break_lowest(self):
        cloud = make_cloud([[0, 0, 0], [0.001, 0, 0]], labels=np.array([3, 1]))
        out, _ = geo.voxelize(cloud, 0.02)
        assert out.labels.tolist() == [1]

    def test_mean_aggregation_and_devox(self):
        cloud = make_cloud([[0, 0, 0], [0.01, 0, 0]],
                           features=np.array([[1.0, 0.0], [3.0, 2.0]]))
        out, pmap = geo.voxelize(cloud, 0.05)
        np.testing.assert_allclose(out.features, [[2.0, 1.0]])
        back = geo.grid_unpool(out.features, pmap)
        assert back.shape == (2, 2)

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        cloud = random_cloud(rng, n=300, batches=2)
        v1, _ = geo.voxelize(cloud, 0.5)
        v2, _ = geo.voxelize(v1, 0.5)
        assert v2.num_points == v1.num_points

    def test_empty_cloud(self):
        cloud = geo.PointCloud(np.zeros((1, 3)), np.zeros((1, 1)),
                               np.zeros(1, dtype=int), np.array([1]))
        out, _ = geo.voxelize(cloud, 0.1)
        assert out.num_points == 1


class TestPooling:
    def test_singleton_identity(self):
        pmap = geo.PoolingMap(parent=np.arange(4), counts=np.ones(4, dtype=int))
        x = np.arange(8.0).reshape(4, 2)
        np.testing.assert_array_equal(geo.grid_pool(x, pmap, "mean"), x)

    def test_mean_and_max(self):
        pmap = geo.PoolingMap(parent=np.array([0, 0]), counts=np.array([2]))
        x = np.array([[1.0], [3.0]])
        assert geo.grid_pool(x, pmap, "mean")[0, 0] == 2.0
        assert geo.grid_pool(x, pmap, "max")[0, 0] == 3.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(4)
        parent = rng.integers(0, 4, 16)
        counts = np.bincount(parent, minlength=4)
        pmap = geo.PoolingMap(parent=parent, counts=counts)
        x = rng.standard_normal((16, 3))
        got = geo.grid_pool(x, pmap, "mean")
        for cell in range(4):
            np.testing.assert_allclose(got[cell], x[parent == cell].mean(axis=0))

    def test_unpool_round_trip(self):
        rng = np.random.default_rng(5)
        parent = rng.integers(0, 5, 20)
        pmap = geo.PoolingMap(parent=parent, counts=np.bincount(parent, minlength=5))
        coarse = rng.standard_normal((5, 2))
        back = geo.grid_pool(geo.grid_unpool(coarse, pmap), pmap, "mean")
        np.testing.assert_allclose(back, coarse)

    def test_pool_unpool_projection(self):
        rng = np.random.default_rng(6)
        parent = rng.integers(0, 6, 30)
        pmap = geo.PoolingMap(parent=parent, counts=np.bincount(parent, minlength=6))
        x = rng.standard_normal((30, 2))
        once = geo.grid_unpool(geo.grid_pool(x, pmap, "mean"), pmap)
        twice = geo.grid_unpool(geo.grid_pool(once, pmap, "mean"), pmap)
        np.testing.assert_allclose(twice, once)

    def test_inconsistent_map(self):
        pmap = geo.PoolingMap(parent=np.array([0, 0]), counts=np.array([2]))
        with pytest.raises(ValueError, match="rows"):
            geo.grid_pool(np.zeros((3, 1)), pmap)


class TestNormalize:
    def test_hand_scaling(self):
        cloud = make_cloud([[0, 0, 0], [2, 0, 0], [2, 1, 0]])
        out, rec = geo.normalize(cloud)
        np.testing.assert_allclose(rec.center[0], [1.0, 0.5, 0.0])
        assert rec.scale[0] == 2.0
        np.testing.assert_allclose(out.positions[0], [-0.5, -0.25, 0.0])

    def test_round_trip(self):
        rng = np.random.default_rng(7)
        cloud = random_cloud(rng, n=80, batches=3)
        normed, rec = geo.normalize(cloud)
        assert np.abs(normed.positions).max() <= 0.5 + 1e-12
        back = geo.denormalize(normed, rec)
        np.testing.assert_allclose(back.positions, cloud.positions, atol=1e-6)


class TestPerturb:
    def test_tau_zero_identity(self):
        rng = np.random.default_rng(8)
        cloud = random_cloud(rng, n=40)
        out = geo.perturb(cloud, PerturbSpec("gaussian", 0.0), rng)
        np.testing.assert_array_equal(out.positions, cloud.positions)

    def test_displacement_std(self):
        rng = np.random.default_rng(9)
        cloud = make_cloud(np.zeros((10**5, 3)))
        out = geo.perturb(cloud, PerturbSpec("gaussian", 0.3), rng)
        assert (out.positions - cloud.positions).std() == pytest.approx(0.3, rel=0.02)

    def test_labels_untouched(self):
        rng = np.random.default_rng(10)
        cloud = random_cloud(rng, n=40)
        out = geo.perturb(cloud, PerturbSpec("laplace", 1.0), rng)
        np.testing.assert_array_equal(out.labels, cloud.labels)
        np.testing.assert_array_equal(out.offsets, cloud.offsets)


class TestSubsample:
    def test_identity(self):
        scenes = list(range(10))
        assert geo.subsample_dataset(scenes, 1.0, np.random.default_rng(0)) == scenes

    def test_half(self):
        out = geo.subsample_dataset(list(range(10)), 0.5, np.random.default_rng(0))
        assert len(out) == 5

    def test_deterministic(self):
        a = geo.subsample_dataset(list(range(20)), 0.25, np.random.default_rng(42))
        b = geo.subsample_dataset(list(range(20)), 0.25, np.random.default_rng(42))
        assert a == b


class TestSynthScene:
    def test_two_class_no_blobs(self):
        spec = geo.SceneSpec(num_points=500, num_classes=2, num_blobs=0)
        cloud = geo.synth_scene(spec, np.random.default_rng(0))
        assert set(np.unique(cloud.labels)) <= {0, 1}

    def test_all_classes_present(self):
        spec = geo.SceneSpec(num_points=2048, num_classes=4)
        cloud = geo.synth_scene(spec, np.random.default_rng(1))
        assert set(np.unique(cloud.labels)) == {0, 1, 2, 3}

    def test_deterministic_under_seed(self):
        spec = geo.SceneSpec()
        a = geo.synth_scene(spec, np.random.default_rng(5))
        b = geo.synth_scene(spec, np.random.default_rng(5))
        np.testing.assert_array_equal(a.positions, b.positions)
        np.testing.assert_array_equal(a.features, b.features)

    def test_unit_normals(self):
        cloud = geo.synth_scene(geo.SceneSpec(), np.random.default_rng(2))
        norms = np.linalg.norm(cloud.features[:, 3:6], axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-3)

    def test_infeasible_spec(self):
        with pytest.raises(geo.GenerationError, match="blobs"):
            geo.synth_scene(geo.SceneSpec(num_classes=6, num_blobs=1),
                            np.random.default_rng(0))


class TestFileIO:
    def test_round_trip(self, tmp_path):
        cloud = geo.synth_scene(geo.SceneSpec(num_points=128), np.random.default_rng(3))
        geo.save_cloud(cloud, tmp_path / "a.cdseg")
        back = geo.load_cloud(tmp_path / "a.cdseg")
        np.testing.assert_array_equal(back.positions, cloud.positions)
        np.testing.assert_array_equal(back.features, cloud.features)
        np.testing.assert_array_equal(back.labels, cloud.labels)
        assert back.num_classes == cloud.num_classes

    def test_malformed_header(self, tmp_path):
        p = tmp_path / "bad.cdseg"
        p.write_text("bogus header line\n")
        with pytest.raises(geo.ParseError, match=":1:"):
            geo.load_cloud(p)

    def test_hand_written_fixture(self, tmp_path):
        p = tmp_path / "two.cdseg"
        p.write_text("cdseg v1 2 3 2\n0 0 0 0.5 0.25 1\n1 2 3 0 1 -1\n")
        cloud = geo.load_cloud(p)
        np.testing.assert_array_equal(cloud.positions, [[0, 0, 0], [1, 2, 3]])
        np.testing.assert_array_equal(cloud.features, [[0.5, 0.25], [0, 1]])
        assert cloud.labels.tolist() == [1, -1]

    def test_dataset_round_trip(self, tmp_path):
        scenes = [geo.synth_scene(geo.SceneSpec(num_points=64, seed=i),
                                  np.random.default_rng(i)) for i in range(3)]
        geo.save_dataset(scenes, ["train", "train", "val"], tmp_path)
        assert len(geo.load_dataset(tmp_path, "train")) == 2
        assert len(geo.load_dataset(tmp_path, "val")) == 1
        assert len(geo.load_dataset(tmp_path)) == 3


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(geo.ORDERS))
def test_serialize_bijection_property(seed, order_name):
    rng = np.random.default_rng(seed)
    cloud = make_cloud(rng.uniform(-3, 3, (rng.integers(1, 60), 3)))
    so = geo.serialize(cloud, order_name, 0.1)
    assert sorted(so.permutation.tolist()) == list(range(cloud.num_points))
