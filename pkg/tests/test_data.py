import numpy as np
import pytest

from hybridlab.data import (NegativeSource, generate_dense_toy,
                            generate_toy2d, load_arrays, make_rect_mask,
                            paste, rle_decode, rle_encode, sample_negative,
                            save_arrays, save_toy2d)
from hybridlab.flow import build_coupling_flow
from hybridlab.model import VOID


class TestToy2d:
    def test_seed_determinism(self):
        a = generate_toy2d(seed=7)
        b = generate_toy2d(seed=7)
        for name in ("train_x", "test_x", "negatives", "anomalies"):
            assert np.array_equal(getattr(a, name), getattr(b, name))

    def test_component_covariances(self):
        ds = generate_toy2d(seed=0, n_train=200000)
        comp0 = ds.train_x[ds.train_labels == 0]
        cov0 = np.cov(comp0.T, bias=True)
        assert np.allclose(cov0, np.diag([0.9, 0.1]), atol=0.05)
        comp1 = ds.train_x[ds.train_labels == 1]
        cov1 = np.cov(comp1.T, bias=True)
        a = np.array([[0.071, 0.071], [-0.639, 0.639]])
        assert np.allclose(cov1, a @ a.T, atol=0.05)

    def test_negatives_concentrate_right_of_origin(self):
        ds = generate_toy2d(seed=7)
        assert np.mean(ds.negatives[:, 0] > 0) >= 0.9
        radii = np.linalg.norm(ds.negatives, axis=1)
        assert radii.min() >= 1.5 - 1e-9 and radii.max() <= 4.0 + 1e-9
        # the majority lives in the two right-half rectangles
        in_rect = (ds.negatives[:, 0] >= 1.5 / np.sqrt(2) - 1e-9) \
            & (np.abs(ds.negatives[:, 1]) >= 1.5 / np.sqrt(2) - 1e-9)
        assert in_rect.mean() >= 0.85

    def test_anomalies_encompass_inliers(self):
        ds = generate_toy2d(seed=7)
        inlier_r = np.linalg.norm(ds.train_x, axis=1)
        anomaly_r = np.linalg.norm(ds.anomalies, axis=1)
        assert anomaly_r.min() >= np.quantile(inlier_r, 0.99) - 1e-9
        # ring covers all quadrants
        quadrants = set(zip(ds.anomalies[:, 0] > 0, ds.anomalies[:, 1] > 0))
        assert len(quadrants) == 4

    def test_anomalies_disjoint_from_train_negatives(self):
        ds = generate_toy2d(seed=7)
        neg = {tuple(p) for p in np.round(ds.negatives, 12)}
        ano = {tuple(p) for p in np.round(ds.anomalies, 12)}
        assert not neg & ano


class TestDenseToy:
    def test_every_class_in_every_scene(self):
        world = generate_dense_toy(seed=0, n_classes=4, grid=32)
        for scene in world.train:
            assert set(np.unique(scene.labels)) == set(range(4))

    def test_seed_determinism(self):
        a = generate_dense_toy(seed=3)
        b = generate_dense_toy(seed=3)
        for sa, sb in zip(a.test, b.test):
            assert np.array_equal(sa.features, sb.features)
            assert np.array_equal(sa.labels, sb.labels)

    def test_anomaly_signatures_outside_class_hull(self):
        world = generate_dense_toy(seed=1)
        max_class_norm = np.linalg.norm(world.class_signatures, axis=1).max()
        for scene in world.test:
            region = scene.labels == world.n_classes
            assert region.any()
            sig = scene.features[region].mean(axis=0)
            # outside the ball containing all class signatures, hence
            # outside their convex hull
            assert np.linalg.norm(sig) > max_class_norm + 0.5

    def test_texture_bank_shapes(self):
        world = generate_dense_toy(seed=2, bank_size=8, bank_sides=(4, 6))
        assert len(world.texture_bank) == 8
        for patch in world.texture_bank:
            assert 4 <= patch.shape[0] <= 6
            assert patch.shape[2] == 3


class TestPaste:
    def test_zero_mask_is_identity(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(6, 2))
        labels = np.arange(6) % 3
        batch = paste(x, np.zeros((0, 2)), np.zeros(6, dtype=bool), labels)
        assert np.array_equal(batch.inputs, x)
        assert np.array_equal(batch.labels, labels)

    def test_full_mask_is_patch(self):
        x = np.ones((4, 2))
        patch = np.full((4, 2), 7.0)
        batch = paste(x, patch, np.ones(4, dtype=bool), np.zeros(4, dtype=int))
        assert np.array_equal(batch.inputs, patch)
        assert np.all(batch.labels == VOID)

    def test_grid_offset_hand_case(self):
        x = np.zeros((4, 4, 1))
        labels = np.ones((4, 4), dtype=int)
        patch = np.arange(1, 5, dtype=float).reshape(2, 2, 1)
        mask = make_rect_mask((4, 4), 1, 1, 2, 2)
        batch = paste(x, patch, mask, labels)
        expected = np.zeros((4, 4))
        expected[1:3, 1:3] = [[1, 2], [3, 4]]
        assert np.array_equal(batch.inputs[..., 0], expected)
        expected_labels = np.ones((4, 4), dtype=int)
        expected_labels[1:3, 1:3] = VOID
        assert np.array_equal(batch.labels, expected_labels)

    def test_void_exactly_on_mask(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(10, 2))
        mask = np.zeros(10, dtype=bool)
        mask[[2, 5]] = True
        batch = paste(x, rng.normal(size=(2, 2)), mask, np.zeros(10, dtype=int))
        assert np.array_equal(batch.labels == VOID, mask)
        assert np.array_equal(batch.inputs[~mask], x[~mask])

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            paste(np.zeros((4, 2)), np.zeros((3, 2)),
                  np.array([1, 1, 0, 0]), np.zeros(4, dtype=int))


class TestNegativeSource:
    def test_b_one_always_real(self):
        pool = np.arange(20, dtype=float).reshape(10, 2)
        src = NegativeSource("mixture", b_real=1.0, pool=pool)
        rng = np.random.default_rng(2)
        for _ in range(50):
            patch = sample_negative(src, 3, rng)
            assert all(any(np.array_equal(row, p) for p in pool) for row in patch)

    def test_b_zero_always_flow(self):
        flow = build_coupling_flow(2, seed=0)
        src = NegativeSource("mixture", b_real=0.0, flow=flow,
                             pool=np.zeros((0, 2)))
        rng = np.random.default_rng(3)
        patch = sample_negative(src, 4, rng)
        assert patch.shape == (4, 2)  # would raise on the empty pool

    def test_bernoulli_concentration(self):
        flow = build_coupling_flow(2, seed=1)
        pool = np.full((5, 2), 100.0)  # far from any flow sample
        src = NegativeSource("mixture", b_real=0.5, flow=flow, pool=pool)
        rng = np.random.default_rng(4)
        real = sum(float(np.all(sample_negative(src, 1, rng) == 100.0))
                   for _ in range(10000))
        assert abs(real / 10000 - 0.5) <= 0.02

    def test_empty_pool_rejected(self):
        src = NegativeSource("real-pool", pool=np.zeros((0, 2)))
        with pytest.raises(ValueError):
            sample_negative(src, 2, np.random.default_rng(0))

    def test_b_only_for_mixture(self):
        with pytest.raises(ValueError):
            NegativeSource("flow", b_real=0.3)
        with pytest.raises(ValueError):
            NegativeSource("mixture", b_real=1.5)


class TestRle:
    def test_round_trip(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            mask = rng.random((rng.integers(1, 8), rng.integers(1, 8))) < 0.4
            assert np.array_equal(rle_decode(rle_encode(mask), mask.shape), mask)

    def test_hand_case(self):
        mask = np.array([0, 0, 1, 1, 1, 0], dtype=bool)
        assert rle_encode(mask).tolist() == [2, 3, 1]

    def test_leading_one(self):
        mask = np.array([1, 0, 0], dtype=bool)
        assert rle_encode(mask).tolist() == [0, 1, 2]


class TestContainer:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        arrays = {"x": rng.normal(size=(4, 3)), "labels": rng.integers(0, 5, 7)}
        masks = {"m": rng.random((5, 5)) < 0.5}
        save_arrays(tmp_path / "ds", arrays, masks, meta={"seed": 6})
        loaded, loaded_masks, meta = load_arrays(tmp_path / "ds")
        assert np.array_equal(loaded["x"], arrays["x"])
        assert loaded["labels"].dtype == np.int64
        assert np.array_equal(loaded["labels"], arrays["labels"])
        assert np.array_equal(loaded_masks["m"], masks["m"])
        assert meta == {"seed": 6}

    def test_toy2d_export(self, tmp_path):
        ds = generate_toy2d(seed=7, n_train=50, n_test=40, n_negative=30,
                            n_anomaly=20)
        save_toy2d(ds, tmp_path / "toy")
        arrays, _, meta = load_arrays(tmp_path / "toy")
        assert meta["kind"] == "toy2d" and meta["seed"] == 7
        assert np.array_equal(arrays["train_x"], ds.train_x)
        assert np.array_equal(arrays["anomalies"], ds.anomalies)
