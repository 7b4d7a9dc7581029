"""Fusion-architecture wiring, decoding, objectness, training, and IO."""

import numpy as np
import pytest

from rgbtcloak import autodiff as ad
from rgbtcloak import compose, detectors
from rgbtcloak.detectors import Detection, FusionArch


def zero_pair(h=64, w=64):
    return compose.RgbtImage(rgb=np.zeros((h, w, 3)), thermal=np.zeros((h, w)))


def random_pair(rng, h=64, w=64):
    return compose.RgbtImage(
        rgb=rng.uniform(0, 1, (h, w, 3)), thermal=rng.uniform(0, 1, (h, w))
    )


class TestBuild:
    def test_early_input_channels(self):
        m = detectors.build(FusionArch.EARLY, seed=0)
        assert m.weights["stem.c1.w"].shape[2] == 4

    def test_indep_t_ignores_rgb(self):
        m = detectors.build(FusionArch.INDEP_T, seed=1)
        rng = np.random.default_rng(0)
        thermal = rng.uniform(0, 1, (64, 64))
        a = detectors.forward(m, compose.RgbtImage(
            rgb=rng.uniform(0, 1, (64, 64, 3)), thermal=thermal))
        b = detectors.forward(m, compose.RgbtImage(
            rgb=rng.uniform(0, 1, (64, 64, 3)), thermal=thermal))
        assert np.array_equal(a.data, b.data)

    def test_mid_has_unshared_stems(self):
        m = detectors.build(FusionArch.MID, seed=2)
        assert "rgb.s1.w" in m.weights and "thm.s1.w" in m.weights
        assert m.weights["rgb.s1.w"].shape[2] == 3
        assert m.weights["thm.s1.w"].shape[2] == 1

    def test_deterministic_init(self):
        a = detectors.build(FusionArch.LATE, seed=3)
        b = detectors.build(FusionArch.LATE, seed=3)
        for k in a.weights:
            assert np.array_equal(a.weights[k], b.weights[k])


class TestForward:
    def test_constant_grid_on_zero_input(self):
        for arch in FusionArch:
            m = detectors.build(arch, seed=4)
            grid = detectors.forward(m, zero_pair())
            assert grid.data.std() < 1e-12

    def test_grid_shape_arithmetic(self):
        m = detectors.build(FusionArch.EARLY, seed=0)
        grid = detectors.forward(m, zero_pair(160, 160))
        assert grid.shape == (40, 40)
        grid = detectors.forward(m, zero_pair(64, 96))
        assert grid.shape == (16, 24)

    def test_values_in_unit_interval(self):
        rng = np.random.default_rng(5)
        m = detectors.build(FusionArch.MID, seed=5)
        grid = detectors.forward(m, random_pair(rng))
        assert grid.data.min() > 0.0 and grid.data.max() < 1.0

    def test_indivisible_input_rejected(self):
        m = detectors.build(FusionArch.EARLY, seed=0)
        with pytest.raises(detectors.DetectorError):
            detectors.forward(m, compose.RgbtImage(
                rgb=np.zeros((63, 64, 3)), thermal=np.zeros((63, 64))))

    def test_fused_archs_respond_to_both_modalities(self):
        rng = np.random.default_rng(6)
        base = random_pair(rng)
        for arch in (FusionArch.EARLY, FusionArch.MID, FusionArch.LATE):
            m = detectors.build(arch, seed=7)
            ref = detectors.forward(m, base).data
            for channel in ("rgb", "thermal"):
                changed = False
                for k in range(10):
                    prng = np.random.default_rng(100 + k)
                    if channel == "rgb":
                        pair = compose.RgbtImage(
                            rgb=np.clip(base.rgb + prng.normal(0, 0.2, base.rgb.shape), 0, 1),
                            thermal=base.thermal)
                    else:
                        pair = compose.RgbtImage(
                            rgb=base.rgb,
                            thermal=np.clip(base.thermal + prng.normal(0, 0.2, base.thermal.shape), 0, 1))
                    if not np.array_equal(detectors.forward(m, pair).data, ref):
                        changed = True
                        break
                assert changed, f"{arch} ignores {channel}"


class TestLateFuse:
    def test_mean(self):
        a = ad.Tensor(np.full((2, 2), 0.8))
        b = ad.Tensor(np.full((2, 2), 0.4))
        np.testing.assert_allclose(detectors.late_fuse(a, b).data, 0.6)

    def test_identity_on_equal(self):
        g = ad.Tensor(np.random.default_rng(0).uniform(0, 1, (3, 3)))
        np.testing.assert_allclose(detectors.late_fuse(g, g).data, g.data)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a = ad.Tensor(rng.uniform(0, 1, (3, 3)))
        b = ad.Tensor(rng.uniform(0, 1, (3, 3)))
        assert np.array_equal(
            detectors.late_fuse(a, b).data, detectors.late_fuse(b, a).data
        )

    def test_shape_mismatch(self):
        with pytest.raises(detectors.DetectorError):
            detectors.late_fuse(ad.Tensor(np.zeros((2, 2))),
                                ad.Tensor(np.zeros((3, 2))))


class TestDecode:
    def test_all_below_threshold(self):
        grid = np.full((8, 8), 0.2)
        assert detectors.decode(grid, 0.6) == []

    def test_single_cell_detection(self):
        grid = np.full((8, 8), 0.1)
        grid[3, 5] = 0.9
        dets = detectors.decode(grid, 0.6, stride=4, box_height_px=20.0)
        assert len(dets) == 1
        (d,) = dets
        cx = (d.box[0] + d.box[2]) / 2
        cy = (d.box[1] + d.box[3]) / 2
        assert (cx, cy) == (5 * 4 + 2, 3 * 4 + 2)
        assert d.confidence == pytest.approx(0.9)

    def test_adjacent_suppression(self):
        grid = np.full((8, 8), 0.1)
        grid[3, 4] = 0.9
        grid[4, 4] = 0.8  # vertically adjacent: 20 px boxes overlap at IoU 2/3
        dets = detectors.decode(grid, 0.6, stride=4, box_height_px=20.0)
        assert len(dets) == 1
        assert dets[0].confidence == pytest.approx(0.9)

    def test_threshold_one_empty(self):
        rng = np.random.default_rng(2)
        grid = rng.uniform(0, 1, (8, 8))
        assert detectors.decode(grid, 1.0) == []

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            grid = rng.uniform(0, 1, (10, 10))
            low = detectors.decode(grid, 0.5, box_height_px=10.0)
            high = detectors.decode(grid, 0.7, box_height_px=10.0)
            low_boxes = {d.box for d in low}
            assert all(d.box in low_boxes for d in high)

    def test_box_aspect(self):
        grid = np.zeros((8, 8))
        grid[4, 4] = 0.95
        (d,) = detectors.decode(grid, 0.6, box_height_px=48.0)
        w = d.box[2] - d.box[0]
        h = d.box[3] - d.box[1]
        assert h / w == pytest.approx(detectors.BOX_ASPECT)


class TestObjectness:
    def test_constant_region(self):
        m = detectors.build(FusionArch.EARLY, seed=0)
        grid_val = 0.73
        grid = ad.Tensor(np.full((16, 16), grid_val))
        sm = detectors.smooth_max(grid[2:6, 2:6], temperature=0.05)
        assert abs(sm.item() - grid_val) < 0.01

    def test_dominant_cell_oracle(self):
        vals = np.full((4, 4), 0.1)
        vals[1, 2] = 0.9
        sm = detectors.smooth_max(ad.Tensor(vals), temperature=0.05)
        # hand-computed softmax-weighted mean at tau=0.05
        flat = vals.reshape(-1)
        w = np.exp((flat - flat.max()) / 0.05)
        expected = float((w * flat).sum() / w.sum())
        assert sm.item() == pytest.approx(expected, rel=1e-12)
        assert 0.89 < sm.item() < 0.92

    def test_gradient_locality(self):
        rng = np.random.default_rng(4)
        vals = rng.uniform(0.1, 0.9, (12, 12))
        leaf = ad.Tensor(vals, requires_grad=True)

        def objective(v):
            return detectors.smooth_max(v[3:7, 2:5], temperature=0.05)

        _, (g,) = ad.value_and_grad(objective, [leaf])
        outside = np.ones((12, 12), dtype=bool)
        outside[3:7, 2:5] = False
        assert np.all(g.data[outside] == 0.0)
        assert np.all(g.data[~outside] != 0.0)

    def test_empty_region_errors(self):
        m = detectors.build(FusionArch.EARLY, seed=0)
        with pytest.raises(detectors.DetectorError, match="no cell centers"):
            detectors.objectness(m, zero_pair(), (1.0, 1.0, 1.5, 1.5))

    def test_independent_pair_sums(self):
        m_rgb = detectors.build(FusionArch.INDEP_RGB, seed=1)
        m_t = detectors.build(FusionArch.INDEP_T, seed=2)
        pair = zero_pair()
        box = (10, 10, 50, 50)
        joint = detectors.objectness([m_rgb, m_t], pair, box)
        single = detectors.objectness(m_rgb, pair, box).item() \
            + detectors.objectness(m_t, pair, box).item()
        assert joint.item() == pytest.approx(single, rel=1e-12)
        assert 0.0 < joint.item() < 2.0


def tiny_dataset(seed=0, n=16, frame=64):
    bgs = compose.gen_backgrounds(3, frame, frame, seed=seed)
    return compose.gen_detector_dataset(bgs, n, positive_fraction=0.5, seed=seed)


class TestTrain:
    def test_epochs_zero_keeps_init(self):
        ds = tiny_dataset()
        m = detectors.train(FusionArch.EARLY, ds, epochs=0, seed=5)
        init = detectors.build(FusionArch.EARLY, seed=5)
        for k in init.weights:
            assert np.array_equal(m.weights[k], init.weights[k])

    def test_deterministic(self):
        ds = tiny_dataset()
        a = detectors.train(FusionArch.INDEP_T, ds, epochs=1, seed=6, width=4)
        b = detectors.train(FusionArch.INDEP_T, ds, epochs=1, seed=6, width=4)
        for k in a.weights:
            assert np.array_equal(a.weights[k], b.weights[k])

    def test_single_class_rejected(self):
        ds = [s for s in tiny_dataset() if not s.label]
        with pytest.raises(detectors.DetectorError):
            detectors.train(FusionArch.EARLY, ds, epochs=1, seed=0)

    def test_loss_decreases(self):
        ds = tiny_dataset(seed=3, n=20)
        m0 = detectors.train(FusionArch.EARLY, ds, epochs=0, seed=7, width=4)
        m1 = detectors.train(FusionArch.EARLY, ds, epochs=4, seed=7, width=4)

        def mean_loss(model):
            total = 0.0
            for s in ds:
                wt = model.weight_tensors()
                for logits in detectors._training_logits(model, s.image, wt):
                    targets = detectors._cell_targets(
                        s.gt_box if s.label else None, logits.shape, model.stride
                    )
                    total += detectors._bce_with_logits(logits, targets, 6.0).item()
            return total

        assert mean_loss(m1) < mean_loss(m0)


class TestPersistence:
    def test_round_trip_bit_exact(self, tmp_path):
        ds = tiny_dataset()
        m = detectors.train(FusionArch.MID, ds, epochs=1, seed=8, width=4)
        path = str(tmp_path / "model.rgtd")
        detectors.save(m, path)
        loaded = detectors.load(path)
        assert loaded.arch == m.arch
        for k in m.weights:
            assert np.array_equal(loaded.weights[k], m.weights[k])
        pair = zero_pair()
        assert np.array_equal(
            detectors.forward(m, pair).data, detectors.forward(loaded, pair).data
        )

    def test_truncated_file(self, tmp_path):
        m = detectors.build(FusionArch.EARLY, seed=0, width=4)
        path = str(tmp_path / "model.rgtd")
        detectors.save(m, path)
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[: len(blob) // 2])
        with pytest.raises(detectors.DetectorError, match="truncated"):
            detectors.load(path)

    def test_wrong_arch_names_both(self, tmp_path):
        m = detectors.build(FusionArch.EARLY, seed=0, width=4)
        path = str(tmp_path / "model.rgtd")
        detectors.save(m, path)
        with pytest.raises(detectors.DetectorError, match="mid.*early"):
            detectors.load(path, expect_arch=FusionArch.MID)

    def test_not_a_model(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"definitely not a model")
        with pytest.raises(detectors.DetectorError):
            detectors.load(str(path))
