"""Scene composition tests: UV maps, rendering, EOT, paste, datasets."""

import numpy as np
import pytest

from rgbtcloak import autodiff as ad
from rgbtcloak import compose, pattern
from rgbtcloak.seeding import rng_for


def tiny_texture(h=8, w=8, seed=0):
    consts = pattern.default_constants(w, h, seed=seed)
    params = pattern.init_params(w, h, seed=seed, strategy="uniform-random")
    tex = pattern.realize(pattern.binarize(params), consts)
    return tex, consts


class TestUvMaps:
    def test_angle_grid(self):
        maps = compose.build_uv_maps(24, 32, n_angles=20)
        angles = [m.angle_deg for m in maps]
        assert angles == [k * 18.0 for k in range(20)]

    def test_front_back_bands_disjoint(self):
        maps = compose.build_uv_maps(24, 32, n_angles=4)
        front = maps[0]
        back = next(m for m in maps if m.angle_deg == 180.0)
        assert front.band_columns() & back.band_columns() == set()
        # the sampled (floor) columns stay inside each band
        for uv in (front, back):
            cols = uv.coords[..., 1]
            cols = cols[~np.isnan(cols)]
            sampled = set(np.floor(cols).astype(int) % 24)
            assert sampled <= uv.band_columns()

    def test_coords_inside_texture(self):
        for n_angles in (4, 20):
            for uv in compose.build_uv_maps(16, 20, n_angles=n_angles):
                coords = uv.coords[~np.isnan(uv.coords[..., 0])]
                rows = uv.coords[..., 0]
                cols = uv.coords[..., 1]
                ok = ~np.isnan(rows)
                assert np.all(rows[ok] >= 0) and np.all(rows[ok] <= 19)
                assert np.all(cols[ok] >= 0) and np.all(cols[ok] < 16)

    def test_skin_inside_silhouette(self):
        for uv in compose.build_uv_maps(24, 32, n_angles=8):
            assert np.all(uv.silhouette[uv.skin_region])
            clothing = uv.silhouette & ~uv.skin_region
            assert clothing.any() and uv.skin_region.any()

    def test_bad_args(self):
        with pytest.raises(compose.ComposeError):
            compose.build_uv_maps(24, 32, n_angles=7)
        with pytest.raises(compose.ComposeError):
            compose.build_uv_maps(24, 32, n_angles=4, sprite_hw=(6, 6))

    def test_seed_determinism(self):
        a = compose.build_uv_maps(24, 32, n_angles=4, seed=5)
        b = compose.build_uv_maps(24, 32, n_angles=4, seed=5)
        for ma, mb in zip(a, b):
            assert np.array_equal(ma.silhouette, mb.silhouette)
            assert np.array_equal(ma.coords, mb.coords, equal_nan=True)


class TestRenderPerson:
    def test_uniform_texture_constant_clothing(self):
        consts = pattern.default_constants(8, 8, seed=1, body_base=0.8,
                                           body_noise=0.0)
        params = pattern.NorpParams(
            rgb=np.tile(np.array([0.3, 0.5, 0.7]), (8, 8, 1)),
            p_tilde=np.ones((8, 8)),
        )
        tex = pattern.realize(params, consts)
        uv = compose.build_uv_maps(8, 8, n_angles=4)[0]
        rgb, thm, alpha = compose.render_person(
            tex.rgb, tex.thermal, compose.PersonAppearance(), uv, 2.5
        )
        cloth = (alpha > 0) & ~uv.skin_region[
            compose._nearest_index(alpha.shape[0], uv.silhouette.shape[0])
        ][:, compose._nearest_index(alpha.shape[1], uv.silhouette.shape[1])]
        vals = rgb.data[cloth]
        np.testing.assert_allclose(vals, np.tile([0.3, 0.5, 0.7], (vals.shape[0], 1)))
        np.testing.assert_allclose(thm.data[cloth], 0.8)

    def test_pinhole_scaling(self):
        tex, _ = tiny_texture()
        uv = compose.build_uv_maps(8, 8, n_angles=4)[0]
        app = compose.PersonAppearance()
        _, _, a_near = compose.render_person(tex.rgb, tex.thermal, app, uv, 5.0)
        _, _, a_far = compose.render_person(tex.rgb, tex.thermal, app, uv, 10.0)
        assert abs(a_far.shape[0] - a_near.shape[0] / 2) <= 1

    def test_below_resolvable_scale(self):
        tex, _ = tiny_texture()
        uv = compose.build_uv_maps(8, 8, n_angles=4)[0]
        with pytest.raises(compose.ComposeError):
            compose.render_person(tex.rgb, tex.thermal,
                                  compose.PersonAppearance(), uv, 80.0)

    def test_gradient_sparsity_single_cell(self):
        consts = pattern.default_constants(6, 6, seed=2)
        uv = compose.build_uv_maps(6, 6, n_angles=4)[0]
        app = compose.PersonAppearance()
        base = pattern.init_params(6, 6, seed=3, strategy="uniform-random")

        rgb_leaf = ad.Tensor(base.rgb, requires_grad=True)

        def objective(rgb_t):
            vis, thm = pattern.realize_fields(
                rgb_t, ad.Tensor(base.p_tilde), consts
            )
            sprite_rgb, _, _ = compose.render_person(vis, thm, app, uv, 2.5)
            return ad.sum_(sprite_rgb)

        _, (g,) = ad.value_and_grad(objective, [rgb_leaf])
        touched = np.any(g.data != 0, axis=2)
        cols = uv.coords[..., 1]
        sampled_cols = set(np.floor(cols[~np.isnan(cols)]).astype(int) % 6)
        sampled_cols |= {(c + 1) % 6 for c in sampled_cols}
        untouched_cols = set(range(6)) - sampled_cols
        for c in untouched_cols:
            assert not touched[:, c].any()


class TestEot:
    def _sprite(self):
        tex, _ = tiny_texture()
        uv = compose.build_uv_maps(8, 8, n_angles=4)[0]
        return compose.render_person(tex.rgb, tex.thermal,
                                     compose.PersonAppearance(), uv, 2.5)

    def test_identity_config(self):
        rgb, thm, alpha = self._sprite()
        out_rgb, out_thm, out_alpha, off = compose.eot_transform(
            rgb, thm, alpha, compose.EotConfig.identity(), rng_for(0, "eot")
        )
        assert off == (0, 0)
        assert np.array_equal(out_rgb.data, rgb.data)
        assert np.array_equal(out_thm.data, thm.data)
        assert np.array_equal(out_alpha, alpha)

    def test_determinism(self):
        rgb, thm, alpha = self._sprite()
        cfg = compose.EotConfig()
        a = compose.eot_transform(rgb, thm, alpha, cfg, rng_for(7, "eot"))
        b = compose.eot_transform(rgb, thm, alpha, cfg, rng_for(7, "eot"))
        assert np.array_equal(a[0].data, b[0].data)
        assert np.array_equal(a[1].data, b[1].data)
        assert a[3] == b[3]

    def test_brightness_clamps(self):
        rgb, thm, alpha = self._sprite()
        cfg = compose.EotConfig(scale_jitter=0.0, translate_px=0.0,
                                brightness=0.0, contrast=(1.0, 1.0),
                                thermal_offset=0.0, noise_std_rgb=0.0,
                                noise_std_thm=0.0)
        bright = ad.clip01(rgb + 0.3)
        assert bright.data.max() <= 1.0
        out_rgb, *_ = compose.eot_transform(
            rgb + 0.3, thm, alpha, cfg, rng_for(0, "eot")
        )
        assert out_rgb.data.max() <= 1.0

    def test_alignment_preserved(self):
        # a paired marker moves identically in both modalities
        h, w = 40, 40
        rgb = np.zeros((h, w, 3))
        thm = np.zeros((h, w))
        rgb[10:14, 20:24] = 1.0
        thm[10:14, 20:24] = 1.0
        alpha = np.ones((h, w))
        cfg = compose.EotConfig(brightness=0.0, contrast=(1.0, 1.0),
                                thermal_offset=0.0, noise_std_rgb=0.0,
                                noise_std_thm=0.0)
        out_rgb, out_thm, _, _ = compose.eot_transform(
            ad.Tensor(rgb), ad.Tensor(thm), alpha, cfg, rng_for(3, "eot")
        )
        r_mass = out_rgb.data[:, :, 0]
        t_mass = out_thm.data
        ry, rx = np.unravel_index(np.argmax(r_mass), r_mass.shape)
        ty, tx = np.unravel_index(np.argmax(t_mass), t_mass.shape)
        assert (ry, rx) == (ty, tx)


class TestPaste:
    def _bg(self, seed=0):
        return compose.gen_backgrounds(1, 64, 64, seed=seed)[0]

    def test_empty_mask_identity(self):
        bg = self._bg()
        rgb = ad.Tensor(np.zeros((8, 8, 3)))
        thm = ad.Tensor(np.zeros((8, 8)))
        out_rgb, out_thm, _ = compose.paste(rgb, thm, np.zeros((8, 8)), bg, (32, 32))
        assert np.array_equal(out_rgb.data, bg.rgb)
        assert np.array_equal(out_thm.data, bg.thermal)

    def test_full_frame_replacement(self):
        bg = self._bg()
        rgb = ad.Tensor(np.full((64, 64, 3), 0.25))
        thm = ad.Tensor(np.full((64, 64), 0.75))
        out_rgb, out_thm, _ = compose.paste(
            rgb, thm, np.ones((64, 64)), bg, (32, 32)
        )
        assert np.all(out_rgb.data == 0.25)
        assert np.all(out_thm.data == 0.75)

    def test_checker_blend_oracle(self):
        bg = self._bg(1)
        rng = np.random.default_rng(5)
        sprite_rgb = rng.uniform(0, 1, (10, 12, 3))
        sprite_thm = rng.uniform(0, 1, (10, 12))
        mask = np.indices((10, 12)).sum(axis=0) % 2 == 0
        out_rgb, out_thm, alpha_full = compose.paste(
            ad.Tensor(sprite_rgb), ad.Tensor(sprite_thm),
            mask.astype(float), bg, (20, 30)
        )
        # direct per-pixel oracle
        expected_rgb = bg.rgb.copy()
        expected_thm = bg.thermal.copy()
        top, left = int(round(30 - 10 / 2)), int(round(20 - 12 / 2))
        for i in range(10):
            for j in range(12):
                if mask[i, j]:
                    expected_rgb[top + i, left + j] = sprite_rgb[i, j]
                    expected_thm[top + i, left + j] = sprite_thm[i, j]
        np.testing.assert_allclose(out_rgb.data, expected_rgb)
        np.testing.assert_allclose(out_thm.data, expected_thm)

    def test_outside_pixels_bit_identical(self):
        bg = self._bg(2)
        rng = np.random.default_rng(6)
        out_rgb, _, alpha_full = compose.paste(
            ad.Tensor(rng.uniform(0, 1, (6, 6, 3))),
            ad.Tensor(rng.uniform(0, 1, (6, 6))),
            np.ones((6, 6)), bg, (10, 10)
        )
        outside = alpha_full == 0
        assert np.array_equal(out_rgb.data[outside], bg.rgb[outside])

    def test_fully_outside_errors(self):
        bg = self._bg()
        with pytest.raises(compose.ComposeError):
            compose.paste(ad.Tensor(np.zeros((4, 4, 3))),
                          ad.Tensor(np.zeros((4, 4))),
                          np.ones((4, 4)), bg, (200, 200))

    def test_paste_locality_gradient(self):
        bg = self._bg(3)
        rng = np.random.default_rng(9)
        mask = (rng.random((8, 8)) < 0.5).astype(float)
        sprite_rgb = ad.Tensor(rng.uniform(0, 1, (8, 8, 3)), requires_grad=True)

        def objective(s):
            out_rgb, _, _ = compose.paste(
                s, ad.Tensor(np.zeros((8, 8))), mask, bg, (20, 20)
            )
            return ad.sum_(out_rgb * out_rgb)

        _, (g,) = ad.value_and_grad(objective, [sprite_rgb])
        off = mask == 0
        assert np.all(g.data[off] == 0.0)


class TestBackgrounds:
    def test_determinism(self):
        a = compose.gen_backgrounds(3, 48, 48, seed=4, palette="indoor")
        b = compose.gen_backgrounds(3, 48, 48, seed=4, palette="indoor")
        for x, y in zip(a, b):
            assert np.array_equal(x.rgb, y.rgb)
            assert np.array_equal(x.thermal, y.thermal)

    def test_night_darker_than_day(self):
        day = compose.gen_backgrounds(6, 48, 48, seed=1, palette="outdoor-day")
        night = compose.gen_backgrounds(6, 48, 48, seed=1, palette="outdoor-night")
        lum = lambda ims: np.mean([im.rgb.mean() for im in ims])
        assert lum(night) < lum(day)

    def test_range(self):
        for im in compose.gen_backgrounds(2, 40, 40, seed=2, palette="outdoor-day"):
            assert im.rgb.min() >= 0 and im.rgb.max() <= 1
            assert im.thermal.min() >= 0 and im.thermal.max() <= 1


class TestLoadBackgrounds:
    def test_empty_dir(self, tmp_path):
        with pytest.raises(compose.ComposeError, match="no pairs"):
            compose.load_backgrounds(str(tmp_path))

    def test_single_pair(self, tmp_path):
        from rgbtcloak import imageio

        rng = np.random.default_rng(0)
        imageio.save_png8(str(tmp_path / "a_rgb.png"), rng.uniform(0, 1, (16, 16, 3)))
        imageio.save_png16(str(tmp_path / "a_thm.png"), rng.uniform(0, 1, (16, 16)))
        pairs = compose.load_backgrounds(str(tmp_path))
        assert len(pairs) == 1

    def test_16bit_normalization(self, tmp_path):
        from rgbtcloak import imageio

        imageio.save_png8(str(tmp_path / "a_rgb.png"), np.zeros((8, 8, 3)))
        imageio.save_png16(str(tmp_path / "a_thm.png"), np.ones((8, 8)))
        pairs = compose.load_backgrounds(str(tmp_path))
        assert pairs[0].thermal.max() == 1.0

    def test_missing_member(self, tmp_path):
        from rgbtcloak import imageio

        imageio.save_png8(str(tmp_path / "a_rgb.png"), np.zeros((8, 8, 3)))
        with pytest.raises(compose.ComposeError, match="a_thm"):
            compose.load_backgrounds(str(tmp_path))

    def test_dimension_mismatch(self, tmp_path):
        from rgbtcloak import imageio

        imageio.save_png8(str(tmp_path / "a_rgb.png"), np.zeros((8, 8, 3)))
        imageio.save_png16(str(tmp_path / "a_thm.png"), np.zeros((9, 8)))
        with pytest.raises(compose.ComposeError, match="mismatch"):
            compose.load_backgrounds(str(tmp_path))


class TestDataset:
    def test_exact_stratification(self):
        bgs = compose.gen_backgrounds(4, 80, 80, seed=0)
        samples = compose.gen_detector_dataset(bgs, 40, positive_fraction=0.5,
                                               seed=1)
        assert sum(s.label for s in samples) == 20

    def test_boxes_enclose_mask(self):
        bgs = compose.gen_backgrounds(2, 120, 120, seed=3)
        samples = compose.gen_detector_dataset(bgs, 10, positive_fraction=0.5,
                                               seed=2)
        for s in samples:
            if s.label:
                x0, y0, x1, y1 = s.gt_box
                assert 0 <= x0 < x1 <= 120 and 0 <= y0 < y1 <= 120

    def test_determinism(self):
        bgs = compose.gen_backgrounds(2, 80, 80, seed=0)
        a = compose.gen_detector_dataset(bgs, 8, seed=5)
        b = compose.gen_detector_dataset(bgs, 8, seed=5)
        for x, y in zip(a, b):
            assert x.label == y.label
            assert np.array_equal(x.image.rgb, y.image.rgb)

    def test_round_trip(self, tmp_path):
        bgs = compose.gen_backgrounds(2, 64, 64, seed=0)
        samples = compose.gen_detector_dataset(bgs, 6, seed=7)
        compose.save_dataset(samples, str(tmp_path / "ds"))
        loaded = compose.load_dataset(str(tmp_path / "ds"))
        assert len(loaded) == len(samples)
        assert [s.label for s in loaded] == [s.label for s in samples]
        assert [s.gt_box for s in loaded] == [s.gt_box for s in samples]


class TestAnglePeriodicity:
    def test_render_at_a_and_a_plus_360(self):
        tex, _ = tiny_texture()
        maps = compose.build_uv_maps(8, 8, n_angles=4)
        app = compose.PersonAppearance()
        uv_a = compose.uv_map_for_angle(maps, 90.0)
        uv_b = compose.uv_map_for_angle(maps, 450.0)
        a = compose.render_person(tex.rgb, tex.thermal, app, uv_a, 5.0)
        b = compose.render_person(tex.rgb, tex.thermal, app, uv_b, 5.0)
        assert np.array_equal(a[0].data, b[0].data)


def test_end_to_end_chain_finite_differences():
    # realize -> render -> eot -> paste on a small instance
    consts = pattern.default_constants(4, 4, seed=1)
    params = pattern.init_params(4, 4, seed=2, strategy="uniform-random")
    uv = compose.build_uv_maps(4, 4, n_angles=4, sprite_hw=(24, 12))[1]
    bg = compose.gen_backgrounds(1, 48, 48, seed=1)[0]
    app = compose.PersonAppearance()
    weights = np.random.default_rng(0).normal(size=(48, 48, 3))
    wt = np.random.default_rng(1).normal(size=(48, 48))

    def objective(rgb_t, p_t):
        vis, thm = pattern.realize_fields(rgb_t, p_t, consts)
        s_rgb, s_thm, alpha = compose.render_person(
            vis, thm, app, uv, 10.0, ref_height_px=100.0
        )
        rng = rng_for(11, "eot-test")
        s_rgb, s_thm, alpha, (dx, dy) = compose.eot_transform(
            s_rgb, s_thm, alpha, compose.EotConfig(), rng
        )
        out_rgb, out_thm, _ = compose.paste(
            s_rgb, s_thm, alpha, bg, (24 + dx, 24 + dy)
        )
        return ad.sum_(out_rgb * ad.Tensor(weights)) + ad.sum_(out_thm * ad.Tensor(wt))

    rgb_leaf = ad.Tensor(params.rgb, requires_grad=True)
    p_leaf = ad.Tensor(params.p_tilde, requires_grad=True)
    err = ad.finite_difference_check(objective, [rgb_leaf, p_leaf], step=1e-5)
    assert err < 1e-4
