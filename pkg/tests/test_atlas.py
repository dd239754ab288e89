"""Atlas data model, initialization averaging, dilation, patch extraction."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from texsr.atlas import (
    IMG_CROP_SIZE,
    PATCH_SIZE,
    TextureAtlas,
    ViewObservation,
    build_pullback_lr,
    dilate_mask,
    extract_patches,
    init_atlas_average,
)
from texsr.errors import ParameterError, StructuralError
from texsr.operators import SparseLinearMap
from texsr.synth import SceneSpec, gen_texture, render_views


def scaled_scene(tex_n, img_n, factor, views=2, seed=0, sigma=0.6, noise=0.0,
                 fill=0.72):
    """Scene whose texture maps onto a fraction of a larger image grid.

    Patch extraction needs image grids of at least 200x200 even for small
    atlases; a scale-up homography covering ``fill`` of the frame keeps each
    64-texel patch footprint inside one 200x200 crop.
    """
    from texsr.operators import (FlowField, ProjectionSpec, build_blur,
                                 build_downsample, build_projection, build_warp,
                                 compose_chain)

    tex = gen_texture("smoothed-noise", (tex_n, tex_n), seed=seed)
    scale = img_n * fill / tex_n
    rng = np.random.default_rng(seed)
    chains, obs = [], []
    for i in range(views):
        h = np.diag([scale, scale, 1.0])
        h[0, 2] = rng.uniform(0, 1)
        h[1, 2] = rng.uniform(0, 1)
        proj = build_projection(ProjectionSpec.from_homography(h),
                                (tex_n, tex_n), (img_n, img_n))
        warp = build_warp(FlowField.zero((img_n, img_n)))
        down = build_downsample(factor, (img_n, img_n))
        chain = compose_chain(proj, warp, build_blur(sigma), down,
                              (tex_n, tex_n), (img_n, img_n),
                              (img_n // factor, img_n // factor))
        b = chain.forward(tex.data)
        vis = chain.forward(np.ones((tex_n, tex_n))) >= 1 - 1e-5
        if noise:
            b = np.clip(b + rng.standard_normal(b.shape) * noise, 0, 1)
        chains.append(chain)
        obs.append(ViewObservation(view_id=i, image=b, visibility=vis))
    return tex, obs, chains


class TestTextureAtlas:
    def test_invalid_texels_zeroed(self):
        mask = np.zeros((4, 4), dtype=bool)
        mask[1, 1] = True
        a = TextureAtlas(np.full((4, 4), 0.7), mask)
        assert a.data[1, 1] == 0.7
        assert a.data.sum() == 0.7

    def test_rejects_nonfinite(self):
        with pytest.raises(ParameterError):
            TextureAtlas(np.full((4, 4), np.nan), np.ones((4, 4), bool))

    def test_rejects_bad_mask_shape(self):
        with pytest.raises(StructuralError):
            TextureAtlas(np.zeros((4, 4)), np.ones((3, 4), bool))


class TestInitAtlasAverage:
    def test_identity_pullback_single_view(self):
        """One view through an identity pullback reproduces the image."""
        img = np.random.default_rng(0).random((6, 6))
        view = ViewObservation(view_id=0, image=img)
        atlas = init_atlas_average([view], [SparseLinearMap.identity(36)])
        np.testing.assert_array_equal(atlas.data, img)
        assert atlas.mask.all()

    def test_constant_views_average_to_constant(self):
        views = [ViewObservation(view_id=i, image=np.full((5, 5), 0.5)) for i in range(3)]
        maps = [SparseLinearMap.identity(25)] * 3
        atlas = init_atlas_average(views, maps)
        np.testing.assert_array_equal(atlas.data, np.full((5, 5), 0.5))

    def test_two_views_arithmetic_mean(self):
        views = [
            ViewObservation(view_id=0, image=np.full((4, 4), 0.2)),
            ViewObservation(view_id=1, image=np.full((4, 4), 0.6)),
        ]
        maps = [SparseLinearMap.identity(16)] * 2
        atlas = init_atlas_average(views, maps)
        np.testing.assert_allclose(atlas.data, 0.4, rtol=0, atol=1e-15)

    def test_unseen_texels_masked(self):
        # pullback with an empty second row: texel 1 is never observed
        m = SparseLinearMap(4, 4, np.array([0, 1, 1, 2, 3]),
                            np.array([0, 2, 3]), np.ones(3))
        view = ViewObservation(view_id=0, image=np.full((2, 2), 0.9))
        atlas = init_atlas_average([view], [m])
        assert not atlas.mask[0, 1]
        assert atlas.data[0, 1] == 0.0

    def test_permutation_bit_identical(self):
        tex, obs, chains = scaled_scene(16, 32, 2, views=4, seed=3, noise=0.01)
        maps = [build_pullback_lr(c, v.visibility) for v, c in zip(obs, chains)]
        a = init_atlas_average(obs, maps)
        perm = [2, 0, 3, 1]
        b = init_atlas_average([obs[i] for i in perm], [maps[i] for i in perm])
        assert np.array_equal(a.data, b.data)
        assert np.array_equal(a.mask, b.mask)

    def test_dimension_mismatch_raises(self):
        view = ViewObservation(view_id=0, image=np.zeros((3, 3)))
        with pytest.raises(StructuralError):
            init_atlas_average([view], [SparseLinearMap.identity(16)])

    def test_empty_views_raise(self):
        with pytest.raises(StructuralError):
            init_atlas_average([], [])


class TestDilateMask:
    def test_saturated_mask_unchanged(self):
        m = np.ones((9, 9), dtype=bool)
        assert dilate_mask(m, 3).all()

    def test_single_texel_becomes_block(self):
        m = np.zeros((7, 7), dtype=bool)
        m[3, 3] = True
        out = dilate_mask(m, 1)
        expect = np.zeros((7, 7), dtype=bool)
        expect[2:5, 2:5] = True
        np.testing.assert_array_equal(out, expect)

    def test_empty_mask_stays_empty(self):
        assert not dilate_mask(np.zeros((5, 5), dtype=bool), 4).any()

    def test_radius_zero_identity(self):
        rng = np.random.default_rng(1)
        m = rng.random((8, 8)) > 0.5
        np.testing.assert_array_equal(dilate_mask(m, 0), m)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), radius=st.integers(0, 4))
    def test_monotone(self, seed, radius):
        """Dilation only grows the valid set."""
        m = np.random.default_rng(seed).random((12, 12)) > 0.7
        out = dilate_mask(m, radius)
        assert np.all(out[m])

    def test_negative_radius_rejected(self):
        with pytest.raises(ParameterError):
            dilate_mask(np.ones((3, 3), bool), -1)


class TestExtractPatches:
    def test_single_tile(self):
        tex, obs, chains = scaled_scene(64, 256, 2, views=1, seed=4)
        ps = extract_patches(tex, obs, chains, factor=2, stride=64)
        assert len(ps) == 1
        assert ps.patches[0].offset == (0, 0)
        assert ps.warning is None

    def test_four_tiles(self):
        tex, obs, chains = scaled_scene(128, 256, 2, views=1, seed=5)
        ps = extract_patches(tex, obs, chains, factor=2, stride=64)
        assert len(ps) == 4
        assert [p.offset for p in ps.patches] == [(0, 0), (0, 64), (64, 0), (64, 64)]

    def test_crop_sizes_factor_two(self):
        tex, obs, chains = scaled_scene(64, 256, 2, views=2, seed=6)
        ps = extract_patches(tex, obs, chains, factor=2, stride=64)
        pv = ps.patches[0].views[0]
        assert pv.chain.img_shape == (IMG_CROP_SIZE, IMG_CROP_SIZE)
        assert pv.lr_crop.shape == (100, 100)
        assert IMG_CROP_SIZE == 2 * pv.lr_crop.shape[0]

    def test_crop_sizes_factor_four(self):
        tex, obs, chains = scaled_scene(64, 256, 4, views=1, seed=7)
        ps = extract_patches(tex, obs, chains, factor=4, stride=64)
        pv = ps.patches[0].views[0]
        assert pv.lr_crop.shape == (50, 50)
        assert IMG_CROP_SIZE == 4 * pv.lr_crop.shape[0]

    def test_small_atlas_warns_empty(self):
        tex = gen_texture("checker", (32, 32), seed=0)
        ps = extract_patches(tex, [], [], factor=2, stride=16)
        assert len(ps) == 0
        assert ps.warning is not None

    def test_patch_forward_matches_full_render_bit_exact(self):
        """On pixels the crop marks visible, the cropped chain applied to the
        cropped truth reproduces the full-scene render sample for sample."""
        tex, obs, chains = scaled_scene(96, 288, 2, views=2, seed=8, sigma=0.9)
        ps = extract_patches(tex, obs, chains, factor=2, stride=32)
        assert len(ps) == 4
        checked = 0
        for patch in ps.patches:
            oy, ox = patch.offset
            tex_patch = tex.data[oy:oy + PATCH_SIZE, ox:ox + PATCH_SIZE]
            for pv in patch.views:
                pred = pv.chain.forward(tex_patch)
                assert pv.visibility.any()
                diff = np.abs(pred - pv.lr_crop)[pv.visibility]
                assert diff.max() == 0.0
                checked += 1
        assert checked == 8

    def test_footprint_reprojects_inside_crop(self):
        """Columns of the cropped projection carry the full per-row weight of
        the original rows restricted to patch texels."""
        tex, obs, chains = scaled_scene(64, 256, 2, views=1, seed=9)
        ps = extract_patches(tex, obs, chains, factor=2, stride=64)
        pv = ps.patches[0].views[0]
        # total bilinear mass reaching patch texels equals the mass inside the crop
        full = chains[0].proj.scipy()
        oy, ox = ps.patches[0].offset
        dy, dx = np.mgrid[0:PATCH_SIZE, 0:PATCH_SIZE]
        cols = ((oy + dy) * 64 + (ox + dx)).ravel()
        mass_full = full[:, cols].sum()
        mass_crop = pv.chain.proj.scipy().sum()
        assert abs(mass_full - mass_crop) <= 1e-9

    def test_bad_stride_rejected(self):
        tex = gen_texture("checker", (64, 64), seed=0)
        with pytest.raises(ParameterError):
            extract_patches(tex, [], [], factor=2, stride=0)

    def test_small_image_grid_rejected(self):
        tex, obs, chains = scaled_scene(64, 128, 2, views=1, seed=10)  # 128 < 200
        with pytest.raises(StructuralError):
            extract_patches(tex, obs, chains, factor=2, stride=64)
