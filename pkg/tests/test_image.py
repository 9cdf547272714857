import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from cascadenet.errors import ConfigurationError, InvalidInputError
from cascadenet.image import (GrayImage, MaskImage, apply_mask, average_hash,
                              clahe, connected_components, equalize_he,
                              fill_holes, he_mapping, histogram,
                              keep_largest_components, load_image,
                              mask_from_gray, resize_bilinear, rotate,
                              save_image, write_pgm)

from oracles import average_hash_oracle, clahe_oracle, he_mapping_oracle

gray_images = arrays(np.uint8, st.tuples(st.integers(4, 24), st.integers(4, 24)),
                     elements=st.integers(0, 255)).map(GrayImage)


def img(arr):
    return GrayImage(np.asarray(arr, dtype=np.uint8))


class TestHistogram:
    def test_all_zero_image(self):
        h = histogram(img(np.zeros((2, 2))))
        assert h.bins[0] == 4
        assert h.bins[1:].sum() == 0
        assert h.total == 4

    def test_one_pixel_per_level(self):
        h = histogram(img([[0, 1], [2, 3]]))
        np.testing.assert_array_equal(h.bins[:4], 1)
        assert h.bins[4:].sum() == 0

    def test_matches_counting_oracle(self, rng):
        pixels = rng.integers(0, 256, size=(16, 16), dtype=np.uint8)
        h = histogram(img(pixels))
        expected = np.zeros(256, dtype=np.int64)
        for v in pixels.ravel():
            expected[v] += 1
        np.testing.assert_array_equal(h.bins, expected)

    def test_region_and_errors(self):
        im = img([[0, 1], [2, 3]])
        h = histogram(im, region=(0, 0, 1, 2))
        assert h.total == 2
        assert h.bins[0] == 1 and h.bins[2] == 1
        with pytest.raises(InvalidInputError):
            histogram(im, region=(0, 0, 0, 2))
        with pytest.raises(InvalidInputError):
            histogram(im, region=(1, 1, 2, 2))


class TestEqualizeHE:
    def test_constant_image_maps_to_255(self):
        out = equalize_he(img(np.full((3, 3), 5)))
        np.testing.assert_array_equal(out.pixels, 255)

    def test_four_level_hand_example(self):
        out = equalize_he(img([[0, 1], [2, 3]]))
        np.testing.assert_array_equal(out.pixels, [[64, 128], [191, 255]])

    def test_matches_oracle_mapping(self, rng):
        pixels = rng.integers(0, 256, size=(16, 16), dtype=np.uint8)
        out = equalize_he(img(pixels))
        table = he_mapping_oracle(pixels)
        np.testing.assert_array_equal(out.pixels, table[pixels])

    def test_uniform_histogram_relabeling_and_composition(self):
        # one pixel of every level: equalization acts as a fixed relabeling
        pixels = np.arange(256, dtype=np.uint8).reshape(16, 16)
        once = equalize_he(img(pixels))
        relabel = he_mapping_oracle(pixels)
        np.testing.assert_array_equal(once.pixels, relabel[pixels])
        # applying again equals composing with the mapping of the equalized image
        twice = equalize_he(once)
        relabel2 = he_mapping_oracle(once.pixels)
        np.testing.assert_array_equal(twice.pixels, relabel2[once.pixels])

    @given(gray_images)
    def test_mapping_monotone(self, image):
        table = he_mapping(histogram(image))
        assert np.all(np.diff(table.astype(np.int64)) >= 0)


class TestClahe:
    @given(gray_images)
    def test_degenerates_to_he(self, image):
        out = clahe(image, tiles=(1, 1), clip_limit=256.0)
        np.testing.assert_array_equal(out.pixels, equalize_he(image).pixels)

    def test_matches_straight_line_oracle_small(self, rng):
        pixels = rng.integers(0, 256, size=(4, 4), dtype=np.uint8)
        out = clahe(img(pixels), tiles=(2, 2), clip_limit=4.0)
        np.testing.assert_array_equal(out.pixels, clahe_oracle(pixels, (2, 2), 4.0))

    def test_matches_straight_line_oracle_uneven(self, rng):
        pixels = rng.integers(0, 256, size=(13, 11), dtype=np.uint8)
        out = clahe(img(pixels), tiles=(3, 4), clip_limit=2.5)
        np.testing.assert_array_equal(out.pixels,
                                      clahe_oracle(pixels, (3, 4), 2.5))

    def test_constant_image_stays_constant(self):
        for tiles in ((2, 2), (3, 3), (4, 2)):
            out = clahe(img(np.full((17, 19), 77)), tiles=tiles, clip_limit=4.0)
            assert len(np.unique(out.pixels)) == 1

    def test_clipped_bins_respect_ceiling(self, rng):
        # reproduce the per-tile clip+redistribute and check the bound
        pixels = rng.integers(0, 40, size=(16, 16), dtype=np.uint8)
        tile = pixels[:8, :8]
        npx = 64
        clip_limit = 4.0
        ceiling = max(1, int(clip_limit * npx / 256))
        bins = np.bincount(tile.ravel(), minlength=256).astype(np.int64)
        excess = int(np.maximum(bins - ceiling, 0).sum())
        clipped = np.minimum(bins, ceiling)
        clipped += excess // 256
        clipped[:excess % 256] += 1
        assert clipped.max() <= ceiling + excess // 256 + 1

    def test_tile_too_small_rejected(self):
        with pytest.raises(ConfigurationError):
            clahe(img(np.zeros((8, 8))), tiles=(8, 8), clip_limit=4.0)

    def test_bad_grid_rejected(self):
        with pytest.raises(ConfigurationError):
            clahe(img(np.zeros((8, 8))), tiles=(0, 1))
        with pytest.raises(ConfigurationError):
            clahe(img(np.zeros((8, 8))), tiles=(9, 1))


class TestRotate:
    def test_zero_degrees_bit_identical(self, rng):
        image = img(rng.integers(0, 256, size=(9, 7), dtype=np.uint8))
        np.testing.assert_array_equal(rotate(image, 0.0).pixels, image.pixels)

    def test_full_turn_within_one_level(self, rng):
        image = img(rng.integers(0, 256, size=(8, 8), dtype=np.uint8))
        # +180 then -180 is a full turn through the API's |deg|<=180 window
        out = rotate(rotate(image, 180.0), 180.0)
        assert np.abs(out.pixels.astype(int) - image.pixels.astype(int)).max() <= 1

    def test_quarter_turn_matches_permutation_oracle(self):
        pixels = np.array([[10, 20, 30], [40, 50, 60], [70, 80, 90]], dtype=np.uint8)
        out = rotate(img(pixels), 90.0)
        # +90 turns content clockwise (row 0 on top): first row becomes last column
        expected = np.rot90(pixels, k=-1)
        assert np.abs(out.pixels.astype(int) - expected.astype(int)).max() <= 1

    def test_fill_value_used_outside(self):
        # the 9x9 corner lands fully outside the frame after a 45 degree turn
        image = img(np.full((9, 9), 200))
        out = rotate(image, 45.0, fill=7)
        assert out.pixels[0, 0] == 7

    def test_angle_bound(self):
        with pytest.raises(InvalidInputError):
            rotate(img(np.zeros((4, 4))), 200.0)


class TestResize:
    def test_identity_bit_exact(self, rng):
        image = img(rng.integers(0, 256, size=(6, 9), dtype=np.uint8))
        np.testing.assert_array_equal(
            resize_bilinear(image, 9, 6).pixels, image.pixels)

    def test_constant_stays_constant(self):
        out = resize_bilinear(img(np.full((3, 5), 42)), 7, 11)
        np.testing.assert_array_equal(out.pixels, 42)

    def test_two_by_two_to_three_by_three_hand_oracle(self):
        # pattern [[0,2],[2,4]] scaled by 60 -> hand-evaluated half-pixel bilinear
        image = img(np.array([[0, 120], [120, 240]], dtype=np.uint8))
        out = resize_bilinear(image, 3, 3)
        # src coords for outputs: (x+0.5)*2/3-0.5 -> [-1/6, 1/2, 7/6]
        # clamped edge sampling makes corners exact, center the average
        expected = np.array([[0, 60, 120], [60, 120, 180], [120, 180, 240]],
                            dtype=np.uint8)
        np.testing.assert_array_equal(out.pixels, expected)

    def test_bad_extents(self):
        with pytest.raises(InvalidInputError):
            resize_bilinear(img(np.zeros((3, 3))), 0, 3)


class TestApplyMask:
    def test_all_ones_identity(self, rng):
        image = img(rng.integers(0, 256, size=(4, 4), dtype=np.uint8))
        mask = MaskImage(np.ones((4, 4), dtype=np.uint8))
        np.testing.assert_array_equal(apply_mask(image, mask).pixels, image.pixels)

    def test_all_zeros_blackout(self, rng):
        image = img(rng.integers(0, 256, size=(4, 4), dtype=np.uint8))
        mask = MaskImage(np.zeros((4, 4), dtype=np.uint8))
        np.testing.assert_array_equal(apply_mask(image, mask).pixels, 0)

    def test_checkerboard_survivors(self):
        image = img(np.full((4, 4), 9))
        board = MaskImage(((np.indices((4, 4)).sum(axis=0)) % 2 == 0)
                          .astype(np.uint8))
        out = apply_mask(image, board)
        np.testing.assert_array_equal(out.pixels[board.pixels == 1], 9)
        np.testing.assert_array_equal(out.pixels[board.pixels == 0], 0)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInputError):
            apply_mask(img(np.zeros((4, 4))), MaskImage(np.ones((3, 4), np.uint8)))

    @given(gray_images)
    def test_idempotent(self, image):
        mask = MaskImage((image.pixels > 127).astype(np.uint8))
        once = apply_mask(image, mask)
        twice = apply_mask(once, mask)
        np.testing.assert_array_equal(once.pixels, twice.pixels)


class TestAverageHash:
    def test_constant_image_all_zero_bits(self):
        bits = average_hash(img(np.full((16, 16), 9)))
        np.testing.assert_array_equal(bits, 0)

    def test_half_dark_half_bright_split(self):
        pixels = np.zeros((32, 32), dtype=np.uint8)
        pixels[:, 16:] = 255
        bits = average_hash(img(pixels), side=8).reshape(8, 8)
        np.testing.assert_array_equal(bits[:, :4], 0)
        np.testing.assert_array_equal(bits[:, 4:], 1)

    def test_matches_straight_line_oracle(self, rng):
        pixels = rng.integers(0, 256, size=(19, 23), dtype=np.uint8)
        np.testing.assert_array_equal(average_hash(img(pixels), side=8),
                                      average_hash_oracle(pixels, 8))

    @given(arrays(np.uint8, st.tuples(st.integers(8, 20), st.integers(8, 20)),
                  elements=st.integers(0, 127)))
    def test_invariant_to_ordering_preserving_scaling(self, pixels):
        doubled = (pixels.astype(np.uint16) * 2).astype(np.uint8)  # no saturation
        np.testing.assert_array_equal(average_hash(GrayImage(pixels)),
                                      average_hash(GrayImage(doubled)))

    def test_side_bound(self):
        with pytest.raises(ConfigurationError):
            average_hash(img(np.zeros((4, 4))), side=1)


class TestIO:
    def test_pgm_writer_exact_bytes(self, tmp_path):
        image = img(np.arange(6, dtype=np.uint8).reshape(2, 3))
        path = tmp_path / "x.pgm"
        write_pgm(image, path)
        data = path.read_bytes()
        assert data == b"P5\n3 2\n255\n" + bytes(range(6))

    def test_pgm_round_trip(self, tmp_path, rng):
        image = img(rng.integers(0, 256, size=(5, 7), dtype=np.uint8))
        path = tmp_path / "x.pgm"
        save_image(image, path)
        np.testing.assert_array_equal(load_image(path).pixels, image.pixels)

    def test_png_round_trip(self, tmp_path, rng):
        image = img(rng.integers(0, 256, size=(6, 4), dtype=np.uint8))
        path = tmp_path / "x.png"
        save_image(image, path)
        np.testing.assert_array_equal(load_image(path).pixels, image.pixels)

    def test_color_png_luma_converted(self, tmp_path):
        from PIL import Image as PILImage
        arr = np.zeros((2, 2, 3), dtype=np.uint8)
        arr[..., 0] = 255  # pure red
        PILImage.fromarray(arr, "RGB").save(tmp_path / "c.png")
        gray = load_image(tmp_path / "c.png")
        assert gray.pixels.shape == (2, 2)
        assert abs(int(gray.pixels[0, 0]) - 76) <= 1  # BT.601 red weight

    def test_undecodable_file_rejected(self, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"not an image")
        with pytest.raises(InvalidInputError):
            load_image(bad)

    def test_truncated_pgm_rejected(self, tmp_path):
        (tmp_path / "t.pgm").write_bytes(b"P5\n4 4\n255\nxx")
        with pytest.raises(InvalidInputError):
            load_image(tmp_path / "t.pgm")


class TestMaskUtilities:
    def test_connected_components_counts(self):
        mask = np.array([[1, 0, 1], [1, 0, 0], [0, 0, 1]], dtype=np.uint8)
        labels, count = connected_components(mask)
        assert count == 3
        assert labels[0, 0] == labels[1, 0]

    def test_keep_largest_two(self):
        mask = np.zeros((8, 8), dtype=np.uint8)
        mask[0:4, 0:3] = 1     # 12 px
        mask[5:8, 5:8] = 1     # 9 px
        mask[0, 7] = 1         # speck
        kept = keep_largest_components(MaskImage(mask), keep=2)
        assert kept.pixels.sum() == 21
        assert kept.pixels[0, 7] == 0

    def test_fill_holes(self):
        mask = np.ones((5, 5), dtype=np.uint8)
        mask[2, 2] = 0
        filled = fill_holes(MaskImage(mask))
        assert filled.pixels[2, 2] == 1
        # background touching the border is not a hole
        open_mask = np.zeros((5, 5), dtype=np.uint8)
        open_mask[1:4, 1:4] = 1
        unchanged = fill_holes(MaskImage(open_mask))
        assert unchanged.pixels[0, 0] == 0

    def test_mask_from_gray_threshold(self):
        m = mask_from_gray(img([[0, 128], [255, 127]]))
        np.testing.assert_array_equal(m.pixels, [[0, 1], [1, 0]])
