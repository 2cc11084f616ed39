import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snider.data import (
    ANGLES,
    PlateSpec,
    area_downsample,
    degrade,
    digit_glyphs,
    generate_sample,
    make_dataset,
    otsu_binarize,
    otsu_threshold,
    plate_samples,
    read_manifest,
    render_plate,
    rotate,
)
from snider.data.font import glyph_bitmap
from snider.data.synthesis import bilinear_upsample, default_scale, random_digit_strings, to_gray_levels

from oracles import otsu_exhaustive, rotate_pointwise


class TestFont:
    def test_all_digits_present_and_distinct(self):
        glyphs = digit_glyphs(1)
        assert sorted(glyphs) == list("0123456789")
        assert len({g.tobytes() for g in glyphs.values()}) == 10
        assert all(g.shape == (7, 5) for g in glyphs.values())

    def test_scaling_replicates_pixels(self):
        g1, g3 = glyph_bitmap("7", 1), glyph_bitmap("7", 3)
        np.testing.assert_array_equal(g3, np.kron(g1, np.ones((3, 3))))

    def test_unknown_char_rejected(self):
        with pytest.raises((KeyError, ValueError)):
            glyph_bitmap("A")


class TestRenderPlate:
    def test_repeated_glyph_regions_equal(self):
        plate = render_plate(PlateSpec("0000", jitter=0), 64, 0)
        regions = [plate.image[:, y0:y1, x0:x1] for y0, x0, y1, x1 in plate.boxes]
        assert len(regions) == 4
        for r in regions[1:]:
            np.testing.assert_array_equal(r, regions[0])

    def test_deterministic(self):
        a = render_plate(PlateSpec("48151"), 64, 9).image
        b = render_plate(PlateSpec("48151"), 64, 9).image
        assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("digits,logo", [("1234", False), ("90817", True), ("12345678", False)])
    def test_mean_intensity_from_ink_count(self, digits, logo):
        spec = PlateSpec(digits, scale=1, logo=logo)
        plate = render_plate(spec, 64, 1)
        ink = np.isclose(plate.image[0], spec.foreground)
        frac = ink.sum() / ink.size
        expect = spec.background * (1 - frac) + spec.foreground * frac
        assert plate.image.mean() == pytest.approx(expect, abs=1e-6)
        assert plate.ink_fraction == pytest.approx(frac)

    def test_boxes_disjoint_and_inside(self):
        plate = render_plate(PlateSpec("5555555", scale=1), 64, 3)
        for (a, b) in zip(plate.boxes, plate.boxes[1:]):
            assert a[3] <= b[1]
        for y0, x0, y1, x1 in plate.boxes:
            assert 0 <= y0 < y1 <= 64 and 0 <= x0 < x1 <= 64

    def test_ink_only_inside_boxes(self):
        plate = render_plate(PlateSpec("2468"), 64, 0)
        mask = np.ones((64, 64), bool)
        for y0, x0, y1, x1 in plate.boxes:
            mask[y0:y1, x0:x1] = False
        assert np.all(plate.image[:, mask] == 0.9)

    def test_overfull_rejected(self):
        with pytest.raises(ValueError):
            render_plate(PlateSpec("12345678", scale=2), 64, 0)

    def test_too_small_rejected(self):
        with pytest.raises(ValueError):
            render_plate(PlateSpec("1234", scale=1), 28, 0)

    @pytest.mark.parametrize("digits", ["123", "123456789", "12a4"])
    def test_bad_digits_rejected(self, digits):
        with pytest.raises(ValueError):
            PlateSpec(digits)


class TestRotate:
    def test_zero_is_identity(self):
        img = np.random.default_rng(0).uniform(size=(3, 16, 16))
        np.testing.assert_array_equal(rotate(img, 0, 0.5), img)

    def test_quarter_turn_is_permutation(self):
        img = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(rotate(img, 90, 0.0), np.rot90(img))
        np.testing.assert_array_equal(rotate(img, -90, 0.0), np.rot90(img, -1))

    @pytest.mark.parametrize("angle", [15, -30, 7.5])
    def test_matches_pointwise_oracle(self, angle):
        img = np.random.default_rng(1).uniform(size=(11, 12))
        np.testing.assert_allclose(rotate(img, angle, 0.25), rotate_pointwise(img, angle, 0.25), atol=1e-9)

    def test_round_trip_center_crop(self):
        img = render_plate(PlateSpec("31415"), 320, 0).image
        back = rotate(rotate(img, 15, 0.9), -15, 0.9)
        c = slice(80, 240)
        assert np.abs(back[:, c, c] - img[:, c, c]).mean() < 0.02

    @given(st.floats(-180, 180), st.floats(0, 1))
    @settings(max_examples=30, deadline=None)
    def test_all_fill_invariant(self, angle, fill):
        img = np.full((2, 9, 9), fill)
        np.testing.assert_allclose(rotate(img, angle, fill), img, atol=1e-12)

    def test_shape_preserved(self):
        assert rotate(np.zeros((3, 20, 24)), 30, 0).shape == (3, 20, 24)


class TestDegrade:
    def test_constant_unchanged(self):
        img = np.full((3, 16, 16), 0.37)
        np.testing.assert_array_equal(degrade(img), img)

    def test_shape_preserved(self):
        assert degrade(np.zeros((3, 32, 32))).shape == (3, 32, 32)

    def test_downsample_conserves_energy(self):
        img = np.zeros((1, 16, 16))
        img[0, 5, 9] = 1.0
        small = area_downsample(img, 4)
        assert small.shape == (1, 4, 4)
        assert small.sum() * 16 == pytest.approx(1.0, abs=1e-6)

    def test_indivisible_rejected(self):
        with pytest.raises(ValueError):
            degrade(np.zeros((3, 18, 18)))

    def test_noise_seeded_and_clipped(self):
        img = np.full((3, 16, 16), 0.95)
        a, b = degrade(img, 0.2, seed=4), degrade(img, 0.2, seed=4)
        assert a.tobytes() == b.tobytes()
        assert a.min() >= 0 and a.max() <= 1 and not np.array_equal(a, img)

    def test_loses_thin_strokes(self):
        img = render_plate(PlateSpec("1111", scale=1), 32, 0).image
        assert not np.array_equal(degrade(img), img)

    def test_upsample_block_means(self):
        small = np.random.default_rng(0).uniform(size=(1, 4, 4))
        up = bilinear_upsample(small, 4)
        assert up.shape == (1, 16, 16)
        # each sample lies between the min and max of the low-resolution values
        assert up.min() >= small.min() - 1e-12 and up.max() <= small.max() + 1e-12


class TestOtsu:
    def test_two_level_image(self):
        img = np.zeros((3, 4, 4))
        img[:, :2, :3] = 1.0
        assert otsu_binarize(img).sum() == 6

    def test_constant_image_all_zero(self):
        assert otsu_binarize(np.full((3, 8, 8), 0.4)).sum() == 0

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**16))
    def test_random_bimodal_matches_exhaustive(self, seed):
        r = np.random.default_rng(seed)
        a, b = r.integers(0, 120), r.integers(130, 256)
        vals = np.concatenate([r.normal(a, 10, 200), r.normal(b, 15, 150)])
        hist = np.bincount(np.clip(vals, 0, 255).astype(int), minlength=256)
        assert otsu_threshold(hist) == otsu_exhaustive(hist)

    def test_gray_levels_use_luma(self):
        img = np.zeros((3, 1, 1))
        img[1] = 1.0
        assert to_gray_levels(img)[0, 0] == round(0.587 * 255)

    def test_bad_histogram_rejected(self):
        with pytest.raises(ValueError):
            otsu_threshold([1, 2, 3])


class TestSamples:
    def test_four_angles_share_clean(self):
        samples = plate_samples(PlateSpec("27182"), 64, 5)
        assert [s.angle for s in samples] == list(ANGLES)
        assert len({s.i_hq_0.tobytes() for s in samples}) == 1

    def test_count_is_length(self):
        assert generate_sample(PlateSpec("12345"), 15, 64, 0).count == 5

    def test_invalid_angle_rejected(self):
        with pytest.raises(ValueError):
            generate_sample(PlateSpec("1234"), 45, 64, 0)

    def test_composition(self):
        spec = PlateSpec("60221")
        s = generate_sample(spec, -15, 64, 3)
        np.testing.assert_array_equal(s.i_hq, rotate(s.i_hq_0, -15, spec.background))
        np.testing.assert_array_equal(s.i_lq, degrade(s.i_hq))
        np.testing.assert_array_equal(s.i_seg[0], otsu_binarize(s.i_lq))

    def test_mask_binary_with_both_classes(self):
        rng = np.random.default_rng(0)
        strings = random_digit_strings(rng, 100, 4, 8)
        for i, digits in enumerate(strings):
            scale = 2 if len(digits) <= 5 else 1
            s = generate_sample(PlateSpec(digits, scale=scale), ANGLES[i % 4], 64, i, noise_sigma=0.05)
            vals = set(np.unique(s.i_seg))
            assert vals == {0.0, 1.0}, digits
            assert s.i_seg.shape == (1, 64, 64) and s.i_lq.shape == s.i_hq.shape == s.i_hq_0.shape

    def test_default_scale(self):
        assert default_scale(64) == 2 and default_scale(32) == 1 and default_scale(320) == 10

    def test_unique_strings(self):
        strings = random_digit_strings(np.random.default_rng(1), 500, 4, 5)
        assert len(set(strings)) == 500 and all(4 <= len(s) <= 5 for s in strings)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    return out, make_dataset(out, 10, 64, seed=7, split=0.8)


class TestDataset:
    def test_split_counts(self, dataset):
        _, (train, test) = dataset
        assert len(train) == 32 and len(test) == 8

    def test_split_by_plate(self, dataset):
        _, (train, test) = dataset
        assert not {r.digits for r in train.records} & {r.digits for r in test.records}

    def test_manifest_round_trip(self, dataset):
        out, (train, _) = dataset
        again = read_manifest(out / "train.tsv")
        assert again.records == train.records
        s = again.load(0)
        assert s.i_lq.shape == (3, 64, 64) and s.count == len(s.digits)

    def test_images_quantised_round_trip(self, dataset):
        out, (train, _) = dataset
        s = train.load(1)
        spec_sample = generate_sample(PlateSpec(s.digits), s.angle, 64, 0)
        assert s.i_seg.dtype.kind == "f" and set(np.unique(s.i_seg)) <= {0.0, 1.0}
        assert spec_sample.count == s.count

    def test_byte_identical_rerun(self, dataset, tmp_path):
        out, _ = dataset
        make_dataset(tmp_path, 10, 64, seed=7, split=0.8)
        for name in ("train.tsv", "test.tsv"):
            assert (tmp_path / name).read_bytes() == (out / name).read_bytes()
        files = sorted(p.name for p in (out / "images").iterdir())
        assert files == sorted(p.name for p in (tmp_path / "images").iterdir())
        for name in files:
            assert (out / "images" / name).read_bytes() == (tmp_path / "images" / name).read_bytes()

    def test_unfit_plate_rejected_before_writing(self, tmp_path):
        with pytest.raises(ValueError, match="do not fit"):
            make_dataset(tmp_path / "d", 4, 32, 0, max_digits=5)
        assert not (tmp_path / "d").exists()

    @pytest.mark.parametrize("split", [0.0, 1.0, -0.2])
    def test_bad_split_rejected(self, tmp_path, split):
        with pytest.raises(ValueError):
            make_dataset(tmp_path, 4, 64, 0, split=split)
