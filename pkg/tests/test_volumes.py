import numpy as np
import pytest

from mdpformer.volumes import (BINARY_CODES, SEG3_CODES, BoundingBox3D,
                               EmptyForegroundError, LabelVolume, ManifestRow,
                               Volume3D, bbox_of_mask, central_box,
                               crop_and_resize, draw_margins, read_label,
                               read_manifest, read_volume, resample,
                               write_manifest, write_nifti, znormalize)


def make_volume(shape=(2, 10, 12, 6), spacing=(1.0, 1.0, 2.0), seed=0):
    rng = np.random.default_rng(seed)
    return Volume3D(rng.normal(size=shape).astype(np.float32), spacing)


class TestResample:
    def test_exact_2x_ratio(self):
        v = make_volume((1, 512, 512, 100) if False else (1, 64, 64, 10),
                        spacing=(0.34, 0.34, 3.0))
        out = resample(v, (0.68, 0.68, 3.0))
        assert out.spatial_shape == (32, 32, 10)
        assert out.spacing == (0.68, 0.68, 3.0)

    def test_identity_bit_exact(self):
        v = make_volume()
        out = resample(v, v.spacing)
        assert np.array_equal(out.data, v.data)

    def test_dims_match_independent_oracle(self):
        v = make_volume((1, 100, 100, 40), spacing=(1.0, 1.0, 1.5))
        target = (0.68, 0.68, 3.0)
        # oracle: round(dim * s_in / s_out) per axis
        expected = tuple(round(d * si / so)
                         for d, si, so in zip((100, 100, 40), v.spacing, target))
        assert expected == (147, 147, 20)
        out = resample(v, target)
        assert out.spatial_shape == expected

    def test_extent_preserved_within_one_voxel(self):
        v = make_volume((1, 37, 23, 11), spacing=(0.9, 1.7, 2.4))
        target = (1.3, 0.8, 3.1)
        out = resample(v, target)
        for d_in, d_out, si, so in zip(v.spatial_shape, out.spatial_shape,
                                       v.spacing, target):
            assert abs(d_in * si - d_out * so) <= so

    def test_rejects_nonpositive_spacing(self):
        with pytest.raises(ValueError):
            resample(make_volume(), (0.0, 1.0, 1.0))

    def test_idempotent_after_first_resample(self):
        v = make_volume((1, 30, 30, 12), spacing=(1.0, 1.0, 2.0))
        once = resample(v, (0.8, 1.1, 2.6))
        twice = resample(once, (0.8, 1.1, 2.6))
        assert np.allclose(once.data, twice.data, atol=1e-5)

    def test_labels_keep_code_set(self):
        rng = np.random.default_rng(1)
        lab = LabelVolume(rng.integers(0, 3, size=(20, 18, 9)).astype(np.uint8),
                          (1.0, 1.0, 2.0))
        out = resample(lab, (0.75, 1.4, 1.1))
        assert set(np.unique(out.data)) <= set(np.unique(lab.data))
        assert out.valid_codes == lab.valid_codes


class TestZNormalize:
    def test_hand_oracle_three_values(self):
        # population sigma of {1,2,3}: mean 2, var 2/3
        v = Volume3D(np.array([1.0, 2.0, 3.0], dtype=np.float32).reshape(1, 3, 1, 1),
                     (1, 1, 1))
        out = znormalize(v)
        sigma = np.sqrt(2.0 / 3.0)
        expected = (np.array([1.0, 2.0, 3.0]) - 2.0) / sigma
        assert np.allclose(out.data.ravel(), expected, atol=1e-6)
        assert np.allclose(out.data.ravel(), [-1.2247, 0.0, 1.2247], atol=1e-4)

    def test_moments_per_channel(self):
        out = znormalize(make_volume((3, 16, 16, 8), seed=5))
        for c in range(3):
            assert abs(out.data[c].mean()) < 1e-5
            assert abs(out.data[c].std() - 1.0) < 1e-5

    def test_idempotent(self):
        once = znormalize(make_volume())
        twice = znormalize(once)
        assert np.allclose(once.data, twice.data, atol=1e-6)

    def test_constant_channel_zeroed_with_warning(self):
        v = Volume3D(np.full((1, 3, 1, 1), 5.0, dtype=np.float32), (1, 1, 1))
        with pytest.warns(UserWarning):
            out = znormalize(v)
        assert np.array_equal(out.data, np.zeros_like(v.data))

    def test_too_few_voxels_rejected(self):
        with pytest.raises(ValueError):
            znormalize(Volume3D(np.zeros((1, 1, 1, 1), dtype=np.float32), (1, 1, 1)))


class TestBBox:
    def test_singleton(self):
        m = np.zeros((8, 8, 8), dtype=np.uint8)
        m[3, 4, 5] = 1
        box = bbox_of_mask(LabelVolume(m, (1, 1, 1), valid_codes=BINARY_CODES), {1})
        assert box.lo == (3, 4, 5) and box.hi == (3, 4, 5)

    def test_extremes_span_grid(self):
        m = np.zeros((10, 10, 10), dtype=np.uint8)
        m[0, 0, 0] = m[9, 9, 9] = 1
        box = bbox_of_mask(LabelVolume(m, (1, 1, 1), valid_codes=BINARY_CODES), {1})
        assert box.lo == (0, 0, 0) and box.hi == (9, 9, 9)

    def test_matches_brute_force_oracle(self, rng):
        m = (rng.random((14, 11, 9)) < 0.03).astype(np.uint8)
        m[7, 5, 4] = 1  # guarantee nonempty
        box = bbox_of_mask(LabelVolume(m, (1, 1, 1), valid_codes=BINARY_CODES), {1})
        # oracle: exhaustive scan over all voxels
        lo = [10 ** 9] * 3
        hi = [-1] * 3
        for y in range(14):
            for x in range(11):
                for z in range(9):
                    if m[y, x, z]:
                        for a, idx in enumerate((y, x, z)):
                            lo[a] = min(lo[a], idx)
                            hi[a] = max(hi[a], idx)
        assert box.lo == tuple(lo) and box.hi == tuple(hi)

    def test_empty_foreground_distinguished(self):
        m = LabelVolume(np.zeros((4, 4, 4), dtype=np.uint8), (1, 1, 1),
                        valid_codes=BINARY_CODES)
        with pytest.raises(EmptyForegroundError):
            bbox_of_mask(m, {1})

    def test_box_validation(self):
        with pytest.raises(ValueError):
            BoundingBox3D((3, 0, 0), (2, 5, 5))
        with pytest.raises(ValueError):
            BoundingBox3D((-1, 0, 0), (2, 5, 5))


class TestCropAndResize:
    def test_identity(self):
        v = make_volume((2, 8, 10, 6))
        box = BoundingBox3D((0, 0, 0), (7, 9, 5))
        out = crop_and_resize(v, box, (0, 0), (8, 10, 6), rng_seed=1)
        assert np.allclose(out.data, v.data, atol=1e-6)

    def test_target_dims_honored(self):
        v = make_volume((3, 30, 40, 10))
        box = BoundingBox3D((4, 6, 1), (25, 33, 8))
        out = crop_and_resize(v, box, (0, 2), (160, 256, 40), rng_seed=7)
        assert out.data.shape == (3, 160, 256, 40)

    def test_fixed_seed_reproducible(self):
        v = make_volume((1, 20, 20, 10))
        box = BoundingBox3D((5, 5, 2), (14, 14, 7))
        a = crop_and_resize(v, box, (0, 8), (8, 8, 4), rng_seed=123)
        b = crop_and_resize(v, box, (0, 8), (8, 8, 4), rng_seed=123)
        assert np.array_equal(a.data, b.data)
        assert draw_margins((0, 8), 123) == draw_margins((0, 8), 123)

    def test_label_codes_preserved(self, rng):
        lab = LabelVolume(rng.integers(0, 3, size=(20, 20, 10)).astype(np.uint8),
                          (1, 1, 1))
        box = BoundingBox3D((2, 3, 1), (17, 16, 8))
        out = crop_and_resize(lab, box, (0, 4), (9, 13, 5), rng_seed=5)
        assert set(np.unique(out.data)) <= {0, 1, 2}
        assert out.data.shape == (9, 13, 5)

    def test_box_outside_volume_rejected(self):
        v = make_volume((1, 8, 8, 8))
        with pytest.raises(ValueError):
            crop_and_resize(v, BoundingBox3D((0, 0, 0), (8, 7, 7)), (0, 0),
                            (4, 4, 4), rng_seed=0)

    def test_central_box_fallback_shape(self):
        box = central_box((20, 30, 10))
        assert all(l >= 0 for l in box.lo)
        for l, h, e in zip(box.lo, box.hi, (20, 30, 10)):
            assert h < e and (h - l + 1) >= e // 2


class TestNiftiIO:
    def test_volume_round_trip(self, tmp_path):
        v = make_volume((3, 9, 7, 5), spacing=(0.68, 0.68, 3.0))
        for name in ("v.nii", "v.nii.gz"):
            path = tmp_path / name
            write_nifti(path, v)
            back = read_volume(path)
            assert np.array_equal(back.data, v.data)
            assert np.allclose(back.spacing, v.spacing, atol=1e-6)

    def test_label_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        lab = LabelVolume(rng.integers(0, 3, size=(6, 5, 4)).astype(np.uint8),
                          (1.5, 1.5, 3.0))
        path = tmp_path / "lab.nii.gz"
        write_nifti(path, lab)
        back = read_label(path, valid_codes=SEG3_CODES)
        assert np.array_equal(back.data, lab.data)

    def test_deterministic_bytes(self, tmp_path):
        v = make_volume((1, 6, 6, 4))
        p1, p2 = tmp_path / "a.nii.gz", tmp_path / "b.nii.gz"
        write_nifti(p1, v)
        write_nifti(p2, v)
        assert p1.read_bytes() == p2.read_bytes()


class TestManifest:
    def test_round_trip(self, tmp_path):
        rows = [ManifestRow("case_0000", "images/a.nii.gz", "labels/a.nii.gz",
                            "female", 61.0, "mcn", "pancreas/a.nii.gz"),
                ManifestRow("case_0001", "images/b.nii.gz", "labels/b.nii.gz",
                            "male", 47.5, "pdac", "pancreas/b.nii.gz")]
        path = tmp_path / "manifest.csv"
        write_manifest(rows, path)
        back = read_manifest(path)
        assert back == rows
        header = path.read_text().splitlines()[0]
        assert header.startswith("case_id,image_path,label_path,gender,age_years,class10")

    def test_unknown_class_rejected(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("case_id,image_path,label_path,gender,age_years,class10,pancreas_path\n"
                        "c0,i.nii,l.nii,female,40,unknown,p.nii\n")
        with pytest.raises(ValueError):
            read_manifest(path)


class TestValidation:
    def test_volume_rejects_nonfinite(self):
        data = np.zeros((1, 2, 2, 2), dtype=np.float32)
        data[0, 0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            Volume3D(data, (1, 1, 1))

    def test_label_rejects_bad_codes(self):
        with pytest.raises(ValueError):
            LabelVolume(np.full((2, 2, 2), 7, dtype=np.uint8), (1, 1, 1),
                        valid_codes=SEG3_CODES)
