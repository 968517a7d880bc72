import math

import numpy as np
import pytest

from oracles import random_blob, thickness_scan
from conftest import UNIT, make_mask
from voleval.thickness import (
    BlandAltman,
    ThicknessResult,
    bland_altman,
    longitudinal_change_mm,
    mean_thickness_mm,
    thickness_difference_mm,
    thickness_error_mm,
)
from voleval.volume import LabelVolume, VoxelSpacing, extract_mask


def slab_mask(thickness, dz=0.70, lateral=12, margin=6):
    """Slab along z with generous lateral spacing so faces do not clip."""
    spacing = VoxelSpacing(5.0, 5.0, dz)
    m = np.zeros((lateral, lateral, thickness + 2 * margin), bool)
    m[:, :, margin : margin + thickness] = True
    return make_mask(m, spacing=spacing)


class TestMeanThickness:
    @pytest.mark.parametrize("t", [3, 5, 7])
    def test_slab_within_one_voxel(self, t):
        result = mean_thickness_mm(slab_mask(t))
        assert result.medial_voxel_count > 0
        assert abs(result.mean_thickness_mm - t * 0.70) <= 0.70 + 1e-9

    def test_empty_mask_flagged(self):
        with pytest.warns(UserWarning, match="empty"):
            result = mean_thickness_mm(make_mask(np.zeros((4, 4, 4), bool)))
        assert result.mean_thickness_mm == 0.0
        assert result.medial_voxel_count == 0

    def test_ball_within_voxel_diagonal(self):
        r = 6
        n = 2 * r + 5
        c = n // 2
        g = np.ogrid[:n, :n, :n]
        ball = (g[0] - c) ** 2 + (g[1] - c) ** 2 + (g[2] - c) ** 2 <= r * r
        result = mean_thickness_mm(make_mask(ball))
        assert abs(result.mean_thickness_mm - 2 * r) <= math.sqrt(3.0)

    def test_meniscus_rejected(self):
        with pytest.raises(ValueError, match="cartilage"):
            mean_thickness_mm(make_mask(np.ones((3, 3, 3), bool), tissue=4))

    def test_matches_brute_force_bitwise(self, rng):
        for _ in range(5):
            blob = random_blob(rng, (9, 9, 9))
            got = mean_thickness_mm(make_mask(blob, spacing=VoxelSpacing(0.31, 0.46, 0.70)))
            want_mm, want_n = thickness_scan(blob, VoxelSpacing(0.31, 0.46, 0.70))
            assert got.mean_thickness_mm == want_mm
            assert got.medial_voxel_count == want_n

    def test_translation_invariance(self, rng):
        blob = random_blob(rng, (8, 8, 8))
        grid = np.zeros((14, 14, 14), bool)
        grid[1:9, 1:9, 1:9] = blob
        shifted = np.zeros((14, 14, 14), bool)
        shifted[4:12, 3:11, 5:13] = blob
        assert (
            mean_thickness_mm(make_mask(grid)).mean_thickness_mm
            == mean_thickness_mm(make_mask(shifted)).mean_thickness_mm
        )

    def test_relabeling_other_tissues_irrelevant(self, rng):
        labels = np.zeros((10, 10, 10), dtype=np.uint8)
        labels[2:6, 2:6, 2:6] = 1
        labels[7:9, 7:9, 7:9] = 2
        vol_a = LabelVolume(labels, UNIT)
        relabeled = labels.copy()
        relabeled[labels == 2] = 4
        vol_b = LabelVolume(relabeled, UNIT)
        assert (
            mean_thickness_mm(extract_mask(vol_a, 1)).mean_thickness_mm
            == mean_thickness_mm(extract_mask(vol_b, 1)).mean_thickness_mm
        )

    def test_scales_with_spacing(self, rng):
        blob = random_blob(rng, (8, 8, 8))
        base = mean_thickness_mm(make_mask(blob)).mean_thickness_mm
        scaled = mean_thickness_mm(
            make_mask(blob, spacing=VoxelSpacing(2, 2, 2))
        ).mean_thickness_mm
        assert scaled == pytest.approx(2 * base, rel=1e-12)


class TestThicknessError:
    def test_identical_masks(self, rng):
        m = make_mask(random_blob(rng, (8, 8, 8)))
        assert thickness_error_mm(m, m) == 0.0

    def test_slab_difference(self):
        a = slab_mask(5, lateral=12)
        b = slab_mask(4, lateral=12, margin=6)
        # pad b's grid to a's z extent for equal dims
        bv = np.zeros(a.dims, bool)
        bv[:, :, 6:10] = True
        b = make_mask(bv, spacing=a.spacing)
        err = thickness_error_mm(a, b)
        assert abs(err - 0.70) <= 0.70 + 1e-9

    def test_signed_difference(self):
        thick = slab_mask(6)
        thin_v = np.zeros(thick.dims, bool)
        thin_v[:, :, 6:10] = True
        thin = make_mask(thin_v, spacing=thick.spacing)
        assert thickness_difference_mm(thin, thick) < 0
        assert thickness_difference_mm(thick, thin) > 0
        assert thickness_error_mm(thick, thin) == abs(thickness_difference_mm(thick, thin))

    def test_tissue_mismatch_rejected(self, rng):
        a = make_mask(random_blob(rng, (6, 6, 6)), tissue=1)
        b = make_mask(random_blob(rng, (6, 6, 6)), tissue=2)
        with pytest.raises(ValueError, match="tissue"):
            thickness_difference_mm(a, b)


class TestLongitudinalChange:
    def base(self, **kw):
        defaults = dict(
            mean_thickness_mm=2.8,
            medial_voxel_count=10,
            tissue=1,
            model="m",
            subject_id="s1",
            timepoint="baseline",
        )
        defaults.update(kw)
        return ThicknessResult(**defaults)

    def test_no_change(self):
        t0 = self.base()
        t1 = self.base(timepoint="year1")
        assert longitudinal_change_mm(t0, t1) == 0.0

    def test_signed_subtraction(self):
        t0 = self.base(mean_thickness_mm=2.80)
        t1 = self.base(mean_thickness_mm=2.45, timepoint="year1")
        assert longitudinal_change_mm(t0, t1) == pytest.approx(-0.35, abs=1e-12)

    def test_timepoint_mismatch(self):
        t0 = self.base()
        with pytest.raises(ValueError, match="year1"):
            longitudinal_change_mm(t0, self.base())

    def test_subject_mismatch(self):
        t0 = self.base()
        t1 = self.base(subject_id="s2", timepoint="year1")
        with pytest.raises(ValueError, match="matching"):
            longitudinal_change_mm(t0, t1)


class TestBlandAltman:
    def test_all_zero(self):
        ba = bland_altman([0.0, 0.0, 0.0])
        assert ba == BlandAltman(bias=0.0, sd=0.0, loa_low=0.0, loa_high=0.0, n=3)

    def test_symmetric_pair(self):
        ba = bland_altman([-0.1, 0.1])
        assert ba.bias == 0.0
        assert ba.sd == pytest.approx(0.14142135, abs=1e-7)
        assert ba.loa_high == pytest.approx(0.27718585, abs=1e-7)
        assert ba.loa_low == pytest.approx(-0.27718585, abs=1e-7)

    def test_worked_example(self):
        ba = bland_altman([0.02, 0.04, 0.06])
        assert ba.bias == pytest.approx(0.04, abs=1e-12)
        assert ba.sd == pytest.approx(0.02, abs=1e-12)
        assert ba.loa_low == pytest.approx(0.0008, abs=1e-9)
        assert ba.loa_high == pytest.approx(0.0792, abs=1e-9)

    def test_antisymmetric_bias_exactly_zero(self, rng):
        diffs = list(rng.normal(size=8))
        diffs += [-d for d in diffs]
        assert bland_altman(diffs).bias == 0.0

    def test_limits_structure(self, rng):
        diffs = list(rng.normal(size=12))
        ba = bland_altman(diffs)
        assert ba.loa_low <= ba.bias <= ba.loa_high
        assert ba.loa_high - ba.loa_low == pytest.approx(2 * 1.96 * ba.sd, rel=1e-12)

    def test_too_few(self):
        with pytest.raises(ValueError):
            bland_altman([0.1])
