"""Phantom generator: determinism, geometry bounds, longitudinal overlap."""

import numpy as np
import pytest

from cavseg.errors import InvalidConfig
from cavseg.phantom import (
    ChannelModel,
    PhantomConfig,
    generate_case,
    generate_dataset,
    generate_longitudinal,
)
from cavseg.volgrid import SequenceId, load_case, load_manifest

from helpers import flood_fill_components


def small_config(**overrides):
    base = dict(grid=(32, 32, 32), cavity_radius_range=(4.0, 7.0), seed=11)
    base.update(overrides)
    return PhantomConfig(**base)


class TestGenerateCase:
    def test_deterministic(self):
        cfg = small_config()
        a = generate_case(cfg, patient_seed=3, timepoint=1)
        b = generate_case(cfg, patient_seed=3, timepoint=1)
        assert np.array_equal(a.mask.data, b.mask.data)
        for seq in SequenceId:
            assert np.array_equal(a.channels[seq].data, b.channels[seq].data)

    def test_different_patients_differ(self):
        cfg = small_config()
        a = generate_case(cfg, 0, 0)
        b = generate_case(cfg, 1, 0)
        assert not np.array_equal(a.mask.data, b.mask.data)

    def test_mask_volume_bounds_zero_perturbation(self):
        cfg = small_config(surface_perturbation=0.0, drift=0.0)
        r_min, r_max = cfg.cavity_radius_range
        lo = 0.5 * (4.0 / 3.0) * np.pi * r_min**3
        hi = 1.5 * (4.0 / 3.0) * np.pi * r_max**3
        for patient in range(8):
            count = generate_case(cfg, patient, 0).mask.count()
            assert lo <= count <= hi, f"patient {patient}: {count} outside [{lo:.0f}, {hi:.0f}]"

    def test_t1c_rim_brighter_than_core(self):
        cfg = small_config()
        case = generate_case(cfg, 2, 0)
        t1c = case.channels[SequenceId.T1C].data
        mask = case.mask.data.astype(bool)
        # rim shell: brain voxels just outside the mask with elevated intensity
        core_mean = t1c[mask].mean()
        rim_band = np.zeros_like(mask)
        grown = mask.copy()
        for axis in range(3):
            grown |= np.roll(mask, 1, axis=axis) | np.roll(mask, -1, axis=axis)
        rim_band = grown & ~mask
        assert t1c[rim_band].mean() > core_mean

    def test_outside_brain_exactly_zero(self):
        case = generate_case(small_config(), 4, 0)
        corner = case.channels[SequenceId.T1].data[:2, :2, :2]
        assert np.all(corner == 0.0)
        for seq in SequenceId:
            data = case.channels[seq].data
            assert (data == 0.0).sum() > 0

    def test_mask_single_6connected_component(self):
        for patient in range(5):
            case = generate_case(small_config(), patient, 0)
            comps = flood_fill_components(case.mask.data, connectivity=6)
            assert len(comps) == 1
            assert len(comps[0][0]) == case.mask.count() > 0

    def test_invalid_configs(self):
        with pytest.raises(InvalidConfig):
            small_config(cavity_radius_range=(9.0, 4.0)).validate()
        with pytest.raises(InvalidConfig):
            small_config(cavity_radius_range=(4.0, 20.0)).validate()
        with pytest.raises(InvalidConfig):
            small_config(drift=1.0).validate()
        with pytest.raises(InvalidConfig):
            small_config(surface_perturbation=0.5).validate()
        with pytest.raises(InvalidConfig):
            small_config(flair_timepoint_variation=(0.0, 1.0)).validate()

    def test_config_dict_round_trip(self):
        cfg = small_config(rim_thickness=2.0)
        back = PhantomConfig.from_dict(cfg.to_dict())
        assert back == cfg


class TestLongitudinal:
    def test_single_timepoint_equals_generate_case(self):
        cfg = small_config()
        series = generate_longitudinal(cfg, 5, 1)
        assert len(series) == 1
        direct = generate_case(cfg, 5, 0)
        assert np.array_equal(series[0].mask.data, direct.mask.data)

    def test_shared_patient_id(self):
        series = generate_longitudinal(small_config(), 6, 3)
        assert len({c.patient_id for c in series}) == 1
        assert [c.timepoint for c in series] == [0, 1, 2]

    def test_zero_drift_identical_masks(self):
        series = generate_longitudinal(small_config(drift=0.0), 7, 3)
        for later in series[1:]:
            assert np.array_equal(series[0].mask.data, later.mask.data)

    def test_drift_overlap_bound(self):
        cfg = small_config(drift=0.1)
        for patient in (0, 1, 2):
            series = generate_longitudinal(cfg, patient, 3)
            masks = [c.mask.data.astype(bool) for c in series]
            for i in range(len(masks)):
                for j in range(i + 1, len(masks)):
                    inter = (masks[i] & masks[j]).sum()
                    union = (masks[i] | masks[j]).sum()
                    assert inter / union >= 0.8

    def test_consecutive_overlap_vs_drift(self):
        cfg = small_config(drift=0.3)
        series = generate_longitudinal(cfg, 3, 4)
        masks = [c.mask.data.astype(bool) for c in series]
        for a, b in zip(masks, masks[1:]):
            j = (a & b).sum() / (a | b).sum()
            assert j >= 1.0 - 2.0 * cfg.drift

    def test_flair_core_varies_across_timepoints(self):
        cfg = small_config(flair_timepoint_variation=(0.3, 1.5), drift=0.0)
        series = generate_longitudinal(cfg, 8, 3)
        mask = series[0].mask.data.astype(bool)
        means = [c.channels[SequenceId.FLAIR].data[mask].mean() for c in series]
        assert np.ptp(means) > 0.1

    def test_needs_at_least_one_timepoint(self):
        with pytest.raises(InvalidConfig):
            generate_longitudinal(small_config(), 0, 0)


class TestGenerateDataset:
    def test_47_case_layout(self, tmp_path):
        cfg = small_config()
        timepoints = [6, 6, 6, 5, 5, 5, 4, 4, 1, 1, 1, 1, 1, 1]
        assert sum(timepoints) == 47 and len(timepoints) == 14
        manifest_path, entries = generate_dataset(cfg, 14, timepoints, tmp_path / "data")
        assert len(entries) == 47
        back = load_manifest(manifest_path)
        assert len(back) == 47
        assert len({e.patient_id for e in back}) == 14
        case = load_case(back[0])
        assert case.mask is not None and case.dims == cfg.grid

    def test_single_case(self, tmp_path):
        manifest_path, entries = generate_dataset(small_config(), 1, [1], tmp_path / "one")
        assert len(entries) == 1

    def test_same_seed_identical_manifest_bytes(self, tmp_path):
        cfg = small_config()
        p1, _ = generate_dataset(cfg, 2, [2, 1], tmp_path / "a")
        p2, _ = generate_dataset(cfg, 2, [2, 1], tmp_path / "b")
        assert p1.read_bytes() == p2.read_bytes()
        sample = "p000_t1_flair.nii"
        assert (tmp_path / "a" / sample).read_bytes() == (tmp_path / "b" / sample).read_bytes()

    def test_shape_mismatch_rejected(self, tmp_path):
        with pytest.raises(InvalidConfig):
            generate_dataset(small_config(), 2, [1], tmp_path / "x")
        with pytest.raises(InvalidConfig):
            generate_dataset(small_config(), 0, [], tmp_path / "y")
