import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from longiseg.synthgen import (
    CHANGE_KINDS,
    GROW_FACTOR,
    LesionPlacementError,
    SynthConfig,
    SynthConfigError,
    generate_dataset,
    generate_subject,
    grid_coords,
    invert_displacement,
    make_split,
    split_counts,
    synthesize_subject,
    warp_volume,
)

SMALL = dict(shape=(32, 32, 32), lesion_count_range=(2, 3), lesion_radius_range_vox=(1.5, 2.5))


def small_cfg(**kw):
    return SynthConfig(**{**SMALL, **kw})


def test_same_index_bitwise_identical():
    cfg = small_cfg(seed=4)
    a, b = generate_subject(cfg, 2), generate_subject(cfg, 2)
    for key in a.scans:
        assert np.array_equal(a.scans[key].data, b.scans[key].data)
    assert np.array_equal(a.gt_mask_ti.data, b.gt_mask_ti.data)
    assert np.array_equal(a.gt_field, b.gt_field)


def test_different_index_differs():
    cfg = small_cfg()
    a, b = generate_subject(cfg, 0), generate_subject(cfg, 1)
    assert not np.array_equal(a.scan("ti", "FLAIR").data, b.scan("ti", "FLAIR").data)


def test_degenerate_config_gives_identical_timepoints():
    cfg = small_cfg(warp_amplitude_vox=0.0, noise_sigma=0.0,
                    change_profile={"grow": 0, "shrink": 0, "appear": 0, "disappear": 0, "static": 1})
    s = generate_subject(cfg, 0)
    for modality in ("T1", "FLAIR"):
        assert np.array_equal(s.scan("ti", modality).data, s.scan("tj", modality).data)
    assert np.array_equal(s.gt_mask_ti.data, s.gt_mask_tj.data)
    assert not np.any(s.gt_field)


def test_default_anatomy_registration_residual_below_ten_percent():
    cfg = SynthConfig()
    subject = synthesize_subject(cfg, 0)
    field = subject.sample.gt_field
    for modality in ("T1", "FLAIR"):
        ti = subject.anatomy[("ti", modality)]
        tj = subject.anatomy[("tj", modality)]
        unwarped = np.mean((ti - tj) ** 2)
        warped = np.mean((ti - warp_volume(tj, field)) ** 2)
        assert unwarped > 0
        assert warped < 0.1 * unwarped, (modality, warped / unwarped)


def test_field_amplitude_bounded():
    cfg = small_cfg(warp_amplitude_vox=1.25)
    u = generate_subject(cfg, 3).gt_field
    assert np.sqrt((u ** 2).sum(axis=0)).max() <= 1.25 + 1e-9


def test_inverse_displacement_composes_to_identity():
    s = generate_subject(small_cfg(), 0)
    u = s.gt_field
    v = invert_displacement(u)
    grid = grid_coords(u.shape[1:])
    # v(y) = -u(y + v(y)) at every grid point
    u_at = np.stack([warp_volume(u[k], v) for k in range(3)])
    residual = v + u_at
    interior = (slice(None),) + (slice(4, -4),) * 3
    assert np.abs(residual[interior]).max() < 1e-3
    assert grid.shape == u.shape


def test_masks_binary_and_lesions_inside_brain():
    subject = synthesize_subject(small_cfg(), 1)
    s = subject.sample
    for tp, mask in (("ti", s.gt_mask_ti.data), ("tj", s.gt_mask_tj.data)):
        assert set(np.unique(mask)) <= {0, 1}
        assert np.all(subject.anatomy[(tp, "FLAIR")][mask > 0] > 0)


def test_lesion_voxel_counts_within_loose_bounds():
    cfg = small_cfg()
    subject = synthesize_subject(cfg, 2)
    lo, hi = cfg.lesion_count_range
    assert lo <= len(subject.lesions) <= hi
    r_max = cfg.lesion_radius_range_vox[1] * GROW_FACTOR
    cap = hi * 4 / 3 * math.pi * (r_max + 1) ** 3
    for tp, mask in (("ti", subject.sample.gt_mask_ti.data), ("tj", subject.sample.gt_mask_tj.data)):
        present = [les for les in subject.lesions if (les.radius_ti if tp == "ti" else les.radius_tj) > 0]
        assert len(present) <= mask.sum() <= cap
        for les in present:
            assert mask[tuple(int(c) for c in les.center)] == 1


def test_change_kinds_follow_profile():
    only_appear = small_cfg(change_profile={"grow": 0, "shrink": 0, "appear": 1.0, "disappear": 0, "static": 0})
    subject = synthesize_subject(only_appear, 0)
    assert all(les.change == "appear" and les.radius_ti == 0 for les in subject.lesions)
    assert not subject.sample.gt_mask_ti.data.any()
    assert subject.sample.gt_mask_tj.data.any()


def test_lesions_brighter_on_flair():
    subject = synthesize_subject(small_cfg(), 0)
    mask = subject.sample.gt_mask_ti.data > 0
    clean = subject.clean[("ti", "FLAIR")]
    anat = subject.anatomy[("ti", "FLAIR")]
    assert np.all(clean[mask] > anat[mask])
    assert np.array_equal(clean[~mask], anat[~mask])


def test_background_exactly_zero():
    s = generate_subject(small_cfg(), 0)
    for key, vol in s.scans.items():
        assert vol.data[0, 0, 0] == 0.0 and vol.data[-1, -1, -1] == 0.0, key


def test_noise_monotonically_increases_mismatch():
    mses = []
    for sigma in (0.02, 0.08, 0.2):
        s = generate_subject(small_cfg(noise_sigma=sigma, seed=1), 0)
        ti = s.scan("ti", "FLAIR").data
        tj_warped = warp_volume(s.scan("tj", "FLAIR").data, s.gt_field)
        mses.append(np.mean((ti - tj_warped) ** 2))
    assert mses[0] < mses[1] < mses[2]


def test_placement_failure_echoes_config():
    cfg = SynthConfig(shape=(16, 16, 16), lesion_count_range=(6, 6), lesion_radius_range_vox=(3, 4))
    with pytest.raises(LesionPlacementError, match="cannot place lesions.*shape=\\(16, 16, 16\\)"):
        generate_subject(cfg, 0)


@pytest.mark.parametrize("overrides, field", [
    ({"change_profile": {"grow": 0.4, "shrink": 0.2, "appear": 0.2, "disappear": 0.2, "static": 0.2}},
     "change_profile"),
    ({"change_profile": {"grow": -0.1, "shrink": 0.3, "appear": 0.2, "disappear": 0.2, "static": 0.4}},
     "change_profile"),
    ({"change_profile": {"merge": 1.0}}, "change_profile"),
    ({"lesion_radius_range_vox": (0.5, 2.0)}, "lesion_radius_range_vox"),
    ({"warp_amplitude_vox": -1.0}, "warp_amplitude_vox"),
    ({"noise_sigma": -0.1}, "noise_sigma"),
    ({"lesion_count_range": (4, 2)}, "lesion_count_range"),
    ({"shape": (4, 32, 32)}, "shape"),
])
def test_invalid_config_names_field(overrides, field):
    with pytest.raises(SynthConfigError) as info:
        SynthConfig(**overrides)
    assert info.value.field == field
    assert field in str(info.value)


def test_from_dict_rejects_unknown_field():
    with pytest.raises(SynthConfigError) as info:
        SynthConfig.from_dict({"noise": 0.1})
    assert info.value.field == "noise"


def test_config_dict_roundtrip():
    cfg = small_cfg(seed=11)
    assert SynthConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("n, expected", [(70, (30, 10, 30)), (7, (3, 1, 3)), (14, (6, 2, 6)), (3, (1, 1, 1))])
def test_split_counts(n, expected):
    assert split_counts(n) == expected


@pytest.mark.parametrize("n", [0, 1, 2])
def test_split_too_small(n):
    with pytest.raises(ValueError):
        split_counts(n)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(3, 200), seed=st.integers(0, 1000))
def test_split_is_a_disjoint_cover(n, seed):
    ids = [f"s{i}" for i in range(n)]
    split = make_split(ids, seed)
    members = split["train"] + split["val"] + split["test"]
    assert sorted(members) == sorted(ids)
    assert min(len(v) for v in split.values()) >= 1
    assert split == make_split(ids, seed)


def test_generate_dataset_default_sizes():
    cfg = small_cfg(n_subjects=7, seed=2)
    samples, split = generate_dataset(cfg)
    assert len(samples) == 7
    assert {k: len(v) for k, v in split.items()} == {"train": 3, "val": 1, "test": 3}
    assert generate_dataset(cfg)[1] == split


def test_generate_dataset_rejects_too_few():
    with pytest.raises(ValueError):
        generate_dataset(small_cfg(n_subjects=2))


def test_change_kinds_constant():
    assert set(CHANGE_KINDS) == set(SynthConfig().change_profile)
