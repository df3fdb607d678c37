import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffkt3d.phantom import (
    MODALITIES,
    SITES,
    Case,
    PhantomConfig,
    PhantomError,
    Volume,
    decode_oar_labels,
    denormalize,
    encode_oar_labels,
    generate_case,
    generate_dataset,
    load_case,
    load_dataset,
    normalize,
    normalized_stack,
    rasterize_beam_plates,
    save_case,
    save_dataset,
    single_beam_dose,
    split_dataset,
    synthesize_dose,
)


def _bytes(case):
    return {m: v.values.tobytes() for m, v in case.volumes.items()}


def test_same_seed_same_case():
    a, b = generate_case(11), generate_case(11)
    assert _bytes(a) == _bytes(b)
    assert a.beam_angles_deg == b.beam_angles_deg and a.prescription_gy == b.prescription_gy
    assert _bytes(generate_case(12)) != _bytes(a)


def test_two_beams_plate_is_union_of_single_beams():
    case = generate_case(2, PhantomConfig(n_beams=2))
    iso, shape = case.isocenter_vox, case.shape
    union = np.zeros(shape)
    for a in case.beam_angles_deg:
        single, _ = rasterize_beam_plates([a], iso, shape)
        union = np.maximum(union, single)
    np.testing.assert_array_equal(case.volumes["beam"].values, union)


def _check_invariants(case):
    shape = case.shape
    assert all(v.shape == shape for v in case.volumes.values())
    assert len({v.spacing_mm for v in case.volumes.values()}) == 1
    body, ptv = case.mask("body"), case.mask("ptv")
    for m in ("ptv", "body", "beam"):
        assert set(np.unique(case.volumes[m].values)) <= {0.0, 1.0}
    assert not np.any(ptv & ~body)
    labels = case.oar_labels()
    assert not np.any((labels > 0) & ~body)
    assert not np.any((labels > 0) & ptv)
    dose = case.volumes["dose"].values
    assert np.all(dose >= 0) and np.all(dose[~body] == 0)
    assert case.prescription_gy > 0
    assert all(0 <= a < 360 for a in case.beam_angles_deg)
    stack = normalized_stack(case)
    assert stack.shape == (7,) + shape
    assert stack.min() >= -1 and stack.max() <= 1


def test_invariant_sweep_200_cases():
    for i in range(200):
        _check_invariants(generate_case(i, PhantomConfig(site=SITES[i % 3])))


def test_config_validation():
    with pytest.raises(PhantomError, match="divisible"):
        generate_case(0, PhantomConfig(shape=(12, 16, 18)))
    with pytest.raises(PhantomError, match="too small"):
        generate_case(0, PhantomConfig(shape=(4, 4, 4)))
    with pytest.raises(PhantomError):
        generate_case(0, PhantomConfig(n_oars=0))
    with pytest.raises(PhantomError):
        generate_case(0, PhantomConfig(n_beams=0))
    with pytest.raises(PhantomError):
        generate_case(0, PhantomConfig(site="brain"))


def test_volume_rejects_small_extents():
    with pytest.raises(PhantomError):
        Volume(np.zeros((3, 8, 8)))


def test_zero_attenuation_wide_beam_is_constant_along_corridor():
    shape = (8, 12, 12)
    body = np.zeros(shape)
    body[2:6, 2:10, 3:9] = 1.0
    iso = (3.5, 5.5, 5.5)
    dose = single_beam_dose(body, 0.0, iso, (4.0, 4.0, 4.0), 0.0, 10.0, 1.0)
    # along the beam axis (y) the dose inside the body is constant
    inside = dose[2:6, 2:10, 3:9]
    np.testing.assert_allclose(inside, inside[:, :1, :].repeat(8, axis=1), rtol=0, atol=1e-15)


def test_dose_superposition_before_rescale():
    case = generate_case(5, PhantomConfig(n_beams=2))
    body = case.mask("body").astype(float)
    total = synthesize_dose(case, rescale=False).values
    parts = [single_beam_dose(body, a, case.isocenter_vox, case.spacing_mm, case.attenuation_per_mm,
                              case.beam_half_width_frac, case.prescription_gy / 2)
             for a in case.beam_angles_deg]
    np.testing.assert_allclose(total, parts[0] + parts[1], rtol=1e-15, atol=0)


def test_ptv_mean_equals_prescription():
    for s in range(10):
        case = generate_case(s)
        dose = synthesize_dose(case).values
        assert abs(dose[case.mask("ptv")].mean() - case.prescription_gy) <= 1e-9


def test_dose_linear_in_prescription():
    case = generate_case(8)
    doubled = Case(**{**case.__dict__, "prescription_gy": 2 * case.prescription_gy})
    np.testing.assert_array_equal(synthesize_dose(doubled).values, 2 * synthesize_dose(case).values)


def test_dose_decreases_with_depth_along_single_beam():
    shape = (8, 16, 16)
    body = np.ones(shape)
    dose = single_beam_dose(body, 0.0, (3.5, 7.5, 7.5), (4.0, 4.0, 4.0), 0.01, 0.25, 1.0)
    axis_line = dose[3, :, 7]
    assert np.all(np.diff(axis_line) < 0)


def test_empty_ptv_raises():
    case = generate_case(1)
    vols = dict(case.volumes)
    vols["ptv"] = Volume(np.zeros(case.shape), case.spacing_mm)
    with pytest.raises(PhantomError, match="empty PTV"):
        synthesize_dose(Case(**{**case.__dict__, "volumes": vols}))


def test_negative_attenuation_rejected():
    with pytest.raises(PhantomError):
        synthesize_dose(generate_case(1), attenuation_per_mm=-0.1)


def test_beam_zero_runs_along_y():
    beam, angle = rasterize_beam_plates([0.0], (4, 4, 4), (9, 9, 9), 0.25)
    sl = beam[4]
    # corridor spans the full y extent and a band of x around the isocenter
    assert np.all(sl[:, 4] == 1)
    assert np.all(sl[:, 0] == 0) and np.all(sl[:, 8] == 0)
    assert np.all(angle[beam == 1] == 0.0)


def test_opposed_beams_symmetric_under_y_reflection():
    beam, _ = rasterize_beam_plates([0.0, 180.0], (4, 4, 4), (9, 9, 9))
    np.testing.assert_array_equal(beam, beam[:, ::-1, :])


def test_beam_ninety_matches_rotated_zero_beam():
    # rotating the 0 degree corridor by a quarter turn in the axial plane
    zero, _ = rasterize_beam_plates([0.0], (4, 4, 4), (9, 9, 9))
    ninety, angle = rasterize_beam_plates([90.0], (4, 4, 4), (9, 9, 9))
    np.testing.assert_array_equal(ninety[4], np.rot90(zero[4]))
    assert np.all(ninety[4][4, :] == 1)
    np.testing.assert_allclose(angle[ninety == 1], 0.25)


def test_overlapping_corridors_take_mean_angle():
    _, angle = rasterize_beam_plates([0.0, 90.0], (4, 4, 4), (9, 9, 9))
    assert angle[4, 4, 4] == pytest.approx((0.0 + 0.25) / 2)


def test_isocenter_outside_grid_rejected():
    with pytest.raises(PhantomError):
        rasterize_beam_plates([0.0], (4, 20, 4), (9, 9, 9))


@given(st.lists(st.integers(0, 4), min_size=1, max_size=50))
def test_oar_label_round_trip(labels):
    arr = np.array(labels)
    np.testing.assert_array_equal(decode_oar_labels(encode_oar_labels(arr)), arr)


@settings(max_examples=30)
@given(st.floats(0.0, 1.25), st.sampled_from([60.0, 70.0, 78.0]))
def test_dose_normalization_round_trip(frac, rx):
    v = np.array([frac * rx])
    assert denormalize(normalize(v, "dose", rx), "dose", rx)[0] == pytest.approx(v[0], abs=1e-9)


def test_case_directory_round_trip(tmp_path):
    case = generate_case(21, PhantomConfig(site="lung"))
    save_case(case, tmp_path / "c")
    back = load_case(tmp_path / "c")
    assert _bytes(back) == _bytes(case)
    assert back.beam_angles_deg == case.beam_angles_deg
    assert back.prescription_gy == case.prescription_gy and back.site == "lung"
    raw = (tmp_path / "c" / "dose.raw").read_bytes()
    assert raw[:4] == b"DKT3" and len(raw) == 16 + 4 * 16 ** 3


def test_dataset_round_trip_and_split(tmp_path):
    cases = generate_dataset(10, seed=40)
    assert [c.site for c in cases[:3]] == list(SITES)
    save_dataset(cases, tmp_path)
    back = load_dataset(tmp_path)
    assert [c.id for c in back] == [c.id for c in cases]
    tr, va, te = split_dataset(cases)
    assert (len(tr), len(va), len(te)) == (8, 1, 1)
    assert MODALITIES == ("ct", "ptv", "oar", "body", "beam", "angle", "dose")
