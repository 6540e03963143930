import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from optics_core import Grid1D, Grid2D, axes_of
from scene import (MAX_AXIS_SAMPLES, ObjectModel, SetupValidationError, SourceModel,
                   ensure_accepted, load_custom_mask,
                   sample_object_aperture, sample_source_intensity, smallest_detail_of,
                   thin_lens_magnification, validate_setup)


def test_source_profiles():
    g = Grid1D.covering(3e-3, 1e-5)
    gauss = SourceModel("gaussian", 0.6e-3)
    assert gauss.D_s == pytest.approx(1.8e-3)
    values = sample_source_intensity(gauss, g)
    assert values.max() == pytest.approx(1.0)
    x = g.coords()
    assert values[np.argmin(np.abs(x - 0.6e-3))] == pytest.approx(math.exp(-0.5), rel=1e-3)

    disk = SourceModel("flat-disk", 0.5e-3)
    assert disk.D_s == pytest.approx(1e-3)
    assert set(np.unique(sample_source_intensity(disk, g))) == {0.0, 1.0}

    point = SourceModel("point", center=0.3e-3)
    values = sample_source_intensity(point, g)
    assert values.sum() == 1.0
    assert x[np.argmax(values)] == pytest.approx(0.3e-3, abs=1e-5)


def test_source_rejects_narrow_grid():
    with pytest.raises(SetupValidationError):
        sample_source_intensity(SourceModel("gaussian", 0.6e-3), Grid1D(n=11, step=1e-4))
    with pytest.raises(ValueError):
        SourceModel("gaussian", -1.0)
    with pytest.raises(ValueError):
        SourceModel("laser", 1e-3)


def test_double_slit_aperture():
    obj = ObjectModel("double-slit", 100e-6, 400e-6)
    assert obj.slit_centers() == pytest.approx([-200e-6, 200e-6])
    assert obj.smallest_detail == pytest.approx(100e-6)
    assert obj.feature_positions() == pytest.approx((-200e-6, 200e-6))

    g = Grid1D.covering(400e-6, 1e-6)
    a = sample_object_aperture(obj, g)
    assert a.dtype == np.complex128
    open_width = np.count_nonzero(a) * g.step
    assert open_width == pytest.approx(200e-6, abs=4e-6)
    assert a[g.index_of(0.0)] == 0
    assert a[g.index_of(200e-6)] == 1


def test_aperture_sampling_rules():
    obj = ObjectModel("double-slit", 100e-6, 400e-6)
    with pytest.raises(SetupValidationError, match=r"smallest object detail d = 1\.000e-04 m"):
        sample_object_aperture(obj, Grid1D.covering(400e-6, 20e-6))
    with pytest.raises(SetupValidationError, match="cover"):
        sample_object_aperture(obj, Grid1D.covering(150e-6, 1e-6))


def test_triple_slit_and_bar_chart_2d():
    obj = ObjectModel("bar-chart", 50e-6, 150e-6, slit_length=300e-6)
    assert len(obj.slit_centers()) == 3
    assert obj.smallest_detail == pytest.approx(50e-6)
    axis = Grid1D.covering(300e-6, 5e-6)
    a = sample_object_aperture(obj, Grid2D(axis, axis))
    # bars run along y: every open column is open over the bar length
    column = a[axis.index_of(0.0)]
    assert np.count_nonzero(column) * axis.step == pytest.approx(300e-6, abs=1e-5)
    with pytest.raises(ValueError):
        ObjectModel("double-slit", 100e-6, 50e-6)


@given(phase=st.floats(min_value=0.0, max_value=2 * math.pi))
@settings(max_examples=20)
def test_custom_mask_global_phase_keeps_intensity(phase):
    g = Grid1D(n=9, step=1e-6)
    mask = np.array([0, 0, 1, 1, 0, 1, 1, 0, 0], dtype=float)
    obj = ObjectModel("custom-mask", mask=mask, mask_grid=g, slit_width=1e-6)
    a = obj.transmission(g)
    np.testing.assert_allclose(np.abs(a * np.exp(1j * phase)) ** 2, mask)


def test_smallest_detail_of_mask():
    g = Grid1D(n=12, step=1e-6)
    mask = np.array([0, 1, 1, 1, 0, 0, 1, 1, 1, 1, 0, 0], dtype=float)
    # interior runs: open 3, opaque 2, open 4
    assert smallest_detail_of(mask, g) == pytest.approx(2e-6)


def test_load_custom_mask(tmp_path):
    path = tmp_path / "mask.txt"
    path.write_text("2 3 1e-6 2e-6\n0 1 0\n1 1 0\n", encoding="utf-8")
    obj = load_custom_mask(path)
    assert obj.kind == "custom-mask"
    assert obj.mask.shape == (3, 2)
    np.testing.assert_allclose(obj.mask[:, 1], [1, 1, 0])
    assert isinstance(obj.mask_grid, Grid2D)

    bad = tmp_path / "bad.txt"
    bad.write_text("2 3 1e-6 2e-6\n0 1 0\n", encoding="utf-8")
    with pytest.raises(ValueError, match="expected 6 values"):
        load_custom_mask(bad)


def test_mask_resampling_is_idempotent_on_refined_grid():
    """Sampling a mask on a grid refined by an odd factor reproduces it at the coarse samples."""
    obj = ObjectModel("double-slit", 100e-6, 400e-6)
    coarse = Grid1D.covering(400e-6, 4e-6)
    mask = np.abs(sample_object_aperture(obj, coarse))
    custom = ObjectModel("custom-mask", mask=mask, mask_grid=coarse, slit_width=100e-6)
    fine = coarse.refined(3)
    resampled = np.abs(custom.transmission(fine))
    np.testing.assert_array_equal(resampled[1::3], mask)


def test_thin_lens_magnification():
    # S_o = 2F gives unit magnification
    assert thin_lens_magnification(0.1, 0.2) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        thin_lens_magnification(0.2, 0.1)


def test_derived_grids_meet_sampling_rules(setup_factory):
    for z_b in (10e-3, 50e-3):
        setup = setup_factory(z_b=z_b)
        report = validate_setup(setup)
        assert report.accepted, report.violations
        assert all(report.checks.values())
        g_o = axes_of(setup.grid_o)[0]
        assert g_o.step <= 100e-6 / 8
        assert axes_of(setup.grid_s)[0].extent >= setup.source.D_s


def test_focused_grids_for_the_reference_experiment(setup_factory):
    setup = setup_factory(n_a=150, n_b=150)
    g_s, g_o = setup.grid_s, setup.grid_o
    assert 3_000 < g_s.n < 12_000
    assert 500 < g_o.n < 3_000


def test_oversized_detector_hits_grid_cap(setup_factory):
    with pytest.raises(SetupValidationError, match="cap"):
        setup_factory(n_a=2000, pixel_a=1e-4, z_b=50e-3)
    assert MAX_AXIS_SAMPLES == 60_000


def test_validation_reports_every_violation(setup_factory):
    setup = setup_factory()
    coarse = Grid1D.covering(3e-3, 50e-6)
    bad = setup_factory(grid_s=coarse, grid_o=Grid1D.covering(400e-6, 20e-6))
    report = validate_setup(bad)
    assert not report.accepted
    assert not report.checks["source_phase_axis0"]
    assert not report.checks["object_resolution"]
    with pytest.raises(SetupValidationError) as info:
        ensure_accepted(bad)
    assert len(info.value.violations) >= 2
    assert ensure_accepted(setup).accepted


def test_pixel_budget_and_thin_lens_checks(setup_factory):
    over = setup_factory(n_a=200, n_b=150, n_tot=300)
    assert not validate_setup(over).checks["pixel_budget"]

    lens = setup_factory(lens_focal=0.1, lens_object_distance=0.225)
    report = validate_setup(lens)
    assert report.checks["thin_lens"]
    wrong = setup_factory(lens_focal=0.1, lens_object_distance=0.3)
    assert not validate_setup(wrong).checks["thin_lens"]


def test_geometrical_optics_parameter_of_reference_setup(setup_factory):
    report = validate_setup(setup_factory())
    assert report.geometrical_optics_parameter == pytest.approx(0.0278, abs=1e-4)


def test_with_distances_rederives_grids(setup_factory):
    setup = setup_factory()
    moved = setup.with_distances(z_b=50e-3)
    assert moved.z_b == 50e-3
    assert moved.grid_s.n != setup.grid_s.n
    assert validate_setup(moved).accepted
    assert setup.with_seed(99).seed == 99


def test_halving_the_integration_steps_stays_accepted(setup_factory):
    for z_b in (10e-3, 50e-3):
        setup = setup_factory(z_b=z_b)
        finer = setup_factory(z_b=z_b, grid_s=setup.grid_s.refined(2), grid_o=setup.grid_o.refined(2))
        assert finer.grid_s.step == pytest.approx(setup.grid_s.step / 2)
        report = validate_setup(finer)
        assert report.accepted, report.violations


def test_source_intensity_integrates_to_its_closed_form():
    sigma, radius = 0.6e-3, 0.5e-3
    g = Grid1D.covering(3e-3, 7e-6)
    gauss = sample_source_intensity(SourceModel("gaussian", sigma), g).sum() * g.step
    assert gauss == pytest.approx(math.sqrt(2 * math.pi) * sigma, rel=0.01)
    disk = sample_source_intensity(SourceModel("flat-disk", radius), g).sum() * g.step
    assert disk == pytest.approx(2 * radius, rel=0.01)

    axis = Grid1D.covering(0.6e-3, 5e-6)
    plane = Grid2D(axis, axis)
    disk_2d = sample_source_intensity(SourceModel("flat-disk", radius), plane).sum() * axis.step ** 2
    assert disk_2d == pytest.approx(math.pi * radius ** 2, rel=0.01)
    wide = Grid1D.covering(3e-3, 2e-5)
    gauss_2d = sample_source_intensity(SourceModel("gaussian", sigma), Grid2D(wide, wide)).sum() * wide.step ** 2
    assert gauss_2d == pytest.approx(2 * math.pi * sigma ** 2, rel=0.01)
