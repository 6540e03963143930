import math

import numpy as np
import pytest

from analysis import (BudgetError, PixelBudget, analysis_rows, defocus_fresnel_number, diffraction_limits,
                      dip_visibility, dof_gain, dof_report, fit_psf_sigma, geometrical_optics_parameter,
                      ghost_psf_sigma, image_centroid, measure_image, metrics_rows,
                      normalized_cross_correlation, perfect_refocus_bound, refocus_cost,
                      resolution_report)
from optics_core import Grid1D, Grid2D, ImagePlane
from scene import ObjectModel, SourceModel

from conftest import make_setup


@pytest.fixture
def budget():
    """300-pixel sensor side, 150 pixels of spatial resolution."""
    return PixelBudget.from_totals(300, 150, 32e-6)


def gaussian_image(sigma, n=101, step=0.5e-6, center=0.0):
    grid = Grid1D(n=n, step=step)
    return ImagePlane.from_raw(grid, np.exp(-0.5 * ((grid.coords() - center) / sigma) ** 2))


def test_budget_from_totals(budget):
    assert budget.n_u_pi == 2
    assert budget.n_x_cpi == budget.n_u_cpi == 150
    assert dof_gain(budget) == pytest.approx(37.5)


def test_budget_rejects_broken_relations():
    with pytest.raises(BudgetError, match="plenoptic budget"):
        PixelBudget(n_tot=300, delta=32e-6, n_x_pi=150, n_u_pi=3, n_x_cpi=150, n_u_cpi=150)
    with pytest.raises(BudgetError, match="correlation plenoptic"):
        PixelBudget(n_tot=300, delta=32e-6, n_x_pi=150, n_u_pi=2, n_x_cpi=150, n_u_cpi=100)
    with pytest.raises(BudgetError, match="positive"):
        PixelBudget(n_tot=300, delta=0.0, n_x_pi=150, n_u_pi=2, n_x_cpi=150, n_u_cpi=150)
    with pytest.raises(BudgetError, match="divide"):
        PixelBudget.from_totals(300, 7, 32e-6)
    assert PixelBudget.from_totals(300, 100, 32e-6, n_x_cpi=200).n_u_cpi == 100


def test_perfect_refocus_bounds(budget):
    D_s = 1.8e-3
    assert perfect_refocus_bound(budget, D_s, 0.8, "pi") == pytest.approx(32e-6 / D_s * 4)
    assert perfect_refocus_bound(budget, D_s, 0.8, "cpi") == pytest.approx(32e-6 / D_s * 150)
    with pytest.raises(ValueError):
        perfect_refocus_bound(budget, D_s, 0.8, "camera")
    with pytest.raises(ValueError):
        perfect_refocus_bound(budget, 0.0, 0.8, "pi")


def test_dof_report(budget):
    report = dof_report(budget, 1.8e-3, 0.8)
    assert report.dof_gain == pytest.approx(37.5)
    assert report.ratio_cpi / report.ratio_pi == pytest.approx(37.5)
    assert report.delta_u_cpi == pytest.approx(9.6e-6)


def test_resolution_report_checks_both_alpha_readings(budget):
    report = resolution_report(budget, 1.8e-3, 0.8, z_a=10e-3, z_b=50e-3)
    assert report["delta_x_pi"] == pytest.approx(128e-6)
    assert report["delta_x_cpi"] == pytest.approx(64e-6)
    assert report["delta_u_pi"] == pytest.approx(1.8e-3)
    assert report["delta_u_cpi"] == pytest.approx(24e-6)
    assert report["defocus_zb_over_za"] == pytest.approx(0.8)
    assert report["within_bound_zb_over_za"] == 1.0
    assert report["defocus_za_over_zb"] == pytest.approx(4.0)
    assert report["within_bound_za_over_zb"] == 0.0
    assert "alpha_zb_over_za" not in resolution_report(budget, 1.8e-3, 0.8)


def test_refocus_cost(budget):
    assert refocus_cost(budget, "1D") == 150 * 150
    assert refocus_cost(budget, "2D") == (150 * 150) ** 2


def test_closed_form_scales_of_reference_setup():
    setup = make_setup()
    lim_a, lim_b = diffraction_limits(setup)
    assert lim_a == pytest.approx(500e-9 * 10e-3 / 1.8e-3)
    assert lim_b == pytest.approx(50e-6)
    assert geometrical_optics_parameter(setup) == pytest.approx(0.0278, abs=1e-4)
    assert ghost_psf_sigma(500e-9, 10e-3, 0.6e-3) == pytest.approx(0.938e-6, rel=1e-3)


def test_defocus_fresnel_number():
    assert defocus_fresnel_number(make_setup()) == math.inf
    # 100 um slits seen 40 mm out of focus: z_eff = 0.2 m, far below one
    assert defocus_fresnel_number(make_setup(z_b=50e-3)) == pytest.approx(0.1)
    wide = make_setup(z_b=50e-3, obj=ObjectModel("double-slit", 1.5e-3, 3e-3))
    assert defocus_fresnel_number(wide) == pytest.approx(22.5)
    # the same defocus on the far side of focus
    assert defocus_fresnel_number(make_setup(z_a=50e-3, z_b=10e-3)) == pytest.approx(1e-8 * 50e-3 / (500e-9 * 10e-3 * 40e-3))


def test_analysis_rows(budget):
    setup = make_setup()
    names = [row["name"] for row in analysis_rows(setup, None)]
    assert names == ["diffraction_scale_a", "diffraction_scale_b_over_M",
                     "geometrical_optics_parameter", "defocus_fresnel_number", "ghost_psf_sigma"]
    rows = {row["name"]: row for row in analysis_rows(setup, budget)}
    assert rows["dof_gain"]["value"] == pytest.approx(37.5)
    assert rows["dof_gain"]["formula_ref"] == "N_u_cpi/N_u_pi^2"
    assert rows["delta_x_cpi"]["unit"] == "m"
    assert rows["refocus_cost"]["value"] == 150 * 150
    disk = make_setup(source=SourceModel("flat-disk", 0.9e-3))
    assert "ghost_psf_sigma" not in [row["name"] for row in analysis_rows(disk, None)]


def test_psf_fit_recovers_gaussian_width():
    assert fit_psf_sigma(gaussian_image(3e-6)) == pytest.approx(3e-6, rel=0.01)
    assert fit_psf_sigma(gaussian_image(4e-6, center=5e-6)) == pytest.approx(4e-6, rel=0.01)


def test_psf_fit_skips_degenerate_images():
    grid = Grid1D(n=11, step=1e-6)
    spike = np.zeros(11)
    spike[5] = 1.0
    assert fit_psf_sigma(ImagePlane(grid, spike)) is None
    assert fit_psf_sigma(ImagePlane.from_raw(grid, np.zeros(11))) is None


def test_dip_visibility():
    grid = Grid1D(n=401, step=2e-6)
    x = grid.coords()
    peaks = np.exp(-0.5 * ((x - 200e-6) / 20e-6) ** 2) + np.exp(-0.5 * ((x + 200e-6) / 20e-6) ** 2)
    image = ImagePlane.from_raw(grid, 0.25 + 0.75 * peaks)
    assert dip_visibility(image, (-200e-6, 200e-6)) == pytest.approx(0.6, abs=1e-6)
    assert dip_visibility(image, (200e-6, -200e-6)) == pytest.approx(0.6, abs=1e-6)
    # features closer than two pixels cannot show a dip
    assert dip_visibility(image, (0.0, 3e-6)) is None


def test_dip_visibility_averages_unequal_peaks():
    grid = Grid1D(n=401, step=2e-6)
    x = grid.coords()
    peaks = np.exp(-0.5 * ((x - 200e-6) / 20e-6) ** 2) + 0.5 * np.exp(-0.5 * ((x + 200e-6) / 20e-6) ** 2)
    image = ImagePlane.from_raw(grid, 0.25 + 0.75 * peaks)
    # I_max = (1 + 0.625) / 2, I_dip = 0.25
    assert dip_visibility(image, (-200e-6, 200e-6)) == pytest.approx(0.5625 / 1.0625, abs=1e-6)


def test_single_blob_has_no_dip():
    blob = gaussian_image(300e-6, n=401, step=2e-6)
    assert dip_visibility(blob, (-200e-6, 200e-6)) == pytest.approx(0.0, abs=1e-2)


def test_normalized_cross_correlation():
    a = np.array([0.0, 1.0, 3.0, 1.0])
    assert normalized_cross_correlation(a, a) == pytest.approx(1.0)
    assert normalized_cross_correlation(a, 2 * a + 5) == pytest.approx(1.0)
    assert normalized_cross_correlation(a, -a) == pytest.approx(-1.0)
    assert normalized_cross_correlation(a, np.ones(4)) == 0.0


def test_centroid():
    assert image_centroid(gaussian_image(3e-6, center=5e-6))[0] == pytest.approx(5e-6, abs=1e-9)
    grid = Grid2D(Grid1D(n=5, step=1.0), Grid1D(n=3, step=1.0))
    values = np.zeros((5, 3))
    values[4, 0] = 1.0
    assert image_centroid(ImagePlane(grid, values)) == pytest.approx((2.0, -1.0))
    assert all(math.isnan(c) for c in image_centroid(ImagePlane(grid, np.zeros((5, 3)))))


def test_measure_image_against_object():
    obj = ObjectModel("double-slit", 100e-6, 400e-6)
    grid = Grid1D.covering(400e-6, 4e-6)
    image = ImagePlane.from_raw(grid, np.abs(obj.transmission(grid)) ** 2)
    metrics = measure_image(image, reference=obj)
    assert metrics.ncc == pytest.approx(1.0)
    assert metrics.visibility == pytest.approx(1.0)
    assert metrics.centroid[0] == pytest.approx(0.0, abs=1e-9)

    bare = measure_image(image)
    assert bare.ncc is None and bare.visibility is None

    rows = metrics_rows("focused", metrics)
    assert [row["name"] for row in rows] == ["focused_psf_sigma", "focused_visibility",
                                             "focused_ncc", "focused_centroid_x"]
