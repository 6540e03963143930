"""
Analysis
========

Closed-form figures of merit for plenoptic and correlation plenoptic sensors:
pixel budgets, diffraction scales, the geometrical-optics parameter, the
perfect-refocus bounds and the depth-of-field gain. Also the image metrics
(PSF width, dip visibility, normalized cross-correlation, centroid) used to
score focused, defocused and refocused images.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import curve_fit

from optics_core import Grid1D, ImagePlane

logger = logging.getLogger(__name__)

# Fraction of the peak delimiting the main lobe used for the PSF fit
PSF_FIT_FLOOR = 0.01


class BudgetError(ValueError):
    """Pixel counts break the plenoptic or correlation-plenoptic sensor relation."""


# ============================================================================
# DATA TYPES
# ============================================================================

@dataclass(frozen=True)
class PixelBudget:
    n_tot: int
    delta: float
    n_x_pi: int
    n_u_pi: int
    n_x_cpi: int
    n_u_cpi: int

    def __post_init__(self):
        if self.delta <= 0:
            raise BudgetError(f"pixel size must be positive, got {self.delta}")
        counts = (self.n_tot, self.n_x_pi, self.n_u_pi, self.n_x_cpi, self.n_u_cpi)
        if min(counts) < 1:
            raise BudgetError(f"pixel counts must be >= 1, got {counts}")
        if self.n_x_pi * self.n_u_pi != self.n_tot:
            raise BudgetError(
                f"plenoptic budget violated: {self.n_x_pi} x {self.n_u_pi} != {self.n_tot}"
            )
        if self.n_x_cpi + self.n_u_cpi != self.n_tot:
            raise BudgetError(
                f"correlation plenoptic budget violated: {self.n_x_cpi} + {self.n_u_cpi} != {self.n_tot}"
            )

    @classmethod
    def from_totals(cls, n_tot: int, n_x_pi: int, delta: float,
                    n_x_cpi: Optional[int] = None) -> "PixelBudget":
        """Budget of a sensor with n_tot pixels per side at equal spatial resolution."""
        if n_x_pi < 1 or n_tot % n_x_pi:
            raise BudgetError(f"N_x = {n_x_pi} does not divide N_tot = {n_tot}")
        n_x_cpi = n_x_pi if n_x_cpi is None else n_x_cpi
        return cls(n_tot=n_tot, delta=delta,
                   n_x_pi=n_x_pi, n_u_pi=n_tot // n_x_pi,
                   n_x_cpi=n_x_cpi, n_u_cpi=n_tot - n_x_cpi)


@dataclass(frozen=True)
class DofReport:
    ratio_pi: float
    ratio_cpi: float
    alpha_bound_pi: float
    alpha_bound_cpi: float
    dof_gain: float
    D_s: float
    delta: float
    M: float
    delta_u_cpi: float


@dataclass(frozen=True)
class ImageMetrics:
    psf_sigma: Optional[float]
    visibility: Optional[float]
    ncc: Optional[float]
    centroid: Tuple[float, ...]


# ============================================================================
# CLOSED-FORM FIGURES OF MERIT
# ============================================================================

def diffraction_limits(setup) -> Tuple[float, float]:
    """Resolution scales lambda z_a / D_s on D_a and lambda z_b / d on D_b (over M)."""
    d = setup.obj.smallest_detail
    D_s = setup.source.D_s
    lim_a = setup.wavelength * setup.z_a / D_s if D_s > 0 else math.inf
    lim_b = setup.wavelength * setup.z_b / d
    return lim_a, lim_b


def geometrical_optics_parameter(setup) -> float:
    """lambda z_a / (d D_s); refocusing is exact as this goes to zero."""
    D_s = setup.source.D_s
    if D_s <= 0:
        return math.inf
    return setup.wavelength * setup.z_a / (setup.obj.smallest_detail * D_s)


def fresnel_number(detail: float, wavelength: float, z_a: float, z_b: float) -> float:
    """
    d^2 / (lambda z_eff) with z_eff = z_b |z_b - z_a| / z_a.

    Each D_b pixel sees the object through a pencil of rays; refocusing by
    rescaling is only faithful while the detail d is large against the
    diffraction blur sqrt(lambda z_eff) of that pencil, i.e. while this is
    well above one. Infinite when the object is in focus.
    """
    if z_a == z_b:
        return math.inf
    z_eff = z_b * abs(z_b - z_a) / z_a
    return detail ** 2 / (wavelength * z_eff)


def defocus_fresnel_number(setup) -> float:
    return fresnel_number(setup.obj.smallest_detail, setup.wavelength, setup.z_a, setup.z_b)


def ghost_psf_sigma(wavelength: float, z: float, sigma: float) -> float:
    """Std of the focused point-object image for a gaussian source of std sigma."""
    k = 2.0 * math.pi / wavelength
    return z / (math.sqrt(2.0) * sigma * k)


def perfect_refocus_bound(budget: PixelBudget, D_s: float, M: float, system: str) -> float:
    """Largest |1 - 1/alpha| still refocused perfectly, for 'pi' or 'cpi'."""
    if D_s <= 0 or M <= 0:
        raise ValueError(f"D_s and M must be positive, got D_s={D_s}, M={M}")
    if system == "pi":
        return budget.delta / D_s * budget.n_u_pi ** 2
    if system == "cpi":
        return budget.delta / D_s * budget.n_u_cpi
    raise ValueError(f"unknown system '{system}', expected 'pi' or 'cpi'")


def dof_gain(budget: PixelBudget) -> float:
    return budget.n_u_cpi / budget.n_u_pi ** 2


def dof_report(budget: PixelBudget, D_s: float, M: float) -> DofReport:
    ratio_pi = perfect_refocus_bound(budget, D_s, M, "pi")
    ratio_cpi = perfect_refocus_bound(budget, D_s, M, "cpi")
    # delta_u from the resolvable source distance: Delta_u = 2 delta_u / M
    delta_u_cpi = M * (2.0 * D_s / budget.n_u_cpi) / 2.0
    return DofReport(
        ratio_pi=ratio_pi, ratio_cpi=ratio_cpi,
        alpha_bound_pi=ratio_pi, alpha_bound_cpi=ratio_cpi,
        dof_gain=dof_gain(budget), D_s=D_s, delta=budget.delta, M=M,
        delta_u_cpi=delta_u_cpi,
    )


def resolution_report(budget: PixelBudget, D_s: float, M: float,
                      z_a: Optional[float] = None, z_b: Optional[float] = None) -> Dict[str, float]:
    """Resolvable distances of both sensors, plus the candidate alpha readings."""
    report = {
        "delta_x_pi": 2.0 * budget.delta * budget.n_u_pi,
        "delta_u_pi": 2.0 * D_s / budget.n_u_pi,
        "delta_x_cpi": 2.0 * budget.delta,
        "delta_u_cpi": 2.0 * D_s / budget.n_u_cpi,
    }
    if z_a is not None and z_b is not None:
        bound = perfect_refocus_bound(budget, D_s, M, "cpi")
        for name, alpha in (("zb_over_za", z_b / z_a), ("za_over_zb", z_a / z_b)):
            defocus = abs(1.0 - 1.0 / alpha)
            report[f"alpha_{name}"] = alpha
            report[f"defocus_{name}"] = defocus
            report[f"within_bound_{name}"] = float(defocus < bound)
    return report


def refocus_cost(budget: PixelBudget, mode: str = "2D") -> int:
    """Rescale-and-sum operations for one refocused image."""
    per_axis = budget.n_u_cpi * budget.n_x_cpi
    return per_axis ** 2 if mode == "2D" else per_axis


def analysis_rows(setup, budget: Optional[PixelBudget]) -> List[Dict]:
    """Rows (name, value, unit, formula_ref) of the DOF/resolution report."""
    lim_a, lim_b = diffraction_limits(setup)
    rows = [
        {"name": "diffraction_scale_a", "value": lim_a, "unit": "m", "formula_ref": "lambda*z_a/D_s"},
        {"name": "diffraction_scale_b_over_M", "value": lim_b, "unit": "m", "formula_ref": "lambda*z_b/d"},
        {"name": "geometrical_optics_parameter", "value": geometrical_optics_parameter(setup),
         "unit": "1", "formula_ref": "lambda*z_a/(d*D_s)"},
        {"name": "defocus_fresnel_number", "value": defocus_fresnel_number(setup),
         "unit": "1", "formula_ref": "d^2*z_a/(lambda*z_b*|z_b-z_a|)"},
    ]
    if setup.source.kind == "gaussian":
        rows.append({"name": "ghost_psf_sigma",
                     "value": ghost_psf_sigma(setup.wavelength, setup.z_b, setup.source.width),
                     "unit": "m", "formula_ref": "z_b/(sqrt(2)*sigma*k)"})
    if budget is None:
        return rows

    D_s, M = setup.source.D_s, setup.magnification
    report = dof_report(budget, D_s, M)
    rows += [
        {"name": "refocus_bound_pi", "value": report.alpha_bound_pi, "unit": "1",
         "formula_ref": "(delta/D_s)*N_u_pi^2"},
        {"name": "refocus_bound_cpi", "value": report.alpha_bound_cpi, "unit": "1",
         "formula_ref": "(delta/D_s)*N_u_cpi"},
        {"name": "dof_gain", "value": report.dof_gain, "unit": "1",
         "formula_ref": "N_u_cpi/N_u_pi^2"},
        {"name": "source_pixel_delta_u_cpi", "value": report.delta_u_cpi, "unit": "m",
         "formula_ref": "M*Delta_u/2"},
        {"name": "refocus_cost", "value": float(refocus_cost(budget, setup.mode)), "unit": "ops",
         "formula_ref": "(N_u*N_x)^2"},
    ]
    for name, value in resolution_report(budget, D_s, M, setup.z_a, setup.z_b).items():
        unit = "m" if name.startswith("delta_") else "1"
        rows.append({"name": name, "value": value, "unit": unit, "formula_ref": "resolution"})
    return rows


# ============================================================================
# IMAGE METRICS
# ============================================================================

def _gaussian(x, amplitude, mu, sigma):
    return amplitude * np.exp(-0.5 * ((x - mu) / sigma) ** 2)


def _profile_through_peak(image: ImagePlane) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(image.grid, Grid1D):
        return image.grid.coords(), image.values
    _, iy = np.unravel_index(np.argmax(image.values), image.values.shape)
    return image.grid.x.coords(), image.values[:, iy]


def fit_psf_sigma(image: ImagePlane) -> Optional[float]:
    """Gaussian fit of the main lobe, seeded with its second moment."""
    x, y = _profile_through_peak(image)
    peak = int(np.argmax(y))
    if y[peak] <= 0:
        return None
    floor = PSF_FIT_FLOOR * y[peak]
    lo, hi = peak, peak
    while lo > 0 and y[lo - 1] > floor:
        lo -= 1
    while hi < len(y) - 1 and y[hi + 1] > floor:
        hi += 1
    xs, ys = x[lo:hi + 1], y[lo:hi + 1]
    if len(xs) < 3:
        logger.warning("[WARN] PSF main lobe spans fewer than 3 samples; fit skipped")
        return None

    mu0 = float(np.sum(xs * ys) / np.sum(ys))
    sigma0 = float(np.sqrt(np.sum((xs - mu0) ** 2 * ys) / np.sum(ys)))
    sigma0 = max(sigma0, 0.5 * abs(x[1] - x[0]))
    try:
        popt, _ = curve_fit(_gaussian, xs, ys, p0=[float(y[peak]), mu0, sigma0], maxfev=10000)
    except RuntimeError as e:
        logger.warning(f"[WARN] Gaussian PSF fit did not converge: {e}")
        return None
    return abs(float(popt[2]))


def _peak_index_near(x: np.ndarray, y: np.ndarray, position: float, half_window: float) -> Optional[int]:
    window = np.flatnonzero(np.abs(x - position) <= half_window)
    if window.size == 0:
        return None
    return int(window[np.argmax(y[window])])


def dip_visibility(image: ImagePlane, features: Sequence[float]) -> Optional[float]:
    """
    (I_max - I_dip)/(I_max + I_dip) for two features.

    Each peak is the brightest sample within a quarter of the feature spacing
    of its feature position. I_max is the mean of the two peak values and
    I_dip the lowest sample strictly between the two peaks, so a single blob
    spanning both features scores about zero.
    """
    x, y = _profile_through_peak(image)
    left, right = sorted(features[:2])
    if right - left <= 2 * abs(x[1] - x[0]):
        return None
    half_window = 0.25 * (right - left)
    peaks = [_peak_index_near(x, y, position, half_window) for position in (left, right)]
    if None in peaks:
        return None
    lo, hi = sorted(peaks)
    i_max = 0.5 * float(y[lo] + y[hi])
    if i_max <= 0:
        return None
    i_dip = float(y[lo:hi + 1].min())
    return (i_max - i_dip) / (i_max + i_dip)


def normalized_cross_correlation(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    a = a - a.mean()
    b = b - b.mean()
    norm = np.linalg.norm(a) * np.linalg.norm(b)
    if norm == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / norm, -1.0, 1.0))


def image_centroid(image: ImagePlane) -> Tuple[float, ...]:
    total = image.values.sum()
    if total <= 0:
        return tuple(math.nan for _ in image.values.shape)
    if isinstance(image.grid, Grid1D):
        return (float(np.sum(image.grid.coords() * image.values) / total),)
    xx, yy = image.grid.coords()
    return (float(np.sum(xx * image.values) / total), float(np.sum(yy * image.values) / total))


def measure_image(image: ImagePlane, reference=None,
                  features: Optional[Sequence[float]] = None) -> ImageMetrics:
    """
    PSF width, dip visibility, NCC and centroid of an image.

    `reference` is an ImagePlane on the same grid or an object model (anything
    with `transmission(grid)`); an object reference also supplies the feature
    positions when `features` is not given.
    """
    ref_values = None
    if isinstance(reference, ImagePlane):
        ref_values = reference.values
    elif reference is not None:
        ref_values = np.abs(reference.transmission(image.grid)) ** 2
        if features is None:
            features = reference.feature_positions()

    visibility = None
    if features is not None and len(features) >= 2:
        visibility = dip_visibility(image, features)
    ncc = normalized_cross_correlation(image.values, ref_values) if ref_values is not None else None

    return ImageMetrics(
        psf_sigma=fit_psf_sigma(image),
        visibility=visibility,
        ncc=ncc,
        centroid=image_centroid(image),
    )


def metrics_rows(prefix: str, metrics: ImageMetrics) -> List[Dict]:
    rows = [
        {"name": f"{prefix}_psf_sigma", "value": metrics.psf_sigma, "unit": "m", "formula_ref": "gaussian fit"},
        {"name": f"{prefix}_visibility", "value": metrics.visibility, "unit": "1",
         "formula_ref": "(max-dip)/(max+dip)"},
        {"name": f"{prefix}_ncc", "value": metrics.ncc, "unit": "1", "formula_ref": "normalized cross-correlation"},
    ]
    for axis, value in zip("xy", metrics.centroid):
        rows.append({"name": f"{prefix}_centroid_{axis}", "value": value, "unit": "m",
                     "formula_ref": "intensity-weighted mean"})
    return rows
