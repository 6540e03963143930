"""
Scene
=====

Parametric chaotic-source intensity profiles F(rho_s) and object aperture
functions A(rho_o), their sampled realizations, and the full optical setup
(geometry, detectors, integration grids) together with its validation report.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from analysis import PixelBudget, BudgetError, geometrical_optics_parameter
from optics_core import Grid, Grid1D, Grid2D, Wavenumber, axes_of, squared_radius

# ============================================================================
# CONFIGURATION
# ============================================================================

SOURCE_KINDS = ("gaussian", "flat-disk", "point")
OBJECT_KINDS = ("single-slit", "double-slit", "triple-slit", "bar-chart", "point", "custom-mask")

# Integration grids use this fraction of the sampling bound
SAMPLING_SAFETY = 0.9

# Source grid reaches SOURCE_SPAN * D_s from the source center
SOURCE_SPAN = 1.5

# Samples per sigma (gaussian) / per radius (disk) on the source plane
SOURCE_SAMPLES_PER_SIGMA = 4
SOURCE_SAMPLES_PER_RADIUS = 20

# Step of the three-sample grids carrying point sources and point objects
POINT_GRID_STEP = 1e-7

# Hard cap per axis on derived integration grids
MAX_AXIS_SAMPLES = 60_000

logger = logging.getLogger(__name__)


class SetupValidationError(ValueError):
    """The setup breaks one or more sampling or budget rules."""

    def __init__(self, violations: List[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


Position = Union[float, Tuple[float, float]]


def _axis_center(center: Position, axis: int) -> float:
    if np.isscalar(center):
        return float(center) if axis == 0 else 0.0
    return float(center[axis])


# ============================================================================
# SOURCE AND OBJECT MODELS
# ============================================================================

@dataclass(frozen=True)
class SourceModel:
    """Chaotic source intensity profile; `width` is sigma (gaussian) or radius (flat-disk)."""
    kind: str = "gaussian"
    width: float = 0.6e-3
    center: Position = 0.0

    def __post_init__(self):
        if self.kind not in SOURCE_KINDS:
            raise ValueError(f"unknown source kind '{self.kind}', expected one of {SOURCE_KINDS}")
        if self.kind != "point" and not self.width > 0:
            raise ValueError(f"source width must be positive, got {self.width}")

    @property
    def D_s(self) -> float:
        if self.kind == "gaussian":
            return 3.0 * self.width
        if self.kind == "flat-disk":
            return 2.0 * self.width
        return 0.0

    @property
    def support_half_extent(self) -> float:
        return SOURCE_SPAN * self.D_s

    def intensity(self, grid: Grid) -> np.ndarray:
        if self.kind == "point":
            values = np.zeros(grid.shape)
            values[_nearest_index(grid, self.center)] = 1.0
            return values
        r2 = squared_radius(grid, self.center)
        if self.kind == "gaussian":
            return np.exp(-0.5 * r2 / self.width ** 2)
        return (r2 <= self.width ** 2).astype(float)


@dataclass(frozen=True, eq=False)
class ObjectModel:
    """
    Transmissive aperture. Slits are `slit_width` wide with centers
    `slit_separation` apart; in 2-D they run along y over `slit_length`.
    """
    kind: str = "double-slit"
    slit_width: float = 100e-6
    slit_separation: float = 400e-6
    center: Position = 0.0
    slit_length: Optional[float] = None
    mask: Optional[np.ndarray] = None
    mask_grid: Optional[Grid] = None

    def __post_init__(self):
        if self.kind not in OBJECT_KINDS:
            raise ValueError(f"unknown object kind '{self.kind}', expected one of {OBJECT_KINDS}")
        if not self.slit_width > 0:
            raise ValueError(f"slit width must be positive, got {self.slit_width}")
        if self.kind in ("double-slit", "triple-slit", "bar-chart") \
                and not self.slit_separation > self.slit_width:
            raise ValueError(
                f"slit separation {self.slit_separation} must exceed slit width {self.slit_width}"
            )
        if self.kind == "custom-mask":
            if self.mask is None or self.mask_grid is None:
                raise ValueError("custom-mask objects need both mask and mask_grid")
            mask = np.asarray(self.mask, dtype=float)
            if mask.shape != self.mask_grid.shape:
                raise ValueError(f"mask shape {mask.shape} does not match its grid {self.mask_grid.shape}")
            if mask.min() < 0 or mask.max() > 1:
                raise ValueError("mask values must lie in [0, 1]")
            object.__setattr__(self, "mask", mask)

    def slit_centers(self) -> List[float]:
        c = _axis_center(self.center, 0)
        if self.kind == "single-slit":
            return [c]
        if self.kind == "double-slit":
            return [c - 0.5 * self.slit_separation, c + 0.5 * self.slit_separation]
        if self.kind in ("triple-slit", "bar-chart"):
            return [c - self.slit_separation, c, c + self.slit_separation]
        return []

    @property
    def smallest_detail(self) -> float:
        if self.kind == "custom-mask":
            return smallest_detail_of(self.mask, self.mask_grid)
        if self.kind in ("double-slit", "triple-slit", "bar-chart"):
            return min(self.slit_width, self.slit_separation - self.slit_width)
        return self.slit_width

    @property
    def support_half_extent(self) -> float:
        """Distance from the object center to the outermost open sample along x."""
        if self.kind == "custom-mask":
            return axes_of(self.mask_grid)[0].max_abs
        if self.kind == "point":
            return 0.0
        centers = self.slit_centers()
        c = _axis_center(self.center, 0)
        return max(abs(x - c) for x in centers) + 0.5 * self.slit_width

    def length(self) -> float:
        if self.slit_length is not None:
            return self.slit_length
        return 5.0 * max(self.slit_separation, self.slit_width)

    def feature_positions(self) -> Tuple[float, ...]:
        """Two adjacent open features whose dip measures focus quality."""
        centers = self.slit_centers()
        return tuple(centers[:2]) if len(centers) >= 2 else ()

    def transmission(self, grid: Grid) -> np.ndarray:
        """A(rho) on the grid, as complex samples with |A| <= 1."""
        if self.kind == "point":
            values = np.zeros(grid.shape, dtype=np.complex128)
            values[_nearest_index(grid, self.center)] = 1.0
            return values
        if self.kind == "custom-mask":
            return _resample_nearest(self.mask, self.mask_grid, grid).astype(np.complex128)

        x = axes_of(grid)[0].coords()
        open_x = np.zeros(x.shape, dtype=bool)
        for xc in self.slit_centers():
            open_x |= np.abs(x - xc) <= 0.5 * self.slit_width
        if isinstance(grid, Grid1D):
            return open_x.astype(np.complex128)
        y = grid.y.coords()
        open_y = np.abs(y - _axis_center(self.center, 1)) <= 0.5 * self.length()
        return np.outer(open_x, open_y).astype(np.complex128)


def _nearest_index(grid: Grid, position: Position):
    axes = axes_of(grid)
    index = []
    for axis, g in enumerate(axes):
        rho = _axis_center(position, axis)
        if abs(rho - g.center) > 0.5 * (g.n - 1) * g.step + 0.5 * g.step:
            raise SetupValidationError([f"point at {rho:.3e} m lies outside the grid"])
        index.append(g.index_of(rho))
    return tuple(index)


def _resample_nearest(values: np.ndarray, src: Grid, dst: Grid) -> np.ndarray:
    """Nearest-neighbour lookup of `values` (on src) at the samples of dst; zero outside."""
    idx = []
    for g_src, g_dst in zip(axes_of(src), axes_of(dst)):
        i = np.rint((g_dst.coords() - g_src.lower()) / g_src.step).astype(int)
        idx.append(i)
    if len(idx) == 1:
        i = idx[0]
        inside = (i >= 0) & (i < values.shape[0])
        out = np.zeros(dst.shape)
        out[inside] = values[i[inside]]
        return out
    ix, iy = idx
    inside_x = (ix >= 0) & (ix < values.shape[0])
    inside_y = (iy >= 0) & (iy < values.shape[1])
    out = np.zeros(dst.shape)
    out[np.ix_(inside_x, inside_y)] = values[np.ix_(ix[inside_x], iy[inside_y])]
    return out


def smallest_detail_of(mask: np.ndarray, grid: Grid) -> float:
    """Shortest interior run of open or opaque samples along x, in meters."""
    mask = np.asarray(mask, dtype=float)
    step = axes_of(grid)[0].step
    lines = [mask] if mask.ndim == 1 else [mask[:, j] for j in range(mask.shape[1])]
    shortest = math.inf
    for line in lines:
        open_ = line > 0.5
        edges = np.flatnonzero(np.diff(open_.astype(int))) + 1
        # interior runs only; the runs touching the grid border are unbounded
        runs = np.diff(edges)
        if runs.size:
            shortest = min(shortest, int(runs.min()))
    if not math.isfinite(shortest):
        return step * mask.shape[0]
    return shortest * step


def load_custom_mask(path: Union[str, Path]) -> ObjectModel:
    """Mask file: header 'rows cols x_step y_step', then row-major values in [0, 1]."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
    if len(header) != 4:
        raise ValueError(f"{path}: header must be 'rows cols x_step y_step'")
    rows, cols = int(header[0]), int(header[1])
    x_step, y_step = float(header[2]), float(header[3])
    values = np.loadtxt(path, skiprows=1, ndmin=1).ravel()
    if values.size != rows * cols:
        raise ValueError(f"{path}: expected {rows * cols} values, found {values.size}")

    if rows == 1:
        grid = Grid1D(n=cols, step=x_step)
        mask = values
    else:
        grid = Grid2D(Grid1D(n=cols, step=x_step), Grid1D(n=rows, step=y_step))
        mask = values.reshape(rows, cols).T
    logger.info(f"[OK] Loaded {rows}x{cols} mask from {path}")
    return ObjectModel(kind="custom-mask", mask=mask, mask_grid=grid,
                       slit_width=smallest_detail_of(mask, grid))


# ============================================================================
# SAMPLING
# ============================================================================

def sample_source_intensity(source: SourceModel, grid: Grid) -> np.ndarray:
    """F(rho_s) on the grid; gaussian profiles peak at 1."""
    if source.kind != "point":
        for g in axes_of(grid):
            if g.extent < source.D_s:
                raise SetupValidationError(
                    [f"source grid extent {g.extent:.3e} m is narrower than D_s = {source.D_s:.3e} m"]
                )
            if g.extent < 2 * source.D_s:
                logger.warning(
                    f"[WARN] source grid extent {g.extent:.3e} m is below 2 D_s; "
                    "the profile transform will be slightly biased"
                )
    return source.intensity(grid)


def sample_object_aperture(obj: ObjectModel, grid: Grid) -> np.ndarray:
    """A(rho_o) on the grid after checking coverage and resolution."""
    violations = []
    if obj.kind not in ("point", "custom-mask"):
        g = axes_of(grid)[0]
        reach = abs(_axis_center(obj.center, 0) - g.center) + obj.support_half_extent
        if reach > 0.5 * (g.n - 1) * g.step:
            violations.append(
                f"object grid half-extent {0.5 * (g.n - 1) * g.step:.3e} m does not cover "
                f"object support {reach:.3e} m"
            )
        for g in axes_of(grid):
            if g.step > obj.smallest_detail / 8.0 * (1 + 1e-12):
                violations.append(
                    f"object grid step {g.step:.3e} m exceeds d/8 = {obj.smallest_detail / 8.0:.3e} m "
                    f"(smallest object detail d = {obj.smallest_detail:.3e} m)"
                )
    if violations:
        raise SetupValidationError(violations)
    return obj.transmission(grid)


# ============================================================================
# OPTICAL SETUP
# ============================================================================

def thin_lens_magnification(focal: float, object_distance: float) -> float:
    """M = S_i / S_o from 1/S_o + 1/S_i = 1/F."""
    if not object_distance > focal > 0:
        raise ValueError(f"thin lens needs S_o > F > 0, got S_o={object_distance}, F={focal}")
    image_distance = 1.0 / (1.0 / focal - 1.0 / object_distance)
    return image_distance / object_distance


@dataclass(frozen=True, eq=False)
class OpticalSetup:
    wavelength: float
    z_a: float
    z_b: float
    magnification: float
    source: SourceModel
    obj: ObjectModel
    grid_a: Grid
    grid_b: Grid
    grid_s: Grid
    grid_o: Grid
    mode: str = "1D"
    seed: int = 0
    n_tot: Optional[int] = None
    n_x_pi: Optional[int] = None
    pixel: Optional[float] = None
    lens_focal: Optional[float] = None
    lens_object_distance: Optional[float] = None

    def __post_init__(self):
        for name in ("wavelength", "z_a", "z_b", "magnification"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be a positive length/ratio, got {value}")
        if self.mode not in ("1D", "2D"):
            raise ValueError(f"mode must be '1D' or '2D', got {self.mode}")
        want = Grid1D if self.mode == "1D" else Grid2D
        for name in ("grid_a", "grid_b", "grid_s", "grid_o"):
            if not isinstance(getattr(self, name), want):
                raise ValueError(f"{name} must be a {want.__name__} in {self.mode} mode")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError(f"seed must fit in 64 bits, got {self.seed}")

    @property
    def wavenumber(self) -> Wavenumber:
        return Wavenumber(self.wavelength)

    @property
    def k(self) -> float:
        return self.wavenumber.k

    @property
    def sensor_pixel(self) -> float:
        if self.pixel is not None:
            return self.pixel
        return axes_of(self.grid_b)[0].step

    def budget(self) -> Optional[PixelBudget]:
        """Sensor budget when N_tot and the plenoptic comparison point are declared."""
        if self.n_tot is None or self.n_x_pi is None:
            return None
        return PixelBudget.from_totals(self.n_tot, self.n_x_pi, self.sensor_pixel,
                                       n_x_cpi=axes_of(self.grid_a)[0].n)

    def with_distances(self, z_a: Optional[float] = None, z_b: Optional[float] = None) -> "OpticalSetup":
        """Same setup at new distances, integration grids re-derived."""
        z_a = self.z_a if z_a is None else z_a
        z_b = self.z_b if z_b is None else z_b
        grid_s, grid_o = derive_integration_grids(
            self.wavelength, z_a, z_b, self.magnification,
            self.source, self.obj, self.grid_a, self.grid_b,
        )
        return replace(self, z_a=z_a, z_b=z_b, grid_s=grid_s, grid_o=grid_o)

    def with_seed(self, seed: int) -> "OpticalSetup":
        return replace(self, seed=seed)


def build_setup(wavelength: float, z_a: float, z_b: float, magnification: float,
                source: SourceModel, obj: ObjectModel, grid_a: Grid, grid_b: Grid,
                grid_s: Optional[Grid] = None, grid_o: Optional[Grid] = None,
                **kwargs) -> OpticalSetup:
    """Assemble a setup, deriving any integration grid that was not given."""
    if grid_s is None or grid_o is None:
        derived_s, derived_o = derive_integration_grids(
            wavelength, z_a, z_b, magnification, source, obj, grid_a, grid_b
        )
        grid_s = derived_s if grid_s is None else grid_s
        grid_o = derived_o if grid_o is None else grid_o
    mode = "1D" if isinstance(grid_a, Grid1D) else "2D"
    return OpticalSetup(wavelength=wavelength, z_a=z_a, z_b=z_b, magnification=magnification,
                        source=source, obj=obj, grid_a=grid_a, grid_b=grid_b,
                        grid_s=grid_s, grid_o=grid_o, mode=mode, **kwargs)


def _phase_bounds(k: float, z_a: float, z_b: float, M: float,
                  s_max: float, o_max: float, a_max: float, b_max: float) -> Dict[str, float]:
    """Step bounds per plane from the largest local phase rate of each integrand."""
    alpha = z_a / z_b
    curvature = k * abs(1.0 / z_b - 1.0 / z_a)
    plane_wave = (k / z_a) * (alpha * o_max + a_max)
    chirp_rate = curvature * s_max
    object_rate = (k / z_b) * s_max + k * b_max / (z_b * M)
    return {
        "source_chirp": math.pi / chirp_rate if chirp_rate > 0 else math.inf,
        "source_phase": math.pi / (chirp_rate + plane_wave) if chirp_rate + plane_wave > 0 else math.inf,
        "object_phase": math.pi / object_rate if object_rate > 0 else math.inf,
    }


def _point_axis(center: float) -> Grid1D:
    return Grid1D(n=3, step=POINT_GRID_STEP, center=center)


def derive_integration_grids(wavelength: float, z_a: float, z_b: float, M: float,
                             source: SourceModel, obj: ObjectModel,
                             grid_a: Grid, grid_b: Grid) -> Tuple[Grid, Grid]:
    """Source and object grids meeting every sampling rule at SAMPLING_SAFETY of the bound."""
    k = 2.0 * math.pi / wavelength
    axes_s, axes_o = [], []
    for axis, (g_a, g_b) in enumerate(zip(axes_of(grid_a), axes_of(grid_b))):
        cs, co = _axis_center(source.center, axis), _axis_center(obj.center, axis)
        if obj.kind == "custom-mask":
            o_half = axes_of(obj.mask_grid)[axis].max_abs
        elif obj.kind == "point":
            o_half = 0.0
        elif axis == 0:
            o_half = obj.support_half_extent + obj.smallest_detail
        else:
            o_half = 0.5 * obj.length() + obj.smallest_detail
        s_half = source.support_half_extent
        bounds = _phase_bounds(k, z_a, z_b, M,
                               s_max=abs(cs) + s_half, o_max=abs(co) + o_half,
                               a_max=g_a.max_abs, b_max=g_b.max_abs)

        if source.kind == "point":
            axes_s.append(_point_axis(cs))
        else:
            resolve = (source.width / SOURCE_SAMPLES_PER_SIGMA if source.kind == "gaussian"
                       else source.width / SOURCE_SAMPLES_PER_RADIUS)
            step = min(SAMPLING_SAFETY * bounds["source_phase"], resolve)
            axes_s.append(Grid1D.covering(s_half, step, center=cs))

        if obj.kind == "point":
            axes_o.append(_point_axis(co))
        else:
            step = min(SAMPLING_SAFETY * bounds["object_phase"], obj.smallest_detail / 8.0)
            axes_o.append(Grid1D.covering(o_half, step, center=co))

    for name, axes in (("source", axes_s), ("object", axes_o)):
        for g in axes:
            if g.n > MAX_AXIS_SAMPLES:
                raise SetupValidationError(
                    [f"{name} integration grid needs {g.n} samples per axis "
                     f"(cap {MAX_AXIS_SAMPLES}); reduce detector extent or distances"]
                )
    if len(axes_s) == 1:
        grid_s, grid_o = axes_s[0], axes_o[0]
    else:
        grid_s, grid_o = Grid2D(*axes_s), Grid2D(*axes_o)
    logger.debug(f"Derived integration grids: source {grid_s.shape}, object {grid_o.shape}")
    return grid_s, grid_o


# ============================================================================
# VALIDATION
# ============================================================================

@dataclass
class ValidationReport:
    violations: List[str] = field(default_factory=list)
    checks: Dict[str, bool] = field(default_factory=dict)
    geometrical_optics_parameter: float = math.nan

    @property
    def accepted(self) -> bool:
        return not self.violations

    def record(self, name: str, ok: bool, message: str) -> None:
        self.checks[name] = ok
        if not ok:
            self.violations.append(message)


def validate_setup(setup: OpticalSetup) -> ValidationReport:
    """Pixel budget, per-plane sampling rules and the geometrical-optics parameter."""
    report = ValidationReport()

    if setup.n_tot is not None:
        n_x = axes_of(setup.grid_a)[0].n
        n_u = axes_of(setup.grid_b)[0].n
        report.record("pixel_budget", n_x + n_u <= setup.n_tot,
                      f"pixel budget: N_x + N_u = {n_x} + {n_u} exceeds N_tot = {setup.n_tot}")
        if setup.n_x_pi is not None:
            try:
                setup.budget()
                report.record("plenoptic_budget", True, "")
            except BudgetError as e:
                report.record("plenoptic_budget", False, f"plenoptic budget: {e}")

    for axis, (g_s, g_o, g_a, g_b) in enumerate(zip(axes_of(setup.grid_s), axes_of(setup.grid_o),
                                                    axes_of(setup.grid_a), axes_of(setup.grid_b))):
        bounds = _phase_bounds(setup.k, setup.z_a, setup.z_b, setup.magnification,
                               s_max=g_s.max_abs, o_max=g_o.max_abs,
                               a_max=g_a.max_abs, b_max=g_b.max_abs)
        tag = f"axis{axis}"
        report.record(f"source_chirp_{tag}", g_s.step < bounds["source_chirp"],
                      f"source plane ({tag}): step {g_s.step:.3e} m violates chirp bound "
                      f"{bounds['source_chirp']:.3e} m")
        report.record(f"source_phase_{tag}", g_s.step < bounds["source_phase"],
                      f"source plane ({tag}): step {g_s.step:.3e} m violates phase bound "
                      f"{bounds['source_phase']:.3e} m")
        report.record(f"object_phase_{tag}", g_o.step < bounds["object_phase"],
                      f"object plane ({tag}): step {g_o.step:.3e} m violates phase bound "
                      f"{bounds['object_phase']:.3e} m")
        if setup.source.kind != "point":
            report.record(f"source_extent_{tag}", g_s.extent >= setup.source.D_s,
                          f"source plane ({tag}): extent {g_s.extent:.3e} m narrower than D_s")

    try:
        sample_object_aperture(setup.obj, setup.grid_o)
        report.record("object_resolution", True, "")
    except SetupValidationError as e:
        for message in e.violations:
            report.record("object_resolution", False, message)

    if setup.lens_focal is not None and setup.lens_object_distance is not None:
        m_lens = thin_lens_magnification(setup.lens_focal, setup.lens_object_distance)
        report.record("thin_lens", abs(m_lens - setup.magnification) <= 1e-6 * setup.magnification,
                      f"thin lens gives M = {m_lens:.6g}, setup declares M = {setup.magnification:.6g}")

    report.geometrical_optics_parameter = geometrical_optics_parameter(setup)

    if report.accepted:
        logger.info(f"[OK] Setup accepted (geometrical-optics parameter "
                    f"{report.geometrical_optics_parameter:.4g})")
    else:
        for message in report.violations:
            logger.warning(f"[WARN] {message}")
    return report


def ensure_accepted(setup: OpticalSetup) -> ValidationReport:
    report = validate_setup(setup)
    if not report.accepted:
        raise SetupValidationError(report.violations)
    return report
