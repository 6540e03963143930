"""
Optics Core
===========

Sampling grids, complex fields and the elementary paraxial kernels shared by
every other module: the quadratic-phase (chirp) factor, the Fresnel propagator
and the Riemann-sum Fourier transform of a sampled profile.

All lengths are SI meters. Integrals are midpoint Riemann sums on uniform grids.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

# ============================================================================
# CONFIGURATION
# ============================================================================

# Sums with at least this many terms switch to compensated summation
COMPENSATED_SUM_THRESHOLD = 100_000

# Rows of a kernel matrix built at once (memory cap for direct integration)
KERNEL_BLOCK_ROWS = 512

logger = logging.getLogger(__name__)


class SamplingError(ValueError):
    """A grid step is too coarse for the phase it has to carry."""


# ============================================================================
# GRIDS AND FIELDS
# ============================================================================

@dataclass(frozen=True)
class Grid1D:
    """Uniform lattice: sample i sits at center + (i - (n-1)/2) * step."""
    n: int
    step: float
    center: float = 0.0

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise ValueError(f"Grid1D needs n >= 2 samples, got {self.n}")
        if not math.isfinite(self.step) or self.step <= 0:
            raise ValueError(f"Grid1D needs a positive step, got {self.step}")
        if not math.isfinite(self.center):
            raise ValueError(f"Grid1D center must be finite, got {self.center}")

    @classmethod
    def covering(cls, half_extent: float, step: float, center: float = 0.0) -> "Grid1D":
        """Smallest odd-sized grid of the given step reaching center +/- half_extent."""
        half = max(1, int(math.ceil(half_extent / step)))
        return cls(n=2 * half + 1, step=step, center=center)

    @property
    def extent(self) -> float:
        return self.n * self.step

    @property
    def shape(self) -> Tuple[int]:
        return (self.n,)

    @property
    def size(self) -> int:
        return self.n

    @property
    def cell(self) -> float:
        return self.step

    @property
    def max_abs(self) -> float:
        """Largest |rho| over the samples."""
        return abs(self.center) + 0.5 * (self.n - 1) * self.step

    def coords(self) -> np.ndarray:
        return self.center + (np.arange(self.n) - 0.5 * (self.n - 1)) * self.step

    def lower(self) -> float:
        return self.center - 0.5 * (self.n - 1) * self.step

    def index_of(self, rho: float) -> int:
        """Nearest sample index, clipped to the grid."""
        i = int(round((rho - self.lower()) / self.step))
        return min(max(i, 0), self.n - 1)

    def refined(self, factor: int = 2) -> "Grid1D":
        """Same extent, step divided by factor."""
        return Grid1D(n=self.n * factor, step=self.step / factor, center=self.center)


@dataclass(frozen=True)
class Grid2D:
    x: Grid1D
    y: Grid1D

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.x.n, self.y.n)

    @property
    def size(self) -> int:
        return self.x.n * self.y.n

    @property
    def cell(self) -> float:
        return self.x.step * self.y.step

    @property
    def max_abs(self) -> float:
        return math.hypot(self.x.max_abs, self.y.max_abs)

    def coords(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.x.coords(), self.y.coords(), indexing="ij")

    def refined(self, factor: int = 2) -> "Grid2D":
        return Grid2D(self.x.refined(factor), self.y.refined(factor))


Grid = Union[Grid1D, Grid2D]


def axes_of(grid: Grid) -> Tuple[Grid1D, ...]:
    """The 1-D axes of a grid, in array order."""
    return (grid,) if isinstance(grid, Grid1D) else (grid.x, grid.y)


def squared_radius(grid: Grid, center=0.0) -> np.ndarray:
    """|rho - center|^2 on every sample of the grid."""
    if isinstance(grid, Grid1D):
        return (grid.coords() - float(np.ravel(center)[0])) ** 2
    cx, cy = (center, center) if np.isscalar(center) else center
    xx, yy = grid.coords()
    return (xx - cx) ** 2 + (yy - cy) ** 2


@dataclass(frozen=True)
class Wavenumber:
    wavelength: float

    def __post_init__(self):
        if not math.isfinite(self.wavelength) or self.wavelength <= 0:
            raise ValueError(f"wavelength must be positive, got {self.wavelength}")

    @property
    def k(self) -> float:
        return 2.0 * math.pi / self.wavelength


@dataclass(frozen=True)
class ComplexField:
    """One sampled realization of a scalar field; values are read-only."""
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.complex128)
        if values.shape != self.grid.shape:
            raise ValueError(
                f"field shape {values.shape} does not match grid shape {self.grid.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("field contains non-finite samples")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def intensity(self) -> np.ndarray:
        return np.abs(self.values) ** 2

    def power(self) -> float:
        """Riemann sum of |E|^2 over the grid."""
        return float(compensated_sum(self.intensity().ravel()) * self.grid.cell)


# ============================================================================
# KERNELS
# ============================================================================

def compensated_sum(terms: np.ndarray):
    """Sum of a 1-D array; exact-rounding fsum once it gets long."""
    terms = np.asarray(terms)
    if terms.size < COMPENSATED_SUM_THRESHOLD:
        return terms.sum()
    if np.iscomplexobj(terms):
        return complex(math.fsum(terms.real), math.fsum(terms.imag))
    return math.fsum(terms)


def chirp_factor(rho, curvature: float):
    """exp(i * curvature * rho^2 / 2); works on scalars and arrays."""
    return np.exp(0.5j * curvature * np.square(rho))


def chirp_step_bound(curvature: float, half_extent: float) -> float:
    """Largest step keeping the adjacent-sample phase change of a chirp below pi."""
    if curvature == 0 or half_extent == 0:
        return math.inf
    return math.pi / (abs(curvature) * half_extent)


def check_chirp_sampling(step: float, curvature: float, half_extent: float,
                         plane: str = "plane") -> None:
    bound = chirp_step_bound(curvature, half_extent)
    if step >= bound:
        raise SamplingError(
            f"{plane}: step {step:.3e} m violates chirp bound {bound:.3e} m "
            f"(curvature {curvature:.3e} 1/m^2, half-extent {half_extent:.3e} m)"
        )


def _max_separation(dst: Grid1D, src: Grid1D) -> float:
    lo_d, hi_d = dst.lower(), dst.lower() + (dst.n - 1) * dst.step
    lo_s, hi_s = src.lower(), src.lower() + (src.n - 1) * src.step
    return max(abs(hi_d - lo_s), abs(hi_s - lo_d))


def fresnel_kernel(dst: Grid1D, src: Grid1D, distance: float, k: float) -> np.ndarray:
    """
    1-D paraxial Green function sqrt(k / (2 pi i d)) exp(i k (x2 - x1)^2 / (2 d)),
    one row per destination sample, already weighted by the source step.
    A negative distance gives the back-propagation kernel.
    """
    prefactor = np.sqrt(k / (2j * math.pi * distance)) * src.step
    x1 = src.coords()
    x2 = dst.coords()
    kernel = np.empty((dst.n, src.n), dtype=np.complex128)
    for start in range(0, dst.n, KERNEL_BLOCK_ROWS):
        stop = min(start + KERNEL_BLOCK_ROWS, dst.n)
        kernel[start:stop] = chirp_factor(x2[start:stop, None] - x1[None, :], k / distance)
    return prefactor * kernel


def apply_kernels(values: np.ndarray, kernels) -> np.ndarray:
    """Apply one kernel per axis (separable transform); extra trailing axes ride along."""
    if len(kernels) == 1:
        return kernels[0] @ values
    kx, ky = kernels
    return np.einsum("ia,ab...,jb->ij...", kx, values, ky, optimize=True)


def propagation_kernels(src: Grid, dst: Grid, distance: float, k: float):
    """Per-axis Fresnel kernels after checking the chirp-sampling rule on the source."""
    kernels = []
    for axis_src, axis_dst in zip(axes_of(src), axes_of(dst)):
        check_chirp_sampling(axis_src.step, k / abs(distance),
                             _max_separation(axis_dst, axis_src), plane="propagation source")
        kernels.append(fresnel_kernel(axis_dst, axis_src, distance, k))
    return kernels


def fresnel_propagate(field: ComplexField, distance: float, k: Wavenumber,
                      dest_grid: Optional[Grid] = None) -> ComplexField:
    """
    Propagate a field over `distance` with the paraxial Fresnel integral,
    evaluated by direct quadrature onto `dest_grid` (the source grid by default).
    """
    if not distance > 0:
        raise ValueError(f"propagation distance must be positive, got {distance}")
    dest = dest_grid if dest_grid is not None else field.grid
    if isinstance(dest, Grid1D) != isinstance(field.grid, Grid1D):
        raise ValueError("source and destination grids must have the same rank")

    kernels = propagation_kernels(field.grid, dest, distance, k.k)
    values = apply_kernels(field.values, kernels) * np.exp(1j * k.k * distance)
    logger.debug(f"Fresnel step d={distance:.4e} m: {field.grid.shape} -> {dest.shape}")
    return ComplexField(dest, values)


def fourier_profile(profile: np.ndarray, grid: Grid, kappa):
    """
    Riemann-sum Fourier transform sum F(rho) exp(-i kappa . rho) * cell.

    `kappa` is a scalar or array of frequencies for a 1-D grid, and a pair or an
    array of shape (..., 2) for a 2-D grid. Returns a complex scalar or an array
    shaped like kappa (without the trailing pair axis).
    """
    profile = np.asarray(profile)
    if profile.shape != grid.shape:
        raise ValueError(f"profile shape {profile.shape} does not match grid {grid.shape}")

    if isinstance(grid, Grid1D):
        kap = np.asarray(kappa, dtype=float)
        flat = kap.ravel()
        x = grid.coords()
        out = np.empty(flat.size, dtype=np.complex128)
        for start in range(0, flat.size, KERNEL_BLOCK_ROWS):
            stop = min(start + KERNEL_BLOCK_ROWS, flat.size)
            out[start:stop] = np.exp(-1j * np.outer(flat[start:stop], x)) @ profile
        out *= grid.cell
        return complex(out[0]) if kap.ndim == 0 else out.reshape(kap.shape)

    kap = np.asarray(kappa, dtype=float)
    if kap.shape[-1] != 2:
        raise ValueError("2-D fourier_profile needs (..., 2) frequency pairs")
    flat = kap.reshape(-1, 2)
    x, y = grid.x.coords(), grid.y.coords()
    out = np.empty(flat.shape[0], dtype=np.complex128)
    for start in range(0, flat.shape[0], KERNEL_BLOCK_ROWS):
        stop = min(start + KERNEL_BLOCK_ROWS, flat.shape[0])
        ex = np.exp(-1j * np.outer(flat[start:stop, 0], x))
        ey = np.exp(-1j * np.outer(flat[start:stop, 1], y))
        out[start:stop] = np.einsum("kx,xy,ky->k", ex, profile, ey, optimize=True)
    out *= grid.cell
    return complex(out[0]) if kap.ndim == 1 else out.reshape(kap.shape[:-1])


@dataclass(frozen=True)
class ImagePlane:
    """Real non-negative image, peak-normalized; `scale` keeps the raw peak."""
    grid: Grid
    values: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != self.grid.shape:
            raise ValueError(f"image shape {values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("image contains non-finite samples")
        if values.min(initial=0.0) < 0:
            raise ValueError("image must be non-negative")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_raw(cls, grid: Grid, raw: np.ndarray) -> "ImagePlane":
        raw = np.clip(np.asarray(raw, dtype=float), 0.0, None)
        peak = float(raw.max())
        if peak > 0:
            return cls(grid, raw / peak, peak)
        return cls(grid, raw, 0.0)
