"""
Correlation Engine
==================

Deterministic evaluation of the correlation plenoptic tensor
Gamma(rho_a, rho_b) = |G1_ab(rho_a, rho_b)|^2 for chaotic light:

  * gamma_analytic            - source integral (profile x chirp x plane wave),
                                then object integral with the D_b phase, squared
  * gamma_focused_closed_form - z_a = z_b, driven by the profile transform F~
  * incoherent_image          - sum of Gamma over every D_b pixel
  * coherent_image            - Gamma at one D_b pixel
  * source_image_map          - Gamma at one D_a pixel, over D_b

The source integral depends on (rho_o, rho_a) only, so it is tabulated once
per chunk of D_a samples and reused for every rho_b. Chunks run in parallel
with joblib; chunk sizes do not depend on the worker count, so results are
bit-identical for any CPI_THREADS.
"""

import logging
import os
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from joblib import Parallel, delayed

from optics_core import Grid, Grid1D, ImagePlane, axes_of, chirp_factor, fourier_profile
from scene import OpticalSetup, ensure_accepted, sample_object_aperture, sample_source_intensity

# ============================================================================
# CONFIGURATION
# ============================================================================

# D_a rows per work unit
CHUNK_ROWS = 16

# Source samples per block of the source-integral table
SOURCE_BLOCK = 1024

PROVENANCES = ("analytic", "focused-closed-form", "monte-carlo", "intensity-covariance", "refocused")

logger = logging.getLogger(__name__)


def threads_from_env(value: Optional[str]) -> int:
    """
    joblib n_jobs from a CPI_THREADS value. Unset, empty, zero, negative or
    non-integer values all mean every core (-1); garbage is logged.
    """
    if value is None or not value.strip():
        return -1
    try:
        threads = int(value)
    except ValueError:
        logger.warning(f"[WARN] CPI_THREADS={value!r} is not an integer; using every core")
        return -1
    if threads < 1:
        logger.warning(f"[WARN] CPI_THREADS={threads} is below 1; using every core")
        return -1
    return threads


# joblib worker cap
N_JOBS = threads_from_env(os.getenv("CPI_THREADS"))


def parallel_jobs(n_jobs: Optional[int] = None) -> int:
    return N_JOBS if n_jobs is None else n_jobs


# ============================================================================
# GAMMA TENSOR
# ============================================================================

@dataclass(frozen=True, eq=False)
class GammaTensor:
    """
    Sampled Gamma, peak-normalized. Axes are (rho_a..., rho_b...): a matrix in
    1-D mode, a rank-4 array in 2-D mode. `scale` keeps the raw peak.
    """
    values: np.ndarray
    grid_a: Grid
    grid_b: Grid
    provenance: str
    z_a: float
    z_b: float
    n_frames: int = 0
    seed: int = 0
    scale: float = 1.0

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        expected = tuple(self.grid_a.shape) + tuple(self.grid_b.shape)
        if values.shape != expected:
            raise ValueError(f"Gamma shape {values.shape} does not match grids {expected}")
        if not np.all(np.isfinite(values)):
            raise FloatingPointError("Gamma contains non-finite samples")
        if values.size and values.min() < 0:
            raise ValueError("Gamma must be non-negative")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance '{self.provenance}'")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_raw(cls, raw: np.ndarray, grid_a: Grid, grid_b: Grid, provenance: str,
                 z_a: float, z_b: float, **kwargs) -> "GammaTensor":
        raw = np.asarray(raw, dtype=float)
        if not np.all(np.isfinite(raw)):
            raise FloatingPointError(f"non-finite intermediate while building {provenance} Gamma")
        raw = np.clip(raw, 0.0, None)
        peak = float(raw.max()) if raw.size else 0.0
        values = raw / peak if peak > 0 else raw
        return cls(values=values, grid_a=grid_a, grid_b=grid_b, provenance=provenance,
                   z_a=z_a, z_b=z_b, scale=peak, **kwargs)

    @property
    def mode(self) -> str:
        return "1D" if isinstance(self.grid_a, Grid1D) else "2D"

    @property
    def a_ndim(self) -> int:
        return len(self.grid_a.shape)


# ============================================================================
# ANALYTIC EVALUATION
# ============================================================================

def row_chunks(n: int) -> List[slice]:
    return [slice(i, min(i + CHUNK_ROWS, n)) for i in range(0, n, CHUNK_ROWS)]


def _source_table_1d(a: np.ndarray, o: np.ndarray, s: np.ndarray, weights: np.ndarray,
                     beta: float, gamma: float) -> np.ndarray:
    """T[a, o] = sum_s w(s) exp(-i beta o s) exp(i gamma a s), blocked over s."""
    table = np.zeros((a.size, o.size), dtype=np.complex128)
    for start in range(0, s.size, SOURCE_BLOCK):
        blk = slice(start, min(start + SOURCE_BLOCK, s.size))
        e_a = np.exp(1j * gamma * np.outer(a, s[blk])) * weights[blk]
        e_o = np.exp(-1j * beta * np.outer(s[blk], o))
        table += e_a @ e_o
    return table


def _chunk_1d(a: np.ndarray, setup: OpticalSetup, weights: np.ndarray,
              o: np.ndarray, obj_weights: np.ndarray, b: np.ndarray) -> np.ndarray:
    k = setup.k
    table = _source_table_1d(a, o, setup.grid_s.coords(), weights, beta=k / setup.z_b, gamma=k / setup.z_a)
    eta = k / (setup.z_b * setup.magnification)
    phase_b = np.exp(-1j * eta * np.outer(o, b))
    g1 = (table * obj_weights) @ phase_b
    return np.abs(g1) ** 2


def _chunk_2d(ax: np.ndarray, setup: OpticalSetup, weights: np.ndarray,
              aperture: np.ndarray) -> np.ndarray:
    k = setup.k
    beta, gamma_, eta = k / setup.z_b, k / setup.z_a, k / (setup.z_b * setup.magnification)
    sx, sy = setup.grid_s.x.coords(), setup.grid_s.y.coords()
    ox, oy = setup.grid_o.x.coords(), setup.grid_o.y.coords()
    ay = setup.grid_a.y.coords()
    bx, by = setup.grid_b.x.coords(), setup.grid_b.y.coords()

    kx = np.exp(1j * gamma_ * np.outer(ax, sx))[:, None, :] * np.exp(-1j * beta * np.outer(ox, sx))[None]
    ky = np.exp(1j * gamma_ * np.outer(ay, sy))[:, None, :] * np.exp(-1j * beta * np.outer(oy, sy))[None]
    # T[ax, ox, ay, oy]
    table = np.einsum("xy,ipx,jqy->ipjq", weights, kx, ky, optimize=True)
    px = np.exp(-1j * eta * np.outer(bx, ox))
    py = np.exp(-1j * eta * np.outer(by, oy))
    g1 = np.einsum("ipjq,pq,bp,cq->ijbc", table, aperture, px, py, optimize=True)
    return np.abs(g1) ** 2


def _source_weights(setup: OpticalSetup) -> np.ndarray:
    """F(rho_s) x chirp x cell on the source grid."""
    profile = sample_source_intensity(setup.source, setup.grid_s)
    curvature = setup.k * (1.0 / setup.z_b - 1.0 / setup.z_a)
    if setup.mode == "1D":
        chirp = chirp_factor(setup.grid_s.coords(), curvature)
    else:
        cx = chirp_factor(setup.grid_s.x.coords(), curvature)
        cy = chirp_factor(setup.grid_s.y.coords(), curvature)
        chirp = np.outer(cx, cy)
    return profile * chirp * setup.grid_s.cell


def gamma_analytic(setup: OpticalSetup, n_jobs: Optional[int] = None) -> GammaTensor:
    """Gamma from the source and object quadratures, peak-normalized."""
    ensure_accepted(setup)
    weights = _source_weights(setup)
    aperture = sample_object_aperture(setup.obj, setup.grid_o) * setup.grid_o.cell
    logger.info(f"Gamma analytic: z_a={setup.z_a:.4g} m, z_b={setup.z_b:.4g} m, "
                f"source {setup.grid_s.shape}, object {setup.grid_o.shape}, "
                f"D_a {setup.grid_a.shape}, D_b {setup.grid_b.shape}")

    if setup.mode == "1D":
        a = setup.grid_a.coords()
        open_o = np.flatnonzero(aperture != 0)
        o = setup.grid_o.coords()[open_o]
        b = setup.grid_b.coords()
        parts = Parallel(n_jobs=parallel_jobs(n_jobs), prefer="threads")(
            delayed(_chunk_1d)(a[rows], setup, weights, o, aperture[open_o], b)
            for rows in row_chunks(a.size)
        )
    else:
        ax = setup.grid_a.x.coords()
        parts = Parallel(n_jobs=parallel_jobs(n_jobs), prefer="threads")(
            delayed(_chunk_2d)(ax[rows], setup, weights, aperture)
            for rows in row_chunks(ax.size)
        )
    raw = np.concatenate(parts, axis=0)
    gamma = GammaTensor.from_raw(raw, setup.grid_a, setup.grid_b, "analytic",
                                 setup.z_a, setup.z_b, seed=setup.seed)
    logger.info(f"[OK] Gamma analytic done, raw peak {gamma.scale:.4e}")
    return gamma


# ============================================================================
# FOCUSED CLOSED FORM
# ============================================================================

def _focused_chunk_1d(a: np.ndarray, setup: OpticalSetup, profile: np.ndarray,
                      o: np.ndarray, obj_weights: np.ndarray, b: np.ndarray) -> np.ndarray:
    kappa = (setup.k / setup.z_b) * (o[None, :] - a[:, None])
    transform = fourier_profile(profile, setup.grid_s, kappa)
    eta = setup.k / (setup.z_b * setup.magnification)
    g1 = (transform * obj_weights) @ np.exp(-1j * eta * np.outer(o, b))
    return np.abs(g1) ** 2


def _focused_chunk_2d(ax: np.ndarray, setup: OpticalSetup, profile: np.ndarray,
                      aperture: np.ndarray) -> np.ndarray:
    q = setup.k / setup.z_b
    ay = setup.grid_a.y.coords()
    ox, oy = setup.grid_o.x.coords(), setup.grid_o.y.coords()
    kx = q * (ox[None, :] - ax[:, None])            # [ax, ox]
    ky = q * (oy[None, :] - ay[:, None])            # [ay, oy]
    pairs = np.stack(np.broadcast_arrays(kx[:, :, None, None], ky[None, None, :, :]), axis=-1)
    transform = fourier_profile(profile, setup.grid_s, pairs)   # [ax, ox, ay, oy]
    eta = setup.k / (setup.z_b * setup.magnification)
    px = np.exp(-1j * eta * np.outer(setup.grid_b.x.coords(), ox))
    py = np.exp(-1j * eta * np.outer(setup.grid_b.y.coords(), oy))
    g1 = np.einsum("ipjq,pq,bp,cq->ijbc", transform, aperture, px, py, optimize=True)
    return np.abs(g1) ** 2


def gamma_focused_closed_form(setup: OpticalSetup, n_jobs: Optional[int] = None) -> GammaTensor:
    """Gamma at z_a = z_b through the source-profile transform."""
    if setup.z_a != setup.z_b:
        raise ValueError(f"closed form needs z_a == z_b, got z_a={setup.z_a}, z_b={setup.z_b}")
    ensure_accepted(setup)
    profile = sample_source_intensity(setup.source, setup.grid_s)
    aperture = sample_object_aperture(setup.obj, setup.grid_o) * setup.grid_o.cell

    if setup.mode == "1D":
        a = setup.grid_a.coords()
        open_o = np.flatnonzero(aperture != 0)
        o = setup.grid_o.coords()[open_o]
        b = setup.grid_b.coords()
        parts = Parallel(n_jobs=parallel_jobs(n_jobs), prefer="threads")(
            delayed(_focused_chunk_1d)(a[rows], setup, profile, o, aperture[open_o], b)
            for rows in row_chunks(a.size)
        )
    else:
        ax = setup.grid_a.x.coords()
        parts = Parallel(n_jobs=parallel_jobs(n_jobs), prefer="threads")(
            delayed(_focused_chunk_2d)(ax[rows], setup, profile, aperture)
            for rows in row_chunks(ax.size)
        )
    raw = np.concatenate(parts, axis=0)
    gamma = GammaTensor.from_raw(raw, setup.grid_a, setup.grid_b, "focused-closed-form",
                                 setup.z_a, setup.z_b, seed=setup.seed)
    logger.info(f"[OK] Gamma focused closed form done, raw peak {gamma.scale:.4e}")
    return gamma


# ============================================================================
# DERIVED IMAGES
# ============================================================================

def incoherent_image(gamma: GammaTensor) -> ImagePlane:
    """Sum of Gamma over every D_b pixel."""
    b_axes = tuple(range(gamma.a_ndim, gamma.values.ndim))
    raw = gamma.values.sum(axis=b_axes) * gamma.grid_b.cell
    return ImagePlane.from_raw(gamma.grid_a, raw)


def _index(grid: Grid, position) -> tuple:
    positions = [position] if np.isscalar(position) else list(position)
    return tuple(g.index_of(p) for g, p in zip(axes_of(grid), positions))


def coherent_image(gamma: GammaTensor, rho_b0) -> ImagePlane:
    """Gamma(., rho_b0): the image seen in correlation with one D_b pixel."""
    idx = _index(gamma.grid_b, rho_b0)
    raw = gamma.values[(Ellipsis,) + idx]
    return ImagePlane.from_raw(gamma.grid_a, raw)


def source_image_map(gamma: GammaTensor, rho_a0) -> ImagePlane:
    """Gamma(rho_a0, .) over D_b; a point source at rho_s lands near rho_b = -M rho_s."""
    idx = _index(gamma.grid_a, rho_a0)
    raw = gamma.values[idx]
    return ImagePlane.from_raw(gamma.grid_b, raw)

