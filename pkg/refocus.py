"""
Refocus
=======

Post-capture refocusing of a correlation plenoptic tensor. Each D_b column of
Gamma is read at rho_a' = (z_a/z_b) rho_a - (rho_b/M)(1 - z_a/z_b); summing
the rescaled tensor over D_b gives the image of the plane at z_b.

Lookups that fall outside the D_a grid read zero and are counted; more than
MAX_OUT_OF_RANGE of them means the tensor is too small to refocus.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.ndimage import map_coordinates

from analysis import measure_image
from correlation_engine import GammaTensor, incoherent_image, parallel_jobs, row_chunks
from optics_core import ImagePlane, axes_of

# ============================================================================
# CONFIGURATION
# ============================================================================

MAX_OUT_OF_RANGE = 0.20

# Fractional indices this close to an integer snap onto it
INDEX_SNAP = 1e-9

logger = logging.getLogger(__name__)


class RefocusRangeError(ValueError):
    """Too many rescaled lookups fall outside the D_a grid."""

    def __init__(self, fraction: float):
        self.fraction = fraction
        super().__init__(
            f"{fraction:.1%} of refocus lookups fall outside D_a "
            f"(limit {MAX_OUT_OF_RANGE:.0%}); tensor too small to refocus"
        )


@dataclass(frozen=True)
class RefocusParams:
    z_a: float
    z_b: float
    M: float
    interpolation: str = "linear"

    def __post_init__(self):
        for name in ("z_a", "z_b", "M"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive, got {value}")
        if self.interpolation not in ("linear", "nearest"):
            raise ValueError(f"interpolation must be 'linear' or 'nearest', got {self.interpolation}")

    @classmethod
    def for_gamma(cls, gamma: GammaTensor, M: float, z_b: Optional[float] = None,
                  interpolation: str = "linear") -> "RefocusParams":
        """Params refocusing `gamma` onto z_b (the tensor's own z_b by default)."""
        return cls(z_a=gamma.z_a, z_b=gamma.z_b if z_b is None else z_b, M=M,
                   interpolation=interpolation)

    @property
    def scale(self) -> float:
        return self.z_a / self.z_b

    @property
    def shift(self) -> float:
        return (1.0 - self.z_a / self.z_b) / self.M

    @property
    def is_identity(self) -> bool:
        return self.z_a == self.z_b


def _fractional_indices(gamma: GammaTensor, params: RefocusParams, rows: slice) -> List[np.ndarray]:
    """
    Fractional D_a index per axis for output rows `rows` (first axis only),
    shaped (rows_a..., b...) and broadcastable against the chunk.
    """
    axes_a, axes_b = axes_of(gamma.grid_a), axes_of(gamma.grid_b)
    n_axes = len(axes_a)
    out = []
    for axis, (g_a, g_b) in enumerate(zip(axes_a, axes_b)):
        a = g_a.coords()[rows] if axis == 0 else g_a.coords()
        target = params.scale * a[:, None] - params.shift * g_b.coords()[None, :]
        f = (target - g_a.lower()) / g_a.step
        near = np.rint(f)
        f = np.where(np.abs(f - near) < INDEX_SNAP, near, f)
        # place the (a_axis, b_axis) pair in the (a..., b...) layout
        shape = [1] * (2 * n_axes)
        shape[axis] = f.shape[0]
        shape[n_axes + axis] = f.shape[1]
        out.append(f.reshape(shape))
    return out


def _rescale_chunk(gamma: GammaTensor, params: RefocusParams, rows: slice) -> Tuple[np.ndarray, int]:
    n_axes = gamma.a_ndim
    frac = _fractional_indices(gamma, params, rows)
    n_rows = rows.stop - rows.start
    shape = (n_rows,) + gamma.values.shape[1:]
    coords = [np.broadcast_to(f, shape) for f in frac]

    inside = np.ones(shape, dtype=bool)
    for axis, f in enumerate(coords):
        n = gamma.values.shape[axis]
        inside &= (f >= 0) & (f <= n - 1)

    # D_b coordinates are the D_b indices themselves
    for axis in range(n_axes):
        idx_shape = [1] * (2 * n_axes)
        idx_shape[n_axes + axis] = gamma.values.shape[n_axes + axis]
        idx = np.arange(gamma.values.shape[n_axes + axis], dtype=float).reshape(idx_shape)
        coords.append(np.broadcast_to(idx, shape))

    order = 1 if params.interpolation == "linear" else 0
    values = map_coordinates(gamma.values, [c.ravel() for c in coords],
                             order=order, mode="nearest").reshape(shape)
    values = np.where(inside, values, 0.0)
    return values, int(np.count_nonzero(~inside))


def out_of_range_fraction(gamma: GammaTensor, params: RefocusParams) -> float:
    missing = 0
    for rows in row_chunks(gamma.values.shape[0]):
        frac = _fractional_indices(gamma, params, rows)
        shape = (rows.stop - rows.start,) + gamma.values.shape[1:]
        inside = np.ones(shape, dtype=bool)
        for axis, f in enumerate(frac):
            n = gamma.values.shape[axis]
            inside &= np.broadcast_to((f >= 0) & (f <= n - 1), shape)
        missing += int(np.count_nonzero(~inside))
    return missing / gamma.values.size


def refocus_scale(gamma: GammaTensor, params: RefocusParams, n_jobs: Optional[int] = None) -> GammaTensor:
    """Gamma read at the rescaled D_a coordinates; approximates the tensor focused at z_b."""
    if params.is_identity:
        logger.info("[OK] Refocus at z_a = z_b is the identity")
        return GammaTensor(values=gamma.values, grid_a=gamma.grid_a, grid_b=gamma.grid_b,
                           provenance="refocused", z_a=params.z_b, z_b=params.z_b,
                           n_frames=gamma.n_frames, seed=gamma.seed, scale=gamma.scale)

    parts = Parallel(n_jobs=parallel_jobs(n_jobs), prefer="threads")(
        delayed(_rescale_chunk)(gamma, params, rows) for rows in row_chunks(gamma.values.shape[0])
    )
    values = np.concatenate([p[0] for p in parts], axis=0)
    fraction = sum(p[1] for p in parts) / gamma.values.size
    logger.info(f"Refocus z_a={params.z_a:.4g} m -> z_b={params.z_b:.4g} m "
                f"({params.interpolation}), out-of-range {fraction:.2%}")
    if fraction > MAX_OUT_OF_RANGE:
        logger.error(f"[ERROR] Refocus rejected: {fraction:.1%} out of range")
        raise RefocusRangeError(fraction)

    return GammaTensor.from_raw(values * gamma.scale, gamma.grid_a, gamma.grid_b, "refocused",
                                params.z_b, params.z_b, n_frames=gamma.n_frames, seed=gamma.seed)


def refocus_integrate(gamma: GammaTensor, params: RefocusParams, n_jobs: Optional[int] = None) -> ImagePlane:
    """Refocused incoherent image: D_b sum of the rescaled tensor."""
    return incoherent_image(refocus_scale(gamma, params, n_jobs=n_jobs))


def tensor_residual(first: GammaTensor, second: GammaTensor) -> float:
    """L2 distance between two tensors after scaling each to unit norm."""
    a = np.asarray(first.values, dtype=float).ravel()
    b = np.asarray(second.values, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"tensor shapes differ: {first.values.shape} vs {second.values.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return math.inf
    return float(np.linalg.norm(a / na - b / nb))


def refocus_sweep(gamma: GammaTensor, targets: Iterable[float], M: float, reference=None,
                  interpolation: str = "linear") -> pd.DataFrame:
    """
    Refocus one tensor onto several object distances and score each image.
    Targets that run out of range are kept with NaN metrics.
    """
    rows = []
    for z_b in targets:
        params = RefocusParams.for_gamma(gamma, M, z_b=z_b, interpolation=interpolation)
        fraction = out_of_range_fraction(gamma, params)
        row = {"z_b": z_b, "out_of_range": fraction, "visibility": np.nan,
               "ncc": np.nan, "centroid": np.nan}
        if fraction <= MAX_OUT_OF_RANGE:
            metrics = measure_image(refocus_integrate(gamma, params), reference)
            row.update(
                visibility=np.nan if metrics.visibility is None else metrics.visibility,
                ncc=np.nan if metrics.ncc is None else metrics.ncc,
                centroid=metrics.centroid[0],
            )
        else:
            logger.warning(f"[WARN] z_b={z_b:.4g} m skipped: {fraction:.1%} out of range")
        rows.append(row)
    return pd.DataFrame(rows, columns=["z_b", "out_of_range", "visibility", "ncc", "centroid"])
