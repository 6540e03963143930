"""
Monte Carlo speckle ensemble
============================

Chaotic-light realizations of the source, propagated to both detectors, and
the mergeable accumulator that estimates Gamma from them.

Frame `i` draws its source phases from a Philox counter-based stream keyed by
mix64(seed, i), so any frame can be regenerated on its own and frame ranges can
be accumulated in any order on any worker, then merged.

The source is treated as a lattice of point emitters: every kernel is the
exact Fresnel factor between two sample points. Only the ensemble correlations
are sums that need sampling (validate_setup checks those), so the per-arm
chirp rule of fresnel_propagate is not applied here.
"""

import logging
import math
from typing import Dict, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed

from correlation_engine import GammaTensor, parallel_jobs
from optics_core import ComplexField, Grid1D, axes_of, fresnel_kernel
from scene import OpticalSetup, ensure_accepted, sample_object_aperture, sample_source_intensity

# ============================================================================
# CONFIGURATION
# ============================================================================

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

# Frames per joblib task and per matrix-product batch inside a task
FRAMES_PER_TASK = 2048
FRAMES_PER_BATCH = 256

logger = logging.getLogger(__name__)


# ============================================================================
# SEEDING
# ============================================================================

def mix64(seed: int, frame_index: int) -> int:
    """SplitMix64 finalizer of seed + (frame_index + 1) * golden gamma."""
    z = (int(seed) + (int(frame_index) + 1) * GOLDEN_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def frame_phases(seed: int, frame_index: int, shape: Tuple[int, ...]) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=mix64(seed, frame_index)))
    return 2.0 * math.pi * rng.random(shape)


# ============================================================================
# ARM KERNELS
# ============================================================================

def _virtual_source_axis(g_b: Grid1D, M: float) -> Grid1D:
    """Source-plane points -rho_b / M imaged onto D_b, in ascending order."""
    return Grid1D(n=g_b.n, step=g_b.step / M, center=-g_b.center / M)


def arm_kernels(setup: OpticalSetup) -> Dict[str, list]:
    """
    Linear maps from the source lattice to each detector.

    'a': one Fresnel kernel per axis over z_a.
    'b': per axis, forward kernel to the object plane over z_b and the ideal
    imaging kernel that maps the object exit field back onto the source plane
    and reads it at rho_s = -rho_b / M (the L_b image of the source).
    'aperture': A on the object grid.
    """
    k, M = setup.k, setup.magnification
    kernels_a, forward, imaging = [], [], []
    for g_s, g_o, g_a, g_b in zip(axes_of(setup.grid_s), axes_of(setup.grid_o),
                                  axes_of(setup.grid_a), axes_of(setup.grid_b)):
        kernels_a.append(fresnel_kernel(g_a, g_s, setup.z_a, k))
        forward.append(fresnel_kernel(g_o, g_s, setup.z_b, k))
        imaging.append(fresnel_kernel(_virtual_source_axis(g_b, M), g_o, -setup.z_b, k)[::-1])
    aperture = sample_object_aperture(setup.obj, setup.grid_o)
    return {"a": kernels_a, "forward": forward, "imaging": imaging, "aperture": aperture}


def _composite_b_1d(kernels: Dict[str, list]) -> np.ndarray:
    """Source -> D_b matrix in 1-D mode, skipping opaque object samples."""
    open_o = np.flatnonzero(kernels["aperture"] != 0)
    fwd = kernels["forward"][0][open_o] * kernels["aperture"][open_o, None]
    return kernels["imaging"][0][:, open_o] @ fwd


def _propagate_batch(kernels: Dict[str, list], composite_b: Optional[np.ndarray],
                     sources: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Fields on D_a and D_b for a batch of source fields (batch axis last)."""
    if composite_b is not None:
        return kernels["a"][0] @ sources, composite_b @ sources
    ka_x, ka_y = kernels["a"]
    fx, fy = kernels["forward"]
    ix, iy = kernels["imaging"]
    field_a = np.einsum("ia,abn,jb->ijn", ka_x, sources, ka_y, optimize=True)
    at_object = np.einsum("ia,abn,jb->ijn", fx, sources, fy, optimize=True)
    at_object *= kernels["aperture"][:, :, None]
    field_b = np.einsum("ia,abn,jb->ijn", ix, at_object, iy, optimize=True)
    return field_a, field_b


def _source_fields(setup: OpticalSetup, amplitude: np.ndarray, frames: range) -> np.ndarray:
    """sqrt(F) exp(i phi) for each frame, batch axis last."""
    shape = setup.grid_s.shape
    out = np.empty(shape + (len(frames),), dtype=np.complex128)
    for j, i in enumerate(frames):
        out[..., j] = amplitude * np.exp(1j * frame_phases(setup.seed, i, shape))
    return out


def generate_speckle_frame(setup: OpticalSetup, frame_index: int) -> Tuple[ComplexField, ComplexField]:
    """One chaotic-light realization on D_a and D_b; deterministic in (seed, frame_index)."""
    ensure_accepted(setup)
    kernels = arm_kernels(setup)
    composite_b = _composite_b_1d(kernels) if setup.mode == "1D" else None
    amplitude = np.sqrt(sample_source_intensity(setup.source, setup.grid_s))
    sources = _source_fields(setup, amplitude, range(frame_index, frame_index + 1))
    field_a, field_b = _propagate_batch(kernels, composite_b, sources)
    return (ComplexField(setup.grid_a, field_a[..., 0]),
            ComplexField(setup.grid_b, field_b[..., 0]))


def mean_intensity(setup: OpticalSetup, arm: str) -> np.ndarray:
    """G1_ii on D_a ('a') or D_b ('b') by quadrature, in speckle-frame units."""
    profile = sample_source_intensity(setup.source, setup.grid_s)
    kernels = arm_kernels(setup)
    if setup.mode == "1D":
        kernel = kernels["a"][0] if arm == "a" else _composite_b_1d(kernels)
        return (np.abs(kernel) ** 2) @ profile
    if arm == "a":
        kx, ky = kernels["a"]
        return np.einsum("ia,ab,jb->ij", np.abs(kx) ** 2, profile, np.abs(ky) ** 2, optimize=True)
    fx, fy = kernels["forward"]
    ix, iy = kernels["imaging"]
    full = np.einsum("ip,jq,pq,ps,qt->ijst", ix, iy, kernels["aperture"], fx, fy, optimize=True)
    return np.einsum("ijst,st->ij", np.abs(full) ** 2, profile, optimize=True)


# ============================================================================
# ACCUMULATOR
# ============================================================================

def _kahan_add(total: np.ndarray, comp: np.ndarray, value: np.ndarray) -> None:
    """total += value with the running compensation in comp (in place)."""
    y = value - comp
    t = total + y
    comp[...] = (t - total) - y
    total[...] = t


class CorrelationAccumulator:
    """
    Running sums over speckle frames: g = E_a* E_b per (rho_a, rho_b) and the
    intensity sums. Since |g|^2 = Ia Ib frame by frame, sum_iaib serves both
    the covariance estimator and the pair-debiased field estimator.
    Accumulators over disjoint frame ranges merge with `+`.
    """

    def __init__(self, shape_a: Tuple[int, ...], shape_b: Tuple[int, ...]) -> None:
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        self.clear()

    def clear(self) -> None:
        """Reset for new frames"""
        full = self.shape_a + self.shape_b
        self.n_frames = 0
        self.sum_g = np.zeros(full, dtype=np.complex128)
        self._comp_g = np.zeros(full, dtype=np.complex128)
        self.sum_ia = np.zeros(self.shape_a)
        self.sum_ib = np.zeros(self.shape_b)
        self.sum_iaib = np.zeros(full)
        self._comp_iaib = np.zeros(full)

    def absorb(self, field_a: np.ndarray, field_b: np.ndarray) -> None:
        """Add a batch of frames; the batch axis is last on both fields."""
        n = field_a.shape[-1]
        if field_b.shape[-1] != n:
            raise ValueError("field batches differ in frame count")
        flat_a = field_a.reshape(-1, n)
        flat_b = field_b.reshape(-1, n)
        g = (np.conj(flat_a) @ flat_b.T).reshape(self.shape_a + self.shape_b)
        _kahan_add(self.sum_g, self._comp_g, g)
        ia, ib = np.abs(flat_a) ** 2, np.abs(flat_b) ** 2
        self.sum_ia += ia.sum(axis=1).reshape(self.shape_a)
        self.sum_ib += ib.sum(axis=1).reshape(self.shape_b)
        _kahan_add(self.sum_iaib, self._comp_iaib, (ia @ ib.T).reshape(self.shape_a + self.shape_b))
        self.n_frames += n

    def __add__(self, other: "CorrelationAccumulator") -> "CorrelationAccumulator":
        if (self.shape_a, self.shape_b) != (other.shape_a, other.shape_b):
            raise ValueError("cannot merge accumulators over different detector grids")
        merged = CorrelationAccumulator(self.shape_a, self.shape_b)
        merged.n_frames = self.n_frames + other.n_frames
        merged.sum_g = self.sum_g.copy()
        merged._comp_g = self._comp_g.copy()
        _kahan_add(merged.sum_g, merged._comp_g, other.sum_g - other._comp_g)
        merged.sum_ia = self.sum_ia + other.sum_ia
        merged.sum_ib = self.sum_ib + other.sum_ib
        merged.sum_iaib = self.sum_iaib.copy()
        merged._comp_iaib = self._comp_iaib.copy()
        _kahan_add(merged.sum_iaib, merged._comp_iaib, other.sum_iaib - other._comp_iaib)
        return merged

    def field_gamma(self) -> np.ndarray:
        """
        |<E_a* E_b>|^2 from distinct frame pairs only, unnormalized:
        (|sum g|^2 - sum |g|^2) / (n (n - 1)), clipped at zero.

        Dropping the i == j terms removes the <|g|^2> / n offset that the
        plain |mean g|^2 carries, so the error falls as 1/sqrt(n).
        """
        n = self.n_frames
        if n < 2:
            raise ValueError(f"the field estimator needs at least 2 frames, got {n}")
        total = self.sum_g - self._comp_g
        pairs = np.abs(total) ** 2 - (self.sum_iaib - self._comp_iaib)
        return np.clip(pairs / (n * (n - 1.0)), 0.0, None)

    def covariance_gamma(self) -> np.ndarray:
        """<Ia Ib> - <Ia><Ib>, unnormalized, clipped at zero."""
        if self.n_frames == 0:
            raise ValueError("no frames absorbed")
        n = self.n_frames
        mean_ia = self.sum_ia / n
        mean_ib = self.sum_ib / n
        outer = np.multiply.outer(mean_ia, mean_ib)
        return np.clip((self.sum_iaib - self._comp_iaib) / n - outer, 0.0, None)


def _accumulate_range(setup: OpticalSetup, kernels: Dict[str, list], composite_b: Optional[np.ndarray],
                      amplitude: np.ndarray, frames: range) -> CorrelationAccumulator:
    acc = CorrelationAccumulator(setup.grid_a.shape, setup.grid_b.shape)
    for start in range(frames.start, frames.stop, FRAMES_PER_BATCH):
        batch = range(start, min(start + FRAMES_PER_BATCH, frames.stop))
        sources = _source_fields(setup, amplitude, batch)
        field_a, field_b = _propagate_batch(kernels, composite_b, sources)
        acc.absorb(field_a, field_b)
    return acc


def accumulate_frames(setup: OpticalSetup, n_frames: int, start: int = 0,
                      n_jobs: Optional[int] = None) -> CorrelationAccumulator:
    """Absorb frames start .. start + n_frames - 1 into one accumulator."""
    if n_frames < 1:
        raise ValueError(f"n_frames must be >= 1, got {n_frames}")
    ensure_accepted(setup)
    kernels = arm_kernels(setup)
    composite_b = _composite_b_1d(kernels) if setup.mode == "1D" else None
    amplitude = np.sqrt(sample_source_intensity(setup.source, setup.grid_s))

    stop = start + n_frames
    tasks: List[range] = [range(i, min(i + FRAMES_PER_TASK, stop)) for i in range(start, stop, FRAMES_PER_TASK)]
    logger.info(f"Monte Carlo: {n_frames} frames from index {start} in {len(tasks)} task(s), "
                f"source lattice {setup.grid_s.shape}")
    parts = Parallel(n_jobs=parallel_jobs(n_jobs), prefer="threads")(
        delayed(_accumulate_range)(setup, kernels, composite_b, amplitude, frames)
        for frames in tasks
    )
    acc = parts[0]
    for part in parts[1:]:
        acc = acc + part
    logger.info(f"[OK] Absorbed {acc.n_frames} frames")
    return acc


def gamma_from_accumulator(acc: CorrelationAccumulator, setup: OpticalSetup,
                           estimator: str = "field") -> GammaTensor:
    """GammaTensor from the field estimator (default) or the intensity covariance."""
    if estimator == "field":
        raw, provenance = acc.field_gamma(), "monte-carlo"
    elif estimator == "covariance":
        raw, provenance = acc.covariance_gamma(), "intensity-covariance"
    else:
        raise ValueError(f"unknown estimator '{estimator}', expected 'field' or 'covariance'")
    return GammaTensor.from_raw(raw, setup.grid_a, setup.grid_b, provenance,
                                setup.z_a, setup.z_b, n_frames=acc.n_frames, seed=setup.seed)


def gamma_monte_carlo(setup: OpticalSetup, n_frames: int, estimator: str = "field",
                      n_jobs: Optional[int] = None) -> GammaTensor:
    acc = accumulate_frames(setup, n_frames, n_jobs=n_jobs)
    return gamma_from_accumulator(acc, setup, estimator)


def intensity_covariance_gamma(acc: CorrelationAccumulator, setup: OpticalSetup) -> GammaTensor:
    return gamma_from_accumulator(acc, setup, "covariance")
