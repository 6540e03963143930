"""
CPI Experiment Driver
=====================

Runs correlation plenoptic imaging experiments from a key = value config:

  simulate   Gamma tensor + incoherent image + source map + metrics
  refocus    refocused image (and optional z_b sweep) from a CPIG tensor
  analyze    DOF / resolution report of the configured sensor budget
  psf        point-object focused image and its fitted width

Every artifact is written next to a .meta sidecar (config hash, seed, tool
version). Identical (config, seed) pairs give identical artifact bytes.

Usage:
    python cpi.py simulate --config configs/double_slit.cfg --out out/focused
    python cpi.py simulate --config configs/double_slit.cfg --zb 50mm --out out/defocused
    python cpi.py refocus --config configs/double_slit.cfg --gamma out/defocused/gamma.cpig --out out/refocused
    python cpi.py analyze --config configs/double_slit.cfg --out out/report
"""

import argparse
import logging
import os
import sys
from datetime import datetime
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from analysis import (BudgetError, analysis_rows, fit_psf_sigma, fresnel_number, ghost_psf_sigma,
                      measure_image, metrics_rows)
from correlation_engine import (GammaTensor, gamma_analytic, incoherent_image,
                                source_image_map)
from cpi_io import (ConfigError, ExperimentConfig, FormatError, apply_overrides, load_config,
                    parse_length, read_gamma, write_frame_csv, write_gamma, write_metrics_csv,
                    write_pgm, write_sidecar)
from monte_carlo import gamma_monte_carlo
from optics_core import Grid1D, Grid2D, ImagePlane, SamplingError, axes_of
from refocus import RefocusParams, RefocusRangeError, refocus_integrate, refocus_sweep
from scene import ObjectModel, OpticalSetup, SetupValidationError, build_setup

# ============================================================================
# CONFIGURATION
# ============================================================================

LOG_LEVEL = os.getenv("CPI_LOG_LEVEL", "INFO").upper()

# Detector grid of the psf subcommand, relative to the expected PSF width
PSF_SAMPLES = 101
PSF_SAMPLES_PER_SIGMA = 5

logger = logging.getLogger("cpi")

# ============================================================================
# LOGGING SETUP
# ============================================================================


def setup_logging(out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    log_file = out_dir / f"cpi_{datetime.now().strftime('%Y%m%d_%H%M%S')}.log"
    logging.basicConfig(
        level=getattr(logging, LOG_LEVEL, logging.INFO),
        format="%(asctime)s - %(levelname)s - %(message)s",
        handlers=[
            logging.FileHandler(log_file),
            logging.StreamHandler()
        ],
        force=True,
    )
    return log_file

# ============================================================================
# FUNCTIONS
# ============================================================================


def compute_gamma(config: ExperimentConfig, setup: Optional[OpticalSetup] = None) -> GammaTensor:
    setup = setup or config.setup
    if config.engine == "mc":
        return gamma_monte_carlo(setup, config.n_frames, estimator=config.estimator)
    return gamma_analytic(setup)


def _write_image(path: Path, image: ImagePlane, config: ExperimentConfig) -> None:
    write_pgm(path, image)
    write_sidecar(path, config, raw_peak=f"{image.scale:.17g}")


def _write_csv(path: Path, rows, config: ExperimentConfig) -> None:
    write_metrics_csv(path, rows)
    write_sidecar(path, config)


def run_simulate(config: ExperimentConfig, out_dir: Path) -> Dict[str, Path]:
    """Gamma, incoherent image, source map and metrics for the configured setup."""
    setup = config.setup
    focused = setup.z_a == setup.z_b
    logger.info("=" * 80)
    logger.info(f"SIMULATE ({config.engine}, {setup.mode}, z_a={setup.z_a:.4g} m, z_b={setup.z_b:.4g} m)")
    logger.info("=" * 80)

    logger.info(f"[1/4] Computing Gamma on {setup.grid_a.shape} x {setup.grid_b.shape} detector pixels...")
    gamma = compute_gamma(config)
    logger.info(f"[OK] Gamma ready ({gamma.provenance}, raw peak {gamma.scale:.4g})")

    logger.info("[2/4] Deriving images...")
    image = incoherent_image(gamma)
    # source map through the brightest D_a pixel
    peak = np.unravel_index(int(np.argmax(image.values)), image.values.shape)
    rho_a0 = tuple(g.coords()[i] for g, i in zip(axes_of(setup.grid_a), peak))
    source_map = source_image_map(gamma, rho_a0[0] if setup.mode == "1D" else rho_a0)

    logger.info("[3/4] Measuring...")
    prefix = "focused" if focused else "defocused"
    rows = metrics_rows(prefix, measure_image(image, reference=setup.obj))
    rows += metrics_rows("source_map", measure_image(source_map))
    rows += analysis_rows(setup, setup.budget())
    sweep = None
    if config.refocus_targets:
        sweep = refocus_sweep(gamma, config.refocus_targets, setup.magnification,
                              reference=setup.obj, interpolation=config.interpolation)

    logger.info(f"[4/4] Writing artifacts to {out_dir}...")
    paths: Dict[str, Path] = {}
    if "cpig" in config.exports:
        paths["gamma"] = out_dir / "gamma.cpig"
        write_gamma(paths["gamma"], gamma)
        write_sidecar(paths["gamma"], config, raw_peak=f"{gamma.scale:.17g}")
    if "pgm" in config.exports:
        paths["image"] = out_dir / f"{prefix}.pgm"
        paths["source_map"] = out_dir / "source_map.pgm"
        _write_image(paths["image"], image, config)
        _write_image(paths["source_map"], source_map, config)
    if "csv" in config.exports:
        paths["metrics"] = out_dir / "metrics.csv"
        _write_csv(paths["metrics"], rows, config)
        if sweep is not None:
            paths["sweep"] = out_dir / "refocus_sweep.csv"
            write_frame_csv(paths["sweep"], sweep)
            write_sidecar(paths["sweep"], config)
    logger.info("[OK] Simulation complete")
    return paths


def run_refocus(config: ExperimentConfig, gamma_path: Path, out_dir: Path,
                z_b: Optional[float] = None) -> Dict[str, Path]:
    """Refocused image of a stored tensor; nothing is written unless every step succeeds."""
    logger.info("=" * 80)
    logger.info(f"REFOCUS {gamma_path}")
    logger.info("=" * 80)

    logger.info("[1/3] Reading Gamma...")
    gamma = read_gamma(gamma_path)
    params = RefocusParams.for_gamma(gamma, config.setup.magnification, z_b=z_b,
                                     interpolation=config.interpolation)
    logger.info(f"[OK] {gamma.provenance} tensor, z_a={gamma.z_a:.4g} m, z_b={gamma.z_b:.4g} m "
                f"-> target z_b={params.z_b:.4g} m")

    detail = config.setup.obj.smallest_detail
    n_f = fresnel_number(detail, config.setup.wavelength, gamma.z_a, gamma.z_b)
    if n_f < 1.0:
        logger.warning(f"[WARN] Fresnel number {n_f:.3g} of a {detail:.3g} m detail at the stored "
                       "defocus is below 1; D_b pixels blur it by diffraction and the refocused "
                       "image will not recover it")

    logger.info("[2/3] Refocusing and measuring...")
    image = refocus_integrate(gamma, params)
    rows = metrics_rows("refocused", measure_image(image, reference=config.setup.obj))
    rows.append({"name": "defocus_fresnel_number", "value": n_f, "unit": "1",
                 "formula_ref": "d^2*z_a/(lambda*z_b*|z_b-z_a|)"})
    sweep = None
    if config.refocus_targets:
        sweep = refocus_sweep(gamma, config.refocus_targets, config.setup.magnification,
                              reference=config.setup.obj, interpolation=config.interpolation)

    logger.info(f"[3/3] Writing artifacts to {out_dir}...")
    paths = {"image": out_dir / "refocused.pgm", "metrics": out_dir / "refocus_metrics.csv"}
    _write_image(paths["image"], image, config)
    _write_csv(paths["metrics"], rows, config)
    if sweep is not None:
        paths["sweep"] = out_dir / "refocus_sweep.csv"
        write_frame_csv(paths["sweep"], sweep)
        write_sidecar(paths["sweep"], config)
    logger.info("[OK] Refocus complete")
    return paths


def run_analyze(config: ExperimentConfig, out_dir: Path) -> Dict[str, Path]:
    """DOF and resolution report; needs n_tot and n_x_pi in the config."""
    setup = config.setup
    logger.info("[1/2] Evaluating figures of merit...")
    budget = setup.budget()
    if budget is None:
        raise BudgetError("analyze needs n_tot and n_x_pi in the config")
    rows = analysis_rows(setup, budget)
    for row in rows:
        logger.info(f"  {row['name']:<32} {row['value']:.6g} {row['unit']}")

    logger.info(f"[2/2] Writing report to {out_dir}...")
    path = out_dir / "analysis.csv"
    _write_csv(path, rows, config)
    logger.info("[OK] Analysis complete")
    return {"analysis": path}


def point_object_setup(setup: OpticalSetup) -> OpticalSetup:
    """Focused setup (z_b = z_a) with a point object and a D_a grid finer than the PSF."""
    if setup.source.kind != "gaussian":
        raise ConfigError([(0, "psf needs a gaussian source")])
    sigma = ghost_psf_sigma(setup.wavelength, setup.z_a, setup.source.width)
    g_a = Grid1D(n=PSF_SAMPLES, step=sigma / PSF_SAMPLES_PER_SIGMA)
    # a point object makes Gamma flat along D_b; three pixels are enough
    g_b = Grid1D(n=3, step=axes_of(setup.grid_b)[0].step)
    grid_a, grid_b = (g_a, g_b) if setup.mode == "1D" else (Grid2D(g_a, g_a), Grid2D(g_b, g_b))
    return build_setup(
        wavelength=setup.wavelength, z_a=setup.z_a, z_b=setup.z_a,
        magnification=setup.magnification, source=setup.source,
        obj=ObjectModel(kind="point"), grid_a=grid_a, grid_b=grid_b,
        seed=setup.seed, pixel=setup.pixel,
    )


def run_psf(config: ExperimentConfig, out_dir: Path) -> Dict[str, Path]:
    """Focused point-object image, its fitted width and the closed-form width."""
    logger.info("[1/3] Building point-object setup...")
    setup = point_object_setup(config.setup)
    expected = ghost_psf_sigma(setup.wavelength, setup.z_a, setup.source.width)

    logger.info("[2/3] Computing Gamma and fitting the PSF...")
    image = incoherent_image(compute_gamma(config, setup))
    measured = fit_psf_sigma(image)
    if measured is None:
        logger.warning("[WARN] PSF fit did not converge")
    else:
        logger.info(f"[OK] PSF sigma {measured:.4e} m (closed form {expected:.4e} m, "
                    f"ratio {measured / expected:.4f})")
    rows = [
        {"name": "psf_sigma", "value": measured, "unit": "m", "formula_ref": "gaussian fit"},
        {"name": "psf_sigma_closed_form", "value": expected, "unit": "m",
         "formula_ref": "z_b/(sqrt(2)*sigma*k)"},
        {"name": "psf_sigma_ratio", "value": None if measured is None else measured / expected,
         "unit": "1", "formula_ref": "fit/closed form"},
    ]

    logger.info(f"[3/3] Writing artifacts to {out_dir}...")
    paths = {"image": out_dir / "psf.pgm", "metrics": out_dir / "psf.csv"}
    _write_image(paths["image"], image, config)
    _write_csv(paths["metrics"], rows, config)
    logger.info("[OK] PSF complete")
    return paths


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Correlation plenoptic imaging simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("simulate", "compute Gamma, images and metrics"),
                            ("refocus", "refocus a stored Gamma tensor"),
                            ("analyze", "DOF / resolution report"),
                            ("psf", "point-object focused image and PSF width")):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="key = value experiment file")
        cmd.add_argument("--out", default=None, help="output directory (overrides out_dir)")
        cmd.add_argument("--seed", type=int, default=None, help="64-bit seed (overrides config)")
        cmd.add_argument("--engine", choices=("analytic", "mc"), default=None)
        cmd.add_argument("--frames", type=int, default=None, help="Monte Carlo frame count")
        cmd.add_argument("--zb", default=None, help="object distance, e.g. 50mm")
        if name == "refocus":
            cmd.add_argument("--gamma", default=None, help="CPIG tensor (default <out>/gamma.cpig)")
    return parser


def run(args: argparse.Namespace) -> Dict[str, Path]:
    config = load_config(args.config)
    z_b = parse_length(args.zb) if args.zb is not None else None
    # for refocus, --zb is the target; the stored tensor keeps its own geometry
    config = apply_overrides(config, seed=args.seed, engine=args.engine, n_frames=args.frames,
                             z_b=None if args.command == "refocus" else z_b)
    out_dir = Path(args.out or config.out_dir)

    if args.command == "simulate":
        return run_simulate(config, out_dir)
    if args.command == "refocus":
        gamma_path = Path(args.gamma) if args.gamma else out_dir / "gamma.cpig"
        return run_refocus(config, gamma_path, out_dir, z_b=z_b)
    if args.command == "analyze":
        return run_analyze(config, out_dir)
    return run_psf(config, out_dir)

# ============================================================================
# ENTRY POINT
# ============================================================================


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    log_file = setup_logging(Path(args.out or "."))
    started = datetime.now()
    try:
        paths = run(args)
        for name, path in paths.items():
            logger.info(f"  ✓ {name}: {path}")
        return 0
    except ConfigError as e:
        for line, message in e.errors:
            logger.error(f"[ERROR] config line {line}: {message}" if line else f"[ERROR] config: {message}")
        return 1
    except (FormatError, RefocusRangeError, SetupValidationError, SamplingError,
            BudgetError, FloatingPointError, ValueError, OSError) as e:
        logger.error(f"[ERROR] {args.command} failed: {e}")
        return 1
    except Exception:
        logger.exception(f"[ERROR] {args.command} failed unexpectedly")
        raise
    finally:
        logger.info(f"Finished {args.command} in {(datetime.now() - started).total_seconds():.1f}s "
                    f"(log: {log_file})")


if __name__ == "__main__":
    sys.exit(main())
