"""
CPI I/O
=======

Experiment configuration (flat key = value text with # comments and unit
suffixes) and the artifact formats written by the cpi.py driver:

  * CPIG  - binary Gamma tensor (magic, version, mode, dims, grid metadata,
            distances, provenance, little-endian f64 values, rho_a outermost)
  * PGM   - 16-bit binary P5 images, peak-normalized
  * CSV   - metric rows (name, value, unit, formula_ref)
  * META  - key = value sidecar (config hash, seed, tool version, raw peak)

Every writer goes through a temporary file and an atomic rename.
"""

import hashlib
import logging
import os
import re
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from correlation_engine import GammaTensor, PROVENANCES
from optics_core import Grid, Grid1D, Grid2D, ImagePlane, axes_of
from scene import (ObjectModel, OpticalSetup, SetupValidationError, SourceModel,
                   build_setup, load_custom_mask, validate_setup)

# ============================================================================
# CONFIGURATION
# ============================================================================

TOOL_VERSION = "1.0.0"

CPIG_MAGIC = b"CPIG"
CPIG_VERSION = 1

UNITS = {"nm": 1e-9, "um": 1e-6, "mm": 1e-3, "m": 1.0}

LENGTH_KEYS = {
    "lambda", "z_a", "z_b", "pixel", "pixel_a", "pixel_b",
    "source_sigma", "source_radius", "source_center",
    "slit_width", "slit_separation", "slit_length", "object_center",
    "source_step", "source_half_extent", "object_step", "object_half_extent",
    "lens_focal", "lens_object_distance",
}
LENGTH_LIST_KEYS = {"refocus_targets"}
INT_KEYS = {"n_x", "n_u", "n_tot", "n_x_pi", "seed", "n_frames"}
FLOAT_KEYS = {"M"}
TEXT_KEYS = {"mode", "source_kind", "object_kind", "mask_file", "engine",
             "estimator", "interpolation", "export", "out_dir"}
KNOWN_KEYS = LENGTH_KEYS | LENGTH_LIST_KEYS | INT_KEYS | FLOAT_KEYS | TEXT_KEYS

REQUIRED_KEYS = ("lambda", "z_a", "z_b", "M", "pixel", "n_x", "n_u")

# Lengths that may be zero or negative (offsets)
SIGNED_LENGTH_KEYS = {"source_center", "object_center"}

ENGINES = ("analytic", "mc")
EXPORTS = ("cpig", "pgm", "csv")

_LINE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*?)\s*$")
_QUANTITY = re.compile(r"^([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*([A-Za-z]*)$")

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Configuration problems as (line number, message) pairs; line 0 means file-level."""

    def __init__(self, errors: List[Tuple[int, str]]):
        self.errors = list(errors)
        super().__init__("; ".join(f"line {n}: {msg}" if n else msg for n, msg in self.errors))


class FormatError(ValueError):
    """An artifact file is truncated, corrupt or of an unsupported version."""


# ============================================================================
# EXPERIMENT CONFIG
# ============================================================================

@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    setup: OpticalSetup
    engine: str = "analytic"
    n_frames: int = 10_000
    out_dir: str = "out"
    refocus_targets: Tuple[float, ...] = ()
    exports: Tuple[str, ...] = EXPORTS
    estimator: str = "field"
    interpolation: str = "linear"
    config_hash: str = ""
    values: Dict[str, object] = field(default_factory=dict)


def parse_length(text: str) -> float:
    """'500 nm' -> 5e-7; a bare number is meters."""
    match = _QUANTITY.match(text.strip())
    if not match:
        raise ValueError(f"cannot read length '{text}'")
    number, unit = match.groups()
    if unit and unit not in UNITS:
        raise ValueError(f"unit mismatch: '{unit}' is not a length unit (nm, um, mm, m)")
    return float(number) * UNITS.get(unit, 1.0)


def _parse_value(key: str, raw: str):
    if key in LENGTH_KEYS:
        value = parse_length(raw)
        if key not in SIGNED_LENGTH_KEYS and not value > 0:
            raise ValueError(f"{key}: positive length required, got {raw}")
        return value
    if key in LENGTH_LIST_KEYS:
        values = tuple(parse_length(part) for part in raw.split(",") if part.strip())
        if any(v <= 0 for v in values):
            raise ValueError(f"{key}: positive lengths required, got {raw}")
        return values
    if key in INT_KEYS:
        if not re.fullmatch(r"[-+]?\d+", raw):
            raise ValueError(f"{key}: integer expected (no unit), got '{raw}'")
        value = int(raw)
        if key == "seed" and not 0 <= value < 2 ** 64:
            raise ValueError(f"seed must fit in 64 bits, got {raw}")
        if key != "seed" and value < 1:
            raise ValueError(f"{key}: positive count required, got {raw}")
        return value
    if key in FLOAT_KEYS:
        match = _QUANTITY.match(raw)
        if not match or match.group(2):
            raise ValueError(f"unit mismatch: {key} is dimensionless, got '{raw}'")
        return float(match.group(1))
    return raw


def _read_pairs(text: str) -> Tuple[Dict[str, object], Dict[str, int], List[Tuple[int, str]]]:
    values, lines, errors = {}, {}, []
    for number, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        match = _LINE.match(content)
        if not match:
            errors.append((number, f"expected 'key = value', got '{content}'"))
            continue
        key, raw = match.groups()
        if key not in KNOWN_KEYS:
            errors.append((number, f"unknown key '{key}'"))
            continue
        if key in lines:
            errors.append((number, f"duplicate key '{key}' (first on line {lines[key]})"))
            continue
        lines[key] = number
        try:
            values[key] = _parse_value(key, raw)
        except ValueError as e:
            errors.append((number, str(e)))
    return values, lines, errors


def _axis(n: int, step: float, mode: str) -> Grid:
    g = Grid1D(n=n, step=step)
    return g if mode == "1D" else Grid2D(g, g)


def _integration_grid(values: Dict, prefix: str, center: float, mode: str) -> Optional[Grid]:
    step, half = values.get(f"{prefix}_step"), values.get(f"{prefix}_half_extent")
    if step is None or half is None:
        return None
    g = Grid1D.covering(half, step, center=center)
    return g if mode == "1D" else Grid2D(g, Grid1D.covering(half, step))


def _build(values: Dict, lines: Dict[str, int]) -> OpticalSetup:
    mode = values.get("mode", "1D")
    if mode not in ("1D", "2D"):
        raise ConfigError([(lines.get("mode", 0), f"mode must be 1D or 2D, got '{mode}'")])

    source_kind = values.get("source_kind", "gaussian")
    width = values.get("source_sigma") if source_kind == "gaussian" else values.get("source_radius", 0.0)
    source = SourceModel(kind=source_kind, width=width if width is not None else 0.6e-3,
                         center=values.get("source_center", 0.0))

    if "mask_file" in values:
        obj = load_custom_mask(values["mask_file"])
    else:
        obj = ObjectModel(kind=values.get("object_kind", "double-slit"),
                          slit_width=values.get("slit_width", 100e-6),
                          slit_separation=values.get("slit_separation", 400e-6),
                          center=values.get("object_center", 0.0),
                          slit_length=values.get("slit_length"))

    pixel = values["pixel"]
    grid_a = _axis(values["n_x"], values.get("pixel_a", pixel), mode)
    grid_b = _axis(values["n_u"], values.get("pixel_b", pixel), mode)
    return build_setup(
        wavelength=values["lambda"], z_a=values["z_a"], z_b=values["z_b"],
        magnification=values["M"], source=source, obj=obj,
        grid_a=grid_a, grid_b=grid_b,
        grid_s=_integration_grid(values, "source", values.get("source_center", 0.0), mode),
        grid_o=_integration_grid(values, "object", values.get("object_center", 0.0), mode),
        seed=values.get("seed", 0), n_tot=values.get("n_tot"), n_x_pi=values.get("n_x_pi"),
        pixel=pixel, lens_focal=values.get("lens_focal"),
        lens_object_distance=values.get("lens_object_distance"),
    )


def config_hash(text: str) -> str:
    """sha256 over the comment-free, whitespace-normalized lines."""
    lines = []
    for line in text.splitlines():
        content = line.split("#", 1)[0].strip()
        if content:
            lines.append(re.sub(r"\s+", " ", content))
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


def parse_config(text: str) -> ExperimentConfig:
    """Validated ExperimentConfig, or ConfigError listing every problem with its line."""
    values, lines, errors = _read_pairs(text)
    for key in REQUIRED_KEYS:
        if key not in lines:
            errors.append((0, f"missing required key '{key}'"))

    engine = values.get("engine", "analytic")
    if engine not in ENGINES:
        errors.append((lines.get("engine", 0), f"engine must be one of {ENGINES}, got '{engine}'"))
    n_frames = values.get("n_frames", 10_000)
    if engine == "mc" and n_frames < 2:
        errors.append((lines.get("n_frames", 0), "n_frames must be >= 2 for the mc engine"))
    exports = tuple(part.strip() for part in str(values.get("export", ",".join(EXPORTS))).split(","))
    for name in exports:
        if name not in EXPORTS:
            errors.append((lines.get("export", 0), f"unknown export format '{name}'"))
    if errors:
        raise ConfigError(errors)

    try:
        setup = _build(values, lines)
        report = validate_setup(setup)
    except SetupValidationError as e:
        raise ConfigError([(0, f"setup rejected: {v}") for v in e.violations])
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError([(0, f"setup rejected: {e}")])

    if not report.accepted:
        raise ConfigError([(0, f"setup rejected: {v}") for v in report.violations])

    return ExperimentConfig(
        setup=setup, engine=engine, n_frames=n_frames,
        out_dir=values.get("out_dir", "out"),
        refocus_targets=tuple(values.get("refocus_targets", ())),
        exports=exports,
        estimator=values.get("estimator", "field"),
        interpolation=values.get("interpolation", "linear"),
        config_hash=config_hash(text),
        values=values,
    )


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def apply_overrides(config: ExperimentConfig, seed: Optional[int] = None, engine: Optional[str] = None,
                    n_frames: Optional[int] = None, z_b: Optional[float] = None) -> ExperimentConfig:
    """Command-line overrides; a new z_b re-derives the integration grids."""
    setup = config.setup
    if z_b is not None:
        setup = setup.with_distances(z_b=z_b)
    if seed is not None:
        if not 0 <= seed < 2 ** 64:
            raise ConfigError([(0, f"seed must fit in 64 bits, got {seed}")])
        setup = setup.with_seed(seed)
    if engine is not None and engine not in ENGINES:
        raise ConfigError([(0, f"engine must be one of {ENGINES}, got '{engine}'")])
    if n_frames is not None and n_frames < 2:
        raise ConfigError([(0, "n_frames must be >= 2")])
    return replace(config, setup=setup,
                   engine=engine or config.engine,
                   n_frames=n_frames or config.n_frames)


# ============================================================================
# ATOMIC WRITES
# ============================================================================

def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


# ============================================================================
# CPIG TENSORS
# ============================================================================

_PROVENANCE_CODES = {name: code for code, name in enumerate(PROVENANCES)}


def encode_gamma(gamma: GammaTensor) -> bytes:
    mode = 1 if gamma.mode == "1D" else 2
    dims = gamma.values.shape
    header = CPIG_MAGIC + struct.pack("<HB", CPIG_VERSION, mode)
    header += struct.pack(f"<{len(dims)}I", *dims)
    for g in axes_of(gamma.grid_a) + axes_of(gamma.grid_b):
        header += struct.pack("<dd", g.step, g.center)
    header += struct.pack("<dd", gamma.z_a, gamma.z_b)
    header += struct.pack("<BQQd", _PROVENANCE_CODES[gamma.provenance],
                          gamma.n_frames, gamma.seed, gamma.scale)
    return header + np.ascontiguousarray(gamma.values, dtype="<f8").tobytes()


def decode_gamma(data: bytes) -> GammaTensor:
    view = memoryview(data)
    offset = 0

    def take(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(view):
            raise FormatError("CPIG file is truncated")
        out = struct.unpack_from(fmt, view, offset)
        offset += size
        return out

    if bytes(view[:4]) != CPIG_MAGIC:
        raise FormatError("not a CPIG file (bad magic)")
    offset = 4
    version, mode = take("<HB")
    if version != CPIG_VERSION:
        raise FormatError(f"unsupported CPIG version {version} (expected {CPIG_VERSION})")
    if mode not in (1, 2):
        raise FormatError(f"bad CPIG mode {mode}")
    rank = 2 * mode
    dims = take(f"<{rank}I")
    axes = []
    for n in dims:
        step, center = take("<dd")
        try:
            axes.append(Grid1D(n=n, step=step, center=center))
        except ValueError as e:
            raise FormatError(f"bad grid metadata: {e}")
    z_a, z_b = take("<dd")
    code, n_frames, seed, scale = take("<BQQd")
    if code >= len(PROVENANCES):
        raise FormatError(f"bad provenance code {code}")

    count = int(np.prod(dims))
    expected = offset + 8 * count
    if len(view) != expected:
        raise FormatError(f"CPIG payload has {len(view) - offset} bytes, expected {8 * count}")
    values = np.frombuffer(view, dtype="<f8", count=count, offset=offset).reshape(dims)

    if mode == 1:
        grid_a, grid_b = axes
    else:
        grid_a, grid_b = Grid2D(axes[0], axes[1]), Grid2D(axes[2], axes[3])
    try:
        return GammaTensor(values=values.astype(float), grid_a=grid_a, grid_b=grid_b,
                           provenance=PROVENANCES[code], z_a=z_a, z_b=z_b,
                           n_frames=n_frames, seed=seed, scale=scale)
    except (ValueError, FloatingPointError) as e:
        raise FormatError(f"invalid CPIG content: {e}")


def write_gamma(path: Union[str, Path], gamma: GammaTensor) -> None:
    _atomic_write(Path(path), encode_gamma(gamma))


def read_gamma(path: Union[str, Path]) -> GammaTensor:
    with open(path, "rb") as fh:
        return decode_gamma(fh.read())


# ============================================================================
# IMAGES, METRICS, SIDECARS
# ============================================================================

def encode_pgm(values: np.ndarray) -> bytes:
    """P5, maxval 65535, big-endian samples; rows are the second array axis."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        rows = values[None, :]
    elif values.ndim == 2:
        rows = values.T
    else:
        raise ValueError(f"PGM export needs a 1-D or 2-D array, got {values.ndim}-D")
    peak = rows.max() if rows.size else 0.0
    scaled = rows / peak if peak > 0 else rows
    pixels = np.rint(np.clip(scaled, 0.0, 1.0) * 65535).astype(">u2")
    height, width = pixels.shape
    return f"P5\n{width} {height}\n65535\n".encode("ascii") + pixels.tobytes()


def write_pgm(path: Union[str, Path], image: Union[ImagePlane, np.ndarray]) -> None:
    values = image.values if isinstance(image, ImagePlane) else image
    _atomic_write(Path(path), encode_pgm(values))


def metrics_frame(rows: Iterable[Dict]) -> pd.DataFrame:
    return pd.DataFrame(list(rows), columns=["name", "value", "unit", "formula_ref"])


def write_frame_csv(path: Union[str, Path], df: pd.DataFrame) -> pd.DataFrame:
    payload = df.to_csv(index=False, float_format="%.10g", lineterminator="\n")
    _atomic_write(Path(path), payload.encode("utf-8"))
    return df


def write_metrics_csv(path: Union[str, Path], rows: Iterable[Dict]) -> pd.DataFrame:
    return write_frame_csv(path, metrics_frame(rows))


def write_sidecar(artifact: Union[str, Path], config: ExperimentConfig, **extra) -> Path:
    """<artifact>.meta with config hash, seed and tool version (plus extras)."""
    artifact = Path(artifact)
    entries = {
        "artifact": artifact.name,
        "config_hash": config.config_hash,
        "seed": config.setup.seed,
        "tool_version": TOOL_VERSION,
    }
    entries.update(extra)
    text = "".join(f"{key} = {value}\n" for key, value in entries.items())
    meta = artifact.with_name(artifact.name + ".meta")
    _atomic_write(meta, text.encode("utf-8"))
    return meta


def read_sidecar(path: Union[str, Path]) -> Dict[str, str]:
    entries = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if "=" in line:
                key, value = line.split("=", 1)
                entries[key.strip()] = value.strip()
    return entries
