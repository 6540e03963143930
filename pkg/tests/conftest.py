import numpy as np
import pytest

from optics_core import Grid1D, Grid2D
from scene import ObjectModel, SourceModel, build_setup

WAVELENGTH = 500e-9
Z = 10e-3
M = 0.8
SIGMA = 0.6e-3
DELTA = 32e-6


def make_setup(n_a=64, n_b=64, pixel_a=DELTA, pixel_b=DELTA, z_a=Z, z_b=Z,
               source=None, obj=None, mode="1D", magnification=M, **kwargs):
    """Small detector version of the double-slit experiment."""
    g_a = Grid1D(n=n_a, step=pixel_a)
    g_b = Grid1D(n=n_b, step=pixel_b)
    if mode == "2D":
        g_a, g_b = Grid2D(g_a, g_a), Grid2D(g_b, g_b)
    return build_setup(
        wavelength=WAVELENGTH, z_a=z_a, z_b=z_b, magnification=magnification,
        source=source or SourceModel("gaussian", SIGMA),
        obj=obj or ObjectModel("double-slit", 100e-6, 400e-6),
        grid_a=g_a, grid_b=g_b, **kwargs,
    )


@pytest.fixture
def setup_factory():
    return make_setup


@pytest.fixture
def focused_setup():
    return make_setup()


@pytest.fixture
def coherent_setup():
    """Narrow source: few source samples, so Monte Carlo runs are cheap."""
    return make_setup(source=SourceModel("gaussian", 20e-6), seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


DOUBLE_SLIT_CONFIG = """\
# double slit, 1-D
lambda = 500 nm
z_a = 10 mm
z_b = 10 mm
M = 0.8
source_kind = gaussian
source_sigma = 0.6 mm
object_kind = double-slit
slit_width = 100 um
slit_separation = 400 um
mode = 1D
pixel = 32 um
n_x = 150
n_u = 150
n_tot = 300
n_x_pi = 150
seed = 1
"""


@pytest.fixture
def double_slit_text():
    return DOUBLE_SLIT_CONFIG


SMALL_CONFIG = """\
lambda = 500 nm
z_a = 10 mm
z_b = 10 mm
M = 0.8
source_kind = gaussian
source_sigma = 20 um
object_kind = double-slit
slit_width = 100 um
slit_separation = 400 um
mode = 1D
pixel = 32 um
n_x = 32
n_u = 32
seed = 3
n_frames = 300
"""


@pytest.fixture
def small_config_file(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL_CONFIG, encoding="utf-8")
    return path
