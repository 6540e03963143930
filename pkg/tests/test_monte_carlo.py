import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from correlation_engine import gamma_analytic
from monte_carlo import (CorrelationAccumulator, _source_fields, accumulate_frames, arm_kernels, frame_phases,
                         gamma_from_accumulator, gamma_monte_carlo, generate_speckle_frame,
                         intensity_covariance_gamma, mean_intensity, mix64)
from refocus import tensor_residual
from scene import SourceModel, sample_source_intensity

from conftest import make_setup


@pytest.fixture(scope="module")
def small():
    """Narrow source, 64 x 64 detectors."""
    setup = make_setup(source=SourceModel("gaussian", 20e-6), seed=7)
    return setup, gamma_analytic(setup)


@given(seed=st.integers(min_value=0, max_value=2 ** 64 - 1),
       frame=st.integers(min_value=0, max_value=2 ** 40))
def test_mix64_stays_in_64_bits(seed, frame):
    assert 0 <= mix64(seed, frame) < 2 ** 64


def test_frame_phases_are_reproducible_and_distinct():
    a = frame_phases(5, 12, (100,))
    np.testing.assert_array_equal(a, frame_phases(5, 12, (100,)))
    assert not np.array_equal(a, frame_phases(5, 13, (100,)))
    assert not np.array_equal(a, frame_phases(6, 12, (100,)))
    assert a.min() >= 0 and a.max() < 2 * np.pi


def test_speckle_frame_is_deterministic(small):
    setup, _ = small
    a1, b1 = generate_speckle_frame(setup, 3)
    a2, b2 = generate_speckle_frame(setup, 3)
    np.testing.assert_array_equal(a1.values, a2.values)
    np.testing.assert_array_equal(b1.values, b2.values)
    a3, _ = generate_speckle_frame(setup, 4)
    assert not np.array_equal(a1.values, a3.values)


def test_mean_intensity_matches_frame_average(small):
    """Averaging |E|^2 over many frames approaches the quadrature mean intensity."""
    setup, _ = small
    acc = accumulate_frames(setup, 2000)
    for arm, total in (("a", acc.sum_ia), ("b", acc.sum_ib)):
        expected = mean_intensity(setup, arm)
        measured = total / acc.n_frames
        assert np.linalg.norm(measured - expected) / np.linalg.norm(expected) < 0.1


def test_arm_kernel_shapes(small):
    setup, _ = small
    kernels = arm_kernels(setup)
    assert kernels["a"][0].shape == (setup.grid_a.n, setup.grid_s.n)
    assert kernels["forward"][0].shape == (setup.grid_o.n, setup.grid_s.n)
    assert kernels["imaging"][0].shape == (setup.grid_b.n, setup.grid_o.n)


def test_accumulation_is_independent_of_worker_count(small):
    setup, _ = small
    one = accumulate_frames(setup, 5000, n_jobs=1)
    many = accumulate_frames(setup, 5000, n_jobs=4)
    assert one.n_frames == many.n_frames == 5000
    np.testing.assert_array_equal(one.sum_g, many.sum_g)
    np.testing.assert_array_equal(one.sum_iaib, many.sum_iaib)


def test_merge_is_associative_and_matches_a_single_pass(small):
    setup, _ = small
    parts = [accumulate_frames(setup, 100, start=s) for s in (0, 100, 200)]
    left = (parts[0] + parts[1]) + parts[2]
    right = parts[0] + (parts[1] + parts[2])
    whole = accumulate_frames(setup, 300)
    for acc in (left, right):
        assert acc.n_frames == 300
        np.testing.assert_allclose(acc.field_gamma(), whole.field_gamma(),
                                   rtol=1e-12, atol=1e-12 * whole.field_gamma().max())
        np.testing.assert_allclose(acc.covariance_gamma(), whole.covariance_gamma(),
                                   rtol=1e-9, atol=1e-10 * whole.covariance_gamma().max())


def test_accumulator_guards():
    acc = CorrelationAccumulator((3,), (2,))
    with pytest.raises(ValueError):
        acc.field_gamma()
    with pytest.raises(ValueError):
        acc.covariance_gamma()
    with pytest.raises(ValueError):
        acc + CorrelationAccumulator((3,), (4,))
    with pytest.raises(ValueError):
        acc.absorb(np.ones((3, 2)), np.ones((2, 3)))
    acc.absorb(np.ones((3, 1)), np.ones((2, 1)))
    with pytest.raises(ValueError, match="at least 2 frames"):
        acc.field_gamma()
    acc.clear()
    acc.absorb(np.ones((3, 5)), np.ones((2, 5)))
    assert acc.n_frames == 5
    np.testing.assert_allclose(acc.field_gamma(), np.ones((3, 2)))
    acc.clear()
    assert acc.n_frames == 0


def test_rerun_gives_identical_gamma(small):
    setup, _ = small
    first = gamma_monte_carlo(setup, 500)
    second = gamma_monte_carlo(setup, 500)
    np.testing.assert_array_equal(first.values, second.values)
    assert first.provenance == "monte-carlo"
    assert first.n_frames == 500 and first.seed == 7
    other = gamma_monte_carlo(setup.with_seed(8), 500)
    assert not np.array_equal(first.values, other.values)


def test_field_estimator_converges_to_analytic(small):
    setup, analytic = small
    coarse = tensor_residual(gamma_monte_carlo(setup, 1000), analytic)
    fine = tensor_residual(gamma_monte_carlo(setup, 10_000), analytic)
    assert fine < coarse
    assert 2.0 <= coarse / fine <= 4.5


@pytest.mark.slow
def test_monte_carlo_error_falls_as_inverse_root_n(small):
    """Each decade of frames cuts the error by about sqrt(10), down to 5% or better by 1e5 frames."""
    setup, analytic = small
    errors = [tensor_residual(gamma_monte_carlo(setup, n), analytic) for n in (1000, 10_000, 100_000)]
    for coarse, fine in zip(errors, errors[1:]):
        assert 2.21 <= coarse / fine <= 4.11
    assert min(errors) <= 0.05


def test_covariance_estimator_tracks_field_estimator(small):
    """<Ia Ib> - <Ia><Ib> follows |G1|^2; equal phasor amplitudes bias it, so only loosely."""
    setup, analytic = small
    acc = accumulate_frames(setup, 4000)
    field = gamma_from_accumulator(acc, setup, "field")
    covariance = intensity_covariance_gamma(acc, setup)
    assert covariance.provenance == "intensity-covariance"
    assert covariance.values.min() >= 0
    assert tensor_residual(covariance, analytic) < 1.0
    assert tensor_residual(field, analytic) < tensor_residual(covariance, analytic)
    with pytest.raises(ValueError):
        gamma_from_accumulator(acc, setup, "median")


def test_single_frame_sum_is_rank_one(small):
    setup, _ = small
    field_a, field_b = generate_speckle_frame(setup, 0)
    acc = accumulate_frames(setup, 1)
    product = np.abs(acc.sum_g) ** 2
    np.testing.assert_allclose(product, np.outer(field_a.intensity(), field_b.intensity()),
                               rtol=1e-9, atol=1e-12 * product.max())
    np.testing.assert_allclose(acc.sum_iaib, product, rtol=1e-9, atol=1e-12 * product.max())


def test_two_frame_estimate_keeps_only_the_cross_term(small):
    """With two frames the field estimator is Re(g0* g1): the |g0|^2 and |g1|^2 terms cancel."""
    setup, _ = small
    g = []
    for i in (0, 1):
        field_a, field_b = generate_speckle_frame(setup, i)
        g.append(np.multiply.outer(np.conj(field_a.values), field_b.values))
    acc = accumulate_frames(setup, 2)
    expected = np.clip(np.real(np.conj(g[0]) * g[1]), 0.0, None)
    scale = np.abs(g[0]).max() * np.abs(g[1]).max()
    np.testing.assert_allclose(acc.field_gamma(), expected, rtol=0, atol=1e-9 * scale)


def test_speckle_intensity_is_exponential():
    """Many random phasors: intensity at a point has mean / std close to 1."""
    setup = make_setup(source=SourceModel("gaussian", 0.1e-3), seed=11)
    kernels = arm_kernels(setup)
    amplitude = np.sqrt(sample_source_intensity(setup.source, setup.grid_s))
    sources = _source_fields(setup, amplitude, range(4000))
    intensity = np.abs(kernels["a"][0][32] @ sources) ** 2
    assert intensity.mean() / intensity.std() == pytest.approx(1.0, abs=0.05)
