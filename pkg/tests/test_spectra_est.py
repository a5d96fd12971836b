# -*- coding: utf-8 -*-
"""Тесты оценки полиспектров по сигналу."""

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import stats

from errors import ConfigError, GridMismatch, NyquistViolation, TooFewParts, TraceTooShort
from spectra_est import (EstimationConfig, SpectrumEstimate, background_subtract, c2_estimator, c3_estimator,
                         c4_estimator, estimate_polyspectrum, estimate_variance, make_window, nominal_grid,
                         part_variance)
from trace_sim import DetectorTrace

DT = 1e-3
SIGMA = 0.5


@pytest.fixture(scope='module')
def white_trace():
    rng = np.random.default_rng(2024)
    return DetectorTrace(rng.normal(0.0, SIGMA, 200000), DT, noise_sigma=SIGMA)


@pytest.fixture(scope='module')
def cfg():
    return EstimationConfig(f_max=500.0, f_resolution=10.0, window='acg', segments_per_frame=10)


def _within(spectrum, expected, n_sigma=3.0):
    mask = spectrum.fit_mask()
    deviation = np.abs(spectrum.values - expected)[mask]
    return np.mean(deviation <= n_sigma * np.sqrt(spectrum.variance[mask]))


@pytest.mark.parametrize('kind', ['acg', 'hann', 'rect'])
def test_window_normalization(kind):
    window = make_window(kind, 400, 2.5e-6)
    assert np.sum(window ** 2) * 2.5e-6 == pytest.approx(1.0)


def test_white_noise_s2_is_flat(white_trace, cfg):
    s2 = estimate_polyspectrum(white_trace, 2, cfg, threads=1)
    floor = SIGMA ** 2 * DT
    assert _within(s2, floor) >= 0.97
    assert np.mean(s2.values[1:]) == pytest.approx(floor, rel=0.02)
    assert s2.grid[0][1] == pytest.approx(10.0)
    assert s2.grid[0][-1] <= 500.0


def test_white_noise_s3_vanishes(white_trace, cfg):
    s3 = estimate_polyspectrum(white_trace, 3, cfg, threads=2)
    assert s3.values.shape == (len(s3.grid[0]), len(s3.grid[1]))
    assert_allclose(s3.values, s3.values.T)
    assert _within(s3, 0.0) >= 0.98


def test_white_noise_s4_vanishes(white_trace, cfg):
    s4 = estimate_polyspectrum(white_trace, 4, cfg, threads=2)
    assert _within(s4, 0.0) >= 0.97


def test_s1_is_mean():
    rng = np.random.default_rng(5)
    trace = DetectorTrace(1.5 + rng.normal(0.0, 0.1, 50000), DT)
    s1 = estimate_polyspectrum(trace, 1, EstimationConfig(f_max=500.0, f_resolution=10.0), threads=1)
    assert s1.grid == ()
    assert float(s1.values) == pytest.approx(1.5, abs=0.005)


def test_constant_signal_has_no_fluctuations(cfg):
    trace = DetectorTrace(np.full(20000, 2.0), DT)
    s2 = estimate_polyspectrum(trace, 2, cfg, threads=1)
    assert_allclose(s2.values, 0.0, atol=1e-10)
    assert_allclose(s2.variance, 0.0, atol=1e-18)


def test_part_variance_of_two_parts():
    a, b = 3.0, 7.0
    assert part_variance([[a], [b]])[0] == pytest.approx((a - b) ** 2 / 2)
    with pytest.raises(TooFewParts):
        part_variance([[a]])


def test_estimate_variance_matches_frame_spread(white_trace, cfg):
    s2 = estimate_polyspectrum(white_trace, 2, cfg, threads=1)
    per_part = estimate_variance(white_trace, 2, cfg, 4, threads=1)
    mask = s2.fit_mask()
    assert np.mean(per_part[mask] / 4) == pytest.approx(np.mean(s2.variance[mask]), rel=0.35)
    with pytest.raises(TooFewParts):
        estimate_variance(white_trace, 2, cfg, 1)


def test_background_subtraction(white_trace, cfg):
    s2 = estimate_polyspectrum(white_trace, 2, cfg, threads=1)
    clean = background_subtract(s2, s2)
    assert_allclose(clean.values, 0.0)
    assert_allclose(clean.variance, 2 * s2.variance)
    assert clean.meta['background_subtracted']

    other = EstimationConfig(f_max=500.0, f_resolution=20.0)
    coarse = estimate_polyspectrum(white_trace, 2, other, threads=1)
    with pytest.raises(GridMismatch):
        background_subtract(s2, coarse)


def test_nyquist_violation(white_trace):
    with pytest.raises(NyquistViolation):
        estimate_polyspectrum(white_trace, 2, EstimationConfig(f_max=600.0, f_resolution=10.0))


def test_trace_too_short(cfg):
    trace = DetectorTrace(np.zeros(150), DT)
    with pytest.raises(TraceTooShort):
        estimate_polyspectrum(trace, 2, cfg)


def test_short_trace_reduces_segments_per_frame(cfg):
    messages = []
    trace = DetectorTrace(np.random.default_rng(1).normal(size=1000), DT)
    s2 = estimate_polyspectrum(trace, 2, cfg, threads=1, log_callback=messages.append)
    assert s2.meta['segments_per_frame'] == 5
    assert s2.meta['n_frames'] == 2
    assert any('Окон в кадре' in line for line in messages)


def test_overlap_is_dropped_for_higher_orders(white_trace):
    cfg = EstimationConfig(f_max=500.0, f_resolution=10.0, segment_overlap=0.5)
    s2 = estimate_polyspectrum(white_trace, 2, cfg, threads=1, log_callback=lambda line: None)
    s3 = estimate_polyspectrum(white_trace, 3, cfg, threads=1, log_callback=lambda line: None)
    assert s2.meta['segment_overlap'] == 0.5
    assert s3.meta['segment_overlap'] == 0.0


@pytest.mark.parametrize('kwargs', [
    {'f_resolution': 0.0},
    {'f_resolution': 600.0, 'f_max': 500.0},
    {'segment_overlap': 1.0},
    {'window': 'blackman'},
    {'segments_per_frame': 1},
])
def test_invalid_estimation_config(kwargs):
    with pytest.raises(ConfigError):
        EstimationConfig(**kwargs)


def test_nominal_grid_shapes():
    (f,) = nominal_grid(2, 100.0, 10.0)
    assert_allclose(f, np.arange(11) * 10.0)
    f1, f2 = nominal_grid(3, 100.0, 10.0)
    assert len(f1) == 5 and f1[-1] + f2[-1] <= 100.0
    assert nominal_grid(1, 100.0, 10.0) == ()


def test_fit_mask_and_subsample():
    f = np.arange(6) * 10.0
    values = np.ones(6)
    variance = np.array([1.0, 1.0, 0.0, 1.0, np.nan, 1.0])
    spectrum = SpectrumEstimate(2, (f,), values, variance)
    assert spectrum.fit_mask().tolist() == [False, True, False, True, False, True]
    thinned = spectrum.subsample(2)
    assert_allclose(thinned.grid[0], [0.0, 20.0, 40.0])
    assert thinned.meta['grid_stride'] == 2
    assert spectrum.subsample(1) is spectrum


# --- кумулянты против прямых сумм ---

def _k3(x, y, z):
    m = len(x)
    return m / ((m - 1) * (m - 2)) * np.sum((x - x.mean()) * (y - y.mean()) * (z - z.mean()))


def _k4(x, y, z, w):
    m = len(x)
    cx, cy, cz, cw = (v - v.mean() for v in (x, y, z, w))
    pairs = (np.sum(cx * cy) * np.sum(cz * cw) + np.sum(cx * cz) * np.sum(cy * cw)
             + np.sum(cx * cw) * np.sum(cy * cz))
    return m / ((m - 1) * (m - 2) * (m - 3)) * ((m + 1) * np.sum(cx * cy * cz * cw) - (m - 1) / m * pairs)


def _complex(rng, *shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


def test_c3_estimator_matches_direct_sums(rng):
    a1, a2, a3 = _complex(rng, 3, 12), _complex(rng, 4, 12), _complex(rng, 3, 4, 12)
    c3 = c3_estimator(a1, a2, a3)
    expected = np.array([[_k3(a1[i], a2[j], a3[i, j]) for j in range(4)] for i in range(3)])
    assert_allclose(c3, expected, rtol=1e-12)


def test_c4_estimator_matches_direct_sums(rng):
    x, z = _complex(rng, 3, 12), _complex(rng, 4, 12)
    c4 = c4_estimator(x, z)
    expected = np.array([[_k4(x[i], np.conj(x[i]), z[j], np.conj(z[j])) for j in range(4)] for i in range(3)])
    assert_allclose(c4, expected, rtol=1e-12)


def test_estimators_reduce_to_kstat_on_real_data(rng):
    x = rng.exponential(size=40)
    assert c2_estimator(x[None, :])[0].real == pytest.approx(stats.kstat(x, 2), rel=1e-12)
    assert c3_estimator(x[None, :], x[None, :], x[None, None, :])[0, 0].real == pytest.approx(
        stats.kstat(x, 3), rel=1e-10)
    assert c4_estimator(x[None, :], x[None, :])[0, 0].real == pytest.approx(stats.kstat(x, 4), rel=1e-10)


def test_part_variance_scales_with_part_length(white_trace, cfg):
    s2 = estimate_polyspectrum(white_trace, 2, cfg, threads=1)
    mask = s2.fit_mask()
    long_parts = estimate_variance(white_trace, 2, cfg, 16, threads=1)
    short_parts = estimate_variance(white_trace, 2, cfg, 64, threads=1)
    assert np.mean(short_parts[mask]) / np.mean(long_parts[mask]) == pytest.approx(4.0, rel=0.2)
