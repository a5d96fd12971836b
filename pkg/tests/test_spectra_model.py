# -*- coding: utf-8 -*-
"""Тесты аналитических полиспектров."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from markov_core import MarkovModel, MeasurementOperator
from spectra_model import (_g_prime_solve, analytic_s1, analytic_s2, analytic_s3, analytic_s4, analytic_spectrum,
                           build_cache, g_prime, model_values, s4_quadrature)
from spectra_est import nominal_grid
from wtd import equiv_model

F2 = np.linspace(0.0, 4000.0, 64)
F3 = (np.linspace(0.0, 2000.0, 24), np.linspace(0.0, 2000.0, 24))
F4 = (np.linspace(0.0, 4000.0, 24), np.linspace(0.0, 4000.0, 24))


def _all_spectra(model, grids=(F2, F3, F4)):
    s2_grid, s3_grid, s4_grid = grids
    return (analytic_s2(model, grid=s2_grid).values, analytic_s3(model, grid=s3_grid).values,
            analytic_s4(model, grid=s4_grid).values)


def test_two_state_s2_is_lorentzian(two_state):
    g01, g10 = 1000.0, 500.0
    total = g01 + g10
    omega = 2 * np.pi * F2
    expected = 2 * g01 * g10 / total * 1.0 / (total ** 2 + omega ** 2)
    assert_allclose(analytic_s2(two_state, grid=F2).values, expected, rtol=1e-10)


def test_s2_noise_floor(two_state):
    base = analytic_s2(two_state, grid=F2)
    floored = analytic_s2(two_state, grid=F2, noise_floor=True)
    assert_allclose(floored.values - base.values, 0.25)
    assert floored.meta['noise_floor'] == 0.25


def test_g_prime_at_zero_frequency():
    gamma = 250.0
    model = MarkovModel(2, {(0, 1): gamma, (1, 0): gamma}, (0.0, 1.0))
    cache = build_cache(model)
    projector = np.array([[0.5, -0.5], [-0.5, 0.5]])
    assert_allclose(g_prime(cache, 0.0), projector / (2 * gamma), atol=1e-15)
    omega = 2 * np.pi * 300.0
    assert_allclose(g_prime(cache, -omega), np.conj(g_prime(cache, omega)))
    assert_allclose(g_prime(cache, omega), _g_prime_solve(cache, omega), atol=1e-15)
    norms = [np.linalg.norm(g_prime(cache, 2 * np.pi * f)) for f in (0.0, 100.0, 1000.0, 10000.0)]
    assert all(a > b for a, b in zip(norms, norms[1:]))


def test_s1_is_mean_level(model1):
    assert analytic_s1(model1) == pytest.approx(0.874, abs=1e-3)
    flat = model1.with_levels((0.7, 0.7, 0.7))
    assert analytic_s1(flat) == pytest.approx(0.7)
    assert float(analytic_spectrum(model1, 1, ()).values) == pytest.approx(analytic_s1(model1))


def test_symmetric_telegraph_has_no_s3():
    model = MarkovModel(2, {(0, 1): 700.0, (1, 0): 700.0}, (-0.5, 0.5))
    s3 = analytic_s3(model, grid=F3)
    s4 = analytic_s4(model, grid=F4)
    assert np.abs(s4.values).max() > 0
    assert_allclose(s3.values, 0.0, atol=1e-16)


def test_s3_changes_sign_with_levels(model1):
    inverted = model1.with_levels((0.0, -1.0, -1.0))
    assert_allclose(analytic_s3(inverted, grid=F3).values, -analytic_s3(model1, grid=F3).values, rtol=1e-9)
    assert_allclose(analytic_s4(inverted, grid=F4).values, analytic_s4(model1, grid=F4).values, rtol=1e-9)


def test_s3_is_symmetric(model4):
    s3 = analytic_s3(model4, grid=F3)
    assert_allclose(s3.values, s3.values.T, rtol=1e-9, atol=1e-30)
    assert s3.meta['imag_ratio'] < 1e-9


@pytest.mark.parametrize('order, power', [(2, 4), (3, 6), (4, 8)])
def test_beta_scaling(model1, order, power):
    grid = {2: F2, 3: F3, 4: F4}[order]
    cache_1 = build_cache(model1, MeasurementOperator.from_model(model1, 1.0))
    cache_2 = build_cache(model1, MeasurementOperator.from_model(model1, 2.0))
    assert_allclose(model_values(cache_2, order, grid), 2 ** power * model_values(cache_1, order, grid),
                    rtol=1e-9, atol=1e-30)


def test_unmeasured_system_has_no_spectra(model1):
    cache = build_cache(model1, MeasurementOperator.from_model(model1, 0.0))
    assert_allclose(model_values(cache, 2, F2), 0.0)
    assert_allclose(model_values(cache, 4, F4), 0.0)


def test_single_state_model_is_flat():
    model = MarkovModel(1, {}, (0.3,))
    assert analytic_s1(model) == pytest.approx(0.3)
    assert_allclose(analytic_s2(model, grid=F2).values, 0.0)
    assert_allclose(analytic_s3(model, grid=F3).values, 0.0)
    assert_allclose(analytic_s4(model, grid=F4).values, 0.0)


def test_s4_closed_form_matches_quadrature(two_state):
    cache = build_cache(two_state)
    closed = model_values(cache, 4, (np.array([37.0]), np.array([113.0])))[0, 0]
    numeric = s4_quadrature(cache, 37.0, 113.0)
    assert abs(closed - numeric) <= 1e-6 * abs(closed)


def test_equivalent_models_have_identical_spectra(equiv_params):
    axis = np.linspace(0.0, 5000.0, 64)
    grids = (axis, nominal_grid(3, 5000.0, 5000.0 / 63), (axis, axis))
    reference = _all_spectra(equiv_model(equiv_params, 1), grids)
    for which in (2, 3, 4):
        spectra = _all_spectra(equiv_model(equiv_params, which), grids)
        for mine, theirs in zip(spectra, reference):
            scale = np.abs(theirs).max()
            assert np.abs(mine - theirs).max() <= 1e-9 * scale


def test_level_shift_leaves_higher_orders(model1):
    shifted = model1.with_levels((2.0, 3.0, 3.0))
    for mine, theirs in zip(_all_spectra(shifted), _all_spectra(model1)):
        assert_allclose(mine, theirs, rtol=1e-8, atol=1e-12 * np.abs(theirs).max())
    assert analytic_s1(shifted) == pytest.approx(analytic_s1(model1) + 2.0)


def test_state_relabeling_leaves_spectra(model4):
    relabeled = model4.relabel([2, 0, 1])
    for mine, theirs in zip(_all_spectra(relabeled), _all_spectra(model4)):
        assert_allclose(mine, theirs, rtol=1e-8, atol=1e-12 * np.abs(theirs).max())


def test_coherent_model_spectrum_is_even():
    coupling = 2 * np.pi * 100.0
    model = MarkovModel(2, {(0, 1): 300.0, (1, 0): 300.0}, (0.0, 1.0),
                        hamiltonian=[[0.0, coupling], [coupling, 0.0]])
    f = np.linspace(-1000.0, 1000.0, 41)
    s2 = analytic_s2(model, grid=f)
    assert np.all(np.isfinite(s2.values))
    assert_allclose(s2.values, s2.values[::-1], rtol=1e-8)


def test_nominal_grid_drives_model_spectra(model1):
    grid = nominal_grid(3, 1000.0, 50.0)
    s3 = analytic_spectrum(model1, 3, grid)
    assert s3.values.shape == (len(grid[0]), len(grid[1]))
    assert np.all(s3.variance == 0)
