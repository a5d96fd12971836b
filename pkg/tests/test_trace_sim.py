# -*- coding: utf-8 -*-
"""Тесты trace_sim: точные траектории, отрисовка сигнала, ансамбли."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from errors import AbsorbingState, EmptyRecord
from markov_core import MarkovModel, build_liouvillian, steady_state
from trace_sim import (JumpRecord, level_record, noise_trace, occupation_fractions, render_trace, sigma_for_beta,
                       simulate_ensemble, simulate_jumps, simulate_trace, white_noise_floor)


def test_two_state_holding_times():
    model = MarkovModel(2, {(0, 1): 100.0, (1, 0): 100.0}, (0.0, 1.0))
    jumps = simulate_jumps(model, 200.0, seed=7)
    durations, states = jumps.dwell_times()
    inner = slice(1, -1)
    for state in (0, 1):
        mean = durations[inner][states[inner] == state].mean()
        assert mean == pytest.approx(0.01, rel=0.03)


def test_path_invariants(model1):
    jumps = simulate_jumps(model1, 2.0, seed=3)
    assert np.all(np.diff(jumps.times) > 0)
    assert jumps.times[0] > 0 and jumps.times[-1] < 2.0
    assert np.all(np.diff(jumps.states) != 0)
    gamma = model1.rate_matrix()
    assert np.all(gamma[jumps.states[:-1], jumps.states[1:]] > 0)


def test_occupation_matches_steady_state(model1):
    jumps = simulate_jumps(model1, 300.0, seed=11)
    expected = steady_state(build_liouvillian(model1)).probabilities
    assert_allclose(occupation_fractions(jumps, 3), expected, atol=0.01)


def test_single_state_is_absorbing():
    model = MarkovModel(1, {}, (0.0,))
    with pytest.raises(AbsorbingState):
        simulate_jumps(model, 1.0, seed=0)


def test_same_seed_same_path(model1):
    first = simulate_jumps(model1, 0.5, seed=42)
    second = simulate_jumps(model1, 0.5, seed=42)
    assert_array_equal(first.times, second.times)
    assert_array_equal(first.states, second.states)


def test_constant_path_renders_constant_level(two_state):
    jumps = JumpRecord(np.array([]), np.array([0]), 0.01)
    trace = render_trace(jumps, two_state, 1e-4, 0.0, seed=1)
    assert len(trace.samples) == 100
    assert_array_equal(trace.samples, np.full(100, two_state.levels[0]))


def test_rendering_is_time_average(two_state):
    # скачок 0 -> 1 посередине второго отсчёта
    jumps = JumpRecord(np.array([1.5e-3]), np.array([0, 1]), 4e-3)
    trace = render_trace(jumps, two_state, 1e-3, 0.0, seed=1)
    assert_allclose(trace.samples, [0.0, 0.5, 1.0, 1.0], atol=1e-12)


def test_rendering_is_linear_in_levels(model1):
    jumps = simulate_jumps(model1, 0.05, seed=5)
    shifted = model1.with_levels([level + 2.5 for level in model1.levels])
    base = render_trace(jumps, model1, 2.5e-6, 0.0, seed=5)
    moved = render_trace(jumps, shifted, 2.5e-6, 0.0, seed=5)
    assert_allclose(moved.samples - base.samples, 2.5, atol=1e-9)


def test_noise_free_histogram_weights(two_state):
    trace = simulate_trace(two_state, 20.0, 2e-6, 0.0, seed=9)
    p0, p1 = steady_state(build_liouvillian(two_state)).probabilities
    at_low = np.mean(trace.samples < 0.01)
    at_high = np.mean(trace.samples > 0.99)
    assert at_low == pytest.approx(p0, abs=0.015)
    assert at_high == pytest.approx(p1, abs=0.015)
    assert at_low + at_high > 0.99


def test_noise_has_requested_sigma(two_state):
    jumps = JumpRecord(np.array([]), np.array([1]), 0.1)
    trace = render_trace(jumps, two_state, 1e-5, 0.3, seed=4)
    assert trace.samples.mean() == pytest.approx(1.0, abs=0.01)
    assert trace.samples.std() == pytest.approx(0.3, rel=0.02)


def test_too_short_record_is_empty(two_state):
    with pytest.raises(EmptyRecord):
        render_trace(JumpRecord(np.array([]), np.array([0]), 1e-4), two_state, 1e-4, 0.0, seed=0)
    with pytest.raises(EmptyRecord):
        JumpRecord(np.array([0.1]), np.array([0]), 1.0)


def test_ensemble_singleton_matches_simulate_trace(two_state):
    single = simulate_ensemble(two_state, 0.05, 1e-5, 0.1, count=1, seed=21)[0]
    direct = simulate_trace(two_state, 0.05, 1e-5, 0.1, seed=21)
    assert_array_equal(single.samples, direct.samples)


def test_ensemble_is_deterministic_and_distinct(two_state):
    first = simulate_ensemble(two_state, 0.05, 1e-5, 0.1, count=3, seed=2, threads=2)
    second = simulate_ensemble(two_state, 0.05, 1e-5, 0.1, count=3, seed=2, threads=1)
    for a, b in zip(first, second):
        assert_array_equal(a.samples, b.samples)
    assert not np.array_equal(first[0].samples, first[1].samples)
    assert not np.array_equal(first[1].samples, first[2].samples)


def test_ensembles_of_neighbouring_seeds_do_not_overlap(two_state):
    five = simulate_ensemble(two_state, 0.05, 1e-5, 0.1, count=2, seed=5)
    six = simulate_ensemble(two_state, 0.05, 1e-5, 0.1, count=2, seed=6)
    assert not np.array_equal(five[1].samples, six[0].samples)
    assert_array_equal(five[1].samples, simulate_trace(two_state, 0.05, 1e-5, 0.1, seed=5, member=1).samples)
    assert five[1].meta == {'seed': 5, 'member': 1}
    assert five[0].meta == {'seed': 5}


def test_level_transitions_balance(model1):
    levels = level_record(simulate_jumps(model1, 1.0, seed=13), model1)
    steps = np.diff(levels.states)
    assert abs(np.sum(steps == 1) - np.sum(steps == -1)) <= 1
    assert np.all(steps != 0)


def test_noise_floor_helpers():
    dt = 2.5e-6
    sigma = sigma_for_beta(1.0, dt)
    assert white_noise_floor(sigma, dt) == pytest.approx(0.25)
    assert white_noise_floor(0.3, 1e-3) == pytest.approx(0.09e-3)


def test_background_trace_is_independent_of_signal_noise(two_state):
    background = noise_trace(0.1, 1e-5, 0.2, seed=3)
    signal = render_trace(JumpRecord(np.array([]), np.array([0]), 0.1), two_state, 1e-5, 0.2, seed=3)
    assert background.samples.std() == pytest.approx(0.2, rel=0.02)
    assert not np.allclose(background.samples, signal.samples)
