# -*- coding: utf-8 -*-
"""Тесты WTD: детектирование скачков, замкнутые формы, эквивалентные модели, факторизация."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import integrate, stats

from conftest import MODEL1_RATES, MODEL4_RATES, random_three_state
from errors import ConfigError, LevelsTooClose, NegativeDerivedRate, NoDwells, NonConvergence
from fit_select import get_topology
from markov_core import MarkovModel
from trace_sim import DetectorTrace, JumpRecord, level_record, simulate_jumps, simulate_trace
from wtd import (COUNTEREXAMPLE_SEED, EquivParams, WtdHistogram, analytic_wtd, detect_jumps, dwell_samples,
                 empirical_wtd, equiv_model, factorization_check, factorization_counterexample, fit_model_wtd,
                 fit_wtd, multi_time_wtd, search_factorization_counterexample)

TAU = np.geomspace(1e-5, 1e-1, 200)


def _telegraph(dwell_samples_count, n_dwells, dt=1e-4, start=0):
    states = (np.arange(n_dwells) + start) % 2
    return DetectorTrace(np.repeat(states.astype(float), dwell_samples_count), dt)


def _mixture_hist(fraction, rate1, rate2, n, seed):
    rng = np.random.default_rng(seed)
    slow = rng.random(n) < fraction
    tau = np.where(slow, rng.exponential(1 / rate1, n), rng.exponential(1 / rate2, n))
    counts, edges = np.histogram(tau, bins=50)
    return WtdHistogram(edges, counts, 'high', n, tau)


# --- детектирование и гистограммы ---

def test_detect_jumps_on_clean_telegraph():
    jumps = detect_jumps(_telegraph(100, 10), 0.0, 1.0)
    assert_array_equal(jumps.states, np.arange(10) % 2)
    assert_allclose(jumps.times, np.arange(1, 10) * 0.01)
    durations, _ = jumps.dwell_times()
    assert_allclose(durations[1:-1], 0.01)


def test_detect_jumps_rejects_overlapping_thresholds():
    with pytest.raises(LevelsTooClose):
        detect_jumps(_telegraph(10, 4), 0.0, 1.0, hysteresis_fraction=0.5)
    with pytest.raises(LevelsTooClose):
        detect_jumps(_telegraph(10, 4), 1.0, 1.0)


def test_empirical_wtd_drops_truncated_dwells():
    jumps = JumpRecord(np.array([0.5, 1.5, 2.5, 3.5, 4.5, 6.5]) * 1e-3, np.array([1, 0, 1, 0, 1, 0, 1]), 8e-3)
    edges = np.array([0.0, 1.5, 3.0]) * 1e-3
    low = empirical_wtd(jumps, 'low', edges)
    high = empirical_wtd(jumps, 'high', edges)
    assert low.counts.tolist() == [2, 1]
    assert high.counts.tolist() == [2, 0]
    assert low.total_dwells == 3
    assert_allclose(np.sum(low.density() * np.diff(edges)), 1.0)


def test_empirical_wtd_needs_dwells():
    jumps = JumpRecord(np.array([1e-3]), np.array([0, 1]), 2e-3)
    with pytest.raises(NoDwells):
        empirical_wtd(jumps, 'low', 10)
    with pytest.raises(ConfigError):
        empirical_wtd(jumps, 'middle', 10)


def test_detection_at_good_snr(model1):
    true_levels = level_record(simulate_jumps(model1, 1.0, seed=31), model1)
    trace = simulate_trace(model1, 1.0, 1e-6, 1.0 / 6.0, seed=31)
    detected = detect_jumps(trace, 0.0, 1.0)
    assert detected.n_jumps == pytest.approx(true_levels.n_jumps, rel=0.02)
    true_low = dwell_samples(true_levels, 'low').mean()
    assert dwell_samples(detected, 'low').mean() == pytest.approx(true_low, rel=0.02)


def test_detection_fails_at_poor_snr(model1):
    true_levels = level_record(simulate_jumps(model1, 0.2, seed=32), model1)
    messages = []
    trace = simulate_trace(model1, 0.2, 1e-6, 1.0, seed=32)
    detected = detect_jumps(trace, 0.0, 1.0, log_callback=messages.append)
    assert abs(detected.n_jumps - true_levels.n_jumps) > 0.2 * true_levels.n_jumps
    assert any('ненадёжно' in line for line in messages)


# --- аналитические формы ---

def test_two_state_is_mono_exponential(two_state):
    w_low, w_high = analytic_wtd(two_state)
    assert w_low.form == 'mono' and w_low.decay_rates == (1000.0,)
    assert w_high.form == 'mono' and w_high.decay_rates == (500.0,)
    assert_allclose(w_high.density(TAU), 500.0 * np.exp(-500.0 * TAU))


def test_model1_high_level_closed_form(model1):
    w_low, w_high = analytic_wtd(model1)
    assert w_low.form == 'mono'
    assert w_low.decay_rates == pytest.approx((5115.0,))
    assert w_high.form == 'bi'
    total = 953.0 + 54.0 + 185.0
    root = np.sqrt(total ** 2 - 4 * 953.0 * 185.0)
    assert w_high.decay_rates == pytest.approx(((total - root) / 2, (total + root) / 2))
    numeric = analytic_wtd(model1, numeric=True)[1]
    assert_allclose(w_high.density(TAU), numeric.density(TAU), rtol=1e-8)


@pytest.mark.parametrize('level', [0, 1])
def test_densities_are_normalized(model1, level):
    w = analytic_wtd(model1)[level]
    assert w.normalization() == pytest.approx(1.0)
    area, _ = integrate.quad(lambda t: float(w.density(t)), 0, 40.0 / min(w.decay_rates), limit=200)
    assert area == pytest.approx(1.0, rel=1e-6)


def test_closed_forms_match_matrix_exponential(rng):
    for _ in range(50):
        model = random_three_state(rng)
        closed = analytic_wtd(model)
        numeric = analytic_wtd(model, numeric=True)
        tau = np.geomspace(1e-6, 5.0 / min(model.rates.values()), 20)
        for mine, theirs in zip(closed, numeric):
            expected = theirs.density(tau)
            assert_allclose(mine.density(tau), expected, rtol=1e-9, atol=1e-12 * np.abs(expected).max())


def test_exact_dwells_follow_analytic_wtd(model1):
    jumps = simulate_jumps(model1, 30.0, seed=17)
    w_low, w_high = analytic_wtd(model1)
    for tag, w in (('low', w_low), ('high', w_high)):
        dwells = dwell_samples(jumps, tag, model=model1)
        assert len(dwells) > 1000
        assert stats.kstest(dwells, w.cdf).pvalue > 0.001


# --- эквивалентные модели ---

@pytest.mark.parametrize('which, expected', [(1, MODEL1_RATES), (4, MODEL4_RATES)])
def test_equiv_model_reproduces_reference_rates(equiv_params, which, expected):
    model = equiv_model(equiv_params, which)
    assert set(model.rates) == set(expected)
    for edge, rate in expected.items():
        assert model.rate(*edge) == pytest.approx(rate, rel=0.01)


def test_equivalent_models_share_wtds(equiv_params):
    reference = analytic_wtd(equiv_model(equiv_params, 1))
    for which in (2, 3, 4):
        wtds = analytic_wtd(equiv_model(equiv_params, which))
        for mine, theirs in zip(wtds, reference):
            assert_allclose(mine.density(TAU), theirs.density(TAU), rtol=1e-9)


def test_equiv_model_edge_cases():
    for which in (1, 2, 3, 4):
        equiv_model(EquivParams(5115.0, 68.0, 173.0, 0.0), which)
    with pytest.raises(NegativeDerivedRate):
        equiv_model(EquivParams(100.0, 68.0, 173.0, 332.0), 4)
    with pytest.raises(ConfigError):
        equiv_model(EquivParams(5115.0, 68.0, 173.0, 332.0), 5)


# --- факторизация ---

def test_three_state_wtds_factorize(rng):
    for _ in range(20):
        report = factorization_check(random_three_state(rng))
        assert report.factorizes(1e-9), report.per_sequence


def test_two_state_wtds_factorize(two_state):
    assert factorization_check(two_state).max_deviation <= 1e-12


def test_chain_with_single_gateway_factorizes():
    rates = {(0, 1): 300.0, (1, 0): 200.0, (1, 2): 900.0, (2, 1): 400.0, (2, 3): 50.0, (3, 2): 700.0}
    model = MarkovModel(4, rates, (0.0, 0.0, 1.0, 1.0))
    assert factorization_check(model).factorizes(1e-9)


def test_frozen_counterexample_comes_from_seeded_search():
    model = factorization_counterexample()
    found, deviation = search_factorization_counterexample(COUNTEREXAMPLE_SEED)
    assert found.rates == model.rates
    assert deviation > 1e-3
    report = factorization_check(model)
    assert report.max_deviation > 1e-3
    assert len(report.worst_sequence) >= 2


def test_search_reports_best_deviation_when_nothing_found():
    model, deviation = search_factorization_counterexample(5, attempts=3, threshold=np.inf)
    assert model is None
    assert 0.0 < deviation < np.inf


def test_two_speed_level_pairs_break_factorization():
    # быстрая пара 0↔2, медленная 1↔3, слабая связь внутри уровней
    rates = {(0, 2): 1000.0, (2, 0): 1000.0, (1, 3): 10.0, (3, 1): 10.0,
             (0, 1): 5.0, (1, 0): 5.0, (2, 3): 5.0, (3, 2): 5.0}
    model = MarkovModel(4, rates, (0.0, 0.0, 1.0, 1.0))
    assert factorization_check(model).max_deviation > 1e-3


def test_multi_time_wtd_single_interval_matches_analytic(model1):
    single = multi_time_wtd(model1, ('high',), [TAU])
    assert_allclose(single, analytic_wtd(model1)[1].density(TAU), rtol=1e-8)
    with pytest.raises(ConfigError):
        multi_time_wtd(model1, ('high', 'high'), [TAU, TAU])


# --- подгонка ---

def test_fit_mono_exponential():
    rng = np.random.default_rng(3)
    tau = rng.exponential(1e-3, 10000)
    counts, edges = np.histogram(tau, bins=40)
    fit = fit_wtd(WtdHistogram(edges, counts, 'low', len(tau), tau), form='mono')
    assert fit.params['rate'] == pytest.approx(1000.0, abs=30.0)
    assert fit.covariance[0, 0] == pytest.approx(fit.params['rate'] ** 2 / 10000)


def test_fit_bi_exponential():
    try:
        fit = fit_wtd(_mixture_hist(0.3, 500.0, 5000.0, 20000, seed=8), form='bi')
    except NonConvergence as e:
        fit = e.best
    assert fit.params['fraction'] == pytest.approx(0.3, abs=0.05)
    assert fit.params['rate1'] == pytest.approx(500.0, rel=0.1)
    assert fit.params['rate2'] == pytest.approx(5000.0, rel=0.1)
    assert not fit.degenerate
    assert fit.analytic.normalization() == pytest.approx(1.0)


def test_bi_fit_on_mono_data_is_degenerate():
    rng = np.random.default_rng(4)
    tau = rng.exponential(1e-3, 5000)
    counts, edges = np.histogram(tau, bins=40)
    hist = WtdHistogram(edges, counts, 'low', len(tau), tau)
    try:
        fit = fit_wtd(hist, form='bi', log_callback=lambda line: None)
    except NonConvergence as e:
        fit = e.best
    assert fit.degenerate


def test_fit_model_wtd_reaches_likelihood_of_truth(model1):
    jumps = simulate_jumps(model1, 10.0, seed=23)
    low = dwell_samples(jumps, 'low', model=model1)
    high = dwell_samples(jumps, 'high', model=model1)
    topology = get_topology('m1')
    truth = [MODEL1_RATES[edge] for edge in topology.edges]
    w_low, w_high = analytic_wtd(model1)
    truth_ll = np.sum(np.log(w_low.density(low))) + np.sum(np.log(w_high.density(high)))

    result = fit_model_wtd(low, high, topology, [1.3 * r for r in truth], seed=1)
    assert result['log_likelihood'] >= truth_ll - 1.0
    assert result['rates'][(0, 1)] == pytest.approx(5115.0, rel=0.05)
