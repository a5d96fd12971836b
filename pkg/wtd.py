#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Распределения времён ожидания (WTD) двухуровневого сигнала.

- detect_jumps: триггер Шмитта по зашумлённому сигналу
- empirical_wtd: гистограмма времён пребывания (с сырыми временами для подгонки)
- analytic_wtd: замкнутые формы для трёх состояний, матричная экспонента для N состояний
- equiv_model: четыре трёхуровневые модели с одинаковыми WTD и спектрами
- fit_wtd: ML-подгонка одной или двух экспонент по сырым временам
- multi_time_wtd / factorization_check: многовременные WTD и их факторизация

Метки уровней: 0 / 'low' - нижний, 1 / 'high' - верхний.
"""

from dataclasses import dataclass, field
from itertools import product

import numpy as np
from scipy import linalg, optimize, special

from config_manager import log_message
from errors import (LevelsTooClose, NoDwells, NegativeDerivedRate, NonConvergence, NotTwoLevel,
                    ConfigError)
from markov_core import MarkovModel, build_liouvillian, steady_state, jump_partition, MARKOV
from trace_sim import JumpRecord, level_record

LEVEL_TAGS = {'low': 0, 'high': 1, 0: 0, 1: 1}
GAMMA_DEGENERATE = 1e-9
COUNTEREXAMPLE_SEED = 2024


def level_index(level_tag):
    try:
        return LEVEL_TAGS[level_tag]
    except KeyError:
        raise ConfigError(f'Уровень должен быть low/high (или 0/1), получено {level_tag!r}') from None


def level_name(level):
    return 'low' if level_index(level) == 0 else 'high'


@dataclass(frozen=True, eq=False)
class WtdHistogram:
    """
    Гистограмма времён пребывания на уровне; dwells - сырые времена для подгонки.
    """
    bin_edges: np.ndarray
    counts: np.ndarray
    level_tag: str
    total_dwells: int
    dwells: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, 'bin_edges', np.asarray(self.bin_edges, dtype=float))
        object.__setattr__(self, 'counts', np.asarray(self.counts, dtype=int))
        if np.any(np.diff(self.bin_edges) <= 0):
            raise ConfigError('Границы бинов должны возрастать')
        if int(self.counts.sum()) != self.total_dwells:
            raise ConfigError(f'Сумма счётчиков {self.counts.sum()} != total_dwells {self.total_dwells}')

    @property
    def centers(self):
        return (self.bin_edges[:-1] + self.bin_edges[1:]) / 2

    def density(self):
        """Нормированная плотность по бинам."""
        widths = np.diff(self.bin_edges)
        total = max(self.total_dwells, 1)
        return self.counts / (total * widths)


@dataclass(frozen=True, eq=False)
class WtdAnalytic:
    """
    Плотность w(τ) = Σ A_k e^{-r_k τ} (form 'mono' / 'bi')
    или численная плотность через матричную экспоненту (form 'numeric').

    wtd_weight - относительный вес α = A₂/A₁ второй экспоненты (для 'bi').
    """
    form: str
    decay_rates: tuple = ()
    amplitudes: tuple = ()
    level_tag: str = ''
    evaluator: object = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, 'decay_rates', tuple(float(r) for r in self.decay_rates))
        object.__setattr__(self, 'amplitudes', tuple(float(a) for a in self.amplitudes))
        if self.form == 'numeric':
            if self.evaluator is None:
                raise ConfigError('Численная WTD требует evaluator')
            return
        expected = {'mono': 1, 'bi': 2}.get(self.form)
        if expected is None:
            raise ConfigError(f'Неизвестная форма WTD {self.form!r}')
        if len(self.decay_rates) != expected or len(self.amplitudes) != expected:
            raise ConfigError(f'Форма {self.form} требует {expected} скоростей и амплитуд')
        if min(self.decay_rates) <= 0:
            raise ConfigError(f'Скорости спада должны быть положительны: {self.decay_rates}')

    @property
    def wtd_weight(self):
        if self.form != 'bi':
            return None
        first, second = self.amplitudes
        return second / first if first != 0 else np.inf

    def density(self, tau):
        tau = np.asarray(tau, dtype=float)
        if self.form == 'numeric':
            return self.evaluator(tau)
        rates = np.asarray(self.decay_rates)
        amps = np.asarray(self.amplitudes)
        return np.tensordot(amps, np.exp(-np.multiply.outer(rates, tau)), axes=1)

    def cdf(self, tau):
        if self.form == 'numeric':
            raise ConfigError('cdf доступна только для замкнутых форм')
        tau = np.asarray(tau, dtype=float)
        rates = np.asarray(self.decay_rates)
        amps = np.asarray(self.amplitudes)
        return np.tensordot(amps / rates, 1 - np.exp(-np.multiply.outer(rates, tau)), axes=1)

    def normalization(self):
        return float(sum(a / r for a, r in zip(self.amplitudes, self.decay_rates)))


@dataclass(frozen=True)
class EquivParams:
    """Параметры (a, b, c, d) в Гц семейства эквивалентных трёхуровневых моделей."""
    a: float
    b: float
    c: float
    d: float


@dataclass(frozen=True, eq=False)
class WtdFit:
    """Результат ML-подгонки WTD."""
    analytic: WtdAnalytic
    covariance: np.ndarray
    params: dict
    log_likelihood: float
    n_dwells: int
    degenerate: bool = False
    converged: bool = True


@dataclass(frozen=True, eq=False)
class FactorizationReport:
    """Отклонение многовременных WTD от произведения одновременных."""
    max_deviation: float
    per_sequence: dict
    worst_sequence: tuple

    def factorizes(self, tolerance=1e-9):
        return self.max_deviation <= tolerance


# --- детектирование скачков и эмпирические WTD ---

def detect_jumps(trace, low_level, high_level, hysteresis_fraction=0.25, log_callback=None):
    """
    Триггер Шмитта с порогами low + hΔ и high - hΔ.

    Args:
        trace (DetectorTrace): Сигнал
        low_level, high_level (float): Уровни
        hysteresis_fraction (float): h

    Returns:
        JumpRecord: Состояния 0 (нижний) / 1 (верхний), момент скачка - первый отсчёт за дальним порогом
    """
    delta = high_level - low_level
    lower = low_level + hysteresis_fraction * delta
    upper = high_level - hysteresis_fraction * delta
    if not delta > 0 or lower >= upper:
        raise LevelsTooClose(f'Пороги {lower:.4g} и {upper:.4g} перекрываются (уровни {low_level}, {high_level}, h = {hysteresis_fraction})')
    if trace.noise_sigma > 0 and delta < 4 * trace.noise_sigma:
        log_message('Wtd', f'⚠ Δ/σ = {delta / trace.noise_sigma:.2f} < 4: детектирование скачков ненадёжно',
                    log_callback)

    z = trace.samples
    events = np.full(len(z), -1, dtype=np.int8)
    events[z <= lower] = 0
    events[z >= upper] = 1
    if events[0] < 0:
        events[0] = int(z[0] >= (low_level + high_level) / 2)
    last = np.where(events >= 0, np.arange(len(z)), 0)
    np.maximum.accumulate(last, out=last)
    states = events[last].astype(int)

    jumps = np.flatnonzero(np.diff(states) != 0) + 1
    return JumpRecord(jumps * trace.dt, np.concatenate((states[:1], states[jumps])), len(z) * trace.dt)


def dwell_samples(jumps, level_tag, model=None):
    """
    Времена пребывания на уровне без обрезанных первого и последнего интервалов.

    Args:
        jumps (JumpRecord): Траектория по уровням (или по состояниям, тогда нужен model)
        level_tag: 'low' / 'high'
        model (MarkovModel): Для свёртки состояний в уровни
    """
    if model is not None:
        jumps = level_record(jumps, model)
    durations, states = jumps.dwell_times()
    inner = slice(1, -1)
    durations, states = durations[inner], states[inner]
    return durations[states == level_index(level_tag)]


def empirical_wtd(jumps, level_tag, bins, model=None):
    """
    Гистограмма времён пребывания на уровне.

    Args:
        bins (int | sequence): Число бинов или их границы (с)

    Raises:
        NoDwells: меньше двух интервалов
    """
    dwells = dwell_samples(jumps, level_tag, model)
    if len(dwells) < 2:
        raise NoDwells(f'На уровне {level_name(level_tag)} найдено {len(dwells)} интервалов, нужно минимум 2')
    if np.isscalar(bins):
        edges = np.linspace(0.0, dwells.max() * (1 + 1e-9), int(bins) + 1)
    else:
        edges = np.asarray(bins, dtype=float)
    counts, _ = np.histogram(dwells, bins=edges)
    inside = int(counts.sum())
    if inside != len(dwells):
        log_message('Wtd', f'⚠ {len(dwells) - inside} интервалов вне диапазона бинов')
    return WtdHistogram(edges, counts, level_name(level_tag), inside, dwells)


# --- аналитические WTD ---

def _entry_exit(partition, level):
    """(матрица входа на уровень, матрица выхода с уровня)."""
    if level == 0:
        return partition.j_down, partition.j_up
    return partition.j_up, partition.j_down


def _numeric_wtd(model, level):
    partition = jump_partition(model)
    rho0 = steady_state(build_liouvillian(model, MARKOV)).probabilities
    enter, leave = _entry_exit(partition, level)
    start = enter @ rho0
    norm = start.sum()
    if norm <= 0:
        raise NotTwoLevel(f'Уровень {level_name(level)} недостижим в стационарном режиме')
    start = start / norm
    exit_row = leave.sum(axis=0)
    l0 = partition.l0

    def evaluator(tau):
        tau = np.asarray(tau, dtype=float)
        flat = np.array([exit_row @ linalg.expm(l0 * t) @ start for t in tau.ravel()])
        return flat.reshape(tau.shape)

    return WtdAnalytic('numeric', level_tag=level_name(level), evaluator=evaluator)


def _three_state_forms(gamma):
    """
    Замкнутые формы для трёх состояний, одиночное состояние уже имеет индекс 0.

    Returns:
        tuple: (w одиночного уровня, w парного уровня) или None при Γ ≈ 0
    """
    g01, g02 = gamma[0, 1], gamma[0, 2]
    g10, g12, g20, g21 = gamma[1, 0], gamma[1, 2], gamma[2, 0], gamma[2, 1]
    single_rate = g01 + g02
    single = ('mono', (single_rate,), (single_rate,))

    total = g10 + g12 + g20 + g21
    diff = (g10 + g12) - (g20 + g21)
    coupling = 4 * g12 * g21
    # Γ² = diff² + coupling, все слагаемые неотрицательны
    big_gamma = np.sqrt(diff ** 2 + coupling)
    norm = g01 * g10 + g02 * g20
    if big_gamma <= GAMMA_DEGENERATE * max(total, 1.0) or norm <= 0:
        return None
    k = norm / single_rate
    # Γ ∓ diff без вычитания близких чисел
    minus = coupling / (big_gamma + diff) if diff > 0 else big_gamma - diff
    plus = coupling / (big_gamma - diff) if diff < 0 else big_gamma + diff
    weight = (g01 * (g10 * minus + 2 * g12 * g20) + g02 * (g20 * plus + 2 * g10 * g21)) / (2 * big_gamma * norm)
    fast = (total + big_gamma) / 2
    # slow·fast = определитель блока выхода с парного уровня
    slow = (g10 * g20 + g10 * g21 + g12 * g20) / fast
    if slow <= 0:
        return None
    pair = ('bi', (slow, fast), (k * weight, k * (1 - weight)))
    return single, pair


def analytic_wtd(model, numeric=False):
    """
    WTD нижнего и верхнего уровней.

    Args:
        model (MarkovModel): Модель с двумя выходными уровнями
        numeric (bool): Принудительно матричная экспонента

    Returns:
        tuple: (w_low, w_high) как WtdAnalytic
    """
    labels = np.asarray(model.level_labels())
    if numeric or model.n_states > 3:
        return _numeric_wtd(model, 0), _numeric_wtd(model, 1)

    gamma = model.rate_matrix()
    if model.n_states == 2:
        low_state = int(np.flatnonzero(labels == 0)[0])
        high_state = 1 - low_state
        return (WtdAnalytic('mono', (gamma[low_state, high_state],), (gamma[low_state, high_state],), 'low'),
                WtdAnalytic('mono', (gamma[high_state, low_state],), (gamma[high_state, low_state],), 'high'))

    counts = np.bincount(labels, minlength=2)
    single_level = int(np.argmin(counts))
    single_state = int(np.flatnonzero(labels == single_level)[0])
    pair_states = [int(s) for s in np.flatnonzero(labels != single_level)]
    order = [single_state] + pair_states
    forms = _three_state_forms(gamma[np.ix_(order, order)])
    if forms is None:
        return _numeric_wtd(model, 0), _numeric_wtd(model, 1)
    single, pair = forms
    by_level = {single_level: single, 1 - single_level: pair}
    return tuple(WtdAnalytic(by_level[level][0], by_level[level][1], by_level[level][2], level_name(level))
                 for level in (0, 1))


# --- эквивалентные модели ---

def equiv_model(params, which, levels=(0.0, 1.0, 1.0)):
    """
    Модель 1..4 из параметров (a, b, c, d); состояние 0 - нижний уровень.

    Raises:
        NegativeDerivedRate: если какая-то скорость отрицательна или не определена
    """
    a, b, c, d = params.a, params.b, params.c, params.d
    try:
        if which == 1:
            rates = {(0, 1): a, (1, 0): c * (a - d) * (b + d) / (a * b),
                     (1, 2): c * d ** 2 * (a - b - d) / (a * b * (a - d)), (2, 1): a * c / (a - d)}
        elif which == 2:
            rates = {(0, 1): a, (1, 0): c * (a - d) * (b + d) / (a * b),
                     (1, 2): c * d * (b + d) / (a * b), (2, 0): c}
        elif which == 3:
            rates = {(0, 1): a - d, (0, 2): d, (1, 0): c * (b + d) / b, (2, 1): c}
        elif which == 4:
            rates = {(0, 1): a - b - d, (0, 2): b + d, (1, 0): c * (b + d) / b, (2, 0): c}
        else:
            raise ConfigError(f'Номер модели должен быть 1..4, получено {which}')
    except ZeroDivisionError as e:
        raise NegativeDerivedRate(f'Модель {which}: параметры {params} дают деление на ноль') from e
    for (i, j), value in rates.items():
        if not np.isfinite(value) or value < 0:
            raise NegativeDerivedRate(f'Модель {which}: γ_{i}{j} = {value:.6g} < 0 при {params}')
    return MarkovModel(3, rates, tuple(levels), name=f'm{which}')


# --- подгонка ---

def _mixture_components(params, tau):
    fraction, rate1, rate2 = params
    return np.vstack((np.log(fraction) + np.log(rate1) - rate1 * tau,
                      np.log1p(-fraction) + np.log(rate2) - rate2 * tau))


def _mixture_nll(params, tau):
    return -np.sum(special.logsumexp(_mixture_components(params, tau), axis=0))


def _mixture_gradient(params, tau):
    fraction, rate1, rate2 = params
    components = _mixture_components(params, tau)
    resp = np.exp(components - special.logsumexp(components, axis=0))
    return -np.array([
        np.sum(resp[0] / fraction - resp[1] / (1 - fraction)),
        np.sum(resp[0] * (1 / rate1 - tau)),
        np.sum(resp[1] * (1 / rate2 - tau)),
    ])


def fit_wtd(hist, form='bi', max_iter=2000, log_callback=None):
    """
    ML-подгонка по сырым временам гистограммы.

    Args:
        hist (WtdHistogram): Гистограмма с dwells
        form (str): 'mono' или 'bi'
        max_iter (int): Предел итераций оптимизатора

    Returns:
        WtdFit: Плотность, ковариация параметров, флаг вырожденности

    Raises:
        NonConvergence: оптимизатор не сошёлся (best - лучший результат)
    """
    tau = np.asarray(hist.dwells if hist.dwells is not None else np.repeat(hist.centers, hist.counts), dtype=float)
    n = len(tau)
    if n < 2:
        raise NoDwells(f'Для подгонки нужно минимум 2 интервала, получено {n}')
    if n < 100:
        log_message('Wtd', f'⚠ Всего {n} интервалов, рекомендуется >= 100', log_callback)
    mean = tau.mean()

    if form == 'mono':
        rate = 1.0 / mean
        analytic = WtdAnalytic('mono', (rate,), (rate,), hist.level_tag)
        ll = n * np.log(rate) - rate * tau.sum()
        return WtdFit(analytic, np.array([[rate ** 2 / n]]), {'rate': rate}, float(ll), n)
    if form != 'bi':
        raise ConfigError(f'Форма должна быть mono или bi, получено {form!r}')

    bounds = [(1e-6, 1 - 1e-6), (1e-3 / mean, 1e4 / mean), (1e-3 / mean, 1e4 / mean)]
    best = None
    for fraction, slow, fast in ((0.5, 0.5, 2.0), (0.2, 0.3, 3.0), (0.8, 0.1, 1.5)):
        result = optimize.minimize(_mixture_nll, np.array([fraction, slow / mean, fast / mean]), args=(tau,),
                                   jac=_mixture_gradient, method='L-BFGS-B', bounds=bounds,
                                   options={'maxiter': max_iter})
        if best is None or result.fun < best.fun:
            best = result

    fraction, rate1, rate2 = best.x
    if rate1 > rate2:
        fraction, rate1, rate2 = 1 - fraction, rate2, rate1
    params = np.array([fraction, rate1, rate2])
    hessian = optimize.approx_fprime(params, _mixture_gradient, 1e-7 * np.maximum(np.abs(params), 1e-12), tau)
    hessian = (hessian + hessian.T) / 2
    try:
        covariance = np.linalg.inv(hessian)
        singular = not np.all(np.isfinite(covariance)) or np.any(np.diag(covariance) <= 0)
    except np.linalg.LinAlgError:
        covariance = np.full((3, 3), np.inf)
        singular = True
    spread = np.sqrt(max(covariance[1, 1] + covariance[2, 2], 0.0)) if not singular else np.inf
    degenerate = bool(singular or abs(rate2 - rate1) <= 2 * spread
                      or min(fraction, 1 - fraction) < 1e-4)

    analytic = WtdAnalytic('bi', (rate1, rate2), (fraction * rate1, (1 - fraction) * rate2), hist.level_tag)
    fit = WtdFit(analytic, covariance, {'fraction': fraction, 'rate1': rate1, 'rate2': rate2},
                 float(-best.fun), n, degenerate, bool(best.success))
    if degenerate:
        log_message('Wtd', f'⚠ Двухэкспоненциальная подгонка вырождена: r1 = {rate1:.4g}, r2 = {rate2:.4g}',
                    log_callback)
    if not best.success:
        raise NonConvergence(f'ML-подгонка WTD не сошлась: {best.message}', best=fit)
    return fit


def fit_model_wtd(low_dwells, high_dwells, topology, init_rates, seed=0, restarts=4, max_iter=4000):
    """
    Подгонка скоростей трёхуровневой топологии по сырым временам обоих уровней
    (правдоподобие аналитических WTD).

    Args:
        low_dwells, high_dwells (np.ndarray): Времена пребывания
        topology: Объект с полями edges, levels и методом build(rates)
        init_rates (sequence): Начальные скорости в порядке topology.edges
        seed (int): Зерно для перезапусков

    Returns:
        dict: rates, model, log_likelihood
    """
    low = np.asarray(low_dwells, dtype=float)
    high = np.asarray(high_dwells, dtype=float)
    rng = np.random.default_rng(seed)

    def nll(log_rates):
        try:
            model = topology.build(np.exp(log_rates))
            w_low, w_high = analytic_wtd(model)
            values = np.concatenate((w_low.density(low), w_high.density(high)))
        except Exception:
            return 1e300
        if np.any(values <= 0) or not np.all(np.isfinite(values)):
            return 1e300
        return -np.sum(np.log(values))

    start = np.log(np.asarray(init_rates, dtype=float))
    best = None
    for attempt in range(restarts):
        x0 = start if attempt == 0 else start + rng.normal(0, 0.5, len(start))
        result = optimize.minimize(nll, x0, method='Nelder-Mead',
                                   options={'maxiter': max_iter, 'xatol': 1e-8, 'fatol': 1e-8})
        if best is None or result.fun < best.fun:
            best = result
    rates = np.exp(best.x)
    return {
        'rates': dict(zip(topology.edges, rates)),
        'model': topology.build(rates),
        'log_likelihood': float(-best.fun),
        'converged': bool(best.success),
    }


# --- многовременные WTD ---

def multi_time_wtd(model, level_sequence, tau_grid):
    """
    w(τ₁, ..., τ_n) для последовательных интервалов на уровнях level_sequence (по времени).

    Args:
        model (MarkovModel): Двухуровневая модель
        level_sequence (sequence): Уровни интервалов, должны чередоваться
        tau_grid (sequence): Одна ось τ на интервал (или одна общая ось)

    Returns:
        np.ndarray: Значения на прямом произведении осей
    """
    levels = [level_index(level) for level in level_sequence]
    if any(a == b for a, b in zip(levels, levels[1:])):
        raise ConfigError(f'Уровни последовательности должны чередоваться: {level_sequence}')
    if isinstance(tau_grid, np.ndarray) and tau_grid.ndim == 1:
        tau_grid = [tau_grid] * len(levels)
    axes = [np.asarray(axis, dtype=float) for axis in tau_grid]
    if len(axes) != len(levels):
        raise ConfigError(f'Нужно {len(levels)} осей τ, получено {len(axes)}')

    partition = jump_partition(model)
    rho0 = steady_state(build_liouvillian(model, MARKOV)).probabilities
    enter, _ = _entry_exit(partition, levels[0])
    vector = enter @ rho0
    norm = vector.sum()
    if norm <= 0:
        raise NotTwoLevel(f'Уровень {level_name(levels[0])} недостижим')
    vectors = (vector / norm)[None, :]

    for level, axis in zip(levels, axes):
        _, leave = _entry_exit(partition, level)
        propagators = np.array([leave @ linalg.expm(partition.l0 * t) for t in axis])
        vectors = np.einsum('kij,...j->...ki', propagators, vectors)
    return vectors.sum(axis=-1).reshape([len(axis) for axis in axes])


def _default_tau_axis(model, points=12):
    rates = np.array(list(model.rates.values()))
    return np.geomspace(0.05 / rates.max(), 3.0 / rates.min(), points)


def factorization_check(model, tau_grid=None, max_length=3):
    """
    Сравнивает многовременные WTD (длина 2..max_length) с произведением одновременных.

    Returns:
        FactorizationReport: max |w_multi - Πw| / max |Πw| по всем последовательностям
    """
    axis = _default_tau_axis(model) if tau_grid is None else np.asarray(tau_grid, dtype=float)
    single = {level: multi_time_wtd(model, (level,), [axis]) for level in (0, 1)}
    per_sequence = {}
    for length in range(2, max_length + 1):
        for first in (0, 1):
            sequence = tuple((first + k) % 2 for k in range(length))
            joint = multi_time_wtd(model, sequence, [axis] * length)
            factorized = single[sequence[0]]
            for level in sequence[1:]:
                factorized = np.multiply.outer(factorized, single[level])
            scale = np.abs(factorized).max()
            per_sequence[tuple(level_name(l) for l in sequence)] = float(np.abs(joint - factorized).max() / scale)
    worst = max(per_sequence, key=per_sequence.get)
    return FactorizationReport(per_sequence[worst], per_sequence, worst)


def factorization_counterexample(seed=COUNTEREXAMPLE_SEED):
    """
    Зафиксированный контрпример: первая модель, которую находит
    search_factorization_counterexample с зерном COUNTEREXAMPLE_SEED.

    Raises:
        NonConvergence: поиск с этим зерном ничего не нашёл
    """
    model, deviation = search_factorization_counterexample(seed)
    if model is None:
        raise NonConvergence(f'Контрпример не найден (зерно {seed}, лучшее отклонение {deviation:.2e})')
    return model


def search_factorization_counterexample(seed, attempts=50, threshold=1e-3):
    """
    Случайный поиск четырёхуровневой модели (по два состояния на уровень),
    нарушающей факторизацию.

    Returns:
        tuple: (MarkovModel, отклонение) или (None, лучшее отклонение)
    """
    rng = np.random.default_rng(seed)
    best = 0.0
    pairs = [(i, j) for i, j in product(range(4), repeat=2) if i != j]
    for _ in range(attempts):
        rates = {pair: float(10 ** rng.uniform(0, 3)) for pair in pairs}
        model = MarkovModel(4, rates, (0.0, 0.0, 1.0, 1.0), name=f'counterexample4_seed{seed}')
        deviation = factorization_check(model, max_length=2).max_deviation
        if deviation > threshold:
            return model, deviation
        best = max(best, deviation)
    return None, best
