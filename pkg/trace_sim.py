#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Симуляция сигнала детектора: точная траектория марковского процесса
(алгоритм Гиллеспи) и отрисовка отсчётов с усреднением по интервалу dt
и белым гауссовым шумом.
"""

from dataclasses import dataclass, field

import numpy as np

from config_manager import log_message, run_parallel
from errors import AbsorbingState, EmptyRecord
from markov_core import MarkovModel, build_liouvillian, steady_state, MARKOV

# Номера независимых потоков случайных чисел внутри одного зерна
JUMP_STREAM = 0
NOISE_STREAM = 1
BACKGROUND_STREAM = 2

RANDOM_BATCH = 65536
RENDER_CHUNK = 1 << 22


@dataclass(frozen=True, eq=False)
class JumpRecord:
    """
    Траектория: моменты скачков и последовательность состояний (на одно больше, чем скачков).

    Args:
        times (np.ndarray): Строго возрастающие моменты скачков, с
        states (np.ndarray): Индексы посещённых состояний (или метки уровней 0/1)
        t_end (float): Длительность записи, с
    """
    times: np.ndarray
    states: np.ndarray
    t_end: float

    def __post_init__(self):
        object.__setattr__(self, 'times', np.asarray(self.times, dtype=float))
        object.__setattr__(self, 'states', np.asarray(self.states, dtype=int))
        if len(self.states) != len(self.times) + 1:
            raise EmptyRecord(f'states ({len(self.states)}) должно быть на 1 длиннее times ({len(self.times)})')

    @property
    def n_jumps(self):
        return len(self.times)

    def dwell_times(self):
        """
        Returns:
            tuple: (длительности всех интервалов, уровни/состояния интервалов);
                   первый и последний интервалы обрезаны краями записи
        """
        edges = np.concatenate(([0.0], self.times, [self.t_end]))
        return np.diff(edges), self.states


@dataclass(frozen=True, eq=False)
class DetectorTrace:
    """
    Равномерно дискретизированный сигнал детектора.

    Args:
        samples (np.ndarray): Отсчёты z_k
        dt (float): Шаг дискретизации, с
        beta (float): Сила измерения (в единицах уровней детектора 1.0)
        noise_sigma (float): СКО белого шума на отсчёт
        meta (dict): Зерно, хэш модели и т.п.
    """
    samples: np.ndarray
    dt: float
    beta: float = 1.0
    noise_sigma: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, 'samples', np.asarray(self.samples, dtype=float))
        if not self.dt > 0:
            raise EmptyRecord(f'dt должно быть положительным, получено {self.dt}')
        if len(self.samples) < 2:
            raise EmptyRecord(f'Сигнал должен содержать минимум 2 отсчёта, получено {len(self.samples)}')

    @property
    def duration(self):
        return len(self.samples) * self.dt


def stream_rng(seed, stream, member=0):
    """
    Генератор для потока stream, независимый от остальных потоков того же зерна.
    member > 0 выделяет отдельного члена ансамбля; member = 0 совпадает с одиночным сигналом.
    """
    key = (stream,) if member == 0 else (stream, int(member))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def white_noise_floor(noise_sigma, dt):
    """Уровень спектра второго порядка белого шума: σ²·dt."""
    return noise_sigma ** 2 * dt


def sigma_for_beta(beta, dt):
    """СКО шума на отсчёт, соответствующее полу β²/4: β/(2√dt)."""
    return beta / (2.0 * np.sqrt(dt))


def _markov_part(model):
    if model.hamiltonian is None:
        return model
    log_message('TraceSim', '⚠ Гамильтониан не участвует в симуляции скачков, используются только скорости')
    return MarkovModel(model.n_states, model.rates, model.levels, name=model.name)


def simulate_jumps(model, t_end, seed, member=0):
    """
    Точная траектория марковского процесса.

    Args:
        model (MarkovModel): Модель
        t_end (float): Длительность, с
        seed (int): Зерно
        member (int): Номер члена ансамбля

    Returns:
        JumpRecord: Траектория, начальное состояние из ρ₀
    """
    if not t_end > 0:
        raise EmptyRecord(f't_end должно быть положительным, получено {t_end}')
    model = _markov_part(model)
    rng = stream_rng(seed, JUMP_STREAM, member)
    p0 = steady_state(build_liouvillian(model, MARKOV)).probabilities
    gamma = model.rate_matrix()
    exit_rates = gamma.sum(axis=1)
    with np.errstate(invalid='ignore', divide='ignore'):
        cumulative = np.cumsum(gamma / exit_rates[:, None], axis=1)

    state = int(rng.choice(model.n_states, p=p0 / p0.sum()))
    times = []
    states = [state]
    t = 0.0
    waits = rng.standard_exponential(RANDOM_BATCH)
    picks = rng.random(RANDOM_BATCH)
    cursor = 0
    while True:
        if exit_rates[state] <= 0:
            raise AbsorbingState(f'Состояние {state} не имеет выходов (t = {t:.6g} с)')
        if cursor == RANDOM_BATCH:
            waits = rng.standard_exponential(RANDOM_BATCH)
            picks = rng.random(RANDOM_BATCH)
            cursor = 0
        t += waits[cursor] / exit_rates[state]
        if t >= t_end:
            break
        row = cumulative[state]
        # первый индекс со строго большей накопленной вероятностью всегда имеет γ > 0
        nxt = int(np.searchsorted(row, picks[cursor] * row[-1], side='right'))
        cursor += 1
        times.append(t)
        states.append(nxt)
        state = nxt
    return JumpRecord(np.array(times), np.array(states), float(t_end))


def render_trace(jumps, model, dt, noise_sigma, seed, beta=1.0, member=0):
    """
    Отсчёт k = среднее уровня по [k·dt, (k+1)·dt) плюс N(0, noise_sigma²).

    Args:
        jumps (JumpRecord): Траектория
        model (MarkovModel): Модель (уровни состояний)
        dt (float): Шаг дискретизации, с
        noise_sigma (float): СКО шума на отсчёт
        seed (int): Зерно (поток шума)
        beta (float): Сила измерения для метаданных
        member (int): Номер члена ансамбля

    Returns:
        DetectorTrace: Сигнал детектора
    """
    if not dt > 0:
        raise EmptyRecord(f'dt должно быть положительным, получено {dt}')
    n_samples = int(np.floor(jumps.t_end / dt + 1e-9))
    if n_samples < 2:
        raise EmptyRecord(f'Запись {jumps.t_end} с короче двух отсчётов по {dt} с')

    levels = np.asarray(model.levels)[jumps.states]
    breakpoints = np.concatenate(([0.0], jumps.times, [jumps.t_end]))
    integral = np.concatenate(([0.0], np.cumsum(levels * np.diff(breakpoints))))

    rng = stream_rng(seed, NOISE_STREAM, member)
    samples = np.empty(n_samples)
    for start in range(0, n_samples, RENDER_CHUNK):
        stop = min(start + RENDER_CHUNK, n_samples)
        edges = np.arange(start, stop + 1) * dt
        # Интеграл кусочно-линеен между скачками, интерполяция точна
        chunk = np.diff(np.interp(edges, breakpoints, integral)) / dt
        if noise_sigma > 0:
            chunk += rng.normal(0.0, noise_sigma, stop - start)
        samples[start:stop] = chunk
    meta = {'seed': int(seed)}
    if member:
        meta['member'] = int(member)
    return DetectorTrace(samples, float(dt), beta, float(noise_sigma), meta)


def simulate_trace(model, t_end, dt, noise_sigma, seed, member=0):
    """render_trace(simulate_jumps(...)) с одним и тем же зерном и членом ансамбля."""
    jumps = simulate_jumps(model, t_end, seed, member)
    return render_trace(jumps, model, dt, noise_sigma, seed, member=member)


def noise_trace(t_end, dt, noise_sigma, seed, member=0):
    """Фоновая запись: только белый шум той же длины (для вычитания фона)."""
    n_samples = int(np.floor(t_end / dt + 1e-9))
    if n_samples < 2:
        raise EmptyRecord(f'Запись {t_end} с короче двух отсчётов по {dt} с')
    rng = stream_rng(seed, BACKGROUND_STREAM, member)
    samples = rng.normal(0.0, noise_sigma, n_samples) if noise_sigma > 0 else np.zeros(n_samples)
    return DetectorTrace(samples, float(dt), 0.0, float(noise_sigma), {'seed': int(seed), 'background': True})


def simulate_ensemble(model, t_end, dt, noise_sigma, count, seed, threads=None, verbose=False):
    """
    Независимые сигналы; сигнал k - член ансамбля k того же зерна (k = 0 совпадает с simulate_trace).

    Args:
        count (int): Число сигналов (>= 1)
        threads (int): Число потоков

    Returns:
        list: DetectorTrace в порядке k
    """
    if count < 1:
        raise ValueError(f'count должно быть >= 1, получено {count}')

    def one(k):
        trace = simulate_trace(model, t_end, dt, noise_sigma, seed, member=k)
        if verbose:
            log_message('TraceSim', f'✓ Сигнал {k + 1}/{count}: {len(trace.samples)} отсчётов')
        return trace

    return run_parallel(one, range(count), threads)


def level_record(jumps, model):
    """
    Сворачивает траекторию по состояниям в траекторию по уровням (0 - нижний, 1 - верхний).

    Returns:
        JumpRecord: Скачки только между уровнями
    """
    labels = np.asarray(model.level_labels())[jumps.states]
    keep = np.flatnonzero(np.diff(labels) != 0)
    return JumpRecord(jumps.times[keep], np.concatenate((labels[:1], labels[keep + 1])), jumps.t_end)


def occupation_fractions(jumps, n_states):
    """Доля времени в каждом состоянии."""
    durations, states = jumps.dwell_times()
    return np.bincount(states, weights=durations, minlength=n_states) / jumps.t_end
