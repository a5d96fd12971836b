#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Оценка полиспектров S¹-S⁴ по дискретному сигналу.

Сигнал режется на окна длиной N = 1/(f_resolution·dt), окна группируются
в кадры по m штук. В каждом кадре по коэффициентам Фурье
a(f) = dt·Σ w_k z_k e^{-2πi f t_k} считаются несмещённые k-статистики
(m/(m-1) для второго порядка, аналоги для третьего и четвёртого),
нормированные на dt·Σwⁿ. Итоговый спектр - среднее по кадрам, дисперсия -
разброс кадров, делённый на их число.

При окне, нормированном на dt·Σw² = 1, белый шум с дисперсией σ² на отсчёт
даёт плоский S² = σ²·dt (двусторонний спектр), что совпадает
с аналитическими формулами spectra_model без дополнительного множителя.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from config_manager import log_message, run_parallel
from errors import TraceTooShort, NyquistViolation, TooFewParts, GridMismatch, ConfigError

WINDOWS = ('acg', 'hann', 'rect')

# Минимальное число окон в кадре для k-статистики порядка n
MIN_SEGMENTS = {1: 2, 2: 2, 3: 3, 4: 4}


@dataclass(frozen=True)
class EstimationConfig:
    """
    Параметры оценки спектров.

    Args:
        f_max (float): Максимальная частота, Гц
        f_resolution (float): Разрешение (1 / длительность окна), Гц
        window (str): 'acg' (приближённое ограниченное гауссово), 'hann' или 'rect'
        segment_overlap (float): Доля перекрытия окон, [0, 1); для порядков 3-4 всегда 0
        segments_per_frame (int): Окон в кадре m
    """
    f_max: float = 5000.0
    f_resolution: float = 7.5
    window: str = 'acg'
    segment_overlap: float = 0.0
    segments_per_frame: int = 10

    def __post_init__(self):
        if not 0 < self.f_resolution < self.f_max:
            raise ConfigError(f'Нужно 0 < f_resolution < f_max, получено {self.f_resolution}, {self.f_max}')
        if not 0 <= self.segment_overlap < 1:
            raise ConfigError(f'segment_overlap должно быть в [0, 1), получено {self.segment_overlap}')
        if self.window not in WINDOWS:
            raise ConfigError(f'Неизвестное окно {self.window!r}, доступны {WINDOWS}')
        if self.segments_per_frame < 2:
            raise ConfigError('segments_per_frame должно быть >= 2')


@dataclass(frozen=True, eq=False)
class SpectrumEstimate:
    """
    Полиспектр порядка order на сетке частот.

    grid: () для порядка 1, (f,) для порядка 2, (f1, f2) для 3 и 4;
    для порядка 4 это срез S⁴(f1, f2, -f1, -f2).
    """
    order: int
    grid: tuple
    values: np.ndarray
    variance: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, 'grid', tuple(np.asarray(axis, dtype=float) for axis in self.grid))
        object.__setattr__(self, 'values', np.asarray(self.values, dtype=float))
        object.__setattr__(self, 'variance', np.asarray(self.variance, dtype=float))
        if self.values.shape != self.variance.shape:
            raise GridMismatch(f'Формы values {self.values.shape} и variance {self.variance.shape} различны')

    def same_grid(self, other, rtol=1e-9):
        if self.order != other.order or len(self.grid) != len(other.grid):
            return False
        for mine, theirs in zip(self.grid, other.grid):
            if mine.shape != theirs.shape or not np.allclose(mine, theirs, rtol=rtol, atol=0):
                return False
        return True

    def fit_mask(self, exclude_dc=True):
        """
        Бины, пригодные для подгонки: конечные значения, положительная дисперсия,
        без нулевой частоты (DC помечен и исключается по умолчанию).
        """
        mask = np.isfinite(self.values) & np.isfinite(self.variance) & (self.variance > 0)
        if exclude_dc and self.order >= 2:
            for axis_index, axis in enumerate(self.grid):
                shape = [1] * len(self.grid)
                shape[axis_index] = -1
                mask &= (axis != 0).reshape(shape)
        return mask

    def subsample(self, stride):
        """Каждый stride-й узел сетки по всем осям."""
        if stride <= 1 or self.order < 2:
            return self
        index = tuple(slice(None, None, stride) for _ in self.grid)
        grid = tuple(axis[::stride] for axis in self.grid)
        meta = dict(self.meta, grid_stride=stride)
        return replace(self, grid=grid, values=self.values[index], variance=self.variance[index], meta=meta)


def approx_confined_gaussian(n_window, sigma_t=0.14):
    """Приближённое ограниченное гауссово окно длины n_window."""
    x = np.linspace(0, n_window, n_window)
    length = n_window + 1

    def g(points):
        return np.exp(-((points - n_window / 2) / (2 * length * sigma_t)) ** 2)

    return g(x) - g(-0.5) * (g(x + length) + g(x - length)) / (g(-0.5 + length) + g(-0.5 - length))


def make_window(kind, n_window, dt):
    """
    Окно, нормированное на dt·Σw² = 1.

    Args:
        kind (str): Тип окна
        n_window (int): Длина в отсчётах
        dt (float): Шаг дискретизации

    Returns:
        np.ndarray: Нормированное окно
    """
    if kind == 'acg':
        window = approx_confined_gaussian(n_window)
    elif kind == 'hann':
        window = np.hanning(n_window)
    elif kind == 'rect':
        window = np.ones(n_window)
    else:
        raise ConfigError(f'Неизвестное окно {kind!r}')
    norm = np.sum(window ** 2) * dt
    return window / np.sqrt(norm)


# --- несмещённые оценки кумулянтов; a имеет форму (частоты, окна) ---

def c2_estimator(a):
    """C₂ = m/(m-1)·(<a a*> - <a><a*>)"""
    m = a.shape[-1]
    mean_aa = np.mean(a * np.conj(a), axis=-1)
    mean_a = np.mean(a, axis=-1)
    return m / (m - 1) * (mean_aa - mean_a * np.conj(mean_a))


def c3_estimator(a1, a2, a3):
    """
    C₃ для a1 (n1, m), a2 (n2, m) и a3 (n1, n2, m), где a3 = a*(f1 + f2).
    """
    m = a1.shape[-1]
    d1 = a1[:, None, :]
    d2 = a2[None, :, :]
    d12 = d1 * d2
    d13 = d1 * a3
    d23 = d2 * a3
    d123 = d12 * a3
    mean_1 = d1.mean(axis=-1)
    mean_2 = d2.mean(axis=-1)
    mean_3 = a3.mean(axis=-1)
    moment = (d123.mean(axis=-1) - d12.mean(axis=-1) * mean_3 - d13.mean(axis=-1) * mean_2
              - d23.mean(axis=-1) * mean_1 + 2 * mean_1 * mean_2 * mean_3)
    return m ** 2 / ((m - 1) * (m - 2)) * moment


def c4_estimator(x, z):
    """
    C₄(x, x*, z, z*) на сетке (f1, f2) через матричные произведения по окнам.
    """
    m = x.shape[-1]
    y = np.conj(x)
    w = np.conj(z)
    xc = x - x.mean(axis=-1, keepdims=True)
    yc = y - y.mean(axis=-1, keepdims=True)
    zc = z - z.mean(axis=-1, keepdims=True)
    wc = w - w.mean(axis=-1, keepdims=True)

    xyzw = (xc * yc) @ (zc * wc).T / m
    xy_zw = np.outer((xc * yc).mean(axis=-1), (zc * wc).mean(axis=-1))
    xz_yw = (xc @ zc.T / m) * (yc @ wc.T / m)
    xw_yz = (xc @ wc.T / m) * (yc @ zc.T / m)
    return m ** 2 / ((m - 1) * (m - 2) * (m - 3)) * ((m + 1) * xyzw - (m - 1) * (xy_zw + xz_yw + xw_yz))


def part_variance(spectra):
    """
    Var = m/(m-1)·(mean(S_j²) - mean(S_j)²) по первой оси (m спектров-частей).
    Это дисперсия одной части; дисперсия среднего в m раз меньше.
    """
    spectra = np.asarray(spectra, dtype=float)
    m = spectra.shape[0]
    if m < 2:
        raise TooFewParts(f'Нужно минимум 2 части, получено {m}')
    variance = m / (m - 1) * (np.mean(spectra ** 2, axis=0) - np.mean(spectra, axis=0) ** 2)
    return np.maximum(variance, 0.0)


def nominal_grid(order, f_max, f_resolution):
    """
    Сетка частот без привязки к сигналу: f_k = k·f_resolution, f_k <= f_max.
    Порядок 3 использует половину оси, чтобы f1 + f2 оставалось на сетке.
    """
    n_bins = int(np.floor(f_max / f_resolution + 1e-9)) + 1
    freqs = np.arange(n_bins) * f_resolution
    return _grid_for(order, freqs)


def _grid_for(order, freqs):
    if order == 1:
        return ()
    if order == 2:
        return (freqs,)
    if order == 3:
        half = freqs[:len(freqs) // 2]
        return (half, half)
    if order == 4:
        return (freqs, freqs)
    raise ConfigError(f'Порядок спектра должен быть 1..4, получено {order}')


class SegmentPlan:
    """Разбиение сигнала на окна и кадры для одного порядка."""

    def __init__(self, n_samples, dt, order, cfg, log_callback=None):
        self.dt = dt
        self.order = order
        self.log_callback = log_callback
        nyquist = 1.0 / (2.0 * dt)
        if cfg.f_max > nyquist * (1 + 1e-12):
            raise NyquistViolation(f'f_max = {cfg.f_max} Гц выше частоты Найквиста {nyquist} Гц')

        self.n_window = int(round(1.0 / (cfg.f_resolution * dt)))
        if self.n_window < 4:
            raise TraceTooShort(f'Окно из {self.n_window} отсчётов слишком короткое')
        self.resolution = 1.0 / (self.n_window * dt)
        self.n_bins = min(int(np.floor(cfg.f_max / self.resolution + 1e-9)) + 1, self.n_window // 2 + 1)

        overlap = cfg.segment_overlap
        if order >= 3 and overlap > 0:
            self.log(f'⚠ Перекрытие окон {overlap} -> 0 для порядка {order}')
            overlap = 0.0
        self.overlap = overlap
        self.step = max(1, int(round(self.n_window * (1 - overlap))))
        if n_samples < 2 * self.n_window:
            raise TraceTooShort(
                f'Сигнал из {n_samples} отсчётов короче двух окон по {self.n_window} (разрешение {cfg.f_resolution} Гц)'
            )
        self.n_segments = (n_samples - self.n_window) // self.step + 1

        m = cfg.segments_per_frame
        minimum = MIN_SEGMENTS[order]
        if self.n_segments // m < 2:
            reduced = self.n_segments // 2
            if reduced < minimum:
                raise TraceTooShort(
                    f'{self.n_segments} окон недостаточно для порядка {order} (нужно минимум {2 * minimum})'
                )
            self.log(f'⚠ Окон в кадре {m} -> {reduced}: сигнал короткий')
            m = reduced
        if m < minimum:
            raise TraceTooShort(f'Для порядка {order} нужно минимум {minimum} окон в кадре, задано {m}')
        self.m = m
        self.n_frames = self.n_segments // m

    def log(self, message):
        log_message('SpectraEst', message, self.log_callback)

    def frame_segments(self, samples, frame):
        """Окна кадра frame как массив (m, N)."""
        starts = (frame * self.m + np.arange(self.m)) * self.step
        index = starts[:, None] + np.arange(self.n_window)[None, :]
        return samples[index]

    def frequencies(self):
        return np.arange(self.n_bins) * self.resolution


def _frame_spectrum(order, segments, window, plan):
    """Комплексный спектр одного кадра."""
    dt = plan.dt
    if order == 1:
        return np.array(np.mean(segments))
    coefficients = np.fft.rfft(segments * window[None, :], axis=1)[:, :plan.n_bins] * dt
    a = coefficients.T
    norm = dt * np.sum(window ** order)
    if order == 2:
        return c2_estimator(a) / norm
    if order == 3:
        half = plan.n_bins // 2
        index = np.arange(half)[:, None] + np.arange(half)[None, :]
        a1 = a[:half]
        return c3_estimator(a1, a1, np.conj(a[index])) / norm
    return c4_estimator(a, a) / norm


def frame_spectra(trace, order, cfg, threads=None, log_callback=None):
    """
    Спектры отдельных кадров.

    Returns:
        tuple: (SegmentPlan, сетка, массив кадров (F, ...) комплексный)
    """
    samples = trace.samples
    plan = SegmentPlan(len(samples), trace.dt, order, cfg, log_callback)
    window = make_window(cfg.window, plan.n_window, trace.dt)

    def one(frame):
        return _frame_spectrum(order, plan.frame_segments(samples, frame), window, plan)

    frames = np.array(run_parallel(one, range(plan.n_frames), threads))
    return plan, _grid_for(order, plan.frequencies()), frames


def _symmetrize(values):
    return (values + values.T) / 2


def estimate_polyspectrum(trace, order, cfg, threads=None, verbose=False, log_callback=None):
    """
    Оценка полиспектра порядка order.

    Args:
        trace (DetectorTrace): Сигнал
        order (int): 1..4
        cfg (EstimationConfig): Параметры оценки
        threads (int): Число потоков для кадров

    Returns:
        SpectrumEstimate: Значения (вещественная часть) и дисперсия среднего
    """
    if order not in (1, 2, 3, 4):
        raise ConfigError(f'Порядок спектра должен быть 1..4, получено {order}')
    plan, grid, frames = frame_spectra(trace, order, cfg, threads, log_callback)
    mean = frames.mean(axis=0)

    meta = {
        'window': cfg.window,
        'segment_length': plan.n_window,
        'segment_duration': plan.n_window * trace.dt,
        'f_resolution': plan.resolution,
        'f_max': cfg.f_max,
        'segments_per_frame': plan.m,
        'n_frames': plan.n_frames,
        'segment_overlap': plan.overlap,
        'dc_bin': 'flagged' if order >= 2 else None,
        'dt': trace.dt,
        'n_samples': len(trace.samples),
        'noise_sigma': trace.noise_sigma,
        'trace': dict(trace.meta),
    }
    real_frames = np.real(frames)
    if order >= 3:
        scale = np.abs(mean.real).max()
        meta['imag_ratio'] = float(np.abs(mean.imag).max() / scale) if scale > 0 else 0.0
        meta['asymmetry'] = float(np.abs(mean.real - mean.real.T).max() / scale) if scale > 0 else 0.0
        real_frames = np.array([_symmetrize(f) for f in real_frames])
    values = real_frames.mean(axis=0)
    variance = part_variance(real_frames) / plan.n_frames

    if verbose:
        log_message('SpectraEst', f'✓ S{order}: {plan.n_frames} кадров по {plan.m} окон, '
                                  f'окно {plan.n_window} отсчётов, {plan.n_bins} бинов до {cfg.f_max} Гц',
                    log_callback)
    return SpectrumEstimate(order, grid, values, variance, meta)


def estimate_variance(trace, order, cfg, m_parts, threads=None):
    """
    Дисперсия спектра одной из m_parts равных частей сигнала.

    Args:
        m_parts (int): Число частей (>= 2)

    Returns:
        np.ndarray: Дисперсия по бинам
    """
    if m_parts < 2:
        raise TooFewParts(f'Нужно минимум 2 части, получено {m_parts}')
    plan, grid, frames = frame_spectra(trace, order, cfg, threads)
    per_part = plan.n_frames // m_parts
    if per_part < 1:
        raise TooFewParts(f'{plan.n_frames} кадров нельзя разделить на {m_parts} частей')
    real_frames = np.real(frames[:per_part * m_parts])
    if order >= 3:
        real_frames = np.array([_symmetrize(f) for f in real_frames])
    parts = real_frames.reshape((m_parts, per_part) + real_frames.shape[1:]).mean(axis=1)
    return part_variance(parts)


def background_subtract(signal, background):
    """
    Вычитает фоновый спектр: значения вычитаются, дисперсии складываются.

    Raises:
        GridMismatch: порядки или сетки различаются
    """
    if not signal.same_grid(background):
        raise GridMismatch(f'Сетки спектров S{signal.order} и S{background.order} (фон) не совпадают')
    meta = dict(signal.meta, background_subtracted=True, background_meta=dict(background.meta))
    return SpectrumEstimate(signal.order, signal.grid, signal.values - background.values,
                            signal.variance + background.variance, meta)
