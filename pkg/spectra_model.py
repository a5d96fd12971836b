#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Аналитические квантовые полиспектры S¹-S⁴ модели.

Генератор раскладывается один раз: L = R Λ R⁻¹, спектральные проекторы
P_k = R[:, k] R⁻¹[k, :]. Фурье-образ пропагатора без стационарной части
    𝒢′(ω) = Σ_{λ_k ≠ 0} P_k · g_k(ω),   g_k(ω) = -1/(λ_k + iω),
поэтому все следы вида Tr[𝒜′𝒢′(ω₁)𝒜′𝒢′(ω₂)𝒜′ρ₀] сводятся к векторам
u = t𝒜′R, v = R⁻¹𝒜′ρ₀ и матрице M = R⁻¹𝒜′R и считаются сразу на всей сетке.

Свёрточные интегралы в S⁴ берутся в замкнутом виде:
    (1/2π)∫ g_a(s - ω) g_b(ω) dω = -1/(λ_a + λ_b + is).

Частоты сеток - в Гц, внутри используется ω = 2πf.
Множитель согласования со спектрами spectra_est равен 1.
"""

from dataclasses import dataclass
from itertools import permutations

import numpy as np
from scipy import integrate

from config_manager import log_message, run_parallel
from errors import DegenerateSteadyState, PoleCollision, NonDiagonalizable
from markov_core import (MarkovModel, MeasurementOperator, build_liouvillian, measured_liouvillian,
                         steady_state)
from spectra_est import SpectrumEstimate

CONDITION_LIMIT = 1e10
POLE_TOLERANCE = 1e-12
PERTURBATION = 1e-7
IMAG_WARN = 1e-9
CHUNK = 32768


@dataclass(frozen=True, eq=False)
class ResolventCache:
    """Спектральное разложение генератора и всё, что нужно для следов."""
    generator: np.ndarray
    eigenvalues: np.ndarray
    right: np.ndarray
    left: np.ndarray
    zero_index: int
    diagonalizable: bool
    trace: np.ndarray
    rho0: np.ndarray
    a_prime: np.ndarray
    s1: float
    beta: float
    probabilities: np.ndarray

    @property
    def dim(self):
        return self.generator.shape[0]

    @property
    def u(self):
        return self.trace @ self.a_prime @ self.right

    @property
    def v(self):
        return self.left @ (self.a_prime @ self.rho0)

    @property
    def m(self):
        return self.left @ self.a_prime @ self.right

    def steady_projector(self):
        return np.outer(self.rho0, self.trace)


def build_cache(model, meas=None):
    """
    Раскладывает генератор модели с учётом измерения.

    Args:
        model (MarkovModel): Модель
        meas (MeasurementOperator): Оператор измерения (по умолчанию уровни модели, β = 1)

    Returns:
        ResolventCache: Кэш для g_prime и analytic_s*
    """
    meas = meas if meas is not None else MeasurementOperator.from_model(model)
    liouvillian = measured_liouvillian(build_liouvillian(model), meas)
    state = steady_state(liouvillian)
    generator = np.asarray(liouvillian.matrix)
    trace = liouvillian.trace_vector()
    rho0 = np.asarray(state.vector)

    a_super = meas.superoperator(liouvillian)
    s1 = float(np.real(trace @ a_super @ rho0))
    a_prime = a_super - s1 * np.eye(liouvillian.dim)

    if liouvillian.dim == 1:
        one = np.ones((1, 1), dtype=complex)
        return ResolventCache(generator.astype(complex), np.zeros(1, dtype=complex), one, one, 0, True,
                              trace.astype(complex), rho0.astype(complex), a_prime.astype(complex),
                              s1, meas.beta, state.probabilities)

    eigenvalues, right = np.linalg.eig(generator)
    radius = np.abs(eigenvalues).max()
    zero = np.flatnonzero(np.abs(eigenvalues) <= 1e-9 * radius)
    if len(zero) != 1:
        raise DegenerateSteadyState(f'Ожидалось одно нулевое собственное значение, найдено {len(zero)}')
    zero_index = int(zero[0])

    diagonalizable = np.linalg.cond(right) < CONDITION_LIMIT
    left = np.linalg.inv(right) if diagonalizable else np.full_like(right, np.nan)
    return ResolventCache(generator.astype(complex), eigenvalues, right, left, zero_index,
                          bool(diagonalizable), trace.astype(complex), rho0.astype(complex),
                          a_prime.astype(complex), s1, meas.beta, state.probabilities)


def _g(cache, omega):
    """g_k(ω) для всех собственных значений, строка нулевого значения обнулена; форма (D, G)."""
    omega = np.atleast_1d(omega)
    with np.errstate(divide='ignore', invalid='ignore'):
        values = -1.0 / (cache.eigenvalues[:, None] + 1j * omega[None, :])
    values[cache.zero_index] = 0.0
    return values


def _g_prime_solve(cache, omega):
    """𝒢′(ω) = -(L - P₀ + iω)⁻¹(1 - P₀) без разложения."""
    projector = cache.steady_projector()
    eye = np.eye(cache.dim)
    return -np.linalg.solve(cache.generator - projector + 1j * omega * eye, eye - projector)


def g_prime(cache, omega):
    """
    Фурье-образ 𝒢′ на угловой частоте omega.

    Args:
        cache (ResolventCache): Разложение генератора
        omega (float): Угловая частота, рад/с

    Returns:
        np.ndarray: Матрица супероператора
    """
    if not cache.diagonalizable:
        return _g_prime_solve(cache, omega)
    weights = _g(cache, omega)[:, 0]
    return (cache.right * weights[None, :]) @ cache.left


def _as_grid(grid):
    if isinstance(grid, np.ndarray) and grid.ndim == 1:
        return (grid,)
    return tuple(np.asarray(axis, dtype=float) for axis in grid)


def _mesh(grid):
    """Плоские массивы f1, f2 по сетке (ij-индексация)."""
    f1, f2 = np.meshgrid(grid[0], grid[1], indexing='ij')
    return f1.ravel(), f2.ravel()


def _chunked(func, points, threads):
    """Применяет func к кускам массивов points и склеивает результат."""
    n = len(points[0])
    starts = list(range(0, n, CHUNK)) or [0]
    parts = run_parallel(lambda s: func(*(p[s:s + CHUNK] for p in points)), starts, threads)
    return np.concatenate(parts) if parts else np.zeros(0, dtype=complex)


# --- ядра на векторе частот (ω в рад/с) ---

def _s2_kernel(cache, omega):
    if cache.diagonalizable:
        weights = cache.u * cache.v
        return weights @ (_g(cache, omega) + _g(cache, -omega))
    out = np.empty(len(omega), dtype=complex)
    a_rho = cache.a_prime @ cache.rho0
    row = cache.trace @ cache.a_prime
    for k, w in enumerate(omega):
        out[k] = row @ (_g_prime_solve(cache, w) + _g_prime_solve(cache, -w)) @ a_rho
    return out


def _s3_kernel(cache, w1, w2):
    freqs = (w1, w2, -w1 - w2)
    total = np.zeros(len(w1), dtype=complex)
    if cache.diagonalizable:
        u, v, m = cache.u, cache.v, cache.m
        for first, second in permutations(range(3), 2):
            inner = m @ (_g(cache, freqs[first] + freqs[second]) * v[:, None])
            total += (u[:, None] * _g(cache, freqs[first]) * inner).sum(axis=0)
        return total
    a, rho, row = cache.a_prime, cache.a_prime @ cache.rho0, cache.trace @ cache.a_prime
    for k in range(len(w1)):
        point = (freqs[0][k], freqs[1][k], freqs[2][k])
        for first, second in permutations(range(3), 2):
            total[k] += row @ _g_prime_solve(cache, point[first]) @ a @ \
                _g_prime_solve(cache, point[first] + point[second]) @ rho
    return total


def _s4_kernel(cache, w1, w2):
    freqs = (w1, w2, -w1, -w2)
    u, v, m = cache.u, cache.v, cache.m
    c = u * v
    c[cache.zero_index] = 0.0
    lam = cache.eigenvalues
    pair = lam[:, None] + lam[None, :]
    active = np.ones(len(lam), dtype=bool)
    active[cache.zero_index] = False
    total = np.zeros(len(w1), dtype=complex)
    for n_idx, m_idx, l_idx in permutations(range(4), 3):
        w_n = freqs[n_idx]
        s = w_n + freqs[m_idx]
        total_freq = s + freqs[l_idx]
        g_n = _g(cache, w_n)
        g_s = _g(cache, s)
        g_u = _g(cache, total_freq)
        chain = m @ (g_s * (m @ (g_u * v[:, None])))
        total += (u[:, None] * g_n * chain).sum(axis=0)

        with np.errstate(divide='ignore', invalid='ignore'):
            conv = -1.0 / (pair[:, :, None] + 1j * s[None, None, :])
        conv[~active, :, :] = 0.0
        conv[:, ~active, :] = 0.0
        weighted = conv * c[None, :, None]
        inner = np.einsum('abg,bg->ag', weighted, g_u) + g_u * weighted.sum(axis=1)
        total -= (c[:, None] * g_n * inner).sum(axis=0)
    return total


def _perturbed(model, epsilon):
    """Детерминированное относительное возмущение скоростей для разведения полюсов."""
    rates = {key: g * (1 + epsilon * (k + 1)) for k, (key, g) in enumerate(sorted(model.rates.items()))}
    return MarkovModel(model.n_states, rates, model.levels, model.hamiltonian, model.name)


def cache_for_s4(model, meas=None, log_callback=None):
    """
    Кэш, пригодный для замкнутой формы S⁴; при недиагонализуемом генераторе
    скорости возмущаются на PERTURBATION.

    Raises:
        PoleCollision: если и после возмущения генератор недиагонализуем
    """
    cache = build_cache(model, meas)
    if cache.diagonalizable:
        return cache
    log_message('SpectraModel', f'⚠ Совпадающие полюса: скорости возмущены на {PERTURBATION:g} (отн.)', log_callback)
    cache = build_cache(_perturbed(model, PERTURBATION), meas)
    if not cache.diagonalizable:
        raise PoleCollision('Генератор недиагонализуем даже после возмущения скоростей')
    return cache


def model_values(cache, order, grid, noise_floor=0.0, threads=None):
    """
    Комплексные значения спектра порядка order на сетке (без β-множителей не обходится).

    Args:
        cache (ResolventCache): Разложение
        order (int): 1..4
        grid (tuple): Оси сетки в Гц
        noise_floor (float): Аддитивный белый пол для S²

    Returns:
        np.ndarray: Комплексные значения формы сетки
    """
    beta = cache.beta
    if order == 1:
        return np.array(beta ** 2 * cache.s1, dtype=complex)
    grid = _as_grid(grid)
    if order == 2:
        omega = 2 * np.pi * grid[0]
        return beta ** 4 * _chunked(lambda w: _s2_kernel(cache, w), (omega,), threads) + noise_floor
    f1, f2 = _mesh(grid)
    shape = (len(grid[0]), len(grid[1]))
    points = (2 * np.pi * f1, 2 * np.pi * f2)
    if order == 3:
        return beta ** 6 * _chunked(lambda a, b: _s3_kernel(cache, a, b), points, threads).reshape(shape)
    if order == 4:
        if not cache.diagonalizable:
            raise NonDiagonalizable('Для S⁴ нужен диагонализуемый генератор (см. cache_for_s4)')
        return beta ** 8 * _chunked(lambda a, b: _s4_kernel(cache, a, b), points, threads).reshape(shape)
    raise ValueError(f'Порядок спектра должен быть 1..4, получено {order}')


def _estimate(order, grid, values, meta):
    real = np.real(values)
    return SpectrumEstimate(order, grid, real, np.zeros_like(real), meta)


def _imag_ratio(values):
    scale = np.abs(values.real).max() if values.size else 0.0
    return float(np.abs(values.imag).max() / scale) if scale > 0 else 0.0


def _wrap(order, grid, values, verbose):
    ratio = _imag_ratio(np.atleast_1d(values))
    if verbose and ratio > IMAG_WARN:
        log_message('SpectraModel', f'⚠ S{order}: мнимая часть {ratio:.2e} от вещественной, берётся вещественная')
    return _estimate(order, grid, values, {'source': 'model', 'imag_ratio': ratio})


def analytic_s1(model, meas=None):
    """S¹ = β²·Tr[𝒜ρ₀] = β²·Σ p_j·level_j"""
    cache = build_cache(model, meas)
    return float(cache.beta ** 2 * cache.s1)


def analytic_s2(model, meas=None, grid=None, noise_floor=False, cache=None, threads=None):
    """
    S²(ω) = β⁴(Tr[𝒜′𝒢′(ω)𝒜′ρ₀] + Tr[𝒜′𝒢′(-ω)𝒜′ρ₀]) [+ β²/4]

    Args:
        grid: Ось частот, Гц
        noise_floor (bool): Добавить белый пол β²/4

    Returns:
        SpectrumEstimate: Значения с нулевой дисперсией
    """
    cache = cache if cache is not None else build_cache(model, meas)
    grid = _as_grid(grid)
    floor = cache.beta ** 2 / 4 if noise_floor else 0.0
    values = model_values(cache, 2, grid, floor, threads)
    return _estimate(2, grid, values, {'source': 'model', 'noise_floor': floor})


def analytic_s3(model, meas=None, grid=None, cache=None, threads=None, verbose=False):
    """S³ на сетке (f1, f2): сумма по шести перестановкам, вещественная часть."""
    cache = cache if cache is not None else build_cache(model, meas)
    grid = _as_grid(grid)
    return _wrap(3, grid, model_values(cache, 3, grid, threads=threads), verbose)


def analytic_s4(model, meas=None, grid=None, cache=None, threads=None, verbose=False):
    """S⁴(f1, f2, -f1, -f2): 24 перестановки, свёрточные интегралы в замкнутом виде."""
    cache = cache if cache is not None and cache.diagonalizable else cache_for_s4(model, meas)
    grid = _as_grid(grid)
    return _wrap(4, grid, model_values(cache, 4, grid, threads=threads), verbose)


def analytic_spectrum(model, order, grid, meas=None, noise_floor=False, threads=None):
    """Спектр порядка order в форме SpectrumEstimate (для CLI и подгонки)."""
    if order == 1:
        return SpectrumEstimate(1, (), np.array(analytic_s1(model, meas)), np.array(0.0), {'source': 'model'})
    if order == 2:
        return analytic_s2(model, meas, grid, noise_floor, threads=threads)
    if order == 3:
        return analytic_s3(model, meas, grid, threads=threads)
    return analytic_s4(model, meas, grid, threads=threads)


def s4_quadrature(cache, f1, f2, epsrel=1e-10):
    """
    Контрольное значение S⁴(f1, f2, -f1, -f2) прямым численным интегрированием
    свёрточных членов (scipy.integrate.quad), без спектрального разложения.

    Args:
        cache (ResolventCache): Разложение (используются только L, 𝒜′, ρ₀)
        f1, f2 (float): Частоты, Гц

    Returns:
        complex: Значение S⁴ до взятия вещественной части
    """
    w = 2 * np.pi * np.array([f1, f2, -f1, -f2])
    a = cache.a_prime
    rho = a @ cache.rho0
    row = cache.trace @ a

    def gp(omega):
        return _g_prime_solve(cache, omega)

    def integral(func):
        re = integrate.quad(lambda x: func(x).real, -np.inf, np.inf, epsabs=0, epsrel=epsrel, limit=500)[0]
        im = integrate.quad(lambda x: func(x).imag, -np.inf, np.inf, epsabs=0, epsrel=epsrel, limit=500)[0]
        return (re + 1j * im) / (2 * np.pi)

    total = 0.0 + 0.0j
    for n_idx, m_idx, l_idx in permutations(range(4), 3):
        w_n = w[n_idx]
        s = w_n + w[m_idx]
        u = s + w[l_idx]
        g_n, g_s, g_u = gp(w_n), gp(s), gp(u)
        total += row @ g_n @ a @ g_s @ a @ g_u @ rho

        def second(x):
            return (row @ g_n @ gp(s - x) @ rho) * (row @ gp(x) @ g_u @ rho)

        def third(x):
            return (row @ g_n @ g_u @ gp(s - x) @ rho) * (row @ gp(x) @ rho)

        total -= integral(second) + integral(third)
    return cache.beta ** 8 * total
