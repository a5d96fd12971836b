#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Модели наблюдаемой системы: марковская модель с уровнями детектора,
лиувиллиан (диагональное марковское или полное супероператорное представление),
разбиение на скачки вверх/вниз, оператор измерения и стационарное состояние.

Соглашение: rates[(i, j)] = γ_ij - скорость перехода i -> j в Гц,
генератор L[j, i] = γ_ij, L[i, i] = -Σ_j γ_ij (суммы по столбцам нулевые).
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from errors import NegativeRate, DimensionMismatch, DegenerateSteadyState, NotTwoLevel

MARKOV = 'markov-diagonal'
FULL = 'full-superoperator'

HERMITIAN_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class MarkovModel:
    """
    Марковская модель с n_states состояниями.

    Args:
        n_states (int): Число состояний
        rates (dict): {(i, j): γ_ij} в Гц, отсутствующие пары - нулевые
        levels (tuple): Уровень детектора для каждого состояния
        hamiltonian (np.ndarray): Необязательный эрмитов гамильтониан (рад/с)
        name (str): Имя для отчётов
    """
    n_states: int
    rates: dict
    levels: tuple
    hamiltonian: object = None
    name: str = ''
    _matrix: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = self.n_states
        if not isinstance(n, (int, np.integer)) or n < 1:
            raise DimensionMismatch(f'n_states должно быть положительным целым, получено {n!r}')
        levels = tuple(float(x) for x in self.levels)
        if len(levels) != n:
            raise DimensionMismatch(f'Ожидалось {n} уровней, получено {len(levels)}', entry='levels')
        object.__setattr__(self, 'levels', levels)

        matrix = np.zeros((n, n))
        clean = {}
        for (i, j), gamma in dict(self.rates).items():
            entry = f'rates ({i}, {j}, {gamma})'
            if not (0 <= i < n and 0 <= j < n):
                raise DimensionMismatch(f'Переход ссылается на состояние вне 0..{n - 1}', entry=entry)
            if i == j:
                raise DimensionMismatch('Диагональная скорость не допускается', entry=entry)
            gamma = float(gamma)
            if not np.isfinite(gamma):
                raise NegativeRate('Скорость должна быть конечной', entry=entry)
            if gamma < 0:
                raise NegativeRate(f'Отрицательная скорость γ_{i}{j} = {gamma}', entry=entry)
            if gamma > 0:
                clean[(int(i), int(j))] = gamma
                matrix[i, j] = gamma
        # Одиночное состояние допустимо: это "модель без динамики"
        if n > 1 and not clean:
            raise NegativeRate('Нужна хотя бы одна положительная скорость', entry='rates')
        object.__setattr__(self, 'rates', clean)
        object.__setattr__(self, '_matrix', matrix)

        if self.hamiltonian is not None:
            h = np.asarray(self.hamiltonian, dtype=complex)
            if h.shape != (n, n):
                raise DimensionMismatch(f'Гамильтониан должен быть {n}x{n}', entry='hamiltonian')
            scale = max(np.abs(h).max(), 1.0)
            if np.abs(h - h.conj().T).max() > HERMITIAN_RTOL * scale:
                raise DimensionMismatch('Гамильтониан не эрмитов', entry='hamiltonian')
            object.__setattr__(self, 'hamiltonian', h)

    def rate(self, i, j):
        return self.rates.get((i, j), 0.0)

    def rate_matrix(self):
        """
        Returns:
            np.ndarray: γ[i, j] - скорость i -> j
        """
        return self._matrix.copy()

    def exit_rates(self):
        return self._matrix.sum(axis=1)

    def level_labels(self):
        """
        Классифицирует состояния по уровню детектора.

        Returns:
            tuple: 0 для нижнего уровня, 1 для верхнего

        Raises:
            NotTwoLevel: если различных уровней не ровно два
        """
        distinct = np.unique(self.levels)
        if len(distinct) != 2:
            raise NotTwoLevel(f'Нужно ровно два выходных уровня, найдено {len(distinct)}: {tuple(distinct)}')
        return tuple(int(level == distinct[1]) for level in self.levels)

    def relabel(self, permutation):
        """
        Переставляет метки состояний: новое состояние permutation[k] = старое k.

        Args:
            permutation (sequence): Перестановка 0..n-1

        Returns:
            MarkovModel: Эквивалентная модель
        """
        perm = [int(p) for p in permutation]
        if sorted(perm) != list(range(self.n_states)):
            raise DimensionMismatch(f'Некорректная перестановка {permutation}')
        rates = {(perm[i], perm[j]): g for (i, j), g in self.rates.items()}
        levels = [0.0] * self.n_states
        for old, new in enumerate(perm):
            levels[new] = self.levels[old]
        hamiltonian = None
        if self.hamiltonian is not None:
            inverse = np.argsort(perm)
            hamiltonian = self.hamiltonian[np.ix_(inverse, inverse)]
        return MarkovModel(self.n_states, rates, tuple(levels), hamiltonian, self.name)

    def with_levels(self, levels):
        return MarkovModel(self.n_states, self.rates, tuple(levels), self.hamiltonian, self.name)

    def to_dict(self, beta=None, noise=None):
        """Каноническое представление для файла модели."""
        data = {
            'n_states': self.n_states,
            'rates': [[i, j, g] for (i, j), g in sorted(self.rates.items())],
            'levels': list(self.levels),
        }
        if self.name:
            data['name'] = self.name
        if self.hamiltonian is not None:
            data['hamiltonian'] = {
                'real': self.hamiltonian.real.tolist(),
                'imag': self.hamiltonian.imag.tolist(),
            }
        if beta is not None:
            data['beta'] = beta
        if noise is not None:
            data['noise'] = noise
        return data

    @classmethod
    def from_rate_matrix(cls, matrix, levels, name=''):
        matrix = np.asarray(matrix, dtype=float)
        n = matrix.shape[0]
        rates = {(i, j): matrix[i, j] for i in range(n) for j in range(n) if i != j and matrix[i, j] != 0}
        return cls(n, rates, tuple(levels), name=name)


@dataclass(frozen=True, eq=False)
class Liouvillian:
    """Генератор динамики в марковском (N x N) или суперoператорном (N² x N²) виде."""
    matrix: np.ndarray
    representation: str
    n_states: int

    @property
    def dim(self):
        return self.matrix.shape[0]

    def trace_vector(self):
        """Вектор t, для которого t @ vec(ρ) = Tr ρ."""
        if self.representation == MARKOV:
            return np.ones(self.n_states)
        return np.eye(self.n_states).reshape(-1).astype(complex)


@dataclass(frozen=True)
class MeasurementOperator:
    """
    Оператор измерения A = diag(diagonal) и сила измерения beta.

    Args:
        diagonal (tuple): Уровни по состояниям
        beta (float): Сила измерения (β = 0 означает отсутствие измерения)
    """
    diagonal: tuple
    beta: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, 'diagonal', tuple(float(x) for x in self.diagonal))
        if self.beta < 0 or not np.isfinite(self.beta):
            raise DimensionMismatch(f'beta должно быть неотрицательным, получено {self.beta}')

    @classmethod
    def from_model(cls, model, beta=1.0):
        return cls(model.levels, beta)

    def superoperator(self, liouvillian):
        """
        Суперoператор 𝒜x = (Ax + xA†)/2 в представлении лиувиллиана.

        Args:
            liouvillian (Liouvillian): Задаёт представление и размерность

        Returns:
            np.ndarray: Матрица 𝒜
        """
        n = liouvillian.n_states
        if len(self.diagonal) != n:
            raise DimensionMismatch(f'Оператор измерения имеет {len(self.diagonal)} элементов, модель - {n}')
        a = np.diag(self.diagonal)
        if liouvillian.representation == MARKOV:
            return a
        eye = np.eye(n)
        return (np.kron(a, eye) + np.kron(eye, a.conj())) / 2


@dataclass(frozen=True, eq=False)
class SteadyState:
    """Стационарное состояние ρ₀: вероятности p_j и полный вектор в представлении генератора."""
    probabilities: np.ndarray
    vector: np.ndarray


class JumpPartition(NamedTuple):
    j_down: np.ndarray
    j_up: np.ndarray
    l0: np.ndarray


def _superoperator(model):
    """Полный суперoператор (row-major vec: vec(AρB) = kron(A, Bᵀ) vec ρ)."""
    n = model.n_states
    eye = np.eye(n)
    total = np.zeros((n * n, n * n), dtype=complex)
    for (i, j), gamma in model.rates.items():
        d = np.zeros((n, n))
        d[j, i] = 1.0
        dd = d.T @ d
        total += gamma * (np.kron(d, d) - 0.5 * (np.kron(dd, eye) + np.kron(eye, dd.T)))
    if model.hamiltonian is not None:
        h = model.hamiltonian
        total += -1j * (np.kron(h, eye) - np.kron(eye, h.T))
    return total


def build_liouvillian(model, representation=None):
    """
    Строит генератор модели.

    Args:
        model (MarkovModel): Модель
        representation (str): MARKOV, FULL или None (FULL только при наличии гамильтониана)

    Returns:
        Liouvillian: Генератор
    """
    if representation is None:
        representation = FULL if model.hamiltonian is not None else MARKOV
    if representation == MARKOV:
        if model.hamiltonian is not None:
            raise DimensionMismatch('Модель с гамильтонианом требует полного суперoператора')
        gamma = model.rate_matrix()
        matrix = gamma.T - np.diag(gamma.sum(axis=1))
        return Liouvillian(matrix, MARKOV, model.n_states)
    if representation == FULL:
        return Liouvillian(_superoperator(model), FULL, model.n_states)
    raise ValueError(f'Неизвестное представление: {representation}')


def measured_liouvillian(liouvillian, meas):
    """
    Добавляет измерительное затухание β²𝒟[A].
    На диагональных состояниях при диагональном A оно исчезает,
    поэтому марковское представление не меняется.

    Args:
        liouvillian (Liouvillian): Исходный генератор
        meas (MeasurementOperator): Оператор измерения

    Returns:
        Liouvillian: Генератор с учётом измерения
    """
    n = liouvillian.n_states
    if len(meas.diagonal) != n:
        raise DimensionMismatch(f'Оператор измерения имеет {len(meas.diagonal)} элементов, модель - {n}')
    if liouvillian.representation == MARKOV or meas.beta == 0:
        return Liouvillian(liouvillian.matrix.copy(), liouvillian.representation, n)
    a = np.diag(meas.diagonal).astype(complex)
    eye = np.eye(n)
    a2 = a.conj().T @ a
    dissipator = np.kron(a, a.conj()) - 0.5 * (np.kron(a2, eye) + np.kron(eye, a2.T))
    return Liouvillian(liouvillian.matrix + meas.beta ** 2 * dissipator, FULL, n)


def check_unique_null_space(liouvillian):
    """
    Проверяет, что нулевое собственное значение единственное.

    Returns:
        np.ndarray: собственные значения генератора
    """
    eigenvalues = np.linalg.eigvals(liouvillian.matrix)
    radius = np.abs(eigenvalues).max()
    if liouvillian.dim > 1 and radius > 0:
        decay = np.sort(np.abs(eigenvalues.real))
        if decay[1] <= 1e-9 * radius:
            raise DegenerateSteadyState(
                f'Ядро генератора многомерно (второе |Re λ| = {decay[1]:.3e}); модель несвязна'
            )
    return eigenvalues


def steady_state(liouvillian):
    """
    Стационарное состояние: L с одной строкой, заменённой условием нормировки.

    Args:
        liouvillian (Liouvillian): Генератор

    Returns:
        SteadyState: Вероятности и вектор ρ₀
    """
    n = liouvillian.n_states
    trace = liouvillian.trace_vector()
    if liouvillian.dim == 1:
        return SteadyState(np.ones(1), np.ones(1))
    check_unique_null_space(liouvillian)

    matrix = liouvillian.matrix
    system = np.array(matrix, dtype=complex if np.iscomplexobj(matrix) else float)
    rhs = np.zeros(liouvillian.dim, dtype=system.dtype)
    system[0, :] = trace
    rhs[0] = 1.0
    vector = np.linalg.solve(system, rhs)

    residual = np.linalg.norm(matrix @ vector)
    if residual > 1e-8 * max(np.linalg.norm(matrix), 1.0) * np.linalg.norm(vector):
        raise DegenerateSteadyState(f'Стационарное решение неточно: невязка {residual:.3e}')

    if liouvillian.representation == MARKOV:
        probabilities = np.real(vector)
    else:
        probabilities = np.real(np.diag(vector.reshape(n, n)))
    if probabilities.min() < -1e-9:
        raise DegenerateSteadyState(f'Отрицательная стационарная вероятность {probabilities.min():.3e}')
    probabilities = np.clip(probabilities, 0.0, 1.0)
    return SteadyState(probabilities, vector)


def jump_partition(model):
    """
    Разбиение L = L0 + J_up + J_down по смене уровня детектора.

    Args:
        model (MarkovModel): Модель с двумя выходными уровнями

    Returns:
        JumpPartition: (j_down, j_up, l0) в марковском представлении
    """
    labels = model.level_labels()
    n = model.n_states
    j_up = np.zeros((n, n))
    j_down = np.zeros((n, n))
    for (i, j), gamma in model.rates.items():
        if labels[i] == 0 and labels[j] == 1:
            j_up[j, i] = gamma
        elif labels[i] == 1 and labels[j] == 0:
            j_down[j, i] = gamma
    generator = build_liouvillian(model, MARKOV).matrix
    return JumpPartition(j_down, j_up, generator - j_up - j_down)
