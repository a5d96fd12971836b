#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Исключения qpolyspec.
Все ошибки библиотеки наследуются от QpolyspecError, CLI ловит только его.
"""


class QpolyspecError(Exception):
    """Базовая ошибка пакета."""


class ConfigError(QpolyspecError, ValueError):
    """Некорректное значение настройки."""


class ModelFileError(QpolyspecError, ValueError):
    """Файл модели не читается или имеет неверную структуру."""

    def __init__(self, message, path=None, entry=None):
        self.path = path
        self.entry = entry
        details = []
        if path:
            details.append(f'файл {path}')
        if entry:
            details.append(f'запись {entry}')
        if details:
            message = f'{message} ({", ".join(details)})'
        super().__init__(message)


# --- markov-core ---

class NegativeRate(ModelFileError):
    """Отрицательная скорость перехода."""


class DimensionMismatch(ModelFileError):
    """Размерности модели, уровней или операторов не согласованы."""


class DegenerateSteadyState(QpolyspecError):
    """Ядро генератора многомерно (модель несвязна)."""


class NotTwoLevel(QpolyspecError):
    """Выходные уровни не сводятся к двум значениям."""


# --- trace-sim ---

class AbsorbingState(QpolyspecError):
    """Посещено состояние с нулевой суммарной скоростью выхода."""


class EmptyRecord(QpolyspecError):
    """Запись скачков пуста или слишком коротка для отрисовки."""


# --- spectra-est ---

class TraceTooShort(QpolyspecError):
    """Сигнал слишком короткий для выбранного разрешения."""


class NyquistViolation(QpolyspecError):
    """f_max выше частоты Найквиста."""


class TooFewParts(QpolyspecError):
    """Для оценки дисперсии нужно минимум две части."""


class GridMismatch(QpolyspecError):
    """Сетки частот (или порядки) спектров не совпадают."""


# --- spectra-model ---

class NonDiagonalizable(QpolyspecError):
    """Генератор не диагонализуем в пределах численной точности."""


class PoleCollision(QpolyspecError):
    """Совпадающие собственные значения не удалось развести возмущением."""


# --- wtd ---

class LevelsTooClose(QpolyspecError):
    """Пороги триггера Шмитта перекрываются."""


class NoDwells(QpolyspecError):
    """Недостаточно интервалов пребывания на уровне."""


class NegativeDerivedRate(QpolyspecError):
    """Параметризация (a, b, c, d) дала отрицательную скорость."""


# --- fit-select ---

class NonConvergence(QpolyspecError):
    """Оптимизатор не сошёлся; .best хранит лучший найденный результат."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


# --- cli ---

class InputFileError(QpolyspecError, OSError):
    """Входной файл, заданный флагом командной строки, недоступен."""

    def __init__(self, flag, path, reason='файл не найден'):
        self.flag = flag
        self.path = path
        super().__init__(f'{flag}: {reason}: {path}')


class StageFailed(QpolyspecError):
    """Стадия конвейера завершилась ошибкой; частичные результаты сохранены."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f'Стадия {stage}: {type(cause).__name__}: {cause}')
