# -*- coding: utf-8 -*-
"""Общие фикстуры тестов qpolyspec."""

import os
import sys

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from markov_core import MarkovModel  # noqa: E402
from wtd import EquivParams  # noqa: E402

# Эталонные скорости Model-1 и Model-4, Гц
MODEL1_RATES = {(0, 1): 5115.0, (1, 0): 953.0, (1, 2): 54.0, (2, 1): 185.0}
MODEL4_RATES = {(0, 1): 4715.0, (0, 2): 400.0, (1, 0): 1018.0, (2, 0): 173.0}


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='Запускать долгие тесты')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: долгий тест, запускается с --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='нужен --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def model1():
    return MarkovModel(3, MODEL1_RATES, (0.0, 1.0, 1.0), name='model1')


@pytest.fixture
def model4():
    return MarkovModel(3, MODEL4_RATES, (0.0, 1.0, 1.0), name='model4')


@pytest.fixture
def two_state():
    return MarkovModel(2, {(0, 1): 1000.0, (1, 0): 500.0}, (0.0, 1.0), name='2state')


@pytest.fixture
def equiv_params():
    return EquivParams(5115.0, 68.0, 173.0, 332.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_three_state(rng):
    """Случайная трёхуровневая модель: состояние 0 нижнее, 1 и 2 верхние."""
    pairs = [(i, j) for i in range(3) for j in range(3) if i != j]
    rates = {pair: float(10 ** rng.uniform(1, 4)) for pair in pairs}
    return MarkovModel(3, rates, (0.0, 1.0, 1.0), name='random3')
