#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Модуль конфигурации запусков qpolyspec.
Читает qpolyspec_config.json, сводит его с параметрами командной строки
(приоритет: явный параметр > конфиг > значение по умолчанию),
атомарно пишет манифесты и отчёты и раздаёт пул потоков.
"""

import os
import sys
import json
import copy
from datetime import datetime
from threading import Lock
from concurrent.futures import ThreadPoolExecutor

import psutil

from errors import ConfigError

# Глобальный lock для атомарной записи файлов из всех потоков
CONFIG_LOCK = Lock()

CONFIG_FILENAME = 'qpolyspec_config.json'

# Зерно по умолчанию, если не задано ни в конфиге, ни в командной строке
DEFAULT_SEED = 20240601

THREADS_ENV = 'QPOLYSPEC_THREADS'

DEFAULT_SETTINGS = {
    'seed': DEFAULT_SEED,
    'output_dir': 'qpolyspec_output',
    'format': 'raw',
    'threads': None,
    'plots': False,
    'timestamps': False,
    'simulation': {
        't_end': 10.0,
        'dt': 2.5e-6,
        'noise_sigma': None,
        'background': True,
    },
    'estimation': {
        'f_max': 5000.0,
        'f_resolution': 7.5,
        'window': 'acg',
        'segment_overlap': 0.0,
        'segments_per_frame': 10,
        'parts': None,
        'orders': [2, 3, 4],
    },
    'fit': {
        'models': ['2state', 'm1', 'm2', 'm3', 'm4', 'general3'],
        'restarts': 8,
        'bootstrap': 250,
        'bootstrap_source': 'simulation',
        'aic_form': 'standard',
        'max_nfev': 400,
        'grid_stride': 1,
        'noise_floor': False,
    },
    'wtd': {
        'levels': None,
        'hysteresis': 0.25,
        'form': 'bi',
        'bins': 60,
    },
}


def get_exe_dir():
    """Получает директорию где находится программа"""
    if getattr(sys, 'frozen', False):
        return os.path.dirname(sys.executable)
    else:
        return os.path.dirname(os.path.abspath(__file__))


def log_message(tag, message, log_callback=None, timestamp=False):
    """
    Единая точка логирования: '[Tag] message' в stdout или в колбэк.

    Args:
        tag (str): Имя компонента
        message (str): Текст сообщения
        log_callback (callable): Если задан, получает готовую строку вместо print
        timestamp (bool): Добавить метку времени [HH:MM:SS]
    """
    line = f'[{tag}] {message}'
    if timestamp:
        line = f'[{datetime.now().strftime("%H:%M:%S")}] {line}'
    if log_callback:
        log_callback(line)
    else:
        print(line)


def default_threads():
    """
    Число рабочих потоков по умолчанию.

    Returns:
        int: значение QPOLYSPEC_THREADS, иначе число физических ядер
    """
    env_value = os.environ.get(THREADS_ENV)
    if env_value:
        try:
            threads = int(env_value)
            if threads >= 1:
                return threads
        except ValueError:
            pass
        log_message('Config', f'⚠ Некорректное {THREADS_ENV}={env_value!r}, игнорирую')
    cores = psutil.cpu_count(logical=False) or psutil.cpu_count() or 1
    return max(1, int(cores))


def run_parallel(func, items, threads=None):
    """
    Применяет func к элементам items в пуле потоков.
    Порядок результатов совпадает с порядком items.

    Args:
        func (callable): Функция одного аргумента
        items (iterable): Входные задания
        threads (int): Число потоков (None - default_threads())

    Returns:
        list: Результаты в исходном порядке
    """
    items = list(items)
    threads = threads if threads is not None else default_threads()
    if threads <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(func, items))


def save_json_atomic(path, data):
    """
    Атомарно сохраняет JSON: запись во временный файл и os.replace.

    Args:
        path (str): Путь к файлу
        data (dict): Данные

    Returns:
        str: Путь к файлу
    """
    path = str(path)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    temp_file = path + '.tmp'
    with CONFIG_LOCK:
        try:
            with open(temp_file, 'w', encoding='utf-8') as f:
                json.dump(data, f, ensure_ascii=False, indent=2)
            os.replace(temp_file, path)
        finally:
            if os.path.exists(temp_file):
                try:
                    os.remove(temp_file)
                except OSError:
                    pass
    return path


def _merge(base, update):
    """Рекурсивное слияние словарей настроек (update перекрывает base)."""
    result = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(result.get(key), dict):
            result[key] = _merge(result[key], value)
        else:
            result[key] = value
    return result


class RunConfig:
    """Настройки одного запуска: значения по умолчанию, конфиг-файл и явные параметры."""

    def __init__(self, config_file=None, overrides=None, log_callback=None):
        """
        Инициализация конфигурации запуска

        Args:
            config_file (str): Путь к JSON конфигу (None - qpolyspec_config.json рядом с программой)
            overrides (dict): Явные значения (например, из командной строки); None-значения пропускаются
            log_callback (callable): Функция для логирования сообщений
        """
        self.log_callback = log_callback
        self.explicit_file = config_file is not None
        self.config_file = config_file if config_file else os.path.join(get_exe_dir(), CONFIG_FILENAME)
        self.settings = copy.deepcopy(DEFAULT_SETTINGS)
        self.load_settings()
        if overrides:
            self.apply_overrides(overrides)
        self.validate()

    def log(self, message):
        """Логирование сообщения"""
        log_message('Config', message, self.log_callback)

    def load_settings(self):
        """Загрузка настроек из конфига"""
        if not os.path.exists(self.config_file):
            if self.explicit_file:
                raise ConfigError(f'Файл конфигурации не найден: {self.config_file}')
            return
        try:
            with open(self.config_file, 'r', encoding='utf-8') as f:
                loaded = json.load(f)
        except Exception as e:
            if self.explicit_file:
                raise ConfigError(f'Ошибка чтения конфига {self.config_file}: {e}') from e
            self.log(f'⚠ Ошибка загрузки конфига: {e}, используются значения по умолчанию')
            return
        if not isinstance(loaded, dict):
            raise ConfigError(f'Конфиг {self.config_file} должен быть JSON-объектом')
        self.settings = _merge(self.settings, loaded)
        self.log(f'✓ Загружен конфиг: {self.config_file}')

    def apply_overrides(self, overrides):
        """
        Накладывает явные значения. Ключи вида 'estimation.f_max' адресуют секции.

        Args:
            overrides (dict): Значения; None означает "не задано"
        """
        for key, value in overrides.items():
            if value is None:
                continue
            target = self.settings
            parts = key.split('.')
            for part in parts[:-1]:
                target = target.setdefault(part, {})
            target[parts[-1]] = value

    def validate(self):
        """Проверяет значения, которые нельзя исправить молча."""
        if self.settings['format'] not in ('raw', 'csv'):
            raise ConfigError(f'format должен быть raw или csv, получено {self.settings["format"]!r}')
        if self.settings['fit']['aic_form'] not in ('log_rss', 'standard'):
            raise ConfigError('aic_form должен быть log_rss или standard')
        if self.settings['fit']['bootstrap_source'] not in ('simulation', 'analytic'):
            raise ConfigError('bootstrap_source должен быть simulation или analytic')
        for order in self.settings['estimation']['orders']:
            if order not in (1, 2, 3, 4):
                raise ConfigError(f'Недопустимый порядок спектра: {order}')
        try:
            self.settings['seed'] = int(self.settings['seed'])
        except (TypeError, ValueError) as e:
            raise ConfigError(f'seed должен быть целым: {self.settings["seed"]!r}') from e

    @property
    def seed(self):
        return self.settings['seed']

    @property
    def timestamps(self):
        return bool(self.settings.get('timestamps'))

    @property
    def output_dir(self):
        return self.settings['output_dir']

    @property
    def threads(self):
        threads = self.settings.get('threads')
        return int(threads) if threads else default_threads()

    def estimation_config(self):
        """
        Returns:
            EstimationConfig: настройки оценки спектров из секции 'estimation'
        """
        from spectra_est import EstimationConfig
        est = self.settings['estimation']
        return EstimationConfig(
            f_max=float(est['f_max']),
            f_resolution=float(est['f_resolution']),
            window=est['window'],
            segment_overlap=float(est['segment_overlap']),
            segments_per_frame=int(est['segments_per_frame']),
        )

    def to_dict(self):
        return copy.deepcopy(self.settings)

    def write_manifest(self, output_dir=None, seeds=None, model_hashes=None, stages=None, extra=None):
        """
        Пишет manifest.json, достаточный для воспроизведения запуска.

        Args:
            output_dir (str): Каталог запуска
            seeds (dict): Использованные зёрна по стадиям
            model_hashes (dict): SHA-256 канонического JSON моделей
            stages (dict): Статус стадий
            extra (dict): Прочие сведения

        Returns:
            str: Путь к манифесту
        """
        import numpy
        import scipy
        output_dir = output_dir if output_dir else self.output_dir
        manifest = {
            'created': datetime.now().isoformat(timespec='seconds'),
            'config_file': self.config_file if os.path.exists(self.config_file) else None,
            'config': self.to_dict(),
            'seeds': seeds or {'seed': self.seed},
            'model_hashes': model_hashes or {},
            'stages': stages or {},
            'versions': {
                'python': sys.version.split()[0],
                'numpy': numpy.__version__,
                'scipy': scipy.__version__,
            },
        }
        if extra:
            manifest.update(extra)
        return save_json_atomic(os.path.join(output_dir, 'manifest.json'), manifest)
