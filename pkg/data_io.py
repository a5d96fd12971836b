#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Чтение и запись файлов qpolyspec: модели (JSON), сигналы (сырые '<f8' + JSON-спутник
или CSV), спектры (JSON и CSV для графиков), WTD (CSV) и отчёты подгонки (JSON).
"""

import hashlib
import json
import os

import numpy as np

from config_manager import save_json_atomic
from errors import ConfigError, ModelFileError
from markov_core import MarkovModel
from spectra_est import SpectrumEstimate
from trace_sim import DetectorTrace

RAW_SUFFIX = '.f64'
SIDECAR_SUFFIX = '.json'
RAW_DTYPE = '<f8'


def _read_json(path, error_class=ModelFileError):
    if not os.path.exists(path):
        raise error_class(f'Файл не найден: {path}')
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise error_class(f'Некорректный JSON: {e.msg}', path=path, entry=f'строка {e.lineno}, столбец {e.colno}') from e
    except OSError as e:
        raise error_class(f'Ошибка чтения: {e}', path=path) from e


def model_from_dict(data, path=None):
    """
    Собирает MarkovModel из словаря файла модели.

    Returns:
        tuple: (MarkovModel, beta, noise)
    """
    if not isinstance(data, dict):
        raise ModelFileError('Файл модели должен быть JSON-объектом', path=path)
    for key in ('n_states', 'rates', 'levels'):
        if key not in data:
            raise ModelFileError(f'Нет обязательного поля {key!r}', path=path)
    rates = {}
    for index, item in enumerate(data['rates']):
        if not isinstance(item, (list, tuple)) or len(item) != 3:
            raise ModelFileError('Переход задаётся как [i, j, γ]', path=path, entry=f'rates[{index}] = {item!r}')
        i, j, gamma = item
        if not isinstance(i, int) or not isinstance(j, int) or not isinstance(gamma, (int, float)):
            raise ModelFileError('i, j - целые, γ - число', path=path, entry=f'rates[{index}] = {item!r}')
        if (i, j) in rates:
            raise ModelFileError(f'Переход ({i}, {j}) задан дважды', path=path, entry=f'rates[{index}] = {item!r}')
        rates[(i, j)] = gamma

    hamiltonian = data.get('hamiltonian')
    if isinstance(hamiltonian, dict):
        hamiltonian = np.asarray(hamiltonian.get('real', 0.0)) + 1j * np.asarray(hamiltonian.get('imag', 0.0))
    try:
        model = MarkovModel(data['n_states'], rates, tuple(data['levels']), hamiltonian, data.get('name', ''))
    except ModelFileError as e:
        # Та же ошибка, но с именем файла
        raise type(e)(str(e), path=path) from e
    except (TypeError, ValueError) as e:
        raise ModelFileError(f'Некорректная модель: {e}', path=path) from e

    beta = float(data.get('beta', 1.0))
    noise = float(data.get('noise', 0.0))
    if beta < 0 or noise < 0:
        raise ModelFileError('beta и noise должны быть неотрицательными', path=path,
                             entry=f'beta={beta}, noise={noise}')
    return model, beta, noise


def load_model(path):
    """
    Читает файл модели.

    Формат: {"n_states": 3, "rates": [[0, 1, 5115.0], ...], "levels": [0, 1, 1],
             "beta": 1.0, "noise": 0.0, "name": "..."}

    Returns:
        tuple: (MarkovModel, beta, noise)

    Raises:
        ModelFileError: с указанием файла и проблемной записи
    """
    return model_from_dict(_read_json(path), path=path)


def save_model(path, model, beta=None, noise=None):
    return save_json_atomic(path, model.to_dict(beta, noise))


def model_hash(model):
    """SHA-256 канонического JSON модели."""
    canonical = json.dumps(model.to_dict(), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def _trace_meta(trace, extra=None):
    meta = {'dt': trace.dt, 'noise_sigma': trace.noise_sigma, 'beta': trace.beta,
            'n_samples': int(len(trace.samples))}
    meta.update({k: v for k, v in trace.meta.items() if k not in meta})
    if extra:
        meta.update(extra)
    return meta


def save_trace(path, trace, fmt='raw', extra=None):
    """
    Сохраняет сигнал.

    Args:
        path (str): Путь без расширения или с расширением .f64/.csv
        trace (DetectorTrace): Сигнал
        fmt (str): 'raw' - little-endian float64 + JSON-спутник; 'csv' - столбец t,z + JSON-спутник
        extra (dict): Дополнительные поля спутника (хэш модели и т.п.)

    Returns:
        str: Путь к файлу данных
    """
    base, ext = os.path.splitext(str(path))
    if ext not in ('', RAW_SUFFIX, '.csv'):
        base = str(path)
    directory = os.path.dirname(base)
    if directory:
        os.makedirs(directory, exist_ok=True)
    if fmt == 'raw':
        data_path = base + RAW_SUFFIX
        trace.samples.astype(RAW_DTYPE).tofile(data_path)
    elif fmt == 'csv':
        data_path = base + '.csv'
        t = np.arange(len(trace.samples)) * trace.dt
        np.savetxt(data_path, np.column_stack((t, trace.samples)), delimiter=',', header='t,z',
                   comments='', fmt='%.17g')
    else:
        raise ConfigError(f'Формат сигнала должен быть raw или csv, получено {fmt!r}')
    meta = _trace_meta(trace, extra)
    meta['format'] = fmt
    meta['data_file'] = os.path.basename(data_path)
    save_json_atomic(base + SIDECAR_SUFFIX, meta)
    return data_path


def load_trace(path):
    """
    Читает сигнал по пути к данным (.f64/.csv) или к спутнику (.json).

    Returns:
        DetectorTrace: Сигнал с метаданными спутника
    """
    base, ext = os.path.splitext(str(path))
    sidecar = _read_json(base + SIDECAR_SUFFIX, ConfigError)
    if 'dt' not in sidecar:
        raise ConfigError(f'В {base + SIDECAR_SUFFIX} нет поля dt')
    data_path = os.path.join(os.path.dirname(base), sidecar.get('data_file', os.path.basename(base) + RAW_SUFFIX))
    if ext in (RAW_SUFFIX, '.csv'):
        data_path = str(path)
    if not os.path.exists(data_path):
        raise ConfigError(f'Файл сигнала не найден: {data_path}')
    if data_path.endswith('.csv'):
        samples = np.loadtxt(data_path, delimiter=',', skiprows=1, ndmin=2)[:, -1]
    else:
        samples = np.fromfile(data_path, dtype=RAW_DTYPE)
    meta = {k: v for k, v in sidecar.items() if k not in ('dt', 'noise_sigma', 'beta')}
    return DetectorTrace(samples, float(sidecar['dt']), float(sidecar.get('beta', 1.0)),
                         float(sidecar.get('noise_sigma', 0.0)), meta)


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


def spectrum_to_dict(spectrum):
    return {
        'order': spectrum.order,
        'grid': [axis.tolist() for axis in spectrum.grid],
        'values': spectrum.values.tolist(),
        'variance': spectrum.variance.tolist(),
        'meta': _jsonable(spectrum.meta),
    }


def save_spectrum(path, spectrum):
    """Спектр в JSON (одинаковый формат для оценок и модельных спектров)."""
    return save_json_atomic(path, spectrum_to_dict(spectrum))


def load_spectrum(path):
    data = _read_json(path, ConfigError)
    try:
        return SpectrumEstimate(int(data['order']), tuple(data['grid']), np.array(data['values'], dtype=float),
                                np.array(data['variance'], dtype=float), data.get('meta', {}))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f'Некорректный файл спектра {path}: {e}') from e


def load_spectra_dir(directory, orders=None):
    """
    Все спектры из каталога (файлы s<порядок>.json).

    Args:
        orders (sequence): Ограничить порядками

    Returns:
        list: SpectrumEstimate по возрастанию порядка
    """
    if not os.path.isdir(directory):
        raise ConfigError(f'Каталог спектров не найден: {directory}')
    spectra = []
    for order in (1, 2, 3, 4):
        if orders is not None and order not in orders:
            continue
        path = os.path.join(directory, spectrum_filename(order))
        if os.path.exists(path):
            spectra.append(load_spectrum(path))
    if not spectra:
        raise ConfigError(f'В {directory} нет файлов спектров s1..s4.json')
    return spectra


def spectrum_filename(order, suffix='.json', prefix='s'):
    return f'{prefix}{order}{suffix}'


def save_spectrum_csv(path, spectrum, model=None):
    """
    Спектр в длинном CSV для графиков: f,value,variance[,model] для S²,
    f1,f2,value,variance[,model] для S³/S⁴.

    Args:
        model (SpectrumEstimate): Модельный спектр на той же сетке (необязательно)
    """
    columns = []
    header = []
    if spectrum.order == 1:
        header = ['value', 'variance']
        columns = [np.atleast_1d(spectrum.values), np.atleast_1d(spectrum.variance)]
    elif spectrum.order == 2:
        header = ['f', 'value', 'variance']
        columns = [spectrum.grid[0], spectrum.values, spectrum.variance]
    else:
        f1, f2 = np.meshgrid(spectrum.grid[0], spectrum.grid[1], indexing='ij')
        header = ['f1', 'f2', 'value', 'variance']
        columns = [f1.ravel(), f2.ravel(), spectrum.values.ravel(), spectrum.variance.ravel()]
    if model is not None:
        header.append('model')
        columns.append(np.atleast_1d(model.values).ravel())
    directory = os.path.dirname(str(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    np.savetxt(path, np.column_stack(columns), delimiter=',', header=','.join(header), comments='', fmt='%.12g')
    return path


def save_wtd_csv(path, hist, analytic=None):
    """
    Гистограмма WTD: tau_bin_center,count,fitted_density.

    Args:
        hist (WtdHistogram): Эмпирическая гистограмма
        analytic (WtdAnalytic): Подогнанное распределение (иначе столбец NaN)
    """
    centers = hist.centers
    fitted = analytic.density(centers) if analytic is not None else np.full(len(centers), np.nan)
    directory = os.path.dirname(str(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    np.savetxt(path, np.column_stack((centers, hist.counts, fitted)), delimiter=',',
               header='tau_bin_center,count,fitted_density', comments='', fmt='%.12g')
    return path


def save_fit_report(path, reports, table=None, extra=None):
    """Отчёт подгонки: все поля FitReport по кандидатам плюс таблица сравнения."""
    data = {'reports': [_jsonable(r.to_dict()) for r in reports]}
    if table is not None:
        data['table'] = table
    if extra:
        data.update(_jsonable(extra))
    return save_json_atomic(path, data)
