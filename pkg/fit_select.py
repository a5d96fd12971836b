#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Подгонка моделей к полиспектрам и выбор модели.

Невязка: (S_est - S_model)/√Var по всем порядкам и бинам, без межпорядковых весов.
Скорости оптимизируются в логарифмах с положительными границами,
несколько стартов с лог-равномерными скоростями в [1, 10⁵] Гц.
Модели сравниваются по AIC; ошибки параметров - бутстрэп по симулированным
(или аналитическим) повторам подогнанной модели.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize

from config_manager import log_message, run_parallel
from errors import ConfigError, GridMismatch, NonConvergence, QpolyspecError
from markov_core import MarkovModel, build_liouvillian, steady_state
from spectra_est import background_subtract, estimate_polyspectrum
from spectra_model import build_cache, cache_for_s4, model_values
from trace_sim import NOISE_STREAM, noise_trace, simulate_trace, stream_rng

RATE_BOUNDS = (1e-3, 1e7)
INIT_RANGE = (1.0, 1e5)
BAD_RESIDUAL = 1e6
TIE_TOLERANCE = 0.5


@dataclass(frozen=True)
class Topology:
    """
    Топология модели: какие γ_ij свободны и какой уровень у каждого состояния.

    Args:
        name (str): Имя кандидата
        n_states (int): Число состояний
        edges (tuple): Свободные переходы (i, j)
        labels (tuple): 0 - нижний уровень, 1 - верхний
    """
    name: str
    n_states: int
    edges: tuple
    labels: tuple

    def build(self, rates, levels=(0.0, 1.0)):
        """MarkovModel со скоростями rates (в порядке edges) и уровнями (low, high)."""
        low, high = levels
        values = tuple(high if label else low for label in self.labels)
        return MarkovModel(self.n_states, dict(zip(self.edges, (float(r) for r in rates))), values,
                           name=self.name)


CANDIDATES = {
    '2state': Topology('2state', 2, ((0, 1), (1, 0)), (0, 1)),
    'm1': Topology('m1', 3, ((0, 1), (1, 0), (1, 2), (2, 1)), (0, 1, 1)),
    'm2': Topology('m2', 3, ((0, 1), (1, 0), (1, 2), (2, 0)), (0, 1, 1)),
    'm3': Topology('m3', 3, ((0, 1), (0, 2), (1, 0), (2, 1)), (0, 1, 1)),
    'm4': Topology('m4', 3, ((0, 1), (0, 2), (1, 0), (2, 0)), (0, 1, 1)),
    'general3': Topology('general3', 3, ((0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)), (0, 1, 1)),
}


def get_topology(name):
    if isinstance(name, Topology):
        return name
    try:
        return CANDIDATES[name]
    except KeyError:
        raise ConfigError(f'Неизвестная модель {name!r}, доступны {sorted(CANDIDATES)}') from None


def rate_name(edge):
    return f'g{edge[0]}{edge[1]}'


@dataclass(frozen=True, eq=False)
class FitProblem:
    """
    Задача подгонки.

    Args:
        topology (Topology): Кандидат
        data (tuple): SpectrumEstimate порядков 1-4 с дисперсиями
        fit_noise_floor (bool): Свободный белый пол в S²
        grid_stride (int): Прореживание сеток порядков 3-4
        est_config (EstimationConfig): Настройки оценки (для бутстрэпа)
        trace_settings (dict): t_end, dt, noise_sigma, background (для бутстрэпа)
    """
    topology: Topology
    data: tuple
    fit_noise_floor: bool = False
    grid_stride: int = 1
    est_config: object = None
    trace_settings: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, 'topology', get_topology(self.topology))
        data = tuple(s.subsample(self.grid_stride) if s.order >= 3 else s for s in self.data)
        orders = [s.order for s in data]
        if not data:
            raise ConfigError('Нет данных для подгонки')
        if len(set(orders)) != len(orders):
            raise GridMismatch(f'Порядки спектров повторяются: {orders}')
        object.__setattr__(self, 'data', tuple(sorted(data, key=lambda s: s.order)))

    @property
    def orders(self):
        return tuple(s.order for s in self.data)

    @property
    def fit_both_levels(self):
        return 1 in self.orders

    @property
    def param_names(self):
        names = [rate_name(edge) for edge in self.topology.edges]
        names += ['level_low', 'level_high'] if self.fit_both_levels else ['delta']
        if self.fit_noise_floor:
            names.append('noise_floor')
        return names

    @property
    def k(self):
        return len(self.param_names)

    def split(self, params):
        """(скорости, (low, high), пол шума) из вектора параметров."""
        params = np.asarray(params, dtype=float)
        n_rates = len(self.topology.edges)
        rates = params[:n_rates]
        if self.fit_both_levels:
            levels = (params[n_rates], params[n_rates + 1])
            rest = n_rates + 2
        else:
            levels = (0.0, params[n_rates])
            rest = n_rates + 1
        floor = params[rest] if self.fit_noise_floor else 0.0
        return rates, levels, floor

    def bounds(self):
        """Границы во внутренних координатах (логарифмы скоростей)."""
        n_rates = len(self.topology.edges)
        lower = [np.log(RATE_BOUNDS[0])] * n_rates
        upper = [np.log(RATE_BOUNDS[1])] * n_rates
        n_levels = 2 if self.fit_both_levels else 1
        lower += [-np.inf] * n_levels
        upper += [np.inf] * n_levels
        if self.fit_noise_floor:
            lower.append(0.0)
            upper.append(np.inf)
        return np.array(lower), np.array(upper)

    def to_internal(self, params):
        x = np.array(params, dtype=float)
        n_rates = len(self.topology.edges)
        x[:n_rates] = np.log(np.clip(x[:n_rates], *RATE_BOUNDS))
        return x

    def to_natural(self, x):
        params = np.array(x, dtype=float)
        n_rates = len(self.topology.edges)
        params[:n_rates] = np.exp(params[:n_rates])
        return params

    def build_model(self, params):
        rates, levels, _ = self.split(params)
        return self.topology.build(rates, levels)


@dataclass(frozen=True, eq=False)
class FitReport:
    """Результат подгонки одного кандидата."""
    model_name: str
    param_names: tuple
    params: np.ndarray
    rates: dict
    levels: tuple
    noise_floor: float
    rss: float
    aic: float
    k: int
    n: int
    converged: bool
    steady_state: tuple
    aic_form: str = 'log_rss'
    errors: dict = field(default_factory=dict)
    bootstrap: dict = field(default_factory=dict)
    restart_costs: tuple = ()
    error: str = ''
    orders: tuple = ()

    @property
    def failed(self):
        return bool(self.error)

    def rate(self, i, j):
        return self.rates.get((i, j), 0.0)

    def model(self):
        topology = get_topology(self.model_name)
        return topology.build([self.rates[edge] for edge in topology.edges], self.levels)

    def with_errors(self, errors, bootstrap_info):
        return replace(self, errors=dict(errors), bootstrap=dict(bootstrap_info))

    def with_aic_form(self, form):
        if self.failed:
            return replace(self, aic_form=form)
        return replace(self, aic=aic(self.rss, self.k, self.n, form), aic_form=form)

    def to_dict(self):
        return {
            'model': self.model_name,
            'rates_hz': {rate_name(edge): value for edge, value in sorted(self.rates.items())},
            'levels': list(self.levels),
            'noise_floor': self.noise_floor,
            'params': dict(zip(self.param_names, (float(p) for p in self.params))),
            'errors': {name: float(value) for name, value in self.errors.items()},
            'rss': self.rss,
            'aic': self.aic,
            'aic_form': self.aic_form,
            'k': self.k,
            'n': self.n,
            'converged': self.converged,
            'steady_state': list(self.steady_state),
            'orders': list(self.orders),
            'bootstrap': self.bootstrap,
            'restart_costs': list(self.restart_costs),
            'error': self.error or None,
        }


def failed_report(name, message, aic_form='log_rss'):
    return FitReport(name, (), np.zeros(0), {}, (), 0.0, np.inf, np.inf, 0, 0, False, (),
                     aic_form, error=message)


def aic(rss, k, n, form='log_rss'):
    """
    Информационный критерий Акаике.

    Args:
        rss (float): Взвешенная сумма квадратов невязок (> 0)
        k (int): Число параметров (>= 1)
        n (int): Число спектральных значений (> 0)
        form (str): 'log_rss' - 2k - 2ln(RSS/n); 'standard' - n·ln(RSS/n) + 2k
    """
    if not rss > 0 or not n > 0 or k < 1:
        raise ConfigError(f'AIC требует rss > 0, n > 0, k >= 1 (получено {rss}, {n}, {k})')
    if form == 'log_rss':
        return 2 * k - 2 * np.log(rss / n)
    if form == 'standard':
        return n * np.log(rss / n) + 2 * k
    raise ConfigError(f'Неизвестная форма AIC {form!r}')


class SpectrumFitter:
    """Невязки модели относительно данных задачи; данные и маски готовятся один раз."""

    def __init__(self, problem, threads=1):
        self.problem = problem
        self.threads = threads
        self.masks = [s.fit_mask() for s in problem.data]
        self.targets = [s.values[mask] for s, mask in zip(problem.data, self.masks)]
        self.sigmas = [np.sqrt(s.variance[mask]) for s, mask in zip(problem.data, self.masks)]
        self.n = int(sum(mask.sum() for mask in self.masks))
        if self.n == 0:
            raise GridMismatch('Нет бинов с положительной дисперсией для подгонки')

    def model_spectra(self, params):
        """Модельные значения для каждого спектра задачи (полные сетки)."""
        problem = self.problem
        _, _, floor = problem.split(params)
        model = problem.build_model(params)
        cache = build_cache(model)
        out = []
        for spectrum in problem.data:
            use = cache
            if spectrum.order == 4 and not cache.diagonalizable:
                use = cache_for_s4(model)
            values = model_values(use, spectrum.order, spectrum.grid,
                                  floor if spectrum.order == 2 else 0.0, self.threads)
            out.append(np.real(values))
        return out

    def residuals(self, params):
        try:
            spectra = self.model_spectra(params)
        except (QpolyspecError, np.linalg.LinAlgError, ValueError):
            return np.full(self.n, BAD_RESIDUAL)
        parts = [(target - np.asarray(values)[mask]) / sigma
                 for target, values, mask, sigma in zip(self.targets, spectra, self.masks, self.sigmas)]
        result = np.concatenate([np.atleast_1d(p) for p in parts])
        if not np.all(np.isfinite(result)):
            return np.full(self.n, BAD_RESIDUAL)
        return result

    def internal_residuals(self, x):
        return self.residuals(self.problem.to_natural(x))


def default_init(problem):
    """
    Начальные параметры: все скорости 300 Гц, перепад уровней из дисперсии сигнала
    (площадь S² ≈ Δ²p₀p₁ ≤ Δ²/4), пол шума из хвоста S².
    """
    n_rates = len(problem.topology.edges)
    params = [300.0] * n_rates
    by_order = {s.order: s for s in problem.data}
    delta = 1.0
    if 2 in by_order:
        s2 = by_order[2]
        f = s2.grid[0]
        if len(f) > 1:
            variance = 2 * np.sum(np.clip(s2.values[1:], 0, None)) * (f[1] - f[0])
            delta = max(2 * np.sqrt(variance), 1e-12)
    if problem.fit_both_levels:
        mean = float(by_order[1].values)
        params += [mean - delta / 2, mean + delta / 2]
    else:
        params.append(delta)
    if problem.fit_noise_floor:
        floor = float(np.median(by_order[2].values[-10:])) if 2 in by_order else 0.0
        params.append(max(floor, 0.0))
    return np.array(params)


def fit_spectra(problem, init=None, seed=0, restarts=8, max_nfev=400, tol=1e-10,
                aic_form='log_rss', threads=None, verbose=False, log_callback=None):
    """
    Взвешенный МНК по всем спектрам задачи с несколькими стартами.

    Args:
        problem (FitProblem): Задача
        init (sequence | dict): Начальные параметры (естественные единицы)
        seed (int): Зерно для случайных стартов
        restarts (int): Число стартов (первый - из init)
        max_nfev (int): Предел вычислений невязки на старт

    Returns:
        FitReport: Лучший локальный оптимум

    Raises:
        NonConvergence: ни один старт не сошёлся (best - лучший результат)
    """
    def log(message):
        if verbose:
            log_message('Fit', message, log_callback)

    fitter = SpectrumFitter(problem, threads=1)
    if init is None:
        init = default_init(problem)
    elif isinstance(init, dict):
        init = np.array([init[name] for name in problem.param_names], dtype=float)
    init = np.asarray(init, dtype=float)
    if len(init) != problem.k:
        raise ConfigError(f'init должен иметь {problem.k} параметров {problem.param_names}, получено {len(init)}')

    lower, upper = problem.bounds()
    x_init = np.clip(problem.to_internal(init), lower, upper)
    rng = np.random.default_rng(seed)
    n_rates = len(problem.topology.edges)
    starts = [x_init]
    for _ in range(max(restarts, 1) - 1):
        x0 = x_init.copy()
        x0[:n_rates] = rng.uniform(np.log(INIT_RANGE[0]), np.log(INIT_RANGE[1]), n_rates)
        starts.append(x0)

    def run(x0):
        try:
            return optimize.least_squares(fitter.internal_residuals, x0, bounds=(lower, upper), method='trf',
                                          x_scale='jac', max_nfev=max_nfev, ftol=tol, xtol=tol, gtol=tol)
        except (ValueError, np.linalg.LinAlgError) as e:
            log(f'⚠ Старт отклонён: {e}')
            return None

    results = run_parallel(run, starts, threads)
    finished = [r for r in results if r is not None]
    if not finished:
        raise NonConvergence(f'{problem.topology.name}: все старты завершились ошибкой')
    best = min(finished, key=lambda r: r.cost)
    costs = tuple(float(2 * r.cost) if r is not None else np.inf for r in results)

    params = problem.to_natural(best.x)
    rss = float(np.sum(fitter.internal_residuals(best.x) ** 2))
    model = problem.build_model(params)
    rates, levels, floor = problem.split(params)
    try:
        occupation = tuple(float(p) for p in steady_state(build_liouvillian(model)).probabilities)
    except QpolyspecError:
        occupation = ()
    converged = any(r is not None and r.status > 0 for r in results)
    report = FitReport(
        model_name=problem.topology.name,
        param_names=tuple(problem.param_names),
        params=params,
        rates=dict(zip(problem.topology.edges, (float(r) for r in rates))),
        levels=(float(levels[0]), float(levels[1])),
        noise_floor=float(floor),
        rss=rss,
        aic=aic(max(rss, np.finfo(float).tiny), problem.k, fitter.n, aic_form),
        k=problem.k,
        n=fitter.n,
        converged=converged,
        steady_state=occupation,
        aic_form=aic_form,
        restart_costs=costs,
        orders=problem.orders,
    )
    log(f'✓ {problem.topology.name}: RSS = {rss:.6g}, AIC = {report.aic:.6g}, k = {problem.k}, n = {fitter.n}')
    if not converged:
        raise NonConvergence(f'{problem.topology.name}: предел {max_nfev} вычислений исчерпан во всех стартах',
                             best=report)
    return report


def model_scan(data, candidates, seed=0, aic_form='standard', restarts=8, max_nfev=400,
               fit_noise_floor=False, grid_stride=1, inits=None, threads=None, verbose=False, log_callback=None):
    """
    Подгоняет всех кандидатов и ранжирует по AIC (неудачные - в конце).

    Args:
        data (sequence): SpectrumEstimate
        candidates (sequence): Имена или Topology
        aic_form (str): По умолчанию 'standard' = n·ln(RSS/n) + 2k, в отличие от aic(),
            где по умолчанию 'log_rss'. Разности AIC между кандидатами одинаковы в обеих формах
            только при равных RSS.
        inits (dict): Начальные параметры по имени кандидата

    Returns:
        list: FitReport по возрастанию AIC
    """
    if not candidates:
        raise ConfigError('Нужен хотя бы один кандидат')
    inits = inits or {}

    def one(item):
        index, candidate = item
        topology = get_topology(candidate)
        try:
            problem = FitProblem(topology, tuple(data), fit_noise_floor, grid_stride)
            return fit_spectra(problem, inits.get(topology.name), seed + index, restarts, max_nfev,
                               aic_form=aic_form, threads=1, verbose=verbose, log_callback=log_callback)
        except NonConvergence as e:
            if e.best is not None:
                log_message('Fit', f'⚠ {topology.name}: {e}', log_callback)
                return e.best
            return failed_report(topology.name, str(e), aic_form)
        except QpolyspecError as e:
            log_message('Fit', f'❌ {topology.name}: {e}', log_callback)
            return failed_report(topology.name, f'{type(e).__name__}: {e}', aic_form)

    reports = run_parallel(one, list(enumerate(candidates)), threads)
    return sorted(reports, key=lambda r: (r.failed, r.aic))


def tie_groups(reports, tolerance=TIE_TOLERANCE):
    """
    Номер группы ничьей для каждого отчёта (отчёты отсортированы по AIC).
    Соседние значения, отличающиеся меньше чем на tolerance, попадают в одну группу.
    """
    groups = []
    group = 0
    previous = None
    for report in reports:
        if previous is not None and (report.failed or abs(report.aic - previous) >= tolerance):
            group += 1
        groups.append(group)
        previous = report.aic
    return groups


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    """Стандартные отклонения параметров по повторам."""
    std: dict
    samples: np.ndarray
    n_ok: int
    n_failed: int
    source: str

    def info(self):
        return {'count': self.n_ok + self.n_failed, 'ok': self.n_ok, 'failed': self.n_failed, 'source': self.source}


def _replicate_data(problem, fitted, seed, member, source, noise_scale, threads):
    """Данные повтора member (>= 1) зерна seed: симуляция подогнанной модели или аналитика + шум."""
    model = fitted.model()
    if source == 'analytic':
        rng = stream_rng(seed, NOISE_STREAM, member)
        fitter = SpectrumFitter(problem, threads)
        spectra = fitter.model_spectra(fitted.params)
        out = []
        for spectrum, values in zip(problem.data, spectra):
            noise = noise_scale * np.sqrt(spectrum.variance) * rng.standard_normal(spectrum.variance.shape)
            out.append(replace(spectrum, values=np.asarray(values, dtype=float).reshape(spectrum.values.shape) + noise))
        return tuple(out)

    settings = problem.trace_settings
    for key in ('t_end', 'dt'):
        if key not in settings:
            raise ConfigError(f'Для симуляционного бутстрэпа нужно trace_settings[{key!r}]')
    if problem.est_config is None:
        raise ConfigError('Для симуляционного бутстрэпа нужен est_config')
    sigma = settings.get('noise_sigma', 0.0)
    trace = simulate_trace(model, settings['t_end'], settings['dt'], sigma, seed, member)
    background = None
    if settings.get('background') and sigma > 0:
        background = noise_trace(settings['t_end'], settings['dt'], sigma, seed, member)
    out = []
    for spectrum in problem.data:
        estimate = estimate_polyspectrum(trace, spectrum.order, problem.est_config, threads=threads)
        if background is not None:
            estimate = background_subtract(
                estimate, estimate_polyspectrum(background, spectrum.order, problem.est_config, threads=threads))
        out.append(estimate)
    return tuple(out)


def bootstrap_errors(problem, fitted, count=250, seed=0, source='simulation', noise_scale=1.0,
                     restarts=1, max_nfev=200, threads=None, verbose=False, log_callback=None):
    """
    Разброс параметров по повторам подогнанной модели.

    Args:
        problem (FitProblem): Исходная задача
        fitted (FitReport): Подогнанный отчёт (повторы стартуют из его параметров)
        count (int): Число повторов (>= 2)
        source (str): 'simulation' - сигналы той же длины и шума; 'analytic' - аналитика + шум
        noise_scale (float): Масштаб шума для 'analytic' (0 - без шума)

    Returns:
        BootstrapResult: std с поправкой Бесселя по успешным повторам
    """
    if count < 2:
        raise ConfigError(f'Бутстрэп требует count >= 2, получено {count}')
    if source not in ('simulation', 'analytic'):
        raise ConfigError(f'source должен быть simulation или analytic, получено {source!r}')

    def one(replicate):
        try:
            data = _replicate_data(problem, fitted, seed, replicate + 1, source, noise_scale, 1)
            stride = problem.grid_stride if source == 'simulation' else 1
            sub = replace(problem, data=data, grid_stride=stride)
            report = fit_spectra(sub, fitted.params, seed + replicate, restarts, max_nfev,
                                 aic_form=fitted.aic_form, threads=1)
            if verbose:
                log_message('Bootstrap', f'✓ Повтор {replicate + 1}/{count}', log_callback)
            return report.params
        except NonConvergence as e:
            if e.best is not None:
                return e.best.params
            return None
        except QpolyspecError as e:
            log_message('Bootstrap', f'⚠ Повтор {replicate + 1} отброшен: {e}', log_callback)
            return None

    results = run_parallel(one, range(count), threads)
    good = [r for r in results if r is not None]
    n_failed = count - len(good)
    samples = np.array(good) if good else np.zeros((0, problem.k))
    if len(good) >= 2:
        spread = samples.std(axis=0, ddof=1)
    else:
        spread = np.full(problem.k, np.nan)
    std = dict(zip(problem.param_names, (float(s) for s in spread)))
    if verbose:
        log_message('Bootstrap', f'✓ {len(good)} повторов, отброшено {n_failed}', log_callback)
    return BootstrapResult(std, samples, len(good), n_failed, source)


def format_table(reports, truth=None, wtd_rates=None):
    """
    Таблица сравнения: строки γ_ij ± ошибка, уровни и AIC; столбцы - кандидаты.

    Args:
        reports (list): FitReport
        truth (dict): Истинные скорости {(i, j): γ} для отдельного столбца
        wtd_rates (dict): Скорости, подогнанные по WTD, {(i, j): γ}

    Returns:
        str: Текстовая таблица
    """
    edges = sorted({edge for report in reports for edge in report.rates}
                   | set(truth or {}) | set(wtd_rates or {}))
    columns = [r.model_name + (' (ошибка)' if r.failed else '') for r in reports]
    if truth:
        columns.append('истина')
    if wtd_rates:
        columns.append('WTD')
    width = max(16, max(len(c) for c in columns) + 2)
    lines = ['=' * (8 + width * len(columns)), ' ' * 8 + ''.join(c.rjust(width) for c in columns),
             '-' * (8 + width * len(columns))]
    for edge in edges:
        cells = []
        for report in reports:
            if edge in report.rates:
                error = report.errors.get(rate_name(edge))
                cell = f'{report.rates[edge]:.1f}' + (f' ± {error:.0f}' if error is not None and np.isfinite(error) else '')
            else:
                cell = '-'
            cells.append(cell)
        if truth:
            cells.append(f'{truth[edge]:.1f}' if edge in truth else '-')
        if wtd_rates:
            cells.append(f'{wtd_rates[edge]:.1f}' if edge in wtd_rates else '-')
        lines.append(f'γ{edge[0]}{edge[1]} Гц'.ljust(8) + ''.join(c.rjust(width) for c in cells))
    groups = tie_groups(reports)
    aic_cells = [('-' if r.failed else f'{r.aic:.1f}') + ('*' if g == 0 and not r.failed else '')
                 for r, g in zip(reports, groups)]
    lines.append('AIC'.ljust(8) + ''.join(c.rjust(width) for c in aic_cells))
    lines.append('=' * (8 + width * len(columns)))
    lines.append('* минимальный AIC (ничья при разнице < %.1f)' % TIE_TOLERANCE)
    return '\n'.join(lines)
