#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
qpolyspec - командная строка: модели -> сигналы -> полиспектры / WTD -> подгонка и AIC.

Подкоманды: simulate, spectra, model-spectra, wtd, fit, scan, pipeline.
Приоритет настроек: флаг командной строки > конфиг (--config) > значение по умолчанию.
Код возврата 0 только если все запрошенные стадии завершились успешно.
"""

import argparse
import os
import sys
from dataclasses import replace

from scipy.cluster.vq import kmeans2

from config_manager import RunConfig, log_message
from data_io import (load_model, load_spectra_dir, load_spectrum, load_trace, model_hash, save_fit_report,
                     save_spectrum, save_spectrum_csv, save_trace, save_wtd_csv, spectrum_filename)
from errors import InputFileError, NonConvergence, QpolyspecError, StageFailed
from fit_select import (FitProblem, bootstrap_errors, format_table, get_topology, model_scan)
from markov_core import MeasurementOperator
from spectra_est import (EstimationConfig, background_subtract, estimate_polyspectrum, estimate_variance,
                         nominal_grid)
from spectra_model import analytic_spectrum
from trace_sim import noise_trace, simulate_trace
from wtd import detect_jumps, empirical_wtd, fit_model_wtd, fit_wtd, dwell_samples

ALL_ORDERS = (2, 3, 4)
LEVEL_SAMPLE = 200000


def _csv_list(value, cast=str):
    return [cast(item) for item in value.split(',') if item.strip()]


def _require_file(flag, path):
    if path is not None and not os.path.exists(path):
        raise InputFileError(flag, path)
    return path


def estimate_spectrum(trace, order, cfg, parts=None, threads=None, log_callback=None):
    """
    Оценка спектра; при parts >= 2 дисперсия берётся по parts равным частям сигнала
    (дисперсия спектра части / parts).
    """
    estimate = estimate_polyspectrum(trace, order, cfg, threads, verbose=True, log_callback=log_callback)
    if parts:
        variance = estimate_variance(trace, order, cfg, parts, threads) / parts
        estimate = replace(estimate, variance=variance, meta=dict(estimate.meta, variance_parts=parts))
    return estimate


def estimate_levels(trace, seed):
    """Два уровня сигнала как центры k-средних по подвыборке отсчётов."""
    samples = trace.samples[::max(1, len(trace.samples) // LEVEL_SAMPLE)]
    centers, _ = kmeans2(samples.reshape(-1, 1), 2, seed=seed, minit='++')
    low, high = sorted(float(c) for c in centers.ravel())
    return low, high


def est_config_from_meta(meta, fallback):
    """Настройки оценки, с которыми был получен спектр (для симуляционного бутстрэпа)."""
    try:
        return EstimationConfig(f_max=float(meta['f_max']), f_resolution=float(meta['f_resolution']),
                                window=meta['window'], segment_overlap=float(meta.get('segment_overlap', 0.0)),
                                segments_per_frame=int(meta['segments_per_frame']))
    except (KeyError, TypeError):
        return fallback


def trace_settings_from_meta(spectra):
    for spectrum in spectra:
        meta = spectrum.meta
        if 'dt' in meta and 'n_samples' in meta:
            return {'t_end': meta['n_samples'] * meta['dt'], 'dt': meta['dt'],
                    'noise_sigma': meta.get('noise_sigma', 0.0),
                    'background': bool(meta.get('background_subtracted'))}
    return {}


class QpolyspecRunner:
    """Выполняет подкоманды, ведёт статус стадий и пишет манифест запуска."""

    def __init__(self, config, log_callback=None):
        """
        Args:
            config (RunConfig): Настройки запуска
            log_callback (callable): Функция для логирования сообщений
        """
        self.config = config
        self.log_callback = log_callback
        self.stages = {}
        self.seeds = {'seed': config.seed}
        self.model_hashes = {}
        self.extra = {}
        self.output_dir = config.output_dir
        os.makedirs(self.output_dir, exist_ok=True)

    def log(self, message):
        """Логирование сообщения"""
        log_message('Qpolyspec', message, self.log_callback, timestamp=self.config.timestamps)

    def path(self, *parts):
        return os.path.join(self.output_dir, *parts)

    def stage(self, name, func, *args, **kwargs):
        """Выполняет стадию; ошибка пакета превращается в StageFailed с именем стадии."""
        self.log(f'Стадия {name}...')
        try:
            result = func(*args, **kwargs)
        except (QpolyspecError, OSError) as e:
            self.stages[name] = f'failed: {type(e).__name__}: {e}'
            raise StageFailed(name, e) from e
        self.stages[name] = 'ok'
        return result

    def finish(self, command):
        self.extra['command'] = command
        path = self.config.write_manifest(self.output_dir, self.seeds, self.model_hashes, self.stages, self.extra)
        self.log(f'✓ Манифест: {path}')

    # --- стадии ---

    def load_model(self, path, flag='--model'):
        _require_file(flag, path)
        model, beta, noise = load_model(path)
        digest = model_hash(model)
        self.model_hashes[os.path.basename(path)] = digest
        self.log(f'✓ Модель {model.name or path}: {model.n_states} состояний, хэш {digest}')
        return model, beta, noise

    def simulate(self, model, noise, name='trace', count=1, background=False):
        sim = self.config.settings['simulation']
        t_end = float(sim['t_end'])
        dt = float(sim['dt'])
        sigma = float(noise if sim['noise_sigma'] is None else sim['noise_sigma'])
        fmt = self.config.settings['format']
        digest = model_hash(model)
        traces = []
        seed = self.config.seed
        for k in range(count):
            suffix = f'_{k:03d}' if count > 1 else ''
            trace = simulate_trace(model, t_end, dt, sigma, seed, member=k)
            path = save_trace(self.path(name + suffix), trace, fmt, {'model_hash': digest})
            self.seeds[f'{name}{suffix}'] = {'seed': seed, 'member': k} if count > 1 else seed
            self.log(f'✓ Сигнал {path}: {len(trace.samples)} отсчётов, σ = {sigma:g}, модель {digest[:12]}')
            traces.append(trace)
        noise_only = None
        if background:
            noise_only = noise_trace(t_end, dt, sigma, self.config.seed)
            path = save_trace(self.path(name + '_background'), noise_only, fmt, {'model_hash': digest})
            self.seeds[f'{name}_background'] = self.config.seed
            self.log(f'✓ Фон {path}')
        return traces, noise_only

    def spectra(self, trace, orders, background=None, truth=None, prefix='s'):
        """Оценка (и вычитание фона) для каждого порядка; CSV для графиков."""
        cfg = self.config.estimation_config()
        parts = self.config.settings['estimation']['parts']
        threads = self.config.threads
        out = []
        for order in orders:
            estimate = estimate_spectrum(trace, order, cfg, parts, threads, self.log_callback)
            if background is not None:
                estimate = background_subtract(
                    estimate, estimate_spectrum(background, order, cfg, parts, threads, self.log_callback))
            save_spectrum(self.path(spectrum_filename(order, prefix=prefix)), estimate)
            model_curve = None
            if truth is not None:
                model_curve = analytic_spectrum(truth, order, estimate.grid, threads=threads)
                save_spectrum(self.path(spectrum_filename(order, prefix='model_s')), model_curve)
            save_spectrum_csv(self.path(spectrum_filename(order, '.csv', prefix)), estimate, model_curve)
            if self.config.settings['plots']:
                from report_plots import plot_spectrum
                plot_spectrum(estimate, self.path(spectrum_filename(order, '.png', prefix)), model_curve,
                              self.log_callback)
            out.append(estimate)
        return out

    def wtd(self, trace, levels=None, qps_rates=None, topology='m1'):
        """Детектирование скачков, гистограммы и подгонка WTD обоих уровней."""
        settings = self.config.settings['wtd']
        if levels is None:
            levels = settings['levels'] or estimate_levels(trace, self.config.seed)
        low, high = levels
        jumps = detect_jumps(trace, low, high, settings['hysteresis'], self.log_callback)
        self.log(f'✓ Уровни {low:.4g} / {high:.4g}: {jumps.n_jumps} скачков')
        fits = {}
        for tag in ('low', 'high'):
            hist = empirical_wtd(jumps, tag, settings['bins'])
            try:
                fit = fit_wtd(hist, settings['form'], log_callback=self.log_callback)
            except NonConvergence as e:
                if e.best is None:
                    raise
                self.log(f'⚠ {e}')
                fit = e.best
            save_wtd_csv(self.path(f'wtd_{tag}.csv'), hist, fit.analytic)
            if self.config.settings['plots']:
                from report_plots import plot_wtd
                plot_wtd(hist, self.path(f'wtd_{tag}.png'), fit.analytic, self.log_callback)
            fits[tag] = {'params': fit.params, 'log_likelihood': fit.log_likelihood, 'n_dwells': fit.n_dwells,
                         'degenerate': fit.degenerate, 'wtd_weight': fit.analytic.wtd_weight}
            self.log(f'✓ WTD {tag}: {fit.n_dwells} интервалов, {fit.params}')
        self.extra['wtd'] = {'levels': [low, high], 'n_jumps': int(jumps.n_jumps), 'fits': fits}

        wtd_rates = None
        if qps_rates:
            model_topology = get_topology(topology)
            init = [qps_rates.get(edge, 300.0) for edge in model_topology.edges]
            result = fit_model_wtd(dwell_samples(jumps, 'low'), dwell_samples(jumps, 'high'), model_topology, init,
                                   self.config.seed)
            wtd_rates = {edge: float(rate) for edge, rate in result['rates'].items()}
            self.extra['wtd']['model_fit'] = {
                'topology': model_topology.name,
                'rates_hz': {f'g{i}{j}': rate for (i, j), rate in wtd_rates.items()},
                'log_likelihood': result['log_likelihood'],
                'converged': result['converged'],
            }
        return wtd_rates

    def scan(self, data, models, bootstrap=0, est_config=None, trace_settings=None):
        """Подгонка кандидатов, ранжирование по AIC и (при bootstrap > 0) ошибки параметров."""
        fit = self.config.settings['fit']
        seed = self.config.seed + 1
        self.seeds['scan'] = seed
        reports = model_scan(data, models, seed, fit['aic_form'], int(fit['restarts']), int(fit['max_nfev']),
                             bool(fit['noise_floor']), int(fit['grid_stride']), threads=self.config.threads,
                             verbose=True, log_callback=self.log_callback)
        if bootstrap > 0:
            boot_seed = self.config.seed + 10000
            self.seeds['bootstrap'] = boot_seed
            with_errors = []
            for report in reports:
                if report.failed:
                    with_errors.append(report)
                    continue
                problem = FitProblem(get_topology(report.model_name), tuple(data), bool(fit['noise_floor']),
                                     int(fit['grid_stride']), est_config or self.config.estimation_config(),
                                     trace_settings or {})
                result = bootstrap_errors(problem, report, bootstrap, boot_seed, fit['bootstrap_source'],
                                          threads=self.config.threads, verbose=True, log_callback=self.log_callback)
                with_errors.append(report.with_errors(result.std, result.info()))
            reports = with_errors
        return reports

    def report(self, reports, orders, truth=None, wtd_rates=None, name='fit_report'):
        table = format_table(reports, truth.rates if truth is not None else None, wtd_rates)
        skipped = [order for order in ALL_ORDERS if order not in orders]
        if skipped:
            self.log(f'⚠ Порядки {", ".join(map(str, skipped))} пропущены')
        extra = {'orders_used': sorted(orders), 'orders_skipped': skipped}
        if 'wtd' in self.extra:
            extra['wtd'] = self.extra['wtd']
        path = save_fit_report(self.path(f'{name}.json'), reports, table, extra)
        with open(self.path(f'{name}.txt'), 'w', encoding='utf-8') as f:
            f.write(table + '\n')
        print(table)
        self.log(f'✓ Отчёт: {path}')
        self.extra['orders_skipped'] = skipped
        return path


# --- подкоманды ---

def cmd_simulate(runner, args):
    model, _, noise = runner.stage('load-model', runner.load_model, args.model)
    runner.stage('simulate', runner.simulate, model, noise, args.name, args.count, args.background)
    print(model_hash(model))


def cmd_spectra(runner, args):
    trace = runner.stage('load-trace', load_trace, _require_file('--trace', args.trace))
    background = None
    if args.background is not None:
        background = runner.stage('load-background', load_trace, _require_file('--background', args.background))
    runner.stage('estimate', runner.spectra, trace, args.order, background)


def cmd_model_spectra(runner, args):
    model, beta, _ = runner.stage('load-model', runner.load_model, args.model)
    meas = MeasurementOperator(model.levels, beta)
    est = runner.config.settings['estimation']
    reference = load_spectrum(_require_file('--grid', args.grid)) if args.grid else None

    def compute():
        for order in args.order:
            if reference is not None and order >= 2:
                grid = reference.grid
            else:
                grid = nominal_grid(order, float(est['f_max']), float(est['f_resolution']))
            spectrum = analytic_spectrum(model, order, grid, meas, args.noise_floor, runner.config.threads)
            save_spectrum(runner.path(spectrum_filename(order, prefix='model_s')), spectrum)
            save_spectrum_csv(runner.path(spectrum_filename(order, '.csv', 'model_s')), spectrum)
            runner.log(f'✓ Модельный S{order}')

    runner.stage('model-spectra', compute)


def cmd_wtd(runner, args):
    trace = runner.stage('load-trace', load_trace, _require_file('--trace', args.trace))
    runner.stage('wtd', runner.wtd, trace, tuple(args.levels) if args.levels else None)


def _load_data(runner, args):
    orders = set(runner.config.settings['estimation']['orders'])
    data = runner.stage('load-spectra', load_spectra_dir, _require_file('--data', args.data), orders | {1})
    used = sorted(s.order for s in data)
    return data, used


def cmd_fit(runner, args):
    data, used = _load_data(runner, args)
    fit = runner.config.settings['fit']
    est_config = est_config_from_meta(data[-1].meta, runner.config.estimation_config())
    reports = runner.stage('fit', runner.scan, data, fit['models'], int(fit['bootstrap']), est_config,
                           trace_settings_from_meta(data))
    runner.report(reports, used)


def cmd_scan(runner, args):
    data, used = _load_data(runner, args)
    reports = runner.stage('scan', runner.scan, data, runner.config.settings['fit']['models'])
    runner.report(reports, used, name='scan_report')


def cmd_pipeline(runner, args):
    settings = runner.config.settings
    orders = list(settings['estimation']['orders'])
    truth = None
    if args.model:
        truth, _, noise = runner.stage('load-model', runner.load_model, args.model)
    background = None
    if args.background is not None:
        background = runner.stage('load-background', load_trace, _require_file('--background', args.background))

    if args.trace:
        trace = runner.stage('load-trace', load_trace, _require_file('--trace', args.trace))
    elif truth is not None:
        want_background = background is None and settings['simulation']['background']
        traces, simulated_background = runner.stage('simulate', runner.simulate, truth, noise, 'trace', 1,
                                                    want_background)
        trace = traces[0]
        if simulated_background is not None and simulated_background.noise_sigma > 0:
            background = simulated_background
    else:
        raise InputFileError('--trace', '-', 'нужен --trace или --model')

    data = runner.stage('estimate', runner.spectra, trace, orders, background, truth)
    est_config = runner.config.estimation_config()
    trace_settings = {'t_end': trace.duration, 'dt': trace.dt, 'noise_sigma': trace.noise_sigma,
                      'background': background is not None}
    fit = settings['fit']
    reports = runner.stage('scan', runner.scan, data, fit['models'], int(fit['bootstrap']), est_config,
                           trace_settings)
    best = next((r for r in reports if not r.failed and r.model_name != '2state'), None)
    qps_rates = None
    if best is not None:
        topology = get_topology(best.model_name)
        if topology.n_states == 3:
            qps_rates = {edge: best.rates.get(edge, 300.0) for edge in topology.edges}
    levels = tuple(settings['wtd']['levels']) if settings['wtd']['levels'] else None
    if levels is None and truth is not None:
        levels = (min(truth.levels), max(truth.levels))
    wtd_rates = runner.stage('wtd', runner.wtd, trace, levels, qps_rates, best.model_name if qps_rates else 'm1')
    runner.stage('report', runner.report, reports, orders, truth, wtd_rates)


COMMANDS = {
    'simulate': cmd_simulate,
    'spectra': cmd_spectra,
    'model-spectra': cmd_model_spectra,
    'wtd': cmd_wtd,
    'fit': cmd_fit,
    'scan': cmd_scan,
    'pipeline': cmd_pipeline,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON конфиг (по умолчанию qpolyspec_config.json рядом с программой)')
    common.add_argument('--seed', type=int, help='Зерно (по умолчанию из конфига)')
    common.add_argument('--output-dir', help='Каталог результатов')
    common.add_argument('--threads', type=int, help='Число потоков')
    common.add_argument('--plots', action='store_true', default=None, help='Сохранять PNG-графики')
    common.add_argument('--timestamps', action='store_true', default=None, help='Метки времени в строках лога')

    estimation = argparse.ArgumentParser(add_help=False)
    estimation.add_argument('--fmax', type=float, help='Максимальная частота, Гц')
    estimation.add_argument('--fres', type=float, help='Разрешение по частоте, Гц')
    estimation.add_argument('--window', choices=('acg', 'hann', 'rect'))
    estimation.add_argument('--parts', type=int, help='Число частей для оценки дисперсии')
    estimation.add_argument('--segments', type=int, help='Окон в кадре')

    fitting = argparse.ArgumentParser(add_help=False)
    fitting.add_argument('--models', type=_csv_list, help='Кандидаты через запятую')
    fitting.add_argument('--orders', type=lambda v: _csv_list(v, int), help='Порядки спектров через запятую')
    fitting.add_argument('--aic-form', choices=('log_rss', 'standard'))
    fitting.add_argument('--restarts', type=int)
    fitting.add_argument('--noise-floor', action='store_true', default=None, help='Свободный белый пол в S²')
    fitting.add_argument('--grid-stride', type=int, help='Прореживание сеток S³/S⁴ при подгонке')

    parser = argparse.ArgumentParser(prog='qpolyspec', description='Полиспектры и WTD сигналов детектора')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('simulate', parents=[common], help='Симуляция сигнала детектора')
    p.add_argument('--model', required=True)
    p.add_argument('--t-end', type=float)
    p.add_argument('--dt', type=float)
    p.add_argument('--noise', type=float, help='СКО шума на отсчёт')
    p.add_argument('--count', type=int, default=1)
    p.add_argument('--name', default='trace')
    p.add_argument('--format', choices=('raw', 'csv'))
    p.add_argument('--background', action='store_true', help='Дополнительно записать фон (только шум)')

    p = sub.add_parser('spectra', parents=[common, estimation], help='Оценка полиспектров')
    p.add_argument('--trace', required=True)
    p.add_argument('--order', type=int, nargs='+', choices=(1, 2, 3, 4), default=[2, 3, 4])
    p.add_argument('--background', help='Сигнал фона для вычитания')

    p = sub.add_parser('model-spectra', parents=[common, estimation], help='Аналитические спектры модели')
    p.add_argument('--model', required=True)
    p.add_argument('--order', type=int, nargs='+', choices=(1, 2, 3, 4), default=[2, 3, 4])
    p.add_argument('--grid', help='Файл спектра, сетку которого использовать')
    p.add_argument('--noise-floor', action='store_true', help='Добавить белый пол β²/4 в S²')

    p = sub.add_parser('wtd', parents=[common], help='Распределения времён ожидания')
    p.add_argument('--trace', required=True)
    p.add_argument('--levels', type=lambda v: _csv_list(v, float), help='low,high')
    p.add_argument('--form', choices=('mono', 'bi'))
    p.add_argument('--bins', type=int)
    p.add_argument('--hysteresis', type=float)

    for name, help_text in (('fit', 'Подгонка кандидатов с бутстрэпом'), ('scan', 'Ранжирование кандидатов по AIC')):
        p = sub.add_parser(name, parents=[common, fitting], help=help_text)
        p.add_argument('--data', required=True, help='Каталог со спектрами s<n>.json')
        if name == 'fit':
            p.add_argument('--bootstrap', type=int)

    p = sub.add_parser('pipeline', parents=[common, estimation, fitting], help='Полный конвейер')
    p.add_argument('--trace')
    p.add_argument('--model', help='Модель для симуляции и столбца истинных скоростей')
    p.add_argument('--background', help='Сигнал фона для вычитания')
    p.add_argument('--bootstrap', type=int)
    p.add_argument('--t-end', type=float)
    p.add_argument('--dt', type=float)
    p.add_argument('--noise', type=float)
    p.add_argument('--levels', type=lambda v: _csv_list(v, float))
    return parser


def overrides_from_args(args):
    """Флаги командной строки в виде точечных ключей RunConfig (None - не задано)."""
    mapping = {
        'seed': 'seed', 'output_dir': 'output_dir', 'threads': 'threads', 'plots': 'plots', 'format': 'format',
        'timestamps': 'timestamps',
        't_end': 'simulation.t_end', 'dt': 'simulation.dt', 'noise': 'simulation.noise_sigma',
        'fmax': 'estimation.f_max', 'fres': 'estimation.f_resolution', 'window': 'estimation.window',
        'parts': 'estimation.parts', 'segments': 'estimation.segments_per_frame', 'orders': 'estimation.orders',
        'models': 'fit.models', 'aic_form': 'fit.aic_form', 'restarts': 'fit.restarts',
        'noise_floor': 'fit.noise_floor', 'grid_stride': 'fit.grid_stride', 'bootstrap': 'fit.bootstrap',
        'form': 'wtd.form', 'bins': 'wtd.bins', 'hysteresis': 'wtd.hysteresis',
    }
    values = vars(args)
    overrides = {key: values.get(name) for name, key in mapping.items()}
    if args.command in ('pipeline', 'wtd') and values.get('levels'):
        overrides['wtd.levels'] = values['levels']
    if args.command == 'model-spectra':
        overrides['fit.noise_floor'] = None
    return overrides


def main(argv=None):
    """Главная функция; возвращает код завершения."""
    args = build_parser().parse_args(argv)
    runner = None
    try:
        config = RunConfig(args.config, overrides_from_args(args))
        runner = QpolyspecRunner(config)
        runner.log('=' * 60)
        runner.log(f'qpolyspec {args.command}, зерно {config.seed}, вывод в {config.output_dir}')
        runner.log('=' * 60)
        COMMANDS[args.command](runner, args)
        runner.log(f'✅ {args.command} завершено')
        return 0
    except StageFailed as e:
        log_message('Qpolyspec', f'❌ {e}')
        return 1
    except QpolyspecError as e:
        log_message('Qpolyspec', f'❌ {type(e).__name__}: {e}')
        return 1
    except KeyboardInterrupt:
        print('\n\n[Qpolyspec] Прервано пользователем')
        return 130
    finally:
        if runner is not None:
            try:
                runner.finish(args.command)
            except OSError as e:
                log_message('Qpolyspec', f'⚠ Манифест не записан: {e}')


if __name__ == '__main__':
    sys.exit(main())
