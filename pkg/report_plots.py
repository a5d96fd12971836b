#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
PNG-графики для отчётов: спектры (с модельной кривой), карты S³/S⁴ и гистограммы WTD.
Основной результат - CSV; графики строятся только по флагу --plots.
"""

import matplotlib
# Используем безоконный backend, чтобы работать без дисплея
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np

from config_manager import log_message


def _save(fig, output_path, log_callback):
    fig.tight_layout()
    fig.savefig(output_path, dpi=150, bbox_inches='tight')
    plt.close(fig)
    log_message('Plots', f'✓ График сохранен: {output_path}', log_callback)
    return str(output_path)


def plot_s2(estimate, output_path, model=None, log_callback=None):
    """
    S² с полосой ±2σ и модельной кривой.

    Returns:
        str: Путь к файлу или None при ошибке
    """
    try:
        f = estimate.grid[0]
        sigma = np.sqrt(np.clip(estimate.variance, 0, None))
        fig, ax = plt.subplots(figsize=(10, 5))
        ax.plot(f, estimate.values, linewidth=1.5, color='blue', alpha=0.8, label='оценка')
        ax.fill_between(f, estimate.values - 2 * sigma, estimate.values + 2 * sigma, alpha=0.3, color='blue')
        if model is not None:
            ax.plot(model.grid[0], model.values, linewidth=1.5, color='red', linestyle='--', label='модель')
        ax.set_xlabel('f, Гц', fontsize=12)
        ax.set_ylabel('S²(f)', fontsize=12)
        ax.set_title('Спектр второго порядка', fontsize=14, fontweight='bold')
        ax.grid(True, alpha=0.3)
        ax.legend()
        return _save(fig, output_path, log_callback)
    except Exception as e:
        log_message('Plots', f'❌ Ошибка при создании графика S²: {e}', log_callback)
        return None


def plot_map(estimate, output_path, model=None, log_callback=None):
    """Карта S³ или S⁴ (слева оценка, справа модель, если задана)."""
    try:
        panels = [(estimate, 'оценка')] + ([(model, 'модель')] if model is not None else [])
        fig, axes = plt.subplots(1, len(panels), figsize=(6 * len(panels), 5), squeeze=False)
        scale = np.nanmax(np.abs(estimate.values)) or 1.0
        for ax, (spectrum, title) in zip(axes[0], panels):
            f1, f2 = spectrum.grid
            mesh = ax.pcolormesh(f2, f1, spectrum.values, cmap='RdBu_r', vmin=-scale, vmax=scale, shading='auto')
            ax.set_xlabel('f₂, Гц')
            ax.set_ylabel('f₁, Гц')
            ax.set_title(f'S{estimate.order}: {title}')
            fig.colorbar(mesh, ax=ax)
        return _save(fig, output_path, log_callback)
    except Exception as e:
        log_message('Plots', f'❌ Ошибка при создании карты S{estimate.order}: {e}', log_callback)
        return None


def plot_wtd(hist, output_path, analytic=None, log_callback=None):
    """Гистограмма WTD в логарифмическом масштабе с подогнанной плотностью."""
    try:
        centers = hist.centers
        density = hist.density()
        fig, ax = plt.subplots(figsize=(8, 5))
        ax.bar(centers, density, width=np.diff(hist.bin_edges), alpha=0.5, color='blue', label='данные')
        if analytic is not None:
            tau = np.linspace(hist.bin_edges[0], hist.bin_edges[-1], 400)
            ax.plot(tau, analytic.density(tau), color='red', linewidth=2, label=f'подгонка ({analytic.form})')
        positive = density[density > 0]
        if len(positive):
            ax.set_yscale('log')
            ax.set_ylim(bottom=positive.min() / 2)
        ax.set_xlabel('τ, с', fontsize=12)
        ax.set_ylabel('w(τ), 1/с', fontsize=12)
        ax.set_title(f'WTD уровня {hist.level_tag}', fontsize=14, fontweight='bold')
        ax.grid(True, alpha=0.3)
        ax.legend()
        stats_text = f'Интервалов: {hist.total_dwells}\nСреднее: {np.mean(hist.dwells) * 1e3:.3f} мс' \
            if hist.dwells is not None and len(hist.dwells) else f'Интервалов: {hist.total_dwells}'
        ax.text(0.98, 0.98, stats_text, transform=ax.transAxes, verticalalignment='top', horizontalalignment='right',
                bbox=dict(boxstyle='round', facecolor='wheat', alpha=0.8))
        return _save(fig, output_path, log_callback)
    except Exception as e:
        log_message('Plots', f'❌ Ошибка при создании графика WTD: {e}', log_callback)
        return None


def plot_spectrum(estimate, output_path, model=None, log_callback=None):
    """График спектра подходящего вида; для S¹ графика нет."""
    if estimate.order == 2:
        return plot_s2(estimate, output_path, model, log_callback)
    if estimate.order in (3, 4):
        return plot_map(estimate, output_path, model, log_callback)
    return None
