# -*- coding: utf-8 -*-
"""
Normalized auto- and cross-correlation over lags.

rho_xy(k) = 1 / (N_k sigma_x sigma_y) * sum_t (x_t - mean x)(y_{t+k} - mean y)

The sum runs over the N_k = N - |k| overlapping indices; means and
(population) standard deviations are taken over the full series. The 1/N_k
factor keeps rho_xx(0) = 1; far from lag 0 it can push |rho| slightly
above 1, normalization='total' (divide by N) bounds every lag by 1.

Sign convention: if y lags x by d days (y_t = x_{t-d}) the curve peaks at k = +d.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from core.errors import NumericError, UsageError
from core.features import preprocess_group
from core.ingest import DEFAULT_SPLIT, AlignedGroup, fill_missing
from modules.setup_logger import logger


logger = logging.getLogger(__name__)

ESTIMATOR_NOTES = {
    'overlap': "means and deviations over the full series, covariance averaged over the N-|k| overlapping points",
    'total': "means and deviations over the full series, covariance summed over the overlap and divided by N",
}


@dataclass
class CorrelationConfig:
    max_lag: int = 20
    representation: str = 'normalized'
    normalization: str = 'overlap'

    def __post_init__(self):
        if self.max_lag < 0:
            raise UsageError(f"max_lag must be >= 0, got {self.max_lag}")
        if self.representation not in ('normalized', 'close'):
            raise UsageError(f"representation must be 'normalized' or 'close', got {self.representation!r}")
        if self.normalization not in ESTIMATOR_NOTES:
            raise UsageError(f"normalization must be one of {list(ESTIMATOR_NOTES)}, got {self.normalization!r}")


@dataclass
class CorrelationCurve:
    """rho per lag for one (base, other) pair"""
    base: str
    other: str
    lags: np.ndarray
    values: np.ndarray

    def at(self, lag: int) -> float:
        return float(self.values[int(np.flatnonzero(self.lags == lag)[0])])

    @property
    def peak_lag(self) -> int:
        return int(self.lags[np.argmax(self.values)])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'lag': self.lags, 'rho': self.values})


def cross_correlation(x, y, max_lag: int, base: str = 'x', other: str = 'y',
                      normalization: str = 'overlap') -> CorrelationCurve:
    """
    Normalized cross-correlation for lags -max_lag .. max_lag

    :param x: Base series
    :param y: Other series, same length as x
    :param max_lag: K, 0 <= K < N
    :param normalization: 'overlap' divides lag k by N-|k|, 'total' by N which
        bounds |rho| by 1 at every lag
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(x)
    if len(y) != n:
        raise UsageError(f"Series lengths differ: {n} and {len(y)}")
    if not 0 <= max_lag < n:
        raise UsageError(f"max_lag must be in [0, {n}), got {max_lag}")
    if np.isnan(x).any() or np.isnan(y).any():
        raise NumericError("Correlation input contains NaN")
    if normalization not in ESTIMATOR_NOTES:
        raise UsageError(f"Unknown normalization {normalization!r}")
    sx, sy = x.std(), y.std()
    if sx == 0 or sy == 0:
        raise NumericError("Correlation of a constant series is undefined")

    # full[n - 1 + k] = sum_t xc_t * yc_{t+k}
    full = np.correlate(y - y.mean(), x - x.mean(), mode='full')
    lags = np.arange(-max_lag, max_lag + 1)
    sums = full[n - 1 + lags]
    counts = n - np.abs(lags) if normalization == 'overlap' else np.full(len(lags), n)
    values = sums / (counts * sx * sy)
    return CorrelationCurve(base, other, lags, values)


def autocorrelation(x, max_lag: int, name: str = 'x') -> CorrelationCurve:
    return cross_correlation(x, x, max_lag, name, name)


@dataclass
class CorrelationReport:
    """Curves of every member against a base ticker plus the lag-0 summary"""
    base: str
    representation: str
    curves: list

    @property
    def summary(self) -> pd.DataFrame:
        return pd.DataFrame({
            'base': [c.base for c in self.curves],
            'other': [c.other for c in self.curves],
            'rho_lag0': [c.at(0) for c in self.curves],
        })

    def ranking(self) -> pd.DataFrame:
        """Partners ordered by lag-0 coefficient, autocorrelation excluded"""
        s = self.summary.iloc[1:]
        return s.sort_values('rho_lag0', ascending=False, kind='mergesort').reset_index(drop=True)


def correlation_report(group: AlignedGroup, base: str, max_lag: int,
                       representation: str = 'normalized', ma_window: int = 14,
                       ratios: tuple = DEFAULT_SPLIT, normalization: str = 'overlap') -> CorrelationReport:
    """
    Correlate every member of a group against base

    :param representation: 'normalized' correlates the preprocessed normalized
        percentage change series, 'close' the filled close prices
    :returns: CorrelationReport, first curve is the base autocorrelation
    """
    if base not in group.tickers:
        raise UsageError(f"Base ticker {base!r} not in group {group.tickers}")
    if not group.filled:
        group = fill_missing(group)

    if representation == 'normalized':
        frame = preprocess_group(group, ma_window, ratios).normalized
    elif representation == 'close':
        frame = group.closes
    else:
        raise UsageError(f"Unknown representation {representation!r}")
    logger.info("Estimator: %s", ESTIMATOR_NOTES.get(normalization, normalization))

    others = [t for t in group.tickers if t != base]
    curves = []
    for other in [base] + others:
        pair = frame[[base, other]].dropna() if other != base else frame[[base]].dropna()
        x = pair[base].to_numpy()
        y = pair[other].to_numpy() if other != base else x
        curve = cross_correlation(x, y, max_lag, base, other, normalization)
        logger.info("rho(%s, %s) at lag 0: %.4f over %d points", base, other, curve.at(0), len(x))
        curves.append(curve)
    return CorrelationReport(base, representation, curves)
