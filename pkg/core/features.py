# -*- coding: utf-8 -*-
"""
Reversible preprocessing of close prices.

Forward chain, per ticker: fill -> moving average (z -> v) -> percentage
change (v -> y) -> min-max normalization (y -> x); the group is then reduced
to one series with GMNN. The inverse chain recovers close prices from
predicted normalized values: denormalize and clip (x^ -> y^) -> reverse
percentage change (y^ -> v^) -> reverse moving average (v^ -> z^).

Dating convention: y on day d is the change of the moving average from the
previous trading day into d, so every stage value on day d only depends on
closes up to d.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from core.errors import AggregationError, NumericError, UsageError
from core.ingest import DEFAULT_SPLIT, AlignedGroup, check_ratios, chronological_split, fill_missing
from modules.setup_logger import logger


logger = logging.getLogger(__name__)

STAGES = ('close', 'moving_average', 'pct_change', 'normalized', 'aggregate')


@dataclass
class PipelineConfig:
    """Preprocessing and inversion settings"""
    ma_window: int = 14
    use_adj_close: bool = False
    split: tuple = DEFAULT_SPLIT
    fit_bounds_on: str = 'train'
    inversion: str = 'forced'

    def __post_init__(self):
        self.split = tuple(float(r) for r in self.split)
        check_ratios(self.split)
        if self.ma_window < 1:
            raise UsageError(f"ma_window must be >= 1, got {self.ma_window}")
        if self.fit_bounds_on not in ('train', 'all'):
            raise UsageError(f"fit_bounds_on must be 'train' or 'all', got {self.fit_bounds_on!r}")
        if self.inversion not in ('forced', 'autoregressive'):
            raise UsageError(f"inversion must be 'forced' or 'autoregressive', got {self.inversion!r}")


##################### FORWARD CHAIN #########################

def moving_average(z, window: int = 14) -> np.ndarray:
    """
    Trailing mean v_t = mean(z_{t-W+1..t})

    :returns: len(z) - window + 1 values
    """
    z = np.asarray(z, dtype=float)
    if window < 1:
        raise UsageError(f"Moving average window must be >= 1, got {window}")
    if len(z) < window:
        raise UsageError(f"Series of length {len(z)} is shorter than the {window} day window")
    if np.isnan(z).any():
        raise NumericError("Moving average input contains NaN")
    windows = sliding_window_view(z, window)
    # flat windows keep their value exactly, the summed mean can drift by an ulp
    return np.where(np.ptp(windows, axis=1) == 0, windows[:, 0], windows.mean(axis=1))


def pct_change(v) -> np.ndarray:
    """One step relative change (v_{t+1} - v_t) / v_t"""
    v = np.asarray(v, dtype=float)
    if (v <= 0).any() or np.isnan(v).any():
        raise NumericError("Percentage change needs strictly positive values")
    return (v[1:] - v[:-1]) / v[:-1]


def _fit_values(y: np.ndarray, fit_range) -> np.ndarray:
    if fit_range is None:
        return y
    if isinstance(fit_range, range):
        fit_range = slice(fit_range.start, fit_range.stop)
    return y[fit_range]


def minmax_fit_transform(y, fit_range=None) -> tuple[np.ndarray, tuple[float, float]]:
    """
    Fit (min, max) on fit_range and rescale the whole series

    :param y: Series to normalize
    :param fit_range: range, slice or boolean mask selecting the fit points, None for all

    :returns: Normalized series (not clipped) and the fitted bounds
    """
    y = np.asarray(y, dtype=float)
    fit = _fit_values(y, fit_range)
    if fit.size == 0:
        raise UsageError("Normalization fit range is empty")
    bounds = (float(np.min(fit)), float(np.max(fit)))
    return minmax_transform(y, bounds), bounds


def minmax_transform(y, bounds: tuple[float, float]) -> np.ndarray:
    """Apply fitted bounds, values outside them leave [0, 1]"""
    lo, hi = bounds
    if not hi > lo:
        raise NumericError(f"Degenerate normalization bounds min={lo} max={hi}")
    return (np.asarray(y, dtype=float) - lo) / (hi - lo)


def gmnn_aggregate(columns, dates=None) -> np.ndarray:
    """
    Geometric mean per row, ignoring NaN

    Computed as exp(mean(log x)) over values in sorted order, so many small
    columns do not underflow and the column order does not matter. A zero
    gives 0; rows whose valid values all agree return that value.

    :param columns: [T] or [T x C] array, NaN allowed
    :param dates: Optional row labels used in error messages
    """
    values = np.asarray(columns, dtype=float)
    if values.ndim == 1:
        values = values.reshape(-1, 1)
    valid = ~np.isnan(values)
    count = valid.sum(axis=1)
    empty = np.flatnonzero(count == 0)
    if empty.size:
        row = empty[0]
        raise AggregationError(dates[row] if dates is not None else row)
    if (values[valid] < 0).any():
        raise NumericError("GMNN needs nonnegative values")

    ordered = np.sort(values, axis=1)
    with np.errstate(divide='ignore'):
        logs = np.where(np.isnan(ordered), 0.0, np.log(np.where(np.isnan(ordered), 1.0, ordered)))
    out = np.exp(logs.sum(axis=1) / count)
    out[(values == 0).any(axis=1)] = 0.0

    same = np.nanmax(values, axis=1) == np.nanmin(values, axis=1)
    out[same] = np.nanmax(values[same], axis=1)
    return out


##################### WINDOWS #########################

@dataclass
class SupervisedWindows:
    """
    Windows of W consecutive values and the value following each window

    target_index holds the position of each target in the source series.
    """
    inputs: np.ndarray
    targets: np.ndarray
    window: int
    target_index: np.ndarray
    dates: pd.DatetimeIndex = None

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise UsageError("Window and target counts differ")

    def __len__(self) -> int:
        return len(self.targets)

    def select(self, mask) -> 'SupervisedWindows':
        return SupervisedWindows(self.inputs[mask], self.targets[mask], self.window,
                                 self.target_index[mask],
                                 None if self.dates is None else self.dates[mask])


def make_windows(x, window: int, dates=None) -> SupervisedWindows:
    """Row i = x[i .. i+W-1], target i = x[i+W]"""
    x = np.asarray(x, dtype=float)
    if window < 1:
        raise UsageError(f"Window length must be >= 1, got {window}")
    if len(x) < window + 1:
        raise UsageError(f"Need at least {window + 1} points for windows of {window}, got {len(x)}")
    inputs = sliding_window_view(x[:-1], window).copy()
    target_index = np.arange(window, len(x))
    return SupervisedWindows(inputs, x[window:].copy(), window, target_index,
                             None if dates is None else pd.DatetimeIndex(dates)[window:])


def split_windows(windows: SupervisedWindows, ranges) -> tuple:
    """Assign every window to the range containing its target index"""
    parts = []
    for r in ranges:
        mask = (windows.target_index >= r.start) & (windows.target_index < r.stop)
        parts.append(windows.select(mask))
    return tuple(parts)


##################### INVERSE CHAIN #########################

def denormalize_clip(x_hat, bounds: tuple[float, float]):
    """y^ = clamp(x^, 0, 1) * (max - min) + min"""
    lo, hi = bounds
    return np.clip(x_hat, 0.0, 1.0) * (hi - lo) + lo


def reverse_pct_change(y_hat, v_prev):
    """v^_{t+1} = v_t * (1 + y^)"""
    if np.any(np.asarray(v_prev) <= 0):
        raise NumericError("Reverse percentage change needs a positive moving average")
    return v_prev * (1.0 + y_hat)


def reverse_moving_average(v_hat, history, window: int) -> float:
    """
    z^_{t+1} = W * v^_{t+1} - sum of the last W-1 raw closes

    :param history: Exactly window - 1 trailing closes
    """
    history = np.asarray(history, dtype=float)
    if len(history) != window - 1:
        raise UsageError(f"Reverse moving average needs {window - 1} trailing closes, got {len(history)}")
    return window * v_hat - history.sum()


@dataclass
class FeaturePipelineState:
    """
    Everything needed to invert the chain for one ticker

    closes and moving_average are the full histories (z and v) from the
    ticker's first record on; only the scalar fields are persisted.
    """
    ticker: str
    ma_window: int
    min: float
    max: float
    closes: pd.Series = field(default=None, repr=False)
    moving_average: pd.Series = field(default=None, repr=False)

    def __post_init__(self):
        if self.ma_window < 1:
            raise UsageError(f"ma_window must be >= 1, got {self.ma_window}")
        if not self.max > self.min:
            raise NumericError(f"{self.ticker}: degenerate bounds min={self.min} max={self.max}")

    @property
    def bounds(self) -> tuple[float, float]:
        return self.min, self.max

    def to_document(self) -> dict:
        return {'ticker': self.ticker, 'ma_window': int(self.ma_window),
                'min': float(self.min), 'max': float(self.max)}

    @classmethod
    def from_document(cls, doc: dict, closes: pd.Series = None) -> 'FeaturePipelineState':
        """Rebuild a state from its persisted fields and (optionally) the raw closes"""
        try:
            state = cls(str(doc['ticker']), int(doc['ma_window']), float(doc['min']), float(doc['max']))
        except KeyError as exc:
            raise UsageError(f"Pipeline state document lacks field {exc}")
        if closes is not None:
            z, v, _ = ticker_stages(closes, state.ma_window)
            state.closes, state.moving_average = z, v
        return state


def _positions(state: FeaturePipelineState, dates) -> np.ndarray:
    if state.closes is None or state.moving_average is None:
        raise UsageError(f"{state.ticker}: state carries no price history to invert against")
    try:
        pos = state.closes.index.get_indexer(pd.DatetimeIndex(dates))
    except Exception:
        raise UsageError(f"{state.ticker}: prediction dates are not comparable to the price history")
    if (pos < 0).any():
        missing = pd.DatetimeIndex(dates)[pos < 0][0]
        raise UsageError(f"{state.ticker}: no close recorded on {missing:%Y-%m-%d}")
    if (pos < state.ma_window).any():
        raise UsageError(f"{state.ticker}: not enough history to invert predictions before "
                         f"{state.closes.index[state.ma_window]:%Y-%m-%d}")
    return pos


def postprocess_for_target(x_hat: pd.Series, state: FeaturePipelineState,
                           mode: str = 'forced') -> pd.DataFrame:
    """
    Map predicted normalized values back to close prices of one ticker

    :param x_hat: Predictions indexed by the date they predict
    :param state: Fitted state of the ticker scored against
    :param mode: 'forced' inverts against true histories, 'autoregressive'
        feeds reconstructed values of earlier predicted days back in

    :returns: DataFrame indexed by date with predicted_pct, predicted_trend, predicted_close
    """
    if mode not in ('forced', 'autoregressive'):
        raise UsageError(f"Unknown inversion mode {mode!r}")
    x_hat = x_hat.sort_index()
    pos = _positions(state, x_hat.index)
    w = state.ma_window
    z = state.closes.to_numpy(dtype=float)
    v = state.moving_average.reindex(state.closes.index).to_numpy(dtype=float)

    y_hat = denormalize_clip(x_hat.to_numpy(dtype=float), state.bounds)
    v_hat = np.empty(len(pos))
    z_hat = np.empty(len(pos))
    if mode == 'forced':
        for j, p in enumerate(pos):
            v_hat[j] = reverse_pct_change(y_hat[j], v[p - 1])
            z_hat[j] = reverse_moving_average(v_hat[j], z[p - w + 1:p], w)
    else:
        z_run = z.copy()
        v_run = v.copy()
        for j, p in enumerate(pos):
            v_hat[j] = reverse_pct_change(y_hat[j], v_run[p - 1])
            z_hat[j] = reverse_moving_average(v_hat[j], z_run[p - w + 1:p], w)
            v_run[p], z_run[p] = v_hat[j], z_hat[j]

    return pd.DataFrame({'predicted_pct': y_hat, 'predicted_trend': v_hat, 'predicted_close': z_hat},
                        index=x_hat.index)


##################### GROUP PIPELINE #########################

def ticker_stages(closes: pd.Series, ma_window: int) -> tuple[pd.Series, pd.Series, pd.Series]:
    """
    z, v and y of one filled close column, starting at its first record

    :returns: closes z, moving average v, percentage change y (dated by the later day)
    """
    first = closes.first_valid_index()
    if first is None:
        raise UsageError(f"{closes.name}: no close prices")
    z = closes.loc[first:].astype(float)
    if z.isna().any():
        raise NumericError(f"{closes.name}: gaps left after filling")
    if len(z) < ma_window + 1:
        raise UsageError(f"{closes.name}: {len(z)} closes are too few for a {ma_window} day moving average")
    v = pd.Series(moving_average(z.to_numpy(), ma_window), index=z.index[ma_window - 1:], name=closes.name)
    y = pd.Series(pct_change(v.to_numpy()), index=v.index[1:], name=closes.name)
    return z, v, y


@dataclass
class PreprocessedGroup:
    """Output of the forward chain for a whole group"""
    states: dict
    stages: dict
    normalized: pd.DataFrame
    aggregate: pd.Series
    split: tuple
    ma_window: int

    @property
    def dates(self) -> pd.DatetimeIndex:
        return self.aggregate.index

    @property
    def tickers(self) -> list:
        return list(self.states)

    def windows(self, window: int) -> SupervisedWindows:
        return make_windows(self.aggregate.to_numpy(), window, self.aggregate.index)

    def split_dates(self) -> tuple:
        return tuple(self.dates[r.start:r.stop] for r in self.split)


def preprocess_group(group: AlignedGroup, ma_window: int = 14, ratios: tuple = DEFAULT_SPLIT,
                     fit_on: str = 'train', bounds: dict = None) -> PreprocessedGroup:
    """
    Run the forward chain on every ticker and aggregate with GMNN

    :param group: Aligned closes, filled here if not yet filled
    :param ma_window: Moving average window in trading days
    :param ratios: Train/val/test ratios over the aggregate calendar
    :param fit_on: 'train' fits bounds on train dates only, 'all' on the whole series
    :param bounds: Previously fitted bounds per ticker, reused instead of fitting

    :returns: PreprocessedGroup
    """
    if fit_on not in ('train', 'all'):
        raise UsageError(f"fit_on must be 'train' or 'all', got {fit_on!r}")
    if not group.filled:
        group = fill_missing(group)

    per_ticker = {t: ticker_stages(group.column(t), ma_window) for t in group.tickers}
    calendar = pd.DatetimeIndex(sorted(set().union(*(y.index for _, _, y in per_ticker.values()))),
                                name='date')
    split = chronological_split(len(calendar), ratios)
    train_end = calendar[split[0].stop - 1]
    logger.info("Aggregate calendar %s .. %s: %d train, %d val, %d test points",
                calendar[0].date(), calendar[-1].date(), *(len(r) for r in split))

    states, columns = {}, {}
    stages = {name: {} for name in STAGES[:-1]}
    for ticker, (z, v, y) in per_ticker.items():
        if bounds is not None and ticker in bounds:
            fitted = tuple(bounds[ticker])
            x = minmax_transform(y.to_numpy(), fitted)
        else:
            mask = (y.index <= train_end) if fit_on == 'train' else None
            if mask is not None and not mask.any():
                raise UsageError(f"{ticker}: no data inside the training range, cannot fit bounds")
            x, fitted = minmax_fit_transform(y.to_numpy(), mask)
        states[ticker] = FeaturePipelineState(ticker, ma_window, fitted[0], fitted[1], z, v)
        columns[ticker] = pd.Series(x, index=y.index, name=ticker)
        stages['close'][ticker] = z
        stages['moving_average'][ticker] = v
        stages['pct_change'][ticker] = y
        stages['normalized'][ticker] = columns[ticker]

    normalized = pd.DataFrame(columns).reindex(calendar)
    negative = int((normalized < 0).sum().sum())
    if negative:
        logger.warning("%d normalized values below the fitted minimum floored at 0 before GMNN", negative)
    aggregate = pd.Series(gmnn_aggregate(normalized.clip(lower=0).to_numpy(), calendar),
                          index=calendar, name='aggregate')

    frames = {name: pd.DataFrame(cols) for name, cols in stages.items()}
    frames['aggregate'] = aggregate.to_frame()
    return PreprocessedGroup(states, frames, normalized, aggregate, split, ma_window)
