# -*- coding: utf-8 -*-
"""
Daily price files in the Yahoo Finance CSV schema.

Files are parsed into PriceSeries, a group of series is aligned on the union
of its trading days, gaps are forward filled and the aggregate length is cut
into chronological train/val/test ranges.
"""
from __future__ import annotations

import io
import logging
import math
import os
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import pandas as pd

from core.errors import IngestionError, UsageError
from modules.setup_logger import logger


logger = logging.getLogger(__name__)

COLUMNS = ['Date', 'Open', 'High', 'Low', 'Close', 'Adj Close', 'Volume']
PRICE_COLUMNS = ['Open', 'High', 'Low', 'Close', 'Adj Close']
EMPTY_FIELDS = {'', 'null'}

DEFAULT_SPLIT = (0.8, 0.1, 0.1)


@dataclass(frozen=True)
class PriceRecord:
    """One trading day of one ticker"""
    date: pd.Timestamp
    open: float
    high: float
    low: float
    close: float
    adj_close: float
    volume: float


@dataclass(frozen=True)
class PriceSeries:
    """
    Date ordered daily records of one ticker

    frame is indexed by date with columns open, high, low, close, adj_close, volume.
    A NaN close marks a gap reported by the data source.
    """
    ticker: str
    frame: pd.DataFrame

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def dates(self) -> pd.DatetimeIndex:
        return self.frame.index

    def records(self) -> list[PriceRecord]:
        return [PriceRecord(date, *row) for date, row in zip(
            self.frame.index, self.frame.itertuples(index=False, name=None))]

    def close(self, adjusted: bool = False) -> pd.Series:
        """Close (or adjusted close) column named after the ticker"""
        column = 'adj_close' if adjusted else 'close'
        return self.frame[column].rename(self.ticker)


@dataclass(frozen=True)
class AlignedGroup:
    """
    Close columns of several tickers on their union calendar

    closes has one column per ticker, NaN where a ticker has no record.
    """
    closes: pd.DataFrame
    filled: bool = False

    @property
    def calendar(self) -> pd.DatetimeIndex:
        return self.closes.index

    @property
    def tickers(self) -> list[str]:
        return list(self.closes.columns)

    def __len__(self) -> int:
        return len(self.closes)

    def column(self, ticker: str) -> pd.Series:
        if ticker not in self.closes.columns:
            raise UsageError(f"Ticker {ticker!r} not in group {self.tickers}")
        return self.closes[ticker]

    def first_dates(self) -> dict:
        """First date with a record, per ticker"""
        return {t: self.closes[t].first_valid_index() for t in self.closes.columns}


##################### PARSING #########################

def _parse_number(text, row: int, field: str) -> float:
    text = text.strip() if isinstance(text, str) else ''
    if text in EMPTY_FIELDS:
        return np.nan
    try:
        return float(text)
    except ValueError:
        raise IngestionError(f"Unparsable number {text!r}", row=row, field=field)


def parse_csv(stream, ticker: str = '', adjusted: bool = False) -> PriceSeries:
    """
    Parse one Yahoo Finance daily history

    :param stream: Open text stream, path, or CSV text
    :param ticker: Identifier stored on the series
    :param adjusted: Validate positivity on the adjusted close instead of close

    :returns: PriceSeries sorted by date
    """
    if isinstance(stream, str) and '\n' in stream:
        stream = io.StringIO(stream)
    try:
        raw = pd.read_csv(stream, dtype=str, keep_default_na=False, skipinitialspace=False)
    except pd.errors.EmptyDataError:
        raise IngestionError("File is empty")
    except pd.errors.ParserError as exc:
        raise IngestionError(f"Malformed CSV: {exc}")

    header = [c.strip() for c in raw.columns]
    missing = [c for c in COLUMNS if c not in header]
    if missing:
        raise IngestionError(f"Missing column(s) {missing}, expected header {','.join(COLUMNS)}",
                             field=missing[0])
    if header != COLUMNS:
        raise IngestionError(f"Header {','.join(header)} does not match {','.join(COLUMNS)}")
    if raw.empty:
        raise IngestionError("File has a header but no records")

    dates, rows = [], []
    for i, values in enumerate(raw.itertuples(index=False, name=None), start=1):
        text = values[0].strip() if isinstance(values[0], str) else ''
        try:
            date = pd.Timestamp(pd.to_datetime(text, format='%Y-%m-%d'))
        except (ValueError, TypeError):
            raise IngestionError(f"Unparsable date {values[0]!r}", row=i, field='Date')
        if pd.isna(date):
            raise IngestionError("Empty date", row=i, field='Date')
        numbers = [_parse_number(v, i, c) for v, c in zip(values[1:], COLUMNS[1:])]
        close = numbers[4] if adjusted else numbers[3]
        if not np.isnan(close) and close <= 0:
            raise IngestionError(f"Close must be positive, got {close}", row=i,
                                 field='Adj Close' if adjusted else 'Close')
        if not np.isnan(numbers[5]) and numbers[5] < 0:
            raise IngestionError(f"Volume must be nonnegative, got {numbers[5]}", row=i, field='Volume')
        dates.append(date)
        rows.append(numbers)

    frame = pd.DataFrame(rows, index=pd.DatetimeIndex(dates, name='date'),
                         columns=['open', 'high', 'low', 'close', 'adj_close', 'volume'])
    duplicated = frame.index[frame.index.duplicated()]
    if len(duplicated):
        first = duplicated[0]
        row = int(np.flatnonzero(frame.index == first)[1]) + 1
        raise IngestionError(f"Duplicate date {first:%Y-%m-%d}", row=row, field='Date')

    frame = frame.sort_index(kind='mergesort')
    logger.debug("Parsed %d records for %s (%s .. %s)", len(frame), ticker or '<unnamed>',
                 frame.index[0].date(), frame.index[-1].date())
    return PriceSeries(ticker, frame)


def load_csv(path: str, ticker: str = None, adjusted: bool = False) -> PriceSeries:
    """Parse a file, ticker defaults to the file name without extension"""
    if ticker is None:
        ticker = os.path.splitext(os.path.basename(path))[0]
    with open(path, 'r', encoding='utf-8') as stream:
        series = parse_csv(stream, ticker, adjusted)
    logger.info("Loaded %s: %d records from %s", ticker, len(series), path)
    return series


##################### ALIGNMENT #########################

def align_group(series: list[PriceSeries], adjusted: bool = False) -> AlignedGroup:
    """
    Put close columns on the sorted union of all dates, NaN where absent

    A ticker appearing twice gets a '#2', '#3' ... suffix on its column.
    """
    if not series:
        raise UsageError("align_group needs at least one series")

    columns, seen = {}, {}
    for s in series:
        seen[s.ticker] = seen.get(s.ticker, 0) + 1
        name = s.ticker if seen[s.ticker] == 1 else f"{s.ticker}#{seen[s.ticker]}"
        columns[name] = s.close(adjusted)
    closes = pd.concat(columns, axis=1, join='outer').sort_index()
    closes.index.name = 'date'
    return AlignedGroup(closes, filled=False)


def fill_missing(group: AlignedGroup) -> AlignedGroup:
    """Forward fill interior and trailing gaps; NaN before a ticker's first record stays"""
    filled = group.closes.ffill()
    n_filled = int(group.closes.isna().sum().sum() - filled.isna().sum().sum())
    if n_filled:
        logger.info("Forward filled %d missing closes", n_filled)
    return AlignedGroup(filled, filled=True)


##################### SPLITS #########################

def check_ratios(ratios) -> list:
    """Exact train/val/test ratios, three positive values summing to 1"""
    if len(ratios) != 3:
        raise UsageError(f"Expected three split ratios, got {ratios}")
    exact = [Fraction(str(r)) for r in ratios]
    if any(r <= 0 for r in exact) or sum(exact) != 1:
        raise UsageError(f"Split ratios must be positive and sum to 1, got {ratios}")
    return exact


def chronological_split(n: int, ratios: tuple = DEFAULT_SPLIT) -> tuple[range, range, range]:
    """
    Contiguous train/val/test index ranges

    Boundaries are floor(r_train * n) and floor((r_train + r_val) * n); the
    remainder goes to the test range.
    """
    exact = check_ratios(ratios)
    if n < 10:
        raise UsageError(f"Need at least 10 points to split, got {n}")

    b1 = math.floor(exact[0] * n)
    b2 = math.floor((exact[0] + exact[1]) * n)
    if not 0 < b1 < b2 < n:
        raise UsageError(f"Split of {n} points with ratios {ratios} leaves an empty range")
    return range(0, b1), range(b1, b2), range(b2, n)
