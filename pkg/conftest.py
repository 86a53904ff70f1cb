"""
Shared fixtures: synthetic Yahoo Finance files, small model configurations
and the --runslow switch for the long benchmark runs.
"""
import numpy as np
import pandas as pd
import pytest

from core.ingest import COLUMNS
from core.model import ModelConfig


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False,
                     help='run the long benchmark tests')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long benchmark run, needs --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


def price_csv_text(dates, closes, adj=None, volume=1000) -> str:
    """Yahoo schema CSV text; NaN closes are written as null"""
    adj = closes if adj is None else adj
    lines = [','.join(COLUMNS)]
    for d, c, a in zip(pd.DatetimeIndex(dates), closes, adj):
        c_txt = 'null' if np.isnan(c) else repr(float(c))
        a_txt = 'null' if np.isnan(a) else repr(float(a))
        lines.append(f"{d:%Y-%m-%d},{c_txt},{c_txt},{c_txt},{c_txt},{a_txt},{volume}")
    return '\n'.join(lines) + '\n'


@pytest.fixture
def write_prices(tmp_path):
    """Factory writing <ticker>.csv below tmp_path, returns the path"""
    def _write(ticker, dates, closes, adj=None):
        path = tmp_path / f"{ticker}.csv"
        path.write_text(price_csv_text(dates, closes, adj))
        return str(path)
    return _write


@pytest.fixture
def trading_days():
    def _days(n, start='2015-01-05'):
        return pd.bdate_range(start, periods=n)
    return _days


@pytest.fixture
def random_walk():
    """Strictly positive geometric random walk"""
    def _walk(n, seed=0, start=100.0, vol=0.01):
        rng = np.random.default_rng(seed)
        return start * np.exp(np.cumsum(rng.normal(0, vol, n)))
    return _walk


@pytest.fixture
def tiny_config():
    """Small but complete architecture, fast enough for gradient checks"""
    return ModelConfig(k=2, d_model=4, n_heads=2, n_layers=1, d_ff=6, dropout_p=0.0, window=4)


@pytest.fixture
def small_config():
    return ModelConfig(k=3, d_model=8, n_heads=2, n_layers=1, d_ff=12, dropout_p=0.0, window=8)


@pytest.fixture
def sine_closes():
    """Noiseless sine close prices, period 50"""
    def _closes(n=400, period=50, level=100.0, amplitude=10.0):
        t = np.arange(n)
        return level + amplitude * np.sin(2 * np.pi * t / period)
    return _closes
