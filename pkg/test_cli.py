import glob
import math
import os

import numpy as np
import pandas as pd
import pytest
import yaml

from core.errors import ConfigError
from core.runconfig import FIELD_DOCS, RunConfig
from forecast import EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_TRAINING, run

TINY_MODEL = {'k': 2, 'd_model': 4, 'n_heads': 2, 'n_layers': 1, 'd_ff': 6, 'dropout_p': 0.0, 'window': 4}
QUICK_TRAIN = {'max_epochs': 2, 'patience': 5, 'batch_size': 16}


@pytest.fixture
def project(tmp_path, write_prices, trading_days, random_walk):
    """Two correlated tickers and a matching run configuration"""
    days = trading_days(260)
    a = random_walk(260, seed=1)
    write_prices('A', days, a)
    write_prices('B', days, a * np.exp(np.random.default_rng(2).normal(0, 0.003, 260)))

    def _config(**changes):
        doc = {'data': {'A': 'A.csv', 'B': 'B.csv'}, 'targets': ['A'], 'out': str(tmp_path / 'out'),
               'name': 'run', 'model': dict(TINY_MODEL), 'train': dict(QUICK_TRAIN)}
        doc.update(changes)
        path = tmp_path / 'run.yml'
        path.write_text(yaml.safe_dump(doc))
        return str(path)
    return _config


def _out(tmp_path, name):
    return os.path.join(str(tmp_path), 'out', f"run_{name}")


def _cli(*args):
    return run(list(args) + ['-q', '-L', 'E'])


##################### TRAIN AND PREDICT #########################

def test_train_writes_artifacts(project, tmp_path):
    assert _cli('train', '--config', project()) == EXIT_OK
    history = pd.read_csv(_out(tmp_path, 'history.csv'))
    assert list(history.columns) == ['epoch', 'train_loss', 'val_loss']
    metrics = pd.read_csv(_out(tmp_path, 'metrics.csv'))
    assert list(metrics.columns) == ['target', 'model', 'scale', 'rmse', 'mse', 'mape', 'mae', 'r2']
    assert set(metrics['scale']) == {'normalized', 'close'}
    predictions = pd.read_csv(_out(tmp_path, 'predictions_A.csv'))
    assert list(predictions.columns) == ['date', 'predicted_norm', 'actual_norm', 'predicted_close',
                                         'actual_close']
    stage = pd.read_csv(_out(tmp_path, 'moving_average_B.csv'))
    assert list(stage.columns) == ['date', 'value']
    assert os.path.exists(_out(tmp_path, 'checkpoint.bin'))
    assert os.path.exists(_out(tmp_path, 'checkpoint.bin.yml'))

    manifest = yaml.safe_load(open(os.path.join(str(tmp_path), 'out', 'manifest.yml')))
    assert manifest['command'] == 'train'
    assert manifest['seed'] == 0
    assert 'run_metrics.csv' in manifest['artifacts']
    assert len(manifest['artifacts']['run_checkpoint.bin']) == 64


def test_rerun_is_byte_identical(project, tmp_path):
    config = project()
    first, second = str(tmp_path / 'first'), str(tmp_path / 'second')
    assert _cli('train', '--config', config, '--out', first) == EXIT_OK
    assert _cli('train', '--config', config, '--out', second) == EXIT_OK
    for name in ('run_metrics.csv', 'run_predictions_A.csv', 'run_history.csv', 'run_checkpoint.bin'):
        with open(os.path.join(first, name), 'rb') as f1, open(os.path.join(second, name), 'rb') as f2:
            assert f1.read() == f2.read(), name


def test_predictions_cover_the_test_range(project, tmp_path):
    assert _cli('train', '--config', project()) == EXIT_OK
    aggregate = pd.read_csv(_out(tmp_path, 'aggregate.csv'))['date']
    test_dates = aggregate.iloc[math.floor(0.9 * len(aggregate)):].tolist()
    predictions = pd.read_csv(_out(tmp_path, 'predictions_A.csv'))
    assert predictions['date'].tolist() == test_dates


def test_predict_reproduces_training_predictions(project, tmp_path):
    config = project()
    assert _cli('train', '--config', config) == EXIT_OK
    with open(_out(tmp_path, 'predictions_A.csv'), 'rb') as f:
        trained = f.read()
    assert _cli('predict', '--config', config) == EXIT_OK
    with open(_out(tmp_path, 'predictions_A.csv'), 'rb') as f:
        assert f.read() == trained
    assert os.path.exists(_out(tmp_path, 'predict_metrics.csv'))


def test_autoregressive_predict(project, tmp_path):
    config = project()
    assert _cli('train', '--config', config) == EXIT_OK
    forced = pd.read_csv(_out(tmp_path, 'predictions_A.csv'))
    assert _cli('predict', '--config', config, '--autoregressive') == EXIT_OK
    free = pd.read_csv(_out(tmp_path, 'predictions_A.csv'))
    assert free['date'].tolist() == forced['date'].tolist()
    assert free['predicted_close'].iloc[0] == forced['predicted_close'].iloc[0]
    np.testing.assert_array_equal(free['predicted_norm'], forced['predicted_norm'])


def test_single_feature_run_per_target(project, tmp_path):
    config = project()
    assert _cli('train', '--config', config, '--single-feature', '--target', 'A', '--target', 'B') == EXIT_OK
    for t in ('A', 'B'):
        assert os.path.exists(_out(tmp_path, f'checkpoint_{t}.bin'))
        assert os.path.exists(_out(tmp_path, f'history_{t}.csv'))
        assert os.path.exists(_out(tmp_path, f'predictions_{t}.csv'))
    assert _cli('predict', '--config', config, '--single-feature', '--target', 'A', '--target', 'B') == EXIT_OK


def test_metrics_rescoring(project, tmp_path):
    config = project()
    assert _cli('train', '--config', config) == EXIT_OK
    assert _cli('metrics', '--config', config, _out(tmp_path, 'predictions_A.csv')) == EXIT_OK
    rescored = pd.read_csv(_out(tmp_path, 'rescored_run_predictions_A.csv')).set_index('scale')
    trained = pd.read_csv(_out(tmp_path, 'metrics.csv')).set_index('scale')
    for scale in ('normalized', 'close'):
        assert rescored.loc[scale, 'rmse'] == pytest.approx(trained.loc[scale, 'rmse'], rel=1e-12)
        assert rescored.loc[scale, 'r2'] == pytest.approx(trained.loc[scale, 'r2'], rel=1e-12)


def test_compare(project, tmp_path):
    assert _cli('compare', '--config', project(), '--seeds', '0', '1', '--variants', 'base', 'p') == EXIT_OK
    table = pd.read_csv(_out(tmp_path, 'comparison.csv'))
    assert list(dict.fromkeys(table['model'])) == ['TT2VFin single', 'TT2VFin', 'TT2VFin+p']
    assert len(table) == 6


##################### CORRELATE #########################

def test_correlate_single_ticker_writes_autocorrelation_only(project, tmp_path):
    assert _cli('correlate', '--config', project(data={'A': 'A.csv'})) == EXIT_OK
    written = sorted(os.path.basename(p) for p in glob.glob(os.path.join(str(tmp_path), 'out', 'run_*')))
    assert written == ['run_correlation_A_A.csv']
    curve = pd.read_csv(_out(tmp_path, 'correlation_A_A.csv'))
    assert len(curve) == 41
    assert curve.loc[curve['lag'] == 0, 'rho'].iloc[0] == pytest.approx(1.0, abs=1e-12)


def test_correlate_pair(project, tmp_path):
    assert _cli('correlate', '--config', project()) == EXIT_OK
    summary = pd.read_csv(_out(tmp_path, 'correlation_summary.csv'))
    assert summary['other'].tolist() == ['A', 'B']
    assert summary['rho_lag0'].iloc[1] > 0.9


##################### FAILURES #########################

def test_unknown_target_is_a_config_error(project):
    assert _cli('train', '--config', project(), '--target', 'Z') == EXIT_CONFIG


@pytest.mark.parametrize('text', ['model: {layers: 3}\n', 'data: [unclosed\n', 'seed: many\n',
                                  'variant: lstm\ndata: {A: A.csv}\n'])
def test_bad_configuration(tmp_path, text):
    path = tmp_path / 'bad.yml'
    path.write_text(text)
    assert _cli('train', '--config', str(path), '--out', str(tmp_path / 'out')) == EXIT_CONFIG


def test_missing_config_file(tmp_path):
    assert _cli('train', '--config', str(tmp_path / 'nope.yml')) == EXIT_CONFIG


def test_missing_data_file_is_logged(project, tmp_path):
    config = project(data={'A': 'A.csv', 'C': 'missing.csv'})
    assert _cli('train', '--config', config) == EXIT_DATA
    logs = glob.glob(os.path.join(str(tmp_path), 'out', 'runlogs', 'tt2vfin_train_*.log'))
    assert logs
    assert any('missing.csv' in open(p).read() for p in logs)


def test_truncated_checkpoint(project, tmp_path):
    config = project()
    assert _cli('train', '--config', config) == EXIT_OK
    path = _out(tmp_path, 'checkpoint.bin')
    with open(path, 'rb') as f:
        data = f.read()
    with open(path, 'wb') as f:
        f.write(data[:len(data) // 2])
    assert _cli('predict', '--config', config) == EXIT_DATA


def test_checkpoint_of_other_model(project, tmp_path):
    assert _cli('train', '--config', project()) == EXIT_OK
    assert _cli('predict', '--config', project(model=dict(TINY_MODEL, d_ff=8))) == EXIT_CONFIG


@pytest.mark.parametrize('pipeline', [{'ma_window': 3}, {'use_adj_close': True}, {'fit_bounds_on': 'all'},
                                      {'split': [0.7, 0.2, 0.1]}])
def test_checkpoint_of_other_pipeline(project, tmp_path, pipeline):
    assert _cli('train', '--config', project()) == EXIT_OK
    assert _cli('predict', '--config', project(pipeline=pipeline)) == EXIT_CONFIG


def test_inversion_mode_is_free_at_predict_time(project):
    assert _cli('train', '--config', project()) == EXIT_OK
    assert _cli('predict', '--config', project(pipeline={'inversion': 'autoregressive'})) == EXIT_OK


def test_divergence_exit_code(project):
    config = project(train=dict(QUICK_TRAIN, learning_rate=1e300))
    assert _cli('train', '--config', config) == EXIT_TRAINING


def test_help_lists_every_field(capsys):
    with pytest.raises(SystemExit) as info:
        run(['train', '--help'])
    assert info.value.code == 0
    out = capsys.readouterr().out
    with open(os.path.join(os.path.dirname(os.path.abspath(__file__)), 'testdata', 'help_fields.txt')) as f:
        expected = f.read().rstrip('\n')
    assert RunConfig.describe() == expected
    assert expected in out
    for key in FIELD_DOCS:
        assert f"{key} (default" in out, key
    for text in ("ma_window (default 14)", "learning_rate (default 0.001)", "d_model (default 64)",
                 "variant (default 'base')", "split (default (0.8, 0.1, 0.1))"):
        assert text in out
    for flag in ('--config', '--data', '--seed', '--out', '--target', '--variant', '--single-feature'):
        assert flag in out


##################### BENCHMARK #########################

@pytest.mark.slow
def test_sine_benchmark_through_train(tmp_path):
    config = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'config', 'sine.yml')
    out = str(tmp_path / 'sine')
    assert _cli('train', '--config', config, '--out', out) == EXIT_OK
    metrics = pd.read_csv(os.path.join(out, 'sine_metrics.csv'))
    normalized = metrics[metrics['scale'] == 'normalized'].iloc[0]
    assert normalized['r2'] > 0.95
    history = pd.read_csv(os.path.join(out, 'sine_history.csv'))
    assert len(history) <= 500


##################### RUN CONFIGURATION #########################

def test_relative_data_paths_follow_the_config_file(tmp_path):
    sub = tmp_path / 'cfg'
    sub.mkdir()
    path = sub / 'x.yml'
    path.write_text(yaml.safe_dump({'data': {'A': '../A.csv', 'B': '/abs/B.csv'}}))
    config = RunConfig.load(str(path))
    assert config.data['A'] == os.path.normpath(str(tmp_path / 'A.csv'))
    assert config.data['B'] == '/abs/B.csv'


def test_defaults_and_member_lists():
    config = RunConfig(data={'X': 'x.csv', 'Y': 'y.csv'})
    assert config.members == ['X', 'Y']
    assert config.target_list == ['X']
    assert config.model_config().use_time2vec
    assert config.train_config().seed == 0
    assert RunConfig(data={'X': 'x'}, variant='transformer-p', seed=3).model_config().use_time2vec is False
    assert RunConfig(data={'X': 'x'}, seed=3).train_config().seed == 3


@pytest.mark.parametrize('doc', [
    {'model': {'use_causal_mask': True}},
    {'train': {'seed': 4}},
    {'model': {'k': 'three'}},
    {'model': {'d_model': 4, 'n_heads': 3}},
    {'pipeline': {'split': [0.5, 0.5]}},
    {'correlation': {'normalization': 'bessel'}},
    {'data': {'A': 3}},
    {'colour': 'blue'},
    ['not', 'a', 'mapping'],
])
def test_invalid_documents(doc):
    with pytest.raises(ConfigError):
        RunConfig.from_document(doc)


def test_validate():
    with pytest.raises(ConfigError):
        RunConfig().validate()
    with pytest.raises(ConfigError):
        RunConfig(data={'A': 'a'}, group=['A', 'B']).validate()
    with pytest.raises(ConfigError):
        RunConfig(data={'A': 'a'}, targets=['B']).validate()
    odd = RunConfig.from_document({'data': {'A': 'a'}, 'variant': 'p',
                                   'model': {'d_model': 9, 'n_heads': 3}})
    with pytest.raises(ConfigError):
        odd.validate()


def test_overrides_skip_none():
    config = RunConfig(data={'A': 'a'}, seed=2).with_overrides(seed=None, name='other')
    assert config.seed == 2 and config.name == 'other'
    with pytest.raises(ConfigError):
        config.with_overrides(model={'k': 3})


def test_document_round_trip():
    config = RunConfig.from_document({'data': {'A': '/a.csv'}, 'variant': 'pm', 'seed': 5,
                                      'model': {'window': 16}, 'pipeline': {'ma_window': 7}})
    again = RunConfig.from_document(yaml.safe_load(yaml.safe_dump(config.to_document())))
    assert again == config
