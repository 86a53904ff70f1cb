# -*- coding: utf-8 -*-
"""
Loss, optimizer, training loop and evaluation metrics.

Protocol: windows are assigned to train/val/test by the index of their
target, the model is fitted on train windows, early stopped on val loss and
scored on the test windows only.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from core import numerics as nx
from core.errors import NumericError, TrainingError, UsageError
from core.features import (PipelineConfig, PreprocessedGroup, SupervisedWindows,
                           postprocess_for_target, preprocess_group, split_windows)
from core.ingest import AlignedGroup, fill_missing
from core.model import (VARIANTS, ModelConfig, ParameterSet, TT2VFin, init_parameters,
                        model_forward)
from modules.setup_logger import logger
from utils.utils import progress


logger = logging.getLogger(__name__)

METRIC_COLUMNS = ['rmse', 'mse', 'mape', 'mae', 'r2']
HISTORY_COLUMNS = ['epoch', 'train_loss', 'val_loss']
PREDICTION_COLUMNS = ['predicted_norm', 'actual_norm', 'predicted_close', 'actual_close']

MODEL_LABELS = {
    'base': 'TT2VFin',
    'p': 'TT2VFin+p',
    'm': 'TT2VFin+m',
    'pm': 'TT2VFin+pm',
    'transformer-p': 'Transformer+p',
}


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 500
    patience: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    log_every: int = 10

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise UsageError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise UsageError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1 or self.patience < 0:
            raise UsageError("max_epochs must be >= 1 and patience >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise UsageError(f"Moment decays must be in [0, 1), got {self.beta1}, {self.beta2}")
        if not self.eps > 0:
            raise UsageError(f"eps must be positive, got {self.eps}")


##################### LOSS AND OPTIMIZER #########################

def mse_loss(pred, target) -> nx.NDArray:
    """Mean of squared differences, differentiable in pred"""
    pred = nx.as_array(pred)
    target = np.asarray(target.value if isinstance(target, nx.NDArray) else target, dtype=float)
    if pred.shape != target.shape:
        raise UsageError(f"Prediction shape {pred.shape} does not match target shape {target.shape}")
    if pred.size == 0:
        raise UsageError("mse_loss of empty vectors")
    diff = nx.subtract(pred, target)
    return nx.mean(nx.multiply(diff, diff))


@dataclass
class AdamState:
    """First and second moments per parameter name, plus the step counter"""
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params: ParameterSet) -> 'AdamState':
        return cls({n: np.zeros(a.shape) for n, a in params.items()},
                   {n: np.zeros(a.shape) for n, a in params.items()}, 0)


def adam_step(params: ParameterSet, grads: dict, state: AdamState,
              config: TrainConfig) -> tuple[ParameterSet, AdamState]:
    """
    One bias corrected adaptive moment update

    :param grads: Parameter name -> gradient array
    :returns: New parameter set and new state, inputs are left untouched
    """
    for name in params:
        if not np.isfinite(grads[name]).all():
            raise TrainingError(f"Non-finite gradient for {name}", parameter=name)

    step = state.step + 1
    b1, b2 = config.beta1, config.beta2
    m, v, updated = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m[name] = b1 * state.m[name] + (1 - b1) * g
        v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m[name] / (1 - b1 ** step)
        v_hat = v[name] / (1 - b2 ** step)
        updated[name] = p.value - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
    new = params.replace(updated)
    if not new.all_finite():
        raise TrainingError("Parameters became non-finite after an optimizer step")
    return new, AdamState(m, v, step)


##################### TRAINING #########################

@dataclass
class TrainResult:
    params: ParameterSet
    history: pd.DataFrame
    best_epoch: int
    best_val_loss: float


def _shuffle_generator(seed: int) -> np.random.Generator:
    # jumped Philox stream, disjoint from the initialization stream of the same seed
    return np.random.Generator(np.random.Philox(seed).jumped())


def dataset_loss(config: ModelConfig, params: ParameterSet, windows: SupervisedWindows,
                 batch_size: int = 256) -> float:
    """Eval mode MSE over a whole window set"""
    total = 0.0
    for start in range(0, len(windows), batch_size):
        pred = model_forward(windows.inputs[start:start + batch_size], config, params, 'eval')
        total += float(np.sum((pred.value - windows.targets[start:start + batch_size]) ** 2))
    return total / len(windows)


def train(config: ModelConfig, data: tuple, train_config: TrainConfig,
          params: ParameterSet = None, show_progress: bool = True) -> TrainResult:
    """
    Fit a model with Adam on MSE, early stopped on validation loss

    :param config: Model configuration
    :param data: (train, val) SupervisedWindows; anything after val is ignored
    :param train_config: Optimizer and schedule settings
    :param params: Starting parameters, seeded initialization if None
    :param show_progress: Display a tqdm bar over epochs

    :returns: TrainResult holding the best validation epoch's parameters
    """
    train_w, val_w = data[0], data[1]
    if len(train_w) == 0 or len(val_w) == 0:
        raise UsageError(f"Need nonempty train and val sets, got {len(train_w)} and {len(val_w)} windows")
    if train_w.window != config.window:
        raise UsageError(f"Windows of length {train_w.window} do not fit model window {config.window}")

    params = params if params is not None else init_parameters(config, train_config.seed)
    rng = _shuffle_generator(train_config.seed)
    state = AdamState.zeros(params)
    best_loss, best_params, best_epoch = math.inf, params, 0
    since_best = 0
    rows = []
    n = len(train_w)
    bs = train_config.batch_size
    logger.info("Training %s (%d parameters) on %d windows, validating on %d",
                config.variant, params.count(), n, len(val_w))

    for epoch in progress(range(1, train_config.max_epochs + 1), desc='epochs', enabled=show_progress):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            try:
                with nx.Tape() as tape:
                    pred = model_forward(train_w.inputs[idx], config, params, 'train', rng)
                    loss = mse_loss(pred, train_w.targets[idx])
            except NumericError as exc:
                logger.error("Training diverged in epoch %d", epoch)
                raise TrainingError(f"Forward pass failed: {exc}", epoch=epoch)
            value = loss.item()
            if not np.isfinite(value):
                logger.error("Training diverged in epoch %d", epoch)
                raise TrainingError(f"Non-finite training loss {value}", epoch=epoch)
            grads = params.named_gradients(nx.backward(tape, loss, wrt=list(params.values())))
            try:
                params, state = adam_step(params, grads, state, train_config)
            except TrainingError as exc:
                raise TrainingError(str(exc), epoch=epoch, parameter=exc.parameter)
            total += value * len(idx)
            logger.debug("epoch %d batch %d loss %.6g", epoch, start // bs, value)

        train_loss = total / n
        try:
            val_loss = dataset_loss(config, params, val_w)
        except NumericError as exc:
            raise TrainingError(f"Validation pass failed: {exc}", epoch=epoch)
        if not np.isfinite(val_loss):
            raise TrainingError(f"Non-finite validation loss {val_loss}", epoch=epoch)
        rows.append((epoch, train_loss, val_loss))
        if val_loss < best_loss:
            best_loss, best_params, best_epoch = val_loss, params, epoch
            since_best = 0
        else:
            since_best += 1
        if epoch % train_config.log_every == 0:
            logger.info("epoch %d: train %.6g, val %.6g (best %.6g at %d)",
                        epoch, train_loss, val_loss, best_loss, best_epoch)
        if since_best >= train_config.patience:
            logger.info("No validation improvement for %d epochs, stopping after epoch %d", since_best, epoch)
            break

    logger.info("Best validation loss %.6g at epoch %d", best_loss, best_epoch)
    history = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
    return TrainResult(best_params, history, best_epoch, best_loss)


##################### METRICS #########################

@dataclass
class MetricsReport:
    rmse: float
    mse: float
    mape: float
    mae: float
    r2: float

    def to_dict(self) -> dict:
        return {c: getattr(self, c) for c in METRIC_COLUMNS}


def evaluate(pred, actual, with_mape: bool = True) -> MetricsReport:
    """
    mse, rmse, mae, mape (percent) and r2 of predictions against actuals

    :param with_mape: MAPE needs every actual nonzero; False reports it as NaN
    """
    pred = np.asarray(pred, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if pred.shape != actual.shape or pred.ndim != 1:
        raise UsageError(f"Need equal length vectors, got shapes {pred.shape} and {actual.shape}")
    if pred.size == 0:
        raise UsageError("Cannot evaluate empty vectors")
    err = actual - pred
    mse = float(np.mean(err ** 2))
    mae = float(np.mean(np.abs(err)))
    if with_mape:
        if (actual == 0).any():
            raise NumericError("MAPE is undefined when an actual value is zero")
        mape = float(100.0 * np.mean(np.abs(err) / np.abs(actual)))
    else:
        mape = float('nan')
    ss_tot = float(np.sum((actual - actual.mean()) ** 2))
    if ss_tot == 0:
        raise NumericError("R2 is undefined for constant actual values")
    r2 = 1.0 - float(np.sum(err ** 2)) / ss_tot
    return MetricsReport(math.sqrt(mse), mse, mape, mae, r2)


def _safe_evaluate(pred, actual, label: str) -> MetricsReport:
    with_mape = not (np.asarray(actual) == 0).any()
    if not with_mape:
        logger.warning("%s: an actual value is zero, MAPE not reported", label)
    return evaluate(pred, actual, with_mape)


##################### EXPERIMENTS #########################

@dataclass
class ExperimentResult:
    """Outcome of one trained model, scored against one or more targets"""
    model: str
    metrics: dict = field(default_factory=dict)
    predictions: dict = field(default_factory=dict)
    histories: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    preprocessed: dict = field(default_factory=dict)

    def metrics_frame(self) -> pd.DataFrame:
        """Columns target, model, scale, rmse, mse, mape, mae, r2"""
        rows = [{'target': t, 'model': self.model, 'scale': s, **m.to_dict()}
                for (t, s), m in self.metrics.items()]
        return pd.DataFrame(rows, columns=['target', 'model', 'scale'] + METRIC_COLUMNS)


def score_target(pre: PreprocessedGroup, target: str, model: TT2VFin, test_w: SupervisedWindows,
                 inversion: str = 'forced') -> tuple[pd.DataFrame, dict]:
    """
    Predict the test windows and score them for one target ticker

    Normalized scale compares the predicted aggregate with the target's own
    normalized series; close scale compares reconstructed with true closes.
    """
    if len(test_w) == 0:
        raise UsageError("Test range holds no windows")
    x_hat = pd.Series(model.predict(test_w.inputs), index=test_w.dates)
    x_true = pre.normalized[target].reindex(test_w.dates)
    keep = x_true.notna()
    if not keep.all():
        logger.warning("%s: %d test dates without a normalized value dropped", target, int((~keep).sum()))
    x_hat, x_true = x_hat[keep], x_true[keep]

    state = pre.states[target]
    post = postprocess_for_target(x_hat, state, inversion)
    frame = pd.DataFrame({
        'predicted_norm': x_hat,
        'actual_norm': x_true,
        'predicted_close': post['predicted_close'],
        'actual_close': state.closes.reindex(x_hat.index),
    }, columns=PREDICTION_COLUMNS)
    frame.index.name = 'date'
    metrics = {
        'normalized': _safe_evaluate(frame['predicted_norm'], frame['actual_norm'], f"{target} normalized"),
        'close': _safe_evaluate(frame['predicted_close'], frame['actual_close'], f"{target} close"),
    }
    for scale, m in metrics.items():
        logger.info("%s %s: rmse %.6g mae %.6g r2 %.4f", target, scale, m.rmse, m.mae, m.r2)
    return frame, metrics


def fit_group(group: AlignedGroup, model_config: ModelConfig, train_config: TrainConfig,
              pipeline: PipelineConfig, show_progress: bool = True) -> tuple:
    """Preprocess a group, window it and train; returns (preprocessed, split windows, TrainResult)"""
    pre = preprocess_group(group, pipeline.ma_window, pipeline.split, pipeline.fit_bounds_on)
    parts = split_windows(pre.windows(model_config.window), pre.split)
    result = train(model_config, parts, train_config, show_progress=show_progress)
    return pre, parts, result


def run_experiment(group: AlignedGroup, targets, model_config: ModelConfig, train_config: TrainConfig,
                   pipeline: PipelineConfig = None, single_feature: bool = False,
                   show_progress: bool = True) -> ExperimentResult:
    """
    Train and score one configuration

    Multi feature: one model on the GMNN aggregate of the whole group, scored
    against every target. Single feature: one model per target, trained on
    that ticker alone.
    """
    pipeline = pipeline or PipelineConfig()
    targets = [targets] if isinstance(targets, str) else list(targets)
    missing = [t for t in targets if t not in group.tickers]
    if missing or not targets:
        raise UsageError(f"Target(s) {missing or targets} not in group {group.tickers}")
    if not group.filled:
        group = fill_missing(group)

    label = MODEL_LABELS.get(model_config.variant, model_config.variant)
    result = ExperimentResult(f"{label} single" if single_feature else label)
    fits = ([(t, [t]) for t in targets] if single_feature else [(None, group.tickers)])
    for owner, members in fits:
        sub = AlignedGroup(group.closes[members], filled=True)
        pre, parts, trained = fit_group(sub, model_config, train_config, pipeline, show_progress)
        model = TT2VFin(model_config, trained.params)
        scored = [owner] if owner else targets
        for target in scored:
            frame, metrics = score_target(pre, target, model, parts[2], pipeline.inversion)
            result.predictions[target] = frame
            for scale, m in metrics.items():
                result.metrics[(target, scale)] = m
            result.histories[target] = trained.history
            result.params[target] = trained.params
            result.preprocessed[target] = pre
    return result


def run_comparison(group: AlignedGroup, targets, model_config: ModelConfig, train_config: TrainConfig,
                   pipeline: PipelineConfig = None, variants=tuple(VARIANTS), seeds=(0,),
                   include_single: bool = True, show_progress: bool = True) -> pd.DataFrame:
    """
    Single vs multi feature and variant comparison, median over seeds

    :returns: DataFrame with columns target, model, scale, rmse, mse, mape, mae, r2
    """
    base = {f: getattr(model_config, f) for f in ('k', 'd_model', 'n_heads', 'n_layers', 'd_ff',
                                                  'dropout_p', 'pooling', 'window', 'ln_eps')}
    runs = []
    if include_single:
        runs.append(('base', True))
    runs.extend((v, False) for v in variants)

    frames = []
    jobs = [(v, s, seed) for seed in seeds for v, s in runs]
    for variant, single, seed in progress(jobs, desc='runs', enabled=show_progress):
        logger.info("Comparison run: %s%s, seed %d", variant, ' single' if single else '', seed)
        config = ModelConfig.for_variant(variant, **base)
        outcome = run_experiment(group, targets, config, replace(train_config, seed=seed), pipeline,
                                 single, show_progress=False)
        frames.append(outcome.metrics_frame())

    table = pd.concat(frames, ignore_index=True)
    order = list(dict.fromkeys(zip(table['target'], table['model'], table['scale'])))
    median = table.groupby(['target', 'model', 'scale'], sort=False)[METRIC_COLUMNS].median()
    return median.loc[order].reset_index()
