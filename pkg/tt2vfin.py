"""
Central module of the forecasting toolkit. Wraps the cores (ingest, features,
correlation, model, training) into runs driven by one RunConfig and writes
every artifact below the configured output directory.
"""
import logging
import os

import pandas as pd

from core.correlation import CorrelationReport, correlation_report
from core.errors import ConfigError, UsageError
from core.features import postprocess_for_target, preprocess_group, split_windows
from core.ingest import AlignedGroup, align_group, fill_missing, load_csv
from core.model import TT2VFin
from core.runconfig import RunConfig
from core.training import (ExperimentResult, evaluate, run_comparison, run_experiment,
                           score_target)
from modules.artifacts import ArtifactWriter, read_predictions
from modules.checkpoint import (check_compatible, load_checkpoint, manifest_path, pipeline_document,
                                save_checkpoint)
from modules.predictionplotter import PredictionPlotter
from modules.setup_logger import logger

logger = logging.getLogger(__name__)

CHECKPOINT_EXT = 'bin'


class tt2vfinRun:

    def __init__(self, config: RunConfig, show_progress: bool = True):
        """
        Validates the configuration and prepares the output directory.

        config: RunConfig - file values with command line overrides applied
        show_progress: bool - tqdm bars over epochs and comparison runs
        """
        self.config = config.validate()
        self.show_progress = show_progress
        self.writer = ArtifactWriter(config.out, config.name)
        self._group = None

##################### DATA #########################

    def load_data(self) -> AlignedGroup:
        """Load every group member, align on the union calendar and forward fill"""
        adjusted = self.config.pipeline.use_adj_close
        series = [load_csv(self.config.data[t], t, adjusted) for t in self.config.members]
        self._group = fill_missing(align_group(series, adjusted))
        logger.info("Group %s on %d trading days", self._group.tickers, len(self._group))
        return self._group

    @property
    def group(self) -> AlignedGroup:
        if self._group is None:
            self.load_data()
        return self._group

    def _model_inputs(self) -> list:
        """(suffix, members) of every model a run trains"""
        if self.config.single_feature:
            targets = self.config.target_list
            return [(f"_{t}" if len(targets) > 1 else '', [t]) for t in targets]
        return [('', self.config.members)]

##################### CORRELATION #########################

    def correlate(self, base: str = None) -> CorrelationReport:
        """
        Lag curves of every member against base (default: first target)
        and the lag-0 summary.
        """
        base = base or self.config.target_list[0]
        cc = self.config.correlation
        report = correlation_report(self.group, base, cc.max_lag, cc.representation,
                                    self.config.pipeline.ma_window, self.config.pipeline.split, cc.normalization)
        for curve in report.curves:
            key = f"correlation_{curve.base}_{curve.other}".replace('#', '_')
            self.writer.frame(key, curve.to_frame(), index=False)
        if len(report.curves) > 1:
            self.writer.frame('correlation_summary', report.summary, index=False)
            for row in report.ranking().itertuples():
                logger.info("%s ~ %s: %.4f", base, row.other, row.rho_lag0)
        if self.config.plotsave:
            plotter = PredictionPlotter(self.config.out, self.config.name)
            self.writer.external(plotter.plot_correlation(report))
        self.writer.manifest('correlate', self.config.to_document(), self.config.seed)
        return report

##################### TRAINING #########################

    def _checkpoint_manifest(self, members: list, pre) -> dict:
        return {
            'model': self.config.model_config().to_dict(),
            'variant': self.config.variant,
            'seed': self.config.seed,
            'tickers': list(members),
            'targets': [t for t in self.config.target_list if t in members],
            'pipeline': [s.to_document() for s in pre.states.values()],
            'preprocessing': pipeline_document(self.config.pipeline),
        }

    def train(self) -> ExperimentResult:
        """
        Full pipeline: preprocess, train, score the test range per target and
        write history, metrics, predictions, stages, checkpoint and manifest.
        """
        cfg = self.config
        result = run_experiment(self.group, cfg.target_list, cfg.model_config(), cfg.train_config(),
                                cfg.pipeline, cfg.single_feature, self.show_progress)

        for suffix, members in self._model_inputs():
            owner = members[0] if cfg.single_feature else cfg.target_list[0]
            pre = result.preprocessed[owner]
            self.writer.frame(f"history{suffix}", result.histories[owner], index=False)
            self.writer.stages(pre, suffix)
            path = self.writer.path(f"checkpoint{suffix}", CHECKPOINT_EXT)
            save_checkpoint(path, result.params[owner], self._checkpoint_manifest(members, pre))
            self.writer.external(path)
            self.writer.external(manifest_path(path))

        self._write_predictions(result.predictions, result.preprocessed)
        metrics = result.metrics_frame()
        self.writer.frame('metrics', metrics, index=False)
        self.writer.manifest('train', cfg.to_document(), cfg.seed)
        logger.info("Test metrics\n%s", metrics.to_string(index=False))
        return result

    def _write_predictions(self, predictions: dict, preprocessed: dict) -> None:
        plotter = PredictionPlotter(self.config.out, self.config.name) if self.config.plotsave else None
        for target, frame in predictions.items():
            self.writer.frame(f"predictions_{target}".replace('#', '_'), frame)
            if plotter is not None:
                state = preprocessed[target].states[target]
                post = postprocess_for_target(frame['predicted_norm'], state, self.config.pipeline.inversion)
                trend = pd.DataFrame({'predicted_trend': post['predicted_trend'],
                                      'actual_trend': state.moving_average.reindex(frame.index)})
                self.writer.external(plotter.plot_predictions(frame, target, trend))

##################### PREDICTION #########################

    def predict(self, checkpoint: str = None, autoregressive: bool = False) -> dict:
        """
        Predict the test range with saved parameters and reconstruct closes.

        checkpoint: str - checkpoint file, default '<out>/<name>_checkpoint.bin'
        autoregressive: bool - invert with earlier predictions instead of true history

        Returns dict target -> prediction DataFrame
        """
        cfg = self.config
        inputs = self._model_inputs()
        if checkpoint is not None and len(inputs) > 1:
            raise ConfigError("One --checkpoint given but the run trains one model per target")
        inversion = 'autoregressive' if autoregressive else cfg.pipeline.inversion
        model_config = cfg.model_config()

        predictions, preprocessed, metrics = {}, {}, []
        for suffix, members in inputs:
            path = checkpoint or self.writer.path(f"checkpoint{suffix}", CHECKPOINT_EXT)
            params, manifest = load_checkpoint(path)
            check_compatible(manifest, model_config, params, members, cfg.pipeline)
            bounds = {d['ticker']: (d['min'], d['max']) for d in manifest.get('pipeline', [])}
            sub = AlignedGroup(self.group.closes[members], filled=True)
            pre = preprocess_group(sub, cfg.pipeline.ma_window, cfg.pipeline.split,
                                   cfg.pipeline.fit_bounds_on, bounds)
            test_w = split_windows(pre.windows(model_config.window), pre.split)[2]
            model = TT2VFin(model_config, params)
            for target in (members if cfg.single_feature else cfg.target_list):
                frame, scored = score_target(pre, target, model, test_w, inversion)
                predictions[target], preprocessed[target] = frame, pre
                metrics.extend({'target': target, 'scale': s, **m.to_dict()} for s, m in scored.items())

        self._write_predictions(predictions, preprocessed)
        self.writer.frame('predict_metrics', pd.DataFrame(metrics), index=False)
        self.writer.manifest('predict', cfg.to_document(), cfg.seed)
        return predictions

##################### RESCORING #########################

    def metrics(self, prediction_file: str) -> pd.DataFrame:
        """Re-score an existing prediction CSV on both scales"""
        frame = read_predictions(prediction_file)
        rows = []
        for scale, pred, actual in (('normalized', 'predicted_norm', 'actual_norm'),
                                    ('close', 'predicted_close', 'actual_close')):
            pair = frame[[pred, actual]].dropna()
            with_mape = not (pair[actual] == 0).any()
            report = evaluate(pair[pred].to_numpy(), pair[actual].to_numpy(), with_mape)
            rows.append({'scale': scale, **report.to_dict()})
        table = pd.DataFrame(rows)
        stem = os.path.splitext(os.path.basename(prediction_file))[0]
        self.writer.frame(f"rescored_{stem}", table, index=False)
        logger.info("Metrics of %s\n%s", prediction_file, table.to_string(index=False))
        return table

##################### COMPARISON #########################

    def compare(self, seeds=None, variants=None) -> pd.DataFrame:
        """Single vs multi feature and variant table, median over seeds"""
        cfg = self.config
        seeds = list(seeds) if seeds else [cfg.seed]
        kwargs = {} if variants is None else {'variants': tuple(variants)}
        if cfg.single_feature:
            raise UsageError("compare runs both single and multi feature models, drop --single-feature")
        table = run_comparison(self.group, cfg.target_list, cfg.model_config(), cfg.train_config(),
                               cfg.pipeline, seeds=seeds, show_progress=self.show_progress, **kwargs)
        self.writer.frame('comparison', table, index=False)
        self.writer.manifest('compare', cfg.to_document(), cfg.seed)
        logger.info("Comparison over seeds %s\n%s", seeds, table.to_string(index=False))
        return table
