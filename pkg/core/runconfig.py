# -*- coding: utf-8 -*-
"""
Run configuration: one YAML file plus command line overrides.

Top level keys configure the run, the sections correlation, pipeline, model
and train configure the cores. Every field has a default; see
config/README_config.md or `forecast.py --help`.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, fields, replace

import yaml

from core.correlation import CorrelationConfig
from core.errors import ConfigError, UsageError
from core.features import PipelineConfig
from core.model import VARIANTS, ModelConfig
from core.training import TrainConfig
from modules.setup_logger import logger


logger = logging.getLogger(__name__)

SECTIONS = {
    'correlation': CorrelationConfig,
    'pipeline': PipelineConfig,
    'model': ModelConfig,
    'train': TrainConfig,
}

# Set through the top level 'variant' and 'seed' keys, not inside a section
DERIVED = {
    'model': ('use_time2vec', 'use_positional_encoding', 'use_causal_mask'),
    'train': ('seed',),
}

FIELD_DOCS = {
    'data': "ticker -> Yahoo Finance daily CSV path, relative paths resolve against the config file",
    'group': "member tickers of the group, empty means every ticker in data",
    'targets': "tickers scored against, empty means the first group member",
    'single_feature': "train one model per target on that ticker alone instead of the GMNN aggregate",
    'variant': f"model variant, one of {', '.join(VARIANTS)}",
    'out': "output directory, every artifact is written below it",
    'name': "run name, prefix of the artifact files",
    'seed': "seed of initialization, shuffling and dropout",
    'plotsave': "also save PDF plots of predictions and correlation curves",
    'correlation.max_lag': "largest lag K of the correlation curves",
    'correlation.representation': "'normalized' percentage change series or raw 'close' prices",
    'correlation.normalization': "'overlap' divides lag k by N-|k|, 'total' by N (keeps |rho| <= 1 at every lag)",
    'pipeline.ma_window': "moving average window in trading days",
    'pipeline.use_adj_close': "use the Adj Close column instead of Close",
    'pipeline.split': "chronological train/val/test ratios",
    'pipeline.fit_bounds_on': "'train' fits min-max bounds on the train range, 'all' on everything",
    'pipeline.inversion': "'forced' inverts with true histories, 'autoregressive' with earlier predictions",
    'model.k': "Time2Vec periodic components",
    'model.d_model': "encoder width",
    'model.n_heads': "attention heads, must divide d_model",
    'model.n_layers': "encoder blocks",
    'model.d_ff': "feed-forward width",
    'model.dropout_p': "dropout probability",
    'model.pooling': "'mean' or 'max' over the time axis",
    'model.window': "input window length W",
    'model.ln_eps': "layer norm epsilon",
    'train.learning_rate': "Adam learning rate",
    'train.batch_size': "mini-batch size",
    'train.max_epochs': "upper limit on epochs",
    'train.patience': "epochs without validation improvement before stopping",
    'train.beta1': "Adam first moment decay",
    'train.beta2': "Adam second moment decay",
    'train.eps': "Adam epsilon",
    'train.log_every': "log a loss summary every N epochs",
}


def _check_type(key: str, value, default):
    """Coerce a YAML value onto the type of the field default"""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, (tuple, list)):
        if not isinstance(value, (tuple, list)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return type(default)(value)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a mapping, got {value!r}")
        return dict(value)
    return value


def _build_section(name: str, doc) -> object:
    cls = SECTIONS[name]
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"Section {name} must be a mapping, got {doc!r}")
    defaults = cls()
    allowed = {f.name for f in fields(cls)} - set(DERIVED.get(name, ()))
    kwargs = {}
    for key, value in doc.items():
        if key not in allowed:
            hint = " (set it with the top level variant/seed keys)" if key in DERIVED.get(name, ()) else ""
            raise ConfigError(f"Unknown field {name}.{key}{hint}")
        kwargs[key] = _check_type(f"{name}.{key}", value, getattr(defaults, key))
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"Section {name}: {exc}")


@dataclass
class RunConfig:
    """Everything a command needs, defaults included"""
    data: dict = field(default_factory=dict)
    group: list = field(default_factory=list)
    targets: list = field(default_factory=list)
    single_feature: bool = False
    variant: str = 'base'
    out: str = 'runs'
    name: str = 'run'
    seed: int = 0
    plotsave: bool = False
    correlation: CorrelationConfig = field(default_factory=CorrelationConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def members(self) -> list:
        return list(self.group) if self.group else list(self.data)

    @property
    def target_list(self) -> list:
        members = self.members
        return list(self.targets) if self.targets else members[:1]

    def model_config(self) -> ModelConfig:
        """Model section with the variant flags applied"""
        t2v, pe, mask = VARIANTS[self.variant]
        return replace(self.model, use_time2vec=t2v, use_positional_encoding=pe, use_causal_mask=mask)

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)

    def validate(self) -> 'RunConfig':
        if self.variant not in VARIANTS:
            raise ConfigError(f"Unknown variant {self.variant!r}, choose from {list(VARIANTS)}")
        if not self.data:
            raise ConfigError("No data files configured")
        unknown = [t for t in self.members if t not in self.data]
        if unknown:
            raise ConfigError(f"Group member(s) {unknown} have no data file")
        stray = [t for t in self.target_list if t not in self.members]
        if stray:
            raise ConfigError(f"Target ticker(s) {stray} are not group members {self.members}")
        try:
            self.model_config()
        except UsageError as exc:
            raise ConfigError(f"Variant {self.variant} does not fit the model section: {exc}")
        return self

    def with_overrides(self, **overrides) -> 'RunConfig':
        """Copy with every non-None override applied, flags win over file values"""
        changes = {}
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in {f.name for f in fields(self)} or key in SECTIONS:
                raise ConfigError(f"Cannot override {key}")
            changes[key] = value
        return replace(self, **changes)

    def to_document(self) -> dict:
        doc = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in SECTIONS:
                section = {s.name: getattr(value, s.name) for s in fields(value)
                           if s.name not in DERIVED.get(f.name, ())}
                doc[f.name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
            else:
                doc[f.name] = dict(value) if isinstance(value, dict) else (
                    list(value) if isinstance(value, (list, tuple)) else value)
        return doc

    @classmethod
    def from_document(cls, doc: dict, basedir: str = None) -> 'RunConfig':
        if doc is None:
            doc = {}
        if not isinstance(doc, dict):
            raise ConfigError("Configuration must be a mapping at the top level")
        defaults = cls()
        kwargs = {}
        for key, value in doc.items():
            if key in SECTIONS:
                kwargs[key] = _build_section(key, value)
            elif key in {f.name for f in fields(cls)}:
                kwargs[key] = _check_type(key, value, getattr(defaults, key))
            else:
                raise ConfigError(f"Unknown field {key}")
        data = kwargs.get('data', {})
        for ticker, path in data.items():
            if not isinstance(path, str):
                raise ConfigError(f"data.{ticker}: expected a file path, got {path!r}")
            if basedir and not os.path.isabs(path):
                data[ticker] = os.path.normpath(os.path.join(basedir, path))
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str) -> 'RunConfig':
        """Read a YAML run configuration"""
        with open(path, 'r', encoding='utf-8') as stream:
            try:
                doc = yaml.safe_load(stream)
            except yaml.YAMLError as exc:
                logger.error(exc)
                raise ConfigError(f"{path} is not valid YAML: {exc}")
        logger.info("Loaded run configuration %s", path)
        return cls.from_document(doc, os.path.dirname(os.path.abspath(path)))

    @classmethod
    def describe(cls) -> str:
        """Every field with its default, one per line"""
        lines = ['configuration fields (YAML key, default):']
        defaults = cls()
        for f in fields(cls):
            if f.name in SECTIONS:
                continue
            lines.append(f"  {f.name} (default {getattr(defaults, f.name)!r}): {FIELD_DOCS[f.name]}")
        for section in SECTIONS:
            value = getattr(defaults, section)
            for s in fields(value):
                if s.name in DERIVED.get(section, ()):
                    continue
                key = f"{section}.{s.name}"
                lines.append(f"  {key} (default {getattr(value, s.name)!r}): {FIELD_DOCS[key]}")
        return '\n'.join(lines)
