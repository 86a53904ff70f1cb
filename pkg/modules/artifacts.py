# -*- coding: utf-8 -*-
""""""
"""
CSV and YAML artifacts of a run and the manifest that checksums them.

Artifacts carry no timestamps, rerunning a command with the same
configuration and seed rewrites byte-identical files.
"""
import hashlib
import logging
import os

import pandas as pd
import yaml

from core.errors import IngestionError
from modules.setup_logger import logger


logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.17g'


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 16), b''):
            h.update(block)
    return h.hexdigest()


class ArtifactWriter:
    """
    Writes named artifacts below one output directory

    Files are called '<name>_<key>.<ext>'; every write is remembered for the manifest.
    """

    def __init__(self, out: str, name: str) -> None:
        self.out = out
        self.name = name
        self.written = {}
        os.makedirs(out, exist_ok=True)

    def path(self, key: str, ext: str) -> str:
        return os.path.join(self.out, f"{self.name}_{key}.{ext}")

    def _remember(self, path: str) -> str:
        self.written[os.path.relpath(path, self.out)] = path
        logger.info("Wrote %s", path)
        return path

    def frame(self, key: str, frame: pd.DataFrame, index: bool = True, index_label: str = None) -> str:
        path = self.path(key, 'csv')
        frame.to_csv(path, index=index, index_label=index_label, float_format=FLOAT_FORMAT,
                     lineterminator='\n', date_format='%Y-%m-%d')
        return self._remember(path)

    def document(self, key: str, doc) -> str:
        path = self.path(key, 'yml')
        with open(path, 'w', encoding='utf-8') as f:
            yaml.safe_dump(doc, f, sort_keys=False)
        return self._remember(path)

    def external(self, path: str) -> str:
        """Register a file written by another module (checkpoint, plot)"""
        return self._remember(path)

    def stages(self, preprocessed, suffix: str = '') -> list:
        """One date,value CSV per stage and ticker, plus the pipeline state document"""
        paths = []
        for stage, frame in preprocessed.stages.items():
            for column in frame.columns:
                series = frame[column].dropna().rename('value')
                key = f"aggregate{suffix}" if stage == 'aggregate' else f"{stage}_{column}".replace('#', '_')
                paths.append(self.frame(key, series.to_frame(), index_label='date'))
        paths.append(self.document(f"pipeline_state{suffix}",
                                   [s.to_document() for s in preprocessed.states.values()]))
        return paths

    def manifest(self, command: str, config_doc: dict, seed: int) -> str:
        """manifest.yml: command, configuration, seed and SHA-256 of every artifact written so far"""
        doc = {
            'command': command,
            'seed': seed,
            'config': config_doc,
            'artifacts': {rel: sha256_file(path) for rel, path in sorted(self.written.items())},
        }
        path = os.path.join(self.out, 'manifest.yml')
        with open(path, 'w', encoding='utf-8') as f:
            yaml.safe_dump(doc, f, sort_keys=False)
        logger.info("Wrote manifest with %d artifacts", len(doc['artifacts']))
        return path


def read_predictions(path: str) -> pd.DataFrame:
    """Load a prediction CSV written by the train or predict commands"""
    try:
        frame = pd.read_csv(path, index_col='date', parse_dates=['date'])
    except ValueError as exc:
        raise IngestionError(f"{path}: not a prediction file ({exc})", field='date')
    required = ['predicted_norm', 'actual_norm', 'predicted_close', 'actual_close']
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise IngestionError(f"{path}: missing prediction column(s) {missing}", field=missing[0])
    return frame
