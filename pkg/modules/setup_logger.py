# -*- coding: utf-8 -*-
""""""
"""
Logger setup shared by the cores and the forecast script.
"""

import logging
import os

FORMAT = '%(asctime)s:%(msecs)d.%(name)s.%(levelname)s:%(message)s'

logger = logging.getLogger(__name__)


def setup_logging(loglevel: int = logging.INFO, logfile: str = None) -> None:
    """
    Attach stream (and optionally file) handlers to the root logger

    :param loglevel: Logging level applied to both handlers
    :param logfile: Path of the run log. Directory is created if missing
    """
    formatter = logging.Formatter(FORMAT)

    root = logging.getLogger()
    # Repeated calls (tests, several commands in one process) must not stack handlers
    for handler in list(root.handlers):
        if getattr(handler, '_tt2vfin', False):
            root.removeHandler(handler)
            handler.close()

    sh = logging.StreamHandler()
    sh.setFormatter(formatter)
    sh._tt2vfin = True
    root.addHandler(sh)

    if logfile is not None:
        logdir = os.path.dirname(logfile)
        if logdir and not os.path.exists(logdir):
            os.makedirs(logdir)
        fh = logging.FileHandler(logfile)
        fh.setFormatter(formatter)
        fh._tt2vfin = True
        root.addHandler(fh)

    root.setLevel(loglevel)
