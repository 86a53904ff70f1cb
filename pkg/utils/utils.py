# -*- coding: utf-8 -*-
""""""
"""
Small helpers used by the scripts and the training loop.
"""
import logging
from tqdm import tqdm

LOGLEVELS = {
    'D': logging.DEBUG,
    'I': logging.INFO,
    'E': logging.ERROR,
    'W': logging.WARNING,
    'C': logging.CRITICAL,
}


def loglevel_from_flag(flag: str) -> int:
    """Map the one letter -L flag onto a logging level"""
    try:
        return LOGLEVELS[flag]
    except KeyError:
        raise ValueError(f"Unknown loglevel flag {flag!r}, use one of {''.join(LOGLEVELS)}")


def progress(iterable, desc: str, enabled: bool = True, **kwargs):
    """Wrap an iterable in a tqdm bar unless disabled"""
    return tqdm(iterable, desc=desc, disable=not enabled, leave=False, **kwargs)
