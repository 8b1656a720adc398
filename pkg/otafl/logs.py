"""Logging setup for command-line use."""
from __future__ import annotations

import logging

LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"


def configure_logging(verbosity: int = 0) -> None:
    """Install a single stream handler on the ``otafl`` logger.

    ``verbosity`` > 0 selects DEBUG, < 0 selects WARNING, 0 selects INFO.
    Safe to call more than once.
    """
    if verbosity > 0:
        level = logging.DEBUG
    elif verbosity < 0:
        level = logging.WARNING
    else:
        level = logging.INFO

    root = logging.getLogger("otafl")
    root.setLevel(level)
    if not any(getattr(h, "_otafl", False) for h in root.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._otafl = True  # type: ignore[attr-defined]
        root.addHandler(handler)
