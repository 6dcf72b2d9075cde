"""
Logging setup for the command line, pipeline runs and worker processes.
"""

import sys
import logging
from contextlib import contextmanager
from logging.handlers import QueueListener
from pathlib import Path

_log = logging.getLogger(__name__)
_stderr_handler = None
_log_queue = None
_log_listener = None

LOG_FORMAT = '[%(levelname)7s] %(name)s %(message)s'
FILE_FORMAT = '[%(levelname)7s] %(asctime)s %(name)s %(message)s'


class InjectHandler:
    "Handler that re-injects worker records into the parent's loggers."
    level = logging.DEBUG

    def handle(self, record):
        logger = logging.getLogger(record.name)
        if logger.isEnabledFor(record.levelno):
            logger.handle(record)


def log_to_stderr(level=logging.INFO):
    """
    Show log output on ``sys.stderr``.  The command line calls this at startup;
    calling it again only changes the level.
    """
    global _stderr_handler
    root = logging.getLogger()
    if _stderr_handler is not None:
        root.setLevel(level)
        _stderr_handler.setLevel(level)
        return

    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(logging.Formatter(LOG_FORMAT))
    h.setLevel(level)
    root.addHandler(h)
    root.setLevel(level)
    _stderr_handler = h
    _log.debug('stderr logging configured')


@contextmanager
def run_log(path, level=logging.DEBUG):
    """
    Copy ``samora`` log records to a file while the block runs, so each run
    directory keeps the log of the run that produced it.

    Args:
        path: the log file; it is appended to.
        level: the lowest level written.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h = logging.FileHandler(path, encoding='utf8')
    h.setFormatter(logging.Formatter(FILE_FORMAT))
    h.setLevel(level)
    logger = logging.getLogger('samora')
    old = logger.level
    if logger.getEffectiveLevel() > level:
        logger.setLevel(level)
    logger.addHandler(h)
    try:
        yield path
    finally:
        logger.removeHandler(h)
        logger.setLevel(old)
        h.close()


def log_queue():
    """
    Get the log queue for worker processes.  Records put on this queue by
    workers are re-injected into the parent's loggers.
    """
    global _log_queue, _log_listener
    from samora.util.parallel import spawn_context
    if _log_queue is None:
        _log_queue = spawn_context().Queue()
        _log_listener = QueueListener(_log_queue, InjectHandler())
        _log_listener.start()
    return _log_queue
