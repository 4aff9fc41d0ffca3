"""
Logging for toolkit processes

Console output is colored in development. File logs carry the run id,
stage and task of the record, taken from the innermost ``run_context``
block, so interleaved stages of one run can be told apart.
"""

import contextlib
import contextvars
import logging
import logging.handlers
import os

_run_context = contextvars.ContextVar("run_context", default={})

CONTEXT_FIELDS = ("run_id", "stage", "task")
PLAIN_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"
FILE_FORMAT = PLAIN_FORMAT + " [run=%(run_id)s] [stage=%(stage)s] [task=%(task)s]"
ERROR_FORMAT = PLAIN_FORMAT + " [%(pathname)s:%(lineno)d] [run=%(run_id)s] [task=%(task)s]"
PROGRESS_FORMAT = "%(asctime)s [run=%(run_id)s] %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"
MB = 1024 * 1024


@contextlib.contextmanager
def run_context(**fields):
    """Attach run_id / stage / task fields to every record logged inside the block"""
    token = _run_context.set({**_run_context.get(), **fields})
    try:
        yield
    finally:
        _run_context.reset(token)


class RunContextFilter(logging.Filter):
    def filter(self, record):
        context = _run_context.get()
        for name in CONTEXT_FIELDS:
            setattr(record, name, context.get(name, "-"))
        return True


class ColoredFormatter(logging.Formatter):
    """Colored level names for console output"""

    COLORS = {
        "DEBUG": "\033[36m",
        "INFO": "\033[32m",
        "WARNING": "\033[33m",
        "ERROR": "\033[31m",
        "CRITICAL": "\033[35m",
    }
    RESET = "\033[0m"

    def format(self, record):
        # color a copy so file handlers still see the plain level name
        colored = logging.makeLogRecord(record.__dict__)
        color = self.COLORS.get(record.levelname)
        if color:
            colored.levelname = f"{color}{record.levelname}{self.RESET}"
        return super().format(colored)


def _rotating(path, level, fmt, max_mb, backups):
    handler = logging.handlers.RotatingFileHandler(path, maxBytes=max_mb * MB, backupCount=backups)
    handler.setLevel(level)
    handler.setFormatter(logging.Formatter(fmt, datefmt=DATE_FORMAT))
    handler.addFilter(RunContextFilter())
    return handler


def setup_logging(settings):
    """
    Route toolkit logs to the console and, when LOG_TO_FILE is set, to
    ``cilkit.log``, ``errors.log`` and ``experiment.log`` under LOG_DIR

    Args:
        settings: Config instance (see config.py)
    """
    level = getattr(logging, settings.get("LOG_LEVEL", "INFO").upper())
    root = logging.getLogger()
    root.setLevel(level)
    for handler in root.handlers[:]:
        root.removeHandler(handler)

    if settings.get("LOG_TO_CONSOLE", True):
        console = logging.StreamHandler()
        console.setLevel(level)
        if settings.get("DEBUG"):
            console.setFormatter(ColoredFormatter(PLAIN_FORMAT + " [%(filename)s:%(lineno)d]", datefmt="%H:%M:%S"))
        else:
            console.setFormatter(logging.Formatter(PLAIN_FORMAT, datefmt=DATE_FORMAT))
        console.addFilter(RunContextFilter())
        root.addHandler(console)

    # stage-level progress of the experiment engine gets a file of its own
    progress_logger = logging.getLogger("cilkit.services.experiment_service")
    for handler in progress_logger.handlers[:]:
        progress_logger.removeHandler(handler)

    if settings.get("LOG_TO_FILE", True):
        log_dir = settings.get("LOG_DIR", "logs")
        os.makedirs(log_dir, exist_ok=True)
        root.addHandler(_rotating(os.path.join(log_dir, "cilkit.log"), level, FILE_FORMAT, 10, 5))
        root.addHandler(_rotating(os.path.join(log_dir, "errors.log"), logging.ERROR, ERROR_FORMAT, 5, 3))
        progress_logger.addHandler(
            _rotating(os.path.join(log_dir, "experiment.log"), logging.INFO, PROGRESS_FORMAT, 5, 3)
        )

    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    logging.getLogger(__name__).debug(f"Logging configured at {logging.getLevelName(level)}")


def get_logger(name):
    return logging.getLogger(name)


class ContextualLogger:
    """Logger that appends bound key=value fields to each message"""

    def __init__(self, name, context=None):
        self.logger = get_logger(name)
        self.context = context or {}

    def bind(self, **context):
        return ContextualLogger(self.logger.name, {**self.context, **context})

    def _log(self, level, message, **kwargs):
        if self.context:
            message = f"{message} [{' '.join(f'{k}={v}' for k, v in self.context.items())}]"
        self.logger.log(level, message, **kwargs)

    def debug(self, message, **kwargs):
        self._log(logging.DEBUG, message, **kwargs)

    def info(self, message, **kwargs):
        self._log(logging.INFO, message, **kwargs)

    def warning(self, message, **kwargs):
        self._log(logging.WARNING, message, **kwargs)

    def error(self, message, **kwargs):
        self._log(logging.ERROR, message, **kwargs)
