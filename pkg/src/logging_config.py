"""
Logging for the capture toolkit.

Every record carries the pipeline stage that produced it. Console output is
plain text (level names coloured on a terminal); ``enable_json`` switches
both handlers to one JSON object per line so energy and loss traces logged
with ``extra={'extra_fields': {...}}`` can be parsed back.
"""

import json
import logging
import logging.handlers
import sys
import time
from collections import Counter
from datetime import datetime
from functools import wraps
from pathlib import Path
from typing import Any, Callable, Dict, Optional

ROOT_LOGGER = 'imhoi'
TEXT_FORMAT = '%(asctime)s - [%(stage)s] %(name)s - %(levelname)s - %(message)s'
FILE_FORMAT = '%(asctime)s - [%(stage)s] %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s'

_current_stage = '-'


def set_stage(stage: Optional[str]) -> None:
    """Tag every following record with ``stage`` (the running subcommand)."""
    global _current_stage
    _current_stage = stage or '-'


class StageFilter(logging.Filter):
    def filter(self, record: logging.LogRecord) -> bool:
        if not hasattr(record, 'stage'):
            record.stage = _current_stage
        return True


class StructuredFormatter(logging.Formatter):
    """One JSON object per record; numeric extra fields are merged in."""

    def format(self, record: logging.LogRecord) -> str:
        entry: Dict[str, Any] = {
            'time': datetime.fromtimestamp(record.created).isoformat(timespec='milliseconds'),
            'stage': getattr(record, 'stage', _current_stage),
            'level': record.levelname,
            'logger': record.name,
            'message': record.getMessage(),
            'where': f'{record.module}.{record.funcName}:{record.lineno}',
        }
        fields = getattr(record, 'extra_fields', None)
        if fields:
            entry.update(fields)
        if record.exc_info:
            entry['exception'] = self.formatException(record.exc_info)
        return json.dumps(entry, ensure_ascii=False, default=_jsonable)


def _jsonable(value: Any) -> Any:
    # numpy scalars and arrays without importing numpy here
    if hasattr(value, 'tolist'):
        return value.tolist()
    return str(value)


class ColoredFormatter(logging.Formatter):
    LEVEL_COLORS = {
        logging.DEBUG: '\033[36m',
        logging.INFO: '\033[32m',
        logging.WARNING: '\033[33m',
        logging.ERROR: '\033[31m',
        logging.CRITICAL: '\033[35m',
    }
    RESET = '\033[0m'

    def format(self, record: logging.LogRecord) -> str:
        plain = record.levelname
        color = self.LEVEL_COLORS.get(record.levelno)
        if color:
            record.levelname = f'{color}{plain}{self.RESET}'
        try:
            return super().format(record)
        finally:
            record.levelname = plain


def setup_logging(
    log_level: str = 'INFO',
    log_file: Optional[str] = None,
    log_dir: str = 'logs',
    max_file_size: int = 10 * 1024 * 1024,
    backup_count: int = 5,
    enable_console: bool = True,
    enable_file: bool = False,
    enable_json: bool = False,
    enable_colors: bool = True,
    stage: Optional[str] = None,
) -> logging.Logger:
    """
    Configure the root logger for one CLI run.

    Args:
        log_level: DEBUG, INFO, WARNING, ERROR or CRITICAL
        log_file: Rotating log file name inside ``log_dir`` (default imhoi_<date>.log)
        log_dir: Directory for log files (the CLI passes the output directory)
        max_file_size: Bytes before the file rotates
        backup_count: Rotated files to keep
        enable_console: Log to stderr; stdout is reserved for stage results
        enable_file: Also log to the rotating file
        enable_json: JSON lines instead of text on every handler
        enable_colors: Colour level names when stderr is a terminal
        stage: Subcommand name stamped on every record

    Returns:
        The toolkit's top-level logger
    """
    level = getattr(logging, log_level.upper(), logging.INFO)
    set_stage(stage)

    root = logging.getLogger()
    root.setLevel(level)
    for handler in list(root.handlers):
        root.removeHandler(handler)
        if isinstance(handler, logging.FileHandler):
            handler.close()

    handlers = []
    if enable_console:
        console = logging.StreamHandler(sys.stderr)
        if enable_json:
            console.setFormatter(StructuredFormatter())
        elif enable_colors and sys.stderr.isatty():
            console.setFormatter(ColoredFormatter(TEXT_FORMAT))
        else:
            console.setFormatter(logging.Formatter(TEXT_FORMAT))
        handlers.append(console)

    if enable_file:
        directory = Path(log_dir)
        directory.mkdir(parents=True, exist_ok=True)
        name = log_file or f'imhoi_{datetime.now():%Y%m%d}.log'
        file_handler = logging.handlers.RotatingFileHandler(directory / name, maxBytes=max_file_size,
                                                            backupCount=backup_count, encoding='utf-8')
        file_handler.setFormatter(StructuredFormatter() if enable_json else logging.Formatter(FILE_FORMAT))
        handlers.append(file_handler)

    for handler in handlers:
        handler.setLevel(level)
        handler.addFilter(StageFilter())
        root.addHandler(handler)

    app_logger = logging.getLogger(ROOT_LOGGER)
    app_logger.setLevel(level)
    return app_logger


def get_logger(name: str) -> logging.Logger:
    """Module logger; ``src.x`` names are re-rooted under ``imhoi``."""
    if name.startswith('src.'):
        name = f'{ROOT_LOGGER}.{name[4:]}'
    return logging.getLogger(name)


def log_performance(logger: logging.Logger) -> Callable:
    """Decorator: log the wall time of a heavy stage function, also on failure."""
    def decorator(func: Callable) -> Callable:
        @wraps(func)
        def wrapper(*args, **kwargs):
            start = time.perf_counter()
            try:
                result = func(*args, **kwargs)
            except Exception as e:
                logger.error(f'{func.__name__} failed after {time.perf_counter() - start:.3f} s: {e}')
                raise
            elapsed = time.perf_counter() - start
            logger.info(f'{func.__name__} took {elapsed:.3f} s',
                        extra={'extra_fields': {'timed': func.__name__, 'seconds': elapsed}})
            return result

        return wrapper
    return decorator


class ErrorTracker:
    """Counts failures by type and exit code and logs them with their context."""

    def __init__(self, logger: logging.Logger):
        self.logger = logger
        self.by_type: Counter = Counter()
        self.by_exit_code: Counter = Counter()

    @property
    def error_count(self) -> int:
        return sum(self.by_type.values())

    def track_error(self, error: BaseException, context: Optional[Dict[str, Any]] = None) -> None:
        error_type = type(error).__name__
        exit_code = getattr(error, 'exit_code', 1)
        self.by_type[error_type] += 1
        self.by_exit_code[exit_code] += 1
        fields: Dict[str, Any] = {'error_type': error_type, 'exit_code': exit_code, 'context': context or {}}
        for attribute in ('path', 'errors'):
            if getattr(error, attribute, None):
                fields[attribute] = getattr(error, attribute)
        trace = getattr(error, 'trace', None)
        if trace:
            fields['trace_length'] = len(trace)
            fields['last_value'] = trace[-1]
        self.logger.error(f'{error_type} (exit {exit_code}): {error}', extra={'extra_fields': fields})

    def summary(self) -> Dict[str, Any]:
        return {'errors': self.error_count, 'by_type': dict(self.by_type),
                'by_exit_code': dict(self.by_exit_code)}


error_tracker = ErrorTracker(get_logger(f'{ROOT_LOGGER}.errors'))


def log_error(error: BaseException, context: Optional[Dict[str, Any]] = None) -> None:
    """Record ``error`` on the process-wide tracker."""
    error_tracker.track_error(error, context)
