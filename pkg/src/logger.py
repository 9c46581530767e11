"""Component-tagged logging for XBusNet runs: console plus an optional rotating run log."""

import json
import logging
from logging.handlers import RotatingFileHandler
from typing import Any, Dict, Optional

import numpy as np

LOGGER_NAME = "XBusNet"
LOG_FORMAT = "[%(asctime)s.%(msecs)03d] [%(levelname)s] [%(component)s] %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"
MAX_LOG_BYTES = 10 * 1024 * 1024
LOG_BACKUPS = 5

# arrays above this many elements are logged as a shape summary
ARRAY_SUMMARY_SIZE = 16

_MASKED_KEYS = {'mask_bytes', 'image_bytes'}


class RunLogger:
    """
    Structured run logger shared by the trainer, the predictor and the CLI.

    Every record carries a component tag and an optional JSON payload, so a
    run log can be grepped per component and parsed per line.
    """

    def __init__(self, log_file: Optional[str] = "xbusnet.log", log_level: str = "INFO",
                 configure: bool = True):
        """
        Args:
            log_file: Rotating run log path, or None to log to the console only.
            log_level: DEBUG, INFO, WARNING or ERROR.
            configure: When False, reuse whatever handlers the named logger already has.
        """
        self.log_file = log_file
        self.log_level = getattr(logging, log_level.upper(), logging.INFO)
        self.logger = logging.getLogger(LOGGER_NAME)
        if configure:
            self.setup_logger()

    def setup_logger(self) -> None:
        """Replace any existing handlers with a console handler and, if configured, the run log."""
        for handler in list(self.logger.handlers):
            self.logger.removeHandler(handler)
            handler.close()
        self.logger.setLevel(self.log_level)
        self.logger.propagate = False

        if self.log_file:
            self._attach(RotatingFileHandler(self.log_file, maxBytes=MAX_LOG_BYTES,
                                             backupCount=LOG_BACKUPS, encoding='utf-8'))
        self._attach(logging.StreamHandler())

    def _attach(self, handler: logging.Handler) -> None:
        handler.setLevel(self.log_level)
        handler.setFormatter(logging.Formatter(fmt=LOG_FORMAT, datefmt=DATE_FORMAT))
        self.logger.addHandler(handler)

    def _log(self, level: int, component: str, message: str, data: Optional[Dict[str, Any]] = None) -> None:
        if data:
            payload = json.dumps(self._sanitize_data(data), default=_json_default)
            message = f"{message} {payload}"
        self.logger.log(level, message, extra={'component': component})

    def _sanitize_data(self, data: Dict[str, Any]) -> Dict[str, Any]:
        """Mask raw file contents and replace large arrays by their shape."""
        sanitized = {}
        for key, value in data.items():
            if key.lower() in _MASKED_KEYS:
                value = '***'
            elif isinstance(value, np.ndarray) and value.size > ARRAY_SUMMARY_SIZE:
                value = f'<array shape={list(value.shape)}>'
            sanitized[key] = value
        return sanitized

    def log_training_step(self, fold: Optional[int], step: int, loss: float, lr: float) -> None:
        self.debug('FoldTrainer', f'step {step}', {'fold': fold, 'step': step, 'loss': loss, 'lr': lr})

    def log_prediction(self, image_id: str, diagnostics: Dict[str, Any]) -> None:
        """
        Record two-pass diagnostics for one image.

        Args:
            image_id: Identifier of the processed image.
            diagnostics: Prompts, thresholds, proposal geometry and fallback flag.
        """
        self.info('TwoPassPredictor', f'Two-pass inference finished for {image_id}', diagnostics)

    def log_error(self, error: Exception, context: Dict[str, Any]) -> None:
        """
        Record a failure; context['component'] picks the tag and the rest travels as payload.

        Args:
            error: The exception being reported.
            context: Where it happened, e.g. {'component': 'XBusNetCLI', 'command': 'train'}.
        """
        self.error(context.get('component', 'Unknown'), f'Error occurred: {error}', {
            'error_type': type(error).__name__,
            'error_message': str(error),
            'context': context,
        })

    def info(self, component: str, message: str, data: Optional[Dict[str, Any]] = None) -> None:
        self._log(logging.INFO, component, message, data)

    def debug(self, component: str, message: str, data: Optional[Dict[str, Any]] = None) -> None:
        self._log(logging.DEBUG, component, message, data)

    def warning(self, component: str, message: str, data: Optional[Dict[str, Any]] = None) -> None:
        self._log(logging.WARNING, component, message, data)

    def error(self, component: str, message: str, data: Optional[Dict[str, Any]] = None) -> None:
        self._log(logging.ERROR, component, message, data)


def _json_default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return str(value)


_DEFAULT_LOGGER: Optional[RunLogger] = None


def get_logger() -> RunLogger:
    """Return the process-wide logger; handlers are left to whoever configured them."""
    global _DEFAULT_LOGGER
    if _DEFAULT_LOGGER is None:
        _DEFAULT_LOGGER = RunLogger(log_file=None, configure=False)
    return _DEFAULT_LOGGER


def set_logger(logger: RunLogger) -> None:
    global _DEFAULT_LOGGER
    _DEFAULT_LOGGER = logger
