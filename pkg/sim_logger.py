"""
sim_logger.py

This module provides a global logging utility for the simulator. Messages go
to a sink callable when one is set (a list's append, a file writer, a UI
widget's append). If no sink is set, messages are passed to the standard
"platoon_sim" logger, which writes to stderr so stdout stays machine-parseable.
"""

import logging
import sys

LOGGER_NAME = "platoon_sim"


class Logger:
    """Routes log messages to a sink or to the standard logger."""

    def __init__(self, name=LOGGER_NAME):
        self.sink = None
        self._logger = logging.getLogger(name)

    def set_sink(self, sink):
        """Set the sink callable; None restores the standard logger."""
        self.sink = sink

    def log(self, message, level=logging.INFO):
        """Log a message."""
        if self.sink is not None:
            self.sink(message)
        else:
            self._logger.log(level, message)

    def clear(self):
        """Clear the sink if it supports clearing (lists, text widgets)."""
        clear = getattr(getattr(self.sink, "__self__", None), "clear", None)
        if callable(clear):
            clear()


# Create a global logger instance
_logger = Logger()


def configure_logging(verbose=False):
    """
    Install a stderr handler on the simulator logger.

    Args:
        verbose: Log at DEBUG level when True, INFO otherwise.
    """
    logger = logging.getLogger(LOGGER_NAME)
    if not logger.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
        logger.addHandler(handler)
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    logger.propagate = False


def set_global_log_sink(sink):
    """
    Set the global sink used for log messages.

    Args:
        sink: A callable taking one string, or None.
    """
    _logger.set_sink(sink)


def global_log(message, level=logging.INFO):
    """
    Append a log message to the global log.

    Args:
        message: The log message as a string.
        level: Standard logging level used when no sink is set.
    """
    _logger.log(message, level)


def clear_global_log():
    """
    Clear all messages from the global log sink.
    """
    _logger.clear()
