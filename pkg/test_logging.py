"""
test_logging.py

Tests for the global log used by the simulator modules.
"""

import logging

import pytest

from sim_logger import LOGGER_NAME, clear_global_log, configure_logging, global_log, set_global_log_sink


@pytest.fixture
def sink():
    messages = []
    set_global_log_sink(messages.append)
    yield messages
    set_global_log_sink(None)


def test_messages_reach_sink(sink):
    global_log("[SIM] started")
    global_log("[NET] link down", logging.WARNING)
    assert sink == ["[SIM] started", "[NET] link down"]


def test_clear_empties_list_sink(sink):
    global_log("one")
    clear_global_log()
    assert sink == []


def test_clear_without_sink_is_harmless():
    set_global_log_sink(None)
    clear_global_log()


def test_standard_logger_without_sink(caplog):
    set_global_log_sink(None)
    configure_logging(verbose=True)
    logger = logging.getLogger(LOGGER_NAME)
    logger.addHandler(caplog.handler)
    try:
        global_log("[LQR] converged", logging.DEBUG)
    finally:
        logger.removeHandler(caplog.handler)
    assert [(r.levelno, r.getMessage()) for r in caplog.records] == [(logging.DEBUG, "[LQR] converged")]


def test_configure_logging_installs_one_handler():
    configure_logging()
    configure_logging(verbose=True)
    logger = logging.getLogger(LOGGER_NAME)
    assert len([h for h in logger.handlers if isinstance(h, logging.StreamHandler)]) == 1
    assert logger.level == logging.DEBUG
    configure_logging()
    assert logger.level == logging.INFO
