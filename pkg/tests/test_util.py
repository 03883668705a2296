# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

import logging
import os
import re
from unittest.mock import patch

import pendulum

from adabin.costmodel import conv_cost
from adabin.interface import ConvMode
from adabin.util import JsonLines, homedir, read_jsonl, run_dirname, setup_logging, timestamp

NOW = pendulum.datetime(2020, 5, 3, 14, 7, 9, tz="UTC")


def _added_handlers(before):
    logger = logging.getLogger("adabin")
    return [handler for handler in logger.handlers if handler not in before]


def _remove_handlers(before):
    logger = logging.getLogger("adabin")
    for handler in _added_handlers(before):
        handler.close()
        logger.removeHandler(handler)


class TestUtil:
    """
    Unit tests for utilities.
    """

    def test_homedir(self):
        assert homedir() == os.path.expanduser("~")  # different way to get same value

    @patch("adabin.util.pendulum.now")
    def test_timestamp(self, now):
        now.return_value = NOW
        assert timestamp() == "2020-05-03T14:07:09+00:00"
        now.assert_called_once_with("UTC")

    @patch("adabin.util.pendulum.now")
    def test_run_dirname(self, now):
        now.return_value = NOW
        assert run_dirname("train") == "train-20200503T140709"

    def test_json_lines(self, tmp_path):
        path = str(tmp_path / "metrics.jsonl")
        with JsonLines(path) as metrics:
            metrics.write({"epoch": 0, "loss": 2.5})
            metrics.write({"epoch": 1, "loss": 1.5})
        with JsonLines(path, append=True) as metrics:
            metrics.write({"epoch": 2, "loss": 1.0})
        assert read_jsonl(path) == [{"epoch": 0, "loss": 2.5}, {"epoch": 1, "loss": 1.5}, {"epoch": 2, "loss": 1.0}]
        with open(path, "r", encoding="utf-8") as handle:
            assert handle.readline() == '{"epoch": 0, "loss": 2.5}\n'

    def test_json_lines_attrs(self, tmp_path):
        path = str(tmp_path / "costs.jsonl")
        with JsonLines(path) as metrics:
            metrics.write(conv_cost(2, 3, 3, 4, 5, ConvMode.ADABIN, "only"))
        (record,) = read_jsonl(path)
        assert record["name"] == "only"
        assert record["kind"] == "adabin"
        assert record["binary_ops"] == 2160

    def test_setup_logging_levels(self):
        before = list(logging.getLogger("adabin").handlers)
        try:
            for (quiet, verbose, debug), level in [
                ((True, False, False), logging.ERROR),
                ((False, True, False), logging.DEBUG),
                ((False, False, True), logging.DEBUG),
                ((False, False, False), logging.INFO),
            ]:
                setup_logging(quiet, verbose, debug)
                assert _added_handlers(before)[-1].level == level
        finally:
            _remove_handlers(before)
            logging.captureWarnings(False)
            for handler in list(logging.getLogger("py.warnings").handlers):
                logging.getLogger("py.warnings").removeHandler(handler)

    def test_setup_logging_file(self, tmp_path):
        path = str(tmp_path / "adabin.log")
        before = list(logging.getLogger("adabin").handlers)
        try:
            setup_logging(quiet=False, verbose=False, debug=False, logfile_path=path)
            logging.getLogger("adabin.test").info("Hello")
            for handler in _added_handlers(before):
                handler.flush()
            with open(path, "r", encoding="utf-8") as handle:
                assert re.search(r"Z --> \[INFO   \] Hello", handle.read())
        finally:
            _remove_handlers(before)
