# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:
# pylint: disable=unsubscriptable-object

"""
Shared utilities.
"""

import json
import logging
import sys
import time
from logging import FileHandler, StreamHandler
from pathlib import Path
from typing import Any, Dict, List, Optional, TextIO

import cattrs
import pendulum

log = logging.getLogger("adabin.util")


def homedir() -> str:
    """Get the current user's home directory."""
    return str(Path.home())


def timestamp() -> str:
    """Current UTC time as an ISO-8601 string, used for checkpoint headers."""
    return pendulum.now("UTC").isoformat()  # type: ignore


def run_dirname(prefix: str) -> str:
    """Name for a new run directory, ordered by UTC start time."""
    return "%s-%s" % (prefix, pendulum.now("UTC").format("YYYYMMDDTHHmmss"))


class JsonLines:
    """
    Append-only writer for metrics, one JSON object per line.

    Records never carry wall-clock timestamps, so two runs with the same seed produce the same file.
    """

    def __init__(self, path: str, append: bool = False) -> None:
        self.path = path
        self._handle: TextIO = open(path, "a" if append else "w", encoding="utf-8")  # pylint: disable=consider-using-with

    def write(self, record: Any) -> None:
        data = record if isinstance(record, dict) else cattrs.unstructure(record)
        self._handle.write(json.dumps(data, sort_keys=True) + "\n")
        self._handle.flush()

    def close(self) -> None:
        self._handle.close()

    def __enter__(self) -> "JsonLines":
        return self

    def __exit__(self, *args: Any) -> None:
        self.close()


def read_jsonl(path: str) -> List[Dict[str, Any]]:
    """Read a JSON lines file."""
    with open(path, "r", encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]


def setup_logging(quiet: bool, verbose: bool, debug: bool, logfile_path: Optional[str] = None) -> None:
    """Set up Python logging."""
    logger = logging.getLogger("adabin")
    logger.setLevel(logging.DEBUG)
    handler: StreamHandler = FileHandler(logfile_path) if logfile_path else StreamHandler(sys.stdout)  # type: ignore
    formatter = logging.Formatter(fmt="%(asctime)sZ --> [%(levelname)-7s] %(message)s")
    formatter.converter = time.gmtime  # type: ignore
    handler.setFormatter(formatter)
    handler.setLevel(logging.INFO)
    if quiet:
        handler.setLevel(logging.ERROR)
    if verbose or debug:
        handler.setLevel(logging.DEBUG)
    if debug:
        logging.captureWarnings(True)
        wlogger = logging.getLogger("py.warnings")
        wlogger.setLevel(logging.WARNING)
        wlogger.addHandler(handler)
    logger.addHandler(handler)
