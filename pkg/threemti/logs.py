"""Logging setup and JSON-lines artifact writers."""

from __future__ import annotations

import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any, Iterator

FORMAT_VERSION = 1
LOG_FORMAT = "%(asctime)s [THREEMTI] %(levelname)s %(name)s: %(message)s"

_configured = False
_file_handler: logging.Handler | None = None


class _UtcFormatter(logging.Formatter):
    converter = time.gmtime

    def formatTime(self, record, datefmt=None):  # noqa: N802
        ts = time.strftime("%Y-%m-%dT%H:%M:%S", self.converter(record.created))
        return f"{ts}.{int(record.msecs):03d}Z"


def setup(level: str | None = None, log_file: str | Path | None = None) -> None:
    """Configure the package logger once; later calls only switch the run log file."""
    global _configured, _file_handler
    root = logging.getLogger("threemti")
    if not _configured:
        lvl = (level or os.environ.get("THREEMTI_LOG_LEVEL") or "INFO").upper()
        root.setLevel(lvl)
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(_UtcFormatter(LOG_FORMAT))
        root.addHandler(handler)
        root.propagate = False
        _configured = True
    if log_file is not None:
        # one run log at a time; a new run directory takes over
        if _file_handler is not None:
            root.removeHandler(_file_handler)
            _file_handler.close()
        path = Path(log_file)
        path.parent.mkdir(parents=True, exist_ok=True)
        _file_handler = logging.FileHandler(path, encoding="utf-8")
        _file_handler.setFormatter(_UtcFormatter(LOG_FORMAT))
        root.addHandler(_file_handler)


class JsonlWriter:
    """Append-only JSON-lines writer; every row is stamped with provenance."""

    def __init__(self, path: str | Path, **provenance: Any):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.provenance = {"format_version": FORMAT_VERSION, **provenance}
        self._fh = self.path.open("w", encoding="utf-8")

    def write(self, row: dict[str, Any]) -> None:
        self._fh.write(json.dumps({**row, **self.provenance}, sort_keys=False))
        self._fh.write("\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "JsonlWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_jsonl(path: str | Path) -> Iterator[dict[str, Any]]:
    with Path(path).open("r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                yield json.loads(line)
