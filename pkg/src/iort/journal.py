"""Append-only broker journal: one JSON record per line, replayable.

Enqueues and queue-level acks are fsynced before the operation is
acknowledged; bookkeeping records (leases, sequence closes, pattern uses)
are flushed but not synced, so a crash can only lose a suffix — recovery
always sees a prefix-consistent history. Replay stops at the first
undecodable line, which tolerates a torn final write.
"""

from __future__ import annotations

import json
import logging
import os
from typing import Iterator

logger = logging.getLogger(__name__)


class Journal:
    def __init__(self, path: str) -> None:
        self.path = path
        self._fh = open(path, "ab")

    def append(self, record: dict, durable: bool = False) -> None:
        line = json.dumps(record, separators=(",", ":"), ensure_ascii=False) + "\n"
        self._fh.write(line.encode("utf-8"))
        self._fh.flush()
        if durable:
            os.fsync(self._fh.fileno())

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.flush()
            os.fsync(self._fh.fileno())
            self._fh.close()

    def __enter__(self) -> "Journal":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_records(path: str) -> Iterator[dict]:
    """Yield journal records in order, stopping at the first bad line."""
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.endswith(b"\n"):
                logger.warning("journal %s: torn final record at line %d ignored", path, lineno)
                return
            try:
                record = json.loads(raw)
            except json.JSONDecodeError:
                logger.warning("journal %s: undecodable record at line %d; stopping replay", path, lineno)
                return
            if not isinstance(record, dict) or "op" not in record:
                logger.warning("journal %s: malformed record at line %d; stopping replay", path, lineno)
                return
            yield record
