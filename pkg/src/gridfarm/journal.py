"""Write-ahead journal: append-only, line-delimited, checksummed records.

A transition is committed if and only if its record reached the journal.
Each line is a JSON object ``{seq, t_sim, kind, payload, crc32}``; the
checksum covers the other four fields in canonical serialization, so a
torn or corrupted tail is detectable on replay.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable


@dataclass(frozen=True)
class JournalRecord:
    seq: int
    t_sim: float
    kind: str
    payload: dict

    def encode(self) -> str:
        body = _canonical(self.seq, self.t_sim, self.kind, self.payload)
        crc = zlib.crc32(body.encode("utf-8"))
        return f'{{"seq":{self.seq},"t_sim":{json.dumps(self.t_sim)},"kind":{json.dumps(self.kind)},"payload":{json.dumps(self.payload, sort_keys=True, separators=(",", ":"))},"crc32":{crc}}}'


def _canonical(seq: int, t_sim: float, kind: str, payload: dict) -> str:
    return json.dumps([seq, t_sim, kind, payload], sort_keys=True, separators=(",", ":"))


def decode_record(line: str) -> JournalRecord | None:
    """Parse one journal line; None if torn or checksum-invalid."""
    line = line.strip()
    if not line:
        return None
    try:
        obj = json.loads(line)
        seq = obj["seq"]
        t_sim = obj["t_sim"]
        kind = obj["kind"]
        payload = obj["payload"]
        crc = obj["crc32"]
    except (ValueError, KeyError, TypeError):
        return None
    if zlib.crc32(_canonical(seq, t_sim, kind, payload).encode("utf-8")) != crc:
        return None
    return JournalRecord(seq=seq, t_sim=t_sim, kind=kind, payload=payload)


@dataclass(frozen=True)
class ReadReport:
    records: list[JournalRecord]
    lines_total: int
    truncated_at_line: int | None  # 1-based line number of the first bad record
    torn_tail: bool                # bad record was the final line


def read_journal_lines(lines: Iterable[str]) -> ReadReport:
    """Read committed records; stop at the first invalid one.

    A single invalid final line is a torn tail (normal after a crash);
    an invalid record followed by further lines is mid-stream corruption,
    reported via the truncation point either way.
    """
    records: list[JournalRecord] = []
    all_lines = [ln for ln in lines if ln.strip()]
    truncated_at = None
    expected_seq = None
    for idx, line in enumerate(all_lines, start=1):
        rec = decode_record(line)
        if rec is None:
            truncated_at = idx
            break
        if expected_seq is not None and rec.seq != expected_seq:
            truncated_at = idx
            break
        expected_seq = rec.seq + 1
        records.append(rec)
    torn = truncated_at == len(all_lines)
    return ReadReport(records=records, lines_total=len(all_lines),
                      truncated_at_line=truncated_at, torn_tail=torn)


def read_journal(path: str | Path) -> ReadReport:
    with open(path, "r", encoding="utf-8") as fh:
        return read_journal_lines(fh)


class JournalWriter:
    """Appends records durably before the in-memory state they describe
    is considered committed; keeps them in memory for live streaming."""

    def __init__(self, path: str | Path | None, durable: bool = False):
        self.path = Path(path) if path is not None else None
        self.durable = durable
        self.records: list[JournalRecord] = []
        self._next_seq = 0
        self._fh = None
        self._listeners: list[Callable[[JournalRecord], None]] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a", encoding="utf-8")

    @property
    def next_seq(self) -> int:
        return self._next_seq

    def subscribe(self, listener: Callable[[JournalRecord], None]) -> None:
        self._listeners.append(listener)

    def append(self, kind: str, payload: dict, t_sim: float) -> JournalRecord:
        rec = JournalRecord(seq=self._next_seq, t_sim=t_sim, kind=kind, payload=payload)
        if self._fh is not None:
            self._fh.write(rec.encode() + "\n")
            self._fh.flush()
            if self.durable:
                os.fsync(self._fh.fileno())
        self._next_seq += 1
        self.records.append(rec)
        for listener in self._listeners:
            listener(rec)
        return rec

    def preload(self, records: list[JournalRecord]) -> None:
        """Seed the writer with already-committed records (recovery path)."""
        self.records = list(records)
        self._next_seq = records[-1].seq + 1 if records else 0

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
