"""Append-only transaction log with per-record framing and checksums.

Each record is one observed HTTP exchange (or one direction of it), stored
as canonical JSON inside a frame of ``u32 length | u32 crc32 | payload``.
A reader walks frames until the file ends or a frame fails its checksum or
length sanity check; everything before the bad frame stays readable and the
corruption offset is reported rather than papered over.
"""

from __future__ import annotations

import base64
import json
import struct
import threading
import zlib
from dataclasses import dataclass, field, replace

_FRAME_HEADER = struct.Struct(">II")
MAX_FRAME_BYTES = 64 * 1024 * 1024

# Fields an anonymized record is allowed to carry, and nothing else.
ANONYMOUS_FIELDS = ("record_id", "timestamp", "direction", "command", "events")


@dataclass(frozen=True)
class TransactionRecord:
    record_id: str
    timestamp: float
    flow: str = ""
    direction: str = ""  # "client-to-acs" | "acs-to-client"
    command: str = ""
    events: tuple[str, ...] = ()
    http: dict = field(default_factory=dict)
    body: bytes = b""
    notes: tuple[str, ...] = ()
    redacted: bool = False
    anonymized: bool = False

    def to_json(self) -> bytes:
        if self.anonymized:
            payload = {
                "record_id": self.record_id,
                "timestamp": self.timestamp,
                "direction": self.direction,
                "command": self.command,
                "events": list(self.events),
            }
        else:
            payload = {
                "record_id": self.record_id,
                "timestamp": self.timestamp,
                "flow": self.flow,
                "direction": self.direction,
                "command": self.command,
                "events": list(self.events),
                "http": self.http,
                "body_b64": base64.b64encode(self.body).decode("ascii"),
                "notes": list(self.notes),
                "redacted": self.redacted,
            }
        return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")

    @classmethod
    def from_json(cls, data: bytes) -> "TransactionRecord":
        payload = json.loads(data.decode("utf-8"))
        if set(payload) <= set(ANONYMOUS_FIELDS):
            return cls(
                record_id=payload.get("record_id", ""),
                timestamp=payload.get("timestamp", 0.0),
                direction=payload.get("direction", ""),
                command=payload.get("command", ""),
                events=tuple(payload.get("events", [])),
                anonymized=True,
            )
        return cls(
            record_id=payload.get("record_id", ""),
            timestamp=payload.get("timestamp", 0.0),
            flow=payload.get("flow", ""),
            direction=payload.get("direction", ""),
            command=payload.get("command", ""),
            events=tuple(payload.get("events", [])),
            http=payload.get("http", {}),
            body=base64.b64decode(payload.get("body_b64", "")),
            notes=tuple(payload.get("notes", [])),
            redacted=payload.get("redacted", False),
        )

    def with_notes(self, *extra: str) -> "TransactionRecord":
        return replace(self, notes=self.notes + tuple(extra))


def frame(payload: bytes) -> bytes:
    return _FRAME_HEADER.pack(len(payload), zlib.crc32(payload) & 0xFFFFFFFF) + payload


def parse_frames(data: bytes) -> list[bytes]:
    """Split concatenated frames arriving over the network.

    Unlike ``read_log`` this is all-or-nothing: any defect raises ValueError
    so the sender can retry the whole batch intact.
    """
    out: list[bytes] = []
    offset = 0
    while offset < len(data):
        if offset + _FRAME_HEADER.size > len(data):
            raise ValueError(f"truncated frame header at byte {offset}")
        length, crc = _FRAME_HEADER.unpack_from(data, offset)
        if length > MAX_FRAME_BYTES:
            raise ValueError(f"implausible frame length {length} at byte {offset}")
        start = offset + _FRAME_HEADER.size
        payload = data[start : start + length]
        if len(payload) < length:
            raise ValueError(f"truncated frame payload at byte {offset}")
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise ValueError(f"checksum mismatch at byte {offset}")
        out.append(payload)
        offset = start + length
    return out


class FramedLogWriter:
    """Thread-safe appender.  One call, one durable frame."""

    def __init__(self, path: str, *, fsync: bool = False) -> None:
        self.path = path
        self.fsync = fsync
        self._lock = threading.Lock()
        self._fh = open(path, "ab")

    def append(self, record: TransactionRecord) -> None:
        self.append_payload(record.to_json())

    def append_payload(self, payload: bytes) -> None:
        data = frame(payload)
        with self._lock:
            if self._fh.closed:
                raise ValueError("log writer is closed")
            self._fh.write(data)
            self._fh.flush()
            if self.fsync:
                import os

                os.fsync(self._fh.fileno())

    def close(self) -> None:
        with self._lock:
            if not self._fh.closed:
                self._fh.close()


@dataclass
class LogReadResult:
    records: list[TransactionRecord] = field(default_factory=list)
    corrupt_at: int | None = None
    error: str = ""

    @property
    def intact(self) -> bool:
        return self.corrupt_at is None


def read_log(path: str) -> LogReadResult:
    result = LogReadResult()
    try:
        fh = open(path, "rb")
    except FileNotFoundError:
        return result
    with fh:
        offset = 0
        while True:
            header = fh.read(_FRAME_HEADER.size)
            if not header:
                break
            if len(header) < _FRAME_HEADER.size:
                result.corrupt_at = offset
                result.error = "truncated frame header"
                break
            length, crc = _FRAME_HEADER.unpack(header)
            if length > MAX_FRAME_BYTES:
                result.corrupt_at = offset
                result.error = f"implausible frame length {length}"
                break
            payload = fh.read(length)
            if len(payload) < length:
                result.corrupt_at = offset
                result.error = "truncated frame payload"
                break
            if zlib.crc32(payload) & 0xFFFFFFFF != crc:
                result.corrupt_at = offset
                result.error = "checksum mismatch"
                break
            try:
                result.records.append(TransactionRecord.from_json(payload))
            except (ValueError, json.JSONDecodeError) as exc:
                result.corrupt_at = offset
                result.error = f"undecodable record: {exc}"
                break
            offset += _FRAME_HEADER.size + length
    return result
