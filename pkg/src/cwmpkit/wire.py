"""Shared wire-level records: HTTP requests, responses, exchanges, transcripts.

These are plain data, produced by the session layer and the sensor and
consumed by validators, probes, and the record log.  Nothing here talks to
the network.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterator


@dataclass
class HttpRequestData:
    method: str
    url: str
    headers: dict[str, str] = field(default_factory=dict)
    body: bytes = b""


@dataclass
class HttpResponseData:
    status: int
    reason: str = ""
    headers: dict[str, str] = field(default_factory=dict)
    body: bytes = b""

    def header(self, name: str, default: str = "") -> str:
        low = name.lower()
        for k, v in self.headers.items():
            if k.lower() == low:
                return v
        return default


@dataclass
class HttpExchange:
    request: HttpRequestData
    response: HttpResponseData | None = None
    started: float = field(default_factory=time.time)
    finished: float = 0.0
    error: str = ""
    notes: list[str] = field(default_factory=list)


@dataclass
class SessionTranscript:
    """Everything one CWMP session put on the wire, in order."""

    acs_url: str = ""
    exchanges: list[HttpExchange] = field(default_factory=list)
    posture_notes: list[str] = field(default_factory=list)
    final_phase: str = ""
    error: str = ""

    def add(self, exchange: HttpExchange) -> None:
        self.exchanges.append(exchange)

    def note_posture(self, text: str) -> None:
        if text not in self.posture_notes:
            self.posture_notes.append(text)

    def request_bodies(self) -> Iterator[bytes]:
        for ex in self.exchanges:
            if ex.request.body:
                yield ex.request.body

    def response_bodies(self) -> Iterator[bytes]:
        for ex in self.exchanges:
            if ex.response is not None and ex.response.body:
                yield ex.response.body

    @property
    def duration(self) -> float:
        if not self.exchanges:
            return 0.0
        last = self.exchanges[-1]
        end = last.finished or last.started
        return max(0.0, end - self.exchanges[0].started)


def header_get(headers: dict[str, str], name: str, default: str = "") -> str:
    low = name.lower()
    for k, v in headers.items():
        if k.lower() == low:
            return v
    return default


def strip_hop_headers(headers: dict[str, str]) -> dict[str, str]:
    """Drop hop-by-hop headers before re-sending a proxied message."""
    hop = {
        "connection",
        "keep-alive",
        "proxy-authenticate",
        "proxy-authorization",
        "te",
        "trailers",
        "transfer-encoding",
        "upgrade",
        "host",
        "content-length",
    }
    return {k: v for k, v in headers.items() if k.lower() not in hop}
