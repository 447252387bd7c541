"""Central store for sensor uploads.

Sensors push batches of framed transaction records over TLS, identified by
bearer token.  The collector keeps one append-only log per sensor and drops
record ids it has already stored, so at-least-once senders land exactly
once.  A batch is accepted or rejected whole: any malformed frame refuses
the POST and the sensor retries the batch intact.

The sensor identity is whatever the token table says; nothing on the wire
can claim a different name.  Token files look like::

    [tokens]
    branch-office: 5f1d2c...
    lab-rack: 90ab41...
"""

from __future__ import annotations

import hmac
import json
import os
import re
import ssl
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlsplit

from . import textconf
from .recordlog import (
    FramedLogWriter,
    LogReadResult,
    TransactionRecord,
    frame,
    parse_frames,
    read_log,
)

SENSOR_ID_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]{0,63}$")

MAX_BATCH_BYTES = 256 * 1024 * 1024


def load_tokens(path: str) -> dict[str, str]:
    """Read a token table; returns token -> sensor id."""
    with open(path, "r", encoding="utf-8") as fh:
        sections = textconf.parse_sections(fh.read())
    sec = textconf.first_section(sections, "tokens")
    if sec is None:
        raise textconf.ConfigError(f"{path}: no [tokens] section")
    out: dict[str, str] = {}
    for sensor_id, token in sec.pairs.items():
        if not SENSOR_ID_RE.match(sensor_id):
            raise textconf.ConfigError(f"{path}: bad sensor id {sensor_id!r}")
        if not token:
            raise textconf.ConfigError(f"{path}: empty token for {sensor_id!r}")
        if token in out:
            raise textconf.ConfigError(f"{path}: token reused by {sensor_id!r} and {out[token]!r}")
        out[token] = sensor_id
    return out


class Collector:
    """Ingest endpoint plus the per-sensor stores behind it.

    ``tokens`` maps bearer token to sensor id.  TLS material is required;
    ``allow_plain_http=True`` exists for in-process tests only.
    """

    def __init__(
        self,
        store_dir: str,
        tokens: dict[str, str],
        *,
        host: str = "127.0.0.1",
        port: int = 0,
        tls: tuple[str, str] | None = None,
        allow_plain_http: bool = False,
    ) -> None:
        if tls is None and not allow_plain_http:
            raise ValueError("collector refuses plain HTTP; provide a TLS cert and key")
        for sensor_id in tokens.values():
            if not SENSOR_ID_RE.match(sensor_id):
                raise ValueError(f"bad sensor id {sensor_id!r}")
        self.store_dir = store_dir
        os.makedirs(store_dir, exist_ok=True)
        self.tokens = dict(tokens)
        self._lock = threading.Lock()
        self._writers: dict[str, FramedLogWriter] = {}
        self._seen: dict[str, set[str]] = {}
        self.total_accepted = 0
        self.total_duplicates = 0
        owner = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"
            disable_nagle_algorithm = True  # small bodies; Nagle+delayed-ACK stalls every turn

            def log_message(self, fmt, *args):
                pass

            def do_POST(self):
                owner._handle_post(self)

            def do_GET(self):
                owner._handle_get(self)

        self.httpd = ThreadingHTTPServer((host, port), Handler)
        self.httpd.daemon_threads = True
        self.port = self.httpd.server_address[1]
        scheme = "http"
        if tls is not None:
            ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
            ctx.minimum_version = ssl.TLSVersion.TLSv1_2
            ctx.load_cert_chain(certfile=tls[0], keyfile=tls[1])
            self.httpd.socket = ctx.wrap_socket(self.httpd.socket, server_side=True)
            scheme = "https"
        self.url = f"{scheme}://{host}:{self.port}"
        self._thread: threading.Thread | None = None

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> "Collector":
        self._thread = threading.Thread(
            target=self.httpd.serve_forever, name="collector", daemon=True
        )
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._thread is not None:
            self.httpd.shutdown()
            self._thread.join(timeout=5)
            self._thread = None
        self.httpd.server_close()
        with self._lock:
            for writer in self._writers.values():
                writer.close()
            self._writers.clear()

    def __enter__(self) -> "Collector":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    # -- store --------------------------------------------------------------

    def _store_path(self, sensor_id: str) -> str:
        return os.path.join(self.store_dir, f"{sensor_id}.log")

    def _state(self, sensor_id: str) -> tuple[FramedLogWriter, set[str]]:
        """Writer and the known-id set, loading ids from disk on first touch."""
        writer = self._writers.get(sensor_id)
        if writer is None:
            seen = {r.record_id for r in read_log(self._store_path(sensor_id)).records}
            self._seen[sensor_id] = seen
            writer = FramedLogWriter(self._store_path(sensor_id))
            self._writers[sensor_id] = writer
        return writer, self._seen[sensor_id]

    def ingest(self, sensor_id: str, body: bytes) -> tuple[int, int]:
        """Store one uploaded batch; returns (accepted, duplicates).

        Raises ValueError if any frame or record in the batch is malformed;
        nothing from such a batch is stored.
        """
        records = [TransactionRecord.from_json(p) for p in parse_frames(body)]
        accepted = duplicates = 0
        with self._lock:
            writer, seen = self._state(sensor_id)
            for record in records:
                if record.record_id in seen:
                    duplicates += 1
                    continue
                writer.append(record)
                seen.add(record.record_id)
                accepted += 1
            self.total_accepted += accepted
            self.total_duplicates += duplicates
        return accepted, duplicates

    def export(self, sensor_id: str) -> LogReadResult:
        return read_log(self._store_path(sensor_id))

    def sensors(self) -> list[str]:
        found = set(self._seen)
        for name in os.listdir(self.store_dir):
            if name.endswith(".log"):
                found.add(name[: -len(".log")])
        return sorted(found)

    def stats(self) -> dict:
        with self._lock:
            per_sensor = {s: len(ids) for s, ids in self._seen.items()}
        return {
            "accepted": self.total_accepted,
            "duplicates": self.total_duplicates,
            "sensors": per_sensor,
        }

    # -- HTTP ---------------------------------------------------------------

    def _sensor_for_token(self, handler) -> str | None:
        header = handler.headers.get("Authorization", "")
        if not header.startswith("Bearer "):
            return None
        presented = header[len("Bearer "):].strip()
        for token, sensor_id in self.tokens.items():
            if hmac.compare_digest(presented, token):
                return sensor_id
        return None

    def _reply(self, handler, status: int, payload: bytes, content_type: str) -> None:
        handler.send_response(status)
        handler.send_header("Content-Type", content_type)
        handler.send_header("Content-Length", str(len(payload)))
        handler.end_headers()
        handler.wfile.write(payload)

    def _reply_json(self, handler, status: int, doc: dict) -> None:
        self._reply(handler, status, json.dumps(doc).encode(), "application/json")

    def _handle_post(self, handler) -> None:
        sensor_id = self._sensor_for_token(handler)
        if sensor_id is None:
            self._reply_json(handler, 401, {"error": "bad or missing bearer token"})
            return
        if urlsplit(handler.path).path != "/ingest":
            self._reply_json(handler, 404, {"error": "unknown endpoint"})
            return
        claimed = handler.headers.get("X-Sensor-Id", "")
        if claimed and claimed != sensor_id:
            self._reply_json(
                handler, 400, {"error": f"token belongs to {sensor_id!r}, not {claimed!r}"}
            )
            return
        length = int(handler.headers.get("Content-Length", "0") or 0)
        if length > MAX_BATCH_BYTES:
            self._reply_json(handler, 413, {"error": "batch too large"})
            return
        body = handler.rfile.read(length) if length else b""
        try:
            accepted, duplicates = self.ingest(sensor_id, body)
        except ValueError as exc:
            self._reply_json(handler, 400, {"error": str(exc)})
            return
        self._reply_json(handler, 200, {"accepted": accepted, "duplicates": duplicates})

    def _handle_get(self, handler) -> None:
        sensor_id = self._sensor_for_token(handler)
        if sensor_id is None:
            self._reply_json(handler, 401, {"error": "bad or missing bearer token"})
            return
        url = urlsplit(handler.path)
        if url.path == "/sensors":
            self._reply_json(handler, 200, {"sensors": self.sensors(), "stats": self.stats()})
            return
        if url.path == "/records":
            query = parse_qs(url.query)
            wanted = query.get("sensor", [sensor_id])[0]
            if not SENSOR_ID_RE.match(wanted):
                self._reply_json(handler, 400, {"error": "bad sensor id"})
                return
            result = self.export(wanted)
            payload = b"".join(frame(r.to_json()) for r in result.records)
            self._reply(handler, 200, payload, "application/octet-stream")
            return
        self._reply_json(handler, 404, {"error": "unknown endpoint"})
