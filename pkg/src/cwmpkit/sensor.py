"""In-path monitoring for management sessions.

The sensor sits between a client and its server, either as a plain reverse
proxy or terminating TLS toward the client with its own certificate.  Every
exchange is relayed byte-exact unless a rewrite is required, decoded on the
side, linted for protocol violations, and persisted to a framed record log.

What gets persisted is deliberately less than what was relayed:

* secret-bearing parameter values and Authorization headers are blanked
  before a record is written, never after;
* an anonymizing mode strips records down to command names and event codes.

The rewrite guard keeps the sensor on-path: when the upstream orders the
client to use a different server URL, the relayed command is rewritten to
keep the client pointed at the sensor, and once the client acknowledges,
new conversations are forwarded to the new upstream while in-flight ones
finish where they started.  The original value is preserved in the record
notes.  The guard works in both directions: whenever the client reports
its management URL upstream (Inform parameters, read-backs), the sensor's
address is swapped for the URL the server believes it configured, so the
interception stays invisible from the server side.  One sensor fronts one
device's server relationship; the guard state is process-wide by design.
"""

from __future__ import annotations

import os
import ssl
import threading
import time
from dataclasses import dataclass, field, replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import urlsplit

from . import codec
from .device import GUARD_URL_PARAMS
from .recordlog import FramedLogWriter, TransactionRecord, frame, read_log
from .transport import RealTransport, TlsPolicy, TransportError
from .wire import HttpRequestData, strip_hop_headers

REDACTED = "«REDACTED»"

# Leaf-name suffixes whose values never belong in a record, wherever they
# appear.  Suffix match catches ConnectionRequestPassword and vendor spins.
SECRET_LEAF_SUFFIXES = ("Password", "Passphrase", "PreSharedKey", "Secret", "WEPKey")

SENSITIVE_HEADERS = ("authorization", "proxy-authorization")


def _is_secret_path(path: str) -> bool:
    leaf = path.rsplit(".", 1)[-1]
    return any(leaf.endswith(s) for s in SECRET_LEAF_SUFFIXES)


def redact_envelope(envelope: codec.RpcEnvelope) -> tuple[codec.RpcEnvelope, tuple[str, ...]]:
    """Blank secret values in a decoded message; reports which paths were hit."""
    body = envelope.body
    hits: list[str] = []

    def scrub_pairs(pairs):
        out = []
        for p in pairs:
            if _is_secret_path(p.path) and p.value:
                hits.append(p.path)
                out.append(replace(p, value=REDACTED))
            else:
                out.append(p)
        return tuple(out)

    new_body = body
    if hasattr(body, "parameter_list"):
        scrubbed = scrub_pairs(body.parameter_list)
        if hits:
            new_body = replace(new_body, parameter_list=scrubbed)
    if hasattr(body, "password") and getattr(body, "password"):
        hits.append(f"{envelope.kind}.Password")
        new_body = replace(new_body, password=REDACTED)
    if new_body is body:
        return envelope, ()
    return replace(envelope, body=new_body), tuple(hits)


def redact_headers(headers: dict[str, str]) -> dict[str, str]:
    out = {}
    for k, v in headers.items():
        out[k] = REDACTED if k.lower() in SENSITIVE_HEADERS else v
    return out


@dataclass
class GuardState:
    """Where clients should point (the sensor) and where traffic goes now."""

    advertised_url: str
    upstream_url: str
    pending_upstream: str = ""
    retargets: list[str] = field(default_factory=list)


def rewrite_guard(
    envelope: codec.RpcEnvelope, state: GuardState
) -> tuple[codec.RpcEnvelope, tuple[str, ...]]:
    """Rewrite server-ordered URL changes so the client keeps using the sensor.

    Returns the (possibly replaced) envelope and notes.  The new upstream is
    staged in ``state.pending_upstream``; commit happens when the client's
    acknowledgement passes back through (see ``guard_observe_ack``).
    """
    if envelope.kind != "SetParameterValues":
        return envelope, ()
    notes: list[str] = []
    new_pairs = []
    for p in envelope.body.parameter_list:
        if p.path in GUARD_URL_PARAMS and p.value and p.value != state.advertised_url:
            notes.append(f"rewrite-guard: {p.path} ordered to {p.value!r}; client kept on sensor")
            state.pending_upstream = p.value
            new_pairs.append(replace(p, value=state.advertised_url))
        else:
            new_pairs.append(p)
    if not notes:
        return envelope, ()
    return replace(envelope, body=replace(envelope.body, parameter_list=tuple(new_pairs))), tuple(notes)


def conceal_from_server(
    envelope: codec.RpcEnvelope, state: GuardState
) -> tuple[codec.RpcEnvelope, tuple[str, ...]]:
    """Hide the sensor address from the server side of the conversation.

    A guarded client holds the sensor's URL, so its Inform parameters and
    read-backs would reveal the interception.  Any management-URL value equal
    to the advertised address is replaced with the URL the server believes it
    configured before the message is relayed upstream.
    """
    pairs = getattr(envelope.body, "parameter_list", None)
    if not pairs:
        return envelope, ()
    notes: list[str] = []
    new_pairs = []
    for p in pairs:
        if p.path in GUARD_URL_PARAMS and p.value == state.advertised_url:
            notes.append(f"rewrite-guard: {p.path} shown to the server as the upstream URL")
            new_pairs.append(replace(p, value=state.upstream_url))
        else:
            new_pairs.append(p)
    if not notes:
        return envelope, ()
    return replace(envelope, body=replace(envelope.body, parameter_list=tuple(new_pairs))), tuple(notes)


def guard_observe_ack(envelope: codec.RpcEnvelope, state: GuardState) -> tuple[str, ...]:
    """Commit a staged upstream change once the client acknowledged the set."""
    if not state.pending_upstream:
        return ()
    if envelope.kind == "SetParameterValuesResponse":
        new_url = state.pending_upstream
        state.pending_upstream = ""
        state.upstream_url = new_url
        state.retargets.append(new_url)
        return (f"rewrite-guard: upstream retargeted to {new_url!r}",)
    if envelope.kind == "Fault":
        staged = state.pending_upstream
        state.pending_upstream = ""
        return (f"rewrite-guard: client refused the URL change to {staged!r}; upstream unchanged",)
    return ()


@dataclass
class SensorConfig:
    listen_host: str = "127.0.0.1"
    listen_port: int = 0
    upstream_url: str = ""
    store_path: str = ""
    sensor_id: str = "sensor"
    redact: bool = True
    anonymize: bool = False
    guard: bool = True
    advertised_url: str = ""  # defaults to the listen address
    tls_cert: str = ""  # terminate TLS toward clients with this cert
    tls_key: str = ""
    upstream_tls_mode: str = "no-verify"
    upstream_trust_roots: str = ""
    timeout: float = 30.0


class SensorServer:
    def __init__(self, config: SensorConfig) -> None:
        if not config.upstream_url:
            raise ValueError("sensor needs an upstream_url")
        self.config = config
        self._tls_policy = TlsPolicy(
            mode=config.upstream_tls_mode,
            trust_roots=config.upstream_trust_roots or None,
        )
        self._local = threading.local()
        self._transports: list[RealTransport] = []
        self._writer = FramedLogWriter(config.store_path) if config.store_path else None
        self._seq = 0
        self._lock = threading.Lock()
        self.records_written = 0
        self.suspicions: list[str] = []
        owner = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"
            disable_nagle_algorithm = True  # small bodies; Nagle+delayed-ACK stalls every turn
            timeout = config.timeout + 5

            def log_message(self, fmt, *args):
                pass

            def setup(self):
                super().setup()
                # per-TCP-connection conversation state
                self.msg_count = 0
                self.last_client_request = None
                self.last_server_request = None
                # pinned on first use so an upstream retarget committed
                # mid-conversation never splits a session across servers
                self.pinned_upstream = ""

            def finish(self):
                super().finish()
                # the upstream connection lives exactly as long as this one
                owner._drop_transport()

            def do_POST(self):
                owner._relay(self)

            def do_GET(self):
                owner._relay(self)

        self.httpd = ThreadingHTTPServer((config.listen_host, config.listen_port), Handler)
        self.httpd.daemon_threads = True
        self.port = self.httpd.server_address[1]
        scheme = "http"
        if config.tls_cert:
            ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
            ctx.minimum_version = ssl.TLSVersion.TLSv1_2
            ctx.load_cert_chain(certfile=config.tls_cert, keyfile=config.tls_key or None)
            self.httpd.socket = ctx.wrap_socket(self.httpd.socket, server_side=True)
            scheme = "https"
        self.listen_url = f"{scheme}://{config.listen_host}:{self.port}/acs"
        self.guard_state = GuardState(
            advertised_url=config.advertised_url or self.listen_url,
            upstream_url=config.upstream_url,
        )
        self._thread: threading.Thread | None = None

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> "SensorServer":
        self._thread = threading.Thread(target=self.httpd.serve_forever, name="sensor", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._thread is not None:
            self.httpd.shutdown()
            self._thread.join(timeout=5)
            self._thread = None
        self.httpd.server_close()
        with self._lock:
            leftover = list(self._transports)
            self._transports.clear()
        for transport in leftover:
            transport.close()
        if self._writer:
            self._writer.close()

    def _transport(self) -> RealTransport:
        """Handler threads are per client connection; so are upstream links."""
        transport = getattr(self._local, "transport", None)
        if transport is None:
            transport = RealTransport(self._tls_policy, timeout=self.config.timeout)
            self._local.transport = transport
            with self._lock:
                self._transports.append(transport)
        return transport

    def _drop_transport(self) -> None:
        transport = getattr(self._local, "transport", None)
        if transport is None:
            return
        self._local.transport = None
        with self._lock:
            if transport in self._transports:
                self._transports.remove(transport)
        transport.close()

    def __enter__(self) -> "SensorServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    # -- persistence ----------------------------------------------------------

    def _next_record_id(self) -> str:
        with self._lock:
            self._seq += 1
            return f"{self.config.sensor_id}-{self._seq:08d}"

    def _persist(
        self,
        *,
        direction: str,
        flow: str,
        http: dict,
        body: bytes,
        envelope: codec.RpcEnvelope | None,
        notes: tuple[str, ...],
    ) -> None:
        cfg = self.config
        command = envelope.kind if envelope is not None else ""
        events: tuple[str, ...] = ()
        if envelope is not None and envelope.kind == "Inform":
            events = tuple(e.code for e in envelope.body.events)
        stored_body = body
        redacted = False
        if cfg.redact and not cfg.anonymize:
            if envelope is not None:
                scrubbed, hits = redact_envelope(envelope)
                if hits:
                    stored_body = codec.encode(scrubbed)
                    notes = notes + tuple(f"redacted: {h}" for h in hits)
            redacted = True
        record = TransactionRecord(
            record_id=self._next_record_id(),
            timestamp=time.time(),
            flow=flow,
            direction=direction,
            command=command,
            events=events,
            http=http,
            body=b"" if cfg.anonymize else stored_body,
            notes=() if cfg.anonymize else notes,
            redacted=redacted,
            anonymized=cfg.anonymize,
        )
        for note in notes:
            if note.startswith("suspicion:"):
                with self._lock:
                    self.suspicions.append(note)
        if self._writer:
            self._writer.append(record)
        with self._lock:
            self.records_written += 1

    # -- the relay ------------------------------------------------------------

    def _decode_for_inspection(
        self, body: bytes
    ) -> tuple[codec.RpcEnvelope | None, tuple[str, ...]]:
        if not body:
            return None, ()
        try:
            envelope = codec.decode(body, mode="lenient")
        except codec.DecodeError as exc:
            return None, (f"suspicion: undecodable message ({exc})",)
        notes = tuple(f"lenient recovery: {n}" for n in envelope.recovery_notes)
        return envelope, notes

    def _lint(self, envelope, *, role, in_response_to, first_in_session) -> tuple[str, ...]:
        if envelope is None:
            return ()
        violations = codec.validate(
            envelope,
            role=role,
            in_response_to=in_response_to,
            first_in_session=first_in_session,
        )
        return tuple(f"suspicion: {v.code}: {v.message}" for v in violations)

    def _relay(self, handler) -> None:
        cfg = self.config
        length = int(handler.headers.get("Content-Length", "0") or 0)
        request_body = handler.rfile.read(length) if length else b""
        client = f"{handler.client_address[0]}:{handler.client_address[1]}"
        first_in_session = handler.msg_count == 0 and "Cookie" not in handler.headers
        handler.msg_count += 1

        request_env, request_notes = self._decode_for_inspection(request_body)
        request_is_reply = request_env is not None and not request_env.is_request
        request_notes += self._lint(
            request_env,
            role="client",
            in_response_to=handler.last_server_request if request_is_reply else None,
            first_in_session=first_in_session,
        )
        content_type = handler.headers.get("Content-Type", "")
        if request_body and content_type != codec.CONTENT_TYPE:
            request_notes += (f"suspicion: content-type deviates: {content_type!r}",)
        forward_body = request_body
        if request_env is not None:
            request_notes += guard_observe_ack(request_env, self.guard_state)
            if cfg.guard:
                masked, mask_notes = conceal_from_server(request_env, self.guard_state)
                if mask_notes:
                    forward_body = codec.encode(masked)
                    request_env = masked
                    request_notes += mask_notes
            if request_env.is_request:
                handler.last_client_request = request_env
            else:
                handler.last_server_request = None

        if not handler.pinned_upstream:
            handler.pinned_upstream = self.guard_state.upstream_url
        upstream = handler.pinned_upstream
        parts = urlsplit(upstream)
        forward_headers = strip_hop_headers(dict(handler.headers.items()))
        forward_headers["Host"] = parts.netloc
        target = f"{parts.scheme}://{parts.netloc}{handler.path}"
        flow = f"{client}->{parts.netloc}"

        try:
            response = self._transport().request(
                HttpRequestData(handler.command, target, forward_headers, forward_body)
            )
        except TransportError as exc:
            self._persist(
                direction="client-to-acs",
                flow=flow,
                http={"method": handler.command, "path": handler.path,
                      "headers": redact_headers(dict(handler.headers.items()))},
                body=forward_body,
                envelope=request_env,
                notes=request_notes + (f"upstream unreachable: {exc}",),
            )
            handler.send_response(502)
            handler.send_header("Content-Length", "0")
            handler.end_headers()
            return

        response_body = response.body
        response_env, response_notes = self._decode_for_inspection(response_body)
        response_is_reply = response_env is not None and not response_env.is_request
        response_notes += self._lint(
            response_env,
            role="acs",
            in_response_to=handler.last_client_request if response_is_reply else None,
            first_in_session=False,
        )
        relay_body = response_body
        if cfg.guard and response_env is not None:
            rewritten, guard_notes = rewrite_guard(response_env, self.guard_state)
            if guard_notes:
                relay_body = codec.encode(rewritten)
                response_notes += guard_notes
        if response_env is not None:
            if response_env.is_request:
                handler.last_server_request = response_env
            else:
                handler.last_client_request = None

        # persist both directions before the reply leaves
        self._persist(
            direction="client-to-acs",
            flow=flow,
            http={"method": handler.command, "path": handler.path, "status": response.status,
                  "headers": redact_headers(dict(handler.headers.items()))},
            body=forward_body,
            envelope=request_env,
            notes=request_notes,
        )
        self._persist(
            direction="acs-to-client",
            flow=flow,
            http={"status": response.status,
                  "headers": redact_headers(dict(response.headers.items()))},
            body=response_body,
            envelope=response_env,
            notes=response_notes,
        )

        handler.send_response(response.status)
        for key, value in strip_hop_headers(response.headers).items():
            if key.lower() in ("content-length", "date", "server"):
                continue
            if key.lower() == "set-cookie":
                for line in value.split("\n"):
                    handler.send_header("Set-Cookie", line)
                continue
            handler.send_header(key, value)
        if response.status != 204:
            handler.send_header("Content-Length", str(len(relay_body)))
        handler.end_headers()
        if relay_body:
            handler.wfile.write(relay_body)


# ---------------------------------------------------------------------------
# Shipping records to a collector


class UploadSafetyError(RuntimeError):
    """An unredacted record was about to leave the sensor host."""


class BatchUploader:
    """Ships the record log to a collector, at-least-once.

    The high-water mark (count of records already acknowledged) lives in a
    sidecar file and advances only after the collector answered 2xx, so a
    crash between acknowledgement and mark write re-sends; the collector
    deduplicates on record id.  Records that are neither redacted nor
    anonymized are refused outright.
    """

    def __init__(
        self,
        store_path: str,
        collector_url: str,
        token: str,
        *,
        sensor_id: str = "sensor",
        batch_size: int = 100,
        tls_mode: str = "strict",
        trust_roots: str = "",
        transport=None,
    ) -> None:
        self.store_path = store_path
        self.collector_url = collector_url
        self.token = token
        self.sensor_id = sensor_id
        self.batch_size = batch_size
        self.mark_path = store_path + ".uploaded"
        self.transport = transport or RealTransport(
            TlsPolicy(mode=tls_mode, trust_roots=trust_roots or None), timeout=30.0
        )

    def _mark(self) -> int:
        try:
            with open(self.mark_path, "r", encoding="ascii") as fh:
                return int(fh.read().strip() or "0")
        except (FileNotFoundError, ValueError):
            return 0

    def _set_mark(self, count: int) -> None:
        tmp = self.mark_path + ".tmp"
        with open(tmp, "w", encoding="ascii") as fh:
            fh.write(str(count))
        os.replace(tmp, self.mark_path)

    def pending(self) -> list[TransactionRecord]:
        result = read_log(self.store_path)
        return result.records[self._mark():]

    def upload_once(self) -> int:
        """Send one batch; returns how many records were acknowledged."""
        mark = self._mark()
        result = read_log(self.store_path)
        batch = result.records[mark : mark + self.batch_size]
        if not batch:
            return 0
        for record in batch:
            if not (record.redacted or record.anonymized):
                raise UploadSafetyError(
                    f"record {record.record_id} is neither redacted nor anonymized; refusing to upload"
                )
        payload = b"".join(frame(r.to_json()) for r in batch)
        response = self.transport.request(
            HttpRequestData(
                "POST",
                self.collector_url.rstrip("/") + "/ingest",
                {
                    "Authorization": f"Bearer {self.token}",
                    "Content-Type": "application/octet-stream",
                    "X-Sensor-Id": self.sensor_id,
                },
                payload,
            )
        )
        if response.status // 100 != 2:
            raise TransportError(f"collector answered {response.status}")
        self._set_mark(mark + len(batch))
        return len(batch)

    def drain(self, *, max_batches: int = 1000) -> int:
        total = 0
        for _ in range(max_batches):
            sent = self.upload_once()
            if sent == 0:
                break
            total += sent
        return total
