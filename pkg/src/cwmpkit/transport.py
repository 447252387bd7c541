"""HTTP transport for CWMP sessions: persistent connections plus TLS policy.

Three verification postures cover what CPE field firmware actually does:

* ``strict``       - full chain validation and SAN hostname matching.
* ``cn-exact``     - the certificate subject CN must equal the configured
                     server name by literal string comparison.  Wildcards do
                     not match anything in this mode, and unless trust roots
                     are supplied the chain itself is not validated; a
                     posture note records that weakness.
* ``no-verify``    - accept anything, with a posture note.

TLS 1.2 is the floor in every mode.  Plain-HTTP use is allowed (the
protocol permits it) and flagged with a posture note so reports can call
it out.
"""

from __future__ import annotations

import http.client
import socket
import ssl
import time
from dataclasses import dataclass, field
from typing import Callable
from urllib.parse import urlsplit

from .certs import common_name_of
from .wire import HttpRequestData, HttpResponseData

TLS_MODES = ("strict", "cn-exact", "no-verify")


class TransportError(Exception):
    """Connection-level failure: refused, reset, timeout, TLS rejection."""


@dataclass
class TlsPolicy:
    mode: str = "strict"
    expected_cn: str = ""
    trust_roots: str | None = None

    def __post_init__(self) -> None:
        if self.mode not in TLS_MODES:
            raise ValueError(f"tls mode {self.mode!r} not one of {TLS_MODES}")

    def build_context(self) -> ssl.SSLContext:
        if self.mode == "strict":
            ctx = ssl.create_default_context(cafile=self.trust_roots)
        else:
            ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
            ctx.check_hostname = False
            if self.mode == "cn-exact" and self.trust_roots:
                ctx.verify_mode = ssl.CERT_REQUIRED
                ctx.load_verify_locations(cafile=self.trust_roots)
            else:
                ctx.verify_mode = ssl.CERT_NONE
        ctx.minimum_version = ssl.TLSVersion.TLSv1_2
        return ctx


@dataclass
class VerificationOutcome:
    ok: bool
    reason: str = ""
    notes: list[str] = field(default_factory=list)


def verify_server_certificate(
    leaf: bytes,
    expected_host: str,
    policy: TlsPolicy,
    *,
    intermediates: tuple[bytes, ...] = (),
) -> VerificationOutcome:
    """Apply a TLS policy to certificate material without a live socket.

    ``leaf`` and ``intermediates`` are DER or PEM.  Strict mode needs
    ``policy.trust_roots`` pointing at a PEM bundle.
    """
    if policy.mode == "no-verify":
        return VerificationOutcome(True, notes=["tls-posture: certificate accepted without verification"])
    if policy.mode == "cn-exact":
        expected = policy.expected_cn or expected_host
        cn = common_name_of(leaf)
        notes = []
        if not policy.trust_roots:
            notes.append("tls-posture: chain not validated; exact CN string match only")
        if cn != expected:
            return VerificationOutcome(False, reason=f"certificate CN {cn!r} != expected {expected!r}", notes=notes)
        return VerificationOutcome(True, notes=notes)
    # strict: chain plus SAN, done by the cryptography verifier.
    from cryptography import x509
    from cryptography.x509.verification import PolicyBuilder, Store

    def _load(data: bytes) -> x509.Certificate:
        if data.lstrip().startswith(b"-----BEGIN"):
            return x509.load_pem_x509_certificate(data)
        return x509.load_der_x509_certificate(data)

    if not policy.trust_roots:
        return VerificationOutcome(False, reason="strict mode requires trust roots")
    with open(policy.trust_roots, "rb") as fh:
        root_pem = fh.read()
    roots = x509.load_pem_x509_certificates(root_pem)
    try:
        verifier = PolicyBuilder().store(Store(roots)).build_server_verifier(x509.DNSName(expected_host))
        verifier.verify(_load(leaf), [_load(c) for c in intermediates])
    except Exception as exc:
        return VerificationOutcome(False, reason=f"chain verification failed: {exc}")
    return VerificationOutcome(True)


class _PlainHTTPConnection(http.client.HTTPConnection):
    """HTTPConnection that turns off Nagle coalescing.

    Sessions are chains of small request/response bodies on one persistent
    connection; leaving Nagle on stacks its delay onto the peer's delayed
    ACK and turns every exchange into a ~40ms round trip.
    """

    def connect(self) -> None:
        super().connect()
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)


class _CheckedHTTPSConnection(http.client.HTTPSConnection):
    """HTTPSConnection that applies post-handshake checks for cn-exact mode."""

    def __init__(self, host: str, port: int, policy: TlsPolicy, timeout: float, notes: Callable[[str], None]):
        super().__init__(host, port, timeout=timeout, context=policy.build_context())
        self._policy = policy
        self._notes = notes

    def connect(self) -> None:
        super().connect()
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        version = self.sock.version() or "TLS"
        self._notes(f"tls-posture: negotiated {version}")
        if self._policy.mode == "cn-exact":
            leaf = self.sock.getpeercert(binary_form=True)
            expected = self._policy.expected_cn or self.host
            cn = common_name_of(leaf) if leaf else ""
            if not self._policy.trust_roots:
                self._notes("tls-posture: chain not validated; exact CN string match only")
            if cn != expected:
                self.close()
                raise TransportError(f"certificate CN {cn!r} != expected {expected!r} (exact match required)")
        elif self._policy.mode == "no-verify":
            self._notes("tls-posture: certificate accepted without verification")


class HttpTransport:
    """Interface: request(HttpRequestData) -> HttpResponseData, close()."""

    def request(self, req: HttpRequestData) -> HttpResponseData:  # pragma: no cover - interface
        raise NotImplementedError

    def close(self) -> None:  # pragma: no cover - interface
        pass


class RealTransport(HttpTransport):
    """Blocking HTTP/1.1 over a persistent connection per origin."""

    def __init__(self, tls_policy: TlsPolicy | None = None, timeout: float = 30.0) -> None:
        self.tls_policy = tls_policy or TlsPolicy()
        self.timeout = timeout
        self.posture_notes: list[str] = []
        self._conns: dict[tuple[str, str, int], http.client.HTTPConnection] = {}

    def _note(self, text: str) -> None:
        if text not in self.posture_notes:
            self.posture_notes.append(text)

    def _conn_for(self, scheme: str, host: str, port: int) -> http.client.HTTPConnection:
        key = (scheme, host, port)
        conn = self._conns.get(key)
        if conn is None:
            if scheme == "https":
                conn = _CheckedHTTPSConnection(host, port, self.tls_policy, self.timeout, self._note)
            else:
                conn = _PlainHTTPConnection(host, port, timeout=self.timeout)
                self._note("http-posture: plain HTTP, no transport encryption")
            self._conns[key] = conn
        return conn

    def request(self, req: HttpRequestData) -> HttpResponseData:
        parts = urlsplit(req.url)
        scheme = parts.scheme or "http"
        host = parts.hostname or ""
        port = parts.port or (443 if scheme == "https" else 80)
        path = parts.path or "/"
        if parts.query:
            path += "?" + parts.query
        key = (scheme, host, port)
        attempts = 0
        while True:
            attempts += 1
            conn = self._conn_for(scheme, host, port)
            try:
                conn.request(req.method, path, body=req.body or None, headers=req.headers)
                raw = conn.getresponse()
                body = raw.read()
                headers: dict[str, str] = {}
                for k, v in raw.getheaders():
                    if k in headers:
                        # Repeated headers fold with a comma, except cookies,
                        # which keep a newline separator so each survives.
                        sep = "\n" if k.lower() == "set-cookie" else ", "
                        headers[k] = headers[k] + sep + v
                    else:
                        headers[k] = v
                return HttpResponseData(status=raw.status, reason=raw.reason or "", headers=headers, body=body)
            except TransportError:
                self._drop(key)
                raise
            except (http.client.RemoteDisconnected, BrokenPipeError, ConnectionResetError) as exc:
                self._drop(key)
                if attempts >= 2:
                    raise TransportError(f"connection lost: {exc}") from exc
            except (ConnectionRefusedError, TimeoutError, OSError, http.client.HTTPException) as exc:
                self._drop(key)
                raise TransportError(f"{type(exc).__name__}: {exc}") from exc

    def _drop(self, key: tuple[str, str, int]) -> None:
        conn = self._conns.pop(key, None)
        if conn is not None:
            try:
                conn.close()
            except Exception:
                pass

    def close(self) -> None:
        for key in list(self._conns):
            self._drop(key)


class ScriptedTransport(HttpTransport):
    """Canned responses for unit tests; records every request it sees."""

    def __init__(self, script: list[HttpResponseData | Exception]) -> None:
        self.script = list(script)
        self.requests: list[HttpRequestData] = []
        self.posture_notes: list[str] = []

    def request(self, req: HttpRequestData) -> HttpResponseData:
        self.requests.append(req)
        if not self.script:
            raise TransportError("scripted transport exhausted")
        item = self.script.pop(0)
        if isinstance(item, Exception):
            raise item
        return item

    def close(self) -> None:
        pass


class FaultInjectingTransport(HttpTransport):
    """Wraps a transport, failing requests chosen by a predicate.

    The predicate sees the zero-based request index and the request and
    decides whether that send is lost.  Used to model flaky upstream links.
    """

    def __init__(self, inner: HttpTransport, should_fail: Callable[[int, HttpRequestData], bool]) -> None:
        self.inner = inner
        self.should_fail = should_fail
        self.count = 0

    @property
    def posture_notes(self) -> list[str]:
        return getattr(self.inner, "posture_notes", [])

    def request(self, req: HttpRequestData) -> HttpResponseData:
        idx = self.count
        self.count += 1
        if self.should_fail(idx, req):
            raise TransportError(f"injected fault at request {idx}")
        return self.inner.request(req)

    def close(self) -> None:
        self.inner.close()


def wait_for_port(host: str, port: int, timeout: float = 5.0) -> None:
    """Block until a TCP listener answers, for test and topology startup."""
    import socket

    deadline = time.monotonic() + timeout
    last: Exception | None = None
    while time.monotonic() < deadline:
        try:
            with socket.create_connection((host, port), timeout=0.5):
                return
        except OSError as exc:
            last = exc
            time.sleep(0.02)
    raise TransportError(f"nothing listening on {host}:{port} after {timeout}s: {last}")
