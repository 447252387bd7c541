"""Black-box checks for server-side weaknesses, driven purely over the wire.

Seven checks, one per historically observed server flaw.  Each is built to
be self-contained: it stages its own sessions, reads nothing but what the
server puts on the wire, and lands on "positive" (flaw demonstrated),
"negative" (behaved correctly), or "error" (could not be determined).
Posture observations that are not pass/fail (plain HTTP, Basic handshakes)
come back as separate "info" findings.

Probing a server is active testing of somebody's infrastructure.  The suite
refuses to run unless the caller states authorization explicitly, both here
(``authorized=True``) and on the command line (``--i-am-authorized``).
"""

from __future__ import annotations

import base64
import http.client
import json
import ssl
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import urlsplit

from . import codec, digest
from .session import AuthConfig, AuthFailed, AuthRefused, CwmpSession, ProtocolError
from .transport import TlsPolicy, TransportError

PROBE_SERIAL = "PRB0000001"


class ProbeAuthorizationError(RuntimeError):
    """Raised when the suite is asked to run without an authorization claim."""


@dataclass
class ProbeTarget:
    acs_url: str
    username: str = ""
    password: str = ""
    serial: str = PROBE_SERIAL
    oui: str = "00040E"
    manufacturer: str = "cwmpkit-probe"
    product_class: str = "Probe"
    victim_serial: str = ""  # some other device's serial, for the identity check
    cr_listen_host: str = "127.0.0.1"
    timeout: float = 10.0


@dataclass
class Finding:
    check: str
    title: str
    verdict: str  # positive | negative | error | info
    detail: str
    evidence: tuple[str, ...] = ()


CHECK_TITLES = {
    "P1": "session accepted without credentials",
    "P2": "device identity trusted from the claimed serial",
    "P3": "XML entity references resolved by the parser",
    "P4": "second Inform accepted inside a session",
    "P5": "connection-request credential disclosed to a Basic challenge",
    "P6": "replayed Authorization header accepted",
    "P7": "commands answered without a prior Inform",
}
ALL_CHECKS = tuple(CHECK_TITLES)


def render_text(findings: list[Finding]) -> str:
    lines = []
    for f in findings:
        lines.append(f"{f.check:<14} {f.verdict.upper():<9} {f.title}")
        if f.detail:
            lines.append(f"    {f.detail}")
        for item in f.evidence:
            lines.append(f"      - {item}")
    counts = {}
    for f in findings:
        counts[f.verdict] = counts.get(f.verdict, 0) + 1
    summary = ", ".join(f"{v} {k}" for k, v in sorted(counts.items()))
    lines.append(summary)
    return "\n".join(lines) + "\n"


def render_jsonl(findings: list[Finding]) -> str:
    out = []
    for f in findings:
        out.append(
            json.dumps(
                {
                    "check": f.check,
                    "title": f.title,
                    "verdict": f.verdict,
                    "detail": f.detail,
                    "evidence": list(f.evidence),
                },
                sort_keys=True,
            )
        )
    return "\n".join(out) + "\n"


def verdict_matrix(findings: list[Finding]) -> dict[str, str]:
    """check -> verdict, informational findings excluded."""
    return {f.check: f.verdict for f in findings if f.verdict != "info"}


class AcsProbe:
    def __init__(self, target: ProbeTarget, *, authorized: bool = False) -> None:
        self.target = target
        self.authorized = authorized

    def _require_authorization(self) -> None:
        if not self.authorized:
            raise ProbeAuthorizationError(
                "active probing needs an explicit authorization claim; "
                "construct with authorized=True (CLI: --i-am-authorized)"
            )

    # -- plumbing -----------------------------------------------------------

    def _session(self, *, username: str | None = None, password: str | None = None) -> CwmpSession:
        t = self.target
        auth = AuthConfig(
            username=t.username if username is None else username,
            password=t.password if password is None else password,
            allow_basic_over_plain_http=True,  # the probe answers anything; posture is reported separately
        )
        return CwmpSession(
            t.acs_url, auth, tls_policy=TlsPolicy(mode="no-verify"), timeout=t.timeout
        )

    def _inform(self, serial: str | None = None, params: tuple = ()) -> codec.Inform:
        t = self.target
        return codec.Inform(
            device_id=codec.DeviceId(t.manufacturer, t.oui, t.product_class, serial or t.serial),
            events=(codec.EventEntry("2 PERIODIC"),),
            parameter_list=tuple(codec.ParameterValue(p, v) for p, v in params),
            current_time="2026-01-01T00:00:00Z",
        )

    @staticmethod
    def _bland_answer(command: codec.RpcEnvelope):
        kind = command.kind
        if kind == "GetParameterValues":
            return codec.GetParameterValuesResponse(
                parameter_list=tuple(
                    codec.ParameterValue(n, "probe-stub") for n in command.body.names
                )
            )
        if kind == "SetParameterValues":
            return codec.SetParameterValuesResponse(status=0)
        if kind == "GetParameterNames":
            return codec.GetParameterNamesResponse()
        if kind == "AddObject":
            return codec.AddObjectResponse(instance_number=1, status=0)
        if kind == "Reboot":
            return codec.RebootResponse()
        if kind == "Download":
            return codec.DownloadResponse(status=1)
        return codec.Fault(code=9000, string="method not supported")

    def _run_full_session(
        self, serial: str | None = None, params: tuple = ()
    ) -> tuple[list[codec.RpcEnvelope], str]:
        """Complete one conforming session; returns (served commands, error)."""
        session = self._session()
        served: list[codec.RpcEnvelope] = []
        try:
            reply = session.send_envelope(
                codec.RpcEnvelope(id=session.next_id(), body=self._inform(serial, params))
            )
            if reply is None or reply.kind != "InformResponse":
                return served, f"expected InformResponse, got {reply.kind if reply else 'nothing'}"
            command = session.yield_turn()
            while command is not None:
                served.append(command)
                command = session.respond(
                    codec.RpcEnvelope(id=command.id, body=self._bland_answer(command))
                )
            return served, ""
        except (TransportError, AuthFailed, AuthRefused, ProtocolError) as exc:
            return served, str(exc)
        finally:
            session.close()

    @staticmethod
    def _signature(served: list[codec.RpcEnvelope]) -> tuple[bytes, ...]:
        # id normalized away: only what was commanded matters
        return tuple(codec.encode(codec.RpcEnvelope(id="x", body=c.body)) for c in served)

    def _raw_connection(self):
        parts = urlsplit(self.target.acs_url)
        host = parts.hostname or ""
        if parts.scheme == "https":
            ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
            ctx.check_hostname = False
            ctx.verify_mode = ssl.CERT_NONE
            return http.client.HTTPSConnection(
                host, parts.port or 443, timeout=self.target.timeout, context=ctx
            ), parts.path or "/"
        return http.client.HTTPConnection(
            host, parts.port or 80, timeout=self.target.timeout
        ), parts.path or "/"

    # -- the checks -----------------------------------------------------------

    def check_unauthenticated_session(self) -> Finding:
        self._require_authorization()
        session = self._session(username="", password="")
        try:
            body = codec.encode(codec.RpcEnvelope(id="p1-1", body=self._inform()))
            response = session.post(body, suppress_auth=True)
            if response.status == 200 and response.body:
                reply = codec.decode(response.body, mode="lenient")
                if reply.kind == "InformResponse":
                    return Finding(
                        "P1", CHECK_TITLES["P1"], "positive",
                        "an Inform carrying no credentials was answered with InformResponse",
                        (f"status {response.status}",),
                    )
            detail = f"anonymous Inform got status {response.status}"
            challenge = response.header("WWW-Authenticate")
            evidence = (f"challenge: {challenge}",) if challenge else ()
            return Finding("P1", CHECK_TITLES["P1"], "negative", detail, evidence)
        except TransportError as exc:
            return Finding("P1", CHECK_TITLES["P1"], "error", str(exc))
        finally:
            session.close()

    def check_serial_identity_confusion(self) -> Finding:
        self._require_authorization()
        if not self.target.victim_serial:
            return Finding(
                "P2", CHECK_TITLES["P2"], "error",
                "needs victim_serial: a second device's serial to claim",
            )
        own, err_own = self._run_full_session(self.target.serial)
        if err_own:
            return Finding("P2", CHECK_TITLES["P2"], "error", f"baseline session failed: {err_own}")
        spoofed, err_spoof = self._run_full_session(self.target.victim_serial)
        if err_spoof:
            return Finding(
                "P2", CHECK_TITLES["P2"], "negative",
                f"claiming the other serial broke the session: {err_spoof}",
            )
        if self._signature(spoofed) != self._signature(own) and spoofed:
            return Finding(
                "P2", CHECK_TITLES["P2"], "positive",
                "same credentials, different claimed serial: the served configuration changed, "
                "so identity is keyed to the serial the client claims",
                (
                    f"baseline commands: {[c.kind for c in own]}",
                    f"spoofed commands: {[c.kind for c in spoofed]}",
                ),
            )
        return Finding(
            "P2", CHECK_TITLES["P2"], "negative",
            "served configuration did not follow the claimed serial",
        )

    def check_entity_resolution(self) -> Finding:
        self._require_authorization()
        session = self._session()
        marker = "entity-resolved-by-server"
        try:
            raw = codec.encode(codec.RpcEnvelope(id="&probe;", body=self._inform()))
            raw = raw.replace(
                b"<soap-env:Envelope",
                b'<!DOCTYPE soap-env:Envelope [<!ENTITY probe "%s">]><soap-env:Envelope'
                % marker.encode(),
                1,
            )
            raw = raw.replace(b"&amp;probe;", b"&probe;")
            response = session.post(raw)
            if response.status != 200 or not response.body:
                return Finding(
                    "P3", CHECK_TITLES["P3"], "negative",
                    f"document with a DTD was not answered (status {response.status})",
                )
            reply = codec.decode(response.body, mode="lenient")
            if reply.id == marker:
                return Finding(
                    "P3", CHECK_TITLES["P3"], "positive",
                    "the message id came back with the entity expanded, so the server's "
                    "parser resolves DTD entities from request bodies",
                    (f"echoed id: {reply.id!r}",),
                )
            return Finding(
                "P3", CHECK_TITLES["P3"], "negative",
                "entity reference survived unresolved",
                (f"echoed id: {reply.id!r}",),
            )
        except (TransportError, AuthFailed, AuthRefused) as exc:
            return Finding("P3", CHECK_TITLES["P3"], "error", str(exc))
        except codec.DecodeError as exc:
            return Finding("P3", CHECK_TITLES["P3"], "negative", f"reply undecodable: {exc}")
        finally:
            session.close()

    def check_second_inform(self) -> Finding:
        self._require_authorization()
        session = self._session()
        try:
            first = session.send_envelope(
                codec.RpcEnvelope(id=session.next_id(), body=self._inform())
            )
            if first is None or first.kind != "InformResponse":
                return Finding("P4", CHECK_TITLES["P4"], "error", "could not open a session")
            second = session.send_envelope(
                codec.RpcEnvelope(id=session.next_id(), body=self._inform()), force=True
            )
            if second is not None and second.kind == "InformResponse":
                return Finding(
                    "P4", CHECK_TITLES["P4"], "positive",
                    "a second Inform inside the same session was acknowledged, so a session "
                    "can switch identity after authentication",
                )
            got = second.kind if second is not None else "empty reply"
            return Finding(
                "P4", CHECK_TITLES["P4"], "negative", f"second Inform was refused ({got})"
            )
        except (TransportError, AuthFailed, AuthRefused, ProtocolError) as exc:
            return Finding("P4", CHECK_TITLES["P4"], "error", str(exc))
        finally:
            session.close()

    def check_cr_basic_disclosure(self) -> Finding:
        self._require_authorization()
        listener = _BasicChallengeListener(self.target.cr_listen_host)
        listener.start()
        try:
            params = (
                (
                    "InternetGatewayDevice.ManagementServer.ConnectionRequestURL",
                    listener.url,
                ),
            )
            served, err = self._run_full_session(params=params)
            if err:
                return Finding("P5", CHECK_TITLES["P5"], "error", f"staging session failed: {err}")
            if not listener.wait_contact(self.target.timeout):
                return Finding(
                    "P5", CHECK_TITLES["P5"], "negative",
                    "no connection request reached the advertised URL within the window",
                )
            if listener.wait_basic(self.target.timeout):
                username = listener.disclosed_username()
                return Finding(
                    "P5", CHECK_TITLES["P5"], "positive",
                    "the server answered a Basic challenge on the connection-request port, "
                    "handing its credential to the challenger",
                    (f"disclosed username: {username!r}",),
                )
            return Finding(
                "P5", CHECK_TITLES["P5"], "negative",
                "connection request arrived but the Basic challenge went unanswered",
                (f"requests seen: {len(listener.requests)}",),
            )
        finally:
            listener.stop()

    def check_nonce_replay(self) -> Finding:
        self._require_authorization()
        conn, path = self._raw_connection()
        body = codec.encode(codec.RpcEnvelope(id="p6-1", body=self._inform()))
        headers = {"Content-Type": codec.CONTENT_TYPE, "SOAPAction": '""'}
        try:
            conn.request("POST", path, body=body, headers=headers)
            first = conn.getresponse()
            first.read()
            if first.status != 401:
                return Finding(
                    "P6", CHECK_TITLES["P6"], "negative",
                    f"no challenge observed (status {first.status}); replay protection is "
                    "not applicable without a challenge-response handshake",
                )
            challenge_value = first.getheader("WWW-Authenticate", "")
            if not challenge_value.lower().startswith("digest"):
                return Finding(
                    "P6", CHECK_TITLES["P6"], "negative",
                    f"challenge scheme is {challenge_value.split(' ', 1)[0]!r}, not digest; "
                    "nonce replay does not apply",
                )
            challenge = digest.parse_challenge(challenge_value)
            auth = digest.build_authorization(
                self.target.username, self.target.password, "POST", path, challenge
            )
            conn.request("POST", path, body=body, headers={**headers, "Authorization": auth})
            second = conn.getresponse()
            second.read()
            if second.status != 200:
                return Finding(
                    "P6", CHECK_TITLES["P6"], "error",
                    f"credentials were not accepted (status {second.status})",
                )
            conn.request("POST", path, body=body, headers={**headers, "Authorization": auth})
            third = conn.getresponse()
            third.read()
            if third.status == 200:
                return Finding(
                    "P6", CHECK_TITLES["P6"], "positive",
                    "a byte-identical Authorization header was accepted twice, so captured "
                    "headers can be replayed",
                    ("same nonce and nonce-count accepted again",),
                )
            stale = "stale=true" in third.getheader("WWW-Authenticate", "").lower()
            return Finding(
                "P6", CHECK_TITLES["P6"], "negative",
                f"replay was rejected (status {third.status}{', stale challenge' if stale else ''})",
            )
        except (OSError, http.client.HTTPException) as exc:
            return Finding("P6", CHECK_TITLES["P6"], "error", f"{type(exc).__name__}: {exc}")
        finally:
            conn.close()

    def check_order_enforcement(self) -> Finding:
        self._require_authorization()
        session = self._session()
        try:
            reply = session.send_envelope(
                codec.RpcEnvelope(id="p7-1", body=codec.GetRPCMethods()), force=True
            )
            if reply is not None and reply.kind == "GetRPCMethodsResponse":
                return Finding(
                    "P7", CHECK_TITLES["P7"], "positive",
                    "a command before any Inform was answered in substance",
                    (f"methods: {list(reply.body.methods)}",),
                )
            got = reply.kind if reply is not None else "empty reply"
            return Finding(
                "P7", CHECK_TITLES["P7"], "negative",
                f"command before Inform was refused ({got})",
            )
        except (TransportError, AuthFailed, AuthRefused) as exc:
            return Finding("P7", CHECK_TITLES["P7"], "error", str(exc))
        finally:
            session.close()

    # -- posture (informational, not part of the pass/fail matrix) -----------

    def posture_findings(self) -> list[Finding]:
        self._require_authorization()
        findings: list[Finding] = []
        if self.target.acs_url.lower().startswith("http:"):
            findings.append(
                Finding(
                    "POSTURE-TLS", "management traffic rides plain HTTP", "info",
                    "sessions are readable and rewritable by anything on the path",
                )
            )
        try:
            conn, path = self._raw_connection()
            try:
                conn.request("POST", path, body=b"", headers={"Content-Type": codec.CONTENT_TYPE})
                response = conn.getresponse()
                response.read()
                challenge = response.getheader("WWW-Authenticate", "")
            finally:
                conn.close()
            if challenge.lower().startswith("basic") and self.target.acs_url.lower().startswith("http:"):
                findings.append(
                    Finding(
                        "POSTURE-BASIC", "Basic credentials solicited over plain HTTP", "info",
                        "a passive observer recovers the account password from one request",
                        (f"challenge: {challenge}",),
                    )
                )
        except (OSError, http.client.HTTPException):
            pass
        return findings

    # -- entry point ----------------------------------------------------------

    def run(self, checks: tuple[str, ...] | None = None, *, include_posture: bool = True) -> list[Finding]:
        self._require_authorization()
        funcs = {
            "P1": self.check_unauthenticated_session,
            "P2": self.check_serial_identity_confusion,
            "P3": self.check_entity_resolution,
            "P4": self.check_second_inform,
            "P5": self.check_cr_basic_disclosure,
            "P6": self.check_nonce_replay,
            "P7": self.check_order_enforcement,
        }
        selected = checks or ALL_CHECKS
        findings = []
        for name in selected:
            if name not in funcs:
                raise ValueError(f"unknown check {name!r}; choose from {ALL_CHECKS}")
            findings.append(funcs[name]())
        if include_posture:
            findings.extend(self.posture_findings())
        return findings


class _BasicChallengeListener:
    """Pretends to be a device's connection-request port, but challenges with
    Basic.  A conforming server walks away; a flawed one answers with its
    credential in the clear."""

    def __init__(self, host: str = "127.0.0.1") -> None:
        self.requests: list[tuple[str, str]] = []  # (path, authorization header)
        self._contact = threading.Event()
        self._basic = threading.Event()
        self._lock = threading.Lock()
        owner = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"
            timeout = 10

            def log_message(self, fmt, *args):
                pass

            def do_GET(self):
                header = self.headers.get("Authorization", "")
                with owner._lock:
                    owner.requests.append((self.path, header))
                owner._contact.set()
                if header.lower().startswith("basic "):
                    owner._basic.set()
                    self.send_response(200)
                    self.send_header("Content-Length", "0")
                    self.end_headers()
                    return
                self.send_response(401)
                self.send_header("WWW-Authenticate", 'Basic realm="cr"')
                self.send_header("Content-Length", "0")
                self.end_headers()

        self.httpd = ThreadingHTTPServer((host, 0), Handler)
        self.httpd.daemon_threads = True
        self.host = host
        self.port = self.httpd.server_address[1]
        self.url = f"http://{host}:{self.port}/cr"
        self._thread: threading.Thread | None = None

    def start(self) -> None:
        self._thread = threading.Thread(target=self.httpd.serve_forever, name="p5-listener", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread:
            self._thread.join(timeout=5)

    def wait_contact(self, timeout: float) -> bool:
        return self._contact.wait(timeout)

    def wait_basic(self, timeout: float) -> bool:
        return self._basic.wait(timeout)

    def disclosed_username(self) -> str:
        with self._lock:
            for _, header in self.requests:
                if header.lower().startswith("basic "):
                    try:
                        decoded = base64.b64decode(header.split(" ", 1)[1]).decode()
                        return decoded.partition(":")[0]
                    except Exception:
                        return "<undecodable>"
        return ""
