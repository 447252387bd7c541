"""Reference auto-configuration server with switchable hardening.

The server speaks the client-initiated session protocol: Inform first, an
empty POST yields the turn, then the server issues one command per exchange
from the device's command plan and closes with an empty response.

Every historically observed server weakness is a policy switch, off in the
"secure" preset and turned on one at a time by the bench presets, so the
probe suite has a known-vulnerable and a known-clean target for each check:

* auth "none"                    - sessions accepted without credentials
* identify_by "serial"           - trusts the serial the client claims
* xxe_simulation                 - resolves DTD entities (sandboxed: external
                                   references substitute a marker string,
                                   never real file or network content)
* state_enforcement "lax-inform" - a second Inform in a session is accepted
* cr_answer_basic_challenge      - answers Basic challenges on connection
                                   requests, disclosing the CR credential
* nonce_replay_protection False  - replayed Authorization headers verify
* state_enforcement "lax-order"  - commands accepted without Inform

``state_enforcement`` keeps lax-inform and lax-order distinct ("lax" means
both at once) so each weakness can be staged in isolation.
"""

from __future__ import annotations

import os
import re
import secrets
import shlex
import ssl
import threading
import time
from dataclasses import dataclass, field, fields as dataclass_fields, replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any

from . import codec, digest, textconf
from .recordlog import FramedLogWriter, TransactionRecord
from .transport import RealTransport, TransportError
from .wire import HttpRequestData

AUTH_MODES = ("digest", "basic-tls-only", "none")
IDENTIFY_MODES = ("credentials", "serial", "source-ip")
STATE_MODES = ("strict", "lax-inform", "lax-order", "lax")


@dataclass
class AcsPolicy:
    name: str = "custom"
    auth: str = "digest"
    identify_by: str = "credentials"
    nonce_replay_protection: bool = True
    state_enforcement: str = "strict"
    xxe_simulation: bool = False
    cr_answer_basic_challenge: bool = False
    cr_after_session: bool = True
    realm: str = "cwmp"
    session_timeout: float = 30.0

    def __post_init__(self) -> None:
        if self.auth not in AUTH_MODES:
            raise ValueError(f"auth {self.auth!r} not one of {AUTH_MODES}")
        if self.identify_by not in IDENTIFY_MODES:
            raise ValueError(f"identify_by {self.identify_by!r} not one of {IDENTIFY_MODES}")
        if self.state_enforcement not in STATE_MODES:
            raise ValueError(f"state_enforcement {self.state_enforcement!r} not one of {STATE_MODES}")


ACS_PRESETS: dict[str, AcsPolicy] = {
    "secure": AcsPolicy(name="secure"),
    "appendixC-P1": AcsPolicy(name="appendixC-P1", auth="none", identify_by="source-ip"),
    "appendixC-P2": AcsPolicy(name="appendixC-P2", identify_by="serial"),
    "appendixC-P3": AcsPolicy(name="appendixC-P3", xxe_simulation=True),
    "appendixC-P4": AcsPolicy(name="appendixC-P4", state_enforcement="lax-inform"),
    "appendixC-P5": AcsPolicy(name="appendixC-P5", cr_answer_basic_challenge=True),
    "appendixC-P6": AcsPolicy(name="appendixC-P6", nonce_replay_protection=False),
    "appendixC-P7": AcsPolicy(name="appendixC-P7", state_enforcement="lax-order"),
}


def load_policy(name_or_path: str) -> AcsPolicy:
    """A preset name, or a config file that may start from one."""
    if name_or_path in ACS_PRESETS:
        return replace(ACS_PRESETS[name_or_path])
    sections = textconf.load_sections(name_or_path)
    sec = textconf.first_section(sections, "policy")
    if sec is None:
        raise textconf.ConfigError(f"{name_or_path}: no [policy] section")
    base = replace(ACS_PRESETS[sec.get("preset", "secure") or "secure"])
    base.name = sec.get("name", base.name) or base.name
    base.auth = sec.get("auth", base.auth) or base.auth
    base.identify_by = sec.get("identify_by", base.identify_by) or base.identify_by
    base.state_enforcement = sec.get("state_enforcement", base.state_enforcement) or base.state_enforcement
    base.realm = sec.get("realm", base.realm) or base.realm
    base.nonce_replay_protection = sec.get_bool("nonce_replay_protection", base.nonce_replay_protection)
    base.xxe_simulation = sec.get_bool("xxe_simulation", base.xxe_simulation)
    base.cr_answer_basic_challenge = sec.get_bool("cr_answer_basic_challenge", base.cr_answer_basic_challenge)
    base.cr_after_session = sec.get_bool("cr_after_session", base.cr_after_session)
    if sec.get("session_timeout"):
        base.session_timeout = float(sec.get("session_timeout"))
    base.__post_init__()
    return base


# ---------------------------------------------------------------------------
# Registry and command plans


@dataclass
class DeviceRecord:
    key: str
    serial_number: str = ""
    username: str = ""
    password: str = ""
    source_ip: str = ""
    cr_url: str = ""
    cr_username: str = ""
    cr_password: str = ""
    plan: str = "default"


class DeviceRegistry:
    def __init__(self, records: list[DeviceRecord] | None = None) -> None:
        self.records = list(records or [])

    def add(self, record: DeviceRecord) -> None:
        self.records.append(record)

    def by_username(self, username: str) -> DeviceRecord | None:
        for r in self.records:
            if r.username == username:
                return r
        return None

    def by_serial(self, serial: str) -> DeviceRecord | None:
        for r in self.records:
            if r.serial_number == serial:
                return r
        return None

    def by_source_ip(self, ip: str) -> DeviceRecord | None:
        for r in self.records:
            if r.source_ip == ip:
                return r
        return None

    def credentials(self) -> dict[str, str]:
        return {r.username: r.password for r in self.records if r.username}


def load_registry(path: str) -> DeviceRegistry:
    registry = DeviceRegistry()
    for sec in textconf.sections_named(textconf.load_sections(path), "device"):
        key = sec.name.partition(":")[2] or sec.get("serial_number", "") or "device"
        registry.add(
            DeviceRecord(
                key=key,
                serial_number=sec.get("serial_number", "") or "",
                username=sec.get("username", "") or "",
                password=sec.get("password", "") or "",
                source_ip=sec.get("source_ip", "") or "",
                cr_url=sec.get("cr_url", "") or "",
                cr_username=sec.get("cr_username", "") or "",
                cr_password=sec.get("cr_password", "") or "",
                plan=sec.get("plan", "default") or "default",
            )
        )
    return registry


@dataclass
class PlanStep:
    body: Any
    expect_kind: str = ""


@dataclass
class CommandPlan:
    name: str
    steps: list[PlanStep] = field(default_factory=list)


def _substitute(value: str, mapping: dict[str, str]) -> str:
    for key, repl in mapping.items():
        value = value.replace("{" + key + "}", repl)
    return value


def _substitute_body(body: Any, mapping: dict[str, str]) -> Any:
    """Fill {serial}-style placeholders in every string field of a payload."""
    updates = {}
    for f in dataclass_fields(body):
        value = getattr(body, f.name)
        if isinstance(value, str):
            updates[f.name] = _substitute(value, mapping)
        elif isinstance(value, tuple) and value and hasattr(value[0], "__dataclass_fields__"):
            updates[f.name] = tuple(_substitute_body(v, mapping) for v in value)
    return replace(body, **updates) if updates else body


def parse_plan_line(line: str) -> PlanStep:
    parts = shlex.split(line)
    if not parts:
        raise textconf.ConfigError("empty plan line")
    cmd = parts[0].lower()
    opts: dict[str, str] = {}
    assigns: list[tuple[str, str]] = []
    positional: list[str] = []
    for token in parts[1:]:
        if "=" in token:
            lhs, _, rhs = token.partition("=")
            if "." in lhs:
                assigns.append((lhs, rhs))
            else:
                opts[lhs.lower()] = rhs
        else:
            positional.append(token)
    if cmd == "gpv":
        return PlanStep(codec.GetParameterValues(names=tuple(positional)))
    if cmd == "gpn":
        next_level = len(positional) > 1 and positional[1] == "next"
        return PlanStep(codec.GetParameterNames(parameter_path=positional[0] if positional else "", next_level=next_level))
    if cmd == "spv":
        params = tuple(
            codec.ParameterValue(path, value, opts.get("type", "xsd:string")) for path, value in assigns
        )
        return PlanStep(codec.SetParameterValues(parameter_list=params, parameter_key=opts.get("key", "")))
    if cmd == "gpa":
        return PlanStep(codec.GetParameterAttributes(names=tuple(positional)))
    if cmd == "spa":
        changes = tuple(
            codec.AttributeChange(
                path=p,
                notification_change="notify" in opts,
                notification=int(opts.get("notify", "0")),
                access_list_change="access" in opts,
                access_list=tuple(a for a in opts.get("access", "").split(",") if a),
            )
            for p in positional
        )
        return PlanStep(codec.SetParameterAttributes(changes=changes))
    if cmd == "addobject":
        return PlanStep(codec.AddObject(object_path=positional[0], parameter_key=opts.get("key", "")))
    if cmd == "delobject":
        return PlanStep(codec.DeleteObject(object_path=positional[0], parameter_key=opts.get("key", "")))
    if cmd == "reboot":
        return PlanStep(codec.Reboot(command_key=opts.get("key", positional[0] if positional else "")))
    if cmd == "download":
        return PlanStep(
            codec.Download(
                command_key=opts.get("key", ""),
                file_type=opts.get("filetype", "1 Firmware Upgrade Image"),
                url=positional[0] if positional else opts.get("url", ""),
                username=opts.get("username", ""),
                password=opts.get("password", ""),
                file_size=int(opts.get("size", "0")),
                target_file_name=opts.get("target", ""),
                delay_seconds=int(opts.get("delay", "0")),
            )
        )
    if cmd == "upload":
        return PlanStep(
            codec.Upload(
                command_key=opts.get("key", ""),
                file_type=opts.get("filetype", "2 Vendor Log File"),
                url=positional[0] if positional else opts.get("url", ""),
                delay_seconds=int(opts.get("delay", "0")),
            )
        )
    if cmd == "getrpc":
        return PlanStep(codec.GetRPCMethods())
    raise textconf.ConfigError(f"unknown plan command {cmd!r}")


def parse_plans(sections: list[textconf.Section]) -> dict[str, CommandPlan]:
    plans: dict[str, CommandPlan] = {}
    for sec in textconf.sections_named(sections, "plan"):
        name = sec.name.partition(":")[2] or "default"
        plan = CommandPlan(name=name)
        for line in sec.lines:
            if line.strip().lower().startswith("expect "):
                if not plan.steps:
                    raise textconf.ConfigError(f"plan {name}: expect before any command")
                plan.steps[-1].expect_kind = line.split(None, 1)[1].strip()
                continue
            plan.steps.append(parse_plan_line(line))
        plans[name] = plan
    return plans


def load_plans(path: str) -> dict[str, CommandPlan]:
    return parse_plans(textconf.load_sections(path))


# ---------------------------------------------------------------------------
# Sandboxed entity substitution for the xxe_simulation policy switch.
# Behaves like a resolver from the outside; never touches files or sockets.

_ENTITY_DECL_RE = re.compile(
    r"<!ENTITY\s+([A-Za-z_][A-Za-z0-9._-]*)\s+(?:\"([^\"]*)\"|'([^']*)'|SYSTEM\s+(?:\"[^\"]*\"|'[^']*'))\s*>"
)
_DOCTYPE_RE = re.compile(r"<!DOCTYPE[^>\[]*(?:\[[^\]]*\])?[^>]*>", re.DOTALL)


def apply_entity_substitution(data: bytes, external_marker: str) -> tuple[bytes, bool]:
    try:
        text = data.decode("utf-8", errors="replace")
    except Exception:
        return data, False
    doctype_match = _DOCTYPE_RE.search(text)
    if not doctype_match:
        return data, False
    entities: dict[str, str] = {}
    for m in _ENTITY_DECL_RE.finditer(doctype_match.group(0)):
        name = m.group(1)
        if m.group(2) is not None:
            entities[name] = m.group(2)
        elif m.group(3) is not None:
            entities[name] = m.group(3)
        else:
            entities[name] = external_marker
    text = _DOCTYPE_RE.sub("", text)
    substituted = False
    for name, value in entities.items():
        ref = f"&{name};"
        if ref in text:
            text = text.replace(ref, value)
            substituted = True
    return text.encode("utf-8"), substituted


# ---------------------------------------------------------------------------
# Sessions


@dataclass
class AcsSession:
    sid: str
    device: DeviceRecord | None
    peer_ip: str
    state: str = "informed"  # informed | serving | done
    steps: list[PlanStep] = field(default_factory=list)
    step_index: int = 0
    pending: codec.RpcEnvelope | None = None
    informs: list[codec.Inform] = field(default_factory=list)
    served: list[tuple[codec.RpcEnvelope, codec.RpcEnvelope | None]] = field(default_factory=list)
    flags: set[str] = field(default_factory=set)
    cr_url: str = ""
    created: float = field(default_factory=time.monotonic)
    last_active: float = field(default_factory=time.monotonic)

    def touch(self) -> None:
        self.last_active = time.monotonic()


@dataclass
class CrOutcome:
    ok: bool = False
    http_status: int = 0
    challenge_scheme: str = ""
    answered_scheme: str = ""
    error: str = ""


def connection_request(
    url: str,
    username: str,
    password: str,
    *,
    mode: str = "digest",
    answer_basic_challenge: bool = False,
    timeout: float = 5.0,
) -> CrOutcome:
    """Fire one connection request at a client's CR endpoint.

    mode "digest" is the conforming flow: expect a Digest challenge, answer
    it.  mode "basic-incorrect" deliberately leads with a Basic header, for
    probing how clients react to a server that gets it wrong.  Connection
    requests ride plain HTTP by design, so an https URL is refused here.
    """
    outcome = CrOutcome()
    if url.lower().startswith("https:"):
        outcome.error = "connection requests use plain HTTP only"
        return outcome
    transport = RealTransport(timeout=timeout)
    try:
        headers = {"User-Agent": "cwmpkit-acs/0.1"}
        if mode == "basic-incorrect":
            headers["Authorization"] = digest.build_basic(username, password)
            outcome.answered_scheme = "basic"
        response = transport.request(HttpRequestData("GET", url, headers, b""))
        outcome.http_status = response.status
        if response.status == 200:
            outcome.ok = True
            return outcome
        if response.status != 401:
            outcome.error = f"unexpected status {response.status}"
            return outcome
        challenge_value = response.header("WWW-Authenticate")
        scheme = challenge_value.strip().split(" ", 1)[0].lower() if challenge_value else ""
        outcome.challenge_scheme = scheme
        if scheme == "digest":
            challenge = digest.parse_challenge(challenge_value)
            header = digest.build_authorization(username, password, "GET", _path_of(url), challenge)
            outcome.answered_scheme = "digest"
        elif scheme == "basic" and answer_basic_challenge:
            # Handing the credential to whoever challenged: the whole point
            # of modelling this is that it is observably wrong.
            header = digest.build_basic(username, password)
            outcome.answered_scheme = "basic"
        else:
            outcome.error = f"challenge scheme {scheme!r} not answered"
            return outcome
        second = transport.request(HttpRequestData("GET", url, {**headers, "Authorization": header}, b""))
        outcome.http_status = second.status
        outcome.ok = second.status == 200
        return outcome
    except TransportError as exc:
        outcome.error = str(exc)
        return outcome
    finally:
        transport.close()


def _path_of(url: str) -> str:
    from urllib.parse import urlsplit

    return urlsplit(url).path or "/"


# ---------------------------------------------------------------------------
# The server


class AcsServer:
    def __init__(
        self,
        policy: AcsPolicy,
        registry: DeviceRegistry,
        plans: dict[str, CommandPlan],
        *,
        host: str = "127.0.0.1",
        port: int = 0,
        tls: tuple[str, str] | None = None,
        transcript_path: str | None = None,
    ) -> None:
        if policy.auth == "basic-tls-only" and tls is None:
            raise ValueError("auth 'basic-tls-only' requires serving over TLS")
        if policy.auth == "none" and policy.identify_by == "credentials":
            raise ValueError("identify_by 'credentials' needs an auth mode that produces a username")
        self.policy = policy
        self.registry = registry
        self.plans = plans
        self.gate = digest.DigestGate(
            policy.realm,
            registry.credentials(),
            replay_protection=policy.nonce_replay_protection,
        )
        self.xxe_marker = f"RESOLVED-CONTENT-{os.urandom(4).hex()}"
        self.sessions: dict[str, AcsSession] = {}
        self.completed: list[AcsSession] = []
        self.cr_log: list[tuple[str, CrOutcome]] = []
        self.inform_log: list[tuple[float, str, tuple[str, ...]]] = []
        self._cond = threading.Condition()
        self._writer = FramedLogWriter(transcript_path) if transcript_path else None
        self._record_seq = 0
        self._thread: threading.Thread | None = None

        owner = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"
            disable_nagle_algorithm = True  # small bodies; Nagle+delayed-ACK stalls every turn
            server_version = "cwmpkit-acs/0.1"

            def log_message(self, fmt, *args):
                pass

            def do_GET(self):
                self.send_response(404)
                self.send_header("Content-Length", "0")
                self.end_headers()

            def do_POST(self):
                owner._handle_post(self)

        self.httpd = ThreadingHTTPServer((host, port), Handler)
        self.httpd.daemon_threads = True
        self.scheme = "http"
        if tls is not None:
            ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
            ctx.minimum_version = ssl.TLSVersion.TLSv1_2
            ctx.load_cert_chain(certfile=tls[0], keyfile=tls[1])
            self.httpd.socket = ctx.wrap_socket(self.httpd.socket, server_side=True)
            self.scheme = "https"
        self.host = host
        self.port = self.httpd.server_address[1]
        self.url = f"{self.scheme}://{host}:{self.port}/acs"

    # -- lifecycle ------------------------------------------------------

    def start(self) -> "AcsServer":
        self._thread = threading.Thread(target=self.httpd.serve_forever, name="acs", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._thread is not None:
            self.httpd.shutdown()
            self._thread.join(timeout=5)
            self._thread = None
        self.httpd.server_close()
        if self._writer:
            self._writer.close()

    def __enter__(self) -> "AcsServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    # -- observation hooks for tests and the probe bench ----------------

    def wait_for_inform(self, *, serial: str | None = None, event: str | None = None, since: float = 0.0, timeout: float = 5.0) -> bool:
        deadline = time.monotonic() + timeout
        with self._cond:
            while True:
                for ts, got_serial, events in self.inform_log:
                    if ts < since:
                        continue
                    if serial is not None and got_serial != serial:
                        continue
                    if event is not None and event not in events:
                        continue
                    return True
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return False
                self._cond.wait(remaining)

    def sessions_for(self, serial: str) -> list[AcsSession]:
        with self._cond:
            out = [s for s in self.completed if any(i.device_id.serial_number == serial for i in s.informs)]
            out.extend(
                s for s in self.sessions.values() if any(i.device_id.serial_number == serial for i in s.informs)
            )
        return out

    # -- request handling -------------------------------------------------

    def _record_exchange(self, handler, body: bytes, status: int, command: str, note: str = "") -> None:
        self._record_seq += 1
        record = TransactionRecord(
            record_id=f"acs-{self._record_seq:08d}",
            timestamp=time.time(),
            flow=f"{handler.client_address[0]}:{handler.client_address[1]}",
            direction="client-to-acs",
            command=command,
            http={"method": "POST", "path": handler.path, "status": status},
            body=body,
            notes=(note,) if note else (),
        )
        if self._writer:
            self._writer.append(record)

    def _send(self, handler, status: int, body: bytes = b"", content_type: str = codec.CONTENT_TYPE, extra: dict[str, str] | None = None) -> None:
        handler.send_response(status)
        if body:
            handler.send_header("Content-Type", content_type)
        if status != 204:
            handler.send_header("Content-Length", str(len(body)))
        for key, value in (extra or {}).items():
            handler.send_header(key, value)
        handler.end_headers()
        if body:
            handler.wfile.write(body)

    def _send_envelope(self, handler, envelope: codec.RpcEnvelope, *, set_cookie: str | None = None) -> None:
        extra = {}
        if set_cookie:
            extra["Set-Cookie"] = f"CWMPSESS={set_cookie}; Path=/"
        self._send(handler, 200, codec.encode(envelope), extra=extra)

    def _send_fault(self, handler, request_id: str, code: int, text: str) -> None:
        envelope = codec.RpcEnvelope(id=request_id, body=codec.Fault(code=code, string=text))
        self._send(handler, 400, codec.encode(envelope))

    def _cookie_sid(self, handler) -> str | None:
        raw = handler.headers.get("Cookie", "")
        for part in raw.split(";"):
            name, _, value = part.strip().partition("=")
            if name == "CWMPSESS":
                return value
        return None

    def _get_session(self, sid: str | None) -> AcsSession | None:
        if not sid:
            return None
        with self._cond:
            sess = self.sessions.get(sid)
            if sess is None:
                return None
            if time.monotonic() - sess.last_active > self.policy.session_timeout:
                sess.flags.add("timed-out")
                self._archive_locked(sess)
                return None
            return sess

    def _archive_locked(self, sess: AcsSession) -> None:
        self.sessions.pop(sess.sid, None)
        sess.state = "done"
        self.completed.append(sess)

    def _maybe_fire_cr(self, sess: AcsSession) -> None:
        if not self.policy.cr_after_session:
            return
        cr_url = sess.cr_url or (sess.device.cr_url if sess.device else "")
        if cr_url and sess.device is not None:
            threading.Thread(
                target=self._fire_cr, args=(sess.device, cr_url), name="acs-cr", daemon=True
            ).start()

    def _fire_cr(self, device: DeviceRecord, cr_url: str) -> None:
        outcome = connection_request(
            cr_url,
            device.cr_username,
            device.cr_password,
            answer_basic_challenge=self.policy.cr_answer_basic_challenge,
            timeout=3.0,
        )
        with self._cond:
            self.cr_log.append((device.key, outcome))
            self._cond.notify_all()

    def _identify(self, inform: codec.Inform, auth_user: str | None, peer_ip: str) -> DeviceRecord | None:
        if self.policy.identify_by == "credentials":
            return self.registry.by_username(auth_user or "")
        if self.policy.identify_by == "serial":
            return self.registry.by_serial(inform.device_id.serial_number)
        return self.registry.by_source_ip(peer_ip)

    def _render_steps(self, device: DeviceRecord | None) -> list[PlanStep]:
        if device is None:
            return []
        plan = self.plans.get(device.plan)
        if plan is None:
            return []
        mapping = {"serial": device.serial_number, "username": device.username, "key": device.key}
        return [PlanStep(_substitute_body(s.body, mapping), s.expect_kind) for s in plan.steps]

    def _handle_post(self, handler) -> None:
        policy = self.policy
        length = int(handler.headers.get("Content-Length", "0") or 0)
        body = handler.rfile.read(length) if length else b""
        peer_ip = handler.client_address[0]

        auth_user: str | None = None
        if policy.auth == "digest":
            header = handler.headers.get("Authorization", "")
            if not header.lower().startswith("digest"):
                self._send(handler, 401, extra={"WWW-Authenticate": self.gate.challenge()})
                self._record_exchange(handler, body, 401, "", "challenged")
                return
            result = self.gate.verify("POST", header)
            if not result.ok:
                self._send(handler, 401, extra={"WWW-Authenticate": self.gate.challenge(stale=result.stale)})
                self._record_exchange(handler, body, 401, "", f"auth-failed: {result.reason}")
                return
            auth_user = result.username
        elif policy.auth == "basic-tls-only":
            header = handler.headers.get("Authorization", "")
            creds = digest.parse_basic(header) if header else None
            expected = self.registry.credentials()
            if creds is None or expected.get(creds.username) != creds.password:
                self._send(handler, 401, extra={"WWW-Authenticate": f'Basic realm="{policy.realm}"'})
                self._record_exchange(handler, body, 401, "", "challenged-basic")
                return
            auth_user = creds.username

        sess = self._get_session(self._cookie_sid(handler))

        if not body:
            if sess is None or sess.state not in ("informed", "serving"):
                self._send(handler, 400, b"no session\n", content_type="text/plain")
                self._record_exchange(handler, body, 400, "", "empty post without session")
                return
            sess.touch()
            sess.state = "serving"
            self._serve_next(handler, sess)
            return

        decode_input = body
        xxe_note = ""
        if policy.xxe_simulation:
            decode_input, substituted = apply_entity_substitution(body, self.xxe_marker)
            if substituted:
                xxe_note = "entity references substituted"
        try:
            envelope = codec.decode(decode_input, mode="lenient")
        except codec.DecodeError as exc:
            self._send(handler, 400, f"malformed message: {exc}\n".encode(), content_type="text/plain")
            self._record_exchange(handler, body, 400, "", f"decode-error: {exc}")
            return

        kind = envelope.kind
        self._record_exchange(handler, body, 200, kind, xxe_note)

        if kind == "Inform":
            self._handle_inform(handler, envelope, sess, auth_user, peer_ip)
        elif kind in codec.RESPONSE_KINDS:
            self._handle_client_response(handler, envelope, sess)
        else:
            self._handle_client_request(handler, envelope, sess, auth_user, peer_ip)

    def _handle_inform(self, handler, envelope, sess, auth_user, peer_ip) -> None:
        policy = self.policy
        inform: codec.Inform = envelope.body
        if sess is not None and sess.informs:
            if policy.state_enforcement in ("lax-inform", "lax"):
                sess.flags.add("second-inform-accepted")
                sess.informs.append(inform)
                sess.touch()
                sess.state = "informed"
                self._note_inform(inform)
                self._send_envelope(handler, codec.RpcEnvelope(id=envelope.id, body=codec.InformResponse()))
            else:
                self._send_fault(handler, envelope.id, 9001, "session already initialized")
            return
        device = self._identify(inform, auth_user, peer_ip)
        sess = AcsSession(
            sid=secrets.token_hex(8),
            device=device,
            peer_ip=peer_ip,
            steps=self._render_steps(device),
        )
        sess.informs.append(inform)
        for p in inform.parameter_list:
            if p.path.endswith(".ManagementServer.ConnectionRequestURL"):
                sess.cr_url = p.value
        with self._cond:
            self.sessions[sess.sid] = sess
            self._note_inform_locked(inform)
        self._send_envelope(
            handler,
            codec.RpcEnvelope(id=envelope.id, body=codec.InformResponse()),
            set_cookie=sess.sid,
        )

    def _note_inform(self, inform: codec.Inform) -> None:
        with self._cond:
            self._note_inform_locked(inform)

    def _note_inform_locked(self, inform: codec.Inform) -> None:
        self.inform_log.append(
            (time.monotonic(), inform.device_id.serial_number, tuple(e.code for e in inform.events))
        )
        self._cond.notify_all()

    def _handle_client_response(self, handler, envelope, sess) -> None:
        if sess is not None and sess.state == "serving" and sess.pending is not None:
            sess.touch()
            expected = codec.response_kind_for(sess.pending.kind)
            if envelope.kind not in (expected, "Fault"):
                sess.flags.add(f"unexpected-response:{envelope.kind}")
            if sess.pending.id and envelope.id != sess.pending.id:
                sess.flags.add("response-id-mismatch")
            sess.served.append((sess.pending, envelope))
            sess.pending = None
            sess.step_index += 1
            self._serve_next(handler, sess)
            return
        if self.policy.state_enforcement in ("lax-order", "lax"):
            if sess is not None:
                sess.flags.add("out-of-order-accepted")
            self._send(handler, 204)
            return
        self._send_fault(handler, envelope.id, 9001, "no command is awaiting a response")

    def _handle_client_request(self, handler, envelope, sess, auth_user, peer_ip) -> None:
        policy = self.policy
        in_client_turn = sess is not None and sess.state == "informed"
        if not in_client_turn and policy.state_enforcement not in ("lax-order", "lax"):
            self._send_fault(handler, envelope.id, 9001, "Inform required before other commands")
            return
        if not in_client_turn and sess is not None:
            sess.flags.add("out-of-order-accepted")
        if sess is not None:
            sess.touch()
        kind = envelope.kind
        if kind == "GetRPCMethods":
            reply = codec.GetRPCMethodsResponse(methods=tuple(codec.ACS_IMPLEMENTED_RPCS))
        elif kind == "TransferComplete":
            reply = codec.TransferCompleteResponse()
        else:
            reply = codec.Fault(code=9000, string=f"method {kind} not supported")
        self._send_envelope(handler, codec.RpcEnvelope(id=envelope.id, body=reply))

    def _serve_next(self, handler, sess: AcsSession) -> None:
        if sess.step_index < len(sess.steps):
            step = sess.steps[sess.step_index]
            envelope = codec.RpcEnvelope(id=f"acs-{sess.sid[:6]}-{sess.step_index + 1}", body=step.body)
            sess.pending = envelope
            self._send_envelope(handler, envelope)
        else:
            # Archive before the empty response leaves, so a caller that saw
            # the session end also sees it archived.
            with self._cond:
                self._archive_locked(sess)
            self._send(handler, 204)
            self._maybe_fire_cr(sess)


# ---------------------------------------------------------------------------
# Bench fixtures shared by the probe matrix, tests and topology presets


def standard_bench(
    policy: AcsPolicy,
    *,
    probe_serial: str = "PRB0000001",
    victim_serial: str = "VIC0000001",
    probe_ip: str = "127.0.0.1",
) -> tuple[DeviceRegistry, dict[str, CommandPlan]]:
    """Registry and plans that give every probe check a deterministic stage.

    The probe's device and a victim device exist side by side.  Their plans
    differ in content ({serial} substitution makes even identical templates
    diverge), which is what lets an identity-confusion check compare what it
    was served against the baseline.  Under source-ip identification, the
    loopback address maps to the probe's own device and the victim sits on
    an address that cannot originate local traffic, so a spoofed serial
    cannot cross devices by accident.
    """
    shared = policy.identify_by == "serial"
    probe_user = "shared-user" if shared else f"user-{probe_serial}"
    victim_user = "shared-user" if shared else f"user-{victim_serial}"
    probe_pass = "shared-pass" if shared else f"pw-{probe_serial}"
    victim_pass = "shared-pass" if shared else f"pw-{victim_serial}"
    registry = DeviceRegistry(
        [
            DeviceRecord(
                key="probe",
                serial_number=probe_serial,
                username=probe_user,
                password=probe_pass,
                source_ip=probe_ip,
                cr_username="cr-user",
                cr_password="cr-pass",
                plan="own-config",
            ),
            DeviceRecord(
                key="victim",
                serial_number=victim_serial,
                username=victim_user,
                password=victim_pass,
                source_ip="203.0.113.9",
                cr_username="cr-user",
                cr_password="cr-pass",
                plan="victim-config",
            ),
        ]
    )
    plans = parse_plans(
        textconf.parse_sections(
            """
[plan:own-config]
gpv InternetGatewayDevice.DeviceInfo.SoftwareVersion
spv InternetGatewayDevice.DeviceInfo.ProvisioningCode=prov-{serial} key=cfg-{serial}

[plan:victim-config]
gpv InternetGatewayDevice.DeviceInfo.SoftwareVersion
spv InternetGatewayDevice.DeviceInfo.ProvisioningCode=prov-{serial} key=cfg-{serial}
spv InternetGatewayDevice.ManagementServer.Username=user-{serial} key=cfg-{serial}
"""
        )
    )
    return registry, plans
