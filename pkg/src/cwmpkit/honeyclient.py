"""An emulating CWMP client that looks like a real gateway from the wire.

The client owns a device profile (identity, parameter tree, server account)
and plays full sessions against whatever server the profile points at:
Inform first, own requests, then one answer per server command until the
server sends the empty response.  Commands mutate the tree exactly as a
device would, including the bookkeeping a device carries across sessions:
value-change events, transfer completions, reboot causes, and a server URL
change taking effect only at the next session.

A Misbehavior bundle makes the client deliberately nonconforming in chosen
ways, which is how sensor detection paths get exercised end to end.
"""

from __future__ import annotations

import cmd
import socket
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from random import Random

from . import codec
from .device import GUARD_URL_PARAMS, ConnectionRequestConfig, DeviceProfile, ParamError
from .digest import DigestGate
from .session import (
    AuthConfig,
    AuthFailed,
    AuthRefused,
    CwmpSession,
    ProtocolError,
    retry_wait_seconds,
)
from .transport import HttpTransport, TlsPolicy, TransportError
from .wire import SessionTranscript

REASON_EVENTS = {
    "boot": "1 BOOT",
    "periodic": "2 PERIODIC",
    "scheduled": "3 SCHEDULED",
    "value-change": "4 VALUE CHANGE",
    "connection-request": "6 CONNECTION REQUEST",
}


@dataclass
class Misbehavior:
    """Deliberate protocol violations, each individually switchable."""

    skip_inform: bool = False
    second_inform: bool = False
    wrong_id_echo: bool = False
    malformed: str = ""  # a codec.MALFORMATIONS kind, sent as an extra POST
    bogus_event: bool = False
    max_envelopes: int = 1

    def any(self) -> bool:
        return bool(
            self.skip_inform
            or self.second_inform
            or self.wrong_id_echo
            or self.malformed
            or self.bogus_event
            or self.max_envelopes != 1
        )


@dataclass
class PendingTransfer:
    command_key: str
    url: str
    direction: str = "download"  # or "upload"


@dataclass
class SessionOutcome:
    reason: str
    transcript: SessionTranscript
    informed: bool = False
    commands: list[codec.RpcEnvelope] = field(default_factory=list)
    error: str = ""
    retry_wait: float = 0.0


class Honeyclient:
    def __init__(
        self,
        profile: DeviceProfile,
        *,
        transport_factory=None,
        rng: Random | None = None,
        decode_mode: str = "lenient",
    ) -> None:
        self.profile = profile
        self.transport_factory = transport_factory
        self.rng = rng or Random()
        self.decode_mode = decode_mode
        self.retry_count = 0
        self.bootstrapped = False
        self.queued_events: list[codec.EventEntry] = []
        self.pending_transfers: list[PendingTransfer] = []
        self.reboot_key: str | None = None
        self.next_acs_url: str = ""
        self.outcomes: list[SessionOutcome] = []
        self._lock = threading.Lock()
        # The tree must report the URL the device actually dials, not a
        # stock value left over from the profile file.
        for path in GUARD_URL_PARAMS:
            node = profile.tree.leaves.get(path)
            if node is not None and profile.acs_url:
                node.value = profile.acs_url

    # -- event bookkeeping ----------------------------------------------

    def _queue_event(self, code: str, command_key: str = "") -> None:
        entry = codec.EventEntry(code, command_key)
        if entry not in self.queued_events:
            self.queued_events.append(entry)

    def has_pending_work(self) -> bool:
        return bool(self.queued_events or self.pending_transfers or self.reboot_key is not None)

    def _events_for(self, reason: str, misbehave: Misbehavior) -> tuple[codec.EventEntry, ...]:
        events: list[codec.EventEntry] = []

        def add(entry: codec.EventEntry) -> None:
            if entry not in events:
                events.append(entry)

        if not self.bootstrapped:
            add(codec.EventEntry("0 BOOTSTRAP"))
        code = REASON_EVENTS.get(reason)
        if code:
            add(codec.EventEntry(code))
        for queued in self.queued_events:
            add(queued)
        if misbehave.bogus_event:
            add(codec.EventEntry("9 BOGUS"))
        return tuple(events)

    # -- session choreography ---------------------------------------------

    def _open_session(self) -> CwmpSession:
        profile = self.profile
        if self.next_acs_url:
            profile.acs_url = self.next_acs_url
            self.next_acs_url = ""
            self.bootstrapped = False  # a new server gets a full bootstrap
        policy = TlsPolicy(
            mode=profile.tls_mode,
            expected_cn=profile.tls_expected_cn,
            trust_roots=profile.tls_trust_roots,
        )
        transport: HttpTransport | None = None
        if self.transport_factory is not None:
            transport = self.transport_factory()
        auth = AuthConfig(
            username=profile.acs_username,
            password=profile.acs_password,
            allow_basic_over_plain_http=profile.allow_basic_over_plain_http,
        )
        return CwmpSession(
            profile.acs_url,
            auth,
            transport=transport,
            tls_policy=policy,
            decode_mode=self.decode_mode,
            rng=self.rng,
        )

    def build_inform(self, reason: str, misbehave: Misbehavior | None = None) -> codec.Inform:
        mis = misbehave or Misbehavior()
        return codec.Inform(
            device_id=self.profile.device_id,
            events=self._events_for(reason, mis),
            parameter_list=self.profile.inform_parameter_list(),
            current_time=datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"),
            max_envelopes=mis.max_envelopes,
            retry_count=self.retry_count,
        )

    def run_session(self, reason: str = "periodic", misbehave: Misbehavior | None = None) -> SessionOutcome:
        mis = misbehave or Misbehavior()
        with self._lock:
            return self._run_session_locked(reason, mis)

    def _run_session_locked(self, reason: str, mis: Misbehavior) -> SessionOutcome:
        session = self._open_session()
        outcome = SessionOutcome(reason=reason, transcript=session.transcript)
        inform = self.build_inform(reason, mis)
        try:
            if mis.skip_inform:
                session.send_envelope(
                    codec.RpcEnvelope(id=session.next_id(), body=codec.GetRPCMethods()),
                    force=True,
                )
            reply = session.send_envelope(codec.RpcEnvelope(id=session.next_id(), body=inform))
            if reply is None or reply.kind != "InformResponse":
                got = reply.kind if reply is not None else "nothing"
                raise ProtocolError(f"expected InformResponse, got {got}")
            outcome.informed = True
            if mis.second_inform:
                session.send_envelope(
                    codec.RpcEnvelope(id=session.next_id(), body=inform), force=True
                )
            if mis.malformed:
                session.send_raw(codec.malform(codec.encode(
                    codec.RpcEnvelope(id=session.next_id(), body=inform)), mis.malformed))
            self._send_own_requests(session)
            command = session.yield_turn()
            while command is not None:
                outcome.commands.append(command)
                answer = self.answer(command)
                reply_id = "mismatched-id" if mis.wrong_id_echo else command.id
                command = session.respond(codec.RpcEnvelope(id=reply_id, body=answer))
            # Only events the Inform actually carried are delivered; anything
            # a command queued mid-session waits for the next one.
            delivered = set(inform.events)
            self.queued_events = [e for e in self.queued_events if e not in delivered]
            self.bootstrapped = True
            self.retry_count = 0
            self._apply_post_session_effects()
        except (TransportError, AuthFailed, AuthRefused, ProtocolError) as exc:
            outcome.error = str(exc)
            self.retry_count += 1
            outcome.retry_wait = retry_wait_seconds(self.retry_count, self.rng)
        finally:
            session.close()
        self.outcomes.append(outcome)
        return outcome

    def _send_own_requests(self, session: CwmpSession) -> None:
        for transfer in list(self.pending_transfers):
            body = codec.TransferComplete(
                command_key=transfer.command_key,
                start_time=datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"),
                complete_time=datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"),
            )
            session.send_envelope(codec.RpcEnvelope(id=session.next_id(), body=body))
            self.pending_transfers.remove(transfer)

    def _apply_post_session_effects(self) -> None:
        if self.reboot_key is not None:
            self._queue_event("M Reboot", self.reboot_key)
            self._queue_event("1 BOOT")
            self.reboot_key = None
            self.bootstrapped = True  # a reboot does not forget the server

    # -- command handling ---------------------------------------------------

    def answer(self, command: codec.RpcEnvelope):
        """The reply payload for one server command, with side effects applied."""
        body = command.body
        kind = command.kind
        tree = self.profile.tree
        try:
            if kind == "GetParameterValues":
                values: list[codec.ParameterValue] = []
                for name in body.names:
                    values.extend(tree.get_values(name))
                return codec.GetParameterValuesResponse(parameter_list=tuple(values))
            if kind == "GetParameterNames":
                infos = tree.get_names(body.parameter_path, body.next_level)
                return codec.GetParameterNamesResponse(parameters=tuple(infos))
            if kind == "SetParameterValues":
                return self._apply_set_values(body)
            if kind == "GetParameterAttributes":
                return codec.GetParameterAttributesResponse(
                    attributes=tuple(tree.get_attributes(body.names))
                )
            if kind == "SetParameterAttributes":
                tree.set_attributes(body.changes)
                return codec.SetParameterAttributesResponse()
            if kind == "AddObject":
                instance = tree.add_object(body.object_path)
                return codec.AddObjectResponse(instance_number=instance, status=0)
            if kind == "DeleteObject":
                tree.delete_object(body.object_path)
                return codec.DeleteObjectResponse(status=0)
            if kind == "Reboot":
                self.reboot_key = body.command_key
                return codec.RebootResponse()
            if kind == "Download":
                self.pending_transfers.append(
                    PendingTransfer(body.command_key, body.url, "download")
                )
                self._queue_event("7 TRANSFER COMPLETE", body.command_key)
                self._queue_event("M Download", body.command_key)
                return codec.DownloadResponse(status=1)
            if kind == "Upload":
                self.pending_transfers.append(
                    PendingTransfer(body.command_key, body.url, "upload")
                )
                self._queue_event("7 TRANSFER COMPLETE", body.command_key)
                return codec.UploadResponse(status=1)
            if kind == "GetRPCMethods":
                return codec.GetRPCMethodsResponse(methods=tuple(codec.CLIENT_IMPLEMENTED_RPCS))
        except ParamError as exc:
            return codec.Fault(code=exc.code, string=exc.string, details=tuple(exc.param_faults))
        return codec.Fault(code=9000, string=f"method {kind} not supported")

    def _apply_set_values(self, body: codec.SetParameterValues):
        tree = self.profile.tree
        changed_active = tree.set_values(list(body.parameter_list))
        for path in changed_active:
            self._queue_event("4 VALUE CHANGE")
        for pair in body.parameter_list:
            if pair.path in GUARD_URL_PARAMS and pair.value != self.profile.acs_url:
                # Takes effect at the next session; the new server is then
                # contacted from scratch.
                self.next_acs_url = pair.value
        return codec.SetParameterValuesResponse(status=0)


# ---------------------------------------------------------------------------
# Connection request endpoint

CR_REALM = "honeyclient-cr"


class _PlainHttpOnlyServer(ThreadingHTTPServer):
    daemon_threads = True

    def verify_request(self, request, client_address):
        # This port speaks plain HTTP by definition.  A TLS ClientHello
        # starts with the handshake record byte; drop such connections
        # before HTTP parsing produces confusing noise.
        try:
            request.settimeout(3.0)
            first = request.recv(1, socket.MSG_PEEK)
        except OSError:
            return False
        finally:
            try:
                request.settimeout(None)
            except OSError:
                pass
        if first == b"\x16":
            owner = getattr(self, "owner", None)
            if owner is not None:
                owner.rejected_tls += 1
            return False
        return bool(first)


class ConnectionRequestServer:
    """Trigger-only listener: a valid digest GET asks the client to call home.

    Nonces are single-use and short-lived, and each source address gets a
    small request budget per minute, so the trigger cannot be replayed or
    hammered.
    """

    def __init__(
        self,
        config: ConnectionRequestConfig,
        on_trigger,
        *,
        host: str = "127.0.0.1",
        port: int | None = None,
        rate_limit: int = 10,
        rate_window: float = 60.0,
        nonce_lifetime: float = 60.0,
    ) -> None:
        self.config = config
        self.on_trigger = on_trigger
        self.gate = DigestGate(
            CR_REALM, {config.username: config.password}, nonce_lifetime=nonce_lifetime
        )
        self.rate_limit = rate_limit
        self.rate_window = rate_window
        self.rejected_tls = 0
        self.triggers = 0
        self._recent: dict[str, list[float]] = {}
        self._rate_lock = threading.Lock()
        owner = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"
            disable_nagle_algorithm = True  # small bodies; Nagle+delayed-ACK stalls every turn
            timeout = 10

            def log_message(self, fmt, *args):
                pass

            def _reply(self, status: int, challenge: str | None = None) -> None:
                self.send_response(status)
                if challenge:
                    self.send_header("WWW-Authenticate", challenge)
                self.send_header("Content-Length", "0")
                self.end_headers()

            def do_GET(self):
                owner._handle_get(self)

            def do_POST(self):
                self._reply(405)

            do_PUT = do_DELETE = do_POST

        self.httpd = _PlainHttpOnlyServer((host, port if port is not None else config.port), Handler)
        self.httpd.owner = self
        self.host = host
        self.port = self.httpd.server_address[1]
        self.url = f"http://{host}:{self.port}{config.path}"
        self._thread: threading.Thread | None = None

    def _over_rate(self, source_ip: str) -> bool:
        now = time.monotonic()
        with self._rate_lock:
            stamps = self._recent.setdefault(source_ip, [])
            stamps[:] = [t for t in stamps if now - t < self.rate_window]
            if len(stamps) >= self.rate_limit:
                return True
            stamps.append(now)
            return False

    def _handle_get(self, handler) -> None:
        if handler.path != self.config.path:
            handler._reply(404)
            return
        if self._over_rate(handler.client_address[0]):
            handler._reply(503)
            return
        header = handler.headers.get("Authorization", "")
        if not header:
            handler._reply(401, challenge=self.gate.challenge())
            return
        result = self.gate.verify("GET", header)
        if not result.ok:
            handler._reply(401, challenge=self.gate.challenge(stale=result.stale))
            return
        self.triggers += 1
        handler._reply(200)
        # Trigger only after the response is on the wire; the session the
        # client opens is a separate conversation.
        if self.on_trigger is not None:
            threading.Thread(target=self.on_trigger, name="cr-trigger", daemon=True).start()

    def start(self) -> "ConnectionRequestServer":
        self._thread = threading.Thread(target=self.httpd.serve_forever, name="cr-server", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._thread is not None:
            self.httpd.shutdown()
            self._thread.join(timeout=5)
            self._thread = None
        self.httpd.server_close()

    def __enter__(self) -> "ConnectionRequestServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


# ---------------------------------------------------------------------------
# Interactive console


class HoneyclientShell(cmd.Cmd):
    intro = "honeyclient console; type help or ? to list commands"
    prompt = "(honeyclient) "

    def __init__(self, client: Honeyclient, **kwargs) -> None:
        super().__init__(**kwargs)
        self.client = client

    def _say(self, text: str) -> None:
        self.stdout.write(text + "\n")

    def do_inform(self, arg: str) -> None:
        """inform [reason] -- run one full session (default reason: periodic)"""
        reason = arg.strip() or "periodic"
        if reason not in REASON_EVENTS and reason != "boot":
            self._say(f"unknown reason {reason!r}; choose from {', '.join(sorted(REASON_EVENTS))}")
            return
        outcome = self.client.run_session(reason)
        if outcome.error:
            self._say(f"session failed: {outcome.error} (retry in {outcome.retry_wait:.0f}s)")
            return
        kinds = ", ".join(c.kind for c in outcome.commands) or "none"
        self._say(f"session ok; served commands: {kinds}")

    def do_get(self, arg: str) -> None:
        """get <path> -- read a parameter (or a whole subtree with a trailing dot)"""
        try:
            for pv in self.client.profile.tree.get_values(arg.strip()):
                self._say(f"{pv.path} = {pv.value}")
        except ParamError as exc:
            self._say(f"fault {exc.code}: {exc.string}")

    def do_set(self, arg: str) -> None:
        """set <path> <value> -- write a parameter locally"""
        parts = arg.split(None, 1)
        if len(parts) != 2:
            self._say("usage: set <path> <value>")
            return
        try:
            self.client.profile.tree.set_values([codec.ParameterValue(parts[0], parts[1])])
            self._say("ok")
        except ParamError as exc:
            self._say(f"fault {exc.code}: {exc.string}")

    def do_events(self, arg: str) -> None:
        """events -- show event codes queued for the next session"""
        if not self.client.queued_events:
            self._say("no queued events")
        for entry in self.client.queued_events:
            self._say(entry.code if not entry.command_key else f"{entry.code} (key={entry.command_key})")

    def do_status(self, arg: str) -> None:
        """status -- identity, server URL, retry state"""
        p = self.client.profile
        self._say(f"serial: {p.device_id.serial_number}")
        self._say(f"server: {p.acs_url}")
        self._say(f"retry_count: {self.client.retry_count}")
        self._say(f"sessions run: {len(self.client.outcomes)}")

    def do_quit(self, arg: str) -> bool:
        """quit -- leave the console"""
        return True

    def do_EOF(self, arg: str) -> bool:
        self._say("")
        return True
