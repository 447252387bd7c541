"""Client-side CWMP session choreography.

A session is one HTTP conversation the client opens toward its configured
server URL.  The conforming shape is fixed: the first message is an Inform;
after the InformResponse the client sends any requests of its own, then an
empty POST to yield the turn; the server then issues commands one per
exchange until it answers with an empty body, which ends the session.

CwmpSession enforces those transitions.  Every method that puts bytes on
the wire takes a ``force`` flag that skips the phase checks; that flag is
the hook the fault-injection layer uses, and nothing else should pass it.
"""

from __future__ import annotations

import http.cookies
import random
import time
from dataclasses import dataclass, field

from . import codec, digest
from .transport import HttpTransport, RealTransport, TlsPolicy, TransportError
from .wire import HttpExchange, HttpRequestData, HttpResponseData, SessionTranscript

USER_AGENT = "cwmpkit/0.1"

PHASE_IDLE = "idle"
PHASE_CLIENT_TURN = "client-turn"
PHASE_SERVER_TURN = "server-turn"
PHASE_DONE = "done"

# Session retry pacing: 5s doubling per failed attempt, capped, with jitter
# so a power outage does not produce a synchronized reconnect stampede.
RETRY_BASE_SECONDS = 5.0
RETRY_CAP_SECONDS = 2560.0
RETRY_COUNT_CAP = 10
RETRY_JITTER = 0.2


def retry_wait_seconds(retry_count: int, rng: random.Random | None = None) -> float:
    rng = rng or random
    rc = max(0, min(retry_count, RETRY_COUNT_CAP))
    base = min(RETRY_BASE_SECONDS * (2**rc), RETRY_CAP_SECONDS)
    return base * (1.0 + rng.uniform(-RETRY_JITTER, RETRY_JITTER))


class ProtocolError(Exception):
    """A call that would break the session choreography."""


class AuthRefused(Exception):
    """The server demanded an authentication exchange policy forbids."""


class AuthFailed(Exception):
    """Credentials were offered and rejected."""


@dataclass
class AuthConfig:
    username: str = ""
    password: str = ""
    # Basic over unencrypted HTTP exposes the credential to every on-path
    # box.  Off by default; switching it on is an explicit decision.
    allow_basic_over_plain_http: bool = False


@dataclass
class ChallengeAnswer:
    header_value: str | None
    posture_note: str = ""


def respond_to_challenge(
    challenge_value: str,
    method: str,
    uri: str,
    auth: AuthConfig,
    *,
    over_tls: bool,
    nc: int = 1,
    cnonce: str | None = None,
) -> ChallengeAnswer:
    """Decide and build the Authorization header for one challenge.

    Digest is always answered.  Basic is answered over TLS, or over plain
    HTTP only when the config explicitly allows it; a refusal returns
    header_value None with the posture note explaining why.
    """
    scheme = challenge_value.strip().split(" ", 1)[0].lower()
    if scheme == "digest":
        challenge = digest.parse_challenge(challenge_value)
        value = digest.build_authorization(
            auth.username, auth.password, method, uri, challenge, nc=nc, cnonce=cnonce
        )
        return ChallengeAnswer(value)
    if scheme == "basic":
        if over_tls:
            return ChallengeAnswer(
                digest.build_basic(auth.username, auth.password),
                posture_note="auth-posture: basic credentials sent over TLS",
            )
        if auth.allow_basic_over_plain_http:
            return ChallengeAnswer(
                digest.build_basic(auth.username, auth.password),
                posture_note="auth-posture: basic credentials sent over PLAIN HTTP (override enabled)",
            )
        return ChallengeAnswer(
            None,
            posture_note="auth-posture: refused to answer a Basic challenge over plain HTTP",
        )
    return ChallengeAnswer(None, posture_note=f"auth-posture: unsupported challenge scheme {scheme!r}")


class CwmpSession:
    def __init__(
        self,
        acs_url: str,
        auth: AuthConfig | None = None,
        *,
        transport: HttpTransport | None = None,
        tls_policy: TlsPolicy | None = None,
        timeout: float = 30.0,
        decode_mode: str = "lenient",
        rng: random.Random | None = None,
    ) -> None:
        self.acs_url = acs_url
        self.auth = auth or AuthConfig()
        self.transport = transport or RealTransport(tls_policy=tls_policy, timeout=timeout)
        self.decode_mode = decode_mode
        self.rng = rng or random.Random()
        self.transcript = SessionTranscript(acs_url=acs_url)
        self.phase = PHASE_IDLE
        self._cookies: dict[str, str] = {}
        self._cached_challenge: str | None = None
        self._nc = 0
        self._id_counter = 0
        self._id_prefix = f"{self.rng.getrandbits(32):08x}"
        self.last_server_request: codec.RpcEnvelope | None = None

    # -- message ids --------------------------------------------------

    def next_id(self) -> str:
        self._id_counter += 1
        return f"{self._id_prefix}-{self._id_counter}"

    # -- low-level HTTP -----------------------------------------------

    def _base_headers(self, body: bytes) -> dict[str, str]:
        headers = {"User-Agent": USER_AGENT}
        if body:
            headers["Content-Type"] = codec.CONTENT_TYPE
            headers["SOAPAction"] = '""'
        if self._cookies:
            headers["Cookie"] = "; ".join(f"{k}={v}" for k, v in self._cookies.items())
        return headers

    def _absorb_cookies(self, response: HttpResponseData) -> None:
        raw = response.header("Set-Cookie")
        if not raw:
            return
        for line in raw.split("\n"):
            jar = http.cookies.SimpleCookie()
            try:
                jar.load(line)
            except http.cookies.CookieError:
                continue
            for key, morsel in jar.items():
                self._cookies[key] = morsel.value

    def post(
        self,
        body: bytes,
        *,
        extra_headers: dict[str, str] | None = None,
        suppress_auth: bool = False,
    ) -> HttpResponseData:
        """One POST with cookie handling and the challenge dance.

        A 401 is answered at most twice: once for the initial challenge and
        once more if the server flags the nonce stale.
        """
        from urllib.parse import urlsplit

        uri = urlsplit(self.acs_url).path or "/"
        over_tls = self.acs_url.lower().startswith("https:")
        headers = self._base_headers(body)
        if extra_headers:
            headers.update(extra_headers)
        if not suppress_auth and self._cached_challenge and self._cached_challenge.lower().startswith("digest"):
            # Preemptive digest reuse: same nonce, incremented count.
            self._nc += 1
            answer = respond_to_challenge(
                self._cached_challenge, "POST", uri, self.auth, over_tls=over_tls, nc=self._nc
            )
            if answer.header_value:
                headers["Authorization"] = answer.header_value

        response = self._send_once("POST", headers, body)
        challenges_answered = 0
        while response.status == 401 and not suppress_auth and challenges_answered < 2:
            challenge_value = response.header("WWW-Authenticate")
            if not challenge_value:
                raise AuthFailed("401 without a WWW-Authenticate challenge")
            scheme = challenge_value.strip().split(" ", 1)[0].lower()
            if scheme == "digest":
                self._cached_challenge = challenge_value
                self._nc = 1
            answer = respond_to_challenge(
                challenge_value, "POST", uri, self.auth, over_tls=over_tls, nc=self._nc or 1
            )
            if answer.posture_note:
                self.transcript.note_posture(answer.posture_note)
            if answer.header_value is None:
                raise AuthRefused(answer.posture_note or "challenge refused")
            headers = self._base_headers(body)
            if extra_headers:
                headers.update(extra_headers)
            headers["Authorization"] = answer.header_value
            response = self._send_once("POST", headers, body)
            challenges_answered += 1
            stale = "stale=true" in response.header("WWW-Authenticate", "").lower()
            if response.status == 401 and not stale:
                raise AuthFailed("credentials rejected")
        if response.status == 401 and not suppress_auth:
            raise AuthFailed("still challenged after answering")
        return response

    def _send_once(self, method: str, headers: dict[str, str], body: bytes) -> HttpResponseData:
        req = HttpRequestData(method=method, url=self.acs_url, headers=headers, body=body)
        exchange = HttpExchange(request=req)
        self.transcript.add(exchange)
        try:
            response = self.transport.request(req)
        except TransportError as exc:
            exchange.error = str(exc)
            exchange.finished = time.time()
            for note in getattr(self.transport, "posture_notes", []):
                self.transcript.note_posture(note)
            raise
        exchange.response = response
        exchange.finished = time.time()
        self._absorb_cookies(response)
        for note in getattr(self.transport, "posture_notes", []):
            self.transcript.note_posture(note)
        return response

    # -- envelope-level -----------------------------------------------

    def _decode_response(self, response: HttpResponseData, exchange_notes: list[str]) -> codec.RpcEnvelope | None:
        if not response.body:
            return None
        try:
            envelope = codec.decode(response.body, mode=self.decode_mode)
        except codec.DecodeError as exc:
            exchange_notes.append(f"decode-error: {exc}")
            return None
        exchange_notes.extend(envelope.recovery_notes)
        return envelope

    def send_envelope(self, envelope: codec.RpcEnvelope, *, force: bool = False) -> codec.RpcEnvelope | None:
        if not force:
            if self.phase == PHASE_DONE:
                raise ProtocolError("session is over")
            if self.phase == PHASE_IDLE and envelope.kind != "Inform":
                raise ProtocolError("the first message of a session must be Inform")
            if self.phase == PHASE_SERVER_TURN and envelope.is_request:
                raise ProtocolError("the client turn is over; only responses may be sent now")
        response = self.post(codec.encode(envelope))
        exchange = self.transcript.exchanges[-1]
        decoded = self._decode_response(response, exchange.notes)
        if envelope.kind == "Inform" and decoded is not None and decoded.kind == "InformResponse":
            if self.phase == PHASE_IDLE:
                self.phase = PHASE_CLIENT_TURN
        return decoded

    def send_raw(self, body: bytes) -> HttpResponseData:
        """Put raw bytes on the wire; no phase bookkeeping, no decoding."""
        return self.post(body)

    def yield_turn(self, *, force: bool = False) -> codec.RpcEnvelope | None:
        """Empty POST: hand the floor to the server.

        Returns the server's first command, or None when the server has
        nothing and the session is over.
        """
        if not force and self.phase not in (PHASE_CLIENT_TURN, PHASE_SERVER_TURN):
            raise ProtocolError(f"cannot yield the turn from phase {self.phase!r}")
        response = self.post(b"")
        exchange = self.transcript.exchanges[-1]
        decoded = self._decode_response(response, exchange.notes)
        if decoded is None:
            self.phase = PHASE_DONE
            self.last_server_request = None
            return None
        self.phase = PHASE_SERVER_TURN
        self.last_server_request = decoded
        return decoded

    def respond(self, envelope: codec.RpcEnvelope, *, force: bool = False) -> codec.RpcEnvelope | None:
        """Answer the pending server command; returns the next one, if any."""
        if not force and self.phase != PHASE_SERVER_TURN:
            raise ProtocolError("no server command is pending")
        response = self.post(codec.encode(envelope))
        exchange = self.transcript.exchanges[-1]
        decoded = self._decode_response(response, exchange.notes)
        if decoded is None:
            self.phase = PHASE_DONE
            self.last_server_request = None
            return None
        self.last_server_request = decoded
        return decoded

    def close(self) -> None:
        self.transcript.final_phase = self.phase
        self.transport.close()
