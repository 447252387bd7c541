"""HTTP Digest access authentication, client and server halves.

Digest is the mandatory scheme for CWMP over plain HTTP (Basic would hand
the credential to any on-path listener), so both the emulated client and the
server side implement it natively.  Only MD5 with qop="auth" is produced;
the verifier also accepts the legacy no-qop form because some field gear
still sends it.
"""

from __future__ import annotations

import hashlib
import os
import re
import threading
import time
from dataclasses import dataclass, field


def _h(data: str) -> str:
    return hashlib.md5(data.encode("utf-8")).hexdigest()


def _kd(secret: str, data: str) -> str:
    return _h(f"{secret}:{data}")


@dataclass(frozen=True)
class DigestChallenge:
    realm: str = ""
    nonce: str = ""
    qop: str = ""
    opaque: str = ""
    algorithm: str = "MD5"
    stale: bool = False


_PARAM_RE = re.compile(r'([a-zA-Z][a-zA-Z0-9_-]*)\s*=\s*(?:"((?:[^"\\]|\\.)*)"|([^\s,]+))')


def parse_challenge(header_value: str) -> DigestChallenge:
    """Parse a WWW-Authenticate: Digest header value."""
    scheme, _, rest = header_value.strip().partition(" ")
    if scheme.lower() != "digest":
        raise ValueError(f"not a Digest challenge: {scheme!r}")
    params = {}
    for m in _PARAM_RE.finditer(rest):
        value = m.group(2) if m.group(2) is not None else m.group(3)
        params[m.group(1).lower()] = value.replace('\\"', '"')
    return DigestChallenge(
        realm=params.get("realm", ""),
        nonce=params.get("nonce", ""),
        qop=params.get("qop", ""),
        opaque=params.get("opaque", ""),
        algorithm=params.get("algorithm", "MD5"),
        stale=params.get("stale", "").lower() == "true",
    )


def parse_authorization(header_value: str) -> dict[str, str]:
    """Parse an Authorization: Digest header into its parameter map."""
    scheme, _, rest = header_value.strip().partition(" ")
    if scheme.lower() != "digest":
        raise ValueError(f"not a Digest authorization: {scheme!r}")
    params = {}
    for m in _PARAM_RE.finditer(rest):
        value = m.group(2) if m.group(2) is not None else m.group(3)
        params[m.group(1).lower()] = value.replace('\\"', '"')
    return params


def compute_response(
    username: str,
    password: str,
    realm: str,
    method: str,
    uri: str,
    nonce: str,
    *,
    qop: str = "auth",
    nc: str = "00000001",
    cnonce: str = "",
) -> str:
    """The response hash as RFC 2617 defines it (MD5, qop auth or absent)."""
    ha1 = _h(f"{username}:{realm}:{password}")
    ha2 = _h(f"{method}:{uri}")
    if qop:
        return _kd(ha1, f"{nonce}:{nc}:{cnonce}:{qop}:{ha2}")
    return _kd(ha1, f"{nonce}:{ha2}")


def build_authorization(
    username: str,
    password: str,
    method: str,
    uri: str,
    challenge: DigestChallenge,
    *,
    nc: int = 1,
    cnonce: str | None = None,
) -> str:
    """Build the Authorization header value answering a challenge."""
    qop = ""
    if challenge.qop:
        offered = [q.strip() for q in challenge.qop.split(",")]
        if "auth" in offered:
            qop = "auth"
        else:
            raise ValueError(f"challenge offers unsupported qop {challenge.qop!r}")
    if cnonce is None:
        cnonce = os.urandom(8).hex()
    nc_text = f"{nc:08x}"
    response = compute_response(
        username,
        password,
        challenge.realm,
        method,
        uri,
        challenge.nonce,
        qop=qop,
        nc=nc_text,
        cnonce=cnonce,
    )
    parts = [
        f'username="{username}"',
        f'realm="{challenge.realm}"',
        f'nonce="{challenge.nonce}"',
        f'uri="{uri}"',
        f'response="{response}"',
    ]
    if qop:
        parts.append(f"qop={qop}")
        parts.append(f"nc={nc_text}")
        parts.append(f'cnonce="{cnonce}"')
    if challenge.opaque:
        parts.append(f'opaque="{challenge.opaque}"')
    parts.append("algorithm=MD5")
    return "Digest " + ", ".join(parts)


@dataclass
class VerifyResult:
    ok: bool
    username: str = ""
    stale: bool = False
    reason: str = ""


class DigestGate:
    """Server-side digest verifier with nonce lifecycle management.

    Nonces are minted per challenge and expire.  With replay protection on,
    each (nonce, nc) pair is accepted once; a second use is answered with a
    stale challenge.  Protection can be switched off to model servers that
    accept replayed Authorization headers verbatim.
    """

    def __init__(
        self,
        realm: str,
        credentials: dict[str, str],
        *,
        replay_protection: bool = True,
        nonce_lifetime: float = 300.0,
    ) -> None:
        self.realm = realm
        self.credentials = dict(credentials)
        self.replay_protection = replay_protection
        self.nonce_lifetime = nonce_lifetime
        self._lock = threading.Lock()
        self._nonces: dict[str, float] = {}
        self._used: set[tuple[str, str]] = set()

    def challenge(self, *, stale: bool = False) -> str:
        nonce = os.urandom(16).hex()
        with self._lock:
            self._nonces[nonce] = time.monotonic() + self.nonce_lifetime
            self._gc_locked()
        value = f'Digest realm="{self.realm}", nonce="{nonce}", qop="auth", algorithm=MD5'
        if stale:
            value += ", stale=true"
        return value

    def _gc_locked(self) -> None:
        now = time.monotonic()
        dead = [n for n, exp in self._nonces.items() if exp < now]
        for n in dead:
            del self._nonces[n]
        if len(self._used) > 100000:
            self._used.clear()

    def verify(self, method: str, header_value: str) -> VerifyResult:
        try:
            params = parse_authorization(header_value)
        except ValueError as exc:
            return VerifyResult(False, reason=str(exc))
        username = params.get("username", "")
        nonce = params.get("nonce", "")
        uri = params.get("uri", "")
        qop = params.get("qop", "")
        nc = params.get("nc", "")
        cnonce = params.get("cnonce", "")
        response = params.get("response", "")
        password = self.credentials.get(username)
        if password is None:
            return VerifyResult(False, username=username, reason="unknown user")
        expected = compute_response(
            username, password, self.realm, method, uri, nonce, qop=qop, nc=nc, cnonce=cnonce
        )
        if expected != response:
            return VerifyResult(False, username=username, reason="bad response hash")
        with self._lock:
            live = nonce in self._nonces
            if self.replay_protection:
                if not live:
                    return VerifyResult(False, username=username, stale=True, reason="expired or unknown nonce")
                if (nonce, nc) in self._used:
                    return VerifyResult(False, username=username, stale=True, reason="nonce already used at this count")
                self._used.add((nonce, nc))
        return VerifyResult(True, username=username)


@dataclass
class BasicCredentials:
    username: str
    password: str


def parse_basic(header_value: str) -> BasicCredentials | None:
    import base64

    scheme, _, rest = header_value.strip().partition(" ")
    if scheme.lower() != "basic":
        return None
    try:
        decoded = base64.b64decode(rest.strip()).decode("utf-8")
    except Exception:
        return None
    user, _, pw = decoded.partition(":")
    return BasicCredentials(user, pw)


def build_basic(username: str, password: str) -> str:
    import base64

    token = base64.b64encode(f"{username}:{password}".encode("utf-8")).decode("ascii")
    return "Basic " + token
