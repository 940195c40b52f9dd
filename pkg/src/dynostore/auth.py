"""Signed bearer tokens: HMAC-SHA3-256 over a JSON claims payload.

Issued by the management plane, verified locally by every service that shares
the secret; no callback to the issuer is needed on the hot path.
"""

from __future__ import annotations

import hashlib
import hmac
import json
from dataclasses import dataclass

from .errors import UnauthorizedError
from .util import Clock, SystemClock, b64u_decode, b64u_encode

DEFAULT_TTL_MS = 3_600_000  # one hour

READ = "read"
WRITE = "write"
ADMIN = "admin"


@dataclass(frozen=True)
class TokenClaims:
    subject: str
    scopes: frozenset[str]
    expires_at_ms: int

    def require(self, scope: str) -> None:
        if ADMIN in self.scopes:
            return
        if scope not in self.scopes:
            raise UnauthorizedError(f"token for {self.subject!r} lacks {scope!r} scope")


class TokenService:
    """Issues and verifies bearer tokens under one shared secret."""

    def __init__(self, secret: bytes | str, clock: Clock | None = None):
        if isinstance(secret, str):
            secret = secret.encode("utf-8")
        if not secret:
            raise ValueError("token secret must be non-empty")
        self._secret = secret
        self._clock = clock or SystemClock()

    def _sign(self, payload: bytes) -> bytes:
        return hmac.new(self._secret, payload, hashlib.sha3_256).digest()

    def issue(
        self,
        subject: str,
        scopes: tuple[str, ...] = (READ, WRITE),
        ttl_ms: int = DEFAULT_TTL_MS,
    ) -> str:
        payload = json.dumps(
            {
                "sub": subject,
                "scopes": sorted(set(scopes)),
                "exp": self._clock.now_ms() + ttl_ms,
            },
            separators=(",", ":"),
            sort_keys=True,
        ).encode("utf-8")
        return f"{b64u_encode(payload)}.{b64u_encode(self._sign(payload))}"

    def verify(self, token: str) -> TokenClaims:
        """Check signature and expiry; raises UnauthorizedError on any defect."""
        if not token or token.count(".") != 1:
            raise UnauthorizedError("malformed token")
        head, sig = token.split(".")
        try:
            payload = b64u_decode(head)
            signature = b64u_decode(sig)
        except Exception:
            raise UnauthorizedError("undecodable token") from None
        if not hmac.compare_digest(signature, self._sign(payload)):
            raise UnauthorizedError("bad token signature")
        try:
            claims = json.loads(payload)
            subject = str(claims["sub"])
            scopes = frozenset(str(s) for s in claims["scopes"])
            expires = int(claims["exp"])
        except Exception:
            raise UnauthorizedError("malformed token claims") from None
        if self._clock.now_ms() >= expires:
            raise UnauthorizedError("token expired")
        return TokenClaims(subject=subject, scopes=scopes, expires_at_ms=expires)
