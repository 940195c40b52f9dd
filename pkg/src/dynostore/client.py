"""Client library: typed front end over a gateway.

Adds the conveniences applications want on top of the raw gateway API:
token caching with one transparent re-authentication on expiry, optional
client-side encryption (the store never sees plaintext or keys), shareable
``dyn://`` handles with an integrity fragment, and bulk push/pull helpers
that fan out over a thread pool but return results in input order.

Encrypted payloads travel inside a self-describing envelope::

    DYE1 | sha3-256(plaintext) (32) | IV (16) | AES-256-CTR ciphertext

The plaintext digest makes wrong-key decryption loud instead of silent:
CTR mode happily "decrypts" with any key, so the digest is the only thing
standing between a stale key and silently returned garbage.
"""

from __future__ import annotations

import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence
from urllib.parse import quote, unquote, urlsplit

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .domain import ContainerState, ObjectDescriptor, Permission, parse_path
from .erasure import hash_object
from .errors import (
    AlreadyExistsError,
    BadHandleError,
    EncryptionKeyMissingError,
    InvalidParamsError,
    UnauthorizedError,
    WrongKeyError,
)

ENVELOPE_MAGIC = b"DYE1"
_ENVELOPE_HEAD = len(ENVELOPE_MAGIC) + 32 + 16
HANDLE_SCHEME = "dyn"
HANDLE_FRAGMENT_LEN = 8


class GatewayAPI(Protocol):
    """The gateway surface the client consumes (HTTP or in-process)."""

    def authenticate(self, user: str, credential: str) -> str: ...
    def put_object(
        self,
        path: str,
        data: bytes,
        token: str,
        mode: str = "regular",
        n: int | None = None,
        k: int | None = None,
        target_loss: float | None = None,
    ) -> tuple[ObjectDescriptor, int]: ...
    def get_object(
        self, path: str, token: str, version: int | None = None
    ) -> bytes: ...
    def object_exists(self, path: str, token: str) -> bool: ...
    def evict(self, path: str, token: str) -> dict: ...
    def create_namespace(self, name: str, token: str) -> None: ...
    def create_collection(self, path: str, token: str) -> None: ...
    def grant(self, permission: Permission, token: str) -> None: ...
    def set_retention(self, path: str, days: int, token: str) -> None: ...
    def list_path(self, path: str, token: str) -> dict: ...
    def list_containers(self, token: str) -> list[ContainerState]: ...
    def plan(self, size: int, token: str, target_loss: float | None = None) -> dict: ...
    def run_gc(self, token: str, now_ms: int | None = None) -> list[dict]: ...


# --- encryption envelope --------------------------------------------------------------


def _coerce_key(key: bytes | str | None) -> bytes | None:
    if key is None:
        return None
    if isinstance(key, str):
        key = bytes.fromhex(key)
    if len(key) != 32:
        raise InvalidParamsError("encryption key must be 32 bytes (64 hex chars)")
    return key


def seal(plaintext: bytes, key: bytes) -> bytes:
    """Wrap ``plaintext`` in the AES-256-CTR envelope."""
    iv = os.urandom(16)
    enc = Cipher(algorithms.AES(key), modes.CTR(iv)).encryptor()
    ciphertext = enc.update(plaintext) + enc.finalize()
    return ENVELOPE_MAGIC + hash_object(plaintext) + iv + ciphertext


def is_sealed(blob: bytes) -> bool:
    return blob.startswith(ENVELOPE_MAGIC)


def unseal(blob: bytes, key: bytes | None) -> bytes:
    """Open an envelope, verifying the plaintext digest."""
    if not is_sealed(blob) or len(blob) < _ENVELOPE_HEAD:
        raise InvalidParamsError("not an encryption envelope")
    if key is None:
        raise EncryptionKeyMissingError(
            "object is encrypted and no encryption key is configured"
        )
    digest = blob[4:36]
    iv = blob[36:52]
    dec = Cipher(algorithms.AES(key), modes.CTR(iv)).decryptor()
    plaintext = dec.update(blob[_ENVELOPE_HEAD:]) + dec.finalize()
    if hash_object(plaintext) != digest:
        raise WrongKeyError("decryption produced data with the wrong digest")
    return plaintext


# --- handles --------------------------------------------------------------------------


def make_handle(path: str, version: int, plaintext: bytes) -> str:
    """Shareable pointer: ``dyn://<path>@<version>#<first-8-hex-of-sha3>``."""
    fragment = hash_object(plaintext).hex()[:HANDLE_FRAGMENT_LEN]
    return f"{HANDLE_SCHEME}://{quote(path, safe='/')}@{version}#{fragment}"


def parse_handle(handle: str) -> tuple[str, int, str]:
    """Split a handle into (path, version, fragment); raises on any malformation."""
    parts = urlsplit(handle)
    if parts.scheme != HANDLE_SCHEME:
        raise BadHandleError(f"not a {HANDLE_SCHEME}:// handle: {handle!r}")
    location = unquote(parts.netloc + parts.path)
    if "@" not in location:
        raise BadHandleError(f"handle is missing @version: {handle!r}")
    path, _, version_str = location.rpartition("@")
    fragment = parts.fragment
    if not path or not version_str.isdigit() or len(fragment) != HANDLE_FRAGMENT_LEN:
        raise BadHandleError(f"malformed handle: {handle!r}")
    return path, int(version_str), fragment


# --- the client -----------------------------------------------------------------------


@dataclass
class PushResult:
    descriptor: ObjectDescriptor
    version: int
    handle: str


@dataclass
class ClientConfig:
    user: str
    credential: str = ""
    token: str = ""  # pre-issued token; skips authenticate()
    encryption_key: bytes | str | None = None
    workers: int = 8
    extra: dict = field(default_factory=dict)


class DynoStoreClient:
    """One user's connection to a gateway."""

    def __init__(self, gateway: GatewayAPI, config: ClientConfig):
        self.gateway = gateway
        self.config = config
        self._key = _coerce_key(config.encryption_key)
        self._token = config.token
        self._token_lock = threading.Lock()
        self._pool: ThreadPoolExecutor | None = None

    # -- auth ---------------------------------------------------------------------

    def _fresh_token(self) -> str:
        with self._token_lock:
            self._token = self.gateway.authenticate(
                self.config.user, self.config.credential
            )
            return self._token

    def _call(self, fn, *args, **kwargs):
        """Run a token-taking gateway call, re-authenticating once on expiry."""
        token = self._token or self._fresh_token()
        try:
            return fn(*args, token=token, **kwargs)
        except UnauthorizedError:
            if not self.config.credential:
                raise
            return fn(*args, token=self._fresh_token(), **kwargs)

    # -- single-object operations ----------------------------------------------------

    def push(
        self,
        path: str,
        data: bytes,
        mode: str = "regular",
        n: int | None = None,
        k: int | None = None,
        target_loss: float | None = None,
        encrypt: bool = False,
    ) -> PushResult:
        parse_path(path)  # fail fast, before any bytes move
        if mode == "regular" and (
            n is not None or k is not None or target_loss is not None
        ):
            mode = "resilient"
        payload = data
        if encrypt:
            if self._key is None:
                raise EncryptionKeyMissingError(
                    "encrypt=True but no encryption key is configured"
                )
            payload = seal(data, self._key)
        descriptor, version = self._call(
            self.gateway.put_object,
            path,
            payload,
            mode=mode,
            n=n,
            k=k,
            target_loss=target_loss,
        )
        return PushResult(
            descriptor=descriptor,
            version=version,
            handle=make_handle(path, version, data),
        )

    def pull(self, path: str, version: int | None = None) -> bytes:
        blob = self._call(self.gateway.get_object, path, version=version)
        if is_sealed(blob):
            return unseal(blob, self._key)
        return blob

    def pull_handle(self, handle: str) -> bytes:
        """Fetch by handle and verify the content fragment end to end."""
        path, version, fragment = parse_handle(handle)
        data = self.pull(path, version=version)
        actual = hash_object(data).hex()[:HANDLE_FRAGMENT_LEN]
        if actual != fragment:
            raise BadHandleError(
                f"handle fragment {fragment} does not match content ({actual})"
            )
        return data

    def exists(self, path: str) -> bool:
        return self._call(self.gateway.object_exists, path)

    def evict(self, path: str) -> dict:
        return self._call(self.gateway.evict, path)

    # -- namespace management ---------------------------------------------------------

    def create_namespace(self, name: str) -> None:
        self._call(self.gateway.create_namespace, name)

    def create_collection(self, path: str) -> None:
        self._call(self.gateway.create_collection, path)

    def ensure_path(self, path: str) -> None:
        """Create the namespace and every intermediate collection for ``path``.

        Levels that already exist are fine; this is mkdir -p, not mkdir.
        """
        parsed = parse_path(path)
        try:
            self.create_namespace(parsed.namespace)
        except AlreadyExistsError:
            pass
        prefix = parsed.segments[0]
        for segment in parsed.segments[1:-1]:
            prefix = f"{prefix}/{segment}"
            try:
                self.create_collection(prefix)
            except AlreadyExistsError:
                pass

    def grant(self, permission: Permission) -> None:
        self._call(self.gateway.grant, permission)

    def set_retention(self, path: str, days: int) -> None:
        self._call(self.gateway.set_retention, path, days)

    def list_path(self, path: str) -> dict:
        return self._call(self.gateway.list_path, path)

    def list_containers(self) -> list[ContainerState]:
        return self._call(self.gateway.list_containers)

    def plan(self, size: int, target_loss: float | None = None) -> dict:
        return self._call(self.gateway.plan, size, target_loss=target_loss)

    def run_gc(self, now_ms: int | None = None) -> list[dict]:
        return self._call(self.gateway.run_gc, now_ms=now_ms)

    # -- bulk ---------------------------------------------------------------------

    def _executor(self) -> ThreadPoolExecutor:
        if self._pool is None:
            self._pool = ThreadPoolExecutor(max_workers=self.config.workers)
        return self._pool

    def push_many(
        self, items: Sequence[tuple[str, bytes]], **push_kwargs
    ) -> list[PushResult | Exception]:
        """Concurrent pushes; result i corresponds to items[i]. Failures come
        back as the exception instead of aborting the whole batch."""
        futures = [
            self._executor().submit(self.push, path, data, **push_kwargs)
            for path, data in items
        ]
        results: list[PushResult | Exception] = []
        for fut in futures:
            try:
                results.append(fut.result())
            except Exception as exc:
                results.append(exc)
        return results

    def pull_many(
        self, paths: Iterable[str | tuple[str, int | None]]
    ) -> list[bytes | Exception]:
        normalized = [
            (p, None) if isinstance(p, str) else (p[0], p[1]) for p in paths
        ]
        futures = [
            self._executor().submit(self.pull, path, version)
            for path, version in normalized
        ]
        results: list[bytes | Exception] = []
        for fut in futures:
            try:
                results.append(fut.result())
            except Exception as exc:
                results.append(exc)
        return results

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=False)
            self._pool = None
