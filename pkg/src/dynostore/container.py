"""A storage container node: durable chunk store fronted by an LRU cache.

Containers are deliberately dumb -- they file opaque chunk blobs under string
keys, answer capacity questions, and enforce token auth. All coding,
placement, and naming intelligence lives above them, which is what lets a
container be backed by anything that can hold bytes.

Writes are write-through: a chunk is durable on the backend before it is
cached, so a cache wipe (restart) never loses data. Items larger than the
whole cache bypass it rather than evicting everything else.
"""

from __future__ import annotations

import logging
import re
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from .auth import READ, TokenService, WRITE
from .domain import ContainerState
from .errors import (
    BackendFailureError,
    InvalidParamsError,
    NotFoundError,
    OutOfSpaceError,
)
from .util import Clock, SystemClock, new_id

logger = logging.getLogger(__name__)

_CHUNK_KEY = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")

DEFAULT_CACHE_FRACTION = 0.25  # of the memory budget


class StorageBackend(Protocol):
    """Minimal durable byte store a container adapts to DynoStore."""

    def write(self, chunk_id: str, blob: bytes) -> None: ...
    def read(self, chunk_id: str) -> bytes: ...
    def remove(self, chunk_id: str) -> None: ...
    def exists(self, chunk_id: str) -> bool: ...
    def stats(self) -> tuple[int, int]:
        """(capacity_bytes, available_bytes)."""
        ...
    def list_chunks(self) -> list[str]: ...


class MemoryBackend:
    """Dict-backed store for tests and simulations."""

    def __init__(self, capacity_bytes: int):
        self.capacity = capacity_bytes
        self._items: dict[str, bytes] = {}
        self._used = 0
        self._lock = threading.Lock()

    def write(self, chunk_id: str, blob: bytes) -> None:
        with self._lock:
            old = len(self._items.get(chunk_id, b""))
            if self._used - old + len(blob) > self.capacity:
                raise OutOfSpaceError(f"container full: cannot take {len(blob)} bytes")
            self._items[chunk_id] = blob
            self._used += len(blob) - old

    def read(self, chunk_id: str) -> bytes:
        with self._lock:
            try:
                return self._items[chunk_id]
            except KeyError:
                raise NotFoundError(f"no chunk {chunk_id}") from None

    def remove(self, chunk_id: str) -> None:
        with self._lock:
            blob = self._items.pop(chunk_id, None)
            if blob is not None:
                self._used -= len(blob)

    def exists(self, chunk_id: str) -> bool:
        with self._lock:
            return chunk_id in self._items

    def stats(self) -> tuple[int, int]:
        with self._lock:
            return self.capacity, self.capacity - self._used

    def list_chunks(self) -> list[str]:
        with self._lock:
            return sorted(self._items)


class FilesystemBackend:
    """One flat directory of chunk files; writes are staged then renamed."""

    def __init__(self, root: str | Path, capacity_bytes: int):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.capacity = capacity_bytes
        self._lock = threading.Lock()
        self._sizes: dict[str, int] = {}
        for item in self.root.iterdir():
            if item.is_file() and not item.name.endswith(".tmp") and _CHUNK_KEY.match(item.name):
                self._sizes[item.name] = item.stat().st_size
        self._used = sum(self._sizes.values())

    def _path(self, chunk_id: str) -> Path:
        return self.root / chunk_id

    def write(self, chunk_id: str, blob: bytes) -> None:
        with self._lock:
            old = self._sizes.get(chunk_id, 0)
            if self._used - old + len(blob) > self.capacity:
                raise OutOfSpaceError(f"container full: cannot take {len(blob)} bytes")
            tmp = self.root / f"{chunk_id}.{new_id()[:8]}.tmp"
            try:
                tmp.write_bytes(blob)
                tmp.replace(self._path(chunk_id))
            except OSError as exc:
                tmp.unlink(missing_ok=True)
                raise BackendFailureError(f"write of {chunk_id} failed: {exc}") from exc
            self._sizes[chunk_id] = len(blob)
            self._used += len(blob) - old

    def read(self, chunk_id: str) -> bytes:
        path = self._path(chunk_id)
        try:
            return path.read_bytes()
        except FileNotFoundError:
            raise NotFoundError(f"no chunk {chunk_id}") from None
        except OSError as exc:
            raise BackendFailureError(f"read of {chunk_id} failed: {exc}") from exc

    def remove(self, chunk_id: str) -> None:
        with self._lock:
            try:
                self._path(chunk_id).unlink(missing_ok=True)
            except OSError as exc:
                raise BackendFailureError(f"remove of {chunk_id} failed: {exc}") from exc
            size = self._sizes.pop(chunk_id, None)
            if size is not None:
                self._used -= size

    def exists(self, chunk_id: str) -> bool:
        return self._path(chunk_id).exists()

    def stats(self) -> tuple[int, int]:
        with self._lock:
            return self.capacity, self.capacity - self._used

    def list_chunks(self) -> list[str]:
        with self._lock:
            return sorted(self._sizes)


class LruCache:
    """Byte-bounded LRU of chunk blobs with hit/miss accounting."""

    def __init__(self, capacity_bytes: int):
        self.capacity = capacity_bytes
        self._items: OrderedDict[str, bytes] = OrderedDict()
        self._used = 0
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    @property
    def used_bytes(self) -> int:
        with self._lock:
            return self._used

    def get(self, chunk_id: str) -> bytes | None:
        with self._lock:
            blob = self._items.get(chunk_id)
            if blob is None:
                self.misses += 1
                return None
            self._items.move_to_end(chunk_id)
            self.hits += 1
            return blob

    def put(self, chunk_id: str, blob: bytes) -> None:
        if len(blob) > self.capacity:
            return  # oversized items bypass the cache entirely
        with self._lock:
            old = self._items.pop(chunk_id, None)
            if old is not None:
                self._used -= len(old)
            while self._items and self._used + len(blob) > self.capacity:
                _, evicted = self._items.popitem(last=False)
                self._used -= len(evicted)
            self._items[chunk_id] = blob
            self._used += len(blob)

    def remove(self, chunk_id: str) -> None:
        with self._lock:
            blob = self._items.pop(chunk_id, None)
            if blob is not None:
                self._used -= len(blob)

    def clear(self) -> None:
        with self._lock:
            self._items.clear()
            self._used = 0

    def __contains__(self, chunk_id: str) -> bool:
        with self._lock:
            return chunk_id in self._items

    def __len__(self) -> int:
        with self._lock:
            return len(self._items)


@dataclass
class ContainerConfig:
    name: str
    fs_capacity_bytes: int
    mem_budget_bytes: int
    container_id: str | None = None  # None -> generated, persisted on disk
    storage_dir: str | None = None  # None -> in-memory backend
    cache_capacity_bytes: int | None = None  # None -> 25% of the memory budget
    annual_failure_rate: float = 0.0
    endpoint: str = ""
    secret: str = ""  # registration/token secret
    gateway_url: str = ""
    listen_host: str = "127.0.0.1"
    listen_port: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def cache_bytes(self) -> int:
        if self.cache_capacity_bytes is not None:
            return self.cache_capacity_bytes
        return int(self.mem_budget_bytes * DEFAULT_CACHE_FRACTION)


class ContainerNode:
    """Chunk CRUD + status, behind token auth."""

    def __init__(
        self,
        config: ContainerConfig,
        tokens: TokenService,
        backend: StorageBackend | None = None,
        clock: Clock | None = None,
    ):
        self.config = config
        self.tokens = tokens
        self.clock = clock or SystemClock()
        if backend is not None:
            self.backend = backend
        elif config.storage_dir is not None:
            self.backend = FilesystemBackend(config.storage_dir, config.fs_capacity_bytes)
        else:
            self.backend = MemoryBackend(config.fs_capacity_bytes)
        self.cache = LruCache(config.cache_bytes)
        self.container_id = self._establish_identity()

    def _establish_identity(self) -> str:
        """Container ids must survive restarts: descriptors point at them.

        A disk marker wins over everything, including a configured id —
        renaming a node in its config must not orphan the chunks it already
        holds under the old identity.
        """
        if self.config.storage_dir is None:
            return self.config.container_id or new_id()
        # dotfile: invisible to the backend's chunk scan and capacity count
        marker = Path(self.config.storage_dir) / ".container_id"
        if marker.exists():
            return marker.read_text(encoding="utf-8").strip()
        cid = self.config.container_id or new_id()
        marker.parent.mkdir(parents=True, exist_ok=True)
        marker.write_text(cid + "\n", encoding="utf-8")
        return cid

    @staticmethod
    def _check_key(chunk_id: str) -> None:
        if not _CHUNK_KEY.match(chunk_id):
            raise InvalidParamsError(f"illegal chunk id: {chunk_id!r}")

    def put_chunk(self, chunk_id: str, blob: bytes, token: str) -> None:
        self.tokens.verify(token).require(WRITE)
        self._check_key(chunk_id)
        self.backend.write(chunk_id, blob)
        self.cache.put(chunk_id, blob)

    def get_chunk(self, chunk_id: str, token: str) -> bytes:
        self.tokens.verify(token).require(READ)
        self._check_key(chunk_id)
        blob = self.cache.get(chunk_id)
        if blob is not None:
            return blob
        blob = self.backend.read(chunk_id)
        self.cache.put(chunk_id, blob)
        return blob

    def delete_chunk(self, chunk_id: str, token: str) -> None:
        """Idempotent: deleting an absent chunk is a no-op ack."""
        self.tokens.verify(token).require(WRITE)
        self._check_key(chunk_id)
        self.cache.remove(chunk_id)
        self.backend.remove(chunk_id)

    def has_chunk(self, chunk_id: str, token: str) -> bool:
        self.tokens.verify(token).require(READ)
        self._check_key(chunk_id)
        return chunk_id in self.cache or self.backend.exists(chunk_id)

    def list_chunks(self, token: str) -> list[str]:
        self.tokens.verify(token).require(READ)
        return self.backend.list_chunks()

    def status(self) -> ContainerState:
        fs_total, fs_avail = self.backend.stats()
        mem_total = self.config.mem_budget_bytes
        mem_avail = max(0, mem_total - self.cache.used_bytes)
        return ContainerState(
            container_id=self.container_id,
            endpoint=self.config.endpoint,
            mem_total_bytes=mem_total,
            mem_available_bytes=mem_avail,
            fs_total_bytes=fs_total,
            fs_available_bytes=fs_avail,
            annual_failure_rate=self.config.annual_failure_rate,
            healthy=True,
            last_probe_ms=self.clock.now_ms(),
        )

    def counters(self) -> dict:
        return {
            "chunk_count": len(self.backend.list_chunks()),
            "cache_hits": self.cache.hits,
            "cache_misses": self.cache.misses,
            "cache_used_bytes": self.cache.used_bytes,
        }

    def restart(self) -> None:
        """Simulate a process restart: volatile cache gone, backend intact."""
        self.cache = LruCache(self.config.cache_bytes)
