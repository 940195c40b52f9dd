"""Value types shared by every service: paths, descriptors, container state.

All types here are immutable; services evolve state by replacing values
(``dataclasses.replace``), which keeps snapshots handed across threads safe.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Iterator

from .errors import (
    EmptyPathError,
    IllegalCharacterError,
    InvalidParamsError,
    PathTooLongError,
)

MAX_PATH_BYTES = 4096
SEPARATOR = "/"

HASH_LEN = 32  # sha3-256 digest size


class Mode(enum.IntEnum):
    """Access modes, totally ordered: admin implies write implies read."""

    READ = 1
    WRITE = 2
    ADMIN = 3

    @classmethod
    def parse(cls, name: str) -> "Mode":
        try:
            return cls[name.upper()]
        except KeyError:
            raise InvalidParamsError(f"unknown access mode: {name!r}") from None

    def covers(self, other: "Mode") -> bool:
        return self >= other


def _check_segment(segment: str) -> None:
    if segment == "":
        raise IllegalCharacterError("empty path segment")
    if SEPARATOR in segment:
        raise IllegalCharacterError(f"separator inside segment: {segment!r}")
    if "\x00" in segment:
        raise IllegalCharacterError("NUL byte in path segment")


@dataclass(frozen=True, order=True)
class ObjectPath:
    """Hierarchical object name: first segment is the user namespace."""

    segments: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.segments:
            raise EmptyPathError("path has no segments")
        for seg in self.segments:
            _check_segment(seg)
        if len(self.render().encode("utf-8")) > MAX_PATH_BYTES:
            raise PathTooLongError(f"path exceeds {MAX_PATH_BYTES} bytes")

    def render(self) -> str:
        return SEPARATOR + SEPARATOR.join(self.segments)

    def __str__(self) -> str:
        return self.render()

    @property
    def namespace(self) -> str:
        return self.segments[0]

    @property
    def name(self) -> str:
        return self.segments[-1]

    @property
    def is_root(self) -> bool:
        return len(self.segments) == 1

    def parent(self) -> "ObjectPath | None":
        if self.is_root:
            return None
        return ObjectPath(self.segments[:-1])

    def child(self, name: str) -> "ObjectPath":
        return ObjectPath(self.segments + (name,))

    def walk_up(self) -> Iterator["ObjectPath"]:
        """Yield self, then each ancestor up to the namespace root."""
        node: ObjectPath | None = self
        while node is not None:
            yield node
            node = node.parent()

    def is_prefix_of(self, other: "ObjectPath") -> bool:
        return self.segments == other.segments[: len(self.segments)]


def parse_path(raw: str) -> ObjectPath:
    """Parse ``/ns/coll/obj`` (leading separator optional) into an ObjectPath.

    Raises EmptyPathError for '' or '/', IllegalCharacterError for empty
    segments (consecutive or trailing separators) and NUL bytes, and
    PathTooLongError past 4096 encoded bytes.
    """
    if not isinstance(raw, str):
        raise IllegalCharacterError("path must be a string")
    text = raw[1:] if raw.startswith(SEPARATOR) else raw
    if text == "":
        raise EmptyPathError(f"empty path: {raw!r}")
    return ObjectPath(tuple(text.split(SEPARATOR)))


@dataclass(frozen=True)
class ObjectDescriptor:
    """Everything needed to locate and verify one stored object version."""

    object_uuid: str
    path: ObjectPath
    size_bytes: int
    object_hash: bytes
    n: int
    k: int
    # (chunk_index, container_id) pairs, exactly n of them, indices 0..n-1.
    chunk_locations: tuple[tuple[int, str], ...]
    owner: str
    created_at_ms: int

    def __post_init__(self) -> None:
        if self.size_bytes < 0:
            raise InvalidParamsError("negative object size")
        if len(self.object_hash) != HASH_LEN:
            raise InvalidParamsError("object_hash must be 32 bytes")
        if not (1 <= self.k <= self.n):
            raise InvalidParamsError(f"bad coding params n={self.n} k={self.k}")
        if len(self.chunk_locations) != self.n:
            raise InvalidParamsError("chunk_locations must list all n chunks")
        indices = sorted(idx for idx, _ in self.chunk_locations)
        if indices != list(range(self.n)):
            raise InvalidParamsError("chunk indices must be 0..n-1, each once")
        if self.n > 1:
            holders = [cid for _, cid in self.chunk_locations]
            if len(set(holders)) != len(holders):
                raise InvalidParamsError("dispersed chunks must land on distinct containers")

    def location_of(self, chunk_index: int) -> str:
        for idx, cid in self.chunk_locations:
            if idx == chunk_index:
                return cid
        raise InvalidParamsError(f"no such chunk index: {chunk_index}")

    def to_dict(self) -> dict:
        return {
            "object_uuid": self.object_uuid,
            "path": self.path.render(),
            "size_bytes": self.size_bytes,
            "object_hash": self.object_hash.hex(),
            "n": self.n,
            "k": self.k,
            "chunk_locations": [[idx, cid] for idx, cid in self.chunk_locations],
            "owner": self.owner,
            "created_at_ms": self.created_at_ms,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ObjectDescriptor":
        return cls(
            object_uuid=data["object_uuid"],
            path=parse_path(data["path"]),
            size_bytes=int(data["size_bytes"]),
            object_hash=bytes.fromhex(data["object_hash"]),
            n=int(data["n"]),
            k=int(data["k"]),
            chunk_locations=tuple((int(i), str(c)) for i, c in data["chunk_locations"]),
            owner=data["owner"],
            created_at_ms=int(data["created_at_ms"]),
        )


@dataclass(frozen=True)
class ContainerState:
    """Registry snapshot of one storage container's capacity and health."""

    container_id: str
    endpoint: str
    mem_total_bytes: int
    mem_available_bytes: int
    fs_total_bytes: int
    fs_available_bytes: int
    annual_failure_rate: float = 0.0
    healthy: bool = True
    last_probe_ms: int = 0

    def __post_init__(self) -> None:
        for total, avail, label in (
            (self.mem_total_bytes, self.mem_available_bytes, "mem"),
            (self.fs_total_bytes, self.fs_available_bytes, "fs"),
        ):
            if total < 0 or avail < 0 or avail > total:
                raise InvalidParamsError(f"bad {label} capacity: {avail}/{total}")
        if not (0.0 <= self.annual_failure_rate <= 1.0):
            raise InvalidParamsError(
                f"annual failure rate out of [0,1]: {self.annual_failure_rate}"
            )

    def charged(self, nbytes: int) -> "ContainerState":
        """Copy with one placement of ``nbytes`` applied to the snapshot."""
        return replace(
            self,
            fs_available_bytes=max(0, self.fs_available_bytes - nbytes),
            mem_available_bytes=max(0, self.mem_available_bytes - nbytes),
        )

    def to_dict(self) -> dict:
        return {
            "container_id": self.container_id,
            "endpoint": self.endpoint,
            "mem_total_bytes": self.mem_total_bytes,
            "mem_available_bytes": self.mem_available_bytes,
            "fs_total_bytes": self.fs_total_bytes,
            "fs_available_bytes": self.fs_available_bytes,
            "annual_failure_rate": self.annual_failure_rate,
            "healthy": self.healthy,
            "last_probe_ms": self.last_probe_ms,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ContainerState":
        return cls(
            container_id=data["container_id"],
            endpoint=data.get("endpoint", ""),
            mem_total_bytes=int(data["mem_total_bytes"]),
            mem_available_bytes=int(data["mem_available_bytes"]),
            fs_total_bytes=int(data["fs_total_bytes"]),
            fs_available_bytes=int(data["fs_available_bytes"]),
            annual_failure_rate=float(data.get("annual_failure_rate", 0.0)),
            healthy=bool(data.get("healthy", True)),
            last_probe_ms=int(data.get("last_probe_ms", 0)),
        )


@dataclass(frozen=True)
class Permission:
    """One access entry attached to a namespace scope.

    ``allow=False`` is an explicit deny; at a given scope a deny for a subject
    beats an allow for the same subject.
    """

    subject: str
    mode: Mode
    scope: ObjectPath
    allow: bool = True

    def __post_init__(self) -> None:
        if isinstance(self.scope, str):
            object.__setattr__(self, "scope", parse_path(self.scope))
        if isinstance(self.mode, str):
            object.__setattr__(self, "mode", Mode.parse(self.mode))

    def to_dict(self) -> dict:
        return {
            "subject": self.subject,
            "mode": self.mode.name.lower(),
            "scope": self.scope.render(),
            "allow": self.allow,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Permission":
        return cls(
            subject=data["subject"],
            mode=Mode.parse(data["mode"]),
            scope=parse_path(data["scope"]),
            allow=bool(data.get("allow", True)),
        )
