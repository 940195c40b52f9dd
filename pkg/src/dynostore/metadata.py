"""Replicated object metadata: namespace tree, permissions, versions, GC.

The tree is the state machine replicated by ``consensus``: every mutation
(namespace/collection creation, object registration, grants, retention,
eviction, version purges) is proposed, majority-accepted, and committed with
a total-order timestamp. ``apply`` is order-commutative -- version chains are
timestamp-ordered insertions, creates are set-union, grants and retention are
last-writer-wins keyed by scope, evictions leave timestamp tombstones -- so
replicas converge to identical trees no matter how commit delivery
interleaves; client-facing validation runs at accept time against committed
state.

Reads serve only committed state, and a path with an in-flight accepted
update is locked until the update resolves (or its TTL lapses), which is
what makes a successful write immediately visible at every replica that
voted for it.
"""

from __future__ import annotations

import bisect
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Protocol

from .auth import ADMIN, TokenService
from .consensus import (
    AppliedResult,
    ConsensusReplica,
    DEFAULT_PENDING_TTL_MS,
    LogStore,
    Message,
    Operation,
    Propose,
    ProposeReply,
    PullRequest,
    Timestamp,
)
from .domain import Mode, ObjectDescriptor, ObjectPath, Permission, parse_path
from .errors import (
    InvalidParamsError,
    NotFoundError,
    PermissionDeniedError,
    VersionExpiredError,
)
from .util import Clock

logger = logging.getLogger(__name__)

DEFAULT_RETENTION_DAYS = 30
DAY_MS = 86_400_000


# --- tree state -----------------------------------------------------------------


@dataclass
class VersionRecord:
    descriptor: ObjectDescriptor
    ts: Timestamp
    purged: bool = False

    def to_dict(self) -> dict:
        return {
            "descriptor": self.descriptor.to_dict(),
            "ts": self.ts.to_list(),
            "purged": self.purged,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "VersionRecord":
        return cls(
            ObjectDescriptor.from_dict(data["descriptor"]),
            Timestamp.from_list(data["ts"]),
            bool(data["purged"]),
        )


@dataclass
class ObjectEntry:
    """All versions ever registered at one path, timestamp-ascending."""

    versions: list[VersionRecord] = field(default_factory=list)
    retention_days: int = DEFAULT_RETENTION_DAYS
    retention_ts: Timestamp | None = None
    evicted_ts: Timestamp | None = None

    def is_alive(self, record: VersionRecord) -> bool:
        if record.purged:
            return False
        return self.evicted_ts is None or record.ts > self.evicted_ts

    def alive_versions(self) -> list[VersionRecord]:
        return [v for v in self.versions if self.is_alive(v)]

    def head(self) -> VersionRecord | None:
        for record in reversed(self.versions):
            if self.is_alive(record):
                return record
        return None

    def to_dict(self) -> dict:
        return {
            "versions": [v.to_dict() for v in self.versions],
            "retention_days": self.retention_days,
            "retention_ts": self.retention_ts.to_list() if self.retention_ts else None,
            "evicted_ts": self.evicted_ts.to_list() if self.evicted_ts else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ObjectEntry":
        return cls(
            versions=[VersionRecord.from_dict(v) for v in data["versions"]],
            retention_days=int(data["retention_days"]),
            retention_ts=(
                Timestamp.from_list(data["retention_ts"]) if data["retention_ts"] else None
            ),
            evicted_ts=(
                Timestamp.from_list(data["evicted_ts"]) if data["evicted_ts"] else None
            ),
        )


@dataclass
class CollectionNode:
    name: str
    owner: str = ""
    owner_ts: Timestamp | None = None
    children: dict[str, "CollectionNode"] = field(default_factory=dict)
    objects: dict[str, ObjectEntry] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "owner": self.owner,
            "owner_ts": self.owner_ts.to_list() if self.owner_ts else None,
            "children": {n: c.to_dict() for n, c in self.children.items()},
            "objects": {n: o.to_dict() for n, o in self.objects.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CollectionNode":
        node = cls(
            name=data["name"],
            owner=data["owner"],
            owner_ts=Timestamp.from_list(data["owner_ts"]) if data["owner_ts"] else None,
        )
        node.children = {n: cls.from_dict(c) for n, c in data["children"].items()}
        node.objects = {n: ObjectEntry.from_dict(o) for n, o in data["objects"].items()}
        return node


class NamespaceTree:
    """The metadata state machine. Mutations only through apply().

    Grants live in a flat scope-keyed map rather than on tree nodes so that a
    grant commit landing before the commit that creates its scope still lands
    in exactly the same place on every replica.
    """

    def __init__(self) -> None:
        self.namespaces: dict[str, CollectionNode] = {}
        # scope path -> subject -> (permission, grant timestamp)
        self.grants: dict[str, dict[str, tuple[Permission, Timestamp]]] = {}

    # -- lookups -------------------------------------------------------------

    def find_collection(self, segments: tuple[str, ...]) -> CollectionNode | None:
        if not segments:
            return None
        node = self.namespaces.get(segments[0])
        for name in segments[1:]:
            if node is None:
                return None
            node = node.children.get(name)
        return node

    def find_entry(self, path: ObjectPath) -> ObjectEntry | None:
        if path.is_root:
            return None
        parent = self.find_collection(path.segments[:-1])
        if parent is None:
            return None
        return parent.objects.get(path.name)

    def entry_alive(self, path: ObjectPath) -> bool:
        entry = self.find_entry(path)
        return entry is not None and entry.head() is not None

    def iter_entries(self) -> Iterator[tuple[ObjectPath, ObjectEntry]]:
        stack = [((ns,), node) for ns, node in sorted(self.namespaces.items(), reverse=True)]
        while stack:
            segments, node = stack.pop()
            for name, entry in sorted(node.objects.items()):
                yield ObjectPath(segments + (name,)), entry
            for name, child in sorted(node.children.items(), reverse=True):
                stack.append((segments + (name,), child))

    def check(self, path: ObjectPath, subject: str, mode: Mode) -> bool:
        """Owner always passes; otherwise the nearest scope with an entry
        for the subject decides (explicit deny included); default deny."""
        ns = self.namespaces.get(path.namespace)
        if ns is not None and ns.owner and ns.owner == subject:
            return True
        for scope in path.walk_up():
            perms = self.grants.get(scope.render())
            if not perms or subject not in perms:
                continue
            perm, _ = perms[subject]
            return perm.allow and perm.mode.covers(mode)
        return False

    def resolve(
        self, path: ObjectPath, version: int | None = None
    ) -> tuple[ObjectDescriptor, int]:
        """Committed descriptor plus its 1-based version ordinal."""
        entry = self.find_entry(path)
        if entry is None or not entry.versions:
            raise NotFoundError(f"no object at {path}")
        if version is None:
            head = entry.head()
            if head is None:
                raise NotFoundError(f"no live version at {path}")
            return head.descriptor, entry.versions.index(head) + 1
        if version < 1 or version > len(entry.versions):
            raise NotFoundError(f"{path} has no version {version}")
        record = entry.versions[version - 1]
        if not entry.is_alive(record):
            raise VersionExpiredError(f"{path} version {version} was purged")
        return record.descriptor, version

    def list_path(self, path: ObjectPath) -> dict:
        node = self.find_collection(path.segments)
        if node is None:
            raise NotFoundError(f"no collection at {path}")
        return {
            "collections": sorted(node.children),
            "objects": sorted(n for n, e in node.objects.items() if e.head() is not None),
        }

    def live_versions(self) -> list[tuple[ObjectPath, ObjectDescriptor]]:
        out = []
        for path, entry in self.iter_entries():
            for record in entry.alive_versions():
                out.append((path, record.descriptor))
        return out

    def gc_candidates(self, now_ms: int) -> list[tuple[ObjectPath, VersionRecord]]:
        """Non-head live versions superseded longer than their retention ago."""
        out = []
        for path, entry in self.iter_entries():
            alive = entry.alive_versions()
            if len(alive) < 2:
                continue
            for record in alive[:-1]:
                idx = entry.versions.index(record)
                # the next registered version is the commit that displaced this one
                superseded_ms = entry.versions[idx + 1].ts.ms
                if now_ms - superseded_ms > entry.retention_days * DAY_MS:
                    out.append((path, record))
        return out

    # -- state machine interface -------------------------------------------------

    def validate(self, op: Operation, ts: Timestamp) -> tuple[str, str] | None:
        kind = op.kind
        path = parse_path(op.path)
        if kind == "create_namespace":
            if path.namespace in self.namespaces:
                return ("AlreadyExists", f"namespace {path.namespace!r} exists")
            return None
        if kind == "create_collection":
            if self.find_collection(path.segments[:-1]) is None:
                return ("ParentNotFound", f"no parent collection for {path}")
            if self.find_collection(path.segments) is not None:
                return ("AlreadyExists", f"collection {path} exists")
            if self.find_entry(path) is not None:
                return ("AlreadyExists", f"an object sits at {path}")
            return None
        if kind == "register_object":
            if self.find_collection(path.segments[:-1]) is None:
                return ("CollectionNotFound", f"no collection for {path}")
            if self.find_collection(path.segments) is not None:
                return ("AlreadyExists", f"a collection sits at {path}")
            entry = self.find_entry(path)
            head = entry.head() if entry else None
            current = head.descriptor.object_uuid if head else None
            expected = op.payload.get("expected_head")
            if current != expected:
                return (
                    "ConsensusFailed",
                    f"head moved: expected {expected}, found {current}",
                )
            return None
        if kind == "grant":
            if self.find_collection(path.segments) is None and not self.entry_alive(path):
                return ("ScopeNotFound", f"no scope at {path}")
            return None
        if kind == "set_retention":
            if int(op.payload.get("days", -1)) < 0:
                return ("InvalidParams", "retention_days must be >= 0")
            if not self.entry_alive(path):
                return ("NotFound", f"no object at {path}")
            return None
        if kind == "purge_version":
            entry = self.find_entry(path)
            uuid = op.payload.get("object_uuid")
            if entry is None:
                return ("NotFound", f"no object at {path}")
            record = next(
                (v for v in entry.versions if v.descriptor.object_uuid == uuid), None
            )
            if record is None:
                return ("NotFound", f"no version {uuid} at {path}")
            head = entry.head()
            if head is not None and head.descriptor.object_uuid == uuid:
                return ("InvalidParams", "refusing to purge the live head")
            return None
        if kind == "evict":
            if not self.entry_alive(path):
                return ("NotFound", f"no object at {path}")
            return None
        return ("InvalidParams", f"unknown operation kind {kind!r}")

    def apply(self, op: Operation, ts: Timestamp) -> AppliedResult:
        """Total and order-commutative; never raises."""
        kind = op.kind
        path = parse_path(op.path)
        if kind == "create_namespace":
            node = self._ensure_collection(path.segments)
            owner = op.payload.get("owner", "")
            if owner and (node.owner_ts is None or ts > node.owner_ts):
                node.owner = owner
                node.owner_ts = ts
            return AppliedResult(True)
        if kind == "create_collection":
            self._ensure_collection(path.segments)
            return AppliedResult(True)
        if kind == "register_object":
            parent = self._ensure_collection(path.segments[:-1])
            entry = parent.objects.setdefault(path.name, ObjectEntry())
            descriptor = ObjectDescriptor.from_dict(op.payload["descriptor"])
            record = VersionRecord(descriptor, ts)
            if entry.evicted_ts is not None and ts <= entry.evicted_ts:
                record.purged = True
            keys = [v.ts for v in entry.versions]
            pos = bisect.bisect_left(keys, ts)
            if pos < len(keys) and keys[pos] == ts:
                return AppliedResult(True, data={"ordinal": pos + 1})
            entry.versions.insert(pos, record)
            return AppliedResult(True, data={"ordinal": pos + 1})
        if kind == "grant":
            perm = Permission.from_dict(op.payload["permission"])
            scoped = self.grants.setdefault(perm.scope.render(), {})
            current = scoped.get(perm.subject)
            if current is None or ts > current[1]:
                scoped[perm.subject] = (perm, ts)
            return AppliedResult(True)
        if kind == "set_retention":
            entry = self._ensure_entry(path)
            if entry.retention_ts is None or ts > entry.retention_ts:
                entry.retention_days = int(op.payload["days"])
                entry.retention_ts = ts
            return AppliedResult(True)
        if kind == "purge_version":
            entry = self.find_entry(path)
            uuid = op.payload.get("object_uuid")
            if entry is not None:
                for record in entry.versions:
                    if record.descriptor.object_uuid == uuid:
                        already = record.purged
                        record.purged = True
                        return AppliedResult(
                            True,
                            data={
                                "purged": not already,
                                "object_uuid": uuid,
                                "chunk_locations": list(record.descriptor.chunk_locations),
                            },
                        )
            return AppliedResult(True, data={"purged": False})
        if kind == "evict":
            entry = self.find_entry(path)
            if entry is None:
                return AppliedResult(True, data={"versions": []})
            removed = []
            for record in entry.versions:
                if entry.is_alive(record) and record.ts < ts:
                    record.purged = True
                    removed.append(
                        {
                            "object_uuid": record.descriptor.object_uuid,
                            "chunk_locations": list(record.descriptor.chunk_locations),
                        }
                    )
            if entry.evicted_ts is None or ts > entry.evicted_ts:
                entry.evicted_ts = ts
            return AppliedResult(True, data={"versions": removed})
        return AppliedResult(False, "InvalidParams", f"unknown op kind {kind!r}")

    def _ensure_collection(self, segments: tuple[str, ...]) -> CollectionNode:
        node = self.namespaces.get(segments[0])
        if node is None:
            node = CollectionNode(name=segments[0])
            self.namespaces[segments[0]] = node
        for name in segments[1:]:
            child = node.children.get(name)
            if child is None:
                child = CollectionNode(name=name)
                node.children[name] = child
            node = child
        return node

    def _ensure_entry(self, path: ObjectPath) -> ObjectEntry:
        parent = self._ensure_collection(path.segments[:-1])
        return parent.objects.setdefault(path.name, ObjectEntry())

    def to_snapshot(self) -> dict:
        return {
            "namespaces": {n: c.to_dict() for n, c in self.namespaces.items()},
            "grants": {
                scope: {s: [p.to_dict(), ts.to_list()] for s, (p, ts) in perms.items()}
                for scope, perms in self.grants.items()
            },
        }

    def load_snapshot(self, state: dict) -> None:
        self.namespaces = {
            n: CollectionNode.from_dict(c) for n, c in state["namespaces"].items()
        }
        self.grants = {}
        for scope, perms in state["grants"].items():
            self.grants[scope] = {
                s: (Permission.from_dict(p), Timestamp.from_list(ts))
                for s, (p, ts) in perms.items()
            }


# --- service facade --------------------------------------------------------------


class PeerTransport(Protocol):
    """Delivers one message to its destination replica.

    Returns the peer's response for request/response messages (Propose,
    PullRequest), None for one-way messages or when the peer is unreachable.
    """

    def send(self, msg: Message) -> Message | None: ...


class MetadataService:
    """One metadata replica: consensus engine + namespace tree + auth gate."""

    def __init__(
        self,
        replica_id: str,
        peer_ids: tuple[str, ...],
        store: LogStore,
        clock: Clock,
        tokens: TokenService,
        transport: PeerTransport | None = None,
        pending_ttl_ms: int = DEFAULT_PENDING_TTL_MS,
        read_wait_ms: int | None = None,
        snapshot_every: int = 500,
    ):
        self.machine = NamespaceTree()
        self.replica = ConsensusReplica(
            replica_id, peer_ids, self.machine, store, clock, pending_ttl_ms
        )
        self.store = store
        self.clock = clock
        self.tokens = tokens
        self.transport = transport
        self.read_wait_ms = (
            read_wait_ms if read_wait_ms is not None else pending_ttl_ms + 500
        )
        self.snapshot_every = snapshot_every
        self._snap_len = len(self.replica.log)
        self._cond = threading.Condition(threading.RLock())
        self._pool = ThreadPoolExecutor(
            max_workers=max(4, 2 * len(self.replica.peer_ids))
        )
        self._sync_thread: threading.Thread | None = None
        self._stop = threading.Event()

    @property
    def replica_id(self) -> str:
        return self.replica.replica_id

    # -- mutation driver ---------------------------------------------------------

    def _send(self, msg: Message) -> Message | None:
        if self.transport is None:
            return None
        try:
            return self.transport.send(msg)
        except Exception as exc:  # unreachable peer: the caller votes it "timeout"
            logger.debug("peer send failed (%s): %s", type(msg).__name__, exc)
            return None

    def _run(self, op: Operation) -> AppliedResult:
        with self._cond:
            # serialize our own writers per path instead of failing them outright
            self._wait_unlocked(op.path)
            session, msgs = self.replica.submit(op)
        if not session.done and msgs:
            futures = [(m, self._pool.submit(self._send, m)) for m in msgs]
            followups: list[Message] = []
            for msg, fut in futures:
                try:
                    reply = fut.result()
                except Exception:
                    reply = None
                if reply is None:
                    assert isinstance(msg, Propose)
                    reply = ProposeReply(
                        msg.dst, self.replica_id, msg.proposal.key, False, "timeout"
                    )
                with self._cond:
                    followups.extend(self.replica.handle(reply))
            with self._cond:
                if not session.done:
                    followups.extend(self.replica.fail_unanswered(session))
                self._cond.notify_all()
            msgs = followups
        for msg in msgs:
            # commits/aborts are one-way and best-effort; anti-entropy heals losses
            self._pool.submit(self._send, msg)
        with self._cond:
            self._cond.notify_all()
        if session.state == "committed":
            self._maybe_snapshot()
            assert session.result is not None
            return session.result
        session.raise_if_failed()
        raise RuntimeError("unreachable: session neither committed nor aborted")

    def _maybe_snapshot(self) -> None:
        with self._cond:
            if len(self.replica.log) - self._snap_len < self.snapshot_every:
                return
            state = {"machine": self.machine.to_snapshot(), **self.replica.to_snapshot()}
            self._snap_len = len(self.replica.log)
            self.store.snapshot(state)

    def _wait_unlocked(self, path: str) -> None:
        """Wait (bounded, in real time) while an in-flight update holds ``path``."""
        deadline = time.monotonic() + self.read_wait_ms / 1000.0
        while self.replica.is_locked(path) and time.monotonic() < deadline:
            self._cond.wait(timeout=0.05)

    # -- peer-facing (wire adapters call these) ------------------------------------

    def handle_peer(self, msg: Message) -> Message | None:
        with self._cond:
            out = self.replica.handle(msg)
            self._cond.notify_all()
        return out[0] if out else None

    def sync_once(self) -> None:
        """Pull every peer's log and install anything we missed."""
        for peer in self.replica.peer_ids:
            reply = self._send(PullRequest(self.replica_id, peer))
            if reply is not None:
                with self._cond:
                    self.replica.handle(reply)
                    self._cond.notify_all()

    def start_sync(self, interval_s: float = 5.0) -> None:
        if self._sync_thread is not None:
            return

        def loop() -> None:
            while not self._stop.wait(interval_s):
                try:
                    self.sync_once()
                except Exception:
                    logger.exception("anti-entropy pass failed")

        self._sync_thread = threading.Thread(target=loop, name="meta-sync", daemon=True)
        self._sync_thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._sync_thread is not None:
            self._sync_thread.join(timeout=2)
            self._sync_thread = None
        self._pool.shutdown(wait=False)

    # -- client-facing operations ---------------------------------------------------

    def create_namespace(self, name: str, token: str) -> None:
        claims = self.tokens.verify(token)
        path = parse_path(name)
        if not path.is_root:
            raise InvalidParamsError("a namespace is a single path segment")
        if claims.subject != path.namespace and ADMIN not in claims.scopes:
            raise PermissionDeniedError(
                f"{claims.subject!r} may not create namespace {path.namespace!r}"
            )
        self._run(Operation("create_namespace", path.render(), {"owner": path.namespace}))

    def create_collection(self, path_str: str, token: str) -> None:
        claims = self.tokens.verify(token)
        path = parse_path(path_str)
        if path.is_root:
            raise InvalidParamsError("the top level is a namespace; create it as one")
        self._require(path.parent(), claims.subject, Mode.WRITE)
        self._run(Operation("create_collection", path.render(), {"creator": claims.subject}))

    def register_object(
        self, descriptor: ObjectDescriptor, token: str
    ) -> tuple[ObjectDescriptor, int]:
        claims = self.tokens.verify(token)
        path = descriptor.path
        if path.is_root:
            raise InvalidParamsError("objects cannot sit at the namespace root")
        self._require(path, claims.subject, Mode.WRITE)
        with self._cond:
            entry = self.machine.find_entry(path)
            head = entry.head() if entry else None
            expected = head.descriptor.object_uuid if head else None
        result = self._run(
            Operation(
                "register_object",
                path.render(),
                {"descriptor": descriptor.to_dict(), "expected_head": expected},
            )
        )
        return descriptor, int(result.data["ordinal"])

    def resolve(
        self, path_str: str, token: str, version: int | None = None
    ) -> tuple[ObjectDescriptor, int]:
        claims = self.tokens.verify(token)
        path = parse_path(path_str)
        self._require(path, claims.subject, Mode.READ)
        with self._cond:
            self._wait_unlocked(path.render())
            return self.machine.resolve(path, version)

    def exists(self, path_str: str, token: str) -> bool:
        claims = self.tokens.verify(token)
        path = parse_path(path_str)
        self._require(path, claims.subject, Mode.READ)
        with self._cond:
            self._wait_unlocked(path.render())
            return self.machine.entry_alive(path)

    def list_path(self, path_str: str, token: str) -> dict:
        claims = self.tokens.verify(token)
        path = parse_path(path_str)
        self._require(path, claims.subject, Mode.READ)
        with self._cond:
            return self.machine.list_path(path)

    def grant(self, permission: Permission, token: str) -> None:
        claims = self.tokens.verify(token)
        self._require(permission.scope, claims.subject, Mode.ADMIN)
        self._run(
            Operation("grant", permission.scope.render(), {"permission": permission.to_dict()})
        )

    def check(self, path_str: str, subject: str, mode: Mode, token: str) -> bool:
        self.tokens.verify(token)
        with self._cond:
            return self.machine.check(parse_path(path_str), subject, mode)

    def set_retention(self, path_str: str, days: int, token: str) -> None:
        claims = self.tokens.verify(token)
        path = parse_path(path_str)
        self._require(path, claims.subject, Mode.WRITE)
        self._run(Operation("set_retention", path.render(), {"days": int(days)}))

    def evict(self, path_str: str, token: str) -> list[dict]:
        """Drop every live version of the object; returns their chunk locations."""
        claims = self.tokens.verify(token)
        path = parse_path(path_str)
        self._require(path, claims.subject, Mode.WRITE)
        result = self._run(Operation("evict", path.render(), {}))
        return list(result.data.get("versions", []))

    def garbage_collect(self, token: str, now_ms: int | None = None) -> list[dict]:
        """Purge versions superseded past retention; returns purged chunk sets."""
        claims = self.tokens.verify(token)
        claims.require(ADMIN)
        now = now_ms if now_ms is not None else self.clock.now_ms()
        with self._cond:
            candidates = self.machine.gc_candidates(now)
        purged = []
        for path, record in candidates:
            try:
                result = self._run(
                    Operation(
                        "purge_version",
                        path.render(),
                        {"object_uuid": record.descriptor.object_uuid},
                    )
                )
            except Exception as exc:
                logger.warning("gc purge of %s failed: %s", path, exc)
                continue
            if result.data.get("purged"):
                purged.append(
                    {
                        "path": path.render(),
                        "object_uuid": result.data["object_uuid"],
                        "chunk_locations": result.data["chunk_locations"],
                    }
                )
        return purged

    def live_versions(self, token: str) -> list[tuple[str, ObjectDescriptor]]:
        claims = self.tokens.verify(token)
        claims.require(ADMIN)
        with self._cond:
            return [(p.render(), d) for p, d in self.machine.live_versions()]

    def _require(self, path: ObjectPath | None, subject: str, mode: Mode) -> None:
        if path is None:
            raise PermissionDeniedError(f"{subject!r} denied above the namespace root")
        with self._cond:
            allowed = self.machine.check(path, subject, mode)
        if not allowed:
            raise PermissionDeniedError(f"{subject!r} lacks {mode.name.lower()} on {path}")
