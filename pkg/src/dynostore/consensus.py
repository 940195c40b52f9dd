"""Timestamp-ordered majority replication for metadata mutations.

Every mutation runs one round: the proposer stamps it with a totally ordered
timestamp ``(wall_ms, proposer_id)``, accepts it locally, and asks its peers
to accept. A replica accepts iff the timestamp beats everything it has
recorded for that path, no live pending update holds the path, and the
operation validates against its committed state; acceptance is durably logged
and parks the proposal in the path's single pending slot, which doubles as
the read lock. On a majority the proposer commits everywhere; otherwise it
aborts and releases the slot (a TTL reclaims slots whose proposer died).

Commits apply through a pluggable state machine whose ``apply`` must be
total, deterministic, and order-commutative; replicas that missed messages
converge by pulling peers' logs (anti-entropy), so delivery order never
changes the final state.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from .errors import ConsensusFailedError, error_for_code
from .util import Clock

logger = logging.getLogger(__name__)

DEFAULT_PENDING_TTL_MS = 3_000


@dataclass(frozen=True, order=True)
class Timestamp:
    """Total order over mutations: wall milliseconds, proposer id as tiebreak."""

    ms: int
    proposer: str

    def to_list(self) -> list:
        return [self.ms, self.proposer]

    @classmethod
    def from_list(cls, data: list) -> "Timestamp":
        return cls(int(data[0]), str(data[1]))


@dataclass(frozen=True)
class Operation:
    """One namespace mutation; ``path`` is the serialization/locking key."""

    kind: str
    path: str
    payload: dict

    def to_dict(self) -> dict:
        return {"kind": self.kind, "path": self.path, "payload": self.payload}

    @classmethod
    def from_dict(cls, data: dict) -> "Operation":
        return cls(data["kind"], data["path"], dict(data["payload"]))


@dataclass(frozen=True)
class Proposal:
    op: Operation
    ts: Timestamp
    proposer: str

    @property
    def key(self) -> tuple[str, int, str]:
        return (self.op.path, self.ts.ms, self.ts.proposer)

    def to_dict(self) -> dict:
        return {"op": self.op.to_dict(), "ts": self.ts.to_list(), "proposer": self.proposer}

    @classmethod
    def from_dict(cls, data: dict) -> "Proposal":
        return cls(
            Operation.from_dict(data["op"]),
            Timestamp.from_list(data["ts"]),
            data["proposer"],
        )


@dataclass(frozen=True)
class LogEntry:
    """A committed mutation."""

    op: Operation
    ts: Timestamp

    @property
    def key(self) -> tuple[str, int, str]:
        return (self.op.path, self.ts.ms, self.ts.proposer)

    def to_dict(self) -> dict:
        return {"op": self.op.to_dict(), "ts": self.ts.to_list()}

    @classmethod
    def from_dict(cls, data: dict) -> "LogEntry":
        return cls(Operation.from_dict(data["op"]), Timestamp.from_list(data["ts"]))


@dataclass(frozen=True)
class AppliedResult:
    """Outcome of applying one operation to the state machine."""

    ok: bool
    error_code: str = ""
    message: str = ""
    data: dict = field(default_factory=dict)


class StateMachine(Protocol):
    """What the replica replicates. ``apply`` must be order-commutative."""

    def validate(self, op: Operation, ts: Timestamp) -> tuple[str, str] | None:
        """Accept-time check against committed state: (error_code, message) or None."""
        ...

    def apply(self, op: Operation, ts: Timestamp) -> AppliedResult: ...

    def to_snapshot(self) -> dict: ...

    def load_snapshot(self, state: dict) -> None: ...


# --- messages ----------------------------------------------------------------


@dataclass(frozen=True)
class Propose:
    src: str
    dst: str
    proposal: Proposal


@dataclass(frozen=True)
class ProposeReply:
    src: str
    dst: str
    key: tuple[str, int, str]
    ok: bool
    reason: str = ""


@dataclass(frozen=True)
class Commit:
    src: str
    dst: str
    entry: LogEntry


@dataclass(frozen=True)
class Abort:
    src: str
    dst: str
    key: tuple[str, int, str]


@dataclass(frozen=True)
class PullRequest:
    src: str
    dst: str


@dataclass(frozen=True)
class PullReply:
    src: str
    dst: str
    entries: tuple[LogEntry, ...]


Message = Propose | ProposeReply | Commit | Abort | PullRequest | PullReply


def message_to_dict(msg: Message) -> dict:
    if isinstance(msg, Propose):
        return {"type": "propose", "src": msg.src, "dst": msg.dst,
                "proposal": msg.proposal.to_dict()}
    if isinstance(msg, ProposeReply):
        return {"type": "propose_reply", "src": msg.src, "dst": msg.dst,
                "key": list(msg.key), "ok": msg.ok, "reason": msg.reason}
    if isinstance(msg, Commit):
        return {"type": "commit", "src": msg.src, "dst": msg.dst,
                "entry": msg.entry.to_dict()}
    if isinstance(msg, Abort):
        return {"type": "abort", "src": msg.src, "dst": msg.dst, "key": list(msg.key)}
    if isinstance(msg, PullRequest):
        return {"type": "pull", "src": msg.src, "dst": msg.dst}
    if isinstance(msg, PullReply):
        return {"type": "pull_reply", "src": msg.src, "dst": msg.dst,
                "entries": [e.to_dict() for e in msg.entries]}
    raise TypeError(f"unknown message: {msg!r}")


def message_from_dict(data: dict) -> Message:
    kind = data["type"]
    if kind == "propose":
        return Propose(data["src"], data["dst"], Proposal.from_dict(data["proposal"]))
    if kind == "propose_reply":
        key = data["key"]
        return ProposeReply(data["src"], data["dst"],
                            (key[0], int(key[1]), key[2]), data["ok"], data.get("reason", ""))
    if kind == "commit":
        return Commit(data["src"], data["dst"], LogEntry.from_dict(data["entry"]))
    if kind == "abort":
        key = data["key"]
        return Abort(data["src"], data["dst"], (key[0], int(key[1]), key[2]))
    if kind == "pull":
        return PullRequest(data["src"], data["dst"])
    if kind == "pull_reply":
        return PullReply(data["src"], data["dst"],
                         tuple(LogEntry.from_dict(e) for e in data["entries"]))
    raise ValueError(f"unknown message type: {kind!r}")


# --- per-replica state ---------------------------------------------------------


@dataclass
class Pending:
    proposal: Proposal
    deadline_ms: int


class UpdateSession:
    """Tracks one proposer-side round until commit or abort."""

    def __init__(self, proposal: Proposal, voters: tuple[str, ...]):
        self.proposal = proposal
        self.voters = frozenset(voters)
        self.needed = len(voters) // 2 + 1
        self.accepts: set[str] = set()
        self.rejects: dict[str, str] = {}
        self.state = "open"  # open | committed | aborted
        self.result: AppliedResult | None = None
        self.abort_reason = ""

    @property
    def done(self) -> bool:
        return self.state != "open"

    def has_majority(self) -> bool:
        return len(self.accepts) >= self.needed

    def cannot_win(self) -> bool:
        outstanding = len(self.voters) - len(self.accepts) - len(self.rejects)
        return len(self.accepts) + outstanding < self.needed

    def raise_if_failed(self) -> None:
        if self.state != "aborted":
            return
        reason = self.abort_reason
        if reason.startswith("validate:"):
            code, _, message = reason[len("validate:"):].partition(":")
            raise error_for_code(code, message or code)
        raise ConsensusFailedError(f"update not committed: {reason or 'no majority'}")


class ReplicaLog:
    """Committed entries in arrival order, with per-path fast lookups."""

    def __init__(self) -> None:
        self.entries: list[LogEntry] = []
        self._keys: set[tuple[str, int, str]] = set()
        self.committed_ts: dict[str, Timestamp] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key: tuple[str, int, str]) -> bool:
        return key in self._keys

    def head_ts(self, path: str) -> Timestamp | None:
        return self.committed_ts.get(path)

    def append(self, entry: LogEntry) -> None:
        self.entries.append(entry)
        self._keys.add(entry.key)
        current = self.committed_ts.get(entry.op.path)
        if current is None or entry.ts > current:
            self.committed_ts[entry.op.path] = entry.ts


class LogStore(Protocol):
    """Durable record of accepts and commits, replayable after restart."""

    def append(self, record: dict) -> None: ...
    def load(self) -> tuple[dict | None, list[dict]]: ...
    def snapshot(self, state: dict) -> None: ...


class MemoryLogStore:
    """In-process store; survives simulated crashes (the object outlives them)."""

    def __init__(self) -> None:
        self.records: list[dict] = []
        self.snap: dict | None = None
        self.snap_upto = 0

    def append(self, record: dict) -> None:
        self.records.append(record)

    def load(self) -> tuple[dict | None, list[dict]]:
        if self.snap is None:
            return None, list(self.records)
        return self.snap, self.records[self.snap_upto:]

    def snapshot(self, state: dict) -> None:
        self.snap = state
        self.snap_upto = len(self.records)


class FileLogStore:
    """JSONL append log plus a snapshot file under one directory.

    The log is never truncated (cheap at this scale and trivially safe); the
    snapshot only short-circuits replay on load. ``fsync`` trades commit
    latency for durability across power loss and is off by default.
    """

    def __init__(self, directory: str | os.PathLike, fsync: bool = False):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.log_path = self.dir / "log.jsonl"
        self.snap_path = self.dir / "snapshot.json"
        self.fsync = fsync
        self._count = 0
        if self.log_path.exists():
            with self.log_path.open("r", encoding="utf-8") as fh:
                self._count = sum(1 for line in fh if line.strip())
        self._fh = self.log_path.open("a", encoding="utf-8")
        self._lock = threading.Lock()

    def append(self, record: dict) -> None:
        line = json.dumps(record, separators=(",", ":"), sort_keys=True)
        with self._lock:
            self._fh.write(line + "\n")
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())
            self._count += 1

    def load(self) -> tuple[dict | None, list[dict]]:
        records: list[dict] = []
        if self.log_path.exists():
            with self.log_path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        records.append(json.loads(line))
        if self.snap_path.exists():
            snap = json.loads(self.snap_path.read_text(encoding="utf-8"))
            return snap["state"], records[snap["upto"]:]
        return None, records

    def snapshot(self, state: dict) -> None:
        with self._lock:
            payload = json.dumps({"upto": self._count, "state": state}, sort_keys=True)
        tmp = self.snap_path.with_suffix(".tmp")
        tmp.write_text(payload, encoding="utf-8")
        tmp.replace(self.snap_path)

    def close(self) -> None:
        with self._lock:
            self._fh.close()


class ConsensusReplica:
    """One replica's protocol engine. Sans-IO: callers move the messages.

    Methods return the messages to send; feeding a received message into
    ``handle`` returns the responses. Thread safety is the caller's job
    (the service facade serializes; the simulator is single-threaded).
    """

    def __init__(
        self,
        replica_id: str,
        peer_ids: tuple[str, ...],
        machine: StateMachine,
        store: LogStore,
        clock: Clock,
        pending_ttl_ms: int = DEFAULT_PENDING_TTL_MS,
    ):
        self.replica_id = replica_id
        self.peer_ids = tuple(p for p in peer_ids if p != replica_id)
        self.machine = machine
        self.store = store
        self.clock = clock
        self.pending_ttl_ms = pending_ttl_ms
        self.log = ReplicaLog()
        self.pending: dict[str, Pending] = {}
        self.accepted_ts: dict[str, Timestamp] = {}
        self.sessions: dict[tuple[str, int, str], UpdateSession] = {}
        self._last_issued_ms = 0
        self._restore()

    # -- restart recovery ------------------------------------------------------

    def _restore(self) -> None:
        snap, records = self.store.load()
        if snap is not None:
            self.machine.load_snapshot(snap["machine"])
            for path, ts in snap["accepted_ts"].items():
                self.accepted_ts[path] = Timestamp.from_list(ts)
            for entry_data in snap["log"]:
                self.log.append(LogEntry.from_dict(entry_data))
        for record in records:
            if record["t"] == "accept":
                proposal = Proposal.from_dict(record["proposal"])
                path = proposal.op.path
                known = self.accepted_ts.get(path)
                if known is None or proposal.ts > known:
                    self.accepted_ts[path] = proposal.ts
                self.pending[path] = Pending(proposal, record["deadline_ms"])
            elif record["t"] == "commit":
                entry = LogEntry.from_dict(record["entry"])
                if entry.key not in self.log:
                    self.log.append(entry)
                    self.machine.apply(entry.op, entry.ts)
                self.pending.pop(entry.op.path, None)
        # committed paths never keep a pending slot for an already-applied ts
        for path in list(self.pending):
            head = self.log.head_ts(path)
            if head is not None and self.pending[path].proposal.ts <= head:
                del self.pending[path]

    def to_snapshot(self) -> dict:
        return {
            "accepted_ts": {p: ts.to_list() for p, ts in self.accepted_ts.items()},
            "log": [e.to_dict() for e in self.log.entries],
        }

    # -- read-side lock --------------------------------------------------------

    def prune_pending(self) -> None:
        now = self.clock.now_ms()
        for path in [p for p, pend in self.pending.items() if pend.deadline_ms <= now]:
            logger.warning("%s: pending update on %s expired", self.replica_id, path)
            del self.pending[path]

    def is_locked(self, path: str) -> bool:
        """True while an in-flight update holds the path (reads must wait)."""
        pend = self.pending.get(path)
        if pend is None:
            return False
        if pend.deadline_ms <= self.clock.now_ms():
            del self.pending[path]
            return False
        return True

    def lock_deadline_ms(self, path: str) -> int | None:
        pend = self.pending.get(path)
        return pend.deadline_ms if pend else None

    # -- proposer side -----------------------------------------------------------

    def next_timestamp(self) -> Timestamp:
        ms = max(self.clock.now_ms(), self._last_issued_ms + 1)
        self._last_issued_ms = ms
        return Timestamp(ms, self.replica_id)

    def submit(self, op: Operation) -> tuple[UpdateSession, list[Message]]:
        """Start a round for ``op``; returns the session and messages to send."""
        proposal = Proposal(op, self.next_timestamp(), self.replica_id)
        session = UpdateSession(proposal, (self.replica_id,) + self.peer_ids)
        self.sessions[proposal.key] = session
        error = self._acceptance_error(proposal)
        if error is not None:
            session.rejects[self.replica_id] = error
            session.state = "aborted"
            session.abort_reason = error
            del self.sessions[proposal.key]
            return session, []
        self._record_accept(proposal)
        session.accepts.add(self.replica_id)
        if session.has_majority():
            return session, self._commit_session(session)
        return session, [Propose(self.replica_id, peer, proposal) for peer in self.peer_ids]

    def _commit_session(self, session: UpdateSession) -> list[Message]:
        entry = LogEntry(session.proposal.op, session.proposal.ts)
        session.result = self._install(entry)
        session.state = "committed"
        self.sessions.pop(session.proposal.key, None)
        return [Commit(self.replica_id, peer, entry) for peer in self.peer_ids]

    def _abort_session(self, session: UpdateSession, reason: str) -> list[Message]:
        session.state = "aborted"
        session.abort_reason = reason
        self.sessions.pop(session.proposal.key, None)
        path = session.proposal.op.path
        pend = self.pending.get(path)
        if pend and pend.proposal.key == session.proposal.key:
            del self.pending[path]
        return [
            Abort(self.replica_id, peer, session.proposal.key) for peer in self.peer_ids
        ]

    def fail_unanswered(self, session: UpdateSession) -> list[Message]:
        """Driver timeout: count every silent peer as a rejection."""
        if session.done:
            return []
        for peer in session.voters - session.accepts - set(session.rejects):
            session.rejects[peer] = "timeout"
        if session.has_majority():
            return self._commit_session(session)
        return self._abort_session(session, self._aggregate_reason(session))

    def _aggregate_reason(self, session: UpdateSession) -> str:
        for reason in session.rejects.values():
            if reason.startswith("validate:"):
                return reason
        reasons = sorted(set(session.rejects.values()))
        return ",".join(reasons) if reasons else "no majority"

    # -- acceptor side -----------------------------------------------------------

    def _acceptance_error(self, proposal: Proposal) -> str | None:
        path = proposal.op.path
        now = self.clock.now_ms()
        pend = self.pending.get(path)
        if pend is not None and pend.deadline_ms <= now:
            del self.pending[path]
            pend = None
        if pend is not None and pend.proposal.key != proposal.key:
            return "locked"
        last = self.accepted_ts.get(path)
        head = self.log.head_ts(path)
        if head is not None and (last is None or head > last):
            last = head
        if last is not None and proposal.ts <= last:
            return "stale-ts"
        verdict = self.machine.validate(proposal.op, proposal.ts)
        if verdict is not None:
            code, message = verdict
            return f"validate:{code}:{message}"
        return None

    def _record_accept(self, proposal: Proposal) -> None:
        deadline = self.clock.now_ms() + self.pending_ttl_ms
        self.pending[proposal.op.path] = Pending(proposal, deadline)
        self.accepted_ts[proposal.op.path] = proposal.ts
        self.store.append(
            {"t": "accept", "proposal": proposal.to_dict(), "deadline_ms": deadline}
        )

    def _install(self, entry: LogEntry) -> AppliedResult | None:
        """Idempotently commit one entry; returns the apply result if fresh."""
        if entry.key in self.log:
            pend = self.pending.get(entry.op.path)
            if pend and pend.proposal.key == entry.key:
                del self.pending[entry.op.path]
            return None
        self.log.append(entry)
        self.store.append({"t": "commit", "entry": entry.to_dict()})
        result = self.machine.apply(entry.op, entry.ts)
        pend = self.pending.get(entry.op.path)
        if pend and pend.proposal.ts <= entry.ts:
            del self.pending[entry.op.path]
        return result

    # -- message dispatch ----------------------------------------------------------

    def handle(self, msg: Message) -> list[Message]:
        if isinstance(msg, Propose):
            key = msg.proposal.key
            if key in self.log:
                # already committed here: re-ack a duplicate
                return [ProposeReply(self.replica_id, msg.src, key, True)]
            pend = self.pending.get(msg.proposal.op.path)
            if pend is not None and pend.proposal.key == key:
                # duplicate of the proposal we already accepted: re-ack
                return [ProposeReply(self.replica_id, msg.src, key, True)]
            error = self._acceptance_error(msg.proposal)
            if error is None:
                self._record_accept(msg.proposal)
                return [ProposeReply(self.replica_id, msg.src, key, True)]
            return [ProposeReply(self.replica_id, msg.src, key, False, error)]
        if isinstance(msg, ProposeReply):
            session = self.sessions.get(msg.key)
            if session is None or session.done or msg.src in session.accepts or msg.src in session.rejects:
                return []
            if msg.ok:
                session.accepts.add(msg.src)
                if session.has_majority():
                    return self._commit_session(session)
            else:
                session.rejects[msg.src] = msg.reason
                if session.cannot_win():
                    return self._abort_session(session, self._aggregate_reason(session))
            return []
        if isinstance(msg, Commit):
            self._install(msg.entry)
            return []
        if isinstance(msg, Abort):
            pend = self.pending.get(msg.key[0])
            if pend and pend.proposal.key == msg.key:
                del self.pending[msg.key[0]]
            return []
        if isinstance(msg, PullRequest):
            return [
                PullReply(self.replica_id, msg.src, tuple(self.log.entries))
            ]
        if isinstance(msg, PullReply):
            for entry in msg.entries:
                self._install(entry)
            return []
        raise TypeError(f"unknown message: {msg!r}")
