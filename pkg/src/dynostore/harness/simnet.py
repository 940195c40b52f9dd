"""Deterministic consensus simulator: replicas exchange messages only when
the schedule says so.

Two drivers share one single-threaded cluster model:

* ``explore`` walks every distinguishable schedule up to a depth bound
  (deliveries, plus optional drops and duplicates), deduplicating states by
  fingerprint so reorderings that lead to the same configuration are not
  re-expanded.
* ``random_schedules`` runs seeded random walks with the full fault
  alphabet -- drops, duplicates, crashes with recovery from the durable
  log, clock jumps past the pending TTL, and anti-entropy pulls.

Safety checks run after every event; schedule-end checks (convergence after
quiescence, read-after-write) run when a walk finishes. Which checks apply
depends on the fault alphabet: see ``checks`` for the tiers.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Callable

from ..consensus import (
    ConsensusReplica,
    MemoryLogStore,
    Message,
    Operation,
    PullReply,
    PullRequest,
    message_to_dict,
)
from ..domain import ObjectDescriptor, parse_path
from ..metadata import NamespaceTree
from ..util import ManualClock
from . import checks

Event = tuple


@dataclass(frozen=True)
class OpSpec:
    """One client operation the schedule may inject.

    ``payload_fn`` runs at submit time against the submitter's committed
    state, exactly like the service does (it is how compare-and-swap heads
    get captured).
    """

    submitter: str
    kind: str
    path: str
    payload_fn: Callable[[NamespaceTree], dict]


def _descriptor_payload(uuid: str, path: str) -> dict:
    return ObjectDescriptor(
        object_uuid=uuid,
        path=parse_path(path),
        size_bytes=1,
        object_hash=bytes(32),
        n=1,
        k=1,
        chunk_locations=((0, "sim-container"),),
        owner="sim",
        created_at_ms=0,
    ).to_dict()


def register_op(submitter: str, path: str, uuid: str) -> OpSpec:
    """A register with the CAS head captured from the submitter's view."""

    def payload(machine: NamespaceTree) -> dict:
        entry = machine.find_entry(parse_path(path))
        head = entry.head() if entry else None
        return {
            "descriptor": _descriptor_payload(uuid, path),
            "expected_head": head.descriptor.object_uuid if head else None,
        }

    return OpSpec(submitter, "register_object", path, payload)


def grant_op(submitter: str, scope: str, subject: str, mode: str = "read") -> OpSpec:
    def payload(machine: NamespaceTree) -> dict:
        return {
            "permission": {
                "subject": subject, "mode": mode, "scope": scope, "allow": True,
            }
        }

    return OpSpec(submitter, "grant", scope, payload)


DEFAULT_OPS = [
    register_op("r0", "sim/x", "uuid-a"),
    register_op("r1", "sim/x", "uuid-b"),
    register_op("r2", "sim/y", "uuid-c"),
]


class SimCluster:
    """N replicas, a message bag, and a manual clock. Single-threaded."""

    def __init__(
        self,
        op_specs: list[OpSpec],
        replica_count: int = 3,
        pending_ttl_ms: int = 3000,
        allow_drops: bool = False,
        max_dups: int = 0,
        allow_crashes: bool = False,
        raw_checks: bool | None = None,
    ):
        self.op_specs = op_specs
        self.replica_ids = [f"r{i}" for i in range(replica_count)]
        self.pending_ttl_ms = pending_ttl_ms
        self.allow_drops = allow_drops
        self.max_dups = max_dups
        self.allow_crashes = allow_crashes
        # read-after-write can only be demanded when nothing gets lost
        self.raw_checks = (
            raw_checks if raw_checks is not None
            else not (allow_drops or allow_crashes)
        )
        self.clock = ManualClock()
        self.stores = {rid: MemoryLogStore() for rid in self.replica_ids}
        self.replicas: dict[str, ConsensusReplica] = {}
        for rid in self.replica_ids:
            self._build_replica(rid)
        self.flight: list[Message] = []
        self.crashed: set[str] = set()
        self.submitted: set[int] = set()
        self.sessions: dict[int, object] = {}
        self.dups_used = 0
        self.violations: list[str] = []
        self._newest_ts: dict[tuple[str, str], tuple] = {}
        self._bootstrap()

    def _build_replica(self, rid: str) -> None:
        peers = tuple(r for r in self.replica_ids if r != rid)
        self.replicas[rid] = ConsensusReplica(
            rid, peers, NamespaceTree(), self.stores[rid], self.clock,
            self.pending_ttl_ms,
        )

    def _bootstrap(self) -> None:
        """Pre-commit the namespaces every op touches, FIFO-drained."""
        namespaces = sorted({
            parse_path(spec.path).namespace for spec in self.op_specs
        })
        first = self.replica_ids[0]
        for ns in namespaces:
            op = Operation(
                "create_namespace", parse_path(ns).render(), {"owner": "sim"}
            )
            _session, msgs = self.replicas[first].submit(op)
            queue = list(msgs)
            while queue:
                msg = queue.pop(0)
                queue.extend(self.replicas[msg.dst].handle(msg))

    # -- schedule alphabet ---------------------------------------------------------

    def enabled_events(self) -> list[Event]:
        events: list[Event] = []
        for i, spec in enumerate(self.op_specs):
            if i not in self.submitted and spec.submitter not in self.crashed:
                events.append(("submit", i))
        seen: set[str] = set()
        for idx, msg in enumerate(self.flight):
            rep = _msg_key(msg)
            if rep in seen:
                continue
            seen.add(rep)
            events.append(("deliver", idx))
            if self.allow_drops:
                events.append(("drop", idx))
            if self.dups_used < self.max_dups:
                events.append(("dup", idx))
        if self.allow_crashes:
            # keep a majority alive so schedules stay interesting
            can_crash = len(self.crashed) + 1 <= (len(self.replica_ids) - 1) // 2
            for rid in self.replica_ids:
                if rid not in self.crashed and can_crash:
                    events.append(("crash", rid))
                if rid in self.crashed:
                    events.append(("restart", rid))
            events.append(("tick",))
            for rid in self.replica_ids:
                if rid not in self.crashed:
                    events.append(("sync", rid))
        return events

    def step(self, event: Event) -> None:
        kind = event[0]
        if kind == "submit":
            self._submit(event[1])
        elif kind == "deliver":
            self._deliver(event[1])
        elif kind == "drop":
            self.flight.pop(event[1])
        elif kind == "dup":
            self.flight.append(self.flight[event[1]])
            self.dups_used += 1
        elif kind == "crash":
            self.crashed.add(event[1])
        elif kind == "restart":
            self._restart(event[1])
        elif kind == "tick":
            self.clock.advance(self.pending_ttl_ms + 1)
            for rid, replica in self.replicas.items():
                if rid not in self.crashed:
                    replica.prune_pending()
        elif kind == "sync":
            self._sync(event[1])
        else:
            raise ValueError(f"unknown event {event!r}")
        self._after_step()

    def _submit(self, op_idx: int) -> None:
        spec = self.op_specs[op_idx]
        replica = self.replicas[spec.submitter]
        # the service keys operations by the rendered path; do the same
        path = parse_path(spec.path).render()
        op = Operation(spec.kind, path, spec.payload_fn(replica.machine))
        session, msgs = replica.submit(op)
        self.submitted.add(op_idx)
        self.sessions[op_idx] = session
        self.flight.extend(msgs)

    def _deliver(self, idx: int) -> None:
        msg = self.flight.pop(idx)
        if msg.dst in self.crashed:
            return  # the packet arrived at a dead host
        out = self.replicas[msg.dst].handle(msg)
        self.flight.extend(out)

    def _restart(self, rid: str) -> None:
        """Recover from the durable log; volatile sessions are gone."""
        self.crashed.discard(rid)
        self._build_replica(rid)

    def _sync(self, rid: str) -> None:
        replica = self.replicas[rid]
        for peer in self.replica_ids:
            if peer == rid or peer in self.crashed:
                continue
            for reply in self.replicas[peer].handle(PullRequest(rid, peer)):
                if isinstance(reply, PullReply):
                    replica.handle(reply)

    # -- built-in per-step safety ------------------------------------------------------

    def _after_step(self) -> None:
        self.violations.extend(checks.check_agreement(self))
        self.violations.extend(checks.check_committed_only_reads(self))
        for rid in self.replica_ids:
            if rid in self.crashed:
                continue
            replica = self.replicas[rid]
            for path, ts in replica.log.committed_ts.items():
                key = (rid, path)
                prev = self._newest_ts.get(key)
                now = (ts.ms, ts.proposer)
                if prev is not None and now < prev:
                    self.violations.append(
                        f"{rid}: newest committed ts went backwards on {path}"
                    )
                self._newest_ts[key] = max(now, prev) if prev else now
        if self.raw_checks:
            self.violations.extend(checks.check_read_after_write(self))

    # -- end of schedule ------------------------------------------------------------

    def quiesce(self) -> None:
        """Make the network reliable again: revive, drain, anti-entropy."""
        for rid in sorted(self.crashed):
            self._restart(rid)
        guard = 0
        while self.flight:
            self._deliver(0)
            guard += 1
            if guard > 10_000:
                raise RuntimeError("message flood during quiesce")
        for rid in self.replica_ids:
            self._sync(rid)

    def is_terminal(self) -> bool:
        return not self.flight and len(self.submitted) == len(self.op_specs)

    # -- dedup ------------------------------------------------------------------------

    def fingerprint(self) -> tuple:
        reps = []
        for rid in self.replica_ids:
            replica = self.replicas[rid]
            reps.append((
                rid,
                rid in self.crashed,
                frozenset(e.key for e in replica.log.entries),
                tuple(sorted(
                    (p, ts.ms, ts.proposer)
                    for p, ts in replica.accepted_ts.items()
                )),
                tuple(sorted(
                    (p, pend.proposal.key, pend.deadline_ms)
                    for p, pend in replica.pending.items()
                )),
            ))
        flight = tuple(sorted(_msg_key(m) for m in self.flight))
        sessions = tuple(sorted(
            (i, s.state, tuple(sorted(s.accepts)), tuple(sorted(s.rejects)))
            for i, s in self.sessions.items()
        ))
        return (
            tuple(reps), flight, sessions,
            tuple(sorted(self.submitted)), self.dups_used, self.clock.now_ms(),
        )


def _msg_key(msg: Message) -> str:
    return json.dumps(message_to_dict(msg), sort_keys=True)


# --- exhaustive exploration -------------------------------------------------------------


@dataclass
class ExploreReport:
    states: int = 0
    schedules_completed: int = 0
    schedules_truncated: int = 0
    deepest: int = 0
    truncated_by_state_cap: bool = False
    violations: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "states": self.states,
            "schedules_completed": self.schedules_completed,
            "schedules_truncated": self.schedules_truncated,
            "deepest": self.deepest,
            "truncated_by_state_cap": self.truncated_by_state_cap,
            "violations": sorted(set(self.violations)),
        }


def _replay(
    op_specs: list[OpSpec], replica_count: int, events: tuple[Event, ...], **mode
) -> SimCluster:
    sim = SimCluster(op_specs, replica_count, **mode)
    for event in events:
        sim.step(event)
    return sim


def explore(
    op_specs: list[OpSpec] | None = None,
    replica_count: int = 3,
    max_events: int = 8,
    allow_drops: bool = False,
    max_dups: int = 0,
    max_states: int = 200_000,
) -> ExploreReport:
    """Walk every distinguishable schedule up to ``max_events`` events."""
    op_specs = DEFAULT_OPS if op_specs is None else op_specs
    mode = dict(allow_drops=allow_drops, max_dups=max_dups)
    report = ExploreReport()
    seen: set[tuple] = set()
    stack: list[tuple[Event, ...]] = [()]
    while stack:
        events = stack.pop()
        sim = _replay(op_specs, replica_count, events, **mode)
        fp = sim.fingerprint()
        if fp in seen:
            continue
        seen.add(fp)
        report.states += 1
        report.deepest = max(report.deepest, len(events))
        report.violations.extend(sim.violations)
        if report.states >= max_states:
            report.truncated_by_state_cap = True
            break
        enabled = sim.enabled_events() if len(events) < max_events else []
        if not enabled:
            end = _replay(op_specs, replica_count, events, **mode)
            end.quiesce()
            report.violations.extend(end.violations)
            report.violations.extend(checks.check_convergence(end))
            report.violations.extend(checks.check_majority_accepts(end))
            if end.raw_checks:
                report.violations.extend(checks.check_single_winner(end))
            if sim.is_terminal():
                report.schedules_completed += 1
            else:
                report.schedules_truncated += 1
            continue
        for event in enabled:
            stack.append(events + (event,))
    return report


# --- random schedules --------------------------------------------------------------------


@dataclass
class RandomRunReport:
    schedules: int = 0
    events: int = 0
    commits: int = 0
    aborts: int = 0
    crashes: int = 0
    violations: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schedules": self.schedules,
            "events": self.events,
            "commits": self.commits,
            "aborts": self.aborts,
            "crashes": self.crashes,
            "violations": sorted(set(self.violations)),
        }


def random_schedules(
    op_specs: list[OpSpec] | None = None,
    replica_count: int = 3,
    schedules: int = 10_000,
    events_per_schedule: int = 24,
    seed: int = 0,
    allow_drops: bool = True,
    max_dups: int = 2,
    allow_crashes: bool = True,
) -> RandomRunReport:
    """Seeded random walks over the full fault alphabet, checked throughout."""
    op_specs = DEFAULT_OPS if op_specs is None else op_specs
    rng = random.Random(seed)
    report = RandomRunReport()
    for _ in range(schedules):
        sim = SimCluster(
            op_specs,
            replica_count,
            allow_drops=allow_drops,
            max_dups=max_dups,
            allow_crashes=allow_crashes,
        )
        for _ in range(events_per_schedule):
            events = sim.enabled_events()
            if not events:
                break
            weights = [_event_weight(e) for e in events]
            event = rng.choices(events, weights=weights, k=1)[0]
            sim.step(event)
            report.events += 1
            if event[0] == "crash":
                report.crashes += 1
        sim.quiesce()
        report.violations.extend(sim.violations)
        report.violations.extend(checks.check_convergence(sim))
        report.violations.extend(checks.check_majority_accepts(sim))
        report.schedules += 1
        for session in sim.sessions.values():
            if session.state == "committed":
                report.commits += 1
            elif session.state == "aborted":
                report.aborts += 1
    return report


def _event_weight(event: Event) -> int:
    kind = event[0]
    if kind == "deliver":
        return 12
    if kind == "submit":
        return 6
    if kind in ("drop", "dup"):
        return 2
    if kind in ("crash", "restart", "sync"):
        return 1
    if kind == "tick":
        return 1
    return 1
