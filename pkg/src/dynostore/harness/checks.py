"""Consensus invariants, layered by what the fault model permits.

Always checked (any alphabet, after every event):
  * agreement          -- replicas never disagree about a committed key
  * committed-only     -- replica state machines reflect committed entries
                          and nothing else (no dirty reads, ever)
  * newest-ts monotone -- enforced inline by the simulator

Checked at end of schedule (after quiescence):
  * convergence        -- identical logs and machine snapshots everywhere
  * majority accepts   -- every commit is backed by durable accept records
                          on a majority (accepts survive crashes)

Only without drops, crashes, and clock jumps (the reliable tier):
  * read-after-write   -- a committed write is visible at its submitter
  * single CAS winner  -- one commit per (path, expected head) pair
"""

from __future__ import annotations

import json

from ..domain import parse_path


def _committed_by_key(sim) -> dict:
    by_key: dict[tuple, dict[str, dict]] = {}
    for rid in sim.replica_ids:
        for entry in sim.replicas[rid].log.entries:
            by_key.setdefault(entry.key, {})[rid] = entry.to_dict()
    return by_key


def check_agreement(sim) -> list[str]:
    """A key committed on two replicas must carry the identical entry."""
    out = []
    for key, versions in _committed_by_key(sim).items():
        rendered = {json.dumps(v, sort_keys=True) for v in versions.values()}
        if len(rendered) > 1:
            out.append(f"agreement: {key} differs across {sorted(versions)}")
    return out


def check_committed_only_reads(sim) -> list[str]:
    """Everything visible in a machine must come from that replica's log."""
    out = []
    for rid in sim.replica_ids:
        if rid in sim.crashed:
            continue
        replica = sim.replicas[rid]
        registered = {
            (parse_path(e.op.path).render(),
             e.op.payload["descriptor"]["object_uuid"])
            for e in replica.log.entries
            if e.op.kind == "register_object"
        }
        for path, descriptor in replica.machine.live_versions():
            if (path.render(), descriptor.object_uuid) not in registered:
                out.append(
                    f"dirty read: {rid} shows {descriptor.object_uuid} at "
                    f"{path.render()} with no commit behind it"
                )
        granted = {
            (parse_path(e.op.payload["permission"]["scope"]).render(),
             e.op.payload["permission"]["subject"])
            for e in replica.log.entries
            if e.op.kind == "grant"
        }
        for scope, subjects in replica.machine.grants.items():
            for subject in subjects:
                if (scope, subject) not in granted:
                    out.append(
                        f"dirty read: {rid} shows uncommitted grant "
                        f"{subject}@{scope}"
                    )
    return out


def check_majority_accepts(sim) -> list[str]:
    """No commit without durable accept records on a majority of replicas."""
    majority = len(sim.replica_ids) // 2 + 1
    accepts_by_key: dict[tuple, set[str]] = {}
    for rid in sim.replica_ids:
        _snap, records = sim.stores[rid].load()
        for record in records:
            if record["t"] != "accept":
                continue
            proposal = record["proposal"]
            key = (
                proposal["op"]["path"],
                int(proposal["ts"][0]),
                proposal["ts"][1],
            )
            accepts_by_key.setdefault(key, set()).add(rid)
    out = []
    for key in _committed_by_key(sim):
        backing = accepts_by_key.get(key, set())
        if len(backing) < majority:
            out.append(
                f"majority: {key} committed with accepts only on {sorted(backing)}"
            )
    return out


def check_convergence(sim) -> list[str]:
    """After quiescence plus anti-entropy everyone must be identical."""
    key_sets = {}
    snapshots = {}
    for rid in sim.replica_ids:
        replica = sim.replicas[rid]
        key_sets[rid] = frozenset(e.key for e in replica.log.entries)
        snapshots[rid] = json.dumps(replica.machine.to_snapshot(), sort_keys=True)
    out = []
    if len(set(key_sets.values())) > 1:
        sizes = {rid: len(s) for rid, s in key_sets.items()}
        out.append(f"convergence: log key sets differ ({sizes})")
    if len(set(snapshots.values())) > 1:
        out.append("convergence: machine snapshots differ")
    return out


def check_read_after_write(sim) -> list[str]:
    """A committed register is visible at its submitter immediately."""
    out = []
    for op_idx, session in sim.sessions.items():
        if session.state != "committed":
            continue
        op = session.proposal.op
        if op.kind != "register_object":
            continue
        spec = sim.op_specs[op_idx]
        if spec.submitter in sim.crashed:
            continue
        machine = sim.replicas[spec.submitter].machine
        entry = machine.find_entry(parse_path(op.path))
        uuid = op.payload["descriptor"]["object_uuid"]
        if entry is None or not any(
            v.descriptor.object_uuid == uuid for v in entry.versions
        ):
            out.append(
                f"read-after-write: {spec.submitter} committed {uuid} on "
                f"{op.path} but cannot see it"
            )
            continue
        head = entry.head()
        if head is not None and head.ts < session.proposal.ts:
            out.append(
                f"read-after-write: head on {op.path} at {spec.submitter} "
                f"is older than its own commit"
            )
    return out


def check_single_winner(sim) -> list[str]:
    """Compare-and-swap: one winner per (path, expected head) pair."""
    winners: dict[tuple, list[str]] = {}
    for session in sim.sessions.values():
        if session.state != "committed":
            continue
        op = session.proposal.op
        if op.kind != "register_object":
            continue
        slot = (op.path, op.payload.get("expected_head"))
        uuid = op.payload["descriptor"]["object_uuid"]
        winners.setdefault(slot, []).append(uuid)
    return [
        f"cas: {len(uuids)} commits for slot {slot}: {sorted(uuids)}"
        for slot, uuids in winners.items()
        if len(uuids) > 1
    ]
