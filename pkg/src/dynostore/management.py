"""Management plane: credentials, the container registry, health probing, and
the gateway that orchestrates uploads/downloads across the other services.

The gateway is the only component that touches everything: it authenticates
callers, plans placement from registry snapshots, moves chunk packages to and
from containers, and registers descriptors with the metadata service. Upload
is all-or-nothing: if any chunk write or the metadata commit fails, every
chunk already written is deleted again (deletes that cannot reach a dead
container are parked on a cleanup backlog and retried when it recovers).
"""

from __future__ import annotations

import hashlib
import hmac
import json
import logging
import os
import threading
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, replace
from itertools import combinations
from pathlib import Path
from typing import Callable, Iterable, Protocol

from . import erasure
from .auth import ADMIN, READ, TokenService, WRITE
from .domain import ContainerState, Mode, ObjectDescriptor, parse_path
from .errors import (
    BadCredentialsError,
    ContainerUnavailableError,
    ContainerWriteFailedError,
    DynoStoreError,
    HashMismatchError,
    InconsistentHeadersError,
    NotEnoughChunksError,
    NotFoundError,
    PermissionDeniedError,
    UnknownContainerError,
)
from .placement import (
    DEFAULT_WEIGHTS,
    UtilizationWeights,
    plan_resilience,
    select_n_containers,
)
from .util import Clock, SystemClock, new_id

logger = logging.getLogger(__name__)

DEFAULT_TARGET_LOSS = 0.001  # yearly object-loss budget when the caller gives none
DEFAULT_HEALTH_INTERVAL_S = 10.0
UNHEALTHY_AFTER = 3  # consecutive failed probes
FETCH_WINDOW_EXTRA = 2  # fetch k+2 chunks concurrently
RECOVERY_SUBSET_CAP = 200  # alternate k-subsets tried on hash mismatch


# --- credentials ------------------------------------------------------------------


class UserStore:
    """Local salted-hash credential store for the desk-scale deployment."""

    def __init__(self) -> None:
        self._users: dict[str, dict] = {}
        self._lock = threading.Lock()

    @staticmethod
    def _digest(salt: bytes, credential: str) -> str:
        return hashlib.sha3_256(salt + credential.encode("utf-8")).hexdigest()

    def add_user(self, name: str, credential: str, admin: bool = False) -> None:
        salt = os.urandom(16)
        with self._lock:
            self._users[name] = {
                "salt": salt.hex(),
                "hash": self._digest(salt, credential),
                "admin": admin,
            }

    def verify(self, name: str, credential: str) -> bool:
        with self._lock:
            record = self._users.get(name)
        if record is None:
            return False
        expected = record["hash"]
        actual = self._digest(bytes.fromhex(record["salt"]), credential)
        return hmac.compare_digest(expected, actual)

    def is_admin(self, name: str) -> bool:
        with self._lock:
            record = self._users.get(name)
        return bool(record and record["admin"])

    def to_file(self, path: str | Path) -> None:
        with self._lock:
            payload = json.dumps(self._users, indent=2, sort_keys=True)
        Path(path).write_text(payload, encoding="utf-8")

    @classmethod
    def from_file(cls, path: str | Path) -> "UserStore":
        store = cls()
        store._users = json.loads(Path(path).read_text(encoding="utf-8"))
        return store


# --- container registry -----------------------------------------------------------


@dataclass
class RegistryEntry:
    state: ContainerState
    consecutive_failures: int = 0
    registered_at_ms: int = 0


class Registry:
    """Authoritative list of known containers and their last-seen state."""

    def __init__(self, clock: Clock | None = None):
        self.clock = clock or SystemClock()
        self._entries: dict[str, RegistryEntry] = {}
        self._lock = threading.Lock()

    def register(self, state: ContainerState) -> None:
        with self._lock:
            self._entries[state.container_id] = RegistryEntry(
                state=replace(state, healthy=True, last_probe_ms=self.clock.now_ms()),
                registered_at_ms=self.clock.now_ms(),
            )

    def deregister(self, container_id: str) -> None:
        with self._lock:
            if container_id not in self._entries:
                raise UnknownContainerError(f"no container {container_id}")
            del self._entries[container_id]

    def get(self, container_id: str) -> ContainerState:
        with self._lock:
            entry = self._entries.get(container_id)
        if entry is None:
            raise UnknownContainerError(f"no container {container_id}")
        return entry.state

    def endpoint_of(self, container_id: str) -> str:
        return self.get(container_id).endpoint

    def snapshot(self) -> list[ContainerState]:
        with self._lock:
            return sorted(
                (e.state for e in self._entries.values()),
                key=lambda s: s.container_id,
            )

    def charge(self, container_id: str, nbytes: int) -> None:
        """Debit filesystem space immediately so back-to-back placements see
        fresh numbers before the next health probe refreshes the truth."""
        with self._lock:
            entry = self._entries.get(container_id)
            if entry is None:
                return
            entry.state = replace(
                entry.state,
                fs_available_bytes=max(0, entry.state.fs_available_bytes - nbytes),
            )

    def probe_success(self, container_id: str, state: ContainerState) -> None:
        with self._lock:
            entry = self._entries.get(container_id)
            if entry is None:
                return
            entry.consecutive_failures = 0
            entry.state = replace(
                state,
                endpoint=entry.state.endpoint or state.endpoint,
                healthy=True,
                last_probe_ms=self.clock.now_ms(),
            )

    def probe_failure(self, container_id: str) -> None:
        with self._lock:
            entry = self._entries.get(container_id)
            if entry is None:
                return
            entry.consecutive_failures += 1
            if entry.consecutive_failures >= UNHEALTHY_AFTER and entry.state.healthy:
                logger.warning("container %s marked unhealthy", container_id)
                entry.state = replace(entry.state, healthy=False)


# --- transports the gateway consumes ------------------------------------------------


class ContainerClient(Protocol):
    """How the gateway talks to one container."""

    def put_chunk(self, chunk_id: str, blob: bytes, token: str) -> None: ...
    def get_chunk(self, chunk_id: str, token: str) -> bytes: ...
    def delete_chunk(self, chunk_id: str, token: str) -> None: ...
    def status(self) -> ContainerState: ...
    def list_chunks(self, token: str) -> list[str]: ...


class MetadataClient(Protocol):
    """How the gateway talks to the metadata service."""

    def create_namespace(self, name: str, token: str) -> None: ...
    def create_collection(self, path: str, token: str) -> None: ...
    def register_object(
        self, descriptor: ObjectDescriptor, token: str
    ) -> tuple[ObjectDescriptor, int]: ...
    def resolve(
        self, path: str, token: str, version: int | None = None
    ) -> tuple[ObjectDescriptor, int]: ...
    def exists(self, path: str, token: str) -> bool: ...
    def check(self, path: str, subject: str, mode: Mode, token: str) -> bool: ...
    def evict(self, path: str, token: str) -> list[dict]: ...
    def garbage_collect(self, token: str, now_ms: int | None = None) -> list[dict]: ...
    def live_versions(self, token: str) -> list[tuple[str, ObjectDescriptor]]: ...


# --- health -----------------------------------------------------------------------


class HealthChecker:
    """Round-robin status probes; 3 strikes out, any success back in."""

    def __init__(
        self,
        registry: Registry,
        client_for: Callable[[str], ContainerClient],
        interval_s: float = DEFAULT_HEALTH_INTERVAL_S,
        on_pass: Callable[[], None] | None = None,
    ):
        self.registry = registry
        self.client_for = client_for
        self.interval_s = interval_s
        self.on_pass = on_pass
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def probe_once(self) -> None:
        for state in self.registry.snapshot():
            cid = state.container_id
            try:
                fresh = self.client_for(cid).status()
                if fresh.container_id != cid:
                    raise DynoStoreError(
                        f"endpoint answered as {fresh.container_id}, expected {cid}"
                    )
                self.registry.probe_success(cid, fresh)
            except Exception as exc:
                logger.debug("probe of %s failed: %s", cid, exc)
                self.registry.probe_failure(cid)
        if self.on_pass is not None:
            try:
                self.on_pass()
            except Exception:
                logger.exception("post-probe hook failed")

    def start(self) -> None:
        if self._thread is not None:
            return

        def loop() -> None:
            while not self._stop.wait(self.interval_s):
                try:
                    self.probe_once()
                except Exception:
                    logger.exception("health probe pass failed")

        self._thread = threading.Thread(target=loop, name="health", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2)
            self._thread = None


# --- gateway -----------------------------------------------------------------------


class Gateway:
    """Front door: auth, placement, chunk movement, metadata registration."""

    def __init__(
        self,
        registry: Registry,
        metadata: MetadataClient,
        tokens: TokenService,
        users: UserStore,
        container_client_for: Callable[[str], ContainerClient],
        clock: Clock | None = None,
        weights: UtilizationWeights = DEFAULT_WEIGHTS,
        max_workers: int = 16,
        health_interval_s: float = DEFAULT_HEALTH_INTERVAL_S,
    ):
        self.registry = registry
        self.metadata = metadata
        self.tokens = tokens
        self.users = users
        self.client_for = container_client_for
        self.clock = clock or SystemClock()
        self.weights = weights
        self._pool = ThreadPoolExecutor(max_workers=max_workers)
        self._backlog: list[tuple[str, str]] = []  # (container_id, chunk_id)
        self._backlog_lock = threading.Lock()
        self.health = HealthChecker(
            registry,
            container_client_for,
            interval_s=health_interval_s,
            on_pass=self.process_cleanup_backlog,
        )

    # -- auth -------------------------------------------------------------------

    def authenticate(self, user: str, credential: str) -> str:
        """Exchange credentials for a signed bearer token."""
        if not self.users.verify(user, credential):
            raise BadCredentialsError(f"bad credentials for {user!r}")
        scopes: tuple[str, ...] = (READ, WRITE)
        if self.users.is_admin(user):
            scopes = (READ, WRITE, ADMIN)
        return self.tokens.issue(user, scopes)

    def _service_token(self) -> str:
        return self.tokens.issue("gateway", (READ, WRITE, ADMIN), ttl_ms=300_000)

    # -- registry management -------------------------------------------------------

    def register_container(self, state: ContainerState, token: str) -> None:
        self.tokens.verify(token).require(ADMIN)
        self.registry.register(state)
        logger.info("registered container %s at %s", state.container_id, state.endpoint)

    def deregister_container(self, container_id: str, token: str) -> None:
        self.tokens.verify(token).require(ADMIN)
        self.registry.deregister(container_id)

    def list_containers(self, token: str) -> list[ContainerState]:
        self.tokens.verify(token).require(READ)
        return self.registry.snapshot()

    # -- the data path ---------------------------------------------------------------

    def upload(
        self,
        path_str: str,
        data: bytes,
        token: str,
        mode: str = "regular",
        n: int | None = None,
        k: int | None = None,
        target_loss: float | None = None,
    ) -> tuple[ObjectDescriptor, int]:
        """Disperse, store, and register one object; returns (descriptor, version).

        All-or-nothing: on any failure every already-written chunk is removed
        (or backlogged for removal) and the error is re-raised.
        """
        claims = self.tokens.verify(token)
        claims.require(WRITE)
        path = parse_path(path_str)
        if not self.metadata.check(path.render(), claims.subject, Mode.WRITE, token):
            raise PermissionDeniedError(
                f"{claims.subject!r} may not write {path.render()}"
            )
        snapshot = self.registry.snapshot()
        if mode == "regular" and n is None and k is None:
            n_eff, k_eff = 1, 1
            targets = select_n_containers(snapshot, 1, len(data), self.weights)
        elif n is not None or k is not None:
            if n is None or k is None:
                raise DynoStoreError("give both n and k, or neither")
            erasure.check_params(n, k)
            n_eff, k_eff = n, k
            targets = select_n_containers(snapshot, n, len(data), self.weights, k=k)
        else:
            plan = plan_resilience(
                snapshot, len(data), target_loss or DEFAULT_TARGET_LOSS, self.weights
            )
            if not plan.feasible:
                logger.warning(
                    "no shape meets loss %.2g; storing best effort (n=%d,k=%d)",
                    target_loss or DEFAULT_TARGET_LOSS, plan.n, plan.k,
                )
            n_eff, k_eff = plan.n, plan.k
            targets = list(plan.targets)
        object_uuid = new_id()
        packages = erasure.encode(data, n_eff, k_eff, targets, object_uuid=object_uuid)
        service_token = self._service_token()
        written: list[tuple[str, str]] = []  # (container_id, chunk_id)
        blobs = {pkg.chunk_id: erasure.pack(pkg) for pkg, _ in packages}

        def put_one(pkg: erasure.ChunkPackage, cid: str) -> tuple[str, str]:
            self.client_for(cid).put_chunk(pkg.chunk_id, blobs[pkg.chunk_id], service_token)
            return cid, pkg.chunk_id

        futures = [self._pool.submit(put_one, pkg, cid) for pkg, cid in packages]
        first_error: Exception | None = None
        for fut in futures:
            try:
                written.append(fut.result())
            except Exception as exc:
                if first_error is None:
                    first_error = exc
        if first_error is not None:
            self._discard_chunks(written, service_token)
            raise ContainerWriteFailedError(
                f"chunk write failed: {first_error}"
            ) from first_error
        for cid, chunk_id in written:
            self.registry.charge(cid, len(blobs[chunk_id]))
        descriptor = ObjectDescriptor(
            object_uuid=object_uuid,
            path=path,
            size_bytes=len(data),
            object_hash=packages[0][0].object_hash,
            n=n_eff,
            k=k_eff,
            chunk_locations=tuple((pkg.chunk_index, cid) for pkg, cid in packages),
            owner=claims.subject,
            created_at_ms=self.clock.now_ms(),
        )
        try:
            _, version = self.metadata.register_object(descriptor, token)
        except Exception:
            self._discard_chunks(written, service_token)
            raise
        return descriptor, version

    def download(self, path_str: str, token: str, version: int | None = None) -> bytes:
        """Resolve, fetch any k chunks (k+2 in flight), decode, verify."""
        descriptor, _ = self.metadata.resolve(path_str, token, version)
        service_token = self._service_token()
        fetched = self._fetch_chunks(descriptor, descriptor.k, service_token)
        try:
            return erasure.decode(list(fetched.values()), k=descriptor.k)
        except (HashMismatchError, InconsistentHeadersError):
            logger.warning(
                "integrity failure on %s; retrying with alternate chunk subsets",
                path_str,
            )
            return self._decode_any_subset(descriptor, fetched, service_token)

    def object_exists(self, path_str: str, token: str) -> bool:
        return self.metadata.exists(path_str, token)

    def plan(self, size: int, token: str, target_loss: float | None = None):
        """Dry-run the resilience planner against the current registry."""
        self.tokens.verify(token).require(READ)
        return plan_resilience(
            self.registry.snapshot(), size, target_loss or DEFAULT_TARGET_LOSS, self.weights
        )

    def evict(self, path_str: str, token: str) -> dict:
        """Drop the object (all versions) and delete its chunks."""
        versions = self.metadata.evict(path_str, token)
        service_token = self._service_token()
        deleted = missing = 0
        for version in versions:
            chunks = [
                (cid, f"{version['object_uuid']}.{idx}")
                for idx, cid in version["chunk_locations"]
            ]
            ok, failed = self._delete_chunks(chunks, service_token)
            deleted += ok
            missing += failed
        return {"versions": len(versions), "chunks_deleted": deleted, "chunks_backlogged": missing}

    def run_gc(self, token: str | None = None, now_ms: int | None = None) -> list[dict]:
        """Purge expired versions from metadata, then delete their chunks."""
        gc_token = token or self._service_token()
        purged = self.metadata.garbage_collect(gc_token, now_ms)
        service_token = self._service_token()
        for item in purged:
            chunks = [
                (cid, f"{item['object_uuid']}.{idx}")
                for idx, cid in item["chunk_locations"]
            ]
            self._delete_chunks(chunks, service_token)
        return purged

    # -- chunk IO helpers -------------------------------------------------------------

    def _fetch_chunks(
        self, descriptor: ObjectDescriptor, want: int, token: str
    ) -> dict[int, erasure.ChunkPackage]:
        """Fetch ``want`` verifiable chunks, keeping want+2 requests in flight.

        Unreachable containers, missing chunks, and chunks that fail to parse
        or that describe a different object all just burn one candidate.
        """
        states = {s.container_id: s for s in self.registry.snapshot()}

        def rank(loc: tuple[int, str]) -> tuple[int, int]:
            idx, cid = loc
            state = states.get(cid)
            healthy = state.healthy if state is not None else False
            return (0 if healthy else 1, idx)

        queue = sorted(descriptor.chunk_locations, key=rank)
        results: dict[int, erasure.ChunkPackage] = {}
        inflight: dict = {}
        damaged = 0

        def fetch_one(idx: int, cid: str) -> erasure.ChunkPackage:
            blob = self.client_for(cid).get_chunk(
                f"{descriptor.object_uuid}.{idx}", token
            )
            pkg = erasure.unpack(blob)
            if (
                pkg.object_uuid != descriptor.object_uuid
                or pkg.chunk_index != idx
                or pkg.object_hash != descriptor.object_hash
            ):
                raise HashMismatchError(f"chunk {idx} does not match its descriptor")
            return pkg

        window = want + FETCH_WINDOW_EXTRA
        while len(results) < want and (queue or inflight):
            while queue and len(inflight) < window:
                idx, cid = queue.pop(0)
                inflight[self._pool.submit(fetch_one, idx, cid)] = idx
            done, _ = wait(list(inflight), return_when=FIRST_COMPLETED)
            for fut in done:
                idx = inflight.pop(fut)
                try:
                    results[idx] = fut.result()
                except (ContainerUnavailableError, NotFoundError) as exc:
                    logger.debug("chunk %d unreachable: %s", idx, exc)
                except Exception as exc:
                    # the blob came back but would not parse or verify: the
                    # chunk exists and is damaged, which is an integrity
                    # problem, not an availability problem
                    damaged += 1
                    logger.debug("chunk %d damaged: %s", idx, exc)
        if len(results) < want:
            if damaged:
                raise HashMismatchError("The hashes are different.")
            raise NotEnoughChunksError("Not enough chunks.")
        return results

    def _decode_any_subset(
        self,
        descriptor: ObjectDescriptor,
        fetched: dict[int, erasure.ChunkPackage],
        token: str,
    ) -> bytes:
        """A chunk is lying (payload corrupt, header intact): fetch everything
        still reachable and try other k-subsets until one checks out."""
        for idx, cid in descriptor.chunk_locations:
            if idx in fetched:
                continue
            try:
                blob = self.client_for(cid).get_chunk(
                    f"{descriptor.object_uuid}.{idx}", token
                )
                pkg = erasure.unpack(blob)
                if (
                    pkg.object_uuid == descriptor.object_uuid
                    and pkg.chunk_index == idx
                    and pkg.object_hash == descriptor.object_hash
                ):
                    fetched[idx] = pkg
            except Exception:
                continue
        pool = list(fetched.values())
        tried = 0
        integrity_failed = False
        for subset in combinations(pool, descriptor.k):
            if tried >= RECOVERY_SUBSET_CAP:
                break
            tried += 1
            try:
                return erasure.decode(list(subset), k=descriptor.k)
            except (HashMismatchError, InconsistentHeadersError):
                integrity_failed = True
        if integrity_failed:
            raise HashMismatchError("The hashes are different.")
        raise NotEnoughChunksError("Not enough chunks.")

    def _delete_chunks(
        self, chunks: Iterable[tuple[str, str]], token: str
    ) -> tuple[int, int]:
        """Best-effort deletes; unreachable holders go on the cleanup backlog."""
        ok = failed = 0
        for cid, chunk_id in chunks:
            try:
                self.client_for(cid).delete_chunk(chunk_id, token)
                ok += 1
            except Exception as exc:
                logger.debug("delete %s on %s failed: %s", chunk_id, cid, exc)
                failed += 1
                with self._backlog_lock:
                    self._backlog.append((cid, chunk_id))
        return ok, failed

    def _discard_chunks(self, written: list[tuple[str, str]], token: str) -> None:
        if written:
            self._delete_chunks(written, token)

    def process_cleanup_backlog(self) -> int:
        """Retry parked deletes; returns how many are still stuck."""
        with self._backlog_lock:
            pending, self._backlog = self._backlog, []
        token = self._service_token()
        for cid, chunk_id in pending:
            try:
                self.client_for(cid).delete_chunk(chunk_id, token)
            except Exception:
                with self._backlog_lock:
                    self._backlog.append((cid, chunk_id))
        with self._backlog_lock:
            return len(self._backlog)

    @property
    def backlog_size(self) -> int:
        with self._backlog_lock:
            return len(self._backlog)

    def start_background(self) -> None:
        self.health.start()

    def stop(self) -> None:
        self.health.stop()
        self._pool.shutdown(wait=False)
