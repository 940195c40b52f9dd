"""One-process cluster: N containers, M metadata replicas, one gateway.

The moving parts are the production classes; the transports are direct
method calls guarded by kill switches. Killing a component makes it
unreachable (every call raises), it does not destroy durable state:
containers keep their backend but lose their cache, metadata replicas keep
their log store and are rebuilt from it on restart.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

from ..auth import ADMIN, READ, TokenService, WRITE
from ..client import ClientConfig, DynoStoreClient
from ..consensus import LogStore, MemoryLogStore, Message
from ..container import ContainerConfig, ContainerNode
from ..domain import ContainerState, Mode, ObjectDescriptor, Permission
from ..errors import ContainerUnavailableError
from ..management import Gateway, Registry, UserStore
from ..metadata import MetadataService
from ..util import Clock, ManualClock

DEFAULT_SECRET = "local-cluster"
DEFAULT_FS_BYTES = 256 * 1024 * 1024
DEFAULT_MEM_BYTES = 64 * 1024 * 1024


def spread_failure_rates(count: int, low: float = 0.01, high: float = 0.25) -> list[float]:
    """Heterogeneous yearly failure rates, spread evenly from low to high."""
    if count == 1:
        return [low]
    step = (high - low) / (count - 1)
    return [low + i * step for i in range(count)]


@dataclass
class ContainerSpec:
    fs_capacity_bytes: int = DEFAULT_FS_BYTES
    mem_budget_bytes: int = DEFAULT_MEM_BYTES
    annual_failure_rate: float = 0.0

    @classmethod
    def from_dict(cls, raw: dict) -> "ContainerSpec":
        return cls(
            fs_capacity_bytes=int(raw.get("fs_capacity_bytes", DEFAULT_FS_BYTES)),
            mem_budget_bytes=int(raw.get("mem_budget_bytes", DEFAULT_MEM_BYTES)),
            annual_failure_rate=float(raw.get("annual_failure_rate", 0.0)),
        )


class DirectContainerClient:
    """In-process container transport with a kill switch."""

    def __init__(self, node: ContainerNode):
        self.node = node
        self.alive = True
        self.calls = 0

    def _check(self) -> None:
        if not self.alive:
            raise ContainerUnavailableError(
                f"container {self.node.container_id} is down"
            )
        self.calls += 1

    def put_chunk(self, chunk_id: str, blob: bytes, token: str) -> None:
        self._check()
        self.node.put_chunk(chunk_id, blob, token)

    def get_chunk(self, chunk_id: str, token: str) -> bytes:
        self._check()
        return self.node.get_chunk(chunk_id, token)

    def delete_chunk(self, chunk_id: str, token: str) -> None:
        self._check()
        self.node.delete_chunk(chunk_id, token)

    def has_chunk(self, chunk_id: str, token: str) -> bool:
        self._check()
        return self.node.has_chunk(chunk_id, token)

    def status(self) -> ContainerState:
        self._check()
        return self.node.status()

    def list_chunks(self, token: str) -> list[str]:
        self._check()
        return self.node.list_chunks(token)


class LoopbackPeerTransport:
    """Delivers consensus messages between co-resident metadata replicas."""

    def __init__(self, cluster: "LocalCluster", src: str):
        self.cluster = cluster
        self.src = src

    def send(self, msg: Message) -> Message | None:
        if self.src in self.cluster.metadata_down:
            raise ContainerUnavailableError(f"replica {self.src} is down")
        if msg.dst in self.cluster.metadata_down:
            raise ContainerUnavailableError(f"replica {msg.dst} is down")
        peer = self.cluster.metadata.get(msg.dst)
        if peer is None:
            raise ContainerUnavailableError(f"no replica {msg.dst}")
        return peer.handle_peer(msg)


class DirectMetadataClient:
    """Client-side metadata view with the same failover the HTTP client has:
    use the first reachable replica, surface service errors as-is."""

    def __init__(self, cluster: "LocalCluster"):
        self.cluster = cluster

    def _pick(self) -> MetadataService:
        for rid in sorted(self.cluster.metadata):
            if rid not in self.cluster.metadata_down:
                return self.cluster.metadata[rid]
        raise ContainerUnavailableError("every metadata replica is down")

    def create_namespace(self, name: str, token: str) -> None:
        self._pick().create_namespace(name, token)

    def create_collection(self, path: str, token: str) -> None:
        self._pick().create_collection(path, token)

    def register_object(self, descriptor: ObjectDescriptor, token: str):
        return self._pick().register_object(descriptor, token)

    def resolve(self, path: str, token: str, version: int | None = None):
        return self._pick().resolve(path, token, version)

    def exists(self, path: str, token: str) -> bool:
        return self._pick().exists(path, token)

    def list_path(self, path: str, token: str) -> dict:
        return self._pick().list_path(path, token)

    def grant(self, permission: Permission, token: str) -> None:
        self._pick().grant(permission, token)

    def check(self, path: str, subject: str, mode: Mode, token: str) -> bool:
        return self._pick().check(path, subject, mode, token)

    def set_retention(self, path: str, days: int, token: str) -> None:
        self._pick().set_retention(path, days, token)

    def evict(self, path: str, token: str) -> list[dict]:
        return self._pick().evict(path, token)

    def garbage_collect(self, token: str, now_ms: int | None = None) -> list[dict]:
        return self._pick().garbage_collect(token, now_ms)

    def live_versions(self, token: str):
        return self._pick().live_versions(token)


class DirectGatewayClient:
    """Adapts an in-process Gateway to the client library's surface."""

    def __init__(self, gateway: Gateway):
        self.gateway = gateway

    def authenticate(self, user: str, credential: str) -> str:
        return self.gateway.authenticate(user, credential)

    def put_object(self, path, data, token, mode="regular", n=None, k=None,
                   target_loss=None):
        return self.gateway.upload(
            path, data, token, mode=mode, n=n, k=k, target_loss=target_loss
        )

    def get_object(self, path, token, version=None):
        return self.gateway.download(path, token, version)

    def object_exists(self, path, token):
        return self.gateway.object_exists(path, token)

    def evict(self, path, token):
        return self.gateway.evict(path, token)

    def create_namespace(self, name, token):
        self.gateway.metadata.create_namespace(name, token)

    def create_collection(self, path, token):
        self.gateway.metadata.create_collection(path, token)

    def grant(self, permission, token):
        self.gateway.metadata.grant(permission, token)

    def set_retention(self, path, days, token):
        self.gateway.metadata.set_retention(path, days, token)

    def list_path(self, path, token):
        return self.gateway.metadata.list_path(path, token)

    def list_containers(self, token):
        return self.gateway.list_containers(token)

    def plan(self, size, token, target_loss=None):
        return self.gateway.plan(size, token, target_loss).to_dict()

    def run_gc(self, token, now_ms=None):
        return self.gateway.run_gc(token, now_ms)


@dataclass
class SweepResult:
    """Cross-check of stored chunks against metadata's live versions."""

    orphans: dict[str, list[str]] = field(default_factory=dict)  # cid -> chunk ids
    missing: dict[str, list[str]] = field(default_factory=dict)

    @property
    def orphan_count(self) -> int:
        return sum(len(v) for v in self.orphans.values())

    @property
    def missing_count(self) -> int:
        return sum(len(v) for v in self.missing.values())


class LocalCluster:
    """The whole deployment in one process, on one manual clock."""

    def __init__(
        self,
        n_containers: int = 10,
        metadata_replicas: int = 1,
        container_specs: list[ContainerSpec] | None = None,
        clock: Clock | None = None,
        secret: str = DEFAULT_SECRET,
        pending_ttl_ms: int = 3000,
        health_interval_s: float = 10.0,
    ):
        self.clock = clock if clock is not None else ManualClock()
        self.tokens = TokenService(secret, clock=self.clock)
        if container_specs is None:
            rates = spread_failure_rates(n_containers)
            container_specs = [
                ContainerSpec(annual_failure_rate=r) for r in rates
            ]
        self.nodes: dict[str, ContainerNode] = {}
        self.container_clients: dict[str, DirectContainerClient] = {}
        self._container_order: list[str] = []
        for i, spec in enumerate(container_specs):
            config = ContainerConfig(
                name=f"container-{i:02d}",
                container_id=f"container-{i:02d}",
                fs_capacity_bytes=spec.fs_capacity_bytes,
                mem_budget_bytes=spec.mem_budget_bytes,
                annual_failure_rate=spec.annual_failure_rate,
                endpoint=f"local://container-{i:02d}",
            )
            node = ContainerNode(config, self.tokens, clock=self.clock)
            self.nodes[node.container_id] = node
            self.container_clients[node.container_id] = DirectContainerClient(node)
            self._container_order.append(node.container_id)

        self.metadata: dict[str, MetadataService] = {}
        self.metadata_stores: dict[str, LogStore] = {}
        self.metadata_down: set[str] = set()
        replica_ids = [f"meta-{i}" for i in range(metadata_replicas)]
        for rid in replica_ids:
            store = MemoryLogStore()
            self.metadata_stores[rid] = store
            self.metadata[rid] = MetadataService(
                rid,
                tuple(r for r in replica_ids if r != rid),
                store,
                self.clock,
                self.tokens,
                transport=LoopbackPeerTransport(self, rid),
                pending_ttl_ms=pending_ttl_ms,
            )

        self.registry = Registry(clock=self.clock)
        self.users = UserStore()
        self.users.add_user("admin", "admin-credential", admin=True)
        self.users.add_user("alice", "alice-credential")
        self.users.add_user("bob", "bob-credential")
        self.gateway = Gateway(
            self.registry,
            DirectMetadataClient(self),
            self.tokens,
            self.users,
            lambda cid: self.container_clients[cid],
            clock=self.clock,
            health_interval_s=health_interval_s,
        )
        admin_token = self.gateway.authenticate("admin", "admin-credential")
        for node in self.nodes.values():
            self.gateway.register_container(node.status(), admin_token)
        self._lock = threading.Lock()

    # -- identities -------------------------------------------------------------

    def container_ids(self) -> list[str]:
        """Container ids in creation order (container-00, 01, ...)."""
        return list(self._container_order)

    def client(self, user: str, credential: str | None = None,
               encryption_key: bytes | str | None = None) -> DynoStoreClient:
        return DynoStoreClient(
            DirectGatewayClient(self.gateway),
            ClientConfig(
                user=user,
                credential=credential or f"{user}-credential",
                encryption_key=encryption_key,
            ),
        )

    def service_token(self) -> str:
        return self.tokens.issue("cluster", (READ, WRITE, ADMIN))

    # -- fault injection -----------------------------------------------------------

    def kill_container(self, container_id: str) -> None:
        self.container_clients[container_id].alive = False

    def restart_container(self, container_id: str) -> None:
        """Back up with a cold cache; stored chunks survive."""
        self.nodes[container_id].restart()
        self.container_clients[container_id].alive = True

    def kill_metadata(self, replica_id: str) -> None:
        self.metadata_down.add(replica_id)

    def restart_metadata(self, replica_id: str) -> None:
        """Rebuild the replica from its durable log, then let it catch up."""
        old = self.metadata[replica_id]
        old.stop()
        peers = old.replica.peer_ids
        self.metadata[replica_id] = MetadataService(
            replica_id,
            peers,
            self.metadata_stores[replica_id],
            self.clock,
            self.tokens,
            transport=LoopbackPeerTransport(self, replica_id),
            pending_ttl_ms=old.replica.pending_ttl_ms,
        )
        self.metadata_down.discard(replica_id)
        self.metadata[replica_id].sync_once()

    def probe(self) -> None:
        self.gateway.health.probe_once()

    def sync_metadata(self) -> None:
        for rid, svc in self.metadata.items():
            if rid not in self.metadata_down:
                svc.sync_once()

    # -- inspection ------------------------------------------------------------------

    def chunk_census(self, include_down: bool = True) -> dict[str, list[str]]:
        """What is actually stored, straight off every backend."""
        token = self.service_token()
        census = {}
        for cid, node in self.nodes.items():
            if not include_down and not self.container_clients[cid].alive:
                continue
            census[cid] = sorted(node.list_chunks(token))
        return census

    def stored_bytes(self) -> dict[str, int]:
        """Total stored payload per container, straight off the backend."""
        token = self.service_token()
        out = {}
        for cid, node in self.nodes.items():
            out[cid] = sum(
                len(node.get_chunk(chunk_id, token))
                for chunk_id in node.list_chunks(token)
            )
        return out

    def sweep_orphans(self) -> SweepResult:
        """Compare on-disk chunks against every live version's expectations."""
        token = self.service_token()
        expected: dict[str, set[str]] = {cid: set() for cid in self.nodes}
        meta = DirectMetadataClient(self)
        for _path, descriptor in meta.live_versions(token):
            for idx, cid in descriptor.chunk_locations:
                expected.setdefault(cid, set()).add(
                    f"{descriptor.object_uuid}.{idx}"
                )
        result = SweepResult()
        census = self.chunk_census()
        for cid, actual_list in census.items():
            actual = set(actual_list)
            exp = expected.get(cid, set())
            orphans = sorted(actual - exp)
            if orphans:
                result.orphans[cid] = orphans
            alive = self.container_clients[cid].alive
            gone = sorted(exp - actual) if alive else []
            if gone:
                result.missing[cid] = gone
        return result

    def stop(self) -> None:
        for svc in self.metadata.values():
            svc.stop()
        self.gateway.stop()
