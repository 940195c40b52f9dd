"""HTTP layer: servers, clients, error mapping, replica failover, latency."""

import time

import pytest

from dynostore.auth import TokenService
from dynostore.consensus import MemoryLogStore
from dynostore.container import ContainerConfig, ContainerNode
from dynostore.errors import (
    BadCredentialsError,
    ContainerUnavailableError,
    DynoStoreError,
    InvalidParamsError,
    NotFoundError,
    PermissionDeniedError,
    UnauthorizedError,
)
from dynostore.management import Gateway, Registry, UserStore
from dynostore.metadata import MetadataService
from dynostore.util import ManualClock
from dynostore.wire import (
    HttpContainerClient,
    HttpGatewayClient,
    HttpMetadataClient,
    HttpPeerTransport,
    start_container_server,
    start_gateway_server,
    start_metadata_server,
)

SECRET = b"wire-test-secret"


def _tokens(clock):
    return TokenService(SECRET, clock)


# --- container server ---------------------------------------------------------------


@pytest.fixture
def container_rig(tmp_path):
    handles = []

    def make(latency_ms=0):
        clock = ManualClock(1_000_000)
        tokens = _tokens(clock)
        node = ContainerNode(
            ContainerConfig(
                name="wire-test",
                fs_capacity_bytes=8 * 1024 * 1024,
                mem_budget_bytes=1024 * 1024,
                container_id="wire-c0",
                storage_dir=str(tmp_path / f"c{len(handles)}"),
            ),
            tokens,
            clock=clock,
        )
        handle = start_container_server(node, latency_ms=latency_ms)
        handles.append(handle)
        return HttpContainerClient(handle.url), tokens.issue("tester"), handle

    yield make
    for h in handles:
        h.stop()


def test_container_chunk_crud_over_http(container_rig):
    client, token, _ = container_rig()
    blob = bytes(range(256)) * 8
    client.put_chunk("deadbeef.0", blob, token)
    assert client.has_chunk("deadbeef.0", token)
    assert client.get_chunk("deadbeef.0", token) == blob
    assert client.list_chunks(token) == ["deadbeef.0"]
    counters = client.counters()
    assert counters["chunk_count"] == 1

    client.delete_chunk("deadbeef.0", token)
    assert not client.has_chunk("deadbeef.0", token)
    with pytest.raises(NotFoundError):
        client.get_chunk("deadbeef.0", token)


def test_container_status_over_http(container_rig):
    client, token, _ = container_rig()
    state = client.status()
    assert state.container_id == "wire-c0"
    before = state.fs_available_bytes
    client.put_chunk("cafe.1", b"x" * 1000, token)
    assert client.status().fs_available_bytes == before - 1000


def test_container_auth_and_key_errors_cross_the_wire(container_rig):
    client, token, _ = container_rig()
    with pytest.raises(UnauthorizedError):
        client.put_chunk("okchunk.0", b"x", "not-a-token")
    with pytest.raises(InvalidParamsError):
        client.put_chunk("a b", b"x", token)  # bad key survives URL encoding
    with pytest.raises(InvalidParamsError):
        client.get_chunk(".hidden", token)


def test_latency_injection_delays_every_request(container_rig):
    client, token, _ = container_rig(latency_ms=60)
    start = time.monotonic()
    client.status()
    client.status()
    assert time.monotonic() - start >= 0.12


def test_stopped_server_is_unreachable(container_rig):
    client, token, handle = container_rig()
    client.put_chunk("feed.0", b"x", token)
    handle.stop()
    # a fresh client must open a new connection; established keep-alive
    # sockets may drain, but nobody is listening any more
    fresh = HttpContainerClient(handle.url)
    with pytest.raises(ContainerUnavailableError):
        fresh.get_chunk("feed.0", token)


# --- metadata servers over HTTP -------------------------------------------------------


class _MetaFleet:
    """Three metadata replicas whose consensus traffic rides real HTTP."""

    def __init__(self, n=3):
        self.clock = ManualClock(1_000_000)
        self.tokens = _tokens(self.clock)
        ids = [f"m{i}" for i in range(n)]
        self.services = {
            rid: MetadataService(
                rid,
                tuple(p for p in ids if p != rid),
                MemoryLogStore(),
                self.clock,
                self.tokens,
            )
            for rid in ids
        }
        self.handles = {rid: start_metadata_server(svc) for rid, svc in self.services.items()}
        endpoints = {rid: h.url for rid, h in self.handles.items()}
        for rid, svc in self.services.items():
            svc.transport = HttpPeerTransport(
                {p: endpoints[p] for p in ids if p != rid}, timeout_s=5.0
            )
        self.urls = [endpoints[rid] for rid in ids]

    def stop(self):
        for h in self.handles.values():
            h.stop()
        for svc in self.services.values():
            svc.stop()


@pytest.fixture
def meta_fleet():
    fleet = _MetaFleet()
    yield fleet
    fleet.stop()


def _register_doc(client, token, path, uuid):
    from dynostore.domain import ObjectDescriptor, parse_path

    return client.register_object(
        ObjectDescriptor(
            object_uuid=uuid,
            path=parse_path(path),
            size_bytes=3,
            object_hash=bytes(32),
            n=1,
            k=1,
            chunk_locations=((0, "c0"),),
            owner="alice",
            created_at_ms=0,
        ),
        token,
    )


def test_metadata_quorum_over_http(meta_fleet):
    alice = meta_fleet.tokens.issue("alice")
    client = HttpMetadataClient([meta_fleet.urls[0]])
    client.create_namespace("alice", alice)
    client.create_collection("alice/data", alice)
    _, version = _register_doc(client, alice, "alice/data/x", "u1")
    assert version == 1

    # a committed write is served by every replica's own endpoint
    for url in meta_fleet.urls:
        descriptor, v = HttpMetadataClient([url]).resolve("alice/data/x", alice)
        assert descriptor.object_uuid == "u1" and v == 1


def test_metadata_failover_skips_dead_replicas(meta_fleet):
    alice = meta_fleet.tokens.issue("alice")
    boot = HttpMetadataClient([meta_fleet.urls[1]])
    boot.create_namespace("alice", alice)
    boot.create_collection("alice/data", alice)

    meta_fleet.handles["m0"].stop()  # first endpoint now refuses connections
    client = HttpMetadataClient(meta_fleet.urls)
    _, version = _register_doc(client, alice, "alice/data/x", "u1")
    assert version == 1
    descriptor, _ = client.resolve("alice/data/x", alice)
    assert descriptor.object_uuid == "u1"

    # service-level answers are not retried on other replicas
    with pytest.raises(NotFoundError):
        client.resolve("alice/data/ghost", alice)


def test_metadata_exists_uses_bodyless_head_replies(meta_fleet):
    alice = meta_fleet.tokens.issue("alice")
    client = HttpMetadataClient([meta_fleet.urls[0]])
    client.create_namespace("alice", alice)
    client.create_collection("alice/data", alice)
    assert not client.exists("alice/data/x", alice)  # 404 HEAD has no JSON body
    _register_doc(client, alice, "alice/data/x", "u1")
    assert client.exists("alice/data/x", alice)


def test_peer_transport_needs_known_destination():
    from dynostore.consensus import PullRequest

    with pytest.raises(ContainerUnavailableError):
        HttpPeerTransport({}).send(PullRequest("a", "b"))


# --- the full stack over HTTP ---------------------------------------------------------


class _StackRig:
    """Gateway server in front of HTTP containers and an HTTP metadata replica."""

    def __init__(self, tmp_path, n=4):
        self.clock = ManualClock(1_000_000)
        self.tokens = _tokens(self.clock)
        self.users = UserStore()
        self.users.add_user("admin", "admin-pw", admin=True)
        self.users.add_user("alice", "alice-pw")
        self.users.add_user("bob", "bob-pw")
        self.registry = Registry(self.clock)
        self.handles = []
        self.container_clients = {}
        for i in range(n):
            node = ContainerNode(
                ContainerConfig(
                    name=f"c{i}",
                    fs_capacity_bytes=64 * 1024 * 1024,
                    mem_budget_bytes=8 * 1024 * 1024,
                    container_id=f"c{i}",
                    storage_dir=str(tmp_path / f"c{i}"),
                ),
                self.tokens,
                clock=self.clock,
            )
            handle = start_container_server(node)
            self.handles.append(handle)
            self.container_clients[f"c{i}"] = HttpContainerClient(handle.url)
            self.registry.register(node.status())

        self.metadata = MetadataService(
            "m0", (), MemoryLogStore(), self.clock, self.tokens
        )
        self.meta_handle = start_metadata_server(self.metadata)
        self.handles.append(self.meta_handle)
        self.gateway = Gateway(
            self.registry,
            HttpMetadataClient([self.meta_handle.url]),
            self.tokens,
            self.users,
            lambda cid: self.container_clients[cid],
            clock=self.clock,
        )
        self.gw_handle = start_gateway_server(self.gateway)
        self.handles.append(self.gw_handle)
        self.api = HttpGatewayClient(self.gw_handle.url)

    def stop(self):
        self.gateway.stop()
        self.metadata.stop()
        for h in self.handles:
            h.stop()


@pytest.fixture
def stack(tmp_path):
    rig = _StackRig(tmp_path)
    yield rig
    rig.stop()


def test_full_stack_object_lifecycle(stack):
    alice = stack.api.authenticate("alice", "alice-pw")
    stack.api.create_namespace("alice", alice)
    stack.api.create_collection("alice/data", alice)

    data = bytes(i % 256 for i in range(10_000))
    descriptor, version = stack.api.put_object(
        "alice/data/blob", data, alice, mode="resilient", n=3, k=2
    )
    assert version == 1 and (descriptor.n, descriptor.k) == (3, 2)
    assert stack.api.get_object("alice/data/blob", alice) == data
    assert stack.api.object_exists("alice/data/blob", alice)
    assert stack.api.list_path("alice/data", alice) == {
        "collections": [],
        "objects": ["blob"],
    }

    summary = stack.api.evict("alice/data/blob", alice)
    assert summary["versions"] == 1 and summary["chunks_deleted"] == 3
    assert not stack.api.object_exists("alice/data/blob", alice)
    with pytest.raises(NotFoundError):
        stack.api.get_object("alice/data/blob", alice)


def test_full_stack_error_mapping(stack):
    with pytest.raises(BadCredentialsError):
        stack.api.authenticate("alice", "wrong")
    alice = stack.api.authenticate("alice", "alice-pw")
    stack.api.create_namespace("alice", alice)
    stack.api.create_collection("alice/data", alice)

    with pytest.raises(UnauthorizedError):
        stack.api.put_object("alice/data/x", b"data", "garbage-token")
    bob = stack.api.authenticate("bob", "bob-pw")
    with pytest.raises(PermissionDeniedError):
        stack.api.put_object("alice/data/x", b"data", bob)
    with pytest.raises(NotFoundError):
        stack.api.get_object("alice/data/ghost", alice)
    with pytest.raises(DynoStoreError):
        stack.api.put_object("alice/data/x", b"data", alice, n=3)  # k missing


def test_full_stack_unicode_paths(stack):
    alice = stack.api.authenticate("alice", "alice-pw")
    stack.api.create_namespace("alice", alice)
    stack.api.create_collection("alice/фотографии", alice)
    path = "alice/фотографии/закат ☀"
    stack.api.put_object(path, b"sunset bytes", alice)
    assert stack.api.get_object(path, alice) == b"sunset bytes"
    listing = stack.api.list_path("alice/фотографии", alice)
    assert listing["objects"] == ["закат ☀"]


def test_full_stack_plan_and_containers(stack):
    alice = stack.api.authenticate("alice", "alice-pw")
    admin = stack.api.authenticate("admin", "admin-pw")
    plan = stack.api.plan(50_000, alice)
    assert set(plan) >= {"n", "k", "targets", "loss_probability", "feasible"}
    assert len(stack.api.list_containers(alice)) == 4
    with pytest.raises(UnauthorizedError):
        stack.api.deregister_container("c3", alice)
    stack.api.deregister_container("c3", admin)
    assert len(stack.api.list_containers(alice)) == 3
    assert stack.api.health()["containers"] == 3


def test_full_stack_gc_endpoint(stack):
    alice = stack.api.authenticate("alice", "alice-pw")
    admin = stack.api.authenticate("admin", "admin-pw")
    stack.api.create_namespace("alice", alice)
    stack.api.create_collection("alice/data", alice)
    d1, _ = stack.api.put_object("alice/data/v", b"old", alice)
    stack.clock.advance(10)
    d2, _ = stack.api.put_object("alice/data/v", b"new", alice)

    assert stack.api.run_gc(admin) == []
    future = stack.clock.now_ms() + 31 * 86_400_000
    purged = stack.api.run_gc(admin, now_ms=future)
    assert [p["object_uuid"] for p in purged] == [d1.object_uuid]
    assert stack.api.get_object("alice/data/v", alice) == b"new"
