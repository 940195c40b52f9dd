"""Command-line tools.

``dynostore``        object operations against a running gateway
``dynostore-server`` run one server role (container, metadata, gateway)

Connection settings come from flags or the environment::

    DYNOSTORE_GATEWAY     gateway base URL
    DYNOSTORE_USER        user name
    DYNOSTORE_CREDENTIAL  credential
    DYNOSTORE_TOKEN       pre-issued token (skips authentication)
    DYNOSTORE_KEY         hex-encoded 32-byte encryption key

Exit codes: 0 success, 1 generic failure, 2 not found, 3 denied,
4 integrity failure, 5 service unavailable.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path

from .client import ClientConfig, DynoStoreClient
from .domain import Mode, Permission
from .errors import (
    BackendFailureError,
    BadHandleError,
    BadMagicError,
    CollectionNotFoundError,
    ConsensusFailedError,
    ContainerUnavailableError,
    ContainerWriteFailedError,
    DynoStoreError,
    EncryptionKeyMissingError,
    HashMismatchError,
    InconsistentHeadersError,
    InsufficientCapacityError,
    NoFeasibleContainerError,
    NotEnoughChunksError,
    NotEnoughContainersError,
    NotFoundError,
    OutOfSpaceError,
    ParentNotFoundError,
    PermissionDeniedError,
    ScopeNotFoundError,
    TruncatedError,
    UnauthorizedError,
    UnknownContainerError,
    VersionExpiredError,
    WrongKeyError,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_FOUND = 2
EXIT_DENIED = 3
EXIT_INTEGRITY = 4
EXIT_UNAVAILABLE = 5

_NOT_FOUND = (
    NotFoundError,
    ParentNotFoundError,
    CollectionNotFoundError,
    ScopeNotFoundError,
    UnknownContainerError,
    VersionExpiredError,
)
_DENIED = (UnauthorizedError, PermissionDeniedError)
_INTEGRITY = (
    HashMismatchError,
    BadHandleError,
    WrongKeyError,
    EncryptionKeyMissingError,
    BadMagicError,
    TruncatedError,
    InconsistentHeadersError,
)
_UNAVAILABLE = (
    NotEnoughChunksError,
    NotEnoughContainersError,
    NoFeasibleContainerError,
    InsufficientCapacityError,
    OutOfSpaceError,
    ContainerUnavailableError,
    ContainerWriteFailedError,
    ConsensusFailedError,
    BackendFailureError,
)


def exit_code_for(exc: Exception) -> int:
    if isinstance(exc, _NOT_FOUND):
        return EXIT_NOT_FOUND
    if isinstance(exc, _DENIED):
        return EXIT_DENIED
    if isinstance(exc, _INTEGRITY):
        return EXIT_INTEGRITY
    if isinstance(exc, _UNAVAILABLE):
        return EXIT_UNAVAILABLE
    return EXIT_ERROR


# --- dynostore (client) ---------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynostore", description="object store client"
    )
    parser.add_argument("--gateway", help="gateway URL (env DYNOSTORE_GATEWAY)")
    parser.add_argument("--user", help="user name (env DYNOSTORE_USER)")
    parser.add_argument("--credential", help="credential (env DYNOSTORE_CREDENTIAL)")
    parser.add_argument("--token", help="pre-issued token (env DYNOSTORE_TOKEN)")
    parser.add_argument("--key", help="hex encryption key (env DYNOSTORE_KEY)")
    parser.add_argument("--json", action="store_true", help="machine-readable output")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("push", help="store an object")
    p.add_argument("path")
    p.add_argument("file", help="local file, or - for stdin")
    p.add_argument("--mode", choices=["regular", "resilient"], default="regular")
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--target-loss", type=float, dest="target_loss")
    p.add_argument("--encrypt", action="store_true")
    p.add_argument(
        "--ensure-path", action="store_true",
        help="create the namespace/collections first",
    )

    p = sub.add_parser("pull", help="fetch an object")
    p.add_argument("path")
    p.add_argument("-o", "--output", help="local file, default stdout")
    p.add_argument("--version", type=int)

    p = sub.add_parser("pull-handle", help="fetch by dyn:// handle")
    p.add_argument("handle")
    p.add_argument("-o", "--output")

    p = sub.add_parser("exists", help="check whether a path resolves")
    p.add_argument("path")

    p = sub.add_parser("evict", help="drop an object and its chunks")
    p.add_argument("path")

    p = sub.add_parser("ls", help="list a namespace or collection")
    p.add_argument("path")

    p = sub.add_parser("mkdir", help="create a namespace or collection")
    p.add_argument("path")

    p = sub.add_parser("grant", help="grant or deny access on a scope")
    p.add_argument("scope")
    p.add_argument("subject")
    p.add_argument("mode", choices=["read", "write", "admin"])
    p.add_argument("--deny", action="store_true")

    p = sub.add_parser("retention", help="set version retention in days")
    p.add_argument("path")
    p.add_argument("days", type=int)

    p = sub.add_parser("plan", help="preview the dispersal the planner would pick")
    p.add_argument("size", type=int)
    p.add_argument("--target-loss", type=float, dest="target_loss")

    p = sub.add_parser("gc", help="purge expired versions (admin)")

    admin = sub.add_parser("admin", help="registry administration")
    admin_sub = admin.add_subparsers(dest="admin_command", required=True)
    admin_sub.add_parser("containers", help="list registered containers")
    p = admin_sub.add_parser("remove", help="deregister a container")
    p.add_argument("container_id")

    return parser


def _client_from(args: argparse.Namespace) -> DynoStoreClient:
    import os

    gateway_url = args.gateway or os.environ.get("DYNOSTORE_GATEWAY")
    if not gateway_url:
        raise DynoStoreError("no gateway: pass --gateway or set DYNOSTORE_GATEWAY")
    user = args.user or os.environ.get("DYNOSTORE_USER", "")
    credential = args.credential or os.environ.get("DYNOSTORE_CREDENTIAL", "")
    token = args.token or os.environ.get("DYNOSTORE_TOKEN", "")
    key = args.key or os.environ.get("DYNOSTORE_KEY") or None
    if not token and not user:
        raise DynoStoreError("no identity: pass --user/--credential or --token")
    from .wire import HttpGatewayClient

    return DynoStoreClient(
        HttpGatewayClient(gateway_url),
        ClientConfig(user=user, credential=credential, token=token, encryption_key=key),
    )


def _read_input(spec: str) -> bytes:
    if spec == "-":
        return sys.stdin.buffer.read()
    return Path(spec).read_bytes()


def _write_output(data: bytes, output: str | None) -> None:
    if output and output != "-":
        Path(output).write_bytes(data)
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.buffer.flush()


def _run_command(args: argparse.Namespace) -> int:
    client = _client_from(args)
    if args.command == "push":
        data = _read_input(args.file)
        if args.ensure_path:
            client.ensure_path(args.path)
        result = client.push(
            args.path,
            data,
            mode=args.mode,
            n=args.n,
            k=args.k,
            target_loss=args.target_loss,
            encrypt=args.encrypt,
        )
        d = result.descriptor
        if args.json:
            print(json.dumps({
                "path": args.path,
                "version": result.version,
                "handle": result.handle,
                "n": d.n,
                "k": d.k,
                "size": d.size_bytes,
            }))
        else:
            print(f"stored {args.path} v{result.version} "
                  f"({d.size_bytes} bytes as {d.n}/{d.k})")
            print(result.handle)
        return EXIT_OK
    if args.command == "pull":
        _write_output(client.pull(args.path, version=args.version), args.output)
        return EXIT_OK
    if args.command == "pull-handle":
        _write_output(client.pull_handle(args.handle), args.output)
        return EXIT_OK
    if args.command == "exists":
        found = client.exists(args.path)
        print(json.dumps({"exists": found}) if args.json else
              ("yes" if found else "no"))
        return EXIT_OK if found else EXIT_NOT_FOUND
    if args.command == "evict":
        summary = client.evict(args.path)
        print(json.dumps(summary) if args.json else
              f"evicted {summary['versions']} version(s), "
              f"{summary['chunks_deleted']} chunk(s)")
        return EXIT_OK
    if args.command == "ls":
        listing = client.list_path(args.path)
        if args.json:
            print(json.dumps(listing, indent=2, sort_keys=True))
        else:
            for name in listing.get("collections", []):
                print(f"{name}/")
            for name in listing.get("objects", []):
                print(name)
        return EXIT_OK
    if args.command == "mkdir":
        if "/" in args.path.strip("/"):
            client.create_collection(args.path)
        else:
            client.create_namespace(args.path.strip("/"))
        return EXIT_OK
    if args.command == "grant":
        client.grant(Permission(
            subject=args.subject,
            mode=Mode.parse(args.mode),
            scope=args.scope,
            allow=not args.deny,
        ))
        return EXIT_OK
    if args.command == "retention":
        client.set_retention(args.path, args.days)
        return EXIT_OK
    if args.command == "plan":
        plan = client.plan(args.size, target_loss=args.target_loss)
        if args.json:
            print(json.dumps(plan, indent=2, sort_keys=True))
        else:
            print(f"n={plan['n']} k={plan['k']} "
                  f"tolerates {plan['tolerance']} failure(s), "
                  f"overhead x{plan['overhead']:.2f}, "
                  f"loss {plan['loss_probability']:.3g}"
                  f"{'' if plan['feasible'] else ' (TARGET NOT MET)'}")
        return EXIT_OK
    if args.command == "gc":
        purged = client.run_gc()
        print(json.dumps(purged) if args.json else
              f"purged {len(purged)} version(s)")
        return EXIT_OK
    if args.command == "admin":
        if args.admin_command == "containers":
            states = client.list_containers()
            if args.json:
                print(json.dumps([s.to_dict() for s in states], indent=2))
            else:
                for s in states:
                    flag = "up" if s.healthy else "DOWN"
                    print(f"{s.container_id}  {flag:4s}  fs "
                          f"{s.fs_available_bytes}/{s.fs_total_bytes}  {s.endpoint}")
            return EXIT_OK
        if args.admin_command == "remove":
            token = client._token or client._fresh_token()
            client.gateway.deregister_container(args.container_id, token)
            return EXIT_OK
    raise DynoStoreError(f"unhandled command {args.command}")


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _run_command(args)
    except DynoStoreError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


# --- dynostore-server -------------------------------------------------------------------


def _serve_forever(stop_services) -> None:
    done = threading.Event()

    def handler(signum, frame):
        done.set()

    signal.signal(signal.SIGTERM, handler)
    signal.signal(signal.SIGINT, handler)
    try:
        done.wait()
    finally:
        stop_services()


def _run_container(config: dict) -> None:
    from .auth import TokenService
    from .container import ContainerConfig, ContainerNode
    from .wire import HttpGatewayClient, start_container_server

    tokens = TokenService(config["secret"])
    node_config = ContainerConfig(
        name=config["name"],
        fs_capacity_bytes=int(config["fs_capacity_bytes"]),
        mem_budget_bytes=int(config["mem_budget_bytes"]),
        storage_dir=config.get("storage_dir"),
        cache_capacity_bytes=config.get("cache_capacity_bytes"),
        annual_failure_rate=float(config.get("annual_failure_rate", 0.0)),
        endpoint=config.get("endpoint", ""),
    )
    node = ContainerNode(node_config, tokens)
    handle = start_container_server(
        node,
        host=config.get("listen_host", "127.0.0.1"),
        port=int(config.get("listen_port", 0)),
        latency_ms=int(config.get("latency_ms", 0)),
    )
    if not node.config.endpoint:
        node.config.endpoint = handle.url
    print(f"container {node.container_id} serving on {handle.url}")
    register = config.get("register")
    if register:
        gateway = HttpGatewayClient(register["gateway_url"])
        token = register.get("token") or gateway.authenticate(
            register["user"], register["credential"]
        )
        gateway.register_container(node.status(), token)
        print(f"registered with {register['gateway_url']}")
    _serve_forever(handle.stop)


def _run_metadata(config: dict) -> None:
    from .auth import TokenService
    from .consensus import FileLogStore, MemoryLogStore
    from .metadata import MetadataService
    from .util import SystemClock
    from .wire import HttpPeerTransport, start_metadata_server

    replica_id = config["replica_id"]
    peers: dict[str, str] = config.get("peers", {})
    store = (
        FileLogStore(config["data_dir"]) if config.get("data_dir") else MemoryLogStore()
    )
    service = MetadataService(
        replica_id,
        tuple(sorted(p for p in peers if p != replica_id)),
        store,
        SystemClock(),
        TokenService(config["secret"]),
        transport=HttpPeerTransport(peers) if peers else None,
        pending_ttl_ms=int(config.get("pending_ttl_ms", 3000)),
    )
    handle = start_metadata_server(
        service,
        host=config.get("listen_host", "127.0.0.1"),
        port=int(config.get("listen_port", 0)),
        latency_ms=int(config.get("latency_ms", 0)),
    )
    service.start_sync(float(config.get("sync_interval_s", 5.0)))
    print(f"metadata replica {replica_id} serving on {handle.url}")

    def stop() -> None:
        service.stop()
        handle.stop()

    _serve_forever(stop)


def _run_gateway(config: dict) -> None:
    from .auth import TokenService
    from .management import Gateway, Registry, UserStore
    from .placement import UtilizationWeights, DEFAULT_WEIGHTS
    from .wire import HttpContainerClient, HttpMetadataClient, start_gateway_server

    tokens = TokenService(config["secret"])
    users = UserStore()
    if config.get("users_file"):
        users = UserStore.from_file(config["users_file"])
    for user in config.get("users", []):
        users.add_user(user["name"], user["credential"], bool(user.get("admin")))
    registry = Registry()
    weights = DEFAULT_WEIGHTS
    if "weights" in config:
        weights = UtilizationWeights(
            memory=float(config["weights"]["memory"]),
            filesystem=float(config["weights"]["filesystem"]),
        )
    clients: dict[str, HttpContainerClient] = {}

    def client_for(container_id: str) -> HttpContainerClient:
        endpoint = registry.endpoint_of(container_id)
        client = clients.get(endpoint)
        if client is None:
            client = clients[endpoint] = HttpContainerClient(endpoint)
        return client

    gateway = Gateway(
        registry,
        HttpMetadataClient(config["metadata_endpoints"]),
        tokens,
        users,
        client_for,
        weights=weights,
        health_interval_s=float(config.get("health_interval_s", 10.0)),
    )
    handle = start_gateway_server(
        gateway,
        host=config.get("listen_host", "127.0.0.1"),
        port=int(config.get("listen_port", 0)),
        latency_ms=int(config.get("latency_ms", 0)),
    )
    gateway.start_background()
    print(f"gateway serving on {handle.url}")

    def stop() -> None:
        gateway.stop()
        handle.stop()

    _serve_forever(stop)


def server_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="dynostore-server", description="run one server role"
    )
    parser.add_argument("role", choices=["container", "metadata", "gateway"])
    parser.add_argument("--config", required=True, help="JSON config file")
    parser.add_argument("--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    config = json.loads(Path(args.config).read_text(encoding="utf-8"))
    try:
        if args.role == "container":
            _run_container(config)
        elif args.role == "metadata":
            _run_metadata(config)
        else:
            _run_gateway(config)
    except DynoStoreError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
