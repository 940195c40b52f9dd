"""HTTP adapters for the three server roles, plus the matching clients.

Servers are thin: parse the request, call the in-process service, map
exceptions to status codes, serialize the reply. Chunk payloads travel as
raw octet-streams; everything else is JSON. Errors always carry a JSON body
``{"error": <code>, "message": <text>}`` so clients can rebuild the exact
exception type regardless of transport.

Every server takes ``latency_ms``: an artificial per-request delay used to
make wide-area round-trip costs visible in local experiments.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, quote, unquote, urlsplit

import requests

from .consensus import Message, message_from_dict, message_to_dict
from .container import ContainerNode
from .domain import ContainerState, Mode, ObjectDescriptor, Permission
from .errors import (
    ContainerUnavailableError,
    DynoStoreError,
    NotFoundError,
    error_for_code,
)
from .management import Gateway
from .metadata import MetadataService

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT_S = 60.0

_STATUS_FOR_CODE = {
    "EmptyPath": 400,
    "IllegalCharacter": 400,
    "PathTooLong": 400,
    "InvalidParams": 400,
    "BadMagic": 400,
    "Truncated": 400,
    "InconsistentHeaders": 400,
    "BadHandle": 400,
    "ScenarioInvalid": 400,
    "Unauthorized": 401,
    "BadCredentials": 401,
    "PermissionDenied": 403,
    "NotFound": 404,
    "ParentNotFound": 404,
    "CollectionNotFound": 404,
    "ScopeNotFound": 404,
    "UnknownContainer": 404,
    "VersionExpired": 410,
    "AlreadyExists": 409,
    "HashMismatch": 422,
    "NotEnoughChunks": 422,
    "OutOfSpace": 507,
    "InsufficientCapacity": 507,
    "NoFeasibleContainer": 507,
    "NotEnoughContainers": 507,
    "ContainerUnavailable": 503,
    "ConsensusFailed": 503,
    "BackendFailure": 502,
    "ContainerWriteFailed": 502,
}


class _ServiceServer(ThreadingHTTPServer):
    """ThreadingHTTPServer that carries the backing service object."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, handler, backing, latency_ms: int = 0):
        super().__init__(address, handler)
        self.backing = backing
        self.latency_ms = latency_ms


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "dynostore/0.1"

    # route tables are defined by subclasses as {(method, prefix): fn-name}

    def log_message(self, fmt: str, *args) -> None:
        logger.debug("%s %s", self.address_string(), fmt % args)

    # -- plumbing ---------------------------------------------------------------

    def _body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length) if length else b""

    def _json_body(self) -> dict:
        raw = self._body()
        return json.loads(raw.decode("utf-8")) if raw else {}

    def _token(self) -> str:
        auth = self.headers.get("Authorization", "")
        return auth[7:] if auth.startswith("Bearer ") else ""

    def _reply_json(self, obj, status: int = 200) -> None:
        body = json.dumps(obj).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        if self.command != "HEAD":
            self.wfile.write(body)

    def _reply_bytes(self, blob: bytes, status: int = 200) -> None:
        self.send_response(status)
        self.send_header("Content-Type", "application/octet-stream")
        self.send_header("Content-Length", str(len(blob)))
        self.end_headers()
        if self.command != "HEAD":
            self.wfile.write(blob)

    def _reply_empty(self, status: int = 204) -> None:
        self.send_response(status)
        self.send_header("Content-Length", "0")
        self.end_headers()

    def _reply_error(self, exc: Exception) -> None:
        if isinstance(exc, DynoStoreError):
            code = exc.code
            message = str(exc)
        else:
            code = "Internal"
            message = f"{type(exc).__name__}: {exc}"
            logger.exception("unhandled error serving %s %s", self.command, self.path)
        status = _STATUS_FOR_CODE.get(code, 500)
        self._reply_json({"error": code, "message": message}, status=status)

    def _dispatch(self) -> None:
        if self.server.latency_ms:
            time.sleep(self.server.latency_ms / 1000.0)
        split = urlsplit(self.path)
        route = unquote(split.path)
        self.query = {k: v[-1] for k, v in parse_qs(split.query).items()}
        try:
            handled = self.route(self.command, route)
            if not handled:
                self._reply_json(
                    {"error": "NotFound", "message": f"no route {route}"}, status=404
                )
        except BrokenPipeError:
            pass
        except Exception as exc:
            try:
                self._reply_error(exc)
            except Exception:
                pass

    def route(self, method: str, path: str) -> bool:  # pragma: no cover - abstract
        raise NotImplementedError

    do_GET = do_PUT = do_POST = do_DELETE = do_HEAD = _dispatch


# --- container server ---------------------------------------------------------------


class ContainerHandler(_Handler):
    def route(self, method: str, path: str) -> bool:
        node: ContainerNode = self.server.backing
        if path == "/status" and method == "GET":
            self._reply_json(node.status().to_dict())
            return True
        if path == "/counters" and method == "GET":
            self._reply_json(node.counters())
            return True
        if path == "/chunks" and method == "GET":
            self._reply_json(node.list_chunks(self._token()))
            return True
        if path.startswith("/chunks/"):
            chunk_id = path[len("/chunks/"):]
            if method == "PUT":
                node.put_chunk(chunk_id, self._body(), self._token())
                self._reply_empty()
                return True
            if method == "GET":
                self._reply_bytes(node.get_chunk(chunk_id, self._token()))
                return True
            if method == "HEAD":
                if node.has_chunk(chunk_id, self._token()):
                    self._reply_bytes(b"")
                else:
                    self._reply_json({"error": "NotFound", "message": chunk_id}, 404)
                return True
            if method == "DELETE":
                node.delete_chunk(chunk_id, self._token())
                self._reply_empty()
                return True
        return False


# --- metadata server ----------------------------------------------------------------


class MetadataHandler(_Handler):
    def route(self, method: str, path: str) -> bool:
        svc: MetadataService = self.server.backing
        token = self._token()
        if path == "/internal/message" and method == "POST":
            reply = svc.handle_peer(message_from_dict(self._json_body()))
            self._reply_json(message_to_dict(reply) if reply is not None else None)
            return True
        if path == "/namespaces" and method == "POST":
            svc.create_namespace(self._json_body()["name"], token)
            self._reply_empty()
            return True
        if path == "/collections" and method == "POST":
            svc.create_collection(self._json_body()["path"], token)
            self._reply_empty()
            return True
        if path == "/objects" and method == "POST":
            descriptor = ObjectDescriptor.from_dict(self._json_body()["descriptor"])
            registered, version = svc.register_object(descriptor, token)
            self._reply_json(
                {"descriptor": registered.to_dict(), "version": version}
            )
            return True
        if path.startswith("/objects/"):
            object_path = path[len("/objects/"):]
            if method == "GET":
                version = self.query.get("version")
                descriptor, resolved = svc.resolve(
                    object_path, token, int(version) if version else None
                )
                self._reply_json(
                    {"descriptor": descriptor.to_dict(), "version": resolved}
                )
                return True
            if method == "HEAD":
                if svc.exists(object_path, token):
                    self._reply_json({})
                else:
                    self._reply_json({"error": "NotFound", "message": object_path}, 404)
                return True
        if path.startswith("/list/") and method == "GET":
            self._reply_json(svc.list_path(path[len("/list/"):], token))
            return True
        if path == "/grants" and method == "POST":
            svc.grant(Permission.from_dict(self._json_body()), token)
            self._reply_empty()
            return True
        if path == "/check" and method == "GET":
            allowed = svc.check(
                self.query["path"],
                self.query["subject"],
                Mode.parse(self.query["mode"]),
                token,
            )
            self._reply_json({"allowed": allowed})
            return True
        if path == "/retention" and method == "POST":
            body = self._json_body()
            svc.set_retention(body["path"], int(body["days"]), token)
            self._reply_empty()
            return True
        if path == "/evict" and method == "POST":
            self._reply_json({"versions": svc.evict(self._json_body()["path"], token)})
            return True
        if path == "/gc" and method == "POST":
            now_ms = self._json_body().get("now_ms")
            self._reply_json({"purged": svc.garbage_collect(token, now_ms)})
            return True
        if path == "/live" and method == "GET":
            objects = [
                [p, d.to_dict()] for p, d in svc.live_versions(token)
            ]
            self._reply_json({"objects": objects})
            return True
        return False


# --- gateway server -----------------------------------------------------------------


class GatewayHandler(_Handler):
    def route(self, method: str, path: str) -> bool:
        gw: Gateway = self.server.backing
        token = self._token()
        if path == "/health" and method == "GET":
            self._reply_json(
                {"status": "ok", "containers": len(gw.registry.snapshot())}
            )
            return True
        if path == "/auth/token" and method == "POST":
            body = self._json_body()
            issued = gw.authenticate(body["user"], body["credential"])
            self._reply_json({"token": issued})
            return True
        if path.startswith("/objects/"):
            object_path = path[len("/objects/"):]
            if method == "PUT":
                q = self.query
                descriptor, version = gw.upload(
                    object_path,
                    self._body(),
                    token,
                    mode=q.get("mode", "regular"),
                    n=int(q["n"]) if "n" in q else None,
                    k=int(q["k"]) if "k" in q else None,
                    target_loss=float(q["target_loss"]) if "target_loss" in q else None,
                )
                self._reply_json(
                    {"descriptor": descriptor.to_dict(), "version": version}
                )
                return True
            if method == "GET":
                version = self.query.get("version")
                data = gw.download(
                    object_path, token, int(version) if version else None
                )
                self._reply_bytes(data)
                return True
            if method == "HEAD":
                if gw.object_exists(object_path, token):
                    self._reply_json({})
                else:
                    self._reply_json({"error": "NotFound", "message": object_path}, 404)
                return True
            if method == "DELETE":
                self._reply_json(gw.evict(object_path, token))
                return True
        if path == "/containers" and method == "GET":
            states = [s.to_dict() for s in gw.list_containers(token)]
            self._reply_json({"containers": states})
            return True
        if path == "/containers" and method == "POST":
            gw.register_container(ContainerState.from_dict(self._json_body()), token)
            self._reply_empty()
            return True
        if path.startswith("/containers/") and method == "DELETE":
            gw.deregister_container(path[len("/containers/"):], token)
            self._reply_empty()
            return True
        if path == "/namespaces" and method == "POST":
            gw.metadata.create_namespace(self._json_body()["name"], token)
            self._reply_empty()
            return True
        if path == "/collections" and method == "POST":
            gw.metadata.create_collection(self._json_body()["path"], token)
            self._reply_empty()
            return True
        if path == "/grants" and method == "POST":
            gw.metadata.grant(Permission.from_dict(self._json_body()), token)
            self._reply_empty()
            return True
        if path == "/retention" and method == "POST":
            body = self._json_body()
            gw.metadata.set_retention(body["path"], int(body["days"]), token)
            self._reply_empty()
            return True
        if path.startswith("/list/") and method == "GET":
            self._reply_json(gw.metadata.list_path(path[len("/list/"):], token))
            return True
        if path == "/check" and method == "GET":
            allowed = gw.metadata.check(
                self.query["path"],
                self.query["subject"],
                Mode.parse(self.query["mode"]),
                token,
            )
            self._reply_json({"allowed": allowed})
            return True
        if path == "/plan" and method == "GET":
            plan = gw.plan(
                int(self.query["size"]),
                token,
                float(self.query["target_loss"]) if "target_loss" in self.query else None,
            )
            self._reply_json(plan.to_dict())
            return True
        if path == "/gc" and method == "POST":
            purged = gw.run_gc(token or None, self._json_body().get("now_ms"))
            self._reply_json({"purged": purged})
            return True
        return False


# --- server lifecycle ---------------------------------------------------------------


@dataclass
class ServerHandle:
    server: _ServiceServer
    thread: threading.Thread

    @property
    def port(self) -> int:
        return self.server.server_address[1]

    @property
    def url(self) -> str:
        host = self.server.server_address[0]
        return f"http://{host}:{self.port}"

    def stop(self) -> None:
        self.server.shutdown()
        self.server.server_close()
        self.thread.join(timeout=5)


def _start(handler, backing, host: str, port: int, latency_ms: int) -> ServerHandle:
    server = _ServiceServer((host, port), handler, backing, latency_ms)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return ServerHandle(server=server, thread=thread)


def start_container_server(
    node: ContainerNode, host: str = "127.0.0.1", port: int = 0, latency_ms: int = 0
) -> ServerHandle:
    return _start(ContainerHandler, node, host, port, latency_ms)


def start_metadata_server(
    service: MetadataService, host: str = "127.0.0.1", port: int = 0, latency_ms: int = 0
) -> ServerHandle:
    return _start(MetadataHandler, service, host, port, latency_ms)


def start_gateway_server(
    gateway: Gateway, host: str = "127.0.0.1", port: int = 0, latency_ms: int = 0
) -> ServerHandle:
    return _start(GatewayHandler, gateway, host, port, latency_ms)


# --- clients ------------------------------------------------------------------------


# fallback for responses whose JSON body is absent (HEAD) or mangled
_CODE_FOR_STATUS = {
    400: "InvalidParams",
    401: "Unauthorized",
    403: "PermissionDenied",
    404: "NotFound",
    409: "AlreadyExists",
    410: "VersionExpired",
    422: "HashMismatch",
    502: "BackendFailure",
    503: "ContainerUnavailable",
    507: "OutOfSpace",
}


def _raise_for(resp: requests.Response) -> None:
    if resp.status_code < 400:
        return
    try:
        payload = resp.json()
        code, message = payload["error"], payload["message"]
    except (ValueError, KeyError):
        code = _CODE_FOR_STATUS.get(resp.status_code, "Internal")
        message = f"HTTP {resp.status_code}"
    raise error_for_code(code, message)


class _HttpBase:
    """Shared plumbing: one endpoint, thread-local sessions, bearer auth."""

    def __init__(self, endpoint: str, timeout_s: float = DEFAULT_TIMEOUT_S):
        self.endpoint = endpoint.rstrip("/")
        self.timeout_s = timeout_s
        self._local = threading.local()

    def _session(self) -> requests.Session:
        session = getattr(self._local, "session", None)
        if session is None:
            session = requests.Session()
            self._local.session = session
        return session

    def _request(self, method: str, path: str, token: str = "", **kwargs):
        headers = kwargs.pop("headers", {})
        if token:
            headers["Authorization"] = f"Bearer {token}"
        try:
            resp = self._session().request(
                method,
                self.endpoint + path,
                headers=headers,
                timeout=self.timeout_s,
                **kwargs,
            )
        except requests.RequestException as exc:
            raise ContainerUnavailableError(f"{self.endpoint} unreachable: {exc}") from exc
        _raise_for(resp)
        return resp


class HttpContainerClient(_HttpBase):
    """Gateway-side view of one container over HTTP."""

    def put_chunk(self, chunk_id: str, blob: bytes, token: str) -> None:
        self._request("PUT", f"/chunks/{quote(chunk_id)}", token, data=blob)

    def get_chunk(self, chunk_id: str, token: str) -> bytes:
        return self._request("GET", f"/chunks/{quote(chunk_id)}", token).content

    def delete_chunk(self, chunk_id: str, token: str) -> None:
        self._request("DELETE", f"/chunks/{quote(chunk_id)}", token)

    def has_chunk(self, chunk_id: str, token: str) -> bool:
        try:
            self._request("HEAD", f"/chunks/{quote(chunk_id)}", token)
            return True
        except NotFoundError:
            return False

    def status(self) -> ContainerState:
        return ContainerState.from_dict(self._request("GET", "/status").json())

    def counters(self) -> dict:
        return self._request("GET", "/counters").json()

    def list_chunks(self, token: str) -> list[str]:
        return self._request("GET", "/chunks", token).json()


class HttpPeerTransport:
    """Routes consensus messages to metadata replicas by destination id."""

    def __init__(self, endpoints: dict[str, str], timeout_s: float = 10.0):
        self._clients = {
            rid: _HttpBase(url, timeout_s) for rid, url in endpoints.items()
        }

    def send(self, msg: Message) -> Message | None:
        client = self._clients.get(msg.dst)
        if client is None:
            raise ContainerUnavailableError(f"no endpoint for replica {msg.dst}")
        resp = client._request("POST", "/internal/message", json=message_to_dict(msg))
        payload = resp.json()
        return message_from_dict(payload) if payload is not None else None


class HttpMetadataClient:
    """Client-facing metadata API with replica failover.

    Requests go to the first endpoint; when a replica is unreachable the
    next one is tried. Service-level errors (permission, not-found, ...) are
    raised immediately -- they would be the same answer everywhere.
    """

    def __init__(self, endpoints: list[str], timeout_s: float = DEFAULT_TIMEOUT_S):
        if not endpoints:
            raise DynoStoreError("need at least one metadata endpoint")
        self._bases = [_HttpBase(e, timeout_s) for e in endpoints]

    def _request(self, method: str, path: str, token: str = "", **kwargs):
        last: Exception | None = None
        for base in self._bases:
            try:
                return base._request(method, path, token, **kwargs)
            except ContainerUnavailableError as exc:
                last = exc
        assert last is not None
        raise last

    def create_namespace(self, name: str, token: str) -> None:
        self._request("POST", "/namespaces", token, json={"name": name})

    def create_collection(self, path: str, token: str) -> None:
        self._request("POST", "/collections", token, json={"path": path})

    def register_object(
        self, descriptor: ObjectDescriptor, token: str
    ) -> tuple[ObjectDescriptor, int]:
        resp = self._request(
            "POST", "/objects", token, json={"descriptor": descriptor.to_dict()}
        )
        payload = resp.json()
        return ObjectDescriptor.from_dict(payload["descriptor"]), payload["version"]

    def resolve(
        self, path: str, token: str, version: int | None = None
    ) -> tuple[ObjectDescriptor, int]:
        params = {"version": version} if version is not None else {}
        resp = self._request(
            "GET", f"/objects/{quote(path)}", token, params=params
        )
        payload = resp.json()
        return ObjectDescriptor.from_dict(payload["descriptor"]), payload["version"]

    def exists(self, path: str, token: str) -> bool:
        try:
            self._request("HEAD", f"/objects/{quote(path)}", token)
            return True
        except NotFoundError:
            return False

    def list_path(self, path: str, token: str) -> dict:
        return self._request("GET", f"/list/{quote(path)}", token).json()

    def grant(self, permission: Permission, token: str) -> None:
        self._request("POST", "/grants", token, json=permission.to_dict())

    def check(self, path: str, subject: str, mode: Mode, token: str) -> bool:
        resp = self._request(
            "GET",
            "/check",
            token,
            params={"path": path, "subject": subject, "mode": mode.name},
        )
        return resp.json()["allowed"]

    def set_retention(self, path: str, days: int, token: str) -> None:
        self._request("POST", "/retention", token, json={"path": path, "days": days})

    def evict(self, path: str, token: str) -> list[dict]:
        resp = self._request("POST", "/evict", token, json={"path": path})
        return resp.json()["versions"]

    def garbage_collect(self, token: str, now_ms: int | None = None) -> list[dict]:
        resp = self._request("POST", "/gc", token, json={"now_ms": now_ms})
        return resp.json()["purged"]

    def live_versions(self, token: str) -> list[tuple[str, ObjectDescriptor]]:
        payload = self._request("GET", "/live", token).json()
        return [
            (p, ObjectDescriptor.from_dict(d)) for p, d in payload["objects"]
        ]


class HttpGatewayClient(_HttpBase):
    """What client libraries and the CLI talk to."""

    def authenticate(self, user: str, credential: str) -> str:
        resp = self._request(
            "POST", "/auth/token", json={"user": user, "credential": credential}
        )
        return resp.json()["token"]

    def put_object(
        self,
        path: str,
        data: bytes,
        token: str,
        mode: str = "regular",
        n: int | None = None,
        k: int | None = None,
        target_loss: float | None = None,
    ) -> tuple[ObjectDescriptor, int]:
        params: dict = {"mode": mode}
        if n is not None:
            params["n"] = n
        if k is not None:
            params["k"] = k
        if target_loss is not None:
            params["target_loss"] = target_loss
        resp = self._request(
            "PUT", f"/objects/{quote(path)}", token, params=params, data=data
        )
        payload = resp.json()
        return ObjectDescriptor.from_dict(payload["descriptor"]), payload["version"]

    def get_object(self, path: str, token: str, version: int | None = None) -> bytes:
        params = {"version": version} if version is not None else {}
        return self._request(
            "GET", f"/objects/{quote(path)}", token, params=params
        ).content

    def object_exists(self, path: str, token: str) -> bool:
        try:
            self._request("HEAD", f"/objects/{quote(path)}", token)
            return True
        except NotFoundError:
            return False

    def evict(self, path: str, token: str) -> dict:
        return self._request("DELETE", f"/objects/{quote(path)}", token).json()

    def create_namespace(self, name: str, token: str) -> None:
        self._request("POST", "/namespaces", token, json={"name": name})

    def create_collection(self, path: str, token: str) -> None:
        self._request("POST", "/collections", token, json={"path": path})

    def grant(self, permission: Permission, token: str) -> None:
        self._request("POST", "/grants", token, json=permission.to_dict())

    def set_retention(self, path: str, days: int, token: str) -> None:
        self._request("POST", "/retention", token, json={"path": path, "days": days})

    def list_path(self, path: str, token: str) -> dict:
        return self._request("GET", f"/list/{quote(path)}", token).json()

    def check(self, path: str, subject: str, mode: Mode, token: str) -> bool:
        resp = self._request(
            "GET",
            "/check",
            token,
            params={"path": path, "subject": subject, "mode": mode.name},
        )
        return resp.json()["allowed"]

    def list_containers(self, token: str) -> list[ContainerState]:
        payload = self._request("GET", "/containers", token).json()
        return [ContainerState.from_dict(s) for s in payload["containers"]]

    def register_container(self, state: ContainerState, token: str) -> None:
        self._request("POST", "/containers", token, json=state.to_dict())

    def deregister_container(self, container_id: str, token: str) -> None:
        self._request("DELETE", f"/containers/{quote(container_id)}", token)

    def plan(self, size: int, token: str, target_loss: float | None = None) -> dict:
        params: dict = {"size": size}
        if target_loss is not None:
            params["target_loss"] = target_loss
        return self._request("GET", "/plan", token, params=params).json()

    def run_gc(self, token: str, now_ms: int | None = None) -> list[dict]:
        resp = self._request("POST", "/gc", token, json={"now_ms": now_ms})
        return resp.json()["purged"]

    def health(self) -> dict:
        return self._request("GET", "/health").json()
