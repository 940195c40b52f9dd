"""Client library: encryption envelope, handles, bulk transfer, CLI exit codes."""

import json
import os

import pytest

from dynostore.auth import DEFAULT_TTL_MS
from dynostore.cli import (
    EXIT_DENIED,
    EXIT_ERROR,
    EXIT_INTEGRITY,
    EXIT_NOT_FOUND,
    EXIT_OK,
    EXIT_UNAVAILABLE,
    main,
)
from dynostore.client import (
    ClientConfig,
    DynoStoreClient,
    is_sealed,
    make_handle,
    parse_handle,
    seal,
    unseal,
)
from dynostore.errors import (
    BadHandleError,
    CollectionNotFoundError,
    EncryptionKeyMissingError,
    InvalidParamsError,
    NotFoundError,
    UnauthorizedError,
    WrongKeyError,
)
from dynostore.wire import start_gateway_server

KEY = bytes(range(32))
OTHER_KEY = bytes(range(1, 33))


# --- encryption envelope --------------------------------------------------------------


def test_seal_unseal_roundtrip(rng):
    for size in (0, 1, 17, 4096):
        data = rng.randbytes(size)
        blob = seal(data, KEY)
        assert is_sealed(blob) and not is_sealed(data or b"plain")
        assert blob != data
        assert unseal(blob, KEY) == data


def test_unseal_rejects_wrong_or_missing_key():
    blob = seal(b"secret bytes", KEY)
    with pytest.raises(WrongKeyError):
        unseal(blob, OTHER_KEY)
    with pytest.raises(EncryptionKeyMissingError):
        unseal(blob, None)
    with pytest.raises(InvalidParamsError):
        unseal(b"not an envelope", KEY)


def test_seal_hides_plaintext():
    data = b"A" * 1024
    blob = seal(data, KEY)
    assert data not in blob
    # same plaintext seals differently every time (fresh IV)
    assert seal(data, KEY) != blob


def test_key_coercion():
    config = ClientConfig(user="u", encryption_key=KEY.hex())
    assert DynoStoreClient(None, config)._key == KEY
    with pytest.raises(InvalidParamsError):
        DynoStoreClient(None, ClientConfig(user="u", encryption_key="abcd"))


# --- handles ---------------------------------------------------------------------------


def test_handle_roundtrip():
    handle = make_handle("alice/photos/cat pic", 3, b"content")
    path, version, fragment = parse_handle(handle)
    assert (path, version) == ("alice/photos/cat pic", 3)
    assert len(fragment) == 8 and fragment == handle.rsplit("#", 1)[1]


@pytest.mark.parametrize(
    "bad",
    [
        "http://alice/x@1#deadbeef",
        "dyn://alice/x#deadbeef",
        "dyn://alice/x@one#deadbeef",
        "dyn://alice/x@1#dead",
        "dyn://@1#deadbeef",
        "garbage",
    ],
)
def test_parse_handle_rejects_malformed(bad):
    with pytest.raises(BadHandleError):
        parse_handle(bad)


# --- push/pull against a live cluster ---------------------------------------------------


@pytest.fixture
def alice_client(cluster):
    c = cluster(containers=4)
    client = c.client("alice")
    client.ensure_path("alice/data/x")
    return c, client


def test_push_pull_roundtrip(alice_client):
    _, client = alice_client
    result = client.push("alice/data/greeting", b"hello")
    assert result.version == 1
    assert result.handle.startswith("dyn://alice/data/greeting@1#")
    assert client.pull("alice/data/greeting") == b"hello"
    assert client.exists("alice/data/greeting")
    assert not client.exists("alice/data/nope")


def test_push_infers_resilient_mode(alice_client):
    _, client = alice_client
    result = client.push("alice/data/wide", b"x" * 900, n=3, k=2)
    assert (result.descriptor.n, result.descriptor.k) == (3, 2)
    result = client.push("alice/data/planned", b"x" * 900, target_loss=0.2)
    assert result.descriptor.n > 1  # the planner picked a dispersal


def test_versioned_pull_and_handles(alice_client):
    _, client = alice_client
    first = client.push("alice/data/doc", b"draft one")
    second = client.push("alice/data/doc", b"draft two")
    assert (first.version, second.version) == (1, 2)
    assert client.pull("alice/data/doc") == b"draft two"
    assert client.pull("alice/data/doc", version=1) == b"draft one"
    assert client.pull_handle(first.handle) == b"draft one"
    assert client.pull_handle(second.handle) == b"draft two"

    tampered = second.handle.rsplit("#", 1)[0] + "#00000000"
    with pytest.raises(BadHandleError):
        client.pull_handle(tampered)


def test_encrypted_push_stays_opaque_to_the_store(alice_client):
    c, client = alice_client
    sealed_client = c.client("alice", encryption_key=KEY)
    secret = b"the payload nobody else reads"
    sealed_client.push("alice/data/secret", secret, encrypt=True)

    # what the store holds is an envelope, not the plaintext: fetch through
    # the gateway directly, below the client-side unsealing
    alice_token = c.gateway.authenticate("alice", "alice-credential")
    raw = c.gateway.download("alice/data/secret", alice_token)
    assert is_sealed(raw) and secret not in raw
    assert sealed_client.pull("alice/data/secret") == secret

    with pytest.raises(EncryptionKeyMissingError):
        client.pull("alice/data/secret")  # no key configured
    wrong = c.client("alice", encryption_key=OTHER_KEY)
    with pytest.raises(WrongKeyError):
        wrong.pull("alice/data/secret")
    with pytest.raises(EncryptionKeyMissingError):
        client.push("alice/data/more", b"x", encrypt=True)


def test_reauth_once_on_expired_token(alice_client):
    c, client = alice_client
    client.push("alice/data/x1", b"v")
    c.clock.advance(DEFAULT_TTL_MS + 1)  # every issued token just lapsed
    assert client.pull("alice/data/x1") == b"v"  # silently re-authenticated

    stale = c.tokens.issue("alice")
    c.clock.advance(DEFAULT_TTL_MS + 1)
    no_credential = DynoStoreClient(
        client.gateway, ClientConfig(user="alice", token=stale)
    )
    with pytest.raises(UnauthorizedError):
        no_credential.pull("alice/data/x1")


def test_push_many_keeps_order_and_isolates_failures(alice_client):
    _, client = alice_client
    items = [(f"alice/data/bulk{i}", bytes([i]) * 64) for i in range(10)]
    items.insert(4, ("alice/nowhere/bad", b"x"))  # no such collection
    results = client.push_many(items)
    assert len(results) == 11
    assert isinstance(results[4], CollectionNotFoundError)
    for i, result in enumerate(r for j, r in enumerate(results) if j != 4):
        assert result.version == 1
        assert result.descriptor.path.render() == f"/alice/data/bulk{i}"

    pulls = client.pull_many(
        [p for p, _ in items[:4]] + [("alice/data/ghost", None)]
    )
    assert [p for p in pulls[:4]] == [data for _, data in items[:4]]
    assert isinstance(pulls[4], NotFoundError)
    client.close()


def test_ensure_path_is_mkdir_p(alice_client):
    _, client = alice_client
    client.ensure_path("alice/a/b/c/leaf")
    client.ensure_path("alice/a/b/c/leaf")  # second call is a no-op
    client.push("alice/a/b/c/leaf", b"deep")
    assert client.list_path("alice/a/b") == {"collections": ["c"], "objects": []}


# --- the command line -------------------------------------------------------------------


@pytest.fixture
def cli_env(cluster, monkeypatch, tmp_path):
    c = cluster(containers=4)
    handle = start_gateway_server(c.gateway)
    monkeypatch.setenv("DYNOSTORE_GATEWAY", handle.url)
    monkeypatch.setenv("DYNOSTORE_USER", "alice")
    monkeypatch.setenv("DYNOSTORE_CREDENTIAL", "alice-credential")
    monkeypatch.delenv("DYNOSTORE_TOKEN", raising=False)
    monkeypatch.delenv("DYNOSTORE_KEY", raising=False)
    client = c.client("alice")
    client.ensure_path("alice/data/x")
    payload = tmp_path / "payload.bin"
    payload.write_bytes(b"cli payload bytes")
    yield c, str(payload), tmp_path
    handle.stop()


def test_cli_push_pull_roundtrip(cli_env, capsys):
    c, payload, tmp_path = cli_env
    assert main(["push", "alice/data/cli-obj", payload]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("stored alice/data/cli-obj v1")
    handle = out[1]
    assert handle.startswith("dyn://")

    dest = tmp_path / "fetched.bin"
    assert main(["pull", "alice/data/cli-obj", "-o", str(dest)]) == EXIT_OK
    assert dest.read_bytes() == b"cli payload bytes"

    dest2 = tmp_path / "fetched2.bin"
    assert main(["pull-handle", handle, "-o", str(dest2)]) == EXIT_OK
    assert dest2.read_bytes() == b"cli payload bytes"


def test_cli_push_json_and_dispersal_flags(cli_env, capsys):
    c, payload, _ = cli_env
    code = main(
        ["--json", "push", "alice/data/wide", payload, "--n", "3", "--k", "2"]
    )
    assert code == EXIT_OK
    info = json.loads(capsys.readouterr().out)
    assert info["n"] == 3 and info["k"] == 2 and info["version"] == 1


def test_cli_exists_and_ls(cli_env, capsys):
    c, payload, _ = cli_env
    assert main(["exists", "alice/data/ghost"]) == EXIT_NOT_FOUND
    main(["push", "alice/data/here", payload])
    capsys.readouterr()
    assert main(["exists", "alice/data/here"]) == EXIT_OK
    assert capsys.readouterr().out.strip() == "yes"
    assert main(["--json", "ls", "alice/data"]) == EXIT_OK
    listing = json.loads(capsys.readouterr().out)
    assert listing["objects"] == ["here"]


def test_cli_not_found_and_denied_exit_codes(cli_env, capsys):
    c, payload, _ = cli_env
    assert main(["pull", "alice/data/ghost"]) == EXIT_NOT_FOUND
    code = main(
        ["--user", "bob", "--credential", "bob-credential",
         "push", "alice/data/intrusion", payload]
    )
    assert code == EXIT_DENIED
    assert main(["--credential", "wrong", "push", "alice/data/x", payload]) == EXIT_DENIED


def test_cli_wrong_key_is_an_integrity_error(cli_env, capsys):
    c, payload, _ = cli_env
    assert main(["--key", KEY.hex(), "push", "alice/data/enc", payload,
                 "--encrypt"]) == EXIT_OK
    assert main(["--key", OTHER_KEY.hex(), "pull", "alice/data/enc"]) == EXIT_INTEGRITY
    assert "error:" in capsys.readouterr().err


def test_cli_unavailable_exit_code(cli_env, capsys):
    c, payload, _ = cli_env
    for cid in c.container_ids():
        c.kill_container(cid)
    assert main(["push", "alice/data/doomed", payload]) == EXIT_UNAVAILABLE


def test_cli_generic_errors(cli_env, capsys):
    c, payload, _ = cli_env
    assert main(["mkdir", "alice"]) == EXIT_ERROR  # already exists
    monkey_out = capsys.readouterr()
    assert "error:" in monkey_out.err
    assert main(["push", "alice/data/x", "/no/such/file"]) == EXIT_ERROR


def test_cli_grant_lets_another_user_in(cli_env, capsys):
    c, payload, tmp_path = cli_env
    main(["push", "alice/data/shared", payload])
    assert main(["grant", "alice/data", "bob", "read"]) == EXIT_OK
    dest = tmp_path / "bob.bin"
    code = main(
        ["--user", "bob", "--credential", "bob-credential",
         "pull", "alice/data/shared", "-o", str(dest)]
    )
    assert code == EXIT_OK
    assert dest.read_bytes() == b"cli payload bytes"


def test_cli_plan_report(cli_env, capsys):
    c, payload, _ = cli_env
    assert main(["--json", "plan", "65536"]) == EXIT_OK
    plan = json.loads(capsys.readouterr().out)
    assert plan["feasible"] and plan["n"] >= plan["k"]


def test_cli_needs_a_gateway(monkeypatch, capsys):
    monkeypatch.delenv("DYNOSTORE_GATEWAY", raising=False)
    assert main(["exists", "alice/x"]) == EXIT_ERROR
    assert "no gateway" in capsys.readouterr().err
