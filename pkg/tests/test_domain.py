import random

import pytest

from dynostore.domain import (
    ContainerState,
    Mode,
    ObjectDescriptor,
    ObjectPath,
    Permission,
    parse_path,
)
from dynostore.errors import (
    EmptyPathError,
    IllegalCharacterError,
    InvalidParamsError,
    PathTooLongError,
)


def test_parse_renders_with_leading_separator():
    p = parse_path("alice/photos/cat.jpg")
    assert p.segments == ("alice", "photos", "cat.jpg")
    assert p.render() == "/alice/photos/cat.jpg"
    assert str(p) == p.render()


def test_leading_separator_is_optional():
    assert parse_path("/a/b") == parse_path("a/b")


def test_parse_roundtrip_is_stable():
    rng = random.Random(21)
    alphabet = "abcdefghijklmnopqrstuvwxyz0123456789._- "
    for _ in range(200):
        segs = tuple(
            "".join(rng.choices(alphabet, k=rng.randint(1, 12)))
            for _ in range(rng.randint(1, 6))
        )
        p = ObjectPath(segs)
        assert parse_path(p.render()) == p
        assert parse_path(p.render()[1:]) == p  # without the leading separator


@pytest.mark.parametrize("bad", ["", "/"])
def test_empty_path_rejected(bad):
    with pytest.raises(EmptyPathError):
        parse_path(bad)


@pytest.mark.parametrize("bad", ["a//b", "a/b/", "//a", "a/\x00b"])
def test_malformed_path_rejected(bad):
    with pytest.raises(IllegalCharacterError):
        parse_path(bad)


def test_unicode_segments_allowed():
    p = parse_path("ユーザー/写真/ねこ.jpg")
    assert p.namespace == "ユーザー"
    assert p.name == "ねこ.jpg"


def test_path_length_cap_counts_encoded_bytes():
    # 2047 two-byte characters + separator = 4095 bytes: fits
    parse_path("é" * 2047)
    with pytest.raises(PathTooLongError):
        parse_path("é" * 2048)


def test_parent_child_walk():
    p = parse_path("ns/a/b")
    assert p.parent() == parse_path("ns/a")
    assert p.parent().parent() == parse_path("ns")
    assert p.parent().parent().parent() is None
    assert p.parent().parent().is_root
    assert [q.render() for q in p.walk_up()] == ["/ns/a/b", "/ns/a", "/ns"]
    assert parse_path("ns/a").child("b") == p


def test_prefix_relation():
    assert parse_path("ns").is_prefix_of(parse_path("ns/a/b"))
    assert parse_path("ns/a").is_prefix_of(parse_path("ns/a"))
    assert not parse_path("ns/a").is_prefix_of(parse_path("ns/ab"))


def test_mode_ordering_and_parse():
    assert Mode.parse("read") is Mode.READ
    assert Mode.parse("WRITE") is Mode.WRITE
    assert Mode.ADMIN.covers(Mode.READ)
    assert Mode.WRITE.covers(Mode.WRITE)
    assert not Mode.READ.covers(Mode.WRITE)
    with pytest.raises(InvalidParamsError):
        Mode.parse("owner")


def _descriptor(**kw):
    base = dict(
        object_uuid="u-1",
        path=parse_path("ns/obj"),
        size_bytes=10,
        object_hash=bytes(32),
        n=3,
        k=2,
        chunk_locations=((0, "c0"), (1, "c1"), (2, "c2")),
        owner="ns",
        created_at_ms=17,
    )
    base.update(kw)
    return ObjectDescriptor(**base)


def test_descriptor_roundtrip():
    d = _descriptor()
    assert ObjectDescriptor.from_dict(d.to_dict()) == d


def test_descriptor_validation():
    with pytest.raises(InvalidParamsError):
        _descriptor(chunk_locations=((0, "c0"), (1, "c1")))  # missing index 2
    with pytest.raises(InvalidParamsError):
        _descriptor(chunk_locations=((0, "c0"), (1, "c1"), (1, "c2")))
    with pytest.raises(InvalidParamsError):
        # dispersal onto a repeated container defeats the fault tolerance
        _descriptor(chunk_locations=((0, "c0"), (1, "c0"), (2, "c2")))
    with pytest.raises(InvalidParamsError):
        _descriptor(n=2, k=3, chunk_locations=((0, "c0"), (1, "c1")))
    with pytest.raises(InvalidParamsError):
        _descriptor(object_hash=b"short")
    # regular mode stores one chunk; no distinctness requirement applies
    _descriptor(n=1, k=1, chunk_locations=((0, "c0"),))


def test_container_state_charge_clamps_at_zero():
    s = ContainerState(
        container_id="c",
        endpoint="",
        mem_total_bytes=100,
        mem_available_bytes=40,
        fs_total_bytes=100,
        fs_available_bytes=70,
    )
    charged = s.charged(50)
    assert charged.fs_available_bytes == 20
    assert charged.mem_available_bytes == 0  # not negative
    assert s.fs_available_bytes == 70  # original untouched


def test_container_state_validation():
    with pytest.raises(InvalidParamsError):
        ContainerState(
            container_id="c", endpoint="",
            mem_total_bytes=10, mem_available_bytes=11,
            fs_total_bytes=10, fs_available_bytes=0,
        )
    with pytest.raises(InvalidParamsError):
        ContainerState(
            container_id="c", endpoint="",
            mem_total_bytes=10, mem_available_bytes=10,
            fs_total_bytes=10, fs_available_bytes=10,
            annual_failure_rate=1.5,
        )


def test_permission_coerces_strings():
    p = Permission(subject="bob", mode="write", scope="alice/shared")
    assert p.mode is Mode.WRITE
    assert p.scope == parse_path("alice/shared")
    assert Permission.from_dict(p.to_dict()) == p


def test_permission_deny_roundtrip():
    p = Permission(subject="eve", mode=Mode.READ, scope=parse_path("a"), allow=False)
    assert not Permission.from_dict(p.to_dict()).allow
