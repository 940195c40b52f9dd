"""Information dispersal: systematic Reed-Solomon coding of objects into chunks.

An object is split into k equal payloads (zero-padded to a multiple of k) and
extended with n-k parity payloads so that *any* k of the n chunks rebuild the
object. Parity rows come from a Cauchy matrix over GF(2^8): every square
submatrix of a Cauchy matrix is invertible, so every k-subset of the
generator's rows is too, which is exactly the any-k guarantee.

Chunks travel as self-describing packages: a fixed 70-byte header (magic,
object uuid, index, n, k, pad length, object hash, payload length) followed by
the payload. The hash is SHA3-256 of the original unpadded object and is the
only integrity check in the system; corrupted payloads surface at decode time
as a hash mismatch, never as silently wrong bytes.
"""

from __future__ import annotations

import hashlib
import struct
import uuid as uuidlib
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BadMagicError,
    HashMismatchError,
    InconsistentHeadersError,
    InvalidParamsError,
    NotEnoughChunksError,
    NotEnoughContainersError,
    TruncatedError,
)
from .util import new_id

GF_POLY = 0x11D  # x^8 + x^4 + x^3 + x^2 + 1, generator 2
MAX_N = 255

MAGIC = b"DYN1"
_HEADER = struct.Struct("<4s16sHHHI32sQ")
HEADER_LEN = _HEADER.size


def _build_tables() -> tuple[list[int], list[int], np.ndarray]:
    exp = [0] * 512
    log = [0] * 256
    x = 1
    for i in range(255):
        exp[i] = x
        log[x] = i
        x <<= 1
        if x & 0x100:
            x ^= GF_POLY
    for i in range(255, 512):
        exp[i] = exp[i - 255]
    exp_np = np.array(exp, dtype=np.uint8)
    log_np = np.array(log, dtype=np.int64)
    mul = exp_np[(log_np[:, None] + log_np[None, :]) % 255]
    mul[0, :] = 0
    mul[:, 0] = 0
    return exp, log, np.ascontiguousarray(mul)


_EXP, _LOG, _MUL = _build_tables()


def gf_mul(a: int, b: int) -> int:
    if a == 0 or b == 0:
        return 0
    return _EXP[_LOG[a] + _LOG[b]]


def gf_inv(a: int) -> int:
    if a == 0:
        raise ZeroDivisionError("no inverse of 0 in GF(256)")
    return _EXP[255 - _LOG[a]]


def _mul_into(acc: np.ndarray, coef: int, row: np.ndarray) -> None:
    """acc ^= coef * row, elementwise over GF(256)."""
    if coef == 0:
        return
    if coef == 1:
        np.bitwise_xor(acc, row, out=acc)
    else:
        np.bitwise_xor(acc, _MUL[coef][row], out=acc)


def _mat_inv(matrix: list[list[int]]) -> list[list[int]]:
    """Invert a square matrix over GF(256) by Gauss-Jordan elimination."""
    k = len(matrix)
    aug = [list(row) + [1 if i == j else 0 for j in range(k)] for i, row in enumerate(matrix)]
    for col in range(k):
        pivot = next((r for r in range(col, k) if aug[r][col] != 0), None)
        if pivot is None:
            raise InvalidParamsError("singular reconstruction matrix")
        aug[col], aug[pivot] = aug[pivot], aug[col]
        inv_p = gf_inv(aug[col][col])
        aug[col] = [gf_mul(v, inv_p) for v in aug[col]]
        for r in range(k):
            factor = aug[r][col]
            if r == col or factor == 0:
                continue
            aug[r] = [v ^ gf_mul(factor, p) for v, p in zip(aug[r], aug[col])]
    return [row[k:] for row in aug]


@lru_cache(maxsize=None)
def parity_matrix(n: int, k: int) -> tuple[tuple[int, ...], ...]:
    """(n-k) x k Cauchy matrix: row i, col j = 1 / ((k+i) ^ j)."""
    return tuple(
        tuple(gf_inv((k + i) ^ j) for j in range(k)) for i in range(n - k)
    )


def _generator_row(index: int, n: int, k: int) -> list[int]:
    if index < k:
        return [1 if j == index else 0 for j in range(k)]
    return list(parity_matrix(n, k)[index - k])


def check_params(n: int, k: int) -> None:
    if not isinstance(n, int) or not isinstance(k, int):
        raise InvalidParamsError("n and k must be integers")
    if not (1 <= k <= n <= MAX_N):
        raise InvalidParamsError(f"need 1 <= k <= n <= {MAX_N}, got n={n} k={k}")


def hash_object(data: bytes) -> bytes:
    """SHA3-256 digest of the full object bytes."""
    return hashlib.sha3_256(data).digest()


def split(data: bytes, n: int, k: int) -> list[bytes]:
    """Split ``data`` into n payloads (k data + n-k parity), each ceil(len/k) bytes.

    Data payloads are contiguous runs of the zero-padded object, so with n == k
    their concatenation is the padded object itself.
    """
    check_params(n, k)
    pad = (-len(data)) % k
    padded = data + b"\x00" * pad
    stripe = len(padded) // k
    payloads = [padded[j * stripe : (j + 1) * stripe] for j in range(k)]
    if n > k:
        rows = np.frombuffer(padded, dtype=np.uint8).reshape(k, stripe)
        for coefs in parity_matrix(n, k):
            acc = np.zeros(stripe, dtype=np.uint8)
            for j, coef in enumerate(coefs):
                _mul_into(acc, coef, rows[j])
            payloads.append(acc.tobytes())
    return payloads


def _merge(indexed: Sequence[tuple[int, bytes]], n: int, k: int) -> bytes:
    """Rebuild the padded object from exactly k distinct (index, payload) pairs."""
    if len(indexed) != k:
        raise InvalidParamsError(f"merge needs exactly k={k} payloads")
    stripe = len(indexed[0][1])
    if any(len(p) != stripe for _, p in indexed):
        raise InconsistentHeadersError("chunk payloads differ in length")
    if all(idx < k for idx, _ in indexed):
        ordered = dict(indexed)
        return b"".join(ordered[j] for j in range(k))
    matrix = [_generator_row(idx, n, k) for idx, _ in indexed]
    inverse = _mat_inv(matrix)
    sources = [np.frombuffer(p, dtype=np.uint8) for _, p in indexed]
    out = np.empty((k, stripe), dtype=np.uint8)
    for j in range(k):
        acc = np.zeros(stripe, dtype=np.uint8)
        for t, coef in enumerate(inverse[j]):
            _mul_into(acc, coef, sources[t])
        out[j] = acc
    return out.tobytes()


@dataclass(frozen=True)
class ChunkPackage:
    """One self-describing chunk of a dispersed object."""

    object_uuid: str
    chunk_index: int
    n: int
    k: int
    pad_len: int
    object_hash: bytes
    payload: bytes

    @property
    def chunk_id(self) -> str:
        """Storage key a container files this chunk under."""
        return f"{self.object_uuid}.{self.chunk_index}"


def pack(pkg: ChunkPackage) -> bytes:
    """Serialize a chunk package to its wire/storage layout."""
    check_params(pkg.n, pkg.k)
    if not (0 <= pkg.chunk_index < pkg.n):
        raise InvalidParamsError(f"chunk index {pkg.chunk_index} out of range")
    if not (0 <= pkg.pad_len < pkg.k):
        raise InvalidParamsError(f"pad length {pkg.pad_len} out of range for k={pkg.k}")
    if len(pkg.object_hash) != 32:
        raise InvalidParamsError("object hash must be 32 bytes")
    header = _HEADER.pack(
        MAGIC,
        uuidlib.UUID(pkg.object_uuid).bytes,
        pkg.chunk_index,
        pkg.n,
        pkg.k,
        pkg.pad_len,
        pkg.object_hash,
        len(pkg.payload),
    )
    return header + pkg.payload


def unpack(buf: bytes) -> ChunkPackage:
    """Parse a stored chunk back into a package, validating the header."""
    if len(buf) < HEADER_LEN:
        raise TruncatedError(f"chunk shorter than header: {len(buf)} bytes")
    magic, uuid_bytes, index, n, k, pad_len, obj_hash, payload_len = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad chunk magic: {magic!r}")
    if len(buf) - HEADER_LEN != payload_len:
        raise TruncatedError(
            f"payload length mismatch: header says {payload_len}, have {len(buf) - HEADER_LEN}"
        )
    if not (1 <= k <= n <= MAX_N) or index >= n or pad_len >= k:
        raise InconsistentHeadersError(
            f"implausible chunk header: index={index} n={n} k={k} pad={pad_len}"
        )
    return ChunkPackage(
        object_uuid=str(uuidlib.UUID(bytes=uuid_bytes)),
        chunk_index=index,
        n=n,
        k=k,
        pad_len=pad_len,
        object_hash=obj_hash,
        payload=buf[HEADER_LEN:],
    )


def encode(
    data: bytes,
    n: int,
    k: int,
    targets: Sequence[str],
    *,
    object_uuid: str | None = None,
) -> list[tuple[ChunkPackage, str]]:
    """Disperse an object into n chunk packages assigned to distinct targets."""
    check_params(n, k)
    distinct = list(dict.fromkeys(targets))
    if len(distinct) < n:
        raise NotEnoughContainersError("Not enough containers available.")
    obj_uuid = object_uuid or new_id()
    digest = hash_object(data)
    pad = (-len(data)) % k
    payloads = split(data, n, k)
    return [
        (
            ChunkPackage(
                object_uuid=obj_uuid,
                chunk_index=i,
                n=n,
                k=k,
                pad_len=pad,
                object_hash=digest,
                payload=payloads[i],
            ),
            distinct[i],
        )
        for i in range(n)
    ]


def decode(chunks: Iterable[ChunkPackage], k: int | None = None) -> bytes:
    """Rebuild and verify an object from any k of its chunks.

    Raises NotEnoughChunksError below k distinct chunks,
    InconsistentHeadersError when chunks disagree about what they belong to,
    and HashMismatchError when the rebuilt bytes fail the integrity check.
    """
    pool = list(chunks)
    if not pool:
        raise NotEnoughChunksError("Not enough chunks.")
    first = pool[0]
    for c in pool:
        if (
            c.object_uuid != first.object_uuid
            or c.n != first.n
            or c.k != first.k
            or c.pad_len != first.pad_len
            or c.object_hash != first.object_hash
        ):
            raise InconsistentHeadersError("chunks describe different objects")
        if not (0 <= c.chunk_index < c.n):
            raise InconsistentHeadersError(f"chunk index {c.chunk_index} out of range")
    if k is not None and k != first.k:
        raise InconsistentHeadersError(
            f"metadata says k={k} but chunk headers say k={first.k}"
        )
    k_eff = first.k
    by_index: dict[int, ChunkPackage] = {}
    for c in pool:
        by_index.setdefault(c.chunk_index, c)
    if len(by_index) < k_eff:
        raise NotEnoughChunksError("Not enough chunks.")
    # Favor plain data chunks: merging them is a straight concatenation.
    chosen = sorted(by_index.values(), key=lambda c: (c.chunk_index >= k_eff, c.chunk_index))
    chosen = chosen[:k_eff]
    padded = _merge([(c.chunk_index, c.payload) for c in chosen], first.n, k_eff)
    total = len(padded)
    plain = padded[: total - first.pad_len] if first.pad_len <= total else b""
    actual = hash_object(plain)
    if actual != first.object_hash:
        raise HashMismatchError("The hashes are different.", first.object_hash, actual)
    return plain
