"""Homomorphic-encryption operation surface over fixed-point encodings.

INSECURE SIMULATION BACKEND. A ciphertext payload is the fixed-point encoded
plaintext tagged with the key id; it offers no confidentiality at all. It keeps
the exact API semantics a real leveled scheme would have (key separation,
fixed scale, multiplicative depth budget) so training code written against it
stays backend-portable.

Arithmetic is exact integer arithmetic on the encoded values. Every
ciphertext-ciphertext product is rescaled back to the common scale, which
introduces at most half a unit of the last place (0.5 / scale) per product.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

BACKEND_LABEL = "INSECURE-SIMULATION"
SCALE_BITS = 16
DEFAULT_SCALE = 1 << SCALE_BITS
MAX_DEPTH = 4
RECORD_VERSION = 1
_MAGIC = b"HESM"
_INT_LIMIT = 2 ** 62


class HEError(Exception):
    """Base class for cipher misuse."""


class KeyMismatchError(HEError):
    pass


class DepthExceededError(HEError):
    pass


class ScaleMismatchError(HEError):
    pass


def _key_id(public: bytes) -> str:
    return hashlib.sha256(b"key-id" + public).hexdigest()[:16]


def public_from_secret(secret: bytes) -> bytes:
    return hashlib.sha256(b"public" + secret).digest()


@dataclass(frozen=True)
class KeyPair:
    owner: str
    secret: bytes = field(repr=False)
    public: bytes

    @property
    def key_id(self) -> str:
        return _key_id(self.public)


def keygen(owner, seed: int = 0) -> KeyPair:
    """Deterministic key pair for ``owner`` under ``seed``."""
    secret = hashlib.sha256(f"secret:{seed}:{owner}".encode()).digest()
    return KeyPair(str(owner), secret, public_from_secret(secret))


def encode(x, scale: int = DEFAULT_SCALE) -> np.ndarray:
    """Round ``x * scale`` to the integer lattice (int64)."""
    v = np.asarray(x, dtype=float) * scale
    if not np.all(np.isfinite(v)) or np.any(np.abs(v) >= _INT_LIMIT):
        raise OverflowError("value outside the representable fixed-point range")
    return np.rint(v).astype(np.int64)


def decode(v, scale: int = DEFAULT_SCALE):
    out = np.asarray(v, dtype=np.int64) / scale
    return float(out) if out.ndim == 0 else out


class Ciphertext:
    """Opaque encrypted tensor. Equality comparison is deliberately refused."""

    __slots__ = ("_payload", "scale", "key_id", "depth")
    backend = BACKEND_LABEL

    def __init__(self, payload: np.ndarray, scale: int, key_id: str, depth: int):
        self._payload = np.asarray(payload, dtype=np.int64)
        self.scale = int(scale)
        self.key_id = key_id
        self.depth = int(depth)

    @property
    def shape(self) -> tuple[int, ...]:
        return self._payload.shape

    @property
    def T(self) -> "Ciphertext":
        return Ciphertext(self._payload.T, self.scale, self.key_id, self.depth)

    def __getitem__(self, idx) -> "Ciphertext":
        return Ciphertext(self._payload[idx], self.scale, self.key_id, self.depth)

    def __eq__(self, other):
        raise TypeError("ciphertexts cannot be compared for plaintext equality")

    __hash__ = None

    def __repr__(self):
        return (f"Ciphertext(shape={self.shape}, key_id={self.key_id!r}, scale={self.scale}, "
                f"depth={self.depth}, backend={BACKEND_LABEL})")


def enc(public: bytes, x, scale: int = DEFAULT_SCALE) -> Ciphertext:
    return Ciphertext(encode(x, scale), scale, _key_id(public), 0)


def dec(secret: bytes, ct: Ciphertext):
    if _key_id(public_from_secret(secret)) != ct.key_id:
        raise KeyMismatchError("secret key does not match the ciphertext key")
    return decode(ct._payload, ct.scale)


def _check_pair(a: Ciphertext, b: Ciphertext) -> None:
    if a.key_id != b.key_id:
        raise KeyMismatchError(f"key mismatch: {a.key_id} vs {b.key_id}")
    if a.scale != b.scale:
        raise ScaleMismatchError(f"scale mismatch: {a.scale} vs {b.scale}")


def _checked(payload: np.ndarray) -> np.ndarray:
    if payload.size and np.max(np.abs(payload)) >= _INT_LIMIT:
        raise OverflowError("fixed-point payload overflow")
    return payload


def hadd(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    _check_pair(a, b)
    return Ciphertext(_checked(a._payload + b._payload), a.scale, a.key_id, max(a.depth, b.depth))


def hsub(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    _check_pair(a, b)
    return Ciphertext(_checked(a._payload - b._payload), a.scale, a.key_id, max(a.depth, b.depth))


def _rescale(product: np.ndarray, scale: int) -> np.ndarray:
    # round half up back to the working scale
    return np.floor_divide(product + scale // 2, scale)


def _product(pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    bound = float(np.max(np.abs(pa), initial=0)) * float(np.max(np.abs(pb), initial=0))
    if bound >= 2.0 ** 63:
        raise OverflowError("fixed-point product overflow")
    return pa * pb


def _next_depth(a: Ciphertext, b: Ciphertext) -> int:
    depth = max(a.depth, b.depth) + 1
    if depth > MAX_DEPTH:
        raise DepthExceededError(f"multiplicative depth {depth} exceeds limit {MAX_DEPTH}")
    return depth


def hmul(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    """Elementwise product (with broadcasting), rescaled to the common scale."""
    _check_pair(a, b)
    depth = _next_depth(a, b)
    return Ciphertext(_rescale(_product(a._payload, b._payload), a.scale), a.scale, a.key_id, depth)


def hmul_plain(a: Ciphertext, c) -> Ciphertext:
    """Multiply by a public real constant (scalar or broadcastable array).

    Plaintext-constant products do not consume depth; the result is rounded
    to the working scale.
    """
    v = a._payload.astype(float) * np.asarray(c, dtype=float)
    if np.any(np.abs(v) >= _INT_LIMIT):
        raise OverflowError("fixed-point payload overflow")
    return Ciphertext(np.rint(v).astype(np.int64), a.scale, a.key_id, a.depth)


def hsum(a: Ciphertext, axis=None) -> Ciphertext:
    return Ciphertext(_checked(np.sum(a._payload, axis=axis)), a.scale, a.key_id, a.depth)


def matmul(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    """Encrypted matrix product built from elementwise ``hmul`` and sums.

    Each of the inner-dimension products is rescaled separately, so the
    decrypted result is within ``inner * 0.5 / scale`` of the exact product of
    the decrypted operands.
    """
    _check_pair(a, b)
    if a._payload.ndim != 2 or b._payload.ndim not in (1, 2):
        raise ValueError("matmul expects a matrix times a matrix or vector")
    pb = b._payload if b._payload.ndim == 2 else b._payload[:, None]
    if a.shape[1] != pb.shape[0]:
        raise ValueError(f"shape mismatch {a.shape} @ {b.shape}")
    depth = _next_depth(a, b)
    prod = _rescale(_product(a._payload[:, :, None], pb[None, :, :]), a.scale)
    out = _checked(prod.sum(axis=1))
    if b._payload.ndim == 1:
        out = out[:, 0]
    return Ciphertext(out, a.scale, a.key_id, depth)


def refresh(keys: KeyPair, ct: Ciphertext) -> Ciphertext:
    """Reset the depth of a ciphertext by re-encryption under the key holder.

    Stands in for bootstrapping; the value is unchanged.
    """
    if keys.key_id != ct.key_id:
        raise KeyMismatchError("refresh key does not match the ciphertext key")
    return Ciphertext(ct._payload.copy(), ct.scale, ct.key_id, 0)


def zeros_like_key(public: bytes, shape, scale: int = DEFAULT_SCALE) -> Ciphertext:
    return Ciphertext(np.zeros(shape, dtype=np.int64), scale, _key_id(public), 0)


def to_bytes(ct: Ciphertext) -> bytes:
    """Versioned binary record: version, backend, key_id, scale, depth, payload."""
    label = BACKEND_LABEL.encode()
    kid = ct.key_id.encode()
    shape = ct.shape
    head = (_MAGIC + struct.pack("<H", RECORD_VERSION)
            + struct.pack("<H", len(label)) + label
            + struct.pack("<H", len(kid)) + kid
            + struct.pack("<QHB", ct.scale, ct.depth, len(shape))
            + struct.pack(f"<{len(shape)}Q", *shape))
    return head + ct._payload.astype("<i8").tobytes()


def from_bytes(blob: bytes) -> Ciphertext:
    if blob[:4] != _MAGIC:
        raise ValueError("not a ciphertext record")
    pos = 4
    (version,) = struct.unpack_from("<H", blob, pos)
    pos += 2
    if version != RECORD_VERSION:
        raise ValueError(f"unsupported record version {version}")
    (n,) = struct.unpack_from("<H", blob, pos)
    pos += 2
    label = blob[pos:pos + n].decode()
    pos += n
    if label != BACKEND_LABEL:
        raise ValueError(f"record written by unknown backend {label!r}")
    (n,) = struct.unpack_from("<H", blob, pos)
    pos += 2
    key_id = blob[pos:pos + n].decode()
    pos += n
    scale, depth, ndim = struct.unpack_from("<QHB", blob, pos)
    pos += struct.calcsize("<QHB")
    shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
    pos += 8 * ndim
    payload = np.frombuffer(blob, dtype="<i8", offset=pos).astype(np.int64).reshape(shape)
    return Ciphertext(payload, scale, key_id, depth)
