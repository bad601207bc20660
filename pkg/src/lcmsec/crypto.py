"""Symmetric primitives and signatures for the secured data path.

AES-128-GCM seals payloads, AES-CTR hides channel names, HKDF-SHA256 turns an
agreed group element into per-scope key material, and ECDSA over P-256 signs
management traffic. All block-cipher and signature work is delegated to the
``cryptography`` package (OpenSSL); this module pins the constructions.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .ecgroup import P256
from .errors import AuthFailure, IvReuse, TooShort

KEY_LEN = 16
SALT_BITS = 16
TAG_LEN = 16
IV_LEN = 12

#: sign/verify hash for management traffic
_SIG_HASH = ec.ECDSA(hashes.SHA256())

# Cipher contexts are reused across messages: constructing them costs more
# than the block work at our payload sizes. OpenSSL contexts must not be
# shared between threads, hence the thread-local caches.
_TLS = threading.local()
_CACHE_CAP = 64


def _cached(slot: str, key: bytes, build):
    cache = getattr(_TLS, slot, None)
    if cache is None:
        cache = {}
        setattr(_TLS, slot, cache)
    obj = cache.get(key)
    if obj is None:
        if len(cache) >= _CACHE_CAP:
            cache.clear()
        obj = cache[key] = build()
    return obj


def _aesgcm(key: bytes) -> AESGCM:
    return _cached("gcm", key, lambda: AESGCM(key))


def _ecb_encryptor(key: bytes):
    # ECB over successive counter blocks IS the CTR keystream; a single
    # long-lived encryptor works because ECB chains no state between blocks
    cache = getattr(_TLS, "ecb", None)
    if cache is None:
        cache = _TLS.ecb = {}
    enc = cache.get(key)
    if enc is None:
        if len(cache) >= _CACHE_CAP:
            cache.clear()
        enc = cache[key] = Cipher(algorithms.AES(key),
                                  modes.ECB()).encryptor()
    return enc


@dataclass(frozen=True)
class KeyMaterial:
    """Epoch-scoped symmetric secret derived from one key agreement.

    ``scope`` is the channel name the material protects, with the empty
    string meaning the group-wide channel-name key.
    """

    key: bytes
    salt: int
    epoch: int
    scope: str

    def __post_init__(self):
        if len(self.key) != KEY_LEN:
            raise ValueError("key must be 16 bytes")
        if not 0 <= self.salt < (1 << SALT_BITS):
            raise ValueError("salt must fit in 16 bits")


def build_iv(salt: int, sender_id: int, msg_seqno: int) -> bytes:
    """Deterministic 96-bit IV: salt | sender_id | msg_seqno | zero.

    All fields big-endian; the trailing 32 bits are always zero. Within one
    key the (sender_id, msg_seqno) pair maps injectively to IVs.
    """
    return struct.pack(">HHII", salt, sender_id, msg_seqno, 0)


class IvLog:
    """Debug-only reuse detector: remembers the last ``limit`` IVs per key."""

    def __init__(self, limit: int = 1 << 20):
        self.limit = limit
        self._seen: dict[bytes, set] = {}
        self._order: dict[bytes, list] = {}

    def check(self, key: bytes, iv: bytes) -> None:
        seen = self._seen.setdefault(key, set())
        if iv in seen:
            raise IvReuse(f"IV repeated under one key: {iv.hex()}")
        order = self._order.setdefault(key, [])
        seen.add(iv)
        order.append(iv)
        if len(order) > self.limit:
            seen.discard(order.pop(0))


def aead_seal(material: KeyMaterial, iv: bytes, plaintext: bytes,
              aad: bytes, iv_log: IvLog | None = None) -> bytes:
    """AES-128-GCM: returns ciphertext followed by the 16-byte tag.

    The caller guarantees IV uniqueness per key; ``iv_log`` is an optional
    debug tripwire for that contract.
    """
    if iv_log is not None:
        iv_log.check(material.key, iv)
    return _aesgcm(material.key).encrypt(iv, plaintext, aad)


def aead_open(material: KeyMaterial, iv: bytes, ciphertext_and_tag: bytes,
              aad: bytes) -> bytes:
    """Inverse of :func:`aead_seal`; raises on any mismatch."""
    if len(ciphertext_and_tag) < TAG_LEN:
        raise TooShort("ciphertext shorter than the authentication tag")
    try:
        return _aesgcm(material.key).decrypt(iv, ciphertext_and_tag, aad)
    except InvalidSignature:
        raise AuthFailure("AEAD tag mismatch")
    except Exception:
        # cryptography raises InvalidTag, a subclass of Exception only
        raise AuthFailure("AEAD tag mismatch")


def ctr_xor(key: bytes, counter_block: bytes, data: bytes) -> bytes:
    """Raw AES-CTR keystream XOR for a full 16-byte initial counter block."""
    n = len(data)
    if not n:
        return b""
    enc = _ecb_encryptor(key)
    if n <= 16:
        ks = enc.update(counter_block)
    else:
        start = int.from_bytes(counter_block, "big")
        ks = enc.update(b"".join(
            ((start + j) & ((1 << 128) - 1)).to_bytes(16, "big")
            for j in range((n + 15) // 16)))
    return (int.from_bytes(data, "big")
            ^ int.from_bytes(ks[:n], "big")).to_bytes(n, "big")


def ctr_crypt(material: KeyMaterial, iv: bytes, data: bytes) -> bytes:
    """AES-CTR stream encryption with the 96-bit IV and counter starting at 0.

    Self-inverse and length preserving; the first n output bytes depend only
    on the first n input bytes, so a receiver can decrypt a prefix bytewise.
    """
    return ctr_xor(material.key, iv + b"\x00\x00\x00\x00", data)


def ctr_keystream(material: KeyMaterial, iv: bytes, length: int) -> bytes:
    """Leading ``length`` keystream bytes for incremental prefix decryption."""
    return ctr_crypt(material, iv, b"\x00" * length)


def hkdf_bytes(seed: bytes, context: bytes, length: int) -> bytes:
    """Extract-then-expand over SHA-256; pure function of (seed, context)."""
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=None,
                info=context).derive(seed)


def kdf_expand(session_seed: bytes, context: bytes, *, epoch: int = 0,
               scope: str = "") -> KeyMaterial:
    """Derive key material from an agreed session seed.

    One 18-byte expand stream: 16 key bytes then 2 salt bytes. ``context``
    must bind the group, the channel, and the agreement instance id.
    """
    out = hkdf_bytes(session_seed, context, KEY_LEN + 2)
    salt = int.from_bytes(out[KEY_LEN:], "big")
    return KeyMaterial(key=out[:KEY_LEN], salt=salt, epoch=epoch, scope=scope)


def key_context(group: str, channel: str, instance_id: int) -> bytes:
    """Canonical KDF context for one agreement run."""
    return (b"lcmsec-key\x00" + group.encode("ascii") + b"\x00"
            + channel.encode("ascii") + b"\x00" + struct.pack(">Q", instance_id))


def derive_join_scalar(previous_seed: bytes, instance_id: int) -> int:
    """Deterministic ring scalar for the first incumbent representative.

    Every holder of the previous session seed can recompute it, which is what
    lets non-representative incumbents follow a join passively.
    """
    ctx = b"join-representative" + struct.pack(">Q", instance_id)
    return P256.scalar_from_bytes(hkdf_bytes(previous_seed, ctx, 48))


def sign(message: bytes, private_key: ec.EllipticCurvePrivateKey) -> bytes:
    return private_key.sign(message, _SIG_HASH)


def verify(message: bytes, signature: bytes,
           public_key: ec.EllipticCurvePublicKey) -> bool:
    try:
        public_key.verify(signature, message, _SIG_HASH)
        return True
    except InvalidSignature:
        return False
    except ValueError:
        return False
