"""Wire formats: secured data packets, fragments, and management envelopes.

Three magics distinguish the packet families on one multicast group; a fourth
encodes the plaintext baseline used for benchmark comparisons. All integers
are big-endian fixed width, all variable fields carry 32-bit length prefixes,
and decoders reject anything whose re-encoding differs from the input.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple

from .errors import (BadMagic, BadName, InconsistentFragment, NonCanonical,
                     OversizeMessage, Truncated)

MAGIC_SECURE = 0x4C433353
MAGIC_FRAGMENT = 0x4C433346
MAGIC_MANAGEMENT = 0x4C43334D
MAGIC_PLAIN = 0x4C433032

#: channel name bound, terminator included
MAX_CHANNELNAME = 256

_SECURE_HDR = struct.Struct(">IIH")
_FRAG_HDR = struct.Struct(">IIHIIHH")
SECURE_HEADER_LEN = _SECURE_HDR.size          # 10
FRAGMENT_HEADER_LEN = _FRAG_HDR.size          # 22
#: smallest legal secure tail: one encrypted NUL plus the 16-byte tag
MIN_SECURE_TAIL = 17


class MsgKind(IntEnum):
    JOIN = 1
    JOIN_RESPONSE = 2
    GKA_ROUND1 = 3
    GKA_ROUND2 = 4


class SecurePacket(NamedTuple):
    """Header fields plus the undifferentiated encrypted tail.

    The tail is enc_channelname followed by the AEAD body; only a key holder
    can find the boundary, so the codec never splits it.
    """

    seqno: int
    sender_id: int
    tail: bytes


class FragmentPacket(NamedTuple):
    """One slice of an oversized secured message.

    ``section`` is enc_channelname followed by the first chunk for fragment
    number 0 and the bare chunk for every other fragment.
    """

    seqno: int
    sender_id: int
    full_body_length: int
    fragment_offset: int
    fragment_no: int
    fragments_total: int
    section: bytes


@dataclass(frozen=True)
class ManagementEnvelope:
    kind: MsgKind
    group: str
    channel: str
    payload: bytes
    signer_ref: bytes          # SHA-256 of the signer's certificate DER
    signature: bytes


def peek_magic(data: bytes) -> int:
    if len(data) < 4:
        raise Truncated("no room for a magic")
    return struct.unpack_from(">I", data)[0]


# ------------------------------------------------------------- secure packets


def pack_secure(seqno: int, sender_id: int, tail: bytes) -> bytes:
    return _SECURE_HDR.pack(MAGIC_SECURE, seqno, sender_id) + tail


def encode_secure(p: SecurePacket) -> bytes:
    return pack_secure(p.seqno, p.sender_id, p.tail)


def try_unpack_secure(data: bytes) -> tuple[int, int, bytes] | None:
    """Dispatch for the hot receive path: (seqno, sender_id, tail) when
    ``data`` is a well-formed secure packet, else None."""
    if len(data) >= SECURE_HEADER_LEN + MIN_SECURE_TAIL:
        magic, seqno, sender = _SECURE_HDR.unpack_from(data)
        if magic == MAGIC_SECURE:
            return seqno, sender, data[SECURE_HEADER_LEN:]
    return None


def decode_secure(data: bytes) -> SecurePacket:
    if len(data) < SECURE_HEADER_LEN:
        raise Truncated(f"{len(data)} bytes, header needs {SECURE_HEADER_LEN}")
    magic, seqno, sender = _SECURE_HDR.unpack_from(data)
    if magic != MAGIC_SECURE:
        raise BadMagic(hex(magic))
    tail = data[SECURE_HEADER_LEN:]
    if len(tail) < MIN_SECURE_TAIL:
        raise Truncated(f"secure tail {len(tail)} < {MIN_SECURE_TAIL}")
    return SecurePacket(seqno=seqno, sender_id=sender, tail=tail)


# ---------------------------------------------------------- plaintext baseline


def encode_plain_lcm(name: str, seqno: int, payload: bytes) -> bytes:
    if not name.isascii() or "\x00" in name:
        raise BadName(repr(name))
    return (struct.pack(">II", MAGIC_PLAIN, seqno)
            + name.encode("ascii") + b"\x00" + payload)


def decode_plain_lcm(data: bytes) -> tuple[str, int, bytes]:
    if len(data) < 8:
        raise Truncated("plain header needs 8 bytes")
    magic, seqno = struct.unpack_from(">II", data)
    if magic != MAGIC_PLAIN:
        raise BadMagic(hex(magic))
    end = data.find(b"\x00", 8)
    if end < 0:
        raise BadName("unterminated channel name")
    name = data[8:end]
    if not name.isascii():
        raise BadName("non-ASCII channel name")
    return name.decode("ascii"), seqno, data[end + 1:]


# ---------------------------------------------------------------- fragments


def encode_fragment(f: FragmentPacket) -> bytes:
    return _FRAG_HDR.pack(MAGIC_FRAGMENT, f.seqno, f.sender_id,
                          f.full_body_length, f.fragment_offset,
                          f.fragment_no, f.fragments_total) + f.section


def decode_fragment(data: bytes) -> FragmentPacket:
    if len(data) < FRAGMENT_HEADER_LEN:
        raise Truncated(f"{len(data)} bytes, fragment header needs "
                        f"{FRAGMENT_HEADER_LEN}")
    magic, seqno, sender, full_len, offset, no, total = \
        _FRAG_HDR.unpack_from(data)
    if magic != MAGIC_FRAGMENT:
        raise BadMagic(hex(magic))
    if total == 0 or no >= total:
        raise InconsistentFragment(f"fragment {no} of {total}")
    return FragmentPacket(seqno=seqno, sender_id=sender,
                          full_body_length=full_len, fragment_offset=offset,
                          fragment_no=no, fragments_total=total,
                          section=data[FRAGMENT_HEADER_LEN:])


def fragment(enc_channelname: bytes, body: bytes, seqno: int, sender_id: int,
             mtu: int) -> list[SecurePacket | FragmentPacket]:
    """Split one sealed message into datagram-sized packets.

    Returns a single SecurePacket when everything fits in ``mtu``, otherwise
    FragmentPackets with maximal chunks. Encryption already happened; this
    only slices bytes.
    """
    if len(body) > 0xFFFFFFFF:
        raise OversizeMessage(f"body of {len(body)} bytes")
    if SECURE_HEADER_LEN + len(enc_channelname) + len(body) <= mtu:
        return [SecurePacket(seqno=seqno, sender_id=sender_id,
                             tail=enc_channelname + body)]
    cap = mtu - FRAGMENT_HEADER_LEN
    first_cap = cap - len(enc_channelname)
    if first_cap < 1:
        raise OversizeMessage("mtu leaves no room after the channel name")
    bounds = [min(first_cap, len(body))]
    while bounds[-1] < len(body):
        bounds.append(min(bounds[-1] + cap, len(body)))
    total = len(bounds)
    if total > 0xFFFF:
        raise OversizeMessage(f"{total} fragments exceed the 16-bit count")
    out: list[SecurePacket | FragmentPacket] = []
    start = 0
    for no, end in enumerate(bounds):
        chunk = body[start:end]
        section = enc_channelname + chunk if no == 0 else chunk
        out.append(FragmentPacket(
            seqno=seqno, sender_id=sender_id, full_body_length=len(body),
            fragment_offset=start, fragment_no=no, fragments_total=total,
            section=section))
        start = end
    return out


class ReassemblyBuffer:
    """Order-independent fragment collector with bounded memory.

    Completion yields (enc_channelname, body). Incomplete messages are
    dropped after ``timeout`` seconds and each sender may hold at most
    ``per_sender`` messages in flight, oldest evicted first.
    """

    def __init__(self, timeout: float = 5.0, per_sender: int = 16):
        self.timeout = timeout
        self.per_sender = per_sender
        # (sender, seqno) -> [first_seen, full_len, total, {no: section}]
        self._slots: dict[tuple[int, int], list] = {}

    def _evict(self, now: float, sender: int):
        for key, slot in list(self._slots.items()):
            if now - slot[0] > self.timeout:
                del self._slots[key]
        mine = [k for k in self._slots if k[0] == sender]
        while len(mine) >= self.per_sender:
            oldest = min(mine, key=lambda k: self._slots[k][0])
            del self._slots[oldest]
            mine.remove(oldest)

    def add(self, f: FragmentPacket, now: float
            ) -> tuple[bytes, bytes] | None:
        key = (f.sender_id, f.seqno)
        slot = self._slots.get(key)
        if slot is None:
            self._evict(now, f.sender_id)
            slot = [now, f.full_body_length, f.fragments_total, {}]
            self._slots[key] = slot
        if (f.full_body_length, f.fragments_total) != (slot[1], slot[2]):
            del self._slots[key]
            raise InconsistentFragment(
                "conflicting totals for one message id")
        prior = slot[3].get(f.fragment_no)
        if prior is not None:
            if prior != (f.fragment_offset, f.section):
                del self._slots[key]
                raise InconsistentFragment("conflicting duplicate fragment")
            return None
        slot[3][f.fragment_no] = (f.fragment_offset, f.section)
        if len(slot[3]) < slot[2]:
            return None
        del self._slots[key]
        return self._assemble(slot)

    @staticmethod
    def _assemble(slot) -> tuple[bytes, bytes]:
        _, full_len, total, parts = slot
        # chunks 1..n-1 arrive bare, so fragment 0's chunk length (and with
        # it the channel-name boundary) follows from the length budget
        rest = sum(len(parts[no][1]) for no in range(1, total))
        first_offset, first_section = parts[0]
        chunk0_len = full_len - rest
        if first_offset != 0 or not 0 <= chunk0_len <= len(first_section):
            raise InconsistentFragment("fragment lengths disagree")
        name_len = len(first_section) - chunk0_len
        enc_name = first_section[:name_len]
        chunks = [first_section[name_len:]]
        expected_offset = chunk0_len
        for no in range(1, total):
            offset, section = parts[no]
            if offset != expected_offset:
                raise InconsistentFragment("offsets not gap-free")
            chunks.append(section)
            expected_offset += len(section)
        if expected_offset != full_len:
            raise InconsistentFragment("reassembled length mismatch")
        return enc_name, b"".join(chunks)

    def __len__(self):
        return len(self._slots)


# ------------------------------------------------------ management envelopes


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise Truncated(f"wanted {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())

    def done(self):
        if self.pos != len(self.data):
            raise NonCanonical(f"{len(self.data) - self.pos} trailing bytes")


def _blob(b: bytes) -> bytes:
    return struct.pack(">I", len(b)) + b


def signed_region(kind: MsgKind, group: str, channel: str,
                  payload: bytes) -> bytes:
    """Exactly the bytes a management signature covers."""
    return (struct.pack(">B", kind)
            + _blob(group.encode("ascii"))
            + _blob(channel.encode("ascii"))
            + _blob(payload))


def encode_management(env: ManagementEnvelope) -> bytes:
    if len(env.signer_ref) != 32:
        raise NonCanonical("signer reference must be 32 bytes")
    return (struct.pack(">I", MAGIC_MANAGEMENT)
            + signed_region(env.kind, env.group, env.channel, env.payload)
            + env.signer_ref + _blob(env.signature))


def decode_management(data: bytes) -> ManagementEnvelope:
    r = _Reader(data)
    if r.u32() != MAGIC_MANAGEMENT:
        raise BadMagic("not a management envelope")
    kind_raw = r.u8()
    try:
        kind = MsgKind(kind_raw)
    except ValueError:
        raise NonCanonical(f"unknown message kind {kind_raw}")
    group_raw = r.blob()
    channel_raw = r.blob()
    if not group_raw.isascii() or not channel_raw.isascii():
        raise NonCanonical("non-ASCII scope")
    payload = r.blob()
    signer_ref = r.take(32)
    signature = r.blob()
    r.done()
    env = ManagementEnvelope(kind=kind, group=group_raw.decode("ascii"),
                             channel=channel_raw.decode("ascii"),
                             payload=payload, signer_ref=signer_ref,
                             signature=signature)
    if encode_management(env) != data:
        raise NonCanonical("re-encoding differs")
    return env


# ------------------------------------------------- management payload layouts


def encode_join_payload(t_ms: int, cert_der: bytes) -> bytes:
    return struct.pack(">Q", t_ms) + _blob(cert_der)


def parse_join_payload(payload: bytes) -> tuple[int, bytes]:
    r = _Reader(payload)
    t_ms = r.u64()
    cert = r.blob()
    r.done()
    return t_ms, cert


def _cert_set(certs: list[tuple[int, bytes]]) -> bytes:
    ordered = sorted(certs, key=lambda c: (c[0], c[1]))
    return struct.pack(">I", len(ordered)) + b"".join(
        _blob(der) for _, der in ordered)


def encode_join_response_payload(t_ms: int,
                                 participants: list[tuple[int, bytes]],
                                 joiners: list[tuple[int, bytes]],
                                 last_instance_id: int) -> bytes:
    """Cert sets are (uid, DER) pairs; encoding sorts them by uid."""
    return (struct.pack(">Q", t_ms) + _cert_set(participants)
            + _cert_set(joiners) + struct.pack(">Q", last_instance_id))


def parse_join_response_payload(payload: bytes
                                ) -> tuple[int, list[bytes], list[bytes], int]:
    r = _Reader(payload)
    t_ms = r.u64()
    out: list[list[bytes]] = []
    for _ in range(2):
        count = r.u32()
        if count > 0xFFFF:
            raise NonCanonical(f"absurd certificate count {count}")
        out.append([r.blob() for _ in range(count)])
    last_instance = r.u64()
    r.done()
    return t_ms, out[0], out[1], last_instance


def encode_gka_payload(uid: int, round_no: int, element: bytes,
                       instance_id: int) -> bytes:
    return (struct.pack(">HB", uid, round_no) + _blob(element)
            + struct.pack(">Q", instance_id))


def parse_gka_payload(payload: bytes) -> tuple[int, int, bytes, int]:
    r = _Reader(payload)
    uid = r.u16()
    round_no = r.u8()
    if round_no not in (1, 2):
        raise NonCanonical(f"round {round_no} is not 1 or 2")
    element = r.blob()
    instance_id = r.u64()
    r.done()
    return uid, round_no, element, instance_id
