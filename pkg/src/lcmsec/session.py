"""Per-node data path: encrypting publishes, decrypting receives.

Channel names travel encrypted under the group-wide key, payloads under the
per-channel key with the plaintext name as associated data, so one node can
filter traffic by topic while only channel members read bodies. Both IVs of a
message reuse one (sender id, sequence number) pair; distinct per-key salts
keep the streams apart.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

from . import wire
from .crypto import KeyMaterial, aead_seal, aead_open, build_iv, ctr_crypt
from .errors import (AuthFailure, BadName, CounterExhausted, LcmsecError,
                     NoKey, NotAuthorized, TooShort)
from .identity import LCMDomain, PeerCertificate, authorize
from .wire import (MAGIC_FRAGMENT, MAGIC_PLAIN, MAGIC_SECURE,
                   MAGIC_MANAGEMENT, MAX_CHANNELNAME, SECURE_HEADER_LEN,
                   ReassemblyBuffer, SecurePacket, decode_fragment,
                   decode_secure, encode_fragment, encode_secure, pack_secure,
                   peek_magic, try_unpack_secure)

DEFAULT_MTU = 1400
DEFAULT_WINDOW = 1024
DEFAULT_GRACE = 10.0

_SEQNO_LIMIT = 0xFFFFFFFF


@dataclass(frozen=True)
class SessionConfig:
    """Static node configuration, parseable from key=value text."""

    group: str
    channels: tuple[str, ...] = ()
    cert: str | None = None
    key: str | None = None
    roots: str | None = None
    mtu: int = DEFAULT_MTU
    replay_window: int = DEFAULT_WINDOW
    epoch_grace: float = DEFAULT_GRACE
    ttl: int = 0

    def __post_init__(self):
        if not self.group:
            raise ValueError("group is required")
        if self.replay_window <= 0 or self.replay_window % 32:
            raise ValueError("replay_window must be a positive multiple "
                             "of 32")
        if self.mtu < 64:
            raise ValueError(f"mtu {self.mtu} is below the 64-byte floor")


_CONFIG_FIELDS = {
    "group": str, "channels": str, "cert": str, "key": str, "roots": str,
    "mtu": int, "replay_window": int, "epoch_grace": float, "ttl": int,
}


def parse_config(text: str) -> SessionConfig:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ValueError(f"line {lineno}: expected key = value")
        if key not in _CONFIG_FIELDS:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _CONFIG_FIELDS[key](value)
    if "channels" in values:
        names = [c.strip() for c in values["channels"].split(",") if c.strip()]
        values["channels"] = tuple(names)
    if "group" not in values:
        raise ValueError("group is required")
    return SessionConfig(**values)


def load_config(path) -> SessionConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


class SendCounter:
    """Group-wide monotone message counter; all channels draw from it."""

    def __init__(self):
        self._value = 0
        self._lock = threading.Lock()

    @property
    def value(self) -> int:
        return self._value

    def force(self, value: int):
        self._value = value

    def next(self) -> int:
        with self._lock:
            # the topmost value is kept as the exhaustion sentinel
            if self._value >= _SEQNO_LIMIT:
                raise CounterExhausted("sequence number space spent; re-key")
            out = self._value
            self._value += 1
            return out

    def reset(self):
        with self._lock:
            self._value = 0


class ReplayWindow:
    """Sliding-bitmap duplicate filter in the style of RFC 6479.

    Accepts each sequence number at most once; numbers that fell behind the
    window (offset >= size from the highest seen) are rejected as stale.
    """

    def __init__(self, size: int = DEFAULT_WINDOW):
        if size <= 0 or size % 32:
            raise ValueError("window size must be a positive multiple of 32")
        self.size = size
        self._highest: int | None = None
        self._bits = 0                    # bit k == (highest - k) accepted

    def check(self, seqno: int) -> bool:
        """True iff seqno is fresh; a True result records it."""
        if self._highest is None:
            self._highest = seqno
            self._bits = 1
            return True
        if seqno > self._highest:
            shift = seqno - self._highest
            if shift >= self.size:
                self._bits = 1
            else:
                mask = (1 << self.size) - 1
                self._bits = ((self._bits << shift) | 1) & mask
            self._highest = seqno
            return True
        offset = self._highest - seqno
        if offset >= self.size:
            return False
        if (self._bits >> offset) & 1:
            return False
        self._bits |= 1 << offset
        return True


class KeyStore:
    """Newest-first key material, old epoch kept for a grace period.

    Live lists are cached until the earliest grace expiry among their
    entries, since the store is consulted for every single datagram.
    """

    def __init__(self, grace: float = DEFAULT_GRACE):
        self.grace = grace
        self._group: list[list] = []              # [material, expires_at]
        self._channels: dict[str, list[list]] = {}
        self._cache: dict[str | None, tuple[list[KeyMaterial], float]] = {}

    def _install(self, slots: list[list], material: KeyMaterial,
                 now: float) -> list[list]:
        if slots and slots[0][0].epoch == material.epoch:
            slots[0][0] = material
            return slots
        kept = slots[:1]
        for slot in kept:
            slot[1] = now + self.grace
        return [[material, None]] + kept

    def _live(self, label: str | None, slots: list[list],
              now: float) -> list[KeyMaterial]:
        hit = self._cache.get(label)
        if hit is not None and now < hit[1]:
            return hit[0]
        live = [m for m, expiry in slots if expiry is None or now < expiry]
        until = min((e for _, e in slots if e is not None and now < e),
                    default=math.inf)
        self._cache[label] = (live, until)
        return live

    def install_group(self, material: KeyMaterial, now: float):
        self._group = self._install(self._group, material, now)
        self._cache.pop(None, None)

    def install_channel(self, channel: str, material: KeyMaterial,
                        now: float):
        slots = self._channels.get(channel, [])
        self._channels[channel] = self._install(slots, material, now)
        self._cache.pop(channel, None)

    def group_keys(self, now: float) -> list[KeyMaterial]:
        return self._live(None, self._group, now)

    def channel_keys(self, channel: str, now: float) -> list[KeyMaterial]:
        return self._live(channel, self._channels.get(channel, []), now)

    def channel_epochs(self, channel: str) -> set[int]:
        return {m.epoch for m, _ in self._channels.get(channel, [])}


@dataclass
class SessionStats:
    delivered: int = 0
    published: int = 0
    drops: dict[str, int] = field(default_factory=dict)

    def drop(self, reason: str):
        self.drops[reason] = self.drops.get(reason, 0) + 1

    @property
    def dropped(self) -> int:
        return sum(self.drops.values())


class Session:
    """Publish/receive pipeline for one multicast group.

    Key material and the sender id arrive from outside (the discovery layer)
    through the install methods; everything here is pure computation, so it
    never blocks and never talks to a socket.
    """

    def __init__(self, group: str, subscriptions=(), *,
                 cert: PeerCertificate | None = None,
                 mtu: int = DEFAULT_MTU, window_size: int = DEFAULT_WINDOW,
                 grace: float = DEFAULT_GRACE):
        self.group = group
        self.subscriptions = set(subscriptions)
        self.cert = cert
        self.mtu = mtu
        self.window_size = window_size
        self.keys = KeyStore(grace)
        self.counter = SendCounter()
        self.sender_id: int | None = None
        self.stats = SessionStats()
        self._windows: dict[tuple[str, int, int], ReplayWindow] = {}
        self._reassembly = ReassemblyBuffer()
        self._publishable: dict[str, bool] = {}
        self._names: dict[str, bytes] = {}

    # ------------------------------------------------------------ key plumbing

    def install_group(self, material: KeyMaterial, sender_id: int,
                      now: float):
        """New group epoch: fresh name key, fresh sender id, counter reset."""
        self.keys.install_group(material, now)
        self.sender_id = sender_id
        self.counter.reset()

    def install_channel(self, channel: str, material: KeyMaterial,
                        now: float):
        self.keys.install_channel(channel, material, now)
        keep = self.keys.channel_epochs(channel)
        for key in [k for k in self._windows
                    if k[0] == channel and k[2] not in keep]:
            del self._windows[key]

    # --------------------------------------------------------------- publish

    def _check_publishable(self, channel: str):
        if self.cert is None:
            return
        ok = self._publishable.get(channel)
        if ok is None:
            try:
                authorize(self.cert, LCMDomain(self.group, channel))
                ok = True
            except NotAuthorized:
                ok = False
            self._publishable[channel] = ok
        if not ok:
            raise NotAuthorized(f"certificate covers no {channel!r} on "
                                f"{self.group}")

    def publish(self, channel: str, payload: bytes,
                now: float = 0.0) -> list[bytes]:
        name_nul = self._names.get(channel)
        if name_nul is None:
            try:
                name = channel.encode("ascii")
            except UnicodeEncodeError:
                raise BadName(repr(channel))
            if not 0 < len(name) < MAX_CHANNELNAME or b"\x00" in name:
                raise BadName(repr(channel))
            name_nul = self._names[channel] = name + b"\x00"
        self._check_publishable(channel)
        group_keys = self.keys.group_keys(now)
        if not group_keys or self.sender_id is None:
            raise NoKey("group epoch not established")
        channel_keys = self.keys.channel_keys(channel, now)
        if not channel_keys:
            raise NoKey(f"no key material for channel {channel!r}")
        k_g, k_ch = group_keys[0], channel_keys[0]
        seqno = self.counter.next()
        enc_name = ctr_crypt(k_g, build_iv(k_g.salt, self.sender_id, seqno),
                             name_nul)
        body = aead_seal(k_ch, build_iv(k_ch.salt, self.sender_id, seqno),
                         payload, aad=name_nul)
        self.stats.published += 1
        if SECURE_HEADER_LEN + len(enc_name) + len(body) <= self.mtu:
            # single-datagram case, overwhelmingly common
            return [pack_secure(seqno, self.sender_id, enc_name + body)]
        packets = wire.fragment(enc_name, body, seqno, self.sender_id,
                                self.mtu)
        return [encode_secure(p) if isinstance(p, SecurePacket)
                else encode_fragment(p) for p in packets]

    # --------------------------------------------------------------- receive

    def receive(self, datagram: bytes,
                now: float = 0.0) -> tuple[str, bytes] | None:
        """Decrypt one datagram; None means dropped (reason counted)."""
        fast = try_unpack_secure(datagram)
        if fast is not None:
            seqno, sender_id, tail = fast
            if sender_id == self.sender_id:
                # our own multicast loops back to us; nothing to deliver
                self.stats.drop("own_echo")
                return None
            return self._open(seqno, sender_id, None, tail, now)
        try:
            magic = peek_magic(datagram)
        except LcmsecError:
            self.stats.drop("truncated")
            return None
        if magic == MAGIC_SECURE:
            # well-formed packets took the fast path; this is a runt
            self.stats.drop("truncated")
            return None
        if magic == MAGIC_FRAGMENT:
            try:
                frag = decode_fragment(datagram)
            except LcmsecError:
                self.stats.drop("bad_fragment")
                return None
            if frag.sender_id == self.sender_id:
                self.stats.drop("own_echo")
                return None
            try:
                assembled = self._reassembly.add(frag, now)
            except LcmsecError:
                self.stats.drop("bad_fragment")
                return None
            if assembled is None:
                return None
            enc_name, body = assembled
            if not 0 < len(enc_name) <= MAX_CHANNELNAME:
                self.stats.drop("bad_fragment")
                return None
            return self._open(frag.seqno, frag.sender_id, enc_name, body,
                              now)
        if magic in (MAGIC_MANAGEMENT, MAGIC_PLAIN):
            self.stats.drop("not_data")
            return None
        self.stats.drop("bad_magic")
        return None

    def _open(self, seqno: int, sender_id: int, enc_name: bytes | None,
              sealed_tail: bytes, now: float) -> tuple[str, bytes] | None:
        """Core pipeline: name under the group key, body under the channel
        key, then the replay check. ``enc_name`` is None for unfragmented
        packets, whose name boundary only a group key holder can find."""
        group_keys = self.keys.group_keys(now)
        if not group_keys:
            self.stats.drop("no_group_key")
            return None
        reason = "garbled_name"
        for k_g in group_keys:
            iv_g = build_iv(k_g.salt, sender_id, seqno)
            if enc_name is None:
                bound = min(MAX_CHANNELNAME, len(sealed_tail) - 16)
                # names are nearly always short: probe one keystream block
                # before paying for the full 256-byte bound
                probe = min(bound, 16)
                plain = ctr_crypt(k_g, iv_g, sealed_tail[:probe])
                nul = plain.find(0)
                if nul < 0 and probe < bound:
                    plain = ctr_crypt(k_g, iv_g, sealed_tail[:bound])
                    nul = plain.find(0)
                if nul < 0:
                    continue
                name_nul = plain[:nul + 1]
                sealed = sealed_tail[nul + 1:]
            else:
                name_nul = ctr_crypt(k_g, iv_g, enc_name)
                if not name_nul.endswith(b"\x00") or 0 in name_nul[:-1]:
                    continue
                sealed = sealed_tail
            raw = name_nul[:-1]
            if not raw.isascii() or not raw:
                continue
            channel = raw.decode("ascii")
            if channel not in self.subscriptions:
                reason = "unsubscribed"
                continue
            channel_keys = self.keys.channel_keys(channel, now)
            if not channel_keys:
                reason = "no_channel_key"
                continue
            for k_ch in channel_keys:
                iv_ch = build_iv(k_ch.salt, sender_id, seqno)
                try:
                    payload = aead_open(k_ch, iv_ch, sealed, aad=name_nul)
                except (AuthFailure, TooShort):
                    reason = "auth_failure"
                    continue
                if not self._replay_check(channel, sender_id, k_ch.epoch,
                                          seqno):
                    self.stats.drop("replayed")
                    return None
                self.stats.delivered += 1
                return channel, payload
        self.stats.drop(reason)
        return None

    def _replay_check(self, channel: str, sender_id: int, epoch: int,
                      seqno: int) -> bool:
        key = (channel, sender_id, epoch)
        window = self._windows.get(key)
        if window is None:
            window = self._windows[key] = ReplayWindow(self.window_size)
        return window.check(seqno)
