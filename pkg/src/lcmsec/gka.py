"""Two-round group key agreement over a ring, with dynamic joins.

Round 1 broadcasts g^x_i; round 2 broadcasts Y_i, the ratio of the
Diffie-Hellman keys a node shares with its right and left ring neighbors.
From all Y values every member recovers every right key and folds them into
one shared element, so two broadcast rounds suffice regardless of group size.

Joins run the same exchange over a small ring: up to three incumbents plus
the joiners. The first incumbent's scalar is derived from the previous
session seed, which lets every other incumbent replay the exchange from
broadcast traffic alone and stay silent.

Every message carries the agreement's instance id. Ids only ever grow within
one scope and completed ids are remembered per sender, so captured round
messages replayed later target an instance that can no longer exist.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import reduce

from cryptography.hazmat.primitives.asymmetric import ec

from . import crypto
from .ecgroup import P256
from .errors import InvalidElement, StaleInstance
from .identity import LCMDomain, PeerCertificate
from .wire import (ManagementEnvelope, MsgKind, encode_gka_payload,
                   parse_gka_payload, signed_region)

log = logging.getLogger(__name__)

ROUND_TIMEOUT = 2.0
REBROADCAST_INTERVAL = 0.25


@dataclass(frozen=True)
class LocalIdentity:
    """This node's credential for one multicast group."""

    uid: int
    cert: PeerCertificate
    key: ec.EllipticCurvePrivateKey


@dataclass(frozen=True)
class KeyAgreeMode:
    pass


@dataclass(frozen=True)
class JoinMode:
    previous_seed: bytes
    representatives: tuple[int, ...]   # 1..3 incumbent uids, ring-leading

    def __post_init__(self):
        if not 1 <= len(self.representatives) <= 3:
            raise ValueError("need 1..3 representatives")


def representative_uids(participant_uids: list[int]) -> tuple[int, ...]:
    """First, second, and last incumbent by uid, deduplicated."""
    ordered = sorted(participant_uids)
    picks = [ordered[0]]
    if len(ordered) > 1:
        picks.append(ordered[1])
    if ordered[-1] not in picks:
        picks.append(ordered[-1])
    return tuple(picks)


def build_join_ring(participants: list[tuple[int, PeerCertificate]],
                    joiners: list[tuple[int, PeerCertificate]],
                    ) -> tuple[list[tuple[int, PeerCertificate]],
                               tuple[int, ...]]:
    """Ring for a join: representatives in uid order, then joiners by uid."""
    by_uid = dict(participants)
    reps = representative_uids(list(by_uid))
    ring = [(uid, by_uid[uid]) for uid in reps]
    ring.extend(sorted(joiners, key=lambda p: p[0]))
    return ring, reps


@dataclass(frozen=True)
class RingConfig:
    scope: LCMDomain
    participants: list[tuple[int, PeerCertificate]]  # ring order
    my_index: int
    instance_id: int
    mode: KeyAgreeMode | JoinMode = field(default_factory=KeyAgreeMode)

    def __post_init__(self):
        uids = [uid for uid, _ in self.participants]
        if len(set(uids)) != len(uids):
            raise ValueError("duplicate uid in ring")
        if len(uids) < 2:
            raise ValueError("ring needs at least two members")
        if not 0 <= self.my_index < len(uids):
            raise ValueError("my_index outside ring")
        if isinstance(self.mode, KeyAgreeMode) and uids != sorted(uids):
            raise ValueError("key-agreement ring must be uid-ascending")
        if isinstance(self.mode, JoinMode):
            if tuple(uids[:len(self.mode.representatives)]) != \
                    self.mode.representatives:
                raise ValueError("ring must start with the representatives")
        if self.instance_id < 1:
            raise ValueError("instance id starts at 1")

    @property
    def n(self) -> int:
        return len(self.participants)

    @property
    def uids(self) -> list[int]:
        return [uid for uid, _ in self.participants]


class InstanceLedger:
    """Remembers instance ids per scope so no id is ever accepted twice.

    ``floor`` is the highest id attempted or completed in a scope; completed
    ids are also tracked per sender for replay rejection.
    """

    def __init__(self):
        self._floor: dict[tuple[str, str], int] = {}
        self._completed: dict[tuple[str, str, int], int] = {}

    @staticmethod
    def _key(scope: LCMDomain) -> tuple[str, str]:
        return (scope.group, scope.channel)

    def floor(self, scope: LCMDomain) -> int:
        return self._floor.get(self._key(scope), 0)

    def record_attempt(self, scope: LCMDomain, instance_id: int):
        key = self._key(scope)
        self._floor[key] = max(self._floor.get(key, 0), instance_id)

    def completed(self, scope: LCMDomain, uid: int) -> int:
        return self._completed.get((scope.group, scope.channel, uid), 0)

    def record_completed(self, scope: LCMDomain, uid: int, instance_id: int):
        key = (scope.group, scope.channel, uid)
        self._completed[key] = max(self._completed.get(key, 0), instance_id)


class GkaPhase(Enum):
    INIT = "init"
    R1_SENT = "r1-sent"
    R2_SENT = "r2-sent"
    DONE = "done"
    FAILED = "failed"


def verify_envelope(env: ManagementEnvelope, cert: PeerCertificate) -> bool:
    region = signed_region(env.kind, env.group, env.channel, env.payload)
    return crypto.verify(region, env.signature, cert.public_key())


class GkaSession:
    """One in-flight agreement instance; messages are handed in one by one.

    Active members broadcast; a passive incumbent is constructed with
    ``passive=True`` and a config whose ``my_index`` points at the first
    representative, whose view it reconstructs without transmitting.
    """

    def __init__(self, config: RingConfig, identity: LocalIdentity,
                 ledger: InstanceLedger, *, passive: bool = False,
                 rng=None, round_timeout: float = ROUND_TIMEOUT,
                 rebroadcast_interval: float = REBROADCAST_INTERVAL):
        self.config = config
        self.identity = identity
        self.ledger = ledger
        self.passive = passive
        self.round_timeout = round_timeout
        self.rebroadcast_interval = rebroadcast_interval
        self.phase = GkaPhase.INIT
        self.seed: bytes | None = None
        self.failure_reason: str | None = None
        self.stats: dict[str, int] = {}

        self._n = config.n
        self._index_of = {uid: i for i, (uid, _) in
                          enumerate(config.participants)}
        self._cert_by_ref = {cert.fingerprint: (uid, cert)
                             for uid, cert in config.participants}
        self._z: dict[int, object] = {}      # ring index -> round-1 element
        self._y: dict[int, object] = {}      # ring index -> round-2 element
        self._kl = None
        self._kr = None
        self._keys_ready = False
        self._round1_env: ManagementEnvelope | None = None
        self._round2_env: ManagementEnvelope | None = None
        self._deadline: float | None = None
        self._next_send: float | None = None

        mode = config.mode
        first_rep = (isinstance(mode, JoinMode)
                     and config.uids[config.my_index]
                     == mode.representatives[0])
        if passive and not first_rep:
            raise ValueError("passive follower must simulate the first "
                             "representative")
        if first_rep:
            self._x = crypto.derive_join_scalar(mode.previous_seed,
                                                config.instance_id)
        else:
            self._x = P256.random_scalar(rng)
        self._my_z = P256.exp(P256.generator, self._x)

    # ------------------------------------------------------------- lifecycle

    def start(self, now: float) -> list[ManagementEnvelope]:
        if self.phase is not GkaPhase.INIT:
            return []
        if self.config.instance_id <= self.ledger.floor(self.config.scope):
            raise StaleInstance(
                f"instance {self.config.instance_id} not above ledger floor "
                f"{self.ledger.floor(self.config.scope)}")
        self.ledger.record_attempt(self.config.scope,
                                   self.config.instance_id)
        self._z[self.config.my_index] = self._my_z
        self.phase = GkaPhase.R1_SENT
        self._deadline = now + self.round_timeout
        if self.passive:
            return []
        self._round1_env = self._envelope(MsgKind.GKA_ROUND1, 1, self._my_z)
        self._next_send = now + self.rebroadcast_interval
        return [self._round1_env]

    def handle(self, env: ManagementEnvelope, now: float
               ) -> list[ManagementEnvelope]:
        if self.phase in (GkaPhase.DONE, GkaPhase.FAILED,
                          GkaPhase.INIT):
            return []
        if (env.group, env.channel) != (self.config.scope.group,
                                        self.config.scope.channel):
            return self._drop("wrong_scope")
        if env.kind not in (MsgKind.GKA_ROUND1, MsgKind.GKA_ROUND2):
            return self._drop("wrong_kind")
        try:
            uid, round_no, element_raw, instance = parse_gka_payload(
                env.payload)
        except Exception:
            return self._drop("malformed")
        if instance != self.config.instance_id:
            return self._drop("wrong_instance")
        if uid not in self._index_of:
            return self._drop("unknown_sender")
        if instance <= self.ledger.completed(self.config.scope, uid):
            return self._drop("stale_instance")
        resolved = self._cert_by_ref.get(env.signer_ref)
        if resolved is None:
            return self._drop("unknown_sender")
        cert_uid, cert = resolved
        if cert_uid != uid:
            return self._drop("bad_signature")
        if not verify_envelope(env, cert):
            return self._drop("bad_signature")
        try:
            element = P256.deserialize(element_raw)
        except InvalidElement:
            return self._drop("bad_element")
        expected_round = 1 if env.kind is MsgKind.GKA_ROUND1 else 2
        if round_no != expected_round:
            return self._drop("malformed")

        index = self._index_of[uid]
        store = self._z if round_no == 1 else self._y
        if index in store:
            if store[index] != element:
                if self.passive and index == self.config.my_index:
                    # the simulated view was pre-stored; a verified message
                    # contradicting it means the previous seed diverged
                    self._fail("representative traffic does not match the "
                               "previous seed")
                    return []
                return self._drop("conflicting_element")
            return []
        store[index] = element
        out = self._advance(now)
        self._maybe_complete()
        return out

    def on_timer(self, now: float) -> list[ManagementEnvelope]:
        if self.phase in (GkaPhase.DONE, GkaPhase.FAILED, GkaPhase.INIT):
            return []
        if self._deadline is not None and now >= self._deadline:
            self._fail(f"timed out in phase {self.phase.value} "
                       f"({len(self._z)}/{self._n} round-1, "
                       f"{len(self._y)}/{self._n} round-2)")
            return []
        out: list[ManagementEnvelope] = []
        if (not self.passive and self._next_send is not None
                and now >= self._next_send):
            if self._round2_env is not None:
                out.append(self._round2_env)
            if self._round1_env is not None:
                out.append(self._round1_env)
            self._next_send = now + self.rebroadcast_interval
        return out

    def next_wakeup(self) -> float | None:
        if self.phase in (GkaPhase.DONE, GkaPhase.FAILED, GkaPhase.INIT):
            return None
        times = [t for t in (self._deadline, self._next_send)
                 if t is not None]
        return min(times) if times else None

    # -------------------------------------------------------------- internals

    def _drop(self, reason: str) -> list[ManagementEnvelope]:
        self.stats[reason] = self.stats.get(reason, 0) + 1
        return []

    def _fail(self, reason: str):
        self.phase = GkaPhase.FAILED
        self.failure_reason = reason
        log.debug("agreement %s/%s#%d failed: %s", self.config.scope.group,
                  self.config.scope.channel or "<group>",
                  self.config.instance_id, reason)

    def _envelope(self, kind: MsgKind, round_no: int,
                  element) -> ManagementEnvelope:
        payload = encode_gka_payload(self.identity.uid, round_no,
                                     P256.serialize(element),
                                     self.config.instance_id)
        region = signed_region(kind, self.config.scope.group,
                               self.config.scope.channel, payload)
        return ManagementEnvelope(
            kind=kind, group=self.config.scope.group,
            channel=self.config.scope.channel, payload=payload,
            signer_ref=self.identity.cert.fingerprint,
            signature=crypto.sign(region, self.identity.key))

    def _advance(self, now: float) -> list[ManagementEnvelope]:
        if self._keys_ready:
            return []
        i, n = self.config.my_index, self._n
        left, right = (i - 1) % n, (i + 1) % n
        if left not in self._z or right not in self._z:
            return []
        self._kl = P256.exp(self._z[left], self._x)
        self._kr = P256.exp(self._z[right], self._x)
        self._keys_ready = True
        my_y = P256.op(self._kr, P256.inv(self._kl))
        if self.passive:
            if i in self._y and self._y[i] != my_y:
                self._fail("representative round-2 element does not match "
                           "the previous seed")
                return []
            self._y[i] = my_y
            return []
        self._y.setdefault(i, my_y)
        if self._y[i] != my_y:
            self._fail("own round-2 element conflicts with observed one")
            return []
        self._round2_env = self._envelope(MsgKind.GKA_ROUND2, 2, my_y)
        self.phase = GkaPhase.R2_SENT
        self._deadline = now + self.round_timeout
        return [self._round2_env]

    def _maybe_complete(self):
        if self.phase in (GkaPhase.DONE, GkaPhase.FAILED):
            return
        if not self._keys_ready or len(self._y) < self._n:
            return
        i, n = self.config.my_index, self._n
        right_keys: list = [None] * n
        right_keys[i] = self._kr
        current = self._kr
        for k in range(1, n):
            j = (i + k) % n
            current = P256.op(self._y[j], current)
            right_keys[j] = current
        if right_keys[(i - 1) % n] != self._kl:
            self._fail("ring does not close: recovered left key differs")
            return
        folded = reduce(P256.op, right_keys)
        self.seed = P256.serialize(folded)
        self.phase = GkaPhase.DONE
        for uid in self.config.uids:
            self.ledger.record_completed(self.config.scope, uid,
                                         self.config.instance_id)
