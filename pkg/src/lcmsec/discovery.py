"""Leaderless discovery consensus driving the ring agreements.

Nodes announce themselves with signed JOIN messages carrying a deadline t.
Members answer after a short random delay with their whole view D = (P, J, t)
and everyone keeps the maximum view under a total order that prefers more
participants, then more joiners, then the earliest deadline. At the deadline
the view freezes and the key agreement runs over it; on success the joiners
become participants, on failure everything resets and discovery restarts.

Each agreement run gets a fresh instance id: one more than the highest id
this node has attempted, completed, or seen advertised. Responses gossip the
floor, and verified agreement traffic with a newer id pulls stragglers
forward, so replayed runs can never be mistaken for current ones.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from hashlib import sha256

from .errors import (Expired, MalformedUrn, NotAuthorized, NonCanonical,
                     StaleInstance, Truncated)
from .gka import (GkaPhase, GkaSession, InstanceLedger, JoinMode,
                  KeyAgreeMode, LocalIdentity, RingConfig, build_join_ring,
                  verify_envelope)
from .identity import LCMDomain, PeerCertificate, authorize, verify_chain
from .wire import (ManagementEnvelope, MsgKind, encode_join_payload,
                   encode_join_response_payload, parse_gka_payload,
                   parse_join_payload, parse_join_response_payload,
                   signed_region)
from . import crypto

log = logging.getLogger(__name__)

#: deadline of a quiescent committed group: never reached
T_SENTINEL = 2**64 - 1


@dataclass(frozen=True)
class DiscoveryTiming:
    epsilon_max: float = 0.050
    base_offset: float = 0.500
    response_delay_min: float = 0.010
    response_delay_max: float = 0.100
    #: short enough for two or three re-announcements inside one gathering
    #: window, so a lost JOIN still enters every view before it freezes
    join_rebroadcast: float = 0.200
    #: while gathering, the whole view is re-broadcast at this pace; lost
    #: responses otherwise leave views quietly diverged until the ring
    #: agreement folds garbage and everything restarts
    view_gossip: float = 0.150
    round_timeout: float = 2.0
    gka_rebroadcast: float = 0.25
    #: JOINs promising a deadline further out than this are dropped
    max_join_horizon: float = 60.0


class Phase(Enum):
    IDLE = "idle"
    GATHERING = "gathering"
    AGREEING = "agreeing"
    COMMITTED = "committed"


@dataclass(frozen=True)
class DiscoveryState:
    """One view of the group: participants, joiners, next deadline (ms)."""

    participants: dict[int, PeerCertificate] = field(default_factory=dict)
    joining: dict[int, PeerCertificate] = field(default_factory=dict)
    t_ms: int = T_SENTINEL

    def canonical(self) -> bytes:
        h = sha256()
        for uid in sorted(self.participants):
            h.update(self.participants[uid].fingerprint)
        h.update(b"|")
        for uid in sorted(self.joining):
            h.update(self.joining[uid].fingerprint)
        h.update(self.t_ms.to_bytes(8, "big"))
        return h.digest()

    def sort_key(self):
        # more participants, then more joiners, then the EARLIER deadline;
        # membership breaks exact ties before certificate bytes do, so two
        # views differing in uids never order by key-generation entropy
        return (len(self.participants), len(self.joining), -self.t_ms,
                tuple(sorted(self.participants)), tuple(sorted(self.joining)),
                self.canonical())


def compare(a: DiscoveryState, b: DiscoveryState) -> int:
    ka, kb = a.sort_key(), b.sort_key()
    return (ka > kb) - (ka < kb)


def merge_max(a: DiscoveryState, b: DiscoveryState) -> DiscoveryState:
    return a if compare(a, b) >= 0 else b


@dataclass(frozen=True)
class CommitResult:
    scope: LCMDomain
    epoch: int
    instance_id: int
    seed: bytes
    members: dict[int, PeerCertificate]
    sender_ids: dict[int, int]


def assign_sender_ids(uids) -> dict[int, int]:
    """Rank+1 in ascending uid order; identical on every node given equal D."""
    return {uid: rank + 1 for rank, uid in enumerate(sorted(uids))}


class DiscoveryDriver:
    """Single-scope discovery state machine; feed it envelopes and timers.

    All methods return envelopes to broadcast. Completed or failed
    agreements surface through :meth:`take_events`.
    """

    def __init__(self, scope: LCMDomain, identity: LocalIdentity,
                 roots, ledger: InstanceLedger, rng,
                 timing: DiscoveryTiming = DiscoveryTiming()):
        self.scope = scope
        self.identity = identity
        self.roots = roots
        self.ledger = ledger
        self.rng = rng
        self.timing = timing
        self.phase = Phase.IDLE
        self.state = DiscoveryState()
        self.epoch = 0
        self.seed: bytes | None = None          # last committed session seed
        self.stats: dict[str, int] = {}
        self.events: list[tuple[str, object]] = []

        self._pending: dict[int, tuple[int, PeerCertificate]] = {}   # M
        self._known: dict[bytes, tuple[int, PeerCertificate]] = {}
        self._session: GkaSession | None = None
        self._frozen: DiscoveryState | None = None
        self._join_env: ManagementEnvelope | None = None
        self._my_join_t: int | None = None
        self._response_at: float | None = None
        self._join_resend_at: float | None = None
        self._gossip_at: float | None = None
        self._help_instance = 0            # last completed instance
        self._help_ring: set[int] = set()
        self._help_envs: list[ManagementEnvelope] = []
        self._help_at = 0.0                # next time we may answer one
        self._remember(identity.cert)

    # ----------------------------------------------------------- public API

    def initiate_join(self, now: float) -> list[ManagementEnvelope]:
        if self.phase is Phase.AGREEING:
            return self._drop("join_while_agreeing")
        if self.phase is not Phase.IDLE:
            return self._drop("join_while_active")
        authorize(self.identity.cert, self.scope)   # NotAuthorized propagates
        t_ms = self._fresh_deadline(now)
        self.state = DiscoveryState(
            participants={}, joining={self.identity.uid: self.identity.cert},
            t_ms=t_ms)
        self._my_join_t = t_ms
        self.phase = Phase.GATHERING
        self._join_env = self._build_join(t_ms)
        self._join_resend_at = now + self.timing.join_rebroadcast
        self._arm_gossip(now)
        if self._pending and self._response_at is None:
            self._response_at = now + self.rng.uniform(
                self.timing.response_delay_min,
                self.timing.response_delay_max)
        return [self._join_env]

    def handle(self, env: ManagementEnvelope, now: float
               ) -> list[ManagementEnvelope]:
        if (env.group, env.channel) != (self.scope.group, self.scope.channel):
            return self._drop("wrong_scope")
        if env.kind is MsgKind.JOIN:
            return self._handle_join(env, now)
        if env.kind is MsgKind.JOIN_RESPONSE:
            return self._handle_join_response(env, now)
        return self._handle_gka(env, now)

    def on_timer(self, now: float) -> list[ManagementEnvelope]:
        out: list[ManagementEnvelope] = []
        if self._response_at is not None and now >= self._response_at:
            self._response_at = None
            if self.phase in (Phase.GATHERING, Phase.COMMITTED):
                out.extend(self._flush_response(now))
            # in AGREEING/IDLE the flush is deferred; pending joins are
            # re-armed once the agreement settles or this node joins
        if self._join_resend_at is not None and now >= self._join_resend_at:
            if self.phase is Phase.GATHERING and self._join_env is not None \
                    and self.identity.uid in self.state.joining:
                out.append(self._join_env)
                self._join_resend_at = now + self.timing.join_rebroadcast
            else:
                self._join_resend_at = None
        if self.phase is Phase.GATHERING:
            if self._gossip_at is None:
                self._arm_gossip(now)
            elif now >= self._gossip_at:
                self._arm_gossip(now)
                out.append(self._view_response())
        else:
            self._gossip_at = None
        if self.phase is Phase.GATHERING and self._now_ms(now) >= \
                self.state.t_ms:
            out.extend(self._freeze(now, self.ledger.floor(self.scope) + 1))
        if self._session is not None and self.phase is Phase.AGREEING:
            out.extend(self._session.on_timer(now))
            out.extend(self._settle(now))
        return out

    def next_wakeup(self) -> float | None:
        best = self._response_at
        if self.phase is Phase.GATHERING:
            t = self._join_resend_at
            if t is not None and (best is None or t < best):
                best = t
            t = self._gossip_at
            if t is not None and (best is None or t < best):
                best = t
            if self.state.t_ms != T_SENTINEL:
                t = self.state.t_ms / 1000.0
                if best is None or t < best:
                    best = t
        elif self.phase is Phase.AGREEING and self._session is not None:
            t = self._session.next_wakeup()
            if t is not None and (best is None or t < best):
                best = t
        return best

    def take_events(self) -> list[tuple[str, object]]:
        out, self.events = self.events, []
        return out

    def force_rekey(self, now: float) -> None:
        """Schedule a fresh agreement among the committed members.

        Used after every group-level commit: data-path counters reset then,
        so every channel key must change before the old IVs can repeat.
        """
        if self.phase is not Phase.COMMITTED:
            return
        self.phase = Phase.GATHERING
        self.state = replace(self.state, t_ms=self._fresh_deadline(now))
        self._arm_gossip(now)

    # ------------------------------------------------------------- incoming

    def _handle_join(self, env: ManagementEnvelope, now: float
                     ) -> list[ManagementEnvelope]:
        try:
            t_ms, der = parse_join_payload(env.payload)
            cert = PeerCertificate.from_der(der)
        except (Truncated, NonCanonical, MalformedUrn, ValueError):
            return self._drop("malformed_join")
        if env.signer_ref != cert.fingerprint:
            return self._drop("bad_signature")
        uid = self._admit(cert, env)
        if uid is None:
            return []
        if uid == self.identity.uid:
            return []                      # own loopback
        now_ms = self._now_ms(now)
        horizon = now_ms + int(self.timing.max_join_horizon * 1000)
        if t_ms < now_ms or t_ms > horizon:
            return self._drop("stale_join")
        if (self.phase is Phase.AGREEING and self._session is not None
                and self._frozen is not None
                and uid in self._session.config.uids
                and t_ms > self._frozen.t_ms):
            # an active ring member is asking to join again with a deadline
            # newer than the view we froze: it gave up on this instance, so
            # its round-2 will never come. Restart instead of stalling out
            # the round deadline; its re-announcements rebuild the view.
            self._restart_after_failure(
                "ring member abandoned the running agreement")
            out = list(self._restart(now))
            self._note_pending(uid, t_ms, cert, now)
            return out
        self._note_pending(uid, t_ms, cert, now)
        return []

    def _note_pending(self, uid: int, t_ms: int, cert: PeerCertificate,
                      now: float) -> None:
        entry = self._pending.get(uid)
        if entry is None or t_ms > entry[0]:
            # keep the newest deadline: a joiner that timed out waiting
            # re-announces with a later t, and replays only carry older ones
            self._pending[uid] = (t_ms, cert)
            if self._response_at is None:
                lo, hi = (self.timing.response_delay_min,
                          self.timing.response_delay_max)
                self._response_at = now + self.rng.uniform(lo, hi)

    def _handle_join_response(self, env: ManagementEnvelope, now: float
                              ) -> list[ManagementEnvelope]:
        if self.phase in (Phase.AGREEING, Phase.IDLE):
            # the view merge must wait, but an authentic floor is worth
            # recording now so the next freeze picks an unused instance id
            try:
                floor = parse_join_response_payload(env.payload)[3]
            except (Truncated, NonCanonical, ValueError):
                return self._drop("malformed_response")
            signer = self._known.get(env.signer_ref)
            if signer is not None and verify_envelope(env, signer[1]):
                self.ledger.record_attempt(self.scope, floor)
            return self._drop("response_ignored")
        try:
            t_ms, p_ders, j_ders, floor = parse_join_response_payload(
                env.payload)
            p_certs = [PeerCertificate.from_der(d) for d in p_ders]
            j_certs = [PeerCertificate.from_der(d) for d in j_ders]
        except (Truncated, NonCanonical, MalformedUrn, ValueError):
            return self._drop("malformed_response")
        if self.phase is Phase.COMMITTED and t_ms < self._now_ms(now):
            # describes a gathering that already resolved; reacting to a
            # replay here would drag a settled group into pointless re-keys
            return self._drop("stale_response")
        participants: dict[int, PeerCertificate] = {}
        joining: dict[int, PeerCertificate] = {}
        for certs, target in ((p_certs, participants), (j_certs, joining)):
            for cert in certs:
                uid = self._admit(cert, env=None)
                if uid is None or uid in target:
                    return self._drop("bad_member_cert")
                if (target is joining and uid in participants
                        and participants[uid].fingerprint
                        != cert.fingerprint):
                    # a participant may re-join, but only as itself
                    return self._drop("bad_member_cert")
                target[uid] = cert
        for certs, target in ((p_certs, participants), (j_certs, joining)):
            if [c.fingerprint for c in certs] != \
                    [target[u].fingerprint for u in sorted(target)]:
                return self._drop("noncanonical_response")
        signer = self._known.get(env.signer_ref)
        if signer is None:
            return self._drop("unknown_responder")
        if signer[0] not in participants and signer[0] not in joining:
            # the responder must be part of the view it advertises
            return self._drop("foreign_responder")
        if not verify_envelope(env, signer[1]):
            return self._drop("bad_signature")
        self.ledger.record_attempt(self.scope, floor)
        incoming = DiscoveryState(participants=participants, joining=joining,
                                  t_ms=t_ms)
        merged = merge_max(self.state, incoming)
        if merged is not self.state:
            self.state = self._keep_self(merged)
            if self.phase is Phase.COMMITTED and self.state.joining:
                self.phase = Phase.GATHERING
                self._arm_gossip(now)
        return []

    def _handle_gka(self, env: ManagementEnvelope, now: float
                    ) -> list[ManagementEnvelope]:
        known = self._known.get(env.signer_ref)
        if known is None:
            return self._drop("unknown_gka_signer")
        uid, cert = known
        try:
            payload_uid, round_no, _, instance = parse_gka_payload(
                env.payload)
        except (Truncated, NonCanonical):
            return self._drop("malformed_gka")
        if payload_uid != uid or not verify_envelope(env, cert):
            return self._drop("bad_signature")
        out: list[ManagementEnvelope] = []
        if (instance == self._help_instance and uid in self._help_ring
                and self._help_envs and now >= self._help_at):
            # a straggler is still exchanging rounds we already completed
            out.extend(self._help_envs)
            self._help_at = now + self.timing.gka_rebroadcast
        floor = self.ledger.floor(self.scope)
        if instance > floor:
            present = (uid in self.state.participants
                       or uid in self.state.joining)
            if self.phase is Phase.GATHERING and round_no == 1 and present:
                # a co-member already reached its deadline: freeze with it
                # (before lifting the floor, or the new session looks stale)
                out.extend(self._freeze(now, instance))
            self.ledger.record_attempt(self.scope, instance)
        if self._session is not None and self.phase is Phase.AGREEING:
            session = self._session
            if (instance == session.config.instance_id
                    and uid not in session.config.uids):
                # a verified co-member transmits in this very instance but
                # is missing from the ring we froze: our view diverged, and
                # our round-2 would poison everyone's fold. Restarting now
                # is strictly cheaper than stalling out the round deadline.
                self._restart_after_failure(
                    "frozen ring is missing an active co-member")
                out.extend(self._restart(now))
                return out
            out.extend(session.handle(env, now))
            out.extend(self._settle(now))
        return out

    # ------------------------------------------------------------ internals

    def _now_ms(self, now: float) -> int:
        return int(round(now * 1000))

    def _fresh_deadline(self, now: float) -> int:
        offset = self.timing.base_offset + self.rng.uniform(
            0.0, self.timing.epsilon_max)
        return self._now_ms(now) + int(round(offset * 1000))

    def _drop(self, reason: str) -> list[ManagementEnvelope]:
        self.stats[reason] = self.stats.get(reason, 0) + 1
        return []

    def _remember(self, cert: PeerCertificate):
        uid = cert.uid_for_group(self.scope.group)
        if uid is not None:
            self._known[cert.fingerprint] = (uid, cert)

    def _admit(self, cert: PeerCertificate,
               env: ManagementEnvelope | None) -> int | None:
        """Chain + permission + (for JOINs) signature check; returns uid.

        Admission is cached by certificate fingerprint: views arrive many
        times per second and re-verifying the same chains would dominate
        the whole discovery run.
        """
        cached = self._known.get(cert.fingerprint)
        if cached is not None:
            uid = cached[0]
        else:
            if not verify_chain(cert, self.roots):
                self._drop("untrusted_cert")
                return None
            try:
                perm = authorize(cert, self.scope)
            except (NotAuthorized, Expired):
                self._drop("unauthorized_cert")
                return None
            uid = perm.uid
            self._known[cert.fingerprint] = (uid, cert)
        if env is not None and not verify_envelope(env, cert):
            self._drop("bad_signature")
            return None
        return uid

    def _keep_self(self, merged: DiscoveryState) -> DiscoveryState:
        """A wholesale view replacement must not orphan this node.

        While this node is actively joining it also must not end up listed
        only as a participant: views from before its last restart say P,
        but without the current seed it needs a joiner slot in the ring.
        """
        uid = self.identity.uid
        joining_myself = self._my_join_t is not None
        if uid in merged.joining or (uid in merged.participants
                                     and not joining_myself):
            return merged
        joining = dict(merged.joining)
        joining[uid] = self.identity.cert
        t_ms = merged.t_ms
        if self._my_join_t is not None:
            t_ms = min(t_ms, self._my_join_t)
        return DiscoveryState(participants=merged.participants,
                              joining=joining, t_ms=t_ms)

    def _build_join(self, t_ms: int) -> ManagementEnvelope:
        payload = encode_join_payload(t_ms, self.identity.cert.der)
        return self._sign(MsgKind.JOIN, payload)

    def _sign(self, kind: MsgKind, payload: bytes) -> ManagementEnvelope:
        region = signed_region(kind, self.scope.group, self.scope.channel,
                               payload)
        return ManagementEnvelope(
            kind=kind, group=self.scope.group, channel=self.scope.channel,
            payload=payload, signer_ref=self.identity.cert.fingerprint,
            signature=crypto.sign(region, self.identity.key))

    def _flush_response(self, now: float) -> list[ManagementEnvelope]:
        # a join from a listed participant is news too: it means that node
        # missed the agreement (or restarted) and needs a ring slot of its
        # own, since without the current seed it cannot follow passively
        fresh = {uid: tc for uid, tc in self._pending.items()
                 if uid not in self.state.joining}
        self._pending.clear()
        if not fresh:
            return []
        joining = dict(self.state.joining)
        t_ms = self.state.t_ms
        for uid, (t, cert) in fresh.items():
            joining[uid] = cert
            t_ms = min(t_ms, t)
        self.state = DiscoveryState(participants=self.state.participants,
                                    joining=joining, t_ms=t_ms)
        if self.phase is Phase.COMMITTED:
            self.phase = Phase.GATHERING
            self._arm_gossip(now)
        return [self._view_response()]

    def _view_response(self) -> ManagementEnvelope:
        payload = encode_join_response_payload(
            self.state.t_ms,
            [(u, c.der) for u, c in self.state.participants.items()],
            [(u, c.der) for u, c in self.state.joining.items()],
            self.ledger.floor(self.scope))
        return self._sign(MsgKind.JOIN_RESPONSE, payload)

    def _arm_gossip(self, now: float) -> None:
        # jittered so a cohort entering a gathering together does not fire
        # in synchronized bursts
        self._gossip_at = now + self.timing.view_gossip * (
            0.75 + self.rng.uniform(0.0, 0.5))

    def _freeze(self, now: float, instance_id: int
                ) -> list[ManagementEnvelope]:
        members = {**self.state.participants, **self.state.joining}
        if len(members) < 2:
            self.stats["too_few"] = self.stats.get("too_few", 0) + 1
            t_ms = self._fresh_deadline(now)
            self.state = replace(self.state, t_ms=t_ms)
            if self.identity.uid in self.state.joining:
                self._my_join_t = t_ms
                self._join_env = self._build_join(t_ms)
                self._join_resend_at = now + self.timing.join_rebroadcast
                return [self._join_env]
            return []
        if len(members) > 0xFFFF:
            self._restart_after_failure("sender ids exhausted")
            return list(self._restart(now))
        self._frozen = self.state
        joining = self.state.joining
        # participants who are also (re-)joining take a joiner slot: they
        # lack the running seed, so a passive role would strand them
        core = [(u, c) for u, c in self.state.participants.items()
                if u not in joining]
        joiners = list(joining.items())
        passive = False
        if core:
            ring, reps = build_join_ring(core, joiners)
            mode = JoinMode(previous_seed=self.seed or b"",
                            representatives=reps)
            uid = self.identity.uid
            passive = (uid not in joining and uid in self.state.participants
                       and uid not in reps)
            my_index = 0 if passive else [u for u, _ in ring].index(uid)
        else:
            ring = sorted(joiners, key=lambda p: p[0])
            mode = KeyAgreeMode()
            my_index = [u for u, _ in ring].index(self.identity.uid)
        config = RingConfig(scope=self.scope, participants=ring,
                            my_index=my_index, instance_id=instance_id,
                            mode=mode)
        session = GkaSession(config, self.identity, self.ledger,
                             passive=passive, rng=self.rng,
                             round_timeout=self.timing.round_timeout,
                             rebroadcast_interval=self.timing.gka_rebroadcast)
        try:
            out = session.start(now)
        except StaleInstance:
            self._restart_after_failure("instance id raced")
            return list(self._restart(now))
        self._session = session
        self.phase = Phase.AGREEING
        self._join_resend_at = None
        return out

    def _settle(self, now: float) -> list[ManagementEnvelope]:
        session = self._session
        if session is None:
            return []
        if session.phase is GkaPhase.DONE:
            frozen = self._frozen
            members = {**frozen.participants, **frozen.joining}
            self.state = DiscoveryState(participants=members, joining={},
                                        t_ms=T_SENTINEL)
            self.epoch += 1
            self.seed = session.seed
            self.phase = Phase.COMMITTED
            # whoever is still exchanging rounds in this instance missed
            # some of our traffic; keep the signed envelopes around so we
            # can answer instead of stranding them (completed senders going
            # silent is what turns one lost datagram into a full restart)
            self._help_instance = session.config.instance_id
            self._help_ring = set(session.config.uids)
            self._help_envs = [e for e in (session._round1_env,
                                           session._round2_env)
                               if e is not None]
            self._help_at = 0.0
            self._session = None
            self._frozen = None
            self._my_join_t = None
            result = CommitResult(
                scope=self.scope, epoch=self.epoch,
                instance_id=session.config.instance_id, seed=session.seed,
                members=members, sender_ids=assign_sender_ids(members))
            self.events.append(("committed", result))
            # joins satisfied by this commit are done; the rest re-arm
            self._pending = {u: tc for u, tc in self._pending.items()
                             if u not in members}
            if self._pending and self._response_at is None:
                self._response_at = now + self.rng.uniform(
                    self.timing.response_delay_min,
                    self.timing.response_delay_max)
            return []
        if session.phase is GkaPhase.FAILED:
            self._restart_after_failure(session.failure_reason)
            return list(self._restart(now))
        return []

    def _restart_after_failure(self, reason: str):
        log.debug("%s/%s: agreement failed (%s), rediscovering",
                  self.scope.group, self.scope.channel or "<group>", reason)
        self.stats["agreements_failed"] = \
            self.stats.get("agreements_failed", 0) + 1
        self.events.append(("failed", reason))
        self._session = None
        self._frozen = None
        self._pending.clear()
        self._response_at = None
        self.state = DiscoveryState()
        self.phase = Phase.IDLE

    def _restart(self, now: float) -> list[ManagementEnvelope]:
        return self.initiate_join(now)
