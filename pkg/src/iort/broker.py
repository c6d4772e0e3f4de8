"""Command broker: durable per-arm queues, push notifications, ack routing.

Each registered arm gets an independent pair of queues, `cmd.<arm_id>`
(user to robot) and `ack.<arm_id>` (robot to user). Delivery is
at-least-once with lease-based redelivery; consumers deduplicate by command
id, which yields effectively-once execution. Queues are the reliable path;
publish/subscribe push is best-effort and never blocks on a slow subscriber.

All state mutations go through one lock, which satisfies (is stronger than)
the per-queue serialization contract. Timing flows through the injected
clock so the whole broker runs on simulated time in tests.
"""

from __future__ import annotations

import logging
import threading
import uuid
from dataclasses import dataclass, field as dc_field

from .arm_model import ArmProfile, CartesianPose, DEFAULT_PROFILE, JointConfig
from .clock import Clock
from .journal import Journal, read_records
from .pattern_store import LearnedPattern, PatternStore
from .protocol import (
    Ack,
    Envelope,
    JointCommand,
    Notification,
    PatternPrompt,
    Violation,
    body_to_obj,
    envelope_from_obj,
    envelope_to_obj,
    validate_command,
)

logger = logging.getLogger(__name__)

DEFAULT_LEASE_MS = 30_000
DEFAULT_TCP_PORT = 7450
DEFAULT_HTTP_PORT = 7451

_MINT_NAMESPACE = uuid.uuid5(uuid.NAMESPACE_URL, "iort-arm/pattern-reuse")


class BrokerError(Exception):
    pass


class ConflictError(BrokerError):
    """Duplicate live robot id, or a reused command id."""


class NotFoundError(BrokerError):
    """Unknown queue."""


class LeaseError(BrokerError):
    """Queue-level ack by the wrong consumer, after expiry, or repeated."""


class PromptError(BrokerError):
    """Pattern response without a matching outstanding prompt."""


class ValidationRejected(BrokerError):
    """Command refused before enqueue; carries per-field violations."""

    def __init__(self, violations: tuple[Violation, ...], acked: bool) -> None:
        self.violations = violations
        self.acked = acked  # whether a synthetic rejected ack was queued back
        detail = "; ".join(v.message for v in violations)
        super().__init__(detail or "command rejected")


@dataclass
class Lease:
    consumer_id: str
    expiry_ms: int


@dataclass
class QueueRecord:
    record_id: int
    envelope: Envelope
    enqueued_at_ms: int
    delivery_count: int = 0
    lease: Lease | None = None

    @property
    def state(self) -> str:
        return "leased" if self.lease is not None else "ready"


@dataclass
class Queue:
    name: str
    records: dict[int, QueueRecord] = dc_field(default_factory=dict)  # FIFO by insertion


@dataclass(frozen=True)
class Receipt:
    record_id: int
    position: int


@dataclass(frozen=True)
class Delivery:
    record_id: int
    envelope: Envelope
    delivery_count: int


@dataclass
class ArmInfo:
    profile: dict
    last_pose: CartesianPose | None = None


@dataclass
class _PromptState:
    pattern_id: str
    arm_id: str
    operator_id: str
    sequence_id: str
    remainder: tuple[JointConfig, ...]


class Session:
    """One live operator or robot connection."""

    def __init__(self, kind: str, client_id: str, session_id: int, transport=None) -> None:
        self.session_id = session_id
        self.kind = kind
        self.client_id = client_id
        self.transport = transport
        self.topics: set[str] = set()
        self.alive = True
        self._out_seq = 0

    def next_seq(self) -> int:
        self._out_seq += 1
        return self._out_seq

    def push(self, env: Envelope) -> bool:
        """Best-effort push with a connection-local sequence number."""
        if not self.alive or self.transport is None:
            return False
        try:
            return bool(self.transport.send(env.with_seq(self.next_seq())))
        except Exception:
            logger.warning("push to %s/%s failed", self.kind, self.client_id, exc_info=True)
            return False

    def __repr__(self) -> str:  # pragma: no cover
        return f"Session({self.kind}:{self.client_id}#{self.session_id})"


def topic_matches(pattern: str, topic: str) -> bool:
    if pattern == topic:
        return True
    return pattern.endswith(".*") and topic.startswith(pattern[:-1])


def cmd_queue(arm_id: str) -> str:
    return f"cmd.{arm_id}"


def ack_queue(arm_id: str) -> str:
    return f"ack.{arm_id}"


class BrokerCore:
    def __init__(
        self,
        clock: Clock,
        journal_path: str | None = None,
        *,
        lease_ms: int = DEFAULT_LEASE_MS,
        promote_k: int = 3,
        idle_gap_s: float = 10.0,
        validate: bool = True,
    ) -> None:
        self.clock = clock
        self.lease_ms = lease_ms
        self.validate = validate
        self._lock = threading.RLock()
        self.store = PatternStore(
            promote_k=promote_k,
            idle_gap_ms=round(idle_gap_s * 1000),
            on_promoted=self._on_promoted,
        )
        self._queues: dict[str, Queue] = {}
        self._sessions: dict[int, Session] = {}
        self._robot_sessions: dict[str, Session] = {}
        self._arms: dict[str, ArmInfo] = {}
        self._command_ids: set[str] = set()
        self._acked_ids: set[str] = set()
        self._command_operator: dict[str, str] = {}
        self._prompts: dict[tuple[str, str], _PromptState] = {}
        self._last_issued: dict[str, int] = {}
        self._record_counter = 0
        self._session_counter = 0
        self._broker_seq = 0
        self._replaying = False
        self._journal: Journal | None = None
        if journal_path is not None:
            self._recover(journal_path)
            self._journal = Journal(journal_path)

    # -- journal ---------------------------------------------------------

    def _log(self, record: dict, durable: bool = False) -> None:
        if self._journal is not None and not self._replaying:
            self._journal.append(record, durable=durable)

    def _recover(self, path: str) -> None:
        import os

        if not os.path.exists(path):
            return
        self._replaying = True
        try:
            for record in read_records(path):
                self._replay_record(record)
        finally:
            self._replaying = False

    def _replay_record(self, record: dict) -> None:
        op = record["op"]
        if op == "queue":
            self._ensure_queue(record["name"])
        elif op == "enqueue":
            env = envelope_from_obj(record["env"])
            self._record_counter = max(self._record_counter, record["record_id"])
            self._insert_record(
                record["queue"], env, record["record_id"], record["at_ms"]
            )
        elif op == "lease":
            queue = self._queues.get(record["queue"])
            rec = queue.records.get(record["record_id"]) if queue else None
            if rec is not None:
                rec.lease = Lease(record["consumer"], record["expiry_ms"])
                rec.delivery_count = record["delivery_count"]
        elif op == "ack":
            queue = self._queues.get(record["queue"])
            if queue is not None:
                queue.records.pop(record["record_id"], None)
        elif op == "close":
            self.store.close_sequence(
                record["arm_id"], record["operator_id"], record["reason"], record["at_ms"]
            )
        elif op == "pattern_used":
            self.store.mark_pattern_used(record["pattern_id"])
        elif op == "store_snapshot":
            self.store.restore_doc(record["doc"])
            self._rebuild_indexes_from_store()
        elif op == "arm_state":
            for arm_id, info in record["arms"].items():
                self._arms[arm_id] = ArmInfo(profile=info["profile"], last_pose=None)
        else:
            logger.warning("ignoring unknown journal op %r", op)

    def _rebuild_indexes_from_store(self) -> None:
        self._command_ids.clear()
        self._acked_ids.clear()
        self._command_operator.clear()
        for seq in self.store.sequences:
            for entry in seq.commands:
                self._command_ids.add(entry.command_id)
                self._command_operator[entry.command_id] = seq.operator_id
                if entry.outcome != "pending":
                    self._acked_ids.add(entry.command_id)

    def close(self) -> None:
        with self._lock:
            if self._journal is not None:
                self._journal.close()
                self._journal = None

    def compact(self) -> None:
        """Rewrite the journal from live state: queues, active records, store."""
        import os

        with self._lock:
            if self._journal is None:
                return
            path = self._journal.path
            tmp = path + ".compact"
            with Journal(tmp) as fresh:
                for name in self._queues:
                    fresh.append({"op": "queue", "name": name})
                fresh.append({"op": "store_snapshot", "doc": self.store.to_doc()})
                fresh.append(
                    {
                        "op": "arm_state",
                        "arms": {a: {"profile": i.profile} for a, i in self._arms.items()},
                    }
                )
                for queue in self._queues.values():
                    for rec in queue.records.values():
                        fresh.append(
                            {
                                "op": "enqueue",
                                "queue": queue.name,
                                "record_id": rec.record_id,
                                "at_ms": rec.enqueued_at_ms,
                                "env": envelope_to_obj(rec.envelope),
                            },
                            durable=False,
                        )
            self._journal.close()
            os.replace(tmp, path)
            self._journal = Journal(path)

    # -- sessions ----------------------------------------------------------

    def register(
        self,
        kind: str,
        client_id: str,
        *,
        profile: dict | None = None,
        transport=None,
    ) -> Session:
        if kind not in ("operator", "robot"):
            raise ValueError(f"unknown session kind: {kind!r}")
        if not client_id:
            raise ValueError("client id must be non-empty")
        with self._lock:
            if kind == "robot":
                live = self._robot_sessions.get(client_id)
                if live is not None and live.alive:
                    raise ConflictError(f"robot {client_id!r} already has a live session")
            self._session_counter += 1
            session = Session(kind, client_id, self._session_counter, transport=transport)
            self._sessions[session.session_id] = session
            if kind == "robot":
                self._robot_sessions[client_id] = session
                self._ensure_arm(client_id, profile)
            return session

    def _ensure_queue(self, name: str) -> Queue:
        queue = self._queues.get(name)
        if queue is None:
            queue = Queue(name=name)
            self._queues[name] = queue
            self._log({"op": "queue", "name": name})
        return queue

    def _ensure_arm(self, arm_id: str, profile: dict | None) -> None:
        self._ensure_queue(cmd_queue(arm_id))
        self._ensure_queue(ack_queue(arm_id))
        info = self._arms.get(arm_id)
        if info is None:
            self._arms[arm_id] = ArmInfo(profile=profile or DEFAULT_PROFILE.to_dict())
        elif profile is not None:
            info.profile = profile

    def unregister(self, session: Session) -> None:
        with self._lock:
            if not session.alive:
                return
            session.alive = False
            self._sessions.pop(session.session_id, None)
            if session.kind == "robot":
                if self._robot_sessions.get(session.client_id) is session:
                    del self._robot_sessions[session.client_id]
                return
            # Operator sequences end when the operator's last session goes.
            still_live = any(
                s.kind == "operator" and s.client_id == session.client_id
                for s in self._sessions.values()
            )
            if not still_live:
                for seq in self.store.open_sequences_for_operator(session.client_id):
                    self._close_sequence(seq.arm_id, seq.operator_id, "session_end")

    def subscribe(self, session: Session, topics: list[str] | tuple[str, ...]) -> None:
        with self._lock:
            session.topics.update(topics)

    def robot_session(self, arm_id: str) -> Session | None:
        with self._lock:
            return self._robot_sessions.get(arm_id)

    def operator_sessions(self, operator_id: str) -> list[Session]:
        with self._lock:
            return [
                s
                for s in self._sessions.values()
                if s.kind == "operator" and s.client_id == operator_id
            ]

    def live_operator_sessions(self) -> list[Session]:
        with self._lock:
            return [s for s in self._sessions.values() if s.kind == "operator"]

    # -- queue operations ---------------------------------------------------

    def enqueue(self, queue_name: str, env: Envelope) -> Receipt:
        """Durably queue an envelope; commands are validated first.

        An invalid command is never enqueued: a synthetic rejected ack is
        queued back on the arm's ack queue instead, and the rejection
        (with per-field violations) is raised to the producer.
        """
        with self._lock:
            queue = self._queues.get(queue_name)
            if queue is None:
                raise NotFoundError(f"no such queue: {queue_name}")
            if queue_name.startswith("cmd."):
                if env.type != "command" or not isinstance(env.body, JointCommand):
                    raise ValueError("command queues accept only command envelopes")
                self._check_command(queue_name, env.body)
            elif queue_name.startswith("ack."):
                if env.type != "ack" or not isinstance(env.body, Ack):
                    raise ValueError("ack queues accept only ack envelopes")
            now = self.clock.now_ms()
            self._record_counter += 1
            record_id = self._record_counter
            self._log(
                {
                    "op": "enqueue",
                    "queue": queue_name,
                    "record_id": record_id,
                    "at_ms": now,
                    "env": envelope_to_obj(env),
                },
                durable=True,
            )
            position = self._insert_record(queue_name, env, record_id, now)
            return Receipt(record_id=record_id, position=position)

    def _check_command(self, queue_name: str, cmd: JointCommand) -> None:
        if queue_name != cmd_queue(cmd.arm_id):
            raise ValueError(f"command for {cmd.arm_id!r} sent to {queue_name!r}")
        if cmd.id in self._command_ids:
            raise ConflictError(f"command id {cmd.id} already used")
        if not self.validate:
            return
        info = self._arms.get(cmd.arm_id)
        profile = ArmProfile.from_dict(info.profile) if info else DEFAULT_PROFILE
        result = validate_command(cmd, profile)
        if result.ok:
            return
        detail = "; ".join(v.message for v in result.violations)
        ack = Ack(
            command_id=cmd.id,
            status="rejected",
            detail=detail,
            completed_at_ms=self.clock.now_ms(),
        )
        # The rejected command consumed its id, and its synthetic ack needs
        # operator routing, even though it never reaches the command queue.
        self._command_operator[cmd.id] = cmd.operator_id
        self.enqueue(ack_queue(cmd.arm_id), self._broker_envelope("ack", ack))
        self.publish(f"arm.{cmd.arm_id}.ack", body_to_obj(ack))
        raise ValidationRejected(result.violations, acked=True)

    def _insert_record(
        self, queue_name: str, env: Envelope, record_id: int, at_ms: int
    ) -> int:
        queue = self._ensure_queue(queue_name)
        queue.records[record_id] = QueueRecord(
            record_id=record_id, envelope=env, enqueued_at_ms=at_ms
        )
        position = len(queue.records)
        if queue_name.startswith("cmd.") and isinstance(env.body, JointCommand):
            self._after_command_enqueue(env.body, at_ms)
        elif queue_name.startswith("ack.") and isinstance(env.body, Ack):
            self._after_ack_enqueue(queue_name, env.body)
        return position

    def _after_command_enqueue(self, cmd: JointCommand, at_ms: int) -> None:
        self._command_ids.add(cmd.id)
        self._command_operator[cmd.id] = cmd.operator_id
        prompt = self.store.observe_command(cmd, at_ms)
        if prompt is not None:
            self._issue_prompt(cmd.arm_id, cmd.operator_id, prompt)

    def _after_ack_enqueue(self, queue_name: str, ack: Ack) -> None:
        self._acked_ids.add(ack.command_id)
        self._command_ids.add(ack.command_id)  # an acked id counts as used
        arm_id = queue_name[len("ack."):]
        if ack.status == "ok" and ack.final_pose is not None:
            info = self._arms.get(arm_id)
            if info is not None:
                info.last_pose = ack.final_pose
        self.store.record_outcome(ack.command_id, ack.status)

    def next(
        self, queue_name: str, consumer_id: str, lease_ms: int | None = None
    ) -> Delivery | None:
        """Lease the oldest ready record to a consumer; empty is a value."""
        lease_ms = self.lease_ms if lease_ms is None else lease_ms
        if lease_ms <= 0:
            raise ValueError("lease must be positive")
        with self._lock:
            queue = self._queues.get(queue_name)
            if queue is None:
                raise NotFoundError(f"no such queue: {queue_name}")
            now = self.clock.now_ms()
            self._expire_leases(queue, now)
            for rec in queue.records.values():
                if rec.state == "ready":
                    rec.lease = Lease(consumer_id=consumer_id, expiry_ms=now + lease_ms)
                    rec.delivery_count += 1
                    self._log(
                        {
                            "op": "lease",
                            "queue": queue_name,
                            "record_id": rec.record_id,
                            "consumer": consumer_id,
                            "expiry_ms": rec.lease.expiry_ms,
                            "delivery_count": rec.delivery_count,
                        }
                    )
                    return Delivery(
                        record_id=rec.record_id,
                        envelope=rec.envelope,
                        delivery_count=rec.delivery_count,
                    )
            return None

    def _expire_leases(self, queue: Queue, now_ms: int) -> None:
        for rec in queue.records.values():
            if rec.lease is not None and rec.lease.expiry_ms <= now_ms:
                rec.lease = None

    def ack_record(self, queue_name: str, consumer_id: str, record_id: int) -> None:
        """Complete a leased record: removed from the queue, removal journaled."""
        with self._lock:
            queue = self._queues.get(queue_name)
            if queue is None:
                raise NotFoundError(f"no such queue: {queue_name}")
            rec = queue.records.get(record_id)
            if rec is None:
                raise LeaseError(f"record {record_id} unknown or already done")
            now = self.clock.now_ms()
            if rec.lease is None or rec.lease.expiry_ms <= now:
                rec.lease = None
                raise LeaseError(f"lease on record {record_id} expired; it will be redelivered")
            if rec.lease.consumer_id != consumer_id:
                raise LeaseError(f"record {record_id} is leased to another consumer")
            self._log({"op": "ack", "queue": queue_name, "record_id": record_id}, durable=True)
            del queue.records[record_id]

    def queue_depth(self, queue_name: str) -> int:
        with self._lock:
            queue = self._queues.get(queue_name)
            return 0 if queue is None else len(queue.records)

    def peek_ready(self, queue_name: str) -> Envelope | None:
        """First ready envelope without leasing it (delivery-pump lookahead)."""
        with self._lock:
            queue = self._queues.get(queue_name)
            if queue is None:
                return None
            self._expire_leases(queue, self.clock.now_ms())
            for rec in queue.records.values():
                if rec.state == "ready":
                    return rec.envelope
            return None

    def has_ready(self, queue_name: str) -> bool:
        with self._lock:
            queue = self._queues.get(queue_name)
            if queue is None:
                return False
            now = self.clock.now_ms()
            self._expire_leases(queue, now)
            return any(rec.state == "ready" for rec in queue.records.values())

    def queue_names(self) -> list[str]:
        with self._lock:
            return list(self._queues)

    # -- push ---------------------------------------------------------------

    def publish(self, topic: str, event: dict | Envelope) -> int:
        """Push an event to every live subscription matching the topic.

        Best-effort: a dead or failing subscriber is skipped without
        affecting the others, and nothing is journaled.
        """
        with self._lock:
            if self._replaying:
                return 0
            if isinstance(event, Envelope):
                env = event
            else:
                env = self._broker_envelope(
                    "notification", Notification(topic=topic, event=event)
                )
            delivered = 0
            for session in list(self._sessions.values()):
                if any(topic_matches(p, topic) for p in session.topics):
                    if session.push(env):
                        delivered += 1
            return delivered

    def _broker_envelope(self, env_type: str, body) -> Envelope:
        self._broker_seq += 1
        return Envelope(type=env_type, body=body, seq=self._broker_seq)

    # -- routing --------------------------------------------------------------

    def route_ack(self, arm_id: str, ack: Ack) -> None:
        """Queue an ack back to the user side and fan out the push event.

        Unknown command ids are dropped (late acks for compacted history),
        as is the second ack for a command (duplicate-ack tolerance).
        """
        with self._lock:
            if ack.command_id not in self._command_ids:
                logger.info("dropping ack for unknown command %s", ack.command_id)
                return
            if ack.command_id in self._acked_ids:
                logger.info("dropping duplicate ack for command %s", ack.command_id)
                return
            self.enqueue(ack_queue(arm_id), self._broker_envelope("ack", ack))
            self.publish(f"arm.{arm_id}.ack", body_to_obj(ack))

    def submit_command(self, env: Envelope, producer_key: str) -> Receipt:
        """Operator-facing entry: per-producer timestamp monotonicity + enqueue."""
        if env.type != "command" or not isinstance(env.body, JointCommand):
            raise ValueError("submit_command takes command envelopes")
        cmd = env.body
        with self._lock:
            last = self._last_issued.get(producer_key)
            if last is not None and cmd.issued_at_ms < last:
                raise ValidationRejected(
                    (
                        Violation(
                            "issued_at_ms",
                            f"issued_at_ms {cmd.issued_at_ms} regresses below {last}",
                        ),
                    ),
                    acked=False,
                )
            receipt = self.enqueue(cmd_queue(cmd.arm_id), env)
            self._last_issued[producer_key] = cmd.issued_at_ms
            return receipt

    # -- pattern prompts --------------------------------------------------------

    def _issue_prompt(self, arm_id: str, operator_id: str, prompt: PatternPrompt) -> None:
        info = self._arms.get(arm_id)
        profile = ArmProfile.from_dict(info.profile) if info else DEFAULT_PROFILE
        remainder = tuple(_clamp_targets(t, profile) for t in prompt.remainder)
        clamped = PatternPrompt(
            pattern_id=prompt.pattern_id,
            matched_prefix_len=prompt.matched_prefix_len,
            remainder=remainder,
        )
        seq = self.store.open_sequence(arm_id, operator_id)
        if self._replaying or seq is None:
            return
        self._prompts[(operator_id, prompt.pattern_id)] = _PromptState(
            pattern_id=prompt.pattern_id,
            arm_id=arm_id,
            operator_id=operator_id,
            sequence_id=seq.sequence_id,
            remainder=remainder,
        )
        self.publish(
            f"operator.{operator_id}.prompt",
            self._broker_envelope("pattern_prompt", clamped),
        )

    def respond_prompt(self, session: Session, pattern_id: str, accepted: bool) -> list[Receipt]:
        """Accept or dismiss an outstanding reuse prompt.

        Accepting mints the remainder as fresh commands (new ids and
        timestamps) and enqueues them in order; the pattern's use count grows
        by one. Rejecting just consumes the prompt — the per-sequence prompt
        bookkeeping already prevents a re-prompt on that pattern.
        """
        with self._lock:
            if session.kind != "operator" or not session.alive:
                raise PromptError("prompt responses must come from a live operator session")
            state = self._prompts.get((session.client_id, pattern_id))
            if state is None:
                raise PromptError(f"no outstanding prompt for pattern {pattern_id}")
            open_seq = self.store.open_sequence(state.arm_id, state.operator_id)
            if open_seq is None or open_seq.sequence_id != state.sequence_id:
                del self._prompts[(session.client_id, pattern_id)]
                raise PromptError("prompt expired: its sequence is closed")
            del self._prompts[(session.client_id, pattern_id)]
            if not accepted:
                return []
            pattern = self.store.get_pattern(pattern_id)
            if pattern is None:  # cannot happen; defensive
                raise PromptError(f"pattern {pattern_id} no longer exists")
            use_seq = pattern.use_count
            now = self.clock.now_ms()
            receipts = []
            for i, targets in enumerate(state.remainder):
                cmd = JointCommand(
                    id=str(uuid.uuid5(_MINT_NAMESPACE, f"{pattern_id}:{use_seq}:{i}")),
                    arm_id=state.arm_id,
                    base_deg=targets.base_deg,
                    shoulder_deg=targets.shoulder_deg,
                    elbow_deg=targets.elbow_deg,
                    wrist_pitch_deg=targets.wrist_pitch_deg,
                    wrist_roll_deg=targets.wrist_roll_deg,
                    gripper_mm=targets.gripper_mm,
                    issued_at_ms=now,
                    operator_id=state.operator_id,
                )
                receipts.append(
                    self.enqueue(cmd_queue(state.arm_id), self._broker_envelope("command", cmd))
                )
            self.store.mark_pattern_used(pattern_id)
            self._log({"op": "pattern_used", "pattern_id": pattern_id})
            return receipts

    def _on_promoted(self, patterns: list[LearnedPattern]) -> None:
        for p in patterns:
            self.publish(
                f"arm.{p.arm_id}.pattern",
                {"pattern_id": p.pattern_id, "use_count": p.use_count},
            )

    # -- sequence boundaries ------------------------------------------------------

    def end_sequence(self, arm_id: str, operator_id: str) -> None:
        with self._lock:
            self._close_sequence(arm_id, operator_id, "explicit_end")

    def _close_sequence(self, arm_id: str, operator_id: str, reason: str) -> None:
        if self.store.open_sequence(arm_id, operator_id) is None:
            return
        now = self.clock.now_ms()
        self._log(
            {
                "op": "close",
                "arm_id": arm_id,
                "operator_id": operator_id,
                "reason": reason,
                "at_ms": now,
            }
        )
        closed = self.store.close_sequence(arm_id, operator_id, reason, now)
        if closed is not None:
            self._drop_prompts_for_sequence(closed.sequence_id)

    def _drop_prompts_for_sequence(self, sequence_id: str) -> None:
        stale = [k for k, v in self._prompts.items() if v.sequence_id == sequence_id]
        for key in stale:
            del self._prompts[key]

    def tick(self) -> None:
        """Timer path: close open sequences whose idle gap has elapsed."""
        with self._lock:
            now = self.clock.now_ms()
            for seq in list(self.store.sequences):
                if seq.closed:
                    continue
                if now - seq.last_observed_ms > self.store.idle_gap_ms:
                    self._close_sequence(seq.arm_id, seq.operator_id, "idle_gap")

    # -- introspection ---------------------------------------------------------

    def arms(self) -> dict[str, ArmInfo]:
        with self._lock:
            return dict(self._arms)

    def command_operator(self, command_id: str) -> str | None:
        with self._lock:
            return self._command_operator.get(command_id)

    def snapshot_store(self, path: str) -> None:
        with self._lock:
            self.store.snapshot(path)


def _clamp_targets(t: JointConfig, profile: ArmProfile) -> JointConfig:
    """Pin quantized pattern targets back inside the profile's box.

    Quantization can push a boundary value past the limit (50.8 mm rounds to
    51.0); commands minted from a pattern must still validate.
    """
    angles = [
        min(max(v, lo), hi) for v, (lo, hi) in zip(t.angles(), profile.joint_ranges_deg)
    ]
    lo, hi = profile.gripper_range_mm
    return JointConfig(
        base_deg=angles[0],
        shoulder_deg=angles[1],
        elbow_deg=angles[2],
        wrist_pitch_deg=angles[3],
        wrist_roll_deg=angles[4],
        gripper_mm=min(max(t.gripper_mm, lo), hi),
    )
