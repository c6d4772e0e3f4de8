"""Robot-side agent: pulls commands, simulates the motion, acks with the pose.

One agent is one logical thread per arm. Commands are deduplicated by id
over a bounded window so that queue-level redelivery never re-executes a
motion; the window can be persisted to a small journal so the guarantee
survives agent restarts. Beyond-window duplicates would re-execute — that
is the documented at-least-once residue.
"""

from __future__ import annotations

import logging
import os
import random
import socket
from collections import OrderedDict
from dataclasses import dataclass, field

from .arm_model import ArmProfile, JointConfig, forward_kinematics, plan_motion
from .broker import BrokerCore, LeaseError, Session, cmd_queue
from .clock import Clock, WallClock
from .protocol import (
    Ack,
    Envelope,
    JointCommand,
    Notification,
    decode,
    encode,
    validate_command,
)

logger = logging.getLogger(__name__)

DEDUP_WINDOW = 10_000


@dataclass
class AgentState:
    arm_id: str
    profile: ArmProfile
    current: JointConfig = field(default_factory=JointConfig)  # home: all zero, gripper closed
    executed_ids: "OrderedDict[str, None]" = field(default_factory=OrderedDict)
    dedup_window: int = DEDUP_WINDOW

    def has_executed(self, command_id: str) -> bool:
        return command_id in self.executed_ids

    def mark_executed(self, command_id: str) -> None:
        self.executed_ids[command_id] = None
        self.executed_ids.move_to_end(command_id)
        while len(self.executed_ids) > self.dedup_window:
            self.executed_ids.popitem(last=False)


def execute_one(cmd: JointCommand, state: AgentState, clock: Clock) -> Ack:
    """Run a single command against the simulated arm.

    Valid commands occupy exactly the planned motion duration on the clock
    and move `current` to the target; the ok ack carries the forward
    kinematics of the final configuration. Invalid commands are rejected
    without touching the arm.
    """
    result = validate_command(cmd, state.profile)
    if not result.ok:
        return Ack(
            command_id=cmd.id,
            status="rejected",
            detail="; ".join(v.message for v in result.violations),
            completed_at_ms=clock.now_ms(),
        )
    plan = plan_motion(state.current, cmd.targets(), state.profile)
    clock.sleep(plan.duration_s)
    state.current = plan.target
    return Ack(
        command_id=cmd.id,
        status="ok",
        final_pose=forward_kinematics(state.current, state.profile),
        completed_at_ms=clock.now_ms(),
    )


def load_dedup_journal(path: str, window: int = DEDUP_WINDOW) -> "OrderedDict[str, None]":
    ids: OrderedDict[str, None] = OrderedDict()
    if not os.path.exists(path):
        return ids
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            cmd_id = line.strip()
            if cmd_id:
                ids[cmd_id] = None
                ids.move_to_end(cmd_id)
    while len(ids) > window:
        ids.popitem(last=False)
    return ids


class DeviceAgent:
    """In-process agent bound directly to a broker core.

    The network flavour (`NetworkAgent`) speaks the TCP wire protocol; this
    one drives the queue API and is what tests and the simulated scenario
    runner use. Both share `AgentState` and `execute_one`.
    """

    def __init__(
        self,
        core: BrokerCore,
        arm_id: str,
        profile: ArmProfile,
        clock: Clock,
        *,
        dedup_path: str | None = None,
        lease_ms: int | None = None,
        speed_scale: float = 1.0,
    ) -> None:
        if speed_scale != 1.0:
            profile = profile.with_speed_scale(speed_scale)
        self.core = core
        self.clock = clock
        self.lease_ms = lease_ms
        self.dedup_path = dedup_path
        executed = load_dedup_journal(dedup_path) if dedup_path else OrderedDict()
        self.state = AgentState(arm_id=arm_id, profile=profile, executed_ids=executed)
        self.session: Session | None = None
        self._stop_requested = False

    @property
    def consumer_id(self) -> str:
        assert self.session is not None, "agent not started"
        return f"agent-{self.state.arm_id}-{self.session.session_id}"

    def start(self) -> None:
        self.session = self.core.register(
            "robot", self.state.arm_id, profile=self.state.profile.to_dict()
        )
        self._stop_requested = False

    def stop(self) -> None:
        """Graceful: takes effect between commands, never mid-motion."""
        self._stop_requested = True

    def disconnect(self) -> None:
        if self.session is not None:
            self.core.unregister(self.session)
            self.session = None

    def poll(self):
        """Lease the next command, if any, without handling it."""
        return self.core.next(cmd_queue(self.state.arm_id), self.consumer_id, self.lease_ms)

    def step(self) -> bool:
        """Pull and handle at most one command; False when nothing was ready."""
        delivery = self.poll()
        if delivery is None:
            return False
        self.handle(delivery.record_id, delivery.envelope.body)
        return True

    def handle(self, record_id: int, cmd: JointCommand) -> None:
        if self.state.has_executed(cmd.id):
            logger.info("arm %s: duplicate command %s, acking record only", self.state.arm_id, cmd.id)
            self._ack_record(record_id)
            return
        ack = execute_one(cmd, self.state, self.clock)
        self.state.mark_executed(cmd.id)
        self._persist_dedup(cmd.id)
        self.core.route_ack(self.state.arm_id, ack)
        self._ack_record(record_id)

    def _ack_record(self, record_id: int) -> None:
        try:
            self.core.ack_record(cmd_queue(self.state.arm_id), self.consumer_id, record_id)
        except LeaseError as exc:
            # The record will be redelivered and deduplicated.
            logger.info("arm %s: %s", self.state.arm_id, exc)

    def _persist_dedup(self, command_id: str) -> None:
        if self.dedup_path is None:
            return
        with open(self.dedup_path, "a", encoding="utf-8") as fh:
            fh.write(command_id + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def run_until_idle(self, max_steps: int = 100_000) -> int:
        """Drain the command queue; used by tests and the scenario runner."""
        steps = 0
        while not self._stop_requested and self.step():
            steps += 1
            if steps >= max_steps:
                raise RuntimeError("agent did not reach idle")
        return steps


class NetworkAgent:
    """TCP flavour of the agent: connects to a broker, receives pushed
    commands, replies with acks. Reconnects with jittered backoff."""

    def __init__(
        self,
        broker_addr: tuple[str, int],
        arm_id: str,
        profile: ArmProfile,
        clock: Clock | None = None,
        *,
        dedup_path: str | None = None,
        speed_scale: float = 1.0,
        max_retries: int | None = None,
        backoff_base_s: float = 0.5,
        backoff_cap_s: float = 10.0,
    ) -> None:
        if speed_scale != 1.0:
            profile = profile.with_speed_scale(speed_scale)
        self.broker_addr = broker_addr
        self.clock = clock or WallClock()
        self.dedup_path = dedup_path
        executed = load_dedup_journal(dedup_path) if dedup_path else OrderedDict()
        self.state = AgentState(arm_id=arm_id, profile=profile, executed_ids=executed)
        self.max_retries = max_retries
        self.backoff_base_s = backoff_base_s
        self.backoff_cap_s = backoff_cap_s
        self._stop_requested = False
        self._out_seq = 0
        self._sock: socket.socket | None = None

    def stop(self) -> None:
        self._stop_requested = True
        sock = self._sock
        if sock is not None:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass

    def run(self) -> None:
        """Service loop; returns only when stopped (or retries exhausted)."""
        attempt = 0
        while not self._stop_requested:
            try:
                self._serve_connection()
                attempt = 0
            except (ConnectionError, OSError) as exc:
                if self._stop_requested:
                    return
                attempt += 1
                if self.max_retries is not None and attempt > self.max_retries:
                    raise
                delay = min(self.backoff_base_s * (2 ** (attempt - 1)), self.backoff_cap_s)
                delay += random.uniform(0, delay * 0.3)
                logger.warning(
                    "arm %s: broker unreachable (%s); retry %d in %.2fs",
                    self.state.arm_id, exc, attempt, delay,
                )
                self.clock.sleep(delay)

    def _send(self, sock: socket.socket, env_type: str, body) -> None:
        self._out_seq += 1
        sock.sendall(encode(Envelope(type=env_type, body=body, seq=self._out_seq)))

    def _serve_connection(self) -> None:
        from .protocol import Register

        with socket.create_connection(self.broker_addr, timeout=10) as sock:
            self._sock = sock
            sock.settimeout(None)
            logger.info("arm %s: connected to %s:%d", self.state.arm_id, *self.broker_addr)
            self._send(sock, "register", Register(
                kind="robot", id=self.state.arm_id, profile=self.state.profile.to_dict(),
            ))
            reader = sock.makefile("rb")
            for raw in reader:
                if self._stop_requested:
                    break
                env = decode(raw)
                if env.type == "command":
                    self._handle_command(sock, env.body)
                elif env.type == "notification":
                    logger.debug("arm %s: notification %s", self.state.arm_id, env.body.topic)
        self._sock = None
        if not self._stop_requested:
            raise ConnectionError("broker closed the connection")

    def _handle_command(self, sock: socket.socket, cmd: JointCommand) -> None:
        if self.state.has_executed(cmd.id):
            logger.info("arm %s: duplicate command %s, completing record only", self.state.arm_id, cmd.id)
            # No second motion and no app-level ack: ask the broker to
            # complete the queue record for this redelivery.
            self._send(sock, "notification", Notification(
                topic="command.done", event={"command_id": cmd.id},
            ))
            return
        ack = execute_one(cmd, self.state, self.clock)
        self.state.mark_executed(cmd.id)
        if self.dedup_path is not None:
            with open(self.dedup_path, "a", encoding="utf-8") as fh:
                fh.write(cmd.id + "\n")
                fh.flush()
                os.fsync(fh.fileno())
        self._send(sock, "ack", ack)
