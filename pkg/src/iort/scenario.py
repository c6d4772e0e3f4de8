"""Deterministic scenario replay: broker, agents, and operators in one
process on a simulated clock.

A scenario file is JSON lines. Protocol actions are plain wire envelopes
(command, pattern_response, register, notification with topic
`sequence.end`) reusing the protocol parser; everything that is not a wire
action is a control record, a JSON object with a `ctl` key (wait, expect,
start/kill/restart of components, seed). Replaying the same scenario and
seed produces byte-identical journals and store snapshots.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

from .arm_model import ArmProfile, DEFAULT_PROFILE
from .broker import BrokerCore, BrokerError, Receipt, ValidationRejected
from .clock import SimClock
from .device_agent import DeviceAgent
from .protocol import Envelope, ProtocolError, decode, encode

logger = logging.getLogger(__name__)

CONTROLS = (
    "seed",
    "wait",
    "expect",
    "start_agent",
    "kill_agent",
    "restart_agent",
    "kill_broker",
    "restart_broker",
)


class ScenarioError(Exception):
    """Scenario line is malformed or an expectation failed."""


@dataclass
class ScenarioLine:
    lineno: int
    control: dict | None = None
    envelope: Envelope | None = None


def parse_scenario(text: str) -> list[ScenarioLine]:
    lines: list[ScenarioLine] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        raw = raw.strip()
        if not raw or raw.startswith("#"):
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"line {lineno}: not JSON: {exc}") from None
        if isinstance(obj, dict) and "ctl" in obj:
            if obj["ctl"] not in CONTROLS:
                raise ScenarioError(f"line {lineno}: unknown control {obj['ctl']!r}")
            lines.append(ScenarioLine(lineno=lineno, control=obj))
            continue
        try:
            env = decode(raw)
        except ProtocolError as exc:
            raise ScenarioError(f"line {lineno}: bad envelope: {exc}") from None
        lines.append(ScenarioLine(lineno=lineno, envelope=env))
    return lines


class _Inbox:
    """Transport that collects everything pushed to an operator session."""

    def __init__(self) -> None:
        self.envelopes: list[Envelope] = []

    def send(self, env: Envelope) -> bool:
        self.envelopes.append(env)
        return True


@dataclass
class _Operator:
    session: object
    inbox: _Inbox
    cursor: int = 0


@dataclass
class _AgentSlot:
    agent: DeviceAgent
    profile: ArmProfile
    dedup_path: str | None
    alive: bool = True


@dataclass
class ScenarioReport:
    commands_sent: int = 0
    commands_rejected: int = 0
    receipts: list[Receipt] = field(default_factory=list)
    transcript: list[Envelope] = field(default_factory=list)


class ScenarioRunner:
    """Drives one logical timeline against an in-process broker."""

    def __init__(
        self,
        *,
        journal_path: str | None = None,
        lease_ms: int = 30_000,
        promote_k: int = 3,
        idle_gap_s: float = 10.0,
        seed: int = 0,
        validate: bool = True,
    ) -> None:
        self.clock = SimClock()
        self.seed = seed
        self._broker_args = dict(
            lease_ms=lease_ms, promote_k=promote_k, idle_gap_s=idle_gap_s, validate=validate
        )
        self._journal_path = journal_path
        self.core = BrokerCore(self.clock, journal_path, **self._broker_args)
        self.agents: dict[str, _AgentSlot] = {}
        self.operators: dict[str, _Operator] = {}
        self.report = ScenarioReport()
        self._broker_down = False

    # -- components -----------------------------------------------------------

    def ensure_operator(self, operator_id: str) -> _Operator:
        op = self.operators.get(operator_id)
        if op is None or not op.session.alive:
            inbox = _Inbox() if op is None else op.inbox
            session = self.core.register("operator", operator_id, transport=inbox)
            self.core.subscribe(session, [f"operator.{operator_id}.*", "arm.*"])
            op = _Operator(session=session, inbox=inbox,
                           cursor=op.cursor if op else 0)
            self.operators[operator_id] = op
        return op

    def start_agent(
        self,
        arm_id: str,
        profile: ArmProfile | None = None,
        *,
        dedup_path: str | None = None,
    ) -> DeviceAgent:
        if arm_id in self.agents and self.agents[arm_id].alive:
            raise ScenarioError(f"agent for {arm_id!r} already running")
        profile = profile or DEFAULT_PROFILE
        agent = DeviceAgent(self.core, arm_id, profile, self.clock, dedup_path=dedup_path)
        agent.start()
        self.agents[arm_id] = _AgentSlot(agent=agent, profile=profile, dedup_path=dedup_path)
        return agent

    def kill_agent(self, arm_id: str) -> None:
        slot = self._slot(arm_id)
        slot.agent.disconnect()
        slot.alive = False

    def restart_agent(self, arm_id: str) -> None:
        slot = self._slot(arm_id)
        if slot.alive:
            raise ScenarioError(f"agent for {arm_id!r} still running")
        agent = DeviceAgent(
            self.core, arm_id, slot.profile, self.clock, dedup_path=slot.dedup_path
        )
        agent.start()
        slot.agent = agent
        slot.alive = True

    def kill_broker(self) -> None:
        if self._journal_path is None:
            raise ScenarioError("kill_broker requires a journal")
        self.core.close()
        self._broker_down = True

    def restart_broker(self) -> None:
        if not self._broker_down:
            raise ScenarioError("broker is not down")
        self.core = BrokerCore(self.clock, self._journal_path, **self._broker_args)
        self._broker_down = False
        # Arm hardware state survives a broker crash; agents reconnect.
        for arm_id, slot in self.agents.items():
            if slot.alive:
                slot.agent.core = self.core
                slot.agent.session = self.core.register(
                    "robot", arm_id, profile=slot.profile.to_dict()
                )
        for operator_id, op in self.operators.items():
            session = self.core.register("operator", operator_id, transport=op.inbox)
            self.core.subscribe(session, [f"operator.{operator_id}.*", "arm.*"])
            op.session = session

    def _slot(self, arm_id: str) -> _AgentSlot:
        slot = self.agents.get(arm_id)
        if slot is None:
            raise ScenarioError(f"no agent was started for {arm_id!r}")
        return slot

    # -- pumping ---------------------------------------------------------------

    def pump(self, max_rounds: int = 10_000) -> None:
        """Run agents and ack delivery to quiescence."""
        if self._broker_down:
            return
        for _ in range(max_rounds):
            progress = False
            for slot in self.agents.values():
                if slot.alive and slot.agent.step():
                    progress = True
            if self._drain_acks():
                progress = True
            if not progress:
                return
        raise ScenarioError("scenario did not quiesce")

    def _drain_acks(self) -> bool:
        progress = False
        for queue_name in self.core.queue_names():
            if not queue_name.startswith("ack."):
                continue
            while True:
                delivery = self.core.next(queue_name, "scenario-ack-pump")
                if delivery is None:
                    break
                progress = True
                ack = delivery.envelope.body
                operator_id = self.core.command_operator(ack.command_id)
                op = self.operators.get(operator_id) if operator_id else None
                if op is None and self.operators:
                    op = next(iter(self.operators.values()))
                if op is not None:
                    op.inbox.send(delivery.envelope)
                self.core.ack_record(queue_name, "scenario-ack-pump", delivery.record_id)
        return progress

    # -- scenario execution ------------------------------------------------------

    def run_lines(self, lines: list[ScenarioLine]) -> ScenarioReport:
        for line in lines:
            if line.control is not None:
                self._run_control(line)
            else:
                self._run_envelope(line)
        self.pump()
        return self.report

    def run_text(self, text: str) -> ScenarioReport:
        return self.run_lines(parse_scenario(text))

    def _run_control(self, line: ScenarioLine) -> None:
        ctl = line.control
        kind = ctl["ctl"]
        if kind == "seed":
            self.seed = int(ctl["value"])
        elif kind == "wait":
            self.clock.advance_ms(int(ctl["ms"]))
            if not self._broker_down:
                self.core.tick()
                self.pump()
        elif kind == "expect":
            self._expect(line)
        elif kind == "start_agent":
            profile = None
            if "profile" in ctl:
                profile = ArmProfile.from_dict(ctl["profile"])
            self.start_agent(ctl["arm_id"], profile, dedup_path=ctl.get("dedup_path"))
            self.pump()
        elif kind == "kill_agent":
            self.kill_agent(ctl["arm_id"])
        elif kind == "restart_agent":
            self.restart_agent(ctl["arm_id"])
            self.pump()
        elif kind == "kill_broker":
            self.kill_broker()
        elif kind == "restart_broker":
            self.restart_broker()
            self.pump()

    def _expect(self, line: ScenarioLine) -> None:
        ctl = line.control
        env_type = ctl["type"]
        operator_id = ctl.get("operator")
        if operator_id is None:
            if len(self.operators) != 1:
                raise ScenarioError(
                    f"line {line.lineno}: expect needs an explicit operator"
                )
            operator_id = next(iter(self.operators))
        op = self.operators[operator_id]
        self.pump()
        for i in range(op.cursor, len(op.inbox.envelopes)):
            env = op.inbox.envelopes[i]
            if env.type == env_type or (
                env_type == "ack"
                and env.type == "notification"
                and env.body.topic.endswith(".ack")
            ):
                op.cursor = i + 1
                self.report.transcript.append(env)
                return
        raise ScenarioError(
            f"line {line.lineno}: expected {env_type!r} for {operator_id} but none arrived"
        )

    def _run_envelope(self, line: ScenarioLine) -> None:
        env = line.envelope
        if self._broker_down:
            raise ScenarioError(f"line {line.lineno}: broker is down")
        if env.type == "command":
            operator_id = env.body.operator_id
            self.ensure_operator(operator_id)
            self.report.commands_sent += 1
            try:
                receipt = self.core.submit_command(env, f"script-{operator_id}")
                self.report.receipts.append(receipt)
            except ValidationRejected as exc:
                self.report.commands_rejected += 1
                logger.info("line %d: command rejected: %s", line.lineno, exc)
            self.pump()
        elif env.type == "pattern_response":
            if len(self.operators) != 1:
                raise ScenarioError(
                    f"line {line.lineno}: pattern_response needs exactly one operator in play"
                )
            op = next(iter(self.operators.values()))
            try:
                self.core.respond_prompt(op.session, env.body.pattern_id, env.body.accepted)
            except BrokerError as exc:
                raise ScenarioError(f"line {line.lineno}: {exc}") from None
            self.pump()
        elif env.type == "register":
            if env.body.kind == "operator":
                self.ensure_operator(env.body.id)
            else:
                profile = (
                    ArmProfile.from_dict(env.body.profile) if env.body.profile else None
                )
                self.start_agent(env.body.id, profile)
                self.pump()
        elif env.type == "notification" and env.body.topic == "sequence.end":
            event = env.body.event
            self.core.end_sequence(event["arm_id"], event["operator_id"])
            self.pump()
        else:
            raise ScenarioError(
                f"line {line.lineno}: envelope type {env.type!r} is not a scenario action"
            )

    # -- results ---------------------------------------------------------------

    def snapshot(self, path: str) -> None:
        self.core.snapshot_store(path)

    def transcript_lines(self) -> list[bytes]:
        return [encode(env) for env in self.report.transcript]

    def close(self) -> None:
        self.core.close()
