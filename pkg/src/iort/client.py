"""Blocking TCP client for operator-side tooling.

Wraps a registered operator connection: send commands, subscribe to push
topics, and iterate inbound envelopes. Used by the CLI; the browser console
talks to the HTTP gateway instead.
"""

from __future__ import annotations

import socket
import time
import uuid

from .protocol import (
    Envelope,
    JointCommand,
    PatternResponse,
    Register,
    Subscribe,
    decode,
    encode,
)


class OperatorClientError(Exception):
    pass


class OperatorClient:
    def __init__(self, host: str, port: int, operator_id: str, timeout_s: float = 10.0) -> None:
        self.operator_id = operator_id
        self.timeout_s = timeout_s
        self._seq = 0
        self._sock = socket.create_connection((host, port), timeout=timeout_s)
        self._reader = self._sock.makefile("rb")
        self._send("register", Register(kind="operator", id=operator_id))
        env = self.next_envelope()
        if env.type != "notification" or env.body.topic != "session":
            raise OperatorClientError(f"registration failed: {env}")

    def _send(self, env_type: str, body) -> None:
        self._seq += 1
        self._sock.sendall(encode(Envelope(type=env_type, body=body, seq=self._seq)))

    def subscribe(self, topics: list[str]) -> None:
        self._send("subscribe", Subscribe(topics=tuple(topics)))

    def send_command(
        self,
        arm_id: str,
        angles: tuple[float, float, float, float, float],
        gripper_mm: float,
        *,
        command_id: str | None = None,
        issued_at_ms: int | None = None,
    ) -> JointCommand:
        cmd = JointCommand(
            id=command_id or str(uuid.uuid4()),
            arm_id=arm_id,
            base_deg=float(angles[0]),
            shoulder_deg=float(angles[1]),
            elbow_deg=float(angles[2]),
            wrist_pitch_deg=float(angles[3]),
            wrist_roll_deg=float(angles[4]),
            gripper_mm=float(gripper_mm),
            issued_at_ms=int(time.time() * 1000) if issued_at_ms is None else issued_at_ms,
            operator_id=self.operator_id,
        )
        self._send("command", cmd)
        return cmd

    def respond_prompt(self, pattern_id: str, accepted: bool) -> None:
        self._send("pattern_response", PatternResponse(pattern_id=pattern_id, accepted=accepted))

    def end_sequence(self, arm_id: str) -> None:
        from .protocol import Notification

        self._send("notification", Notification(topic="sequence.end", event={"arm_id": arm_id}))

    def next_envelope(self, timeout_s: float | None = None) -> Envelope:
        self._sock.settimeout(timeout_s if timeout_s is not None else self.timeout_s)
        line = self._reader.readline()
        if not line:
            raise OperatorClientError("connection closed by broker")
        return decode(line)

    def wait_for(self, predicate, timeout_s: float | None = None) -> Envelope:
        """Read envelopes until one satisfies the predicate."""
        deadline = time.monotonic() + (timeout_s if timeout_s is not None else self.timeout_s)
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise OperatorClientError("timed out waiting for envelope")
            env = self.next_envelope(timeout_s=remaining)
            if predicate(env):
                return env

    def wait_for_ack(self, command_id: str, timeout_s: float | None = None) -> Envelope:
        return self.wait_for(
            lambda env: env.type == "ack" and env.body.command_id == command_id,
            timeout_s=timeout_s,
        )

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass

    def __enter__(self) -> "OperatorClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
