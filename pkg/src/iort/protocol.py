"""Versioned JSON wire format shared by operators, broker, and device agents.

Framing is one UTF-8 JSON object per line, newline terminated. Key order is
fixed (documented in docs/protocol.md), numbers are serialized with at most
six fractional digits, and unknown keys are ignored on decode so the format
can grow. Everything in this module is pure; the functions are safe to call
from any number of threads.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, replace
from typing import Any, Union

from .arm_model import ArmProfile, CartesianPose, JointConfig

PROTOCOL_VERSION = 1

ENVELOPE_TYPES = (
    "command",
    "ack",
    "notification",
    "pattern_prompt",
    "pattern_response",
    "subscribe",
    "register",
)

ACK_STATUSES = ("ok", "rejected", "fault")

_UUID_RE = re.compile(r"^[0-9a-f]{8}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{12}$")


class ProtocolError(Exception):
    """Base for wire-format failures."""


class ParseError(ProtocolError):
    """Line is not a JSON object."""


class VersionError(ProtocolError):
    """Envelope version is not supported."""


class SchemaError(ProtocolError):
    """A field is missing, ill-typed, or violates a type-level invariant."""

    def __init__(self, field_name: str, message: str = "") -> None:
        self.field = field_name
        super().__init__(message or f"invalid field: {field_name}")


class EncodeError(ProtocolError):
    """Envelope cannot be serialized (e.g. non-finite number)."""


@dataclass(frozen=True)
class JointCommand:
    """One timestamped instruction: five joint targets plus gripper aperture."""

    id: str
    arm_id: str
    base_deg: float
    shoulder_deg: float
    elbow_deg: float
    wrist_pitch_deg: float
    wrist_roll_deg: float
    gripper_mm: float
    issued_at_ms: int
    operator_id: str

    def targets(self) -> JointConfig:
        return JointConfig(
            base_deg=self.base_deg,
            shoulder_deg=self.shoulder_deg,
            elbow_deg=self.elbow_deg,
            wrist_pitch_deg=self.wrist_pitch_deg,
            wrist_roll_deg=self.wrist_roll_deg,
            gripper_mm=self.gripper_mm,
        )


@dataclass(frozen=True)
class Ack:
    command_id: str
    status: str
    detail: str = ""
    final_pose: CartesianPose | None = None
    completed_at_ms: int = 0


@dataclass(frozen=True)
class Notification:
    topic: str
    event: dict


@dataclass(frozen=True)
class PatternPrompt:
    pattern_id: str
    matched_prefix_len: int
    remainder: tuple[JointConfig, ...]


@dataclass(frozen=True)
class PatternResponse:
    pattern_id: str
    accepted: bool


@dataclass(frozen=True)
class Subscribe:
    topics: tuple[str, ...]


@dataclass(frozen=True)
class Register:
    kind: str  # "operator" or "robot"
    id: str
    profile: dict | None = None


Body = Union[JointCommand, Ack, Notification, PatternPrompt, PatternResponse, Subscribe, Register]


@dataclass(frozen=True)
class Envelope:
    type: str
    body: Body
    seq: int = 0
    v: int = PROTOCOL_VERSION

    def with_seq(self, seq: int) -> "Envelope":
        return replace(self, seq=seq)


@dataclass(frozen=True)
class Violation:
    field: str
    message: str


@dataclass(frozen=True)
class ValidationResult:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations


# ---------------------------------------------------------------------------
# encoding

def _num(value: float) -> float | int:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise EncodeError(f"expected number, got {type(value).__name__}")
    if isinstance(value, int):
        return value
    if not math.isfinite(value):
        raise EncodeError(f"non-finite number: {value!r}")
    return round(value, 6)


def _targets_obj(t: JointConfig) -> dict:
    return {
        "base_deg": _num(t.base_deg),
        "shoulder_deg": _num(t.shoulder_deg),
        "elbow_deg": _num(t.elbow_deg),
        "wrist_pitch_deg": _num(t.wrist_pitch_deg),
        "wrist_roll_deg": _num(t.wrist_roll_deg),
        "gripper_mm": _num(t.gripper_mm),
    }


def _pose_obj(p: CartesianPose) -> dict:
    return {
        "x_cm": _num(p.x_cm),
        "y_cm": _num(p.y_cm),
        "z_cm": _num(p.z_cm),
        "roll_deg": _num(p.roll_deg),
        "gripper_mm": _num(p.gripper_mm),
    }


def body_to_obj(body: Body) -> dict:
    if isinstance(body, JointCommand):
        return {
            "id": body.id,
            "arm_id": body.arm_id,
            "base_deg": _num(body.base_deg),
            "shoulder_deg": _num(body.shoulder_deg),
            "elbow_deg": _num(body.elbow_deg),
            "wrist_pitch_deg": _num(body.wrist_pitch_deg),
            "wrist_roll_deg": _num(body.wrist_roll_deg),
            "gripper_mm": _num(body.gripper_mm),
            "issued_at_ms": body.issued_at_ms,
            "operator_id": body.operator_id,
        }
    if isinstance(body, Ack):
        obj: dict[str, Any] = {"command_id": body.command_id, "status": body.status}
        if body.final_pose is not None:
            obj["final_pose"] = _pose_obj(body.final_pose)
        obj["detail"] = body.detail
        obj["completed_at_ms"] = body.completed_at_ms
        return obj
    if isinstance(body, Notification):
        return {"topic": body.topic, "event": _canonical_value(body.event)}
    if isinstance(body, PatternPrompt):
        return {
            "pattern_id": body.pattern_id,
            "matched_prefix_len": body.matched_prefix_len,
            "remainder": [_targets_obj(t) for t in body.remainder],
        }
    if isinstance(body, PatternResponse):
        return {"pattern_id": body.pattern_id, "accepted": body.accepted}
    if isinstance(body, Subscribe):
        return {"topics": list(body.topics)}
    if isinstance(body, Register):
        obj = {"kind": body.kind, "id": body.id}
        if body.profile is not None:
            obj["profile"] = _canonical_value(body.profile)
        return obj
    raise EncodeError(f"unknown body type: {type(body).__name__}")


def _canonical_value(value: Any) -> Any:
    """Apply the numeric canonicalization to free-form JSON values."""
    if isinstance(value, bool) or value is None or isinstance(value, (str, int)):
        return value
    if isinstance(value, float):
        return _num(value)
    if isinstance(value, (list, tuple)):
        return [_canonical_value(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _canonical_value(v) for k, v in value.items()}
    raise EncodeError(f"unserializable value: {type(value).__name__}")


def envelope_to_obj(env: Envelope) -> dict:
    if env.type not in ENVELOPE_TYPES:
        raise EncodeError(f"unknown envelope type: {env.type!r}")
    return {"v": env.v, "type": env.type, "seq": env.seq, "body": body_to_obj(env.body)}


def encode(env: Envelope) -> bytes:
    """Serialize an envelope to one newline-terminated JSON line."""
    obj = envelope_to_obj(env)
    return (json.dumps(obj, separators=(",", ":"), ensure_ascii=False) + "\n").encode("utf-8")


# ---------------------------------------------------------------------------
# decoding

def _get(obj: dict, name: str, kinds: tuple[type, ...], *, where: str = "") -> Any:
    key = f"{where}{name}"
    if name not in obj:
        raise SchemaError(key, f"missing field: {key}")
    value = obj[name]
    if isinstance(value, bool) and bool not in kinds:
        raise SchemaError(key, f"ill-typed field: {key}")
    if not isinstance(value, kinds):
        raise SchemaError(key, f"ill-typed field: {key}")
    return value


def _get_num(obj: dict, name: str, *, where: str = "") -> float:
    return float(_get(obj, name, (int, float), where=where))


def _get_str(obj: dict, name: str, *, where: str = "") -> str:
    return _get(obj, name, (str,), where=where)


def _get_int(obj: dict, name: str, *, where: str = "") -> int:
    return _get(obj, name, (int,), where=where)


def _decode_targets(obj: Any, where: str) -> JointConfig:
    if not isinstance(obj, dict):
        raise SchemaError(where.rstrip("."), f"ill-typed field: {where.rstrip('.')}")
    return JointConfig(
        base_deg=_get_num(obj, "base_deg", where=where),
        shoulder_deg=_get_num(obj, "shoulder_deg", where=where),
        elbow_deg=_get_num(obj, "elbow_deg", where=where),
        wrist_pitch_deg=_get_num(obj, "wrist_pitch_deg", where=where),
        wrist_roll_deg=_get_num(obj, "wrist_roll_deg", where=where),
        gripper_mm=_get_num(obj, "gripper_mm", where=where),
    )


def _decode_command(obj: dict) -> JointCommand:
    cmd_id = _get_str(obj, "id")
    if not _UUID_RE.match(cmd_id):
        raise SchemaError("id", "id must be a canonical hex-hyphen identifier")
    return JointCommand(
        id=cmd_id,
        arm_id=_get_str(obj, "arm_id"),
        base_deg=_get_num(obj, "base_deg"),
        shoulder_deg=_get_num(obj, "shoulder_deg"),
        elbow_deg=_get_num(obj, "elbow_deg"),
        wrist_pitch_deg=_get_num(obj, "wrist_pitch_deg"),
        wrist_roll_deg=_get_num(obj, "wrist_roll_deg"),
        gripper_mm=_get_num(obj, "gripper_mm"),
        issued_at_ms=_get_int(obj, "issued_at_ms"),
        operator_id=_get_str(obj, "operator_id"),
    )


def _decode_ack(obj: dict) -> Ack:
    status = _get_str(obj, "status")
    if status not in ACK_STATUSES:
        raise SchemaError("status", f"unknown ack status: {status!r}")
    pose = None
    if "final_pose" in obj and obj["final_pose"] is not None:
        p = obj["final_pose"]
        if not isinstance(p, dict):
            raise SchemaError("final_pose", "ill-typed field: final_pose")
        pose = CartesianPose(
            x_cm=_get_num(p, "x_cm", where="final_pose."),
            y_cm=_get_num(p, "y_cm", where="final_pose."),
            z_cm=_get_num(p, "z_cm", where="final_pose."),
            roll_deg=_get_num(p, "roll_deg", where="final_pose."),
            gripper_mm=_get_num(p, "gripper_mm", where="final_pose."),
        )
    detail = _get_str(obj, "detail") if "detail" in obj else ""
    if status == "ok" and pose is None:
        raise SchemaError("final_pose", "ok ack requires final_pose")
    if status != "ok" and not detail:
        raise SchemaError("detail", "non-ok ack requires a detail")
    return Ack(
        command_id=_get_str(obj, "command_id"),
        status=status,
        detail=detail,
        final_pose=pose,
        completed_at_ms=_get_int(obj, "completed_at_ms"),
    )


def _decode_prompt(obj: dict) -> PatternPrompt:
    remainder = _get(obj, "remainder", (list,))
    if not remainder:
        raise SchemaError("remainder", "remainder must be non-empty")
    prefix_len = _get_int(obj, "matched_prefix_len")
    if prefix_len < 1:
        raise SchemaError("matched_prefix_len", "matched prefix must cover at least one command")
    return PatternPrompt(
        pattern_id=_get_str(obj, "pattern_id"),
        matched_prefix_len=prefix_len,
        remainder=tuple(
            _decode_targets(t, f"remainder[{i}].") for i, t in enumerate(remainder)
        ),
    )


def _decode_body(env_type: str, obj: dict) -> Body:
    if env_type == "command":
        return _decode_command(obj)
    if env_type == "ack":
        return _decode_ack(obj)
    if env_type == "notification":
        event = _get(obj, "event", (dict,))
        return Notification(topic=_get_str(obj, "topic"), event=event)
    if env_type == "pattern_prompt":
        return _decode_prompt(obj)
    if env_type == "pattern_response":
        return PatternResponse(
            pattern_id=_get_str(obj, "pattern_id"),
            accepted=_get(obj, "accepted", (bool,)),
        )
    if env_type == "subscribe":
        topics = _get(obj, "topics", (list,))
        if not all(isinstance(t, str) for t in topics):
            raise SchemaError("topics", "topics must be strings")
        return Subscribe(topics=tuple(topics))
    if env_type == "register":
        kind = _get_str(obj, "kind")
        if kind not in ("operator", "robot"):
            raise SchemaError("kind", f"unknown register kind: {kind!r}")
        client_id = _get_str(obj, "id")
        if not client_id:
            raise SchemaError("id", "id must be non-empty")
        profile = obj.get("profile")
        if profile is not None and not isinstance(profile, dict):
            raise SchemaError("profile", "ill-typed field: profile")
        return Register(kind=kind, id=client_id, profile=profile)
    raise SchemaError("type", f"unknown envelope type: {env_type!r}")


def envelope_from_obj(obj: dict) -> Envelope:
    """Validate and build an envelope from an already-parsed JSON object."""
    if not isinstance(obj, dict):
        raise ParseError("wire line must be a JSON object")
    version = _get_int(obj, "v")
    if version != PROTOCOL_VERSION:
        raise VersionError(f"unsupported protocol version: {version}")
    env_type = _get_str(obj, "type")
    seq = _get_int(obj, "seq")
    body_obj = _get(obj, "body", (dict,))
    return Envelope(type=env_type, body=_decode_body(env_type, body_obj), seq=seq, v=version)


def decode(line: bytes | str) -> Envelope:
    """Parse and fully validate one wire line. Unknown keys are ignored."""
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"not UTF-8: {exc}") from None
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc}") from None
    return envelope_from_obj(obj)


# ---------------------------------------------------------------------------
# command validation

def validate_command(cmd: JointCommand, profile: ArmProfile) -> ValidationResult:
    """Check a command against the arm's joint and gripper ranges.

    Reports every violated field, not just the first. Values are validated,
    never clamped, and the check is pure.
    """
    violations: list[Violation] = []
    angle_fields = (
        ("base_deg", cmd.base_deg),
        ("shoulder_deg", cmd.shoulder_deg),
        ("elbow_deg", cmd.elbow_deg),
        ("wrist_pitch_deg", cmd.wrist_pitch_deg),
        ("wrist_roll_deg", cmd.wrist_roll_deg),
    )
    for (name, value), (lo, hi) in zip(angle_fields, profile.joint_ranges_deg):
        if not math.isfinite(value):
            violations.append(Violation(name, f"{name} must be finite"))
        elif value < lo:
            violations.append(Violation(name, f"{name} {value} below min {lo}"))
        elif value > hi:
            violations.append(Violation(name, f"{name} {value} above max {hi}"))
    lo, hi = profile.gripper_range_mm
    if not math.isfinite(cmd.gripper_mm):
        violations.append(Violation("gripper_mm", "gripper_mm must be finite"))
    elif cmd.gripper_mm < lo:
        violations.append(Violation("gripper_mm", f"gripper_mm {cmd.gripper_mm} below min {lo}"))
    elif cmd.gripper_mm > hi:
        violations.append(Violation("gripper_mm", f"gripper_mm {cmd.gripper_mm} above max {hi}"))
    return ValidationResult(violations=tuple(violations))
