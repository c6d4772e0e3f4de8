"""Kinematic, timing, and static-torque model of the 5-DoF arm.

The chain is base yaw -> shoulder pitch -> elbow pitch -> wrist pitch ->
wrist roll, with link lengths 6.5 cm (shoulder), 10.0 cm (arm) and 4.5 cm
(wrist). The all-zero configuration points straight up, so pitches are
measured from vertical +z and the zero pose has the effector at
(0, 0, 21.0) cm. Everything here is pure and deterministic; the only
mutable arm state lives in the device agent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable

import yaml

JOINT_NAMES = ("base", "shoulder", "elbow", "wrist_pitch", "wrist_roll")

# Speed for joints driven by the large metal-gear servos. Their datasheet
# gives torque but no transit speed, so this default is the class-typical
# value and is profile-overridable. The micro servos are specified at
# 0.18 s per 60 degrees.
MG995_SPEED_S_PER_60DEG = 0.20
MICRO_SERVO_SPEED_S_PER_60DEG = 0.18


class LimitError(ValueError):
    """A joint configuration is outside the profile's ranges."""


@dataclass(frozen=True)
class MassPoint:
    """Point mass hanging off the pitch chain.

    `joint` indexes the joint the mass sits at (2 = shoulder at the origin,
    3 = elbow, 4 = wrist pitch) and `offset_cm` is measured along the link
    leaving that joint. The default masses are the elbow servo, the
    wrist-pitch servo, and the two micro servos at the effector; the two
    shoulder servos sit on the shoulder axis and contribute no moment.
    """

    mass_g: float
    joint: int
    offset_cm: float


@dataclass(frozen=True)
class ArmProfile:
    """Immutable physical description of one arm."""

    link_lengths_cm: tuple[float, float, float] = (6.5, 10.0, 4.5)
    joint_ranges_deg: tuple[tuple[float, float], ...] = (
        (-60.0, 60.0),
        (-60.0, 60.0),
        (-60.0, 60.0),
        (-60.0, 60.0),
        (-90.0, 90.0),
    )
    servo_speeds_s_per_60deg: tuple[float, ...] = (
        MG995_SPEED_S_PER_60DEG,
        MG995_SPEED_S_PER_60DEG,
        MG995_SPEED_S_PER_60DEG,
        MG995_SPEED_S_PER_60DEG,
        MICRO_SERVO_SPEED_S_PER_60DEG,
    )
    shoulder_stall_torque_kgfcm: float = 20.0
    mass_points_g: tuple[MassPoint, ...] = (
        MassPoint(55.0, 3, 0.0),
        MassPoint(55.0, 4, 0.0),
        MassPoint(20.0, 4, 4.5),
        MassPoint(20.0, 4, 4.5),
    )
    gripper_range_mm: tuple[float, float] = (0.0, 50.8)

    def __post_init__(self) -> None:
        if len(self.link_lengths_cm) != 3 or any(l <= 0 for l in self.link_lengths_cm):
            raise ValueError("link lengths must be three positive values")
        if len(self.joint_ranges_deg) != 5:
            raise ValueError("need ranges for all five joints")
        for lo, hi in self.joint_ranges_deg:
            if not lo < hi:
                raise ValueError(f"degenerate joint range [{lo}, {hi}]")
        if len(self.servo_speeds_s_per_60deg) != 5 or any(
            s <= 0 for s in self.servo_speeds_s_per_60deg
        ):
            raise ValueError("servo speeds must be five positive values")
        if self.shoulder_stall_torque_kgfcm <= 0:
            raise ValueError("stall torque must be positive")
        for mp in self.mass_points_g:
            if mp.mass_g < 0:
                raise ValueError("mass points cannot be negative")
            if mp.joint not in (2, 3, 4):
                raise ValueError("mass point joint must be 2 (shoulder), 3 (elbow) or 4 (wrist pitch)")
        lo, hi = self.gripper_range_mm
        if not lo < hi or lo < 0:
            raise ValueError("gripper range must be non-degenerate and non-negative")

    @property
    def reach_cm(self) -> float:
        return sum(self.link_lengths_cm)

    def with_speed_scale(self, factor: float) -> "ArmProfile":
        """Scale servo speeds by `factor` (>1 means faster transit)."""
        if factor <= 0:
            raise ValueError("speed scale must be positive")
        return replace(
            self,
            servo_speeds_s_per_60deg=tuple(s / factor for s in self.servo_speeds_s_per_60deg),
        )

    def to_dict(self) -> dict:
        return {
            "link_lengths_cm": list(self.link_lengths_cm),
            "joint_ranges_deg": {
                name: list(rng) for name, rng in zip(JOINT_NAMES, self.joint_ranges_deg)
            },
            "servo_speeds_s_per_60deg": {
                name: speed
                for name, speed in zip(JOINT_NAMES, self.servo_speeds_s_per_60deg)
            },
            "shoulder_stall_torque_kgfcm": self.shoulder_stall_torque_kgfcm,
            "mass_points_g": [
                {"mass_g": mp.mass_g, "joint": mp.joint, "offset_cm": mp.offset_cm}
                for mp in self.mass_points_g
            ],
            "gripper_range_mm": list(self.gripper_range_mm),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ArmProfile":
        kwargs: dict = {}
        if "link_lengths_cm" in data:
            kwargs["link_lengths_cm"] = tuple(float(v) for v in data["link_lengths_cm"])
        if "joint_ranges_deg" in data:
            ranges = data["joint_ranges_deg"]
            kwargs["joint_ranges_deg"] = tuple(
                (float(ranges[name][0]), float(ranges[name][1])) for name in JOINT_NAMES
            )
        if "servo_speeds_s_per_60deg" in data:
            speeds = data["servo_speeds_s_per_60deg"]
            kwargs["servo_speeds_s_per_60deg"] = tuple(
                float(speeds[name]) for name in JOINT_NAMES
            )
        if "shoulder_stall_torque_kgfcm" in data:
            kwargs["shoulder_stall_torque_kgfcm"] = float(data["shoulder_stall_torque_kgfcm"])
        if "mass_points_g" in data:
            kwargs["mass_points_g"] = tuple(
                MassPoint(float(mp["mass_g"]), int(mp["joint"]), float(mp["offset_cm"]))
                for mp in data["mass_points_g"]
            )
        if "gripper_range_mm" in data:
            kwargs["gripper_range_mm"] = tuple(float(v) for v in data["gripper_range_mm"])
        return cls(**kwargs)


DEFAULT_PROFILE = ArmProfile()


@dataclass(frozen=True)
class JointConfig:
    """One joint-space configuration: five angles plus gripper aperture."""

    base_deg: float = 0.0
    shoulder_deg: float = 0.0
    elbow_deg: float = 0.0
    wrist_pitch_deg: float = 0.0
    wrist_roll_deg: float = 0.0
    gripper_mm: float = 0.0

    def angles(self) -> tuple[float, float, float, float, float]:
        return (
            self.base_deg,
            self.shoulder_deg,
            self.elbow_deg,
            self.wrist_pitch_deg,
            self.wrist_roll_deg,
        )

    @classmethod
    def from_angles(
        cls, angles: Iterable[float], gripper_mm: float = 0.0
    ) -> "JointConfig":
        a = tuple(float(v) for v in angles)
        if len(a) != 5:
            raise ValueError("need exactly five joint angles")
        return cls(*a, gripper_mm=float(gripper_mm))


@dataclass(frozen=True)
class CartesianPose:
    x_cm: float
    y_cm: float
    z_cm: float
    roll_deg: float
    gripper_mm: float


@dataclass(frozen=True)
class MotionPlan:
    """Synchronized move: every joint arrives at `duration_s` together."""

    start: JointConfig
    target: JointConfig
    duration_s: float
    rates_deg_s: tuple[float, float, float, float, float]

    @property
    def duration_ms(self) -> int:
        return round(self.duration_s * 1000)


def check_limits(q: JointConfig, profile: ArmProfile) -> None:
    for name, value, (lo, hi) in zip(JOINT_NAMES, q.angles(), profile.joint_ranges_deg):
        if not lo <= value <= hi:
            raise LimitError(f"{name}_deg {value} outside [{lo}, {hi}]")
    lo, hi = profile.gripper_range_mm
    if not lo <= q.gripper_mm <= hi:
        raise LimitError(f"gripper_mm {q.gripper_mm} outside [{lo}, {hi}]")


def _cumulative_pitches_rad(q: JointConfig) -> tuple[float, float, float]:
    p1 = math.radians(q.shoulder_deg)
    p2 = p1 + math.radians(q.elbow_deg)
    p3 = p2 + math.radians(q.wrist_pitch_deg)
    return p1, p2, p3


def forward_kinematics(q: JointConfig, profile: ArmProfile = DEFAULT_PROFILE) -> CartesianPose:
    """Effector position for a configuration. Total: limits are not required.

    Pitches accumulate down the chain and are measured from vertical, so the
    radial reach is sum(L_k * sin(phi_k)) and the height sum(L_k * cos(phi_k));
    base yaw rotates the radial component into x/y. Wrist roll only spins the
    effector and passes through to the pose.
    """
    values = q.angles() + (q.gripper_mm,)
    if not all(math.isfinite(v) for v in values):
        raise ValueError("non-finite joint value")
    l1, l2, l3 = profile.link_lengths_cm
    p1, p2, p3 = _cumulative_pitches_rad(q)
    r = l1 * math.sin(p1) + l2 * math.sin(p2) + l3 * math.sin(p3)
    z = l1 * math.cos(p1) + l2 * math.cos(p2) + l3 * math.cos(p3)
    yaw = math.radians(q.base_deg)
    return CartesianPose(
        x_cm=r * math.cos(yaw),
        y_cm=r * math.sin(yaw),
        z_cm=z,
        roll_deg=q.wrist_roll_deg,
        gripper_mm=q.gripper_mm,
    )


def plan_motion(
    start: JointConfig, target: JointConfig, profile: ArmProfile = DEFAULT_PROFILE
) -> MotionPlan:
    """Plan a move where all joints finish simultaneously.

    The slowest joint (largest sweep at its servo's rate) sets the duration;
    the others are slowed to match. The gripper rides along over the same
    duration and does not contribute to it.
    """
    check_limits(start, profile)
    check_limits(target, profile)
    deltas = [t - s for s, t in zip(start.angles(), target.angles())]
    # abs(delta) / 60.0 * speed keeps the datasheet cases exact in floats
    # (60 deg at 0.18 s/60deg -> 0.18 s, 90 deg -> 0.27 s).
    duration = max(
        abs(d) / 60.0 * s for d, s in zip(deltas, profile.servo_speeds_s_per_60deg)
    )
    if duration == 0.0:
        rates = (0.0,) * 5
    else:
        rates = tuple(abs(d) / duration for d in deltas)
    return MotionPlan(start=start, target=target, duration_s=duration, rates_deg_s=rates)


def config_at(plan: MotionPlan, t_s: float) -> JointConfig:
    """Configuration `t_s` seconds into a plan (linear interpolation).

    Exactly `plan.start` at t=0 and exactly `plan.target` (bit-equal) at or
    beyond the duration.
    """
    if not math.isfinite(t_s) or t_s < 0:
        raise ValueError("time must be finite and non-negative")
    if t_s >= plan.duration_s:
        return plan.target
    if t_s == 0.0:
        return plan.start
    frac = t_s / plan.duration_s
    s, t = plan.start, plan.target
    return JointConfig(
        base_deg=s.base_deg + (t.base_deg - s.base_deg) * frac,
        shoulder_deg=s.shoulder_deg + (t.shoulder_deg - s.shoulder_deg) * frac,
        elbow_deg=s.elbow_deg + (t.elbow_deg - s.elbow_deg) * frac,
        wrist_pitch_deg=s.wrist_pitch_deg + (t.wrist_pitch_deg - s.wrist_pitch_deg) * frac,
        wrist_roll_deg=s.wrist_roll_deg + (t.wrist_roll_deg - s.wrist_roll_deg) * frac,
        gripper_mm=s.gripper_mm + (t.gripper_mm - s.gripper_mm) * frac,
    )


def _mass_point_radial_cm(mp: MassPoint, q: JointConfig, profile: ArmProfile) -> float:
    """Horizontal distance of a mass point from the shoulder axis."""
    l1, l2, _ = profile.link_lengths_cm
    p1, p2, p3 = _cumulative_pitches_rad(q)
    if mp.joint == 2:
        r = mp.offset_cm * math.sin(p1)
    elif mp.joint == 3:
        r = l1 * math.sin(p1) + mp.offset_cm * math.sin(p2)
    else:
        r = l1 * math.sin(p1) + l2 * math.sin(p2) + mp.offset_cm * math.sin(p3)
    return abs(r)


def shoulder_torque(
    q: JointConfig, payload_g: float = 0.0, profile: ArmProfile = DEFAULT_PROFILE
) -> float:
    """Static moment about the shoulder axis, in kgf*cm.

    Sums mass times horizontal lever arm over the profile's mass points plus
    a payload carried at the effector tip.
    """
    if payload_g < 0:
        raise ValueError("payload cannot be negative")
    l3 = profile.link_lengths_cm[2]
    total_gcm = sum(
        mp.mass_g * _mass_point_radial_cm(mp, q, profile) for mp in profile.mass_points_g
    )
    tip = MassPoint(payload_g, 4, l3)
    total_gcm += payload_g * _mass_point_radial_cm(tip, q, profile)
    return total_gcm / 1000.0


def is_liftable(
    q: JointConfig, payload_g: float = 0.0, profile: ArmProfile = DEFAULT_PROFILE
) -> bool:
    return shoulder_torque(q, payload_g, profile) <= profile.shoulder_stall_torque_kgfcm


def load_profile(path: str) -> ArmProfile:
    """Load a profile from a YAML file; missing keys fall back to defaults."""
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if data is None:
        return DEFAULT_PROFILE
    if not isinstance(data, dict):
        raise ValueError(f"profile file {path} must contain a mapping")
    return ArmProfile.from_dict(data)


def dump_profile(profile: ArmProfile = DEFAULT_PROFILE) -> str:
    return yaml.safe_dump(profile.to_dict(), sort_keys=False)
