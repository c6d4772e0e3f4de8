import random
import uuid

import pytest

from iort.arm_model import DEFAULT_PROFILE
from iort.clock import SimClock
from iort.protocol import Envelope, JointCommand


def make_command(
    arm_id: str = "armA",
    operator_id: str = "op1",
    issued_at_ms: int = 0,
    cmd_id: str | None = None,
    angles: tuple[float, float, float, float, float] = (0, 0, 0, 0, 0),
    gripper_mm: float = 0.0,
    seq: int = 1,
) -> Envelope:
    body = JointCommand(
        id=cmd_id or str(uuid.uuid4()),
        arm_id=arm_id,
        base_deg=float(angles[0]),
        shoulder_deg=float(angles[1]),
        elbow_deg=float(angles[2]),
        wrist_pitch_deg=float(angles[3]),
        wrist_roll_deg=float(angles[4]),
        gripper_mm=float(gripper_mm),
        issued_at_ms=issued_at_ms,
        operator_id=operator_id,
    )
    return Envelope(type="command", body=body, seq=seq)


def random_valid_config(rng: random.Random):
    from iort.arm_model import JointConfig

    ranges = DEFAULT_PROFILE.joint_ranges_deg
    return JointConfig(
        *(rng.uniform(lo, hi) for lo, hi in ranges),
        gripper_mm=rng.uniform(*DEFAULT_PROFILE.gripper_range_mm),
    )


@pytest.fixture
def clock():
    return SimClock()


@pytest.fixture
def profile():
    return DEFAULT_PROFILE
