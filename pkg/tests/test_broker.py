import threading
import uuid

import pytest

from iort.broker import (
    BrokerCore,
    ConflictError,
    LeaseError,
    NotFoundError,
    PromptError,
    ValidationRejected,
    ack_queue,
    cmd_queue,
    topic_matches,
)
from iort.clock import SimClock
from iort.protocol import Ack, Envelope, JointCommand, PatternResponse
from iort.arm_model import CartesianPose
from conftest import make_command


class CollectingTransport:
    def __init__(self):
        self.sent = []

    def send(self, env):
        self.sent.append(env)
        return True


class FailingTransport:
    def send(self, env):
        raise ConnectionResetError("gone mid-publish")


def make_broker(clock=None, **kwargs):
    return BrokerCore(clock or SimClock(), **kwargs)


def register_arm(core, arm_id="armA"):
    return core.register("robot", arm_id)


def ok_ack(cmd_id, at_ms=0):
    return Ack(command_id=cmd_id, status="ok",
               final_pose=CartesianPose(0, 0, 21.0, 0, 0), completed_at_ms=at_ms)


# --- register ----------------------------------------------------------------


def test_robot_register_creates_both_queues():
    core = make_broker()
    register_arm(core, "armA")
    assert set(core.queue_names()) == {"cmd.armA", "ack.armA"}


def test_duplicate_live_robot_conflicts():
    core = make_broker()
    register_arm(core, "armA")
    with pytest.raises(ConflictError):
        register_arm(core, "armA")


def test_robot_can_reregister_after_disconnect():
    core = make_broker()
    session = register_arm(core, "armA")
    core.unregister(session)
    register_arm(core, "armA")  # no conflict


def test_operator_may_have_multiple_sessions():
    core = make_broker()
    s1 = core.register("operator", "op1")
    s2 = core.register("operator", "op1")
    assert s1.session_id != s2.session_id


def test_empty_id_rejected():
    core = make_broker()
    with pytest.raises(ValueError):
        core.register("robot", "")


# --- enqueue / next / ack_record ------------------------------------------------


def test_fifo_positions_and_delivery_order():
    core = make_broker()
    register_arm(core)
    receipts = [core.enqueue("cmd.armA", make_command(issued_at_ms=i)) for i in range(3)]
    assert [r.position for r in receipts] == [1, 2, 3]
    delivered = []
    while (d := core.next("cmd.armA", "c1")) is not None:
        delivered.append(d.record_id)
    assert delivered == [r.record_id for r in receipts]


def test_unknown_queue_raises_not_found():
    core = make_broker()
    with pytest.raises(NotFoundError):
        core.enqueue("cmd.ghost", make_command(arm_id="ghost"))
    with pytest.raises(NotFoundError):
        core.next("cmd.ghost", "c1")


def test_invalid_command_rejected_with_synthetic_ack():
    core = make_broker()
    register_arm(core)
    bad = make_command(angles=(0, 61, 0, 0, 0))
    with pytest.raises(ValidationRejected) as err:
        core.enqueue("cmd.armA", bad)
    assert [v.field for v in err.value.violations] == ["shoulder_deg"]
    assert core.queue_depth("cmd.armA") == 0  # never enqueued
    d = core.next("ack.armA", "op-consumer")
    assert d.envelope.body.status == "rejected"
    assert d.envelope.body.command_id == bad.body.id


def test_validation_disabled_lets_bad_command_through():
    core = make_broker(validate=False)
    register_arm(core)
    core.enqueue("cmd.armA", make_command(angles=(0, 75, 0, 0, 0)))
    assert core.queue_depth("cmd.armA") == 1


def test_duplicate_command_id_conflicts():
    core = make_broker()
    register_arm(core)
    env = make_command()
    core.enqueue("cmd.armA", env)
    with pytest.raises(ConflictError):
        core.enqueue("cmd.armA", env)


def test_empty_queue_returns_none():
    core = make_broker()
    register_arm(core)
    assert core.next("cmd.armA", "c1") is None


def test_lease_expiry_redelivers_same_record_with_higher_count():
    clock = SimClock()
    core = make_broker(clock, lease_ms=30_000)
    register_arm(core)
    core.enqueue("cmd.armA", make_command())
    first = core.next("cmd.armA", "c1")
    assert first.delivery_count == 1
    assert core.next("cmd.armA", "c1") is None  # leased, nothing ready
    clock.advance_ms(30_000)
    second = core.next("cmd.armA", "c2")
    assert second is not None
    assert second.record_id == first.record_id
    assert second.delivery_count == 2


def test_ack_record_completes_and_queue_drains():
    core = make_broker()
    register_arm(core)
    core.enqueue("cmd.armA", make_command())
    d = core.next("cmd.armA", "c1")
    core.ack_record("cmd.armA", "c1", d.record_id)
    assert core.queue_depth("cmd.armA") == 0


def test_ack_after_expiry_is_lease_error_and_redelivered():
    clock = SimClock()
    core = make_broker(clock, lease_ms=1000)
    register_arm(core)
    core.enqueue("cmd.armA", make_command())
    d = core.next("cmd.armA", "c1")
    clock.advance_ms(1000)
    with pytest.raises(LeaseError):
        core.ack_record("cmd.armA", "c1", d.record_id)
    d2 = core.next("cmd.armA", "c2")
    assert d2.record_id == d.record_id


def test_double_ack_is_lease_error():
    core = make_broker()
    register_arm(core)
    core.enqueue("cmd.armA", make_command())
    d = core.next("cmd.armA", "c1")
    core.ack_record("cmd.armA", "c1", d.record_id)
    with pytest.raises(LeaseError):
        core.ack_record("cmd.armA", "c1", d.record_id)


def test_wrong_consumer_cannot_ack():
    core = make_broker()
    register_arm(core)
    core.enqueue("cmd.armA", make_command())
    d = core.next("cmd.armA", "c1")
    with pytest.raises(LeaseError):
        core.ack_record("cmd.armA", "other", d.record_id)


def test_each_record_leased_to_exactly_one_consumer_concurrently():
    core = make_broker()
    register_arm(core)
    for i in range(200):
        core.enqueue("cmd.armA", make_command(issued_at_ms=i))
    seen: list[int] = []
    lock = threading.Lock()

    def consume(consumer_id):
        while True:
            d = core.next("cmd.armA", consumer_id)
            if d is None:
                return
            with lock:
                seen.append(d.record_id)
            core.ack_record("cmd.armA", consumer_id, d.record_id)

    threads = [threading.Thread(target=consume, args=(f"c{i}",)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(seen) == 200
    assert len(set(seen)) == 200


def test_queue_independence():
    core = make_broker()
    register_arm(core, "armA")
    register_arm(core, "armB")
    core.enqueue("cmd.armA", make_command(arm_id="armA"))
    assert core.queue_depth("cmd.armB") == 0
    assert core.queue_depth("ack.armA") == 0
    d = core.next("cmd.armB", "c")
    assert d is None


# --- publish -------------------------------------------------------------------


def test_topic_matching():
    assert topic_matches("arm.armA.ack", "arm.armA.ack")
    assert topic_matches("arm.armA.*", "arm.armA.ack")
    assert not topic_matches("arm.armA.*", "arm.armB.ack")
    assert not topic_matches("arm.armA.ack", "arm.armA.pattern")


def test_publish_with_no_subscribers_returns_zero():
    core = make_broker()
    assert core.publish("arm.armA.ack", {"x": 1}) == 0


def test_publish_counts_matching_subscribers_once():
    core = make_broker()
    transport = CollectingTransport()
    session = core.register("operator", "op1", transport=transport)
    core.subscribe(session, ["arm.armA.*", "arm.armA.ack"])  # overlapping patterns
    assert core.publish("arm.armA.ack", {"n": 1}) == 1
    assert len(transport.sent) == 1
    env = transport.sent[0]
    assert env.type == "notification"
    assert env.body.topic == "arm.armA.ack"


def test_failing_subscriber_skipped_without_affecting_others():
    core = make_broker()
    good = CollectingTransport()
    s1 = core.register("operator", "op1", transport=FailingTransport())
    s2 = core.register("operator", "op2", transport=good)
    core.subscribe(s1, ["arm.armA.*"])
    core.subscribe(s2, ["arm.armA.*"])
    assert core.publish("arm.armA.ack", {"n": 1}) == 1
    assert len(good.sent) == 1


def test_pushed_envelopes_have_increasing_per_connection_seq():
    core = make_broker()
    transport = CollectingTransport()
    session = core.register("operator", "op1", transport=transport)
    core.subscribe(session, ["arm.armA.*"])
    core.publish("arm.armA.ack", {"n": 1})
    core.publish("arm.armA.ack", {"n": 2})
    seqs = [env.seq for env in transport.sent]
    assert seqs == sorted(seqs) and len(set(seqs)) == len(seqs)


# --- route_ack --------------------------------------------------------------------


def test_route_ack_enqueues_publishes_and_records_outcome():
    core = make_broker()
    register_arm(core)
    transport = CollectingTransport()
    watcher = core.register("operator", "op1", transport=transport)
    core.subscribe(watcher, ["arm.armA.ack"])
    env = make_command()
    core.enqueue("cmd.armA", env)
    core.route_ack("armA", ok_ack(env.body.id, at_ms=5))
    assert core.queue_depth("ack.armA") == 1
    assert len(transport.sent) == 1
    seq = core.store.sequences[0]
    assert seq.commands[0].outcome == "ok"
    assert core.arms()["armA"].last_pose is not None


def test_duplicate_ack_dropped():
    core = make_broker()
    register_arm(core)
    env = make_command()
    core.enqueue("cmd.armA", env)
    core.route_ack("armA", ok_ack(env.body.id))
    core.route_ack("armA", ok_ack(env.body.id))
    assert core.queue_depth("ack.armA") == 1


def test_unknown_command_ack_dropped():
    core = make_broker()
    register_arm(core)
    core.route_ack("armA", ok_ack(str(uuid.uuid4())))
    assert core.queue_depth("ack.armA") == 0


def test_rejected_ack_marks_sequence_unsuccessful():
    core = make_broker(validate=False)
    register_arm(core)
    env = make_command(angles=(0, 75, 0, 0, 0))
    core.enqueue("cmd.armA", env)
    core.route_ack("armA", Ack(command_id=env.body.id, status="rejected",
                               detail="limit", completed_at_ms=1))
    assert core.store.sequences[0].poisoned


# --- monotonicity ------------------------------------------------------------------


def test_issued_at_must_be_monotone_per_producer():
    core = make_broker()
    register_arm(core)
    core.submit_command(make_command(issued_at_ms=100), "tcp-1")
    core.submit_command(make_command(issued_at_ms=100), "tcp-1")  # equal ok
    with pytest.raises(ValidationRejected) as err:
        core.submit_command(make_command(issued_at_ms=99), "tcp-1")
    assert err.value.violations[0].field == "issued_at_ms"
    assert not err.value.acked
    core.submit_command(make_command(issued_at_ms=0), "tcp-2")  # other producer free


# --- sequence boundaries / prompts --------------------------------------------------


def seed_pattern(core, clock, steps, reps=3, arm="armA", op="op1"):
    """Send `steps` `reps` times with ok acks and idle-gap closes."""
    for _ in range(reps):
        for angles in steps:
            env = make_command(arm_id=arm, operator_id=op, angles=angles,
                               issued_at_ms=clock.now_ms())
            core.enqueue(cmd_queue(arm), env)
            d = core.next(cmd_queue(arm), "seed-agent")
            core.ack_record(cmd_queue(arm), "seed-agent", d.record_id)
            core.route_ack(arm, ok_ack(env.body.id, clock.now_ms()))
            clock.advance_ms(500)
        clock.advance_ms(60_000)
        core.tick()
    patterns = core.store.patterns_for(arm)
    assert patterns
    return patterns[-1]


STEPS = [(10, 20, -30, 5, 0), (-15, 0, 40, 0, 45), (0, 55, -10, 12, -20)]


def test_learning_flow_prompt_issued_to_operator_topic():
    clock = SimClock()
    core = make_broker(clock)
    register_arm(core)
    transport = CollectingTransport()
    op = core.register("operator", "op1", transport=transport)
    core.subscribe(op, ["operator.op1.prompt"])
    pattern = seed_pattern(core, clock, STEPS)
    assert pattern.use_count == 3
    # Resend the first two commands.
    for angles in STEPS[:2]:
        env = make_command(operator_id="op1", angles=angles, issued_at_ms=clock.now_ms())
        core.enqueue("cmd.armA", env)
        clock.advance_ms(100)
    prompts = [e for e in transport.sent if e.type == "pattern_prompt"]
    assert len(prompts) == 1
    assert prompts[0].body.pattern_id == pattern.pattern_id
    assert prompts[0].body.matched_prefix_len == 2
    assert len(prompts[0].body.remainder) == 1


def test_accept_prompt_enqueues_remainder_and_bumps_use_count():
    clock = SimClock()
    core = make_broker(clock)
    register_arm(core)
    transport = CollectingTransport()
    op = core.register("operator", "op1", transport=transport)
    core.subscribe(op, ["operator.op1.prompt"])
    pattern = seed_pattern(core, clock, STEPS)
    for angles in STEPS[:2]:
        env = make_command(operator_id="op1", angles=angles, issued_at_ms=clock.now_ms())
        core.enqueue("cmd.armA", env)
    receipts = core.respond_prompt(op, pattern.pattern_id, accepted=True)
    assert len(receipts) == 1
    assert core.queue_depth("cmd.armA") == 3  # two manual + one minted
    assert core.store.get_pattern(pattern.pattern_id).use_count == 4
    # The minted command extends the open sequence.
    open_seq = core.store.open_sequence("armA", "op1")
    assert len(open_seq.commands) == 3


def test_reject_prompt_enqueues_nothing_and_never_reprompts():
    clock = SimClock()
    core = make_broker(clock)
    register_arm(core)
    transport = CollectingTransport()
    op = core.register("operator", "op1", transport=transport)
    core.subscribe(op, ["operator.op1.prompt"])
    pattern = seed_pattern(core, clock, STEPS)
    for angles in STEPS[:2]:
        env = make_command(operator_id="op1", angles=angles, issued_at_ms=clock.now_ms())
        core.enqueue("cmd.armA", env)
    assert core.respond_prompt(op, pattern.pattern_id, accepted=False) == []
    assert core.queue_depth("cmd.armA") == 2
    # Continue the prefix manually: no new prompt for that pattern.
    before = len([e for e in transport.sent if e.type == "pattern_prompt"])
    env = make_command(operator_id="op1", angles=STEPS[2], issued_at_ms=clock.now_ms())
    core.enqueue("cmd.armA", env)
    after = len([e for e in transport.sent if e.type == "pattern_prompt"])
    assert before == after == 1
    # And responding again raises: the prompt was consumed.
    with pytest.raises(PromptError):
        core.respond_prompt(op, pattern.pattern_id, accepted=True)


def test_prompt_expires_when_sequence_closes():
    clock = SimClock()
    core = make_broker(clock)
    register_arm(core)
    op = core.register("operator", "op1", transport=CollectingTransport())
    pattern = seed_pattern(core, clock, STEPS)
    for angles in STEPS[:2]:
        env = make_command(operator_id="op1", angles=angles, issued_at_ms=clock.now_ms())
        core.enqueue("cmd.armA", env)
    clock.advance_ms(60_000)
    core.tick()  # idle gap closes the sequence
    with pytest.raises(PromptError):
        core.respond_prompt(op, pattern.pattern_id, accepted=True)


def test_prompt_response_after_disconnect_is_error():
    clock = SimClock()
    core = make_broker(clock)
    register_arm(core)
    op = core.register("operator", "op1", transport=CollectingTransport())
    pattern = seed_pattern(core, clock, STEPS)
    for angles in STEPS[:2]:
        env = make_command(operator_id="op1", angles=angles, issued_at_ms=clock.now_ms())
        core.enqueue("cmd.armA", env)
    core.unregister(op)
    with pytest.raises(PromptError):
        core.respond_prompt(op, pattern.pattern_id, accepted=True)


def test_operator_disconnect_closes_sequences_session_end():
    clock = SimClock()
    core = make_broker(clock)
    register_arm(core)
    op1 = core.register("operator", "op1")
    op1b = core.register("operator", "op1")
    core.enqueue("cmd.armA", make_command(operator_id="op1"))
    core.unregister(op1)
    assert core.store.open_sequence("armA", "op1") is not None  # second session live
    core.unregister(op1b)
    seq = core.store.sequences[0]
    assert seq.close_reason == "session_end"


def test_explicit_end_sequence():
    clock = SimClock()
    core = make_broker(clock)
    register_arm(core)
    core.register("operator", "op1")
    core.enqueue("cmd.armA", make_command(operator_id="op1"))
    core.end_sequence("armA", "op1")
    assert core.store.sequences[0].close_reason == "explicit_end"


def test_minted_commands_respect_profile_box():
    # A pattern whose gripper quantizes to 51.0 must still mint valid commands.
    clock = SimClock()
    core = make_broker(clock)
    register_arm(core)
    op = core.register("operator", "op1", transport=CollectingTransport())
    steps = [(0, 0, 0, 0, 0), (10, 0, 0, 0, 0), (20, 0, 0, 0, 0)]
    for _ in range(3):
        for i, angles in enumerate(steps):
            env = make_command(operator_id="op1", angles=angles,
                               gripper_mm=50.8, issued_at_ms=clock.now_ms())
            core.enqueue("cmd.armA", env)
            core.route_ack("armA", ok_ack(env.body.id, clock.now_ms()))
            clock.advance_ms(500)
        clock.advance_ms(60_000)
        core.tick()
    pattern = core.store.patterns_for("armA")[0]
    assert pattern.canonical_commands[0][5] == 51.0  # quantized beyond the range
    for angles in steps[:2]:
        env = make_command(operator_id="op1", angles=angles,
                           gripper_mm=50.8, issued_at_ms=clock.now_ms())
        core.enqueue("cmd.armA", env)
    receipts = core.respond_prompt(op, pattern.pattern_id, accepted=True)
    assert len(receipts) == 1  # enqueue would have raised if out of range
    delivered = []
    while (d := core.next("cmd.armA", "c")) is not None:
        delivered.append(d.envelope.body)
    assert delivered[-1].gripper_mm == 50.8
