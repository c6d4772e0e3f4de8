import { describe, expect, it } from "vitest";
import {
  parseAck,
  parseEnvelope,
  ProtocolError,
  serializeResponse,
  serializeSequenceEnd,
} from "../src/protocol.js";

const ACK_FRAME = JSON.stringify({
  v: 1,
  type: "ack",
  seq: 3,
  body: {
    command_id: "8e6e3615-0bcd-4ef1-9e1f-1fdbd0a3f2a7",
    status: "ok",
    final_pose: { x_cm: 0, y_cm: 0, z_cm: 21, roll_deg: 0, gripper_mm: 0 },
    detail: "",
    completed_at_ms: 180,
  },
});

describe("wire frames", () => {
  it("parses an ack frame field for field", () => {
    const env = parseEnvelope(ACK_FRAME);
    expect(env.type).toBe("ack");
    if (env.type !== "ack") return;
    expect(env.body.status).toBe("ok");
    expect(env.body.final_pose?.z_cm).toBe(21);
    expect(env.seq).toBe(3);
  });

  it("rejects other protocol versions", () => {
    const frame = ACK_FRAME.replace('"v":1', '"v":2');
    expect(() => parseEnvelope(frame)).toThrow(ProtocolError);
  });

  it("rejects malformed JSON and missing fields", () => {
    expect(() => parseEnvelope("{nope")).toThrow(ProtocolError);
    const missing = JSON.parse(ACK_FRAME);
    delete missing.body.command_id;
    expect(() => parseEnvelope(JSON.stringify(missing))).toThrow(ProtocolError);
  });

  it("ignores unknown keys", () => {
    const obj = JSON.parse(ACK_FRAME);
    obj.future = true;
    obj.body.also_future = { x: 1 };
    expect(parseEnvelope(JSON.stringify(obj)).type).toBe("ack");
  });

  it("requires a pose on ok acks", () => {
    const obj = JSON.parse(ACK_FRAME);
    delete obj.body.final_pose;
    expect(() => parseEnvelope(JSON.stringify(obj))).toThrow(ProtocolError);
  });

  it("parses notification-wrapped acks (the push path)", () => {
    const frame = JSON.stringify({
      v: 1,
      type: "notification",
      seq: 9,
      body: { topic: "arm.armA.ack", event: JSON.parse(ACK_FRAME).body },
    });
    const env = parseEnvelope(frame);
    expect(env.type).toBe("notification");
    if (env.type !== "notification") return;
    const ack = parseAck(env.body.event);
    expect(ack.completed_at_ms).toBe(180);
  });

  it("parses prompt frames and requires a non-empty remainder", () => {
    const frame = JSON.stringify({
      v: 1,
      type: "pattern_prompt",
      seq: 2,
      body: {
        pattern_id: "pat-0001",
        matched_prefix_len: 2,
        remainder: [{
          base_deg: 0, shoulder_deg: 55, elbow_deg: -10,
          wrist_pitch_deg: 12, wrist_roll_deg: -20, gripper_mm: 0,
        }],
      },
    });
    const env = parseEnvelope(frame);
    expect(env.type).toBe("pattern_prompt");
    if (env.type !== "pattern_prompt") return;
    expect(env.body.remainder).toHaveLength(1);
    const empty = JSON.parse(frame);
    empty.body.remainder = [];
    expect(() => parseEnvelope(JSON.stringify(empty))).toThrow(ProtocolError);
  });

  it("serializes responses with strictly increasing seq", () => {
    const a = JSON.parse(serializeResponse("pat-0001", true));
    const b = JSON.parse(serializeSequenceEnd("armA"));
    expect(a.v).toBe(1);
    expect(a.body).toEqual({ pattern_id: "pat-0001", accepted: true });
    expect(b.body.topic).toBe("sequence.end");
    expect(b.seq).toBeGreaterThan(a.seq);
  });
});
