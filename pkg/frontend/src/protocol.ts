// Wire types for the broker gateway (see docs/protocol.md). Frames are
// single JSON objects; version 1 only, unknown keys ignored.

export const PROTOCOL_VERSION = 1;

export interface JointTargets {
  base_deg: number;
  shoulder_deg: number;
  elbow_deg: number;
  wrist_pitch_deg: number;
  wrist_roll_deg: number;
  gripper_mm: number;
}

export const TARGET_FIELDS: (keyof JointTargets)[] = [
  "base_deg",
  "shoulder_deg",
  "elbow_deg",
  "wrist_pitch_deg",
  "wrist_roll_deg",
  "gripper_mm",
];

export interface CommandBody extends JointTargets {
  id: string;
  arm_id: string;
  issued_at_ms: number;
  operator_id: string;
}

export interface PoseBody {
  x_cm: number;
  y_cm: number;
  z_cm: number;
  roll_deg: number;
  gripper_mm: number;
}

export interface AckBody {
  command_id: string;
  status: "ok" | "rejected" | "fault";
  final_pose?: PoseBody;
  detail: string;
  completed_at_ms: number;
}

export interface PromptBody {
  pattern_id: string;
  matched_prefix_len: number;
  remainder: JointTargets[];
}

export interface NotificationBody {
  topic: string;
  event: Record<string, unknown>;
}

export type Envelope =
  | { v: number; seq: number; type: "ack"; body: AckBody }
  | { v: number; seq: number; type: "notification"; body: NotificationBody }
  | { v: number; seq: number; type: "pattern_prompt"; body: PromptBody }
  | { v: number; seq: number; type: "command"; body: CommandBody }
  | { v: number; seq: number; type: "pattern_response"; body: { pattern_id: string; accepted: boolean } }
  | { v: number; seq: number; type: "subscribe"; body: { topics: string[] } };

export class ProtocolError extends Error {}

function isNumber(value: unknown): value is number {
  return typeof value === "number" && Number.isFinite(value);
}

function requireNumber(obj: Record<string, unknown>, field: string): number {
  const value = obj[field];
  if (!isNumber(value)) throw new ProtocolError(`ill-typed field: ${field}`);
  return value;
}

function requireString(obj: Record<string, unknown>, field: string): string {
  const value = obj[field];
  if (typeof value !== "string") throw new ProtocolError(`ill-typed field: ${field}`);
  return value;
}

export function parseTargets(obj: unknown): JointTargets {
  if (typeof obj !== "object" || obj === null) throw new ProtocolError("targets must be an object");
  const record = obj as Record<string, unknown>;
  const out = {} as JointTargets;
  for (const field of TARGET_FIELDS) out[field] = requireNumber(record, field);
  return out;
}

export function parsePose(obj: unknown): PoseBody {
  if (typeof obj !== "object" || obj === null) throw new ProtocolError("pose must be an object");
  const record = obj as Record<string, unknown>;
  return {
    x_cm: requireNumber(record, "x_cm"),
    y_cm: requireNumber(record, "y_cm"),
    z_cm: requireNumber(record, "z_cm"),
    roll_deg: requireNumber(record, "roll_deg"),
    gripper_mm: requireNumber(record, "gripper_mm"),
  };
}

export function parseAck(obj: unknown): AckBody {
  if (typeof obj !== "object" || obj === null) throw new ProtocolError("ack must be an object");
  const record = obj as Record<string, unknown>;
  const status = requireString(record, "status");
  if (status !== "ok" && status !== "rejected" && status !== "fault") {
    throw new ProtocolError(`unknown ack status: ${status}`);
  }
  const ack: AckBody = {
    command_id: requireString(record, "command_id"),
    status,
    detail: typeof record.detail === "string" ? record.detail : "",
    completed_at_ms: requireNumber(record, "completed_at_ms"),
  };
  if (record.final_pose != null) ack.final_pose = parsePose(record.final_pose);
  if (status === "ok" && !ack.final_pose) throw new ProtocolError("ok ack requires final_pose");
  return ack;
}

export function parsePrompt(obj: unknown): PromptBody {
  if (typeof obj !== "object" || obj === null) throw new ProtocolError("prompt must be an object");
  const record = obj as Record<string, unknown>;
  const remainder = record.remainder;
  if (!Array.isArray(remainder) || remainder.length === 0) {
    throw new ProtocolError("prompt remainder must be non-empty");
  }
  return {
    pattern_id: requireString(record, "pattern_id"),
    matched_prefix_len: requireNumber(record, "matched_prefix_len"),
    remainder: remainder.map(parseTargets),
  };
}

export function parseEnvelope(text: string): Envelope {
  let obj: unknown;
  try {
    obj = JSON.parse(text);
  } catch (err) {
    throw new ProtocolError(`malformed JSON: ${err}`);
  }
  if (typeof obj !== "object" || obj === null) throw new ProtocolError("frame must be an object");
  const record = obj as Record<string, unknown>;
  const v = requireNumber(record, "v");
  if (v !== PROTOCOL_VERSION) throw new ProtocolError(`unsupported protocol version: ${v}`);
  const type = requireString(record, "type");
  const seq = requireNumber(record, "seq");
  const body = record.body;
  if (typeof body !== "object" || body === null) throw new ProtocolError("missing body");
  const bodyRecord = body as Record<string, unknown>;
  switch (type) {
    case "ack":
      return { v, seq, type, body: parseAck(bodyRecord) };
    case "pattern_prompt":
      return { v, seq, type, body: parsePrompt(bodyRecord) };
    case "notification": {
      const event = bodyRecord.event;
      if (typeof event !== "object" || event === null) throw new ProtocolError("ill-typed field: event");
      return {
        v, seq, type,
        body: { topic: requireString(bodyRecord, "topic"), event: event as Record<string, unknown> },
      };
    }
    default:
      throw new ProtocolError(`unexpected frame type from broker: ${type}`);
  }
}

let outSeq = 0;

export function serializeResponse(patternId: string, accepted: boolean): string {
  outSeq += 1;
  return JSON.stringify({
    v: PROTOCOL_VERSION,
    type: "pattern_response",
    seq: outSeq,
    body: { pattern_id: patternId, accepted },
  });
}

export function serializeSequenceEnd(armId: string): string {
  outSeq += 1;
  return JSON.stringify({
    v: PROTOCOL_VERSION,
    type: "notification",
    seq: outSeq,
    body: { topic: "sequence.end", event: { arm_id: armId } },
  });
}
