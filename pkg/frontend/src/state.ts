// Console session state and its pure transition functions.
//
// The console never fabricates state: the solid pose and every history row
// come from acked wire envelopes; slider changes only move a ghost preview.
// Pending entries drain exclusively via acks.

import type { AckBody, CommandBody, JointTargets, PoseBody, PromptBody } from "./protocol.js";

export interface ArmInfo {
  arm_id: string;
  live: boolean;
  profile: {
    joint_ranges_deg: Record<string, [number, number]>;
    gripper_range_mm: [number, number];
    link_lengths_cm: [number, number, number];
  };
  last_pose: PoseBody | null;
}

export interface PendingEntry {
  commandId: string | null; // null for broker-minted reuse commands
  targets: JointTargets;
  recordId: number | null;
  minted: boolean;
}

export interface HistoryEntry {
  targets: JointTargets | null;
  ack: AckBody;
}

export interface Violation {
  field: string;
  message: string;
}

export interface ConsoleState {
  operatorId: string;
  armId: string | null;
  arms: ArmInfo[];
  connected: boolean;
  pending: PendingEntry[];
  history: HistoryEntry[];
  activePrompt: PromptBody | null;
  livePose: PoseBody | null;
  lastAckedTargets: JointTargets | null;
  violations: Violation[];
}

export function initialState(operatorId: string): ConsoleState {
  return {
    operatorId,
    armId: null,
    arms: [],
    connected: false,
    pending: [],
    history: [],
    activePrompt: null,
    livePose: null,
    lastAckedTargets: null,
    violations: [],
  };
}

export function onConnectionChange(state: ConsoleState, connected: boolean): ConsoleState {
  // Disconnects keep the pending list: those commands are durably queued.
  return { ...state, connected };
}

export function onArms(state: ConsoleState, arms: ArmInfo[]): ConsoleState {
  let armId = state.armId;
  if (armId === null && arms.length > 0) armId = arms[0].arm_id;
  const selected = arms.find((a) => a.arm_id === armId);
  const livePose = state.livePose ?? selected?.last_pose ?? null;
  return { ...state, arms, armId, livePose };
}

export function selectArm(state: ConsoleState, armId: string): ConsoleState {
  return { ...state, armId, pending: [], history: [], activePrompt: null,
           livePose: null, lastAckedTargets: null, violations: [] };
}

export function onReceipt(
  state: ConsoleState, command: CommandBody, recordId: number,
): ConsoleState {
  const entry: PendingEntry = {
    commandId: command.id,
    targets: {
      base_deg: command.base_deg,
      shoulder_deg: command.shoulder_deg,
      elbow_deg: command.elbow_deg,
      wrist_pitch_deg: command.wrist_pitch_deg,
      wrist_roll_deg: command.wrist_roll_deg,
      gripper_mm: command.gripper_mm,
    },
    recordId,
    minted: false,
  };
  return { ...state, pending: [...state.pending, entry], violations: [] };
}

export function onSendRejected(state: ConsoleState, violations: Violation[]): ConsoleState {
  return { ...state, violations };
}

function insertByCompleted(history: HistoryEntry[], entry: HistoryEntry): HistoryEntry[] {
  const out = [...history, entry];
  out.sort((a, b) => a.ack.completed_at_ms - b.ack.completed_at_ms);
  return out;
}

export function onAck(state: ConsoleState, ack: AckBody): ConsoleState {
  let pending = state.pending;
  let matched = pending.find((p) => p.commandId === ack.command_id);
  if (!matched) {
    // A broker-minted reuse command: take the oldest minted entry.
    matched = pending.find((p) => p.minted);
  }
  let targets: JointTargets | null = null;
  if (matched) {
    targets = matched.targets;
    pending = pending.filter((p) => p !== matched);
  }
  const history = insertByCompleted(state.history, { targets, ack });
  let livePose = state.livePose;
  let lastAckedTargets = state.lastAckedTargets;
  if (ack.status === "ok" && ack.final_pose) {
    livePose = ack.final_pose;
    if (targets) lastAckedTargets = targets;
  }
  return { ...state, pending, history, livePose, lastAckedTargets };
}

export function onPrompt(state: ConsoleState, prompt: PromptBody): ConsoleState {
  // At most one active prompt is displayed; later ones wait for their
  // re-issue in a fresh sequence.
  if (state.activePrompt !== null) return state;
  return { ...state, activePrompt: prompt };
}

export function onPromptAccepted(state: ConsoleState): ConsoleState {
  const prompt = state.activePrompt;
  if (!prompt) return state;
  // The broker mints and enqueues the remainder; show it as pending now
  // and reconcile against the acks as they arrive.
  const minted: PendingEntry[] = prompt.remainder.map((targets) => ({
    commandId: null,
    targets,
    recordId: null,
    minted: true,
  }));
  return { ...state, activePrompt: null, pending: [...state.pending, ...minted] };
}

export function onPromptRejected(state: ConsoleState): ConsoleState {
  // Nothing is enqueued; the broker will not re-prompt this pattern
  // within the current sequence.
  return { ...state, activePrompt: null };
}

export function onPromptSuperseded(state: ConsoleState): ConsoleState {
  return { ...state, activePrompt: null };
}

export function selectedArm(state: ConsoleState): ArmInfo | undefined {
  return state.arms.find((a) => a.arm_id === state.armId);
}
