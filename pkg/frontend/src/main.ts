// Console wiring: sliders, send/sequence controls, live views, prompt modal.

import { fetchArms, postCommand } from "./api.js";
import { DEFAULT_LINKS, type Links } from "./fk.js";
import {
  parseAck,
  serializeResponse,
  serializeSequenceEnd,
  TARGET_FIELDS,
  type CommandBody,
  type JointTargets,
} from "./protocol.js";
import { renderViews } from "./render.js";
import {
  initialState,
  onAck,
  onArms,
  onConnectionChange,
  onPrompt,
  onPromptAccepted,
  onPromptRejected,
  onPromptSuperseded,
  onReceipt,
  onSendRejected,
  selectArm,
  selectedArm,
  type ConsoleState,
} from "./state.js";
import { ReconnectingSocket } from "./ws.js";

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
};

const SLIDER_LABELS: Record<string, string> = {
  base_deg: "base",
  shoulder_deg: "shoulder",
  elbow_deg: "elbow",
  wrist_pitch_deg: "wrist pitch",
  wrist_roll_deg: "wrist roll",
  gripper_mm: "gripper (mm)",
};

let state: ConsoleState = initialState(`op-${Math.random().toString(36).slice(2, 8)}`);
let socket: ReconnectingSocket | null = null;
let httpBase = "";

function update(next: ConsoleState): void {
  state = next;
  redraw();
}

function sliderTargets(): JointTargets {
  const out = {} as JointTargets;
  for (const field of TARGET_FIELDS) {
    out[field] = parseFloat(($(`slider-${field}`) as unknown as HTMLInputElement).value);
  }
  return out;
}

function buildSliders(): void {
  const container = $("sliders");
  container.innerHTML = "";
  const arm = selectedArm(state);
  if (!arm) return;
  for (const field of TARGET_FIELDS) {
    const [lo, hi] =
      field === "gripper_mm"
        ? arm.profile.gripper_range_mm
        : arm.profile.joint_ranges_deg[field.replace("_deg", "")];
    const row = document.createElement("div");
    row.className = "slider-row";
    const label = document.createElement("label");
    label.textContent = SLIDER_LABELS[field];
    const input = document.createElement("input");
    input.type = "range";
    input.min = String(lo);
    input.max = String(hi);
    input.step = "0.5";
    input.value = field === "gripper_mm" ? String(lo) : "0";
    input.id = `slider-${field}`;
    const value = document.createElement("span");
    value.id = `value-${field}`;
    value.textContent = input.value;
    input.addEventListener("input", () => {
      value.textContent = input.value;
      redraw();
    });
    row.append(label, input, value);
    container.append(row);
  }
}

function linksOf(): Links {
  return selectedArm(state)?.profile.link_lengths_cm ?? DEFAULT_LINKS;
}

function redraw(): void {
  $("banner").className = state.connected ? "banner ok" : "banner down";
  $("banner").textContent = state.connected
    ? `connected as ${state.operatorId}`
    : "disconnected — reconnecting…";

  const pose = state.livePose;
  $("pose").textContent = pose
    ? `x ${pose.x_cm.toFixed(2)} cm, y ${pose.y_cm.toFixed(2)} cm, z ${pose.z_cm.toFixed(2)} cm, ` +
      `roll ${pose.roll_deg.toFixed(1)}°, gripper ${pose.gripper_mm.toFixed(1)} mm`
    : "no acked pose yet";

  const pendingList = $("pending");
  pendingList.innerHTML = "";
  for (const entry of state.pending) {
    const li = document.createElement("li");
    li.textContent = `${entry.minted ? "[reuse] " : ""}${formatTargets(entry.targets)}`;
    pendingList.append(li);
  }
  const historyList = $("history");
  historyList.innerHTML = "";
  for (const row of [...state.history].reverse()) {
    const li = document.createElement("li");
    li.className = row.ack.status;
    li.textContent =
      `${row.ack.status} @${row.ack.completed_at_ms} ` +
      (row.targets ? formatTargets(row.targets) : row.ack.command_id) +
      (row.ack.detail ? ` — ${row.ack.detail}` : "");
    historyList.append(li);
  }

  const violations = $("violations");
  violations.innerHTML = "";
  for (const v of state.violations) {
    const li = document.createElement("li");
    li.textContent = `${v.field}: ${v.message}`;
    violations.append(li);
  }

  const modal = $("prompt-modal");
  if (state.activePrompt) {
    modal.style.display = "block";
    $("prompt-title").textContent =
      `Matched ${state.activePrompt.matched_prefix_len} commands of a learned sequence — run the rest?`;
    const list = $("prompt-remainder");
    list.innerHTML = "";
    for (const targets of state.activePrompt.remainder) {
      const li = document.createElement("li");
      li.textContent = formatTargets(targets);
      list.append(li);
    }
  } else {
    modal.style.display = "none";
  }

  try {
    renderViews(
      $("side-view") as unknown as HTMLCanvasElement,
      $("top-view") as unknown as HTMLCanvasElement,
      state.lastAckedTargets,
      document.getElementById(`slider-${TARGET_FIELDS[0]}`) ? sliderTargets() : null,
      linksOf(),
    );
  } catch {
    // canvas unavailable (e.g. during teardown); state stays authoritative
  }
}

function formatTargets(t: JointTargets): string {
  return `[${t.base_deg}, ${t.shoulder_deg}, ${t.elbow_deg}, ${t.wrist_pitch_deg}, ` +
    `${t.wrist_roll_deg}]° grip ${t.gripper_mm}`;
}

async function connect(): Promise<void> {
  const gateway = ($("gateway") as unknown as HTMLInputElement).value.replace(/\/$/, "");
  httpBase = gateway;
  const arms = await fetchArms(gateway);
  update(onArms(state, arms));
  buildSliders();

  const select = $("arm-select") as unknown as HTMLSelectElement;
  select.innerHTML = "";
  for (const arm of arms) {
    const option = document.createElement("option");
    option.value = arm.arm_id;
    option.textContent = `${arm.arm_id}${arm.live ? "" : " (offline)"}`;
    select.append(option);
  }
  select.onchange = () => {
    update(selectArm(state, select.value));
    buildSliders();
  };

  socket?.stop();
  const wsUrl = () => {
    const url = new URL(httpBase);
    const proto = url.protocol === "https:" ? "wss:" : "ws:";
    const topics = `arm.${state.armId}.*,operator.${state.operatorId}.*`;
    return `${proto}//${url.host}/ws?client=${encodeURIComponent(state.operatorId)}` +
      `&topics=${encodeURIComponent(topics)}`;
  };
  socket = new ReconnectingSocket(wsUrl, {
    onState: async (connected) => {
      update(onConnectionChange(state, connected));
      if (connected) {
        // refresh the arm list after every reconnect
        try {
          update(onArms(state, await fetchArms(httpBase)));
        } catch {
          /* gateway briefly down; next reconnect retries */
        }
      }
    },
    onEnvelope: (env) => {
      if (env.type === "pattern_prompt") {
        update(onPrompt(state, env.body));
      } else if (env.type === "notification" && env.body.topic.endsWith(".ack")) {
        update(onAck(state, parseAck(env.body.event)));
      } else if (env.type === "notification" && env.body.topic === "error") {
        const message = String(env.body.event.message ?? "");
        if (message.includes("prompt")) update(onPromptSuperseded(state));
      }
    },
  });
  socket.start();
}

async function send(): Promise<void> {
  const arm = selectedArm(state);
  if (!arm || !state.armId) return;
  const targets = sliderTargets();
  const command: CommandBody = {
    id: crypto.randomUUID(),
    arm_id: state.armId,
    ...targets,
    issued_at_ms: Date.now(),
    operator_id: state.operatorId,
  };
  const result = await postCommand(httpBase, command);
  if (result.ok && result.recordId !== undefined) {
    update(onReceipt(state, command, result.recordId));
  } else if (result.violations) {
    update(onSendRejected(state, result.violations));
  } else {
    update(onSendRejected(state, [{ field: "network", message: result.error ?? "send failed" }]));
  }
}

function main(): void {
  $("connect").addEventListener("click", () => void connect());
  $("send").addEventListener("click", () => void send());
  $("end-sequence").addEventListener("click", () => {
    if (state.armId) socket?.send(serializeSequenceEnd(state.armId));
  });
  $("prompt-accept").addEventListener("click", () => {
    const prompt = state.activePrompt;
    if (prompt && socket?.send(serializeResponse(prompt.pattern_id, true))) {
      update(onPromptAccepted(state));
    }
  });
  $("prompt-reject").addEventListener("click", () => {
    const prompt = state.activePrompt;
    if (prompt) {
      socket?.send(serializeResponse(prompt.pattern_id, false));
      update(onPromptRejected(state));
    }
  });
  redraw();
}

main();
