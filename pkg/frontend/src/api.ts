// REST calls against the broker gateway.

import type { CommandBody } from "./protocol.js";
import type { ArmInfo, Violation } from "./state.js";

export interface SendResult {
  ok: boolean;
  recordId?: number;
  violations?: Violation[];
  error?: string;
}

export async function fetchArms(base: string): Promise<ArmInfo[]> {
  const response = await fetch(`${base}/arms`);
  if (!response.ok) throw new Error(`GET /arms failed: ${response.status}`);
  const data = (await response.json()) as { arms: ArmInfo[] };
  return data.arms;
}

export async function postCommand(base: string, command: CommandBody): Promise<SendResult> {
  const response = await fetch(`${base}/arms/${encodeURIComponent(command.arm_id)}/commands`, {
    method: "POST",
    headers: { "content-type": "application/json" },
    body: JSON.stringify(command),
  });
  if (response.ok) {
    const receipt = (await response.json()) as { record_id: number };
    return { ok: true, recordId: receipt.record_id };
  }
  if (response.status === 422) {
    const data = (await response.json()) as { violations: Violation[] };
    return { ok: false, violations: data.violations };
  }
  const text = await response.text();
  return { ok: false, error: `${response.status}: ${text}` };
}
