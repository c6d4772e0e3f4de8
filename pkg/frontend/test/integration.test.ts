// Headless end-to-end: the console modules (api, ws, state, protocol)
// against a real broker and agent, spawned via the Python CLI. Skipped
// when the CLI is not installed.

import { spawn, spawnSync, type ChildProcess } from "node:child_process";
import { createServer } from "node:net";
import { describe, expect, it } from "vitest";
import WebSocket from "ws";

import { fetchArms, postCommand } from "../src/api.js";
import {
  initialState,
  onAck,
  onArms,
  onConnectionChange,
  onPrompt,
  onReceipt,
  type ConsoleState,
} from "../src/state.js";
import { parseAck, type CommandBody, type Envelope } from "../src/protocol.js";
import { ReconnectingSocket } from "../src/ws.js";

(globalThis as Record<string, unknown>).WebSocket = WebSocket;

const HAVE_CLI = spawnSync("iort", ["--help"], { timeout: 15_000 }).status === 0;

function freePort(): Promise<number> {
  return new Promise((resolve, reject) => {
    const server = createServer();
    server.listen(0, "127.0.0.1", () => {
      const address = server.address();
      if (address === null || typeof address === "string") return reject(new Error("no port"));
      server.close(() => resolve(address.port));
    });
  });
}

function waitFor(predicate: () => boolean, timeoutMs = 20_000): Promise<void> {
  return new Promise((resolve, reject) => {
    const started = Date.now();
    const poll = () => {
      if (predicate()) return resolve();
      if (Date.now() - started > timeoutMs) return reject(new Error("timed out"));
      setTimeout(poll, 50);
    };
    poll();
  });
}

describe.skipIf(!HAVE_CLI)("console against a live gateway", () => {
  it("connects, sends, renders the acked pose, and sees prompts", { timeout: 90_000 }, async () => {
    const tcpPort = await freePort();
    const httpPort = await freePort();
    const procs: ChildProcess[] = [];
    const base = `http://127.0.0.1:${httpPort}`;
    try {
      procs.push(spawn("iort", [
        "broker", "serve", "--port", String(tcpPort), "--http-port", String(httpPort),
        "--idle-gap-s", "1",
      ], { stdio: "ignore" }));
      await waitFor(() => false, 1500).catch(() => undefined); // give it a beat
      procs.push(spawn("iort", [
        "agent", "run", "--arm-id", "armA",
        "--broker", `127.0.0.1:${tcpPort}`, "--speed-scale", "100",
      ], { stdio: "ignore" }));

      // Arm list loads with profile data for the sliders.
      let arms = await (async () => {
        for (let i = 0; i < 100; i++) {
          try {
            const result = await fetchArms(base);
            if (result.some((a) => a.arm_id === "armA" && a.live)) return result;
          } catch {
            /* gateway still booting */
          }
          await new Promise((r) => setTimeout(r, 200));
        }
        throw new Error("arm never came up");
      })();

      let state: ConsoleState = onArms(initialState("op-web"), arms);
      expect(state.armId).toBe("armA");
      expect(state.arms[0].profile.joint_ranges_deg.shoulder).toEqual([-60, 60]);

      const inbox: Envelope[] = [];
      const socket = new ReconnectingSocket(
        () => `ws://127.0.0.1:${httpPort}/ws?client=op-web&topics=${encodeURIComponent(
          "arm.armA.*,operator.op-web.*",
        )}`,
        {
          onEnvelope: (env) => inbox.push(env),
          onState: (connected) => { state = onConnectionChange(state, connected); },
        },
      );
      socket.start();
      await waitFor(() => state.connected);

      // A 3-command sequence, three times over: learned on the third close.
      const steps = [
        { base_deg: 10, shoulder_deg: 20, elbow_deg: -30, wrist_pitch_deg: 5, wrist_roll_deg: 0, gripper_mm: 0 },
        { base_deg: -15, shoulder_deg: 0, elbow_deg: 40, wrist_pitch_deg: 0, wrist_roll_deg: 45, gripper_mm: 10 },
        { base_deg: 0, shoulder_deg: 55, elbow_deg: -10, wrist_pitch_deg: 12, wrist_roll_deg: -20, gripper_mm: 20 },
      ];
      let counter = 0;
      const sendStep = async (targets: typeof steps[number]) => {
        counter += 1;
        const command: CommandBody = {
          id: `00000000-0000-4000-8000-${String(counter).padStart(12, "0")}`,
          arm_id: "armA",
          ...targets,
          issued_at_ms: Date.now(),
          operator_id: "op-web",
        };
        const result = await postCommand(base, command);
        expect(result.ok).toBe(true);
        state = onReceipt(state, command, result.recordId!);
      };

      const drainAcks = () => {
        for (const env of inbox.splice(0)) {
          if (env.type === "notification" && env.body.topic.endsWith(".ack")) {
            state = onAck(state, parseAck(env.body.event));
          } else if (env.type === "pattern_prompt") {
            state = onPrompt(state, env.body);
          }
        }
      };

      for (let rep = 0; rep < 3; rep++) {
        for (const targets of steps) await sendStep(targets);
        await waitFor(() => { drainAcks(); return state.pending.length === 0; });
        await new Promise((r) => setTimeout(r, 1400)); // idle gap closes the sequence
      }
      // The acked command updated the rendered pose.
      expect(state.livePose).not.toBeNull();
      expect(state.lastAckedTargets?.shoulder_deg).toBe(55);
      expect(state.history).toHaveLength(9);

      // Resend the prefix: the reuse prompt arrives over the WebSocket.
      await sendStep(steps[0]);
      await sendStep(steps[1]);
      await waitFor(() => { drainAcks(); return state.activePrompt !== null; });
      expect(state.activePrompt!.matched_prefix_len).toBe(2);
      expect(state.activePrompt!.remainder).toHaveLength(1);

      // An out-of-range send comes back as per-field violations.
      const bad = await postCommand(base, {
        id: "00000000-0000-4000-8000-999999999999",
        arm_id: "armA",
        base_deg: 0, shoulder_deg: 61, elbow_deg: 0,
        wrist_pitch_deg: 0, wrist_roll_deg: 0, gripper_mm: 0,
        issued_at_ms: Date.now(),
        operator_id: "op-web",
      });
      expect(bad.ok).toBe(false);
      expect(bad.violations![0].field).toBe("shoulder_deg");

      socket.stop();
    } finally {
      for (const proc of procs) proc.kill("SIGTERM");
    }
  });
});
