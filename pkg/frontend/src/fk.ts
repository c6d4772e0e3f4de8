// Forward kinematics of the 3-link pitch chain, mirroring the server's
// convention exactly: all-zero points straight up, pitches accumulate and
// are measured from vertical, base yaw rotates the radial into x/y.
// The server test-vector file (test/fk_vectors.json) pins the agreement.

import type { JointTargets, PoseBody } from "./protocol.js";

export type Links = [number, number, number];

export const DEFAULT_LINKS: Links = [6.5, 10.0, 4.5];

const DEG = Math.PI / 180;

export function forwardKinematics(t: JointTargets, links: Links = DEFAULT_LINKS): PoseBody {
  const [l1, l2, l3] = links;
  const p1 = t.shoulder_deg * DEG;
  const p2 = p1 + t.elbow_deg * DEG;
  const p3 = p2 + t.wrist_pitch_deg * DEG;
  const r = l1 * Math.sin(p1) + l2 * Math.sin(p2) + l3 * Math.sin(p3);
  const z = l1 * Math.cos(p1) + l2 * Math.cos(p2) + l3 * Math.cos(p3);
  const yaw = t.base_deg * DEG;
  return {
    x_cm: r * Math.cos(yaw),
    y_cm: r * Math.sin(yaw),
    z_cm: z,
    roll_deg: t.wrist_roll_deg,
    gripper_mm: t.gripper_mm,
  };
}

export interface ChainPoints {
  // Joint positions from the shoulder out: origin, elbow, wrist pitch, tip.
  side: [number, number][]; // (radial, height) in the arm's vertical plane
  top: [number, number][]; // (x, y) seen from above
}

export function chainPoints(t: JointTargets, links: Links = DEFAULT_LINKS): ChainPoints {
  const [l1, l2, l3] = links;
  const p1 = t.shoulder_deg * DEG;
  const p2 = p1 + t.elbow_deg * DEG;
  const p3 = p2 + t.wrist_pitch_deg * DEG;
  const rs = [0, l1 * Math.sin(p1), 0, 0];
  const zs = [0, l1 * Math.cos(p1), 0, 0];
  rs[2] = rs[1] + l2 * Math.sin(p2);
  zs[2] = zs[1] + l2 * Math.cos(p2);
  rs[3] = rs[2] + l3 * Math.sin(p3);
  zs[3] = zs[2] + l3 * Math.cos(p3);
  const yaw = t.base_deg * DEG;
  return {
    side: rs.map((r, i) => [r, zs[i]] as [number, number]),
    top: rs.map((r) => [r * Math.cos(yaw), r * Math.sin(yaw)] as [number, number]),
  };
}

export function reach(links: Links = DEFAULT_LINKS): number {
  return links[0] + links[1] + links[2];
}
