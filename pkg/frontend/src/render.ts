// Canvas rendering: side view (radial, height) and top view (x, y) of the
// three-link chain, with the gripper aperture drawn to scale. The solid
// chain comes from the last acked configuration; the ghost chain previews
// the current slider values.

import { chainPoints, reach, type Links } from "./fk.js";
import type { JointTargets } from "./protocol.js";

const SOLID = "#1c7ed6";
const GHOST = "rgba(134, 142, 150, 0.55)";
const JOINT = "#212529";
const GRID = "#e9ecef";

interface Projection {
  toPx: (u: number, v: number) => [number, number];
}

function projection(
  canvas: HTMLCanvasElement, span: number, centered: boolean,
): Projection {
  const margin = 18;
  const w = canvas.width - 2 * margin;
  const h = canvas.height - 2 * margin;
  const scale = Math.min(w / (2 * span), h / (centered ? 2 * span : span + 1));
  return {
    toPx: (u, v) => [
      canvas.width / 2 + u * scale,
      centered ? canvas.height / 2 - v * scale : canvas.height - margin - v * scale,
    ],
  };
}

function drawChain(
  ctx: CanvasRenderingContext2D,
  points: [number, number][],
  project: Projection,
  color: string,
  gripperPx: number,
): void {
  ctx.strokeStyle = color;
  ctx.lineWidth = 3;
  ctx.beginPath();
  points.forEach(([u, v], i) => {
    const [x, y] = project.toPx(u, v);
    if (i === 0) ctx.moveTo(x, y);
    else ctx.lineTo(x, y);
  });
  ctx.stroke();
  ctx.fillStyle = JOINT;
  for (const [u, v] of points.slice(0, -1)) {
    const [x, y] = project.toPx(u, v);
    ctx.beginPath();
    ctx.arc(x, y, 3.5, 0, 2 * Math.PI);
    ctx.fill();
  }
  // Gripper: two finger ticks across the chain direction at the tip.
  const [tu, tv] = points[points.length - 1];
  const [pu, pv] = points[points.length - 2];
  const [tx, ty] = project.toPx(tu, tv);
  const [px, py] = project.toPx(pu, pv);
  const dx = tx - px;
  const dy = ty - py;
  const len = Math.hypot(dx, dy) || 1;
  const nx = -dy / len;
  const ny = dx / len;
  ctx.lineWidth = 2;
  ctx.beginPath();
  ctx.moveTo(tx + nx * gripperPx / 2, ty + ny * gripperPx / 2);
  ctx.lineTo(tx + nx * gripperPx / 2 + dx / len * 8, ty + ny * gripperPx / 2 + dy / len * 8);
  ctx.moveTo(tx - nx * gripperPx / 2, ty - ny * gripperPx / 2);
  ctx.lineTo(tx - nx * gripperPx / 2 + dx / len * 8, ty - ny * gripperPx / 2 + dy / len * 8);
  ctx.stroke();
}

function grid(ctx: CanvasRenderingContext2D, canvas: HTMLCanvasElement): void {
  ctx.strokeStyle = GRID;
  ctx.lineWidth = 1;
  for (let x = 0; x < canvas.width; x += 20) {
    ctx.beginPath();
    ctx.moveTo(x, 0);
    ctx.lineTo(x, canvas.height);
    ctx.stroke();
  }
  for (let y = 0; y < canvas.height; y += 20) {
    ctx.beginPath();
    ctx.moveTo(0, y);
    ctx.lineTo(canvas.width, y);
    ctx.stroke();
  }
}

export function renderViews(
  sideCanvas: HTMLCanvasElement,
  topCanvas: HTMLCanvasElement,
  acked: JointTargets | null,
  preview: JointTargets | null,
  links: Links,
): void {
  const span = reach(links) + 1;
  const sideCtx = sideCanvas.getContext("2d")!;
  const topCtx = topCanvas.getContext("2d")!;
  sideCtx.clearRect(0, 0, sideCanvas.width, sideCanvas.height);
  topCtx.clearRect(0, 0, topCanvas.width, topCanvas.height);
  grid(sideCtx, sideCanvas);
  grid(topCtx, topCanvas);
  const sideProj = projection(sideCanvas, span, false);
  const topProj = projection(topCanvas, span, true);
  const mmToCm = 0.1;
  const scalePx = (cm: number, canvas: HTMLCanvasElement) =>
    (cm * Math.min(canvas.width, canvas.height)) / (2 * span + 4);
  const draw = (targets: JointTargets, color: string) => {
    const chain = chainPoints(targets, links);
    drawChain(sideCtx, chain.side, sideProj, color,
              scalePx(targets.gripper_mm * mmToCm, sideCanvas));
    drawChain(topCtx, chain.top, topProj, color,
              scalePx(targets.gripper_mm * mmToCm, topCanvas));
  };
  if (preview) draw(preview, GHOST);
  if (acked) draw(acked, SOLID);
}
