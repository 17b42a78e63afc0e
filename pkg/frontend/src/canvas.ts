// Rendering: nearest-neighbor upscale of the raw grid (no smoothing — the
// user sees the true model output) plus the trajectory overlay: history in
// blue, the current control in red, tracked positions as hollow rings.

import { decodeFrame, toGray } from "./frames.js";
import { unitToCanvas } from "./coords.js";
import type { StudioState } from "./state.js";

export const drawStudio = (
  ctx: CanvasRenderingContext2D,
  state: StudioState,
): void => {
  const { width, height } = ctx.canvas;
  ctx.imageSmoothingEnabled = false;
  ctx.fillStyle = "#111";
  ctx.fillRect(0, 0, width, height);
  const payload = state.frames[state.frames.length - 1];
  if (payload) {
    const side = payload.shape[0] ?? state.side;
    const gray = toGray(decodeFrame(payload));
    const cell = width / side;
    for (let i = 0; i < side; i++) {
      for (let j = 0; j < side; j++) {
        const v = gray[i * side + j] ?? 0;
        ctx.fillStyle = `rgb(${v},${v},${v})`;
        ctx.fillRect(j * cell, i * cell, Math.ceil(cell), Math.ceil(cell));
      }
    }
  }
  // trajectory history in blue, current point in red
  const size = { width, height };
  ctx.lineWidth = 2;
  ctx.strokeStyle = "#4da3ff";
  ctx.beginPath();
  state.trajectory.forEach((p, k) => {
    const [cx, cy] = unitToCanvas(p.x, p.y, size);
    if (k === 0) ctx.moveTo(cx, cy);
    else ctx.lineTo(cx, cy);
  });
  ctx.stroke();
  state.trajectory.forEach((p, k) => {
    const [cx, cy] = unitToCanvas(p.x, p.y, size);
    const isCurrent = k === state.trajectory.length - 1;
    ctx.fillStyle = isCurrent ? "#ff5252" : "#4da3ff";
    ctx.beginPath();
    ctx.arc(cx, cy, isCurrent ? 6 : 3.5, 0, Math.PI * 2);
    ctx.fill();
    if (p.tracked) {
      const [tx, ty] = unitToCanvas(p.tracked[0], p.tracked[1], size);
      ctx.strokeStyle = "#7dff9b";
      ctx.beginPath();
      ctx.arc(tx, ty, 5, 0, Math.PI * 2);
      ctx.stroke();
      ctx.strokeStyle = "#4da3ff";
    }
  });
};
