// App wiring: session controls, canvas input, and the render loop. All
// generation state lives on the server; this file only orchestrates.

import { ApiError, SteeringClient } from "./api.js";
import { drawStudio } from "./canvas.js";
import { canvasToUnit } from "./coords.js";
import {
  appendFrame,
  initialState,
  invariantsHold,
  replaceLastFrame,
  resetSession,
  startSession,
} from "./state.js";

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
};

const canvas = $<HTMLCanvasElement>("studio-canvas");
const ctx = canvas.getContext("2d")!;
const statusEl = $<HTMLSpanElement>("status");
const latencyEl = $<HTMLSpanElement>("latency");
const rewardEl = $<HTMLSpanElement>("reward");
const checkpointSel = $<HTMLSelectElement>("checkpoint");
const seedInput = $<HTMLInputElement>("seed");
const newBtn = $<HTMLButtonElement>("new-session");
const resetBtn = $<HTMLButtonElement>("reset");
const regenBtn = $<HTMLButtonElement>("regenerate");

const apiBase =
  new URLSearchParams(location.search).get("api") ?? location.origin;
const client = new SteeringClient(apiBase);
let state = initialState();

const toast = (message: string) => {
  const el = $<HTMLDivElement>("toast");
  el.textContent = message;
  el.classList.add("visible");
  setTimeout(() => el.classList.remove("visible"), 2600);
};

const render = () => {
  drawStudio(ctx, state);
  statusEl.textContent = state.connected
    ? state.sessionId
      ? `session ${state.sessionId} · frame ${state.frames.length - 1}`
      : "connected"
    : "server unreachable";
  latencyEl.textContent =
    state.lastLatencyMs == null ? "–" : `${state.lastLatencyMs.toFixed(1)} ms`;
  const r = state.motionRewards[state.motionRewards.length - 1];
  rewardEl.textContent = r == null ? "–" : r.toFixed(3);
  const active = state.connected && !state.busy;
  newBtn.disabled = !active;
  regenBtn.disabled = !active || state.frames.length === 0;
  resetBtn.disabled = !active || state.sessionId === null;
  if (!invariantsHold(state)) console.error("state invariants violated", state);
};

const connect = async () => {
  try {
    const cfg = await client.config();
    checkpointSel.innerHTML = "";
    for (const c of cfg.checkpoints) {
      const opt = document.createElement("option");
      opt.value = c.name;
      opt.textContent = `${c.name} (${c.kind}, ${c.side}x${c.side})`;
      checkpointSel.appendChild(opt);
    }
    state = { ...state, connected: true };
  } catch {
    state = { ...state, connected: false };
    setTimeout(connect, 2000); // polling fallback until the server appears
  }
  render();
};

newBtn.addEventListener("click", async () => {
  const checkpoint = checkpointSel.value;
  if (!checkpoint) return toast("no checkpoint available");
  const seed = Number(seedInput.value) || 0;
  const reference: [number, number] = [0.5, 0.5];
  state = { ...state, busy: true };
  render();
  try {
    const first = await client.createSession(checkpoint, reference, seed);
    const side = first.frame.shape[0] ?? 16;
    state = startSession(state, checkpoint, seed, side, first, reference);
  } catch (err) {
    state = { ...state, busy: false };
    toast(err instanceof ApiError ? `${err.code}: ${err.message}` : String(err));
  }
  render();
});

resetBtn.addEventListener("click", async () => {
  if (state.sessionId) {
    try {
      await client.deleteSession(state.sessionId);
    } catch {
      /* already gone */
    }
  }
  state = resetSession(state);
  render();
});

canvas.addEventListener("click", async (ev) => {
  if (!state.sessionId || state.busy) return;
  const sid = state.sessionId;
  const rect = canvas.getBoundingClientRect();
  const control = canvasToUnit(
    ((ev.clientX - rect.left) / rect.width) * canvas.width,
    ((ev.clientY - rect.top) / rect.height) * canvas.height,
    { width: canvas.width, height: canvas.height },
  );
  state = { ...state, busy: true };
  render();
  try {
    const resp = await client.nextFrame(sid, control);
    state = appendFrame(state, control, resp);
  } catch (err) {
    state = { ...state, busy: false };
    toast(err instanceof ApiError ? `${err.code}: ${err.message}` : String(err));
  }
  render();
});

regenBtn.addEventListener("click", async () => {
  if (!state.sessionId || state.busy || state.trajectory.length === 0) return;
  const sid = state.sessionId;
  const last = state.trajectory[state.trajectory.length - 1]!;
  state = { ...state, busy: true };
  render();
  try {
    const resp = await client.regenerate(sid, [last.x, last.y]);
    state = replaceLastFrame(state, [last.x, last.y], resp);
  } catch (err) {
    state = { ...state, busy: false };
    toast(err instanceof ApiError ? `${err.code}: ${err.message}` : String(err));
  }
  render();
});

connect();
render();
