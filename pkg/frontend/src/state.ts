// Studio state: the rendered frame history and the control trajectory
// (past points drawn as history, the latest highlighted), connection
// status, and the latency readout. Pure data + transitions so it is
// trivially testable; the canvas renders from this alone.

import type { FrameResponse } from "./api.js";
import type { FramePayload } from "./frames.js";

export interface TrajectoryPoint {
  x: number;
  y: number;
  tracked: [number, number] | null;
}

export interface StudioState {
  sessionId: string | null;
  checkpoint: string | null;
  seed: number;
  side: number;
  frames: FramePayload[];
  trajectory: TrajectoryPoint[];
  motionRewards: number[];
  lastLatencyMs: number | null;
  connected: boolean;
  busy: boolean; // one in-flight generation per session
}

export const initialState = (): StudioState => ({
  sessionId: null,
  checkpoint: null,
  seed: 0,
  side: 16,
  frames: [],
  trajectory: [],
  motionRewards: [],
  lastLatencyMs: null,
  connected: false,
  busy: false,
});

export const startSession = (
  state: StudioState,
  checkpoint: string,
  seed: number,
  side: number,
  first: FrameResponse,
  reference: [number, number],
): StudioState => ({
  ...state,
  sessionId: first.session_id,
  checkpoint,
  seed,
  side,
  frames: [first.frame],
  trajectory: [{ x: reference[0], y: reference[1], tracked: first.tracked }],
  motionRewards: [first.motion_reward],
  lastLatencyMs: first.latency_ms,
  busy: false,
});

export const appendFrame = (
  state: StudioState,
  control: [number, number],
  resp: FrameResponse,
): StudioState => {
  if (resp.frame_index !== state.frames.length) {
    throw new Error(
      `frame index ${resp.frame_index} does not extend history of ${state.frames.length}`,
    );
  }
  return {
    ...state,
    frames: [...state.frames, resp.frame],
    trajectory: [
      ...state.trajectory,
      { x: control[0], y: control[1], tracked: resp.tracked },
    ],
    motionRewards: [...state.motionRewards, resp.motion_reward],
    lastLatencyMs: resp.latency_ms,
    busy: false,
  };
};

export const replaceLastFrame = (
  state: StudioState,
  control: [number, number],
  resp: FrameResponse,
): StudioState => {
  if (state.frames.length === 0) throw new Error("nothing to regenerate");
  if (resp.frame_index !== state.frames.length - 1) {
    throw new Error(`regenerate returned frame ${resp.frame_index}`);
  }
  return {
    ...state,
    frames: [...state.frames.slice(0, -1), resp.frame],
    trajectory: [
      ...state.trajectory.slice(0, -1),
      { x: control[0], y: control[1], tracked: resp.tracked },
    ],
    motionRewards: [...state.motionRewards.slice(0, -1), resp.motion_reward],
    lastLatencyMs: resp.latency_ms,
    busy: false,
  };
};

export const resetSession = (state: StudioState): StudioState => ({
  ...initialState(),
  connected: state.connected,
  checkpoint: state.checkpoint,
  seed: state.seed,
  side: state.side,
});

// Invariant the tests pin down: the overlay never diverges from history.
export const invariantsHold = (state: StudioState): boolean =>
  state.trajectory.length === state.frames.length &&
  state.motionRewards.length === state.frames.length;
