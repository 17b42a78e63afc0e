// Typed client for the steering server. Exactly the documented endpoints,
// nothing else; all generation state lives server-side.

import type { FramePayload } from "./frames.js";

export interface CheckpointInfo {
  name: string;
  kind: string;
  side: number;
}

export interface ServerConfig {
  checkpoints: CheckpointInfo[];
  schedule: number[];
}

export interface FrameResponse {
  session_id: string;
  frame_index: number;
  frame: FramePayload;
  tracked: [number, number] | null;
  motion_reward: number;
  latency_ms: number;
  attempt: number;
}

export interface HistoryResponse {
  session_id: string;
  checkpoint: string;
  seed: number;
  frame_count: number;
  controls: [number, number][];
  tracked: ([number, number] | null)[];
  motion_rewards: number[];
  attempts: number[];
  frames?: FramePayload[];
}

export class ApiError extends Error {
  constructor(
    readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

type FetchLike = typeof fetch;

export class SteeringClient {
  constructor(
    readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = fetch,
  ) {}

  private async call<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await this.fetchImpl(this.baseUrl + path, init);
    const body = (await resp.json()) as T & {
      error?: { code: string; message: string };
    };
    if (!resp.ok || body.error) {
      const err = body.error ?? { code: "http_error", message: `status ${resp.status}` };
      throw new ApiError(err.code, err.message);
    }
    return body;
  }

  private post<T>(path: string, payload: unknown): Promise<T> {
    return this.call<T>(path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(payload),
    });
  }

  config(): Promise<ServerConfig> {
    return this.call<ServerConfig>("/config");
  }

  createSession(
    checkpoint: string,
    referencePosition: [number, number],
    seed: number,
  ): Promise<FrameResponse> {
    return this.post<FrameResponse>("/sessions", {
      checkpoint,
      reference_position: referencePosition,
      seed,
    });
  }

  nextFrame(sessionId: string, control: [number, number]): Promise<FrameResponse> {
    return this.post<FrameResponse>(`/sessions/${sessionId}/frames`, { control });
  }

  regenerate(
    sessionId: string,
    control: [number, number],
    reuseNoise = false,
  ): Promise<FrameResponse> {
    return this.post<FrameResponse>(`/sessions/${sessionId}/regenerate`, {
      control,
      reuse_noise: reuseNoise,
    });
  }

  history(sessionId: string, includeFrames = false): Promise<HistoryResponse> {
    const q = includeFrames ? "?frames=1" : "";
    return this.call<HistoryResponse>(`/sessions/${sessionId}/history${q}`);
  }

  deleteSession(sessionId: string): Promise<{ deleted: string }> {
    return this.call<{ deleted: string }>(`/sessions/${sessionId}`, {
      method: "DELETE",
    });
  }
}
