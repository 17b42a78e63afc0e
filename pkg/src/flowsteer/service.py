"""Live steering sessions over HTTP/JSON: frame-by-frame human-controlled
generation with per-frame regeneration.

The serving path calls the exact inference rollout (same addressable noise
streams), so a session's frame sequence is bit-identical to an offline run
with the same checkpoint, seed, and controls. Frames travel as base64
row-major little-endian float64 with shape metadata — no lossy codec.

Endpoints:
    POST   /sessions                     create; returns frame 0
    POST   /sessions/{id}/frames         next frame for a control point
    POST   /sessions/{id}/regenerate     redo the latest frame
    GET    /sessions/{id}/history        controls/tracked/rewards so far
    DELETE /sessions/{id}                drop the session
    GET    /config                       served checkpoints + geometry

One generation is in flight per session (a per-session lock queues
concurrent requests); sessions are isolated and share checkpoints
read-only.
"""
from __future__ import annotations

import base64
import json
import threading
import time
import uuid
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .autodiff import load_checkpoint
from .distill import self_rollout_frame
from .flows import NoiseSchedule
from .nets import KvCache, NetConfig
from .rewards import RewardConfig, motion_reward, track_position
from .rng import RolloutRng
from .scenes import encode_control, render_frame


def frame_to_payload(frame: np.ndarray) -> dict:
    return {"b64": base64.b64encode(np.ascontiguousarray(frame, dtype="<f8").tobytes()).decode(),
            "shape": list(frame.shape)}


def payload_to_frame(payload: dict) -> np.ndarray:
    data = np.frombuffer(base64.b64decode(payload["b64"]), dtype="<f8")
    return data.reshape(payload["shape"]).copy()


class ServiceError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


def _coordinate(value) -> tuple[float, float]:
    try:
        x, y = float(value[0]), float(value[1])
    except (TypeError, ValueError, IndexError):
        raise ServiceError(400, "malformed_coordinate",
                           f"expected [x, y] in the unit square, got {value!r}")
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise ServiceError(400, "malformed_coordinate",
                           f"coordinate {value!r} outside the unit square")
    return (x, y)


class Session:
    def __init__(self, sid: str, checkpoint: str, store, cfg: NetConfig,
                 schedule: NoiseSchedule, reward_cfg: RewardConfig, seed: int,
                 reference: np.ndarray):
        self.sid = sid
        self.checkpoint = checkpoint
        self.store = store
        self.cfg = cfg
        self.schedule = schedule
        self.reward_cfg = reward_cfg
        self.seed = seed
        self.reference = reference
        self.cache = KvCache(cfg.cache_frames, cfg.layers)
        self.history: list[dict] = []
        self.snapshots: list[KvCache] = []       # cache state before each frame
        self.attempts: list[int] = []
        self.lock = threading.Lock()

    def _generate(self, m: int, control: tuple[float, float], attempt: int) -> dict:
        heat = encode_control(control, self.cfg.side)
        raw = self.store.raw()
        rng = RolloutRng(self.seed)
        t0 = time.perf_counter()
        trace = self_rollout_frame(raw, raw, self.cfg, self.schedule, m, heat,
                                   self.cache, rng, mode="infer",
                                   reference=self.reference if m == 0 else None,
                                   attempt=attempt)
        latency_ms = (time.perf_counter() - t0) * 1000.0
        tracked = track_position(trace.clean, self.reward_cfg)
        reward = motion_reward(trace.clean, control, self.reward_cfg)
        return {
            "frame_index": m,
            "control": [control[0], control[1]],
            "tracked": list(tracked) if tracked is not None else None,
            "motion_reward": reward,
            "latency_ms": latency_ms,
            "attempt": attempt,
            "frame_array": trace.clean,
        }

    def next_frame(self, control: tuple[float, float]) -> dict:
        with self.lock:
            m = len(self.history)
            self.snapshots.append(self.cache.snapshot())
            rec = self._generate(m, control, attempt=0)
            self.history.append(rec)
            self.attempts.append(0)
            return rec

    def regenerate(self, control: tuple[float, float], reuse_noise: bool) -> dict:
        with self.lock:
            if not self.history:
                raise ServiceError(409, "no_frames", "nothing generated yet")
            m = len(self.history) - 1
            self.cache = self.snapshots[m].snapshot()
            attempt = self.attempts[m] if reuse_noise else self.attempts[m] + 1
            rec = self._generate(m, control, attempt=attempt)
            self.history[m] = rec
            self.attempts[m] = attempt
            return rec

    def history_payload(self, include_frames: bool) -> dict:
        with self.lock:
            out = {
                "session_id": self.sid,
                "checkpoint": self.checkpoint,
                "seed": self.seed,
                "frame_count": len(self.history),
                "controls": [r["control"] for r in self.history],
                "tracked": [r["tracked"] for r in self.history],
                "motion_rewards": [r["motion_reward"] for r in self.history],
                "attempts": list(self.attempts),
            }
            if include_frames:
                out["frames"] = [frame_to_payload(r["frame_array"]) for r in self.history]
            return out


class SteeringService:
    """Session registry plus checkpoint loading, transport-agnostic."""

    def __init__(self, checkpoint_dir: Path, schedule: NoiseSchedule,
                 reward_cfg: RewardConfig):
        self.checkpoint_dir = Path(checkpoint_dir)
        self.schedule = schedule
        self.reward_cfg = reward_cfg
        self._stores: dict[str, tuple] = {}
        self._sessions: dict[str, Session] = {}
        self._lock = threading.Lock()

    def checkpoints(self) -> list[dict]:
        out = []
        for path in sorted(self.checkpoint_dir.glob("*.ckpt")):
            try:
                _, meta = load_checkpoint(path)
            except ValueError:
                continue
            if "net" not in meta:
                continue
            out.append({"name": path.stem, "kind": meta.get("kind", "student"),
                        "side": meta["net"]["side"]})
        return out

    def _load(self, name: str):
        with self._lock:
            if name not in self._stores:
                path = self.checkpoint_dir / f"{name}.ckpt"
                if not path.exists():
                    raise ServiceError(404, "missing_checkpoint",
                                       f"no checkpoint named {name!r} under {self.checkpoint_dir}")
                store, meta = load_checkpoint(path)
                if "net" not in meta:
                    raise ServiceError(400, "bad_checkpoint",
                                       f"checkpoint {name!r} carries no network manifest")
                self._stores[name] = (store, NetConfig.from_dict(meta["net"]))
            return self._stores[name]

    def config_payload(self) -> dict:
        return {"checkpoints": self.checkpoints(),
                "schedule": list(self.schedule.raw),
                "reward": {"alpha": self.reward_cfg.alpha, "lam": self.reward_cfg.lam}}

    def create_session(self, payload: dict) -> dict:
        name = payload.get("checkpoint")
        if not isinstance(name, str):
            raise ServiceError(400, "bad_request", "missing checkpoint name")
        store, cfg = self._load(name)
        seed = int(payload.get("seed", 0))
        position = _coordinate(payload.get("reference_position", (0.5, 0.5)))
        if "reference_frame" in payload:
            reference = payload_to_frame(payload["reference_frame"])
            if reference.shape != (cfg.side, cfg.side):
                raise ServiceError(400, "bad_request",
                                   f"reference frame shape {reference.shape} != {(cfg.side, cfg.side)}")
        else:
            reference = render_frame(position, cfg.side)
        sid = uuid.uuid4().hex[:12]
        session = Session(sid, name, store, cfg, self.schedule, self.reward_cfg,
                          seed, reference)
        rec = session.next_frame(position)
        with self._lock:
            self._sessions[sid] = session
        return self._frame_response(session, rec)

    def _session(self, sid: str) -> Session:
        with self._lock:
            if sid not in self._sessions:
                raise ServiceError(404, "unknown_session", f"no session {sid!r}")
            return self._sessions[sid]

    def _frame_response(self, session: Session, rec: dict) -> dict:
        return {
            "session_id": session.sid,
            "frame_index": rec["frame_index"],
            "frame": frame_to_payload(rec["frame_array"]),
            "tracked": rec["tracked"],
            "motion_reward": rec["motion_reward"],
            "latency_ms": rec["latency_ms"],
            "attempt": rec["attempt"],
        }

    def next_frame(self, sid: str, payload: dict) -> dict:
        session = self._session(sid)
        control = _coordinate(payload.get("control"))
        return self._frame_response(session, session.next_frame(control))

    def regenerate(self, sid: str, payload: dict) -> dict:
        session = self._session(sid)
        control = _coordinate(payload.get("control"))
        reuse = bool(payload.get("reuse_noise", False))
        return self._frame_response(session, session.regenerate(control, reuse))

    def history(self, sid: str, include_frames: bool) -> dict:
        return self._session(sid).history_payload(include_frames)

    def delete(self, sid: str) -> dict:
        with self._lock:
            if sid not in self._sessions:
                raise ServiceError(404, "unknown_session", f"no session {sid!r}")
            del self._sessions[sid]
        return {"deleted": sid}


class _Handler(BaseHTTPRequestHandler):
    service: SteeringService = None
    studio_dir: Path | None = None

    def log_message(self, fmt, *args):   # quiet by default
        pass

    def _send(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def _error(self, err: ServiceError) -> None:
        self._send(err.status, {"error": {"code": err.code, "message": err.message}})

    def _body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        if length == 0:
            return {}
        try:
            return json.loads(self.rfile.read(length))
        except json.JSONDecodeError as err:
            raise ServiceError(400, "bad_request", f"invalid JSON body: {err}")

    def do_OPTIONS(self):
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.end_headers()

    def _serve_static(self, path: str) -> None:
        target = (self.studio_dir / (path.lstrip("/") or "index.html")).resolve()
        if not str(target).startswith(str(self.studio_dir.resolve())) or not target.is_file():
            self._send(404, {"error": {"code": "not_found", "message": path}})
            return
        types = {".html": "text/html", ".js": "text/javascript", ".css": "text/css"}
        body = target.read_bytes()
        self.send_response(200)
        self.send_header("Content-Type", types.get(target.suffix, "application/octet-stream"))
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        try:
            path, _, query = self.path.partition("?")
            if path == "/config":
                self._send(200, self.service.config_payload())
            elif path.startswith("/sessions/") and path.endswith("/history"):
                sid = path.split("/")[2]
                self._send(200, self.service.history(sid, "frames=1" in query))
            elif self.studio_dir is not None:
                self._serve_static(path)
            else:
                self._send(404, {"error": {"code": "not_found", "message": path}})
        except ServiceError as err:
            self._error(err)

    def do_POST(self):
        try:
            body = self._body()
            parts = self.path.rstrip("/").split("/")
            if self.path == "/sessions":
                self._send(200, self.service.create_session(body))
            elif len(parts) == 4 and parts[1] == "sessions" and parts[3] == "frames":
                self._send(200, self.service.next_frame(parts[2], body))
            elif len(parts) == 4 and parts[1] == "sessions" and parts[3] == "regenerate":
                self._send(200, self.service.regenerate(parts[2], body))
            else:
                self._send(404, {"error": {"code": "not_found", "message": self.path}})
        except ServiceError as err:
            self._error(err)

    def do_DELETE(self):
        try:
            parts = self.path.rstrip("/").split("/")
            if len(parts) == 3 and parts[1] == "sessions":
                self._send(200, self.service.delete(parts[2]))
            else:
                self._send(404, {"error": {"code": "not_found", "message": self.path}})
        except ServiceError as err:
            self._error(err)


def make_server(checkpoint_dir, schedule: NoiseSchedule, reward_cfg: RewardConfig,
                host: str = "127.0.0.1", port: int = 8642,
                studio_dir: str | None = None) -> ThreadingHTTPServer:
    service = SteeringService(Path(checkpoint_dir), schedule, reward_cfg)
    handler = type("BoundHandler", (_Handler,), {
        "service": service,
        "studio_dir": Path(studio_dir) if studio_dir else None,
    })
    return ThreadingHTTPServer((host, port), handler)


def serve_forever(checkpoint_dir, schedule: NoiseSchedule, reward_cfg: RewardConfig,
                  host: str = "127.0.0.1", port: int = 8642,
                  studio_dir: str | None = None) -> int:
    server = make_server(checkpoint_dir, schedule, reward_cfg, host, port, studio_dir)
    names = [c["name"] for c in server.RequestHandlerClass.service.checkpoints()]
    print(f"serving {names or 'no checkpoints yet'} from {checkpoint_dir} "
          f"on http://{host}:{port}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0
