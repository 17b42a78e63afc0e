"""Drive the live steering server from a script: create a session, feed it
control points one at a time, regenerate a frame you don't like, and verify
the whole session replays bit-exactly offline.

Run:  python demos/04_steering_session.py
"""
import json
import tempfile
import threading
import urllib.request
from pathlib import Path

import numpy as np

from flowsteer.autodiff import save_checkpoint
from flowsteer.distill import rollout_video
from flowsteer.flows import normalize_schedule
from flowsteer.nets import NetConfig, init_velocity_net
from flowsteer.rewards import RewardConfig
from flowsteer.scenes import ControlSignal, encode_control, render_frame
from flowsteer.service import make_server, payload_to_frame

schedule = normalize_schedule([1000, 755, 522, 0])
cfg = NetConfig(side=16, width=32, hidden=64, mask_mode="causal")

workdir = Path(tempfile.mkdtemp(prefix="steering-demo-"))
save_checkpoint(workdir / "demo.ckpt", init_velocity_net(cfg, 4),
                {"net": cfg.as_dict(), "kind": "student",
                 "schedule": [1000, 755, 522, 0]})

server = make_server(workdir, schedule, RewardConfig(), host="127.0.0.1", port=0)
threading.Thread(target=server.serve_forever, daemon=True).start()
base = f"http://127.0.0.1:{server.server_address[1]}"
print(f"server on {base} (checkpoint: demo, untrained weights — the point "
      f"here is the protocol)")


def call(path, payload=None, method=None):
    if payload is not None:
        req = urllib.request.Request(base + path, json.dumps(payload).encode(),
                                     method=method or "POST",
                                     headers={"Content-Type": "application/json"})
    else:
        req = urllib.request.Request(base + path, method=method or "GET")
    with urllib.request.urlopen(req) as resp:
        return json.loads(resp.read())


seed = 42
trajectory = [(0.3, 0.5), (0.36, 0.52), (0.42, 0.55), (0.48, 0.57), (0.54, 0.58)]
created = call("/sessions", {"checkpoint": "demo", "seed": seed,
                             "reference_position": list(trajectory[0])})
sid = created["session_id"]
print(f"session {sid}: frame 0 in {created['latency_ms']:.1f} ms, "
      f"tracked {created['tracked']}")

frames = [payload_to_frame(created["frame"])]
for point in trajectory[1:]:
    rec = call(f"/sessions/{sid}/frames", {"control": list(point)})
    frames.append(payload_to_frame(rec["frame"]))
    print(f"frame {rec['frame_index']}: control {point} -> tracked {rec['tracked']}, "
          f"motion reward {rec['motion_reward']:.3f}, {rec['latency_ms']:.1f} ms")

print("\nnot happy with the last frame? regenerate it with a fresh draw:")
redo = call(f"/sessions/{sid}/regenerate", {"control": list(trajectory[-1])})
print(f"frame {redo['frame_index']} attempt {redo['attempt']}: "
      f"tracked {redo['tracked']}")

# The serving path is the inference path: an offline rollout with the same
# seed and controls reproduces the ORIGINAL frames bit-exactly.
controls = [ControlSignal(m, p, encode_control(p, cfg.side),
                          render_frame(trajectory[0], cfg.side) if m == 0 else None)
            for m, p in enumerate(trajectory)]
store, _ = __import__("flowsteer.autodiff", fromlist=["load_checkpoint"]).load_checkpoint(workdir / "demo.ckpt")
offline = rollout_video(store, cfg, schedule, controls, seed, mode="infer")
exact = all(np.array_equal(a, b) for a, b in zip(frames, offline.frames))
print(f"\noffline replay bit-exact: {exact}")
server.shutdown()
