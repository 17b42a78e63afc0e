"""Synthetic controllable-video scenes: a single Gaussian blob moving along
a smooth trajectory on a small intensity grid.

Frames double as the latents (no encoder), control signals are "bright
spot" heatmaps of the per-frame target coordinate, and the reference frame
(conditioning for frame 0) is the rendered first frame. All geometry lives
in the unit square; blob widths are expressed in grid cells.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .rng import substream

DEFAULT_SIDE = 16
BLOB_STD_CELLS = 1.5   # ground-truth blob width
CTRL_STD_CELLS = 1.0   # control-heatmap spot width

FAMILIES = ("line", "arc", "sine", "random-waypoint-spline")

TRAJ_LO, TRAJ_HI = 0.1, 0.9      # trajectory coordinates stay in this box
MAX_STEP = 0.15                  # per-step displacement bound


def _gaussian_spot(position, side: int, std_cells: float) -> np.ndarray:
    """Isotropic Gaussian bump with peak 1.0 evaluated at cell centers."""
    x, y = float(position[0]), float(position[1])
    cols = (np.arange(side) + 0.5)
    rows = (np.arange(side) + 0.5)
    dx = x * side - cols            # distance in cells along x (columns)
    dy = y * side - rows
    g = np.exp(-(dy[:, None] ** 2 + dx[None, :] ** 2) / (2.0 * std_cells ** 2))
    return g


def render_frame(position, side: int = DEFAULT_SIDE) -> np.ndarray:
    """Ground-truth frame: blob of std 1.5 cells at `position` (unit square)."""
    if not (0.0 <= position[0] <= 1.0 and 0.0 <= position[1] <= 1.0):
        raise ValueError(f"position {position} outside the unit square")
    return _gaussian_spot(position, side, BLOB_STD_CELLS)


def encode_control(position, side: int = DEFAULT_SIDE) -> np.ndarray:
    """Control heatmap: sharper bright spot (std 1.0 cells) at the target."""
    if not (0.0 <= position[0] <= 1.0 and 0.0 <= position[1] <= 1.0):
        raise ValueError(f"position {position} outside the unit square")
    return _gaussian_spot(position, side, CTRL_STD_CELLS)


@dataclass(frozen=True)
class ControlSignal:
    """Per-frame steering input: target coordinate, its heatmap encoding,
    and (for frame 0 only) the reference frame."""
    frame_index: int
    target: tuple[float, float]
    heatmap: np.ndarray
    reference: np.ndarray | None = None

    def __post_init__(self):
        if (self.reference is not None) != (self.frame_index == 0):
            raise ValueError("reference frame must be present exactly at frame 0")


# ---------------------------------------------------------------------------
# Trajectory families
# ---------------------------------------------------------------------------

def line_points(start, end, m_steps: int) -> np.ndarray:
    ts = np.linspace(0.0, 1.0, m_steps + 1)[:, None]
    return np.asarray(start)[None, :] * (1.0 - ts) + np.asarray(end)[None, :] * ts


def _sample_line(m_steps, rng):
    start = rng.uniform(TRAJ_LO, TRAJ_HI, size=2)
    end = rng.uniform(TRAJ_LO, TRAJ_HI, size=2)
    dist = float(np.hypot(*(end - start)))
    limit = 0.145 * m_steps
    if dist > limit:
        end = start + (end - start) * (limit / dist)
    return line_points(start, end, m_steps)


def _sample_arc(m_steps, rng):
    r = rng.uniform(0.1, 0.3)
    cx = rng.uniform(TRAJ_LO + r, TRAJ_HI - r)
    cy = rng.uniform(TRAJ_LO + r, TRAJ_HI - r)
    theta0 = rng.uniform(0.0, 2.0 * np.pi)
    omega = rng.uniform(0.3, 1.0) * (0.14 / r) * rng.choice([-1.0, 1.0])
    ks = np.arange(m_steps + 1)
    ang = theta0 + omega * ks
    return np.stack([cx + r * np.cos(ang), cy + r * np.sin(ang)], axis=1)


def _sample_sine(m_steps, rng):
    x0 = rng.uniform(TRAJ_LO, 0.4)
    dx = rng.uniform(0.02, min(0.1, (TRAJ_HI - x0) / m_steps))
    amp = rng.uniform(0.05, 0.25)
    yc = rng.uniform(TRAJ_LO + amp, TRAJ_HI - amp)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    dpsi = rng.uniform(0.2, 0.1 / amp)   # |dy| per step <= amp*dpsi <= 0.1
    ks = np.arange(m_steps + 1)
    return np.stack([x0 + dx * ks, yc + amp * np.sin(phase + dpsi * ks)], axis=1)


def _sample_spline(m_steps, rng):
    # Natural cubic through 4 nearby waypoints; conservative spacing keeps
    # overshoot small, with a rejection loop guarding the step bound.
    for _ in range(50):
        pts = [rng.uniform(0.15, 0.85, size=2)]
        for _ in range(3):
            step = rng.uniform(-0.22, 0.22, size=2)
            pts.append(np.clip(pts[-1] + step, 0.15, 0.85))
        knots = np.linspace(0.0, m_steps, 4)
        spline = CubicSpline(knots, np.stack(pts), bc_type="natural")
        coords = np.clip(spline(np.arange(m_steps + 1)), TRAJ_LO, TRAJ_HI)
        steps = np.linalg.norm(np.diff(coords, axis=0), axis=1)
        if steps.size == 0 or steps.max() <= MAX_STEP:
            return coords
    return line_points(pts[0], pts[-1], m_steps)


_SAMPLERS = {
    "line": _sample_line,
    "arc": _sample_arc,
    "sine": _sample_sine,
    "random-waypoint-spline": _sample_spline,
}


def sample_trajectory(family: str, m_steps: int, rng: np.random.Generator) -> np.ndarray:
    """M+1 coordinates in [0.1, 0.9]^2 with per-step displacement <= 0.15."""
    if family not in _SAMPLERS:
        raise ValueError(f"unknown trajectory family {family!r}; choices: {FAMILIES}")
    if m_steps < 1:
        raise ValueError(f"m_steps must be >= 1, got {m_steps}")
    coords = _SAMPLERS[family](m_steps, rng)
    assert coords.shape == (m_steps + 1, 2)
    assert np.all((coords >= TRAJ_LO - 1e-12) & (coords <= TRAJ_HI + 1e-12))
    assert np.all(np.linalg.norm(np.diff(coords, axis=0), axis=1) <= MAX_STEP + 1e-12)
    return coords


# ---------------------------------------------------------------------------
# Clips and datasets
# ---------------------------------------------------------------------------

@dataclass
class SceneClip:
    positions: np.ndarray            # (M+1, 2)
    frames: np.ndarray               # (M+1, S, S), reproducible from positions
    family: str
    seed: int
    split: str = "train"

    @property
    def m_steps(self) -> int:
        return self.positions.shape[0] - 1

    @property
    def side(self) -> int:
        return self.frames.shape[1]

    def controls(self) -> list[ControlSignal]:
        side = self.side
        out = []
        for m, pos in enumerate(self.positions):
            out.append(ControlSignal(
                frame_index=m,
                target=(float(pos[0]), float(pos[1])),
                heatmap=encode_control(pos, side),
                reference=self.frames[0] if m == 0 else None,
            ))
        return out


def make_clip(family: str, m_steps: int, side: int, clip_seed_parts) -> SceneClip:
    rng = substream(*clip_seed_parts)
    positions = sample_trajectory(family, m_steps, rng)
    frames = np.stack([render_frame(p, side) for p in positions])
    return SceneClip(positions=positions, frames=frames, family=family,
                     seed=clip_seed_parts[-1])


@dataclass
class SceneDataset:
    side: int
    m_steps: int
    seed: int
    clips: list[SceneClip]

    def split(self, name: str) -> list[SceneClip]:
        return [c for c in self.clips if c.split == name]


def build_dataset(count: int, m_steps: int, seed: int, side: int = DEFAULT_SIDE) -> SceneDataset:
    """Deterministic corpus, balanced round-robin over the four families,
    with the last 10% of clip indices held out as the validation split."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    n_val = count // 10
    clips = []
    for i in range(count):
        family = FAMILIES[i % len(FAMILIES)]
        clip = make_clip(family, m_steps, side, (seed, "clip", i))
        clip.split = "val" if i >= count - n_val else "train"
        clips.append(clip)
    return SceneDataset(side=side, m_steps=m_steps, seed=seed, clips=clips)


DATASET_MAGIC = b"FLOWSCN1"
DATASET_VERSION = 1


def save_dataset(ds: SceneDataset, path) -> None:
    """Versioned binary container plus a human-readable JSON index."""
    header = {
        "format_version": DATASET_VERSION,
        "side": ds.side,
        "m_steps": ds.m_steps,
        "count": len(ds.clips),
        "seed": ds.seed,
        "clips": [{"family": c.family, "seed": c.seed, "split": c.split} for c in ds.clips],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<II", DATASET_VERSION, len(blob)))
        f.write(blob)
        for c in ds.clips:
            f.write(np.ascontiguousarray(c.positions, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(c.frames, dtype="<f8").tobytes())
    index = {
        "side": ds.side,
        "m_steps": ds.m_steps,
        "count": len(ds.clips),
        "seed": ds.seed,
        "clips": [{"index": i, "family": c.family, "split": c.split,
                   "start": [round(float(v), 6) for v in c.positions[0]],
                   "end": [round(float(v), 6) for v in c.positions[-1]]}
                  for i, c in enumerate(ds.clips)],
    }
    with open(str(path) + ".index.json", "w") as f:
        json.dump(index, f, indent=2, sort_keys=True)


def load_dataset(path) -> SceneDataset:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != DATASET_MAGIC:
            raise ValueError(f"bad dataset magic {magic!r}")
        version, header_len = struct.unpack("<II", f.read(8))
        if version != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        header = json.loads(f.read(header_len).decode("utf-8"))
        side = header["side"]
        m = header["m_steps"]
        n_frames = m + 1
        clips = []
        for entry in header["clips"]:
            pos = np.frombuffer(f.read(8 * n_frames * 2), dtype="<f8").reshape(n_frames, 2)
            frames = np.frombuffer(f.read(8 * n_frames * side * side), dtype="<f8")
            frames = frames.reshape(n_frames, side, side)
            clips.append(SceneClip(positions=pos.copy(), frames=frames.copy(),
                                   family=entry["family"], seed=entry["seed"],
                                   split=entry["split"]))
    return SceneDataset(side=side, m_steps=m, seed=header["seed"], clips=clips)
