"""Evaluation: trajectory-alignment metrics, the latency benchmark, and the
ablation comparison across training variants.

Frame-level quality metrics (FID/FVD-style scores) are not meaningful at
this scale; the report instead carries the tracked-trajectory measurements:
mean terminal/motion reward, trajectory RMSE in cells, tracked-velocity
smoothness (mean squared second difference of tracked positions, in cells),
and per-frame generation wall-clock.
"""
from __future__ import annotations

import json
import time
from statistics import median

import numpy as np

from .autodiff import ParamStore
from .distill import rollout_video
from .flows import NoiseSchedule
from .nets import KvCache, NetConfig
from .rewards import RewardConfig, motion_reward, quality_reward, terminal_reward, track_position
from .rng import RolloutRng, substream
from .scenes import SceneClip, SceneDataset, encode_control
from .teacher import teacher_sample


def _tracked_positions(frames: np.ndarray, reward_cfg: RewardConfig):
    return [track_position(f, reward_cfg) for f in frames]


def _clip_metrics(frames: np.ndarray, clip: SceneClip, reward_cfg: RewardConfig) -> dict:
    side = clip.side
    tracked = _tracked_positions(frames, reward_cfg)
    sq_err = []
    for pos, target in zip(tracked, clip.positions):
        if pos is not None:
            sq_err.append(((pos[0] - target[0]) ** 2 + (pos[1] - target[1]) ** 2) * side * side)
    if sq_err:
        rmse_cells = float(np.sqrt(np.mean(sq_err)))
    else:
        rmse_cells = float(side * np.sqrt(2.0))   # worst case: nothing trackable
    # second differences over consecutive trackable triples, in cells
    smooth_terms = []
    for a, b, c in zip(tracked, tracked[1:], tracked[2:]):
        if a is not None and b is not None and c is not None:
            ddx = (a[0] - 2 * b[0] + c[0]) * side
            ddy = (a[1] - 2 * b[1] + c[1]) * side
            smooth_terms.append(ddx * ddx + ddy * ddy)
    smoothness = float(np.mean(smooth_terms)) if smooth_terms else 0.0
    return {
        "terminal_reward": float(np.mean([terminal_reward(f, p, reward_cfg)
                                          for f, p in zip(frames, clip.positions)])),
        "motion_reward": float(np.mean([motion_reward(f, p, reward_cfg)
                                        for f, p in zip(frames, clip.positions)])),
        "quality_reward": float(np.mean([quality_reward(f, reward_cfg)
                                         for f in frames])),
        "rmse_cells": rmse_cells,
        "smoothness": smoothness,
        "tracked_fraction": float(np.mean([p is not None for p in tracked])),
    }


def generate_video(kind: str, store: ParamStore, cfg: NetConfig, schedule: NoiseSchedule,
                   clip: SceneClip, seed: int, teacher_steps: int = 32) -> np.ndarray:
    """One video for a clip's controls: `student` runs the causal few-step
    rollout, `teacher` the joint many-step solve."""
    if kind == "student":
        roll = rollout_video(store, cfg, schedule, clip.controls(), seed,
                             mode="infer", rng_tags=("eval",))
        return roll.frames
    if kind == "teacher":
        heats = np.stack([encode_control(p, clip.side) for p in clip.positions])
        return teacher_sample(store, cfg, heats, clip.frames[0], teacher_steps,
                              seed, rng_tags=("eval",))
    raise ValueError(f"unknown generator kind {kind!r}")


def evaluate_checkpoint(kind: str, store: ParamStore, cfg: NetConfig,
                        schedule: NoiseSchedule, clips: list[SceneClip],
                        reward_cfg: RewardConfig, seed: int,
                        teacher_steps: int = 32, max_clips: int = 0) -> dict:
    """Aggregate report over a clip list; per-clip records included."""
    if max_clips:
        clips = clips[:max_clips]
    per_clip = []
    gen_seconds = []
    for i, clip in enumerate(clips):
        t0 = time.perf_counter()
        frames = generate_video(kind, store, cfg, schedule, clip,
                                int(substream(seed, "eval-clip", i).integers(0, 2 ** 31)),
                                teacher_steps)
        dt = time.perf_counter() - t0
        gen_seconds.append(dt / len(frames))
        rec = _clip_metrics(frames, clip, reward_cfg)
        rec["clip_index"] = i
        rec["family"] = clip.family
        per_clip.append(rec)
    report = {
        "kind": kind,
        "n_clips": len(clips),
        "mean_terminal_reward": float(np.mean([r["terminal_reward"] for r in per_clip])),
        "mean_motion_reward": float(np.mean([r["motion_reward"] for r in per_clip])),
        "mean_quality_reward": float(np.mean([r["quality_reward"] for r in per_clip])),
        "rmse_cells": float(np.sqrt(np.mean([r["rmse_cells"] ** 2 for r in per_clip]))),
        "smoothness": float(np.mean([r["smoothness"] for r in per_clip])),
        "tracked_fraction": float(np.mean([r["tracked_fraction"] for r in per_clip])),
        "per_frame_seconds": float(np.mean(gen_seconds)),
        "per_clip": per_clip,
    }
    return report


def ground_truth_report(clips: list[SceneClip], reward_cfg: RewardConfig) -> dict:
    """Clips scored as if they had been generated: the oracle upper bound."""
    per_clip = [_clip_metrics(clip.frames, clip, reward_cfg) for clip in clips]
    return {
        "kind": "ground-truth",
        "n_clips": len(clips),
        "mean_motion_reward": float(np.mean([r["motion_reward"] for r in per_clip])),
        "rmse_cells": float(np.sqrt(np.mean([r["rmse_cells"] ** 2 for r in per_clip]))),
    }


# ---------------------------------------------------------------------------
# Latency
# ---------------------------------------------------------------------------

def bench_latency(mode: str, store: ParamStore, cfg: NetConfig, schedule: NoiseSchedule,
                  clip: SceneClip, *, runs: int = 20, warmup: int = 3,
                  teacher_steps: int = 32, seed: int = 0) -> dict:
    """First-frame and per-frame latency, median over `runs` measured
    repetitions after `warmup` excluded ones.

    Student first-frame latency covers the schedule's stepper calls for
    frame 0 (the cache commit happens after emission). Teacher first-frame
    latency is the full joint K-step solve: nothing is watchable earlier.
    """
    if mode not in ("student-AR", "teacher-bidirectional"):
        raise ValueError(f"unknown latency mode {mode!r}")
    controls = clip.controls()
    heats = np.stack([c.heatmap for c in controls])
    n_frames = len(controls)
    first, per_frame = [], []
    for run in range(warmup + runs):
        if mode == "student-AR":
            from .distill import self_rollout_frame
            from .nets import cache_commit
            rng = RolloutRng(seed, "bench", run)
            cache = KvCache(cfg.cache_frames, cfg.layers)
            raw = store.raw()
            t0 = time.perf_counter()
            trace = self_rollout_frame(raw, raw, cfg, schedule, 0, controls[0].heatmap,
                                       cache, rng, mode="infer", commit=False,
                                       reference=controls[0].reference)
            t_first = time.perf_counter() - t0   # frame 0 is watchable here
            cache_commit(raw, cfg, cache, 0, trace.clean, controls[0].heatmap,
                         trace.ref_slot, step_index=schedule.n_steps,
                         n_steps=schedule.n_steps)
            t0 = time.perf_counter()
            for m in range(1, n_frames):
                self_rollout_frame(raw, raw, cfg, schedule, m, controls[m].heatmap,
                                   cache, rng, mode="infer")
            t_rest = time.perf_counter() - t0
            first.append(t_first)
            per_frame.append((t_first + t_rest) / n_frames)
        else:
            t0 = time.perf_counter()
            teacher_sample(store, cfg, heats, controls[0].reference, teacher_steps,
                           seed, rng_tags=("bench", run))
            dt = time.perf_counter() - t0
            first.append(dt)           # first frame exists only after all steps
            per_frame.append(dt / n_frames)
    stepper_calls = schedule.n_steps if mode == "student-AR" \
        else teacher_steps * n_frames
    return {
        "mode": mode,
        "first_frame_seconds": median(first[warmup:]),
        "per_frame_seconds": median(per_frame[warmup:]),
        "first_frame_stepper_calls": stepper_calls,
        "runs": runs,
    }


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

ABLATION_ROWS = ("full", "w/o RL", "w/o Self-Rollout", "teacher")


def run_ablation(stores: dict, cfgs: dict, schedule: NoiseSchedule,
                 dataset: SceneDataset, reward_cfg: RewardConfig, seed: int,
                 teacher_steps: int = 32, max_clips: int = 0) -> dict:
    """Evaluate the four training variants on the validation split and
    check the expected ordering of mean motion reward."""
    missing = [r for r in ABLATION_ROWS if r not in stores]
    if missing:
        raise ValueError(f"ablation requires checkpoints for {missing}")
    clips = dataset.split("val")
    rows = {}
    for name in ABLATION_ROWS:
        kind = "teacher" if name == "teacher" else "student"
        rep = evaluate_checkpoint(kind, stores[name], cfgs[name], schedule, clips,
                                  reward_cfg, seed, teacher_steps, max_clips)
        rep.pop("per_clip")
        rows[name] = rep
    motion = {n: rows[n]["mean_motion_reward"] for n in ABLATION_ROWS}
    return {
        "rows": rows,
        "ordering": {
            "full_ge_wo_rl": motion["full"] >= motion["w/o RL"],
            "wo_self_rollout_worst": motion["w/o Self-Rollout"] < motion["full"]
                and motion["w/o Self-Rollout"] < motion["w/o RL"],
        },
    }


def format_report(report: dict, title: str) -> str:
    """Human-readable summary next to the JSON artifact."""
    lines = [title, "=" * len(title)]
    for key, value in report.items():
        if key == "per_clip":
            continue
        if isinstance(value, float):
            lines.append(f"{key:>24}: {value:.6g}")
        elif isinstance(value, dict):
            lines.append(f"{key}:")
            for k2, v2 in value.items():
                lines.append(f"    {k2:>22}: {v2 if not isinstance(v2, dict) else json.dumps(v2, sort_keys=True)}")
        else:
            lines.append(f"{key:>24}: {value}")
    return "\n".join(lines) + "\n"
