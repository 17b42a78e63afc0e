"""Stage 1a: fit the bidirectional teacher with the control-conditioned
flow-matching objective, and sample from it by joint multi-step Euler
integration (all frames advance together; nothing is emitted until the
last step, which is what makes the latency comparison meaningful)."""
from __future__ import annotations

import json
import time

import numpy as np

from .autodiff import ParamStore, Tape, add, adamw_step, mse, scale
from .nets import NetConfig, teacher_velocity
from .rng import RolloutRng, substream
from .scenes import SceneClip


def clip_heatmaps(clip: SceneClip) -> np.ndarray:
    from .scenes import encode_control
    return np.stack([encode_control(p, clip.side) for p in clip.positions])


def _mean_scalar(terms):
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return scale(total, 1.0 / len(terms))


def teacher_train_step(store: ParamStore, cfg: NetConfig, clips: list[SceneClip],
                       rng: np.random.Generator, lr: float,
                       weight_decay: float = 0.01) -> float:
    """One optimizer step of E_t ||v(c, t, x_t) - (x1 - x0)||^2 over a batch
    of clips; t is shared per video, noise is fresh per frame."""
    if not clips:
        raise ValueError("teacher_train_step: empty batch")
    tape = Tape()
    params = store.tracked(tape)
    losses = []
    for clip in clips:
        t = float(rng.uniform(0.0, 1.0))
        frames = clip.frames
        noise = rng.standard_normal(frames.shape)
        x_t = t * frames + (1.0 - t) * noise
        v_target = frames - noise
        heats = clip_heatmaps(clip)
        refs = [frames[0]] + [rng.standard_normal(frames.shape[1:])
                              for _ in range(len(frames) - 1)]
        out = teacher_velocity(params, cfg, list(x_t), list(heats), refs, t)
        losses.append(mse(out, v_target))
    loss = _mean_scalar(losses)
    grads = tape.backward(loss)
    adamw_step(store, grads, lr, weight_decay)
    return loss.item()


def teacher_val_loss(store: ParamStore, cfg: NetConfig, clips: list[SceneClip],
                     seed: int) -> float:
    """Flow-matching loss under frozen evaluation noise (deterministic)."""
    raw = store.raw()
    total = 0.0
    for i, clip in enumerate(clips):
        rng = substream(seed, "teacher-val", i)
        t = float(rng.uniform(0.0, 1.0))
        noise = rng.standard_normal(clip.frames.shape)
        x_t = t * clip.frames + (1.0 - t) * noise
        v_target = clip.frames - noise
        heats = clip_heatmaps(clip)
        refs = [clip.frames[0]] + [rng.standard_normal(clip.frames.shape[1:])
                                   for _ in range(len(clip.frames) - 1)]
        out = teacher_velocity(raw, cfg, list(x_t), list(heats), refs, t)
        total += float(np.mean((out.data - v_target) ** 2))
    return total / len(clips)


def train_teacher(store: ParamStore, cfg: NetConfig, dataset, *, steps: int,
                  batch_size: int, lr: float, weight_decay: float, seed: int,
                  log_file=None, val_every: int = 250) -> list[dict]:
    train_clips = dataset.split("train")
    val_clips = dataset.split("val")
    records = []
    for step in range(steps):
        rng = substream(seed, "teacher-step", step)
        idx = rng.integers(0, len(train_clips), size=batch_size)
        t0 = time.perf_counter()
        loss = teacher_train_step(store, cfg, [train_clips[i] for i in idx], rng,
                                  lr, weight_decay)
        rec = {"step": step, "loss": loss, "wall_clock": time.perf_counter() - t0}
        if val_clips and (step % val_every == val_every - 1 or step == steps - 1):
            rec["val_loss"] = teacher_val_loss(store, cfg, val_clips, seed)
        records.append(rec)
        if log_file is not None:
            log_file.write(json.dumps(rec) + "\n")
    return records


def teacher_sample(store: ParamStore, cfg: NetConfig, heatmaps: np.ndarray,
                   reference: np.ndarray, sample_steps: int, seed: int,
                   rng_tags: tuple = ()) -> np.ndarray:
    """Jointly Euler-integrate all frames from standard normal over a
    uniform K-step grid on [0, 1]. Per-frame init/reference-slot noise uses
    the same addressable streams as the causal student, so distillation can
    match initial noise by sharing the seed."""
    if sample_steps < 1:
        raise ValueError(f"sample_steps must be >= 1, got {sample_steps}")
    rng = RolloutRng(seed, *rng_tags)
    n_frames = heatmaps.shape[0]
    side = cfg.side
    raw = store.raw()
    x = np.stack([rng.init_noise(m, (side, side)) for m in range(n_frames)])
    refs = [reference] + [rng.ref_noise(m, (side, side)) for m in range(1, n_frames)]
    heats = list(heatmaps)
    dt = 1.0 / sample_steps
    for k in range(sample_steps):
        t = k / sample_steps
        v = teacher_velocity(raw, cfg, list(x), heats, refs, t).data
        x = x + v * dt
    return x
