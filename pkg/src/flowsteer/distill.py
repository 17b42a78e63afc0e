"""Stage 1b: distill the bidirectional teacher into the few-step causal
student.

The central piece is the Self-Rollout: during training, every frame is
denoised step by step from pure noise through the full schedule using the
student's own KV cache, exactly as at inference (the train and infer paths
are bit-identical under equal seeds; losses are side computations). Two
distillation objectives are provided — a distribution-matching gradient
driven by the real/fake score difference, and an endpoint regression onto
the teacher's many-step samples — plus the teacher-forcing mode used by
the ablation study.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import flows
from .autodiff import ParamStore, Tape, Tensor, add, adamw_step, mse, mul, scale, tsum
from .flows import NoiseSchedule, SdeStepRecord
from .nets import FrameInputs, KvCache, NetConfig, cache_commit, sequence_velocity, student_velocity
from .rng import RolloutRng, substream
from .scenes import ControlSignal, SceneClip
from .teacher import clip_heatmaps, teacher_sample, _mean_scalar


@dataclass
class RolloutFrameTrace:
    """Everything recorded while one frame was denoised."""
    frame_index: int
    states: list[np.ndarray]                 # x_{m,0..N} values
    supervision_step: int | None             # flagged n (train mode only)
    cache_snapshot_id: int
    ref_slot: np.ndarray                     # reference frame (m=0) or noise draw
    init_noise: np.ndarray
    attempt: int = 0
    sde_record: SdeStepRecord | None = None  # set when one step ran the SDE
    tracked_states: list = field(default_factory=list)      # Tensors (tape mode)
    tracked_velocities: list = field(default_factory=list)

    @property
    def clean(self) -> np.ndarray:
        return self.states[-1]


def self_rollout_frame(params: dict, commit_params: dict, cfg: NetConfig,
                       schedule: NoiseSchedule, m: int, ctrl_heatmap: np.ndarray,
                       cache: KvCache, rng: RolloutRng, *, mode: str = "infer",
                       reference: np.ndarray | None = None, attempt: int = 0,
                       stoch_step: int | None = None, sigma: float = 0.0,
                       tracked: bool = False, commit: bool = True,
                       snapshot_id: int | None = None,
                       sde_rng: RolloutRng | None = None) -> RolloutFrameTrace:
    """Denoise frame m from pure noise through every schedule step, then
    commit the clean frame to the cache (detached).

    In train mode a uniformly sampled supervision step is flagged for loss
    computation; the flag draw lives on its own stream so train and infer
    produce bit-identical states. If `stoch_step` is given, that single step
    uses the stochastic update with noise scale `sigma` and its Gaussian
    transition record is kept (the policy-gradient stage needs it).
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown rollout mode {mode!r}")
    if cache.frames and cache.frames[-1] >= m:
        raise ValueError(f"cache inconsistent with frame {m}: holds {cache.frames}")
    side = cfg.side
    n_steps = schedule.n_steps
    if m == 0:
        if reference is None:
            raise ValueError("frame 0 requires a reference frame")
        ref_slot = np.asarray(reference, dtype=np.float64)
    else:
        ref_slot = rng.ref_noise(m, (side, side), attempt)
    init = rng.init_noise(m, (side, side), attempt)
    flagged = rng.supervision_step(m, n_steps) if mode == "train" else None
    trace = RolloutFrameTrace(
        frame_index=m, states=[init.copy()], supervision_step=flagged,
        cache_snapshot_id=m if snapshot_id is None else snapshot_id,
        ref_slot=ref_slot, init_noise=init, attempt=attempt)
    x = init
    if tracked:
        trace.tracked_states.append(x)
    for n in range(n_steps):
        t, dt = schedule.times[n], schedule.dts[n]
        v = student_velocity(params, cfg, x, ctrl_heatmap, ref_slot, t, m, cache)
        if tracked:
            trace.tracked_velocities.append(v)
        if stoch_step == n and sigma > 0.0:
            if tracked:
                raise ValueError("stochastic rollouts are recorded, not differentiated")
            eps = (sde_rng or rng).sde_noise(m, (side, side), attempt)
            x_nd = x.data if isinstance(x, Tensor) else x
            x, rec = flows.sde_step(x_nd, v.data, t, dt, sigma, eps, step_index=n)
            trace.sde_record = rec
        else:
            x = flows.ode_step(x, v if tracked else v.data, dt)
        trace.states.append((x.data if isinstance(x, Tensor) else x).copy())
        if tracked:
            trace.tracked_states.append(x)
    if commit:
        cache_commit(commit_params, cfg, cache, m, trace.clean, ctrl_heatmap, ref_slot,
                     step_index=n_steps, n_steps=n_steps)
    return trace


@dataclass
class VideoRollout:
    traces: list[RolloutFrameTrace]
    seed: int
    rng_tags: tuple

    @property
    def frames(self) -> np.ndarray:
        return np.stack([tr.clean for tr in self.traces])


def rollout_video(store: ParamStore, cfg: NetConfig, schedule: NoiseSchedule,
                  controls: list[ControlSignal], seed: int, *,
                  mode: str = "infer", tape: Tape | None = None,
                  stoch_steps: list[int | None] | None = None, sigma: float = 0.0,
                  rng_tags: tuple = (),
                  sde_rng: RolloutRng | None = None) -> VideoRollout:
    """Generate all frames of one video with the causal student."""
    if controls[0].reference is None:
        raise ValueError("controls[0] must carry the reference frame")
    params = store.tracked(tape) if tape is not None else store.raw()
    commit_params = store.raw()
    rng = RolloutRng(seed, *rng_tags)
    cache = KvCache(cfg.cache_frames, cfg.layers)
    traces = []
    for m, c in enumerate(controls):
        traces.append(self_rollout_frame(
            params, commit_params, cfg, schedule, m, c.heatmap, cache, rng,
            mode=mode, reference=c.reference, tracked=tape is not None,
            stoch_step=None if stoch_steps is None else stoch_steps[m],
            sigma=sigma, sde_rng=sde_rng))
    return VideoRollout(traces=traces, seed=seed, rng_tags=rng_tags)


# ---------------------------------------------------------------------------
# Distribution-matching distillation
# ---------------------------------------------------------------------------

def clean_estimate(trace: RolloutFrameTrace, schedule: NoiseSchedule, n: int):
    """One-step extrapolation of the flagged state to t=1 (tracked)."""
    t = schedule.times[n]
    x = trace.tracked_states[n]
    v = trace.tracked_velocities[n]
    return add(x, scale(v, 1.0 - t)) if isinstance(x, Tensor) or isinstance(v, Tensor) \
        else x + (1.0 - t) * v.data


def dmd_generator_grad(x_hat, t_prime: float, eps: np.ndarray,
                       real_velocity_fn, fake_velocity_fn):
    """KL-descent signal on the student output: re-noise the clean estimate
    to t', take the fake-minus-real score difference there, normalize by its
    mean absolute value, and apply it as d(loss)/d(x_hat) via an inner
    product surrogate. Returns (surrogate scalar, raw gradient array)."""
    x_nd = x_hat.data if isinstance(x_hat, Tensor) else np.asarray(x_hat)
    x_noised = t_prime * x_nd + (1.0 - t_prime) * eps
    v_real = real_velocity_fn(x_noised, t_prime)
    v_fake = fake_velocity_fn(x_noised, t_prime)
    s_real = flows.score_from_velocity(x_noised, v_real, t_prime)
    s_fake = flows.score_from_velocity(x_noised, v_fake, t_prime)
    g = s_fake - s_real
    g = g / (np.mean(np.abs(g)) + 1e-8)
    surrogate = tsum(mul(x_hat, g))
    return surrogate, g


def _single_frame_velocity_fn(store: ParamStore, cfg: NetConfig, ctrl, ref, index):
    raw = store.raw()

    def fn(x_noised: np.ndarray, t: float) -> np.ndarray:
        fr = FrameInputs(x=x_noised, ctrl=ctrl, ref=ref, t=t, index=index)
        return sequence_velocity(raw, cfg, [fr], mask_mode="bidirectional").data[0]
    return fn


def fake_score_train_step(fake_store: ParamStore, cfg: NetConfig,
                          samples: list[tuple[np.ndarray, np.ndarray, np.ndarray, int]],
                          rng: np.random.Generator, lr: float,
                          weight_decay: float = 0.01) -> float:
    """Flow-matching fit of the fake net on student-generated clean frames,
    batched through a diagonal-mask forward (frames are independent).
    samples: (clean_frame, ctrl_heatmap, ref_slot, frame_index)."""
    tape = Tape()
    params = fake_store.tracked(tape)
    frames = []
    targets = []
    for clean, ctrl, ref, index in samples:
        t = float(rng.uniform(0.0, 1.0))
        eps = rng.standard_normal(clean.shape)
        frames.append(FrameInputs(x=t * clean + (1.0 - t) * eps, ctrl=ctrl,
                                  ref=ref, t=t, index=index))
        targets.append(clean - eps)
    out = sequence_velocity(params, cfg, frames, mask_mode="diagonal")
    loss = mse(out, np.stack(targets))
    grads = tape.backward(loss)
    adamw_step(fake_store, grads, lr, weight_decay)
    return loss.item()


def dmd_student_step(student: ParamStore, fake: ParamStore | None,
                     teacher: ParamStore, student_cfg: NetConfig,
                     teacher_cfg: NetConfig, schedule: NoiseSchedule,
                     batch: list[tuple[list[ControlSignal], int]], *, lr: float,
                     weight_decay: float, t_lo: float, t_hi: float,
                     rng: np.random.Generator) -> tuple[float, list]:
    """One DMD update of the student on self-rollout videos: at each frame's
    flagged step, push the clean estimate along the real-minus-fake score
    direction evaluated at a random re-noise time. Returns the loss and the
    clean estimates for the fake net's own training."""
    if fake is None:
        raise ValueError("fake score net not initialized")
    tape = Tape()
    surrogates = []
    samples = []
    for controls, seed in batch:
        roll = rollout_video(student, student_cfg, schedule, controls, seed,
                             mode="train", tape=tape, rng_tags=("dmd",))
        for m, trace in enumerate(roll.traces):
            n = trace.supervision_step
            x_hat = clean_estimate(trace, schedule, n)
            t_prime = float(rng.uniform(t_lo, t_hi))
            eps = rng.standard_normal(x_hat.data.shape)
            real_fn = _single_frame_velocity_fn(teacher, teacher_cfg,
                                                controls[m].heatmap, trace.ref_slot, m)
            fake_fn = _single_frame_velocity_fn(fake, student_cfg,
                                                controls[m].heatmap, trace.ref_slot, m)
            surrogate, _ = dmd_generator_grad(x_hat, t_prime, eps, real_fn, fake_fn)
            surrogates.append(surrogate)
            samples.append((x_hat.data.copy(), controls[m].heatmap, trace.ref_slot, m))
    loss = _mean_scalar(surrogates)
    grads = tape.backward(loss)
    adamw_step(student, grads, lr, weight_decay)
    return loss.item(), samples


# ---------------------------------------------------------------------------
# Endpoint regression (verifiable distillation baseline)
# ---------------------------------------------------------------------------

@dataclass
class DistillTarget:
    controls: list[ControlSignal]
    teacher_frames: np.ndarray
    seed: int
    rng_tags: tuple


def make_distill_target(teacher: ParamStore, cfg: NetConfig, clip: SceneClip,
                        sample_steps: int, seed: int,
                        rng_tags: tuple = ()) -> DistillTarget:
    """One teacher video for a clip's controls, with initial noise matched
    to the student's rollout streams by construction (same seed, same
    addressable streams)."""
    heats = clip_heatmaps(clip)
    video = teacher_sample(teacher, cfg, heats, clip.frames[0], sample_steps,
                           seed, rng_tags=rng_tags)
    return DistillTarget(controls=clip.controls(), teacher_frames=video,
                         seed=seed, rng_tags=rng_tags)


def build_distill_targets(teacher: ParamStore, cfg: NetConfig, clips: list[SceneClip],
                          sample_steps: int, base_seed: int) -> list[DistillTarget]:
    """Pre-generated teacher videos, one per clip (fixed noise); training
    itself draws fresh targets per step via make_distill_target."""
    return [make_distill_target(teacher, cfg, clip, sample_steps, base_seed,
                                rng_tags=("distill", i))
            for i, clip in enumerate(clips)]


def endpoint_regression_step(student: ParamStore, cfg: NetConfig,
                             schedule: NoiseSchedule, batch: list[DistillTarget],
                             *, lr: float, weight_decay: float) -> float:
    """Regress the student's few-step rollout onto the teacher's many-step
    output for the same controls and matched initial noise.

    Two terms per frame: the fully chained final state, plus the clean
    estimate at the rollout's flagged supervision step. The second term
    gives every schedule time direct signal at the student's own chain
    states (the final-state term alone reaches early steps only through
    the chain, which trains them poorly)."""
    tape = Tape()
    losses = []
    for target in batch:
        roll = rollout_video(student, cfg, schedule, target.controls, target.seed,
                             mode="train", tape=tape, rng_tags=target.rng_tags)
        for m, trace in enumerate(roll.traces):
            losses.append(mse(trace.tracked_states[-1], target.teacher_frames[m]))
            n = trace.supervision_step
            if n < schedule.n_steps - 1:   # final step already == the first term
                losses.append(mse(clean_estimate(trace, schedule, n),
                                  target.teacher_frames[m]))
    loss = _mean_scalar(losses)
    grads = tape.backward(loss)
    adamw_step(student, grads, lr, weight_decay)
    return loss.item()


# ---------------------------------------------------------------------------
# Teacher forcing (the "without Self-Rollout" ablation)
# ---------------------------------------------------------------------------

def teacher_forcing_step(student: ParamStore, cfg: NetConfig, schedule: NoiseSchedule,
                         batch: list[tuple[SceneClip, DistillTarget]],
                         rng: np.random.Generator, *, lr: float,
                         weight_decay: float) -> float:
    """The exposure-bias training regime the Self-Rollout replaces: the
    history cache holds ground-truth frames, and the per-frame loss sits at
    a sampled step on the noised-ground-truth point rather than on the
    student's own chain. Supervision is the same teacher endpoint the
    self-rollout objective uses, so the two variants differ only in the
    rollout mechanics."""
    tape = Tape()
    params = student.tracked(tape)
    commit_params = student.raw()
    losses = []
    n_steps = schedule.n_steps
    for clip, target in batch:
        heats = clip_heatmaps(clip)
        cache = KvCache(cfg.cache_frames, cfg.layers)
        for m in range(len(clip.frames)):
            ref = clip.frames[0] if m == 0 else rng.standard_normal(clip.frames[0].shape)
            n = int(rng.integers(0, n_steps))
            t = schedule.times[n]
            eps = rng.standard_normal(clip.frames[m].shape)
            x_t = t * clip.frames[m] + (1.0 - t) * eps
            v = student_velocity(params, cfg, x_t, heats[m], ref, t, m, cache)
            x_hat = add(Tensor(x_t) if not isinstance(x_t, Tensor) else x_t,
                        scale(v, 1.0 - t))
            losses.append(mse(x_hat, target.teacher_frames[m]))
            cache_commit(commit_params, cfg, cache, m, clip.frames[m], heats[m], ref,
                         step_index=n_steps, n_steps=n_steps)
    loss = _mean_scalar(losses)
    grads = tape.backward(loss)
    adamw_step(student, grads, lr, weight_decay)
    return loss.item()


def teacher_forcing_dmd_step(student: ParamStore, fake: ParamStore,
                             teacher: ParamStore, student_cfg: NetConfig,
                             teacher_cfg: NetConfig, schedule: NoiseSchedule,
                             clips: list[SceneClip], *, lr: float,
                             weight_decay: float, t_lo: float, t_hi: float,
                             rng: np.random.Generator) -> tuple[float, list]:
    """Distribution-matching with teacher forcing: the clean estimate comes
    from a noised ground-truth point with a ground-truth cache instead of
    the student's own rollout. Returns the loss and the clean estimates
    (the fake net trains on these, mirroring the self-rollout recipe)."""
    if fake is None:
        raise ValueError("fake score net not initialized")
    tape = Tape()
    params = student.tracked(tape)
    commit_params = student.raw()
    n_steps = schedule.n_steps
    surrogates = []
    samples = []
    for clip in clips:
        heats = clip_heatmaps(clip)
        cache = KvCache(student_cfg.cache_frames, student_cfg.layers)
        for m in range(len(clip.frames)):
            ref = clip.frames[0] if m == 0 else rng.standard_normal(clip.frames[0].shape)
            n = int(rng.integers(0, n_steps))
            t = schedule.times[n]
            eps = rng.standard_normal(clip.frames[m].shape)
            x_t = t * clip.frames[m] + (1.0 - t) * eps
            v = student_velocity(params, student_cfg, x_t, heats[m], ref, t, m, cache)
            x_hat = add(Tensor(x_t), scale(v, 1.0 - t))
            t_prime = float(rng.uniform(t_lo, t_hi))
            eps2 = rng.standard_normal(x_hat.data.shape)
            real_fn = _single_frame_velocity_fn(teacher, teacher_cfg, heats[m], ref, m)
            fake_fn = _single_frame_velocity_fn(fake, student_cfg, heats[m], ref, m)
            surrogate, _ = dmd_generator_grad(x_hat, t_prime, eps2, real_fn, fake_fn)
            surrogates.append(surrogate)
            samples.append((x_hat.data.copy(), heats[m], ref, m))
            cache_commit(commit_params, student_cfg, cache, m, clip.frames[m],
                         heats[m], ref, step_index=n_steps, n_steps=n_steps)
    loss = _mean_scalar(surrogates)
    grads = tape.backward(loss)
    adamw_step(student, grads, lr, weight_decay)
    return loss.item(), samples


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

def run_distill(teacher: ParamStore, teacher_cfg: NetConfig, schedule: NoiseSchedule,
                dataset, *, mode: str, objective: str, steps: int, batch_size: int,
                lr: float, weight_decay: float, teacher_sample_steps: int, seed: int,
                fake_lr: float = 3e-4, fake_update_ratio: int = 2,
                dmd_t_lo: float = 0.1, dmd_t_hi: float = 0.9,
                log_file=None) -> tuple[ParamStore, NetConfig, list[dict]]:
    """Distill the teacher into a causal student; returns the student store,
    its causal config, and the training log."""
    if mode not in ("self-rollout", "teacher-forcing"):
        raise ValueError(f"unknown distill mode {mode!r}")
    if objective not in ("endpoint", "dmd"):
        raise ValueError(f"unknown distill objective {objective!r}")
    student_cfg = teacher_cfg.causal()
    student = teacher.clone()
    train_clips = dataset.split("train")
    records: list[dict] = []
    fake: ParamStore | None = None
    if objective != "endpoint":
        fake = teacher.clone()
    for step in range(steps):
        rng = substream(seed, "distill-step", step)
        t0 = time.perf_counter()
        idx = rng.integers(0, len(train_clips), size=batch_size)
        samples = None
        if objective == "endpoint":
            # fresh teacher targets every step: matched initial noise per
            # pair, unlimited noise diversity across steps
            targets = [make_distill_target(teacher, teacher_cfg, train_clips[i],
                                           teacher_sample_steps,
                                           int(substream(seed, "ep-seed", step, j).integers(0, 2 ** 31)))
                       for j, i in enumerate(idx)]
            if mode == "teacher-forcing":
                loss = teacher_forcing_step(student, student_cfg, schedule,
                                            [(train_clips[i], targets[j])
                                             for j, i in enumerate(idx)],
                                            rng, lr=lr, weight_decay=weight_decay)
            else:
                loss = endpoint_regression_step(student, student_cfg, schedule,
                                                targets,
                                                lr=lr, weight_decay=weight_decay)
        else:
            if mode == "teacher-forcing":
                loss, samples = teacher_forcing_dmd_step(
                    student, fake, teacher, student_cfg, teacher_cfg, schedule,
                    [train_clips[i] for i in idx], lr=lr,
                    weight_decay=weight_decay, t_lo=dmd_t_lo, t_hi=dmd_t_hi, rng=rng)
            else:
                batch = [(train_clips[i].controls(),
                          int(substream(seed, "dmd-seed", step, j).integers(0, 2 ** 31)))
                         for j, i in enumerate(idx)]
                loss, samples = dmd_student_step(
                    student, fake, teacher, student_cfg, teacher_cfg, schedule,
                    batch, lr=lr, weight_decay=weight_decay, t_lo=dmd_t_lo,
                    t_hi=dmd_t_hi, rng=rng)
            for k in range(fake_update_ratio):
                fake_rng = substream(seed, "fake-step", step, k)
                fake_score_train_step(fake, student_cfg, samples, fake_rng, fake_lr)
        rec = {"step": step, "loss": loss, "mode": mode, "objective": objective,
               "wall_clock": time.perf_counter() - t0}
        records.append(rec)
        if log_file is not None:
            log_file.write(json.dumps(rec) + "\n")
    return student, student_cfg, records
