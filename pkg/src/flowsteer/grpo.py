"""Stage 2: policy optimization over the (frame, step) decision process.

Each rollout denoises every frame deterministically except for one randomly
selected step per frame, which runs the stochastic update and records its
Gaussian transition (mean, scale, sample, log-density). Rewards arrive only
when a frame is fully denoised. Advantages standardize rewards within a
group of rollouts sharing the same controls, and the update maximizes the
clipped importance-ratio surrogate, with an optional KL pull toward a
frozen reference policy.

Deterministic transitions are Dirac distributions with no density, so the
objective sums only over each frame's stochastic step (normalizer
G * (M+1)); the final schedule step is never selected (the score term is
singular at t = 1).
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import flows
from .autodiff import ParamStore, Tape, Tensor, add, adamw_step, clip, exp, minimum, mul, scale, sub, tsum
from .distill import RolloutFrameTrace, VideoRollout, rollout_video
from .flows import NoiseSchedule
from .nets import KvCache, NetConfig, cache_commit, student_velocity
from .rewards import RewardConfig
from .rng import RolloutRng, substream
from .scenes import ControlSignal


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    kl_beta: float = 0.0
    sigma: float = 0.4
    iterations: int = 200
    lr: float = 1e-4
    weight_decay: float = 0.0
    control_sets: int = 4      # sampled control sets averaged per iteration

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError(f"group size must be >= 2 (advantage std), got {self.group_size}")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError(f"clip width must be in (0, 1), got {self.clip_eps}")
        if self.kl_beta < 0.0:
            raise ValueError(f"KL weight must be >= 0, got {self.kl_beta}")
        if self.control_sets < 1:
            raise ValueError(f"control sets per iteration must be >= 1, got {self.control_sets}")


@dataclass
class RolloutTrajectory:
    """One sampled video plus everything needed to re-evaluate its
    stochastic transitions under a new policy."""
    traces: list[RolloutFrameTrace]
    controls: list[ControlSignal]
    seed: int
    rng_tags: tuple
    rewards: np.ndarray = field(default=None)          # (M+1,) terminal rewards
    motion: np.ndarray = field(default=None)
    quality: np.ndarray = field(default=None)

    @property
    def frames(self) -> np.ndarray:
        return np.stack([tr.clean for tr in self.traces])


def rollout_group(store: ParamStore, cfg: NetConfig, schedule: NoiseSchedule,
                  controls: list[ControlSignal], seed: int, grpo_cfg: GrpoConfig,
                  reward_cfg: RewardConfig, reward_fn) -> list[RolloutTrajectory]:
    """Sample G videos for one control set with exactly one stochastic step
    per frame (final step excluded).

    The group shares its prior draws (initial and reference-slot noise) and
    differs only in the independent stochastic-step draws, so with sigma=0
    all members are identical and with sigma>0 the within-group reward
    spread is caused entirely by the recorded actions — which is what the
    standardized advantages attribute it to."""
    from .rewards import motion_reward, quality_reward
    g = grpo_cfg.group_size
    if g < 2:
        raise ValueError("rollout group needs at least 2 members")
    n_steps = schedule.n_steps
    trajectories = []
    for i in range(g):
        tags = ("grpo", i)
        explore = RolloutRng(seed, *tags)
        stoch_steps = [explore.stochastic_step(m, max(n_steps - 1, 1))
                       for m in range(len(controls))]
        roll = rollout_video(store, cfg, schedule, controls, seed,
                             mode="infer", stoch_steps=stoch_steps,
                             sigma=grpo_cfg.sigma, sde_rng=explore)
        traj = RolloutTrajectory(traces=roll.traces, controls=controls,
                                 seed=seed, rng_tags=tags)
        traj.rewards = np.array([reward_fn(tr.clean, c.target, reward_cfg)
                                 for tr, c in zip(roll.traces, controls)])
        traj.motion = np.array([motion_reward(tr.clean, c.target, reward_cfg)
                                for tr, c in zip(roll.traces, controls)])
        traj.quality = np.array([quality_reward(tr.clean, reward_cfg)
                                 for tr in roll.traces])
        trajectories.append(traj)
    return trajectories


def compute_advantages(rewards: np.ndarray) -> tuple[np.ndarray, int]:
    """Within-group standardization per frame, population std; zero-spread
    groups get advantage 0. rewards is (G, M+1). Returns (advantages,
    number of zero-spread frames)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.ndim != 2 or rewards.shape[0] < 2:
        raise ValueError(f"expected (G, M+1) rewards with G >= 2, got {rewards.shape}")
    mean = rewards.mean(axis=0, keepdims=True)
    std = rewards.std(axis=0, keepdims=True)       # population std
    degenerate = std[0] == 0.0
    safe = np.where(std == 0.0, 1.0, std)
    adv = (rewards - mean) / safe
    adv[:, degenerate] = 0.0
    return adv, int(degenerate.sum())


def grpo_loss(tape: Tape, store: ParamStore, cfg: NetConfig, schedule: NoiseSchedule,
              trajectories: list[RolloutTrajectory], advantages: np.ndarray,
              grpo_cfg: GrpoConfig, ref_store: ParamStore | None = None):
    """Negated clipped surrogate (a loss to minimize) over each frame's
    stochastic step for one rollout group. Returns (loss Tensor, stats)."""
    return grpo_loss_multi(tape, store, cfg, schedule,
                           [(trajectories, advantages)], grpo_cfg, ref_store)


def grpo_loss_multi(tape: Tape, store: ParamStore, cfg: NetConfig,
                    schedule: NoiseSchedule, groups, grpo_cfg: GrpoConfig,
                    ref_store: ParamStore | None = None):
    """Surrogate over one or more rollout groups (each a (trajectories,
    advantages) pair), re-evaluating the recorded transitions under the
    current parameters — including the cache recomputation, which is part
    of the policy's conditioning on the video state."""
    params = store.tracked(tape)
    ref_raw = ref_store.raw() if ref_store is not None and grpo_cfg.kl_beta > 0.0 else None
    n_steps = schedule.n_steps
    terms = []
    kl_terms = []
    ratios = []
    for trajectories, advantages in groups:
        _group_terms(params, ref_raw, cfg, schedule, trajectories, advantages,
                     grpo_cfg, n_steps, terms, kl_terms, ratios)
    count = len(terms)
    total = terms[0]
    for term in terms[1:]:
        total = add(total, term)
    loss = scale(total, -1.0 / count)
    if kl_terms:
        kl_total = kl_terms[0]
        for term in kl_terms[1:]:
            kl_total = add(kl_total, term)
        loss = add(loss, scale(kl_total, grpo_cfg.kl_beta / count))
    rs = np.array(ratios)
    stats = {
        "clip_fraction": float(np.mean((rs < 1.0 - grpo_cfg.clip_eps) |
                                       (rs > 1.0 + grpo_cfg.clip_eps))),
        "kl": float(np.mean(rs - 1.0 - np.log(rs))),
        "mean_ratio": float(rs.mean()),
    }
    return loss, stats


def _group_terms(params, ref_raw, cfg, schedule, trajectories, advantages,
                 grpo_cfg, n_steps, terms, kl_terms, ratios) -> None:
    for i, traj in enumerate(trajectories):
        cache = KvCache(cfg.cache_frames, cfg.layers)
        ref_cache = KvCache(cfg.cache_frames, cfg.layers) if ref_raw is not None else None
        for m, trace in enumerate(traj.traces):
            rec = trace.sde_record
            if rec is None:
                raise ValueError(f"trajectory {i} frame {m} has no stochastic record")
            n = rec.step_index
            t, dt = schedule.times[n], schedule.dts[n]
            ctrl = traj.controls[m].heatmap
            x_in = trace.states[n]
            v = student_velocity(params, cfg, x_in, ctrl, trace.ref_slot, t, m, cache)
            mean = flows.sde_transition_mean(x_in, v, t, dt, grpo_cfg.sigma)
            logp = flows.transition_log_density(rec.sample, mean, rec.scale)
            logr = sub(logp, np.asarray(rec.log_density))
            try:
                r = exp(logr)
            except ValueError as err:
                raise ValueError(f"non-finite importance ratio at trajectory {i}, "
                                 f"frame {m}: {err}") from err
            ratios.append(r.item())
            a = float(advantages[i, m])
            surr = minimum(scale(r, a), scale(clip(r, 1.0 - grpo_cfg.clip_eps,
                                                   1.0 + grpo_cfg.clip_eps), a))
            terms.append(surr)
            if ref_raw is not None:
                v_ref = student_velocity(ref_raw, cfg, x_in, ctrl, trace.ref_slot,
                                         t, m, ref_cache)
                mean_ref = flows.sde_transition_mean(x_in, v_ref.data, t, dt,
                                                     grpo_cfg.sigma)
                d = sub(mean, mean_ref)
                kl_terms.append(scale(tsum(mul(d, d)), 1.0 / (2.0 * rec.scale ** 2)))
                cache_commit(ref_raw, cfg, ref_cache, m, trace.clean, ctrl,
                             trace.ref_slot, step_index=n_steps, n_steps=n_steps)
            cache_commit(params, cfg, cache, m, trace.clean, ctrl, trace.ref_slot,
                         step_index=n_steps, n_steps=n_steps)


def grpo_train_iteration(store: ParamStore, cfg: NetConfig, schedule: NoiseSchedule,
                         control_pool: list[list[ControlSignal]], iteration: int,
                         grpo_cfg: GrpoConfig, reward_cfg: RewardConfig, reward_fn,
                         base_seed: int, ref_store: ParamStore | None = None) -> dict:
    """On-policy iteration: a rollout group per sampled control set, one
    averaged gradient step, one metrics record."""
    t0 = time.perf_counter()
    pick = substream(base_seed, "grpo-pick", iteration)
    groups = []
    all_rewards, all_motion, all_quality, all_adv = [], [], [], []
    n_degenerate = 0
    for _ in range(grpo_cfg.control_sets):
        controls = control_pool[int(pick.integers(0, len(control_pool)))]
        roll_seed = int(pick.integers(0, 2 ** 31))
        trajectories = rollout_group(store, cfg, schedule, controls, roll_seed,
                                     grpo_cfg, reward_cfg, reward_fn)
        rewards = np.stack([t.rewards for t in trajectories])
        advantages, degenerate = compute_advantages(rewards)
        n_degenerate += degenerate
        groups.append((trajectories, advantages))
        all_rewards.append(rewards)
        all_adv.append(advantages)
        all_motion.append(np.stack([t.motion for t in trajectories]))
        all_quality.append(np.stack([t.quality for t in trajectories]))
    tape = Tape()
    loss, stats = grpo_loss_multi(tape, store, cfg, schedule, groups, grpo_cfg,
                                  ref_store=ref_store)
    grads = tape.backward(loss)
    adamw_step(store, grads, grpo_cfg.lr, grpo_cfg.weight_decay)
    return {
        "iteration": iteration,
        "mean_reward": float(np.concatenate([r.ravel() for r in all_rewards]).mean()),
        "mean_motion_reward": float(np.concatenate([m.ravel() for m in all_motion]).mean()),
        "mean_quality_reward": float(np.concatenate([q.ravel() for q in all_quality]).mean()),
        "mean_abs_advantage": float(np.abs(np.concatenate([a.ravel() for a in all_adv])).mean()),
        "degenerate_frames": n_degenerate,
        "loss": loss.item(),
        "clip_fraction": stats["clip_fraction"],
        "kl": stats["kl"],
        "wall_clock": time.perf_counter() - t0,
    }


def run_grpo(store: ParamStore, cfg: NetConfig, schedule: NoiseSchedule, dataset,
             grpo_cfg: GrpoConfig, reward_cfg: RewardConfig, reward_fn,
             base_seed: int, log_file=None, ref_store: ParamStore | None = None) -> list[dict]:
    control_pool = [clip.controls() for clip in dataset.split("train")]
    if ref_store is None and grpo_cfg.kl_beta > 0.0:
        ref_store = store.clone()
    records = []
    for it in range(grpo_cfg.iterations):
        rec = grpo_train_iteration(store, cfg, schedule, control_pool, it, grpo_cfg,
                                   reward_cfg, reward_fn, base_seed, ref_store)
        records.append(rec)
        if log_file is not None:
            log_file.write(json.dumps(rec) + "\n")
    return records
