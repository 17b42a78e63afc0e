"""Desk-scale reward model: a centroid tracker standing in for a learned
point tracker, a motion-alignment reward, and a blob-integrity quality
proxy, composed into the terminal per-frame reward."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenes import render_frame


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 0.05            # offset, squared-distance units in the unit square
    lam: float = 40.0              # motion-reward scaling
    quality_weight: float = 1.0
    tracker_floor: float = 0.5     # minimum selected intensity mass to be trackable
    tracker_rel_threshold: float = 0.2

    def __post_init__(self):
        if self.alpha <= 0.0 or self.lam <= 0.0:
            raise ValueError(f"alpha and lam must be positive, got {self.alpha}, {self.lam}")


def track_position(frame: np.ndarray, cfg: RewardConfig = RewardConfig()) -> tuple[float, float] | None:
    """Intensity-weighted centroid over cells at >= 20% of the frame max,
    in unit-square coordinates. Returns None for untrackable frames."""
    peak = float(frame.max(initial=-np.inf))
    if peak <= 0.0:
        return None
    mask = frame >= cfg.tracker_rel_threshold * peak
    weights = np.where(mask, frame, 0.0)
    total = float(weights.sum())
    if total < cfg.tracker_floor:
        return None
    side = frame.shape[0]
    rows = (np.arange(side) + 0.5) / side
    cols = (np.arange(side) + 0.5) / side
    y = float((weights.sum(axis=1) * rows).sum() / total)
    x = float((weights.sum(axis=0) * cols).sum() / total)
    return (x, y)


def motion_reward(frame: np.ndarray, target, cfg: RewardConfig = RewardConfig()) -> float:
    """lam * max(0, alpha - ||tracked - target||^2); untrackable scores 0."""
    pos = track_position(frame, cfg)
    if pos is None:
        return 0.0
    d2 = (pos[0] - target[0]) ** 2 + (pos[1] - target[1]) ** 2
    return cfg.lam * max(0.0, cfg.alpha - d2)


def quality_reward(frame: np.ndarray, cfg: RewardConfig = RewardConfig()) -> float:
    """Blob-integrity proxy in [0, 5]: how closely the frame matches an
    ideal blob rendered at its own tracked position."""
    pos = track_position(frame, cfg)
    if pos is None:
        return 0.0
    side = frame.shape[0]
    ideal = render_frame(pos, side)
    err = float(np.sum((frame - ideal) ** 2))
    return 5.0 * float(np.exp(-err / (side * side)))


def terminal_reward(frame: np.ndarray, target, cfg: RewardConfig = RewardConfig()) -> float:
    """Composite reward at a frame's final denoising step."""
    return cfg.quality_weight * quality_reward(frame, cfg) + motion_reward(frame, target, cfg)


def motion_only(frame, target, cfg: RewardConfig = RewardConfig()) -> float:
    return motion_reward(frame, target, cfg)


def quality_only(frame, target, cfg: RewardConfig = RewardConfig()) -> float:
    return quality_reward(frame, cfg)


# Named registry so alternative scorers can be configured without code changes.
REWARD_REGISTRY = {
    "composite": terminal_reward,
    "motion-only": motion_only,
    "quality-only": quality_only,
}


def get_reward_fn(name: str):
    if name not in REWARD_REGISTRY:
        raise ValueError(f"unknown reward model {name!r}; choices: {sorted(REWARD_REGISTRY)}")
    return REWARD_REGISTRY[name]
