"""Tracker oracle, motion/quality rewards, and the terminal composite."""
import numpy as np
import pytest

from flowsteer.rewards import (REWARD_REGISTRY, RewardConfig, get_reward_fn,
                               motion_reward, quality_reward, terminal_reward,
                               track_position)
from flowsteer.rng import substream
from flowsteer.scenes import render_frame

CFG = RewardConfig()


def test_tracker_recovers_center_exactly():
    pos = track_position(render_frame((0.5, 0.5), 16))
    assert abs(pos[0] - 0.5) < 1e-6 and abs(pos[1] - 0.5) < 1e-6


def test_tracker_round_trip_within_half_cell():
    worst = 0.0
    for seed in range(100):
        p = substream(seed, "track").uniform(0.1, 0.9, size=2)
        got = track_position(render_frame(p, 16))
        assert got is not None
        worst = max(worst, float(np.hypot(got[0] - p[0], got[1] - p[1])) * 16)
    assert worst <= 0.5


def test_all_zero_frame_untrackable():
    assert track_position(np.zeros((16, 16))) is None
    assert track_position(np.full((16, 16), -3.0)) is None
    assert motion_reward(np.zeros((16, 16)), (0.5, 0.5)) == 0.0
    assert quality_reward(np.zeros((16, 16))) == 0.0


def test_motion_reward_exact_values():
    # exact hit: lam * alpha = 40 * 0.05 = 2.0
    frame = render_frame((0.5, 0.5), 16)
    assert motion_reward(frame, (0.5, 0.5)) == pytest.approx(2.0, abs=1e-9)
    # d^2 beyond alpha clamps to zero: 0.3 unit offset => d^2 = 0.09 > 0.05
    assert motion_reward(frame, (0.5 + 0.3, 0.5)) == 0.0
    # half-way: d^2 = 0.025 => 40 * (0.05 - 0.025) = 1.0
    d = np.sqrt(0.025)
    got = motion_reward(frame, (0.5 + d, 0.5))
    assert got == pytest.approx(1.0, abs=1e-6)


def test_motion_reward_non_increasing_in_distance():
    frame = render_frame((0.5, 0.5), 16)
    ds = np.linspace(0.0, 0.4, 40)
    vals = [motion_reward(frame, (0.5 + d, 0.5)) for d in ds]
    assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))
    assert all(v == 0.0 for d, v in zip(ds, vals) if d * d >= CFG.alpha)


def test_quality_of_ground_truth_is_five():
    assert quality_reward(render_frame((0.5, 0.5), 16)) == pytest.approx(5.0, abs=1e-6)


def test_quality_of_pure_noise():
    # Frozen measurement over 1000 standard-normal frames (fixed seed): the
    # proxy scores noise far below clean blobs (which sit at 5.0). Note the
    # exp(-err/S^2) form floors out near exp(-1) * 5 ~ 1.8, not below 1.
    rng = np.random.default_rng(424242)
    vals = np.array([quality_reward(rng.standard_normal((16, 16))) for _ in range(1000)])
    assert vals.mean() == pytest.approx(1.7987334302884042, abs=1e-9)
    assert vals.max() < 2.5


def test_quality_monotone_under_growing_noise():
    frame = render_frame((0.4, 0.6), 16)
    noise = substream(1, "ladder").standard_normal((16, 16))
    vals = [quality_reward(frame + mag * noise)
            for mag in (0.0, 0.05, 0.1, 0.2, 0.4, 0.8, 1.6)]
    assert all(a >= b - 1e-9 for a, b in zip(vals, vals[1:]))


def test_terminal_reward_composition():
    frame = render_frame((0.5, 0.5), 16)
    assert terminal_reward(frame, (0.5, 0.5)) == pytest.approx(7.0, abs=1e-6)
    assert terminal_reward(np.zeros((16, 16)), (0.5, 0.5)) == 0.0


def test_terminal_reward_bounds():
    rng = substream(3, "bounds")
    hi = 5.0 + CFG.lam * CFG.alpha
    for _ in range(200):
        frame = rng.standard_normal((16, 16)) * rng.uniform(0.1, 3.0)
        target = rng.uniform(0, 1, size=2)
        r = terminal_reward(frame, target)
        assert 0.0 <= r <= hi


def test_reward_independent_of_other_frames_controls():
    # signature-level property: the reward sees one frame and one target
    frame = render_frame((0.3, 0.3), 16)
    assert terminal_reward(frame, (0.3, 0.3)) == terminal_reward(frame, (0.3, 0.3))


def test_registry_lookup():
    assert set(REWARD_REGISTRY) == {"composite", "motion-only", "quality-only"}
    frame = render_frame((0.5, 0.5), 16)
    assert get_reward_fn("motion-only")(frame, (0.5, 0.5), CFG) == \
        pytest.approx(motion_reward(frame, (0.5, 0.5)), abs=1e-12)
    with pytest.raises(ValueError, match="unknown reward model"):
        get_reward_fn("vibes")


def test_config_validation():
    with pytest.raises(ValueError, match="positive"):
        RewardConfig(alpha=0.0)
    with pytest.raises(ValueError, match="positive"):
        RewardConfig(lam=-1.0)
