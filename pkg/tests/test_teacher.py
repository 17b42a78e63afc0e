"""Teacher training: flow-matching objective, sampling, and the 1-dim
Gaussian toy whose optimal velocity is known in closed form."""
import time

import numpy as np
import pytest

from flowsteer.autodiff import Tape, adamw_step, mse
from flowsteer.flows import normalize_schedule
from flowsteer.nets import (FrameInputs, NetConfig, init_velocity_net,
                            sequence_velocity, teacher_velocity)
from flowsteer.rng import substream
from flowsteer.scenes import build_dataset
from flowsteer.teacher import (teacher_sample, teacher_train_step, teacher_val_loss,
                               train_teacher, clip_heatmaps)

MINI = NetConfig(side=8, width=16, hidden=32, layers=2)


@pytest.fixture(scope="module")
def mini_world():
    ds = build_dataset(24, 4, seed=5, side=8)
    store = init_velocity_net(MINI, 5)
    return ds, store


def test_empty_batch_rejected(mini_world):
    _, store = mini_world
    with pytest.raises(ValueError, match="empty batch"):
        teacher_train_step(store, MINI, [], substream(0), 3e-4)


def test_loss_nonnegative_and_decreases(mini_world):
    ds, _ = mini_world
    store = init_velocity_net(MINI, 5)
    losses = []
    for step in range(120):
        rng = substream(9, "step", step)
        idx = rng.integers(0, len(ds.split("train")), size=4)
        batch = [ds.split("train")[i] for i in idx]
        losses.append(teacher_train_step(store, MINI, batch, rng, 3e-4))
    assert all(l >= 0.0 for l in losses)
    assert np.mean(losses[-20:]) < 0.5 * np.mean(losses[:20])


def test_perfect_prediction_gives_zero_loss():
    # the objective is plain MSE against the target field
    v = np.random.default_rng(0).normal(size=(4, 8, 8))
    assert mse(v, v).item() == 0.0


def test_validation_loss_decreases_under_moving_average(mini_world):
    ds, _ = mini_world
    store = init_velocity_net(MINI, 6)
    records = train_teacher(store, MINI, ds, steps=260, batch_size=4, lr=3e-4,
                            weight_decay=0.01, seed=3, val_every=20)
    vals = [r["val_loss"] for r in records if "val_loss" in r]
    assert len(vals) >= 10
    smoothed = np.convolve(vals, np.ones(10) / 10.0, mode="valid")
    assert smoothed[-1] < smoothed[0]


def test_sampling_deterministic(mini_world):
    ds, store = mini_world
    clip = ds.clips[0]
    heats = clip_heatmaps(clip)
    a = teacher_sample(store, MINI, heats, clip.frames[0], 8, seed=44)
    b = teacher_sample(store, MINI, heats, clip.frames[0], 8, seed=44)
    np.testing.assert_array_equal(a, b)
    c = teacher_sample(store, MINI, heats, clip.frames[0], 8, seed=45)
    assert not np.array_equal(a, c)


def test_single_step_sampling_is_one_euler_step(mini_world):
    ds, store = mini_world
    clip = ds.clips[1]
    heats = clip_heatmaps(clip)
    out = teacher_sample(store, MINI, heats, clip.frames[0], 1, seed=7)
    # reproduce by hand: x0 from the addressable init streams, one step at t=0
    from flowsteer.rng import RolloutRng
    rng = RolloutRng(7)
    x0 = np.stack([rng.init_noise(m, (8, 8)) for m in range(len(heats))])
    refs = [clip.frames[0]] + [rng.ref_noise(m, (8, 8)) for m in range(1, len(heats))]
    v = teacher_velocity(store.raw(), MINI, list(x0), list(heats), refs, 0.0).data
    np.testing.assert_array_equal(out, x0 + v)


def test_sampling_wall_clock_linear_in_steps(mini_world):
    ds, store = mini_world
    clip = ds.clips[2]
    heats = clip_heatmaps(clip)

    def timed(k):
        # min over repetitions: robust to scheduler contention
        times = []
        for rep in range(7):
            t0 = time.perf_counter()
            teacher_sample(store, MINI, heats, clip.frames[0], k, seed=rep)
            times.append(time.perf_counter() - t0)
        return min(times)

    timed(8)   # warm-up
    t8, t16, t32 = timed(8), timed(16), timed(32)
    assert 2.0 * 0.8 <= t16 / t8 <= 2.0 * 1.2
    assert 2.0 * 0.8 <= t32 / t16 <= 2.0 * 1.2


# ---------------------------------------------------------------------------
# The 1-dim Gaussian toy: N(0,1) data, N(0,1) noise. The flow-matching
# optimum is the conditional expectation E[x1 - x0 | x_t], known in closed
# form; a quadrature oracle independently validates the algebra.
# ---------------------------------------------------------------------------

def optimal_velocity(x, t):
    # E[x1|x] = t x / var, E[x0|x] = (1-t) x / var, var = t^2 + (1-t)^2
    var = t * t + (1.0 - t) ** 2
    return (2.0 * t - 1.0) / var * x


def quadrature_velocity(x, t):
    x1 = np.linspace(-8.0, 8.0, 4001)
    weights = np.exp(-0.5 * x1 ** 2)
    x0 = (x - t * x1) / (1.0 - t)
    weights = weights * np.exp(-0.5 * x0 ** 2)
    v = x1 - x0
    return np.trapezoid(weights * v, x1) / np.trapezoid(weights, x1)


def test_quadrature_confirms_closed_form():
    for x, t in [(1.2, 0.3), (-0.7, 0.6), (2.0, 0.1), (0.4, 0.85)]:
        assert quadrature_velocity(x, t) == pytest.approx(optimal_velocity(x, t), abs=1e-6)


@pytest.mark.slow
def test_trained_net_matches_gaussian_toy_optimum():
    cfg = NetConfig(side=1, width=32, hidden=64, layers=2, time_dim=8)
    store = init_velocity_net(cfg, 13)
    zeros = np.zeros((1, 1))

    def train_phase(steps, lr, tag):
        batch = 256
        for step in range(steps):
            rng = substream(77, tag, step)
            tape = Tape()
            params = store.tracked(tape)
            ts = rng.uniform(0.0, 1.0, size=batch)
            x1 = rng.standard_normal(batch)
            x0 = rng.standard_normal(batch)
            frames = [FrameInputs(x=np.array([[t * a + (1 - t) * b]]), ctrl=zeros,
                                  ref=zeros, t=float(t), index=0)
                      for t, a, b in zip(ts, x1, x0)]
            out = sequence_velocity(params, cfg, frames, mask_mode="diagonal")
            grads = tape.backward(mse(out, (x1 - x0).reshape(batch, 1, 1)))
            adamw_step(store, grads, lr, 0.0)

    # constant-rate phases; the fine phases shrink optimizer jitter
    train_phase(2000, 1e-3, "p1")
    train_phase(800, 1e-4, "p2")
    train_phase(400, 1e-5, "p3")
    xs = np.linspace(-1.5, 1.5, 9)
    tg = np.linspace(0.05, 0.9, 8)
    frames = [FrameInputs(x=np.array([[xv]]), ctrl=zeros, ref=zeros, t=tv, index=0)
              for xv in xs for tv in tg]
    got = sequence_velocity(store.raw(), cfg, frames, mask_mode="diagonal").data[:, 0, 0]
    want = np.array([optimal_velocity(xv, tv) for xv in xs for tv in tg])
    rms = float(np.sqrt(np.mean((got - want) ** 2)))
    assert rms <= 0.05, f"RMS against the closed-form optimum: {rms}"
