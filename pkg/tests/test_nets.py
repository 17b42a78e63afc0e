"""Network contracts: masks, causality, KV-cache semantics, gradients."""
import numpy as np
import pytest

from flowsteer.autodiff import Tape, check_gradients, mse
from flowsteer.nets import (FrameInputs, KvCache, NetConfig, cache_commit,
                            fake_score_velocity, init_velocity_net,
                            sequence_velocity, student_velocity, teacher_velocity)
from flowsteer.rng import substream

CFG = NetConfig(side=8, width=16, hidden=32, layers=2, cache_frames=7)
STORE = init_velocity_net(CFG, 42)
RNG = np.random.default_rng(3)


def _frames(n, side=8):
    rng = np.random.default_rng(17)
    xs = [rng.normal(size=(side, side)) for _ in range(n)]
    ctrls = [rng.random((side, side)) for _ in range(n)]
    refs = [rng.normal(size=(side, side)) for _ in range(n)]
    return xs, ctrls, refs


def test_teacher_output_shape_matches_input():
    xs, ctrls, refs = _frames(5)
    out = teacher_velocity(STORE.raw(), CFG, xs, ctrls, refs, 0.3)
    assert out.shape == (5, 8, 8)
    assert np.all(np.isfinite(out.data))


def test_teacher_zero_input_finite():
    zeros = [np.zeros((8, 8))] * 3
    out = teacher_velocity(STORE.raw(), CFG, zeros, zeros, zeros, 0.0)
    assert np.all(np.isfinite(out.data))


def test_teacher_is_bidirectional():
    xs, ctrls, refs = _frames(4)
    base = teacher_velocity(STORE.raw(), CFG, xs, ctrls, refs, 0.3).data
    xs2 = list(xs)
    xs2[2], xs2[3] = xs2[3], xs2[2]
    swapped = teacher_velocity(STORE.raw(), CFG, xs2, ctrls, refs, 0.3).data
    assert not np.allclose(base[0], swapped[0])


def test_teacher_control_count_mismatch_rejected():
    xs, ctrls, refs = _frames(4)
    with pytest.raises(ValueError, match="mismatch"):
        teacher_velocity(STORE.raw(), CFG, xs, ctrls[:3], refs, 0.3)


def test_student_deterministic_and_cache_not_mutated():
    xs, ctrls, refs = _frames(3)
    cache = KvCache(CFG.cache_frames, CFG.layers)
    cache_commit(STORE.raw(), CFG, cache, 0, xs[0], ctrls[0], refs[0],
                 step_index=3, n_steps=3)
    frames_before = list(cache.frames)
    k_before = cache.keys[0].data.copy()
    a = student_velocity(STORE.raw(), CFG, xs[1], ctrls[1], refs[1], 0.245, 1, cache)
    b = student_velocity(STORE.raw(), CFG, xs[1], ctrls[1], refs[1], 0.245, 1, cache)
    np.testing.assert_array_equal(a.data, b.data)
    assert cache.frames == frames_before
    np.testing.assert_array_equal(cache.keys[0].data, k_before)


def test_student_rejects_cache_with_future_frames():
    xs, ctrls, refs = _frames(3)
    cache = KvCache(CFG.cache_frames, CFG.layers)
    cache_commit(STORE.raw(), CFG, cache, 2, xs[2], ctrls[2], refs[2],
                 step_index=3, n_steps=3)
    with pytest.raises(ValueError, match="cache holds frame"):
        student_velocity(STORE.raw(), CFG, xs[1], ctrls[1], refs[1], 0.245, 1, cache)


def test_commit_requires_final_step():
    xs, ctrls, refs = _frames(1)
    cache = KvCache(CFG.cache_frames, CFG.layers)
    with pytest.raises(ValueError, match="final denoising step"):
        cache_commit(STORE.raw(), CFG, cache, 0, xs[0], ctrls[0], refs[0],
                     step_index=2, n_steps=3)


def test_cache_ring_semantics():
    xs, ctrls, refs = _frames(8)
    cache = KvCache(7, CFG.layers)
    for m in range(3):
        cache_commit(STORE.raw(), CFG, cache, m, xs[m], ctrls[m], refs[m],
                     step_index=3, n_steps=3)
    assert cache.occupancy == 3
    for m in range(3, 8):
        cache_commit(STORE.raw(), CFG, cache, m, xs[m], ctrls[m], refs[m],
                     step_index=3, n_steps=3)
    assert cache.occupancy == 7
    assert cache.frames == [1, 2, 3, 4, 5, 6, 7]
    assert cache.keys[0].shape[0] == 7
    with pytest.raises(ValueError, match="out of order"):
        cache_commit(STORE.raw(), CFG, cache, 5, xs[0], ctrls[0], refs[0],
                     step_index=3, n_steps=3)


def test_causality_bit_exact_under_future_perturbation():
    xs, ctrls, refs = _frames(5)
    raw = STORE.raw()

    def run(xs_, ctrls_, upto):
        cache = KvCache(CFG.cache_frames, CFG.layers)
        outs = []
        for m in range(upto + 1):
            outs.append(student_velocity(raw, CFG, xs_[m], ctrls_[m], refs[m],
                                         0.245, m, cache).data)
            cache_commit(raw, CFG, cache, m, xs_[m], ctrls_[m], refs[m],
                         step_index=3, n_steps=3)
        return outs

    base = run(xs, ctrls, 2)
    xs2 = [x.copy() for x in xs]
    ctrls2 = [c.copy() for c in ctrls]
    xs2[3] += 100.0
    ctrls2[4] = np.zeros((8, 8))
    pert = run(xs2, ctrls2, 2)
    for a, b in zip(base, pert):
        np.testing.assert_array_equal(a, b)


def test_incremental_cache_equals_from_scratch_causal_attention():
    xs, ctrls, refs = _frames(6)
    raw = STORE.raw()
    cache = KvCache(CFG.cache_frames, CFG.layers)
    increments = []
    for m in range(6):
        q = student_velocity(raw, CFG, xs[m], ctrls[m], refs[m], 0.478, m, cache)
        increments.append(q.data)
        cache_commit(raw, CFG, cache, m, xs[m], ctrls[m], refs[m],
                     step_index=3, n_steps=3)
    for m in range(6):
        frames = [FrameInputs(x=xs[j], ctrl=ctrls[j], ref=refs[j], t=1.0, index=j)
                  for j in range(m)]
        frames.append(FrameInputs(x=xs[m], ctrl=ctrls[m], ref=refs[m], t=0.478, index=m))
        full = sequence_velocity(raw, CFG, frames, mask_mode="causal").data
        assert np.abs(full[m] - increments[m]).max() <= 1e-10


def test_eviction_changes_only_subsequent_outputs():
    xs, ctrls, refs = _frames(9)
    raw = STORE.raw()
    small = NetConfig(side=8, width=16, hidden=32, layers=2, cache_frames=3)

    def outputs(capacity):
        cfg = NetConfig(side=8, width=16, hidden=32, layers=2, cache_frames=capacity)
        cache = KvCache(capacity, cfg.layers)
        outs = []
        for m in range(6):
            outs.append(student_velocity(raw, cfg, xs[m], ctrls[m], refs[m],
                                         0.245, m, cache).data)
            cache_commit(raw, cfg, cache, m, xs[m], ctrls[m], refs[m],
                         step_index=3, n_steps=3)
        return outs

    big = outputs(7)     # no eviction within 6 frames
    small = outputs(3)   # evicts from frame 3 on
    for m in range(4):   # queries at m <= 3 saw identical caches
        np.testing.assert_array_equal(big[m], small[m])
    assert not np.array_equal(big[4], small[4])


def test_fake_score_velocity_contract():
    xs, ctrls, refs = _frames(1)
    out = fake_score_velocity(STORE.raw(), CFG, xs[0], ctrls[0], refs[0], 0.3)
    assert out.shape == (8, 8)
    out2 = fake_score_velocity(STORE.raw(), CFG, xs[0], ctrls[0], refs[0], 0.3)
    np.testing.assert_array_equal(out.data, out2.data)


def test_network_gradients_match_finite_differences():
    # gradient through the full student path (attention + cache-free)
    tiny = NetConfig(side=3, width=6, hidden=8, layers=1, time_dim=4)
    store = init_velocity_net(tiny, 5)
    names = store.names()
    ctrl = np.random.default_rng(0).random((3, 3))
    ref = np.random.default_rng(1).normal(size=(3, 3))
    target = np.random.default_rng(2).normal(size=(3, 3))
    x_in = np.random.default_rng(4).normal(size=(3, 3))

    def build(tensors):
        params = dict(zip(names, tensors))
        cache = KvCache(tiny.cache_frames, tiny.layers)
        out = student_velocity(params, tiny, x_in, ctrl, ref, 0.245, 0, cache)
        return mse(out, target)

    args = [store[n] for n in names]
    assert check_gradients(build, args) <= 1e-4


def test_gradient_through_cache_commit_path():
    tiny = NetConfig(side=3, width=6, hidden=8, layers=1, time_dim=4)
    store = init_velocity_net(tiny, 6)
    names = store.names()
    rng = np.random.default_rng(9)
    ctrl, ref = rng.random((3, 3)), rng.normal(size=(3, 3))
    clean = rng.normal(size=(3, 3))
    x_in = rng.normal(size=(3, 3))
    target = rng.normal(size=(3, 3))

    def build(tensors):
        params = dict(zip(names, tensors))
        cache = KvCache(tiny.cache_frames, tiny.layers)
        cache_commit(params, tiny, cache, 0, clean, ctrl, ref, step_index=3, n_steps=3)
        out = student_velocity(params, tiny, x_in, ctrl, ref, 0.245, 1, cache)
        return mse(out, target)

    args = [store[n] for n in names]
    assert check_gradients(build, args) <= 1e-4


def test_init_deterministic():
    a = init_velocity_net(CFG, 42)
    b = init_velocity_net(CFG, 42)
    for n in a.names():
        np.testing.assert_array_equal(a[n], b[n])


def test_config_round_trip_and_validation():
    assert NetConfig.from_dict(CFG.as_dict()) == CFG
    assert CFG.causal().mask_mode == "causal"
    with pytest.raises(ValueError, match="mask mode"):
        NetConfig(mask_mode="banded")
