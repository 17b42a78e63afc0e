"""Velocity-field networks: a bidirectional teacher, a causal KV-cached
student sharing the same weights layout, and a single-frame score net for
distribution-matching distillation.

One token per frame. Each token embeds (frame, control heatmap,
reference-or-noise slot, sinusoidal time embedding) plus a sinusoidal
frame-index position. Internally the network predicts the clean frame f and
exposes the velocity v = (f - x) / max(1-t, 1/8); this data-prediction
parameterization keeps few-step sampling well conditioned (the final
schedule step lands exactly on f) without changing the velocity contract.

All forward functions return a Tensor; it is untracked (and cheap) when
neither the inputs nor the parameters are recorded on a tape, which is what
makes the training and inference paths bit-identical.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import (MASK_OFF, ParamStore, Tensor, add, affine, attention,
                       concat_rows, gelu, mul, reshape, slice_rows, sub)
from .rng import substream

RHO_FLOOR = 1.0 / 8.0


@dataclass(frozen=True)
class NetConfig:
    side: int = 16
    width: int = 32
    layers: int = 2
    hidden: int = 64
    time_dim: int = 8
    mask_mode: str = "bidirectional"   # or "causal"
    cache_frames: int = 7

    def __post_init__(self):
        if self.mask_mode not in ("bidirectional", "causal", "diagonal"):
            raise ValueError(f"unknown mask mode {self.mask_mode!r}")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")

    def as_dict(self) -> dict:
        return {"side": self.side, "width": self.width, "layers": self.layers,
                "hidden": self.hidden, "time_dim": self.time_dim,
                "mask_mode": self.mask_mode, "cache_frames": self.cache_frames}

    @staticmethod
    def from_dict(d: dict) -> "NetConfig":
        return NetConfig(**d)

    def causal(self) -> "NetConfig":
        return replace(self, mask_mode="causal")


def time_embedding(t: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, math.log(20.0), half))
    return np.concatenate([np.sin(freqs * t), np.cos(freqs * t)])


def index_embedding(m: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    return np.concatenate([np.sin(freqs * m), np.cos(freqs * m)])


def rho(t: float) -> float:
    return 1.0 / max(1.0 - t, RHO_FLOOR)


def init_velocity_net(cfg: NetConfig, seed: int | tuple = 0) -> ParamStore:
    keys = (seed,) if isinstance(seed, int) else tuple(seed)
    rng = substream(*keys, "net-init")
    s2 = cfg.side * cfg.side
    d = cfg.width
    store = ParamStore()

    def w(name, fan_in, shape):
        store.add(name, rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape))

    w("embed.frame.w", s2, (s2, d))
    w("embed.ctrl.w", s2, (s2, d))
    w("embed.ref.w", s2, (s2, d))
    w("embed.time.w", cfg.time_dim, (cfg.time_dim, d))
    store.add("embed.b", np.zeros(d))
    for layer in range(cfg.layers):
        for proj in ("wq", "wk", "wv", "wo"):
            w(f"block{layer}.attn.{proj}", d, (d, d))
        w(f"block{layer}.mlp.w1", d, (d, cfg.hidden))
        store.add(f"block{layer}.mlp.b1", np.zeros(cfg.hidden))
        w(f"block{layer}.mlp.w2", cfg.hidden, (cfg.hidden, d))
        store.add(f"block{layer}.mlp.b2", np.zeros(d))
    w("head.w", d, (d, s2))
    store.add("head.b", np.zeros(s2))
    store.add("head.ctrl_skip.w", np.zeros((s2, s2)))
    return store


@dataclass
class FrameInputs:
    """Everything one frame token is built from."""
    x: Tensor | np.ndarray            # (S, S) frame state at time t
    ctrl: np.ndarray                  # (S, S) control heatmap
    ref: np.ndarray                   # (S, S) reference frame (m == 0) or noise slot
    t: float
    index: int


def _flatten(x, side: int):
    if isinstance(x, Tensor):
        return reshape(x, (1, side * side))
    return np.asarray(x, dtype=np.float64).reshape(1, side * side)


def _stack_rows(rows: list):
    out = rows[0]
    for r in rows[1:]:
        out = concat_rows(out, r)
    return out


def _embed_rows(params, cfg: NetConfig, xs, ctrls, refs, times, indices) -> Tensor:
    temb = np.stack([time_embedding(t, cfg.time_dim) for t in times])
    pos = np.stack([index_embedding(m, cfg.width) for m in indices])
    h = affine(xs, params["embed.frame.w"])
    h = add(h, affine(ctrls, params["embed.ctrl.w"]))
    h = add(h, affine(refs, params["embed.ref.w"]))
    h = add(h, affine(temb, params["embed.time.w"], params["embed.b"]))
    return add(h, pos)


def _block(params, layer: int, h, mask, d: int, kv_out: list | None = None,
           cache: "KvCache | None" = None) -> Tensor:
    """One attention+MLP residual block. With a cache, the current token's
    keys/values sit after the cached rows (causal by layout)."""
    q = affine(h, params[f"block{layer}.attn.wq"])
    k = affine(h, params[f"block{layer}.attn.wk"])
    v = affine(h, params[f"block{layer}.attn.wv"])
    if kv_out is not None:
        kv_out.append((k, v))
    if cache is not None and cache.occupancy > 0:
        k_all = concat_rows(cache.keys[layer], k)
        v_all = concat_rows(cache.values[layer], v)
    else:
        k_all, v_all = k, v
    att = attention(q, k_all, v_all, mask=mask, scale=1.0 / math.sqrt(d))
    h = add(h, affine(att, params[f"block{layer}.attn.wo"]))
    u = affine(h, params[f"block{layer}.mlp.w1"], params[f"block{layer}.mlp.b1"])
    u = gelu(u)
    return add(h, affine(u, params[f"block{layer}.mlp.w2"], params[f"block{layer}.mlp.b2"]))


def _head(params, cfg: NetConfig, h, xs, ctrls, times) -> Tensor:
    """Clean-frame prediction converted to a velocity, row by row."""
    f = affine(h, params["head.w"], params["head.b"])
    f = add(f, affine(ctrls, params["head.ctrl_skip.w"]))
    rhos = np.repeat(np.array([[rho(t)] for t in times]), cfg.side * cfg.side, axis=1)
    return mul(sub(f, xs), rhos)


def sequence_velocity(params, cfg: NetConfig, frames: list[FrameInputs],
                      mask_mode: str | None = None) -> Tensor:
    """Joint forward over a token sequence; one velocity field per frame.
    Returns a (T, S, S) Tensor."""
    mask_mode = mask_mode or cfg.mask_mode
    side = cfg.side
    tcount = len(frames)
    flat = [_flatten(fr.x, side) for fr in frames]
    if any(isinstance(r, Tensor) for r in flat):
        xs = _stack_rows(flat)
    else:
        xs = np.concatenate(flat, axis=0)
    ctrls = np.stack([np.asarray(fr.ctrl).reshape(-1) for fr in frames])
    refs = np.stack([np.asarray(fr.ref).reshape(-1) for fr in frames])
    times = [fr.t for fr in frames]
    indices = [fr.index for fr in frames]
    if mask_mode == "causal":
        mask = np.where(np.tril(np.ones((tcount, tcount), dtype=bool)), 0.0, MASK_OFF)
    elif mask_mode == "diagonal":
        # independent per-frame evaluation batched through one forward
        mask = np.where(np.eye(tcount, dtype=bool), 0.0, MASK_OFF)
    else:
        mask = None
    h = _embed_rows(params, cfg, xs, ctrls, refs, times, indices)
    for layer in range(cfg.layers):
        h = _block(params, layer, h, mask, cfg.width)
    out = _head(params, cfg, h, xs, ctrls, times)
    return reshape(out, (tcount, side, side))


def teacher_velocity(params, cfg: NetConfig, xs, ctrls, refs, t: float) -> Tensor:
    """Bidirectional joint denoising: all frames share one noise time."""
    if not (len(xs) == len(ctrls) == len(refs)):
        raise ValueError(f"frame/control count mismatch: {len(xs)} frames, "
                         f"{len(ctrls)} controls, {len(refs)} reference slots")
    frames = [FrameInputs(x=x, ctrl=c, ref=r, t=t, index=m)
              for m, (x, c, r) in enumerate(zip(xs, ctrls, refs))]
    return sequence_velocity(params, cfg, frames, mask_mode="bidirectional")


def fake_score_velocity(params, cfg: NetConfig, x, ctrl, ref, t: float,
                        index: int = 0) -> Tensor:
    """Single-frame velocity from the online score net."""
    fr = FrameInputs(x=x, ctrl=ctrl, ref=ref, t=t, index=index)
    out = sequence_velocity(params, cfg, [fr], mask_mode="bidirectional")
    return reshape(out, (cfg.side, cfg.side))


# ---------------------------------------------------------------------------
# KV cache and the causal student
# ---------------------------------------------------------------------------

class KvCache:
    """Ring of per-layer key/value rows for up to `capacity` clean frames.

    Occupants are the most recent consecutive committed frames; commits past
    capacity evict the oldest. Rows may be tracked Tensors (policy
    re-evaluation) or plain arrays (inference snapshots).
    """

    def __init__(self, capacity: int, n_layers: int):
        if capacity < 1:
            raise ValueError(f"cache capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.n_layers = n_layers
        self.frames: list[int] = []
        self.keys: list = [None] * n_layers
        self.values: list = [None] * n_layers

    @property
    def occupancy(self) -> int:
        return len(self.frames)

    def append(self, frame_index: int, kv_rows: list) -> None:
        if self.frames and frame_index <= self.frames[-1]:
            raise ValueError(f"cache commit out of order: frame {frame_index} "
                             f"after {self.frames[-1]}")
        self.frames.append(frame_index)
        for layer, (k, v) in enumerate(kv_rows):
            if self.keys[layer] is None:
                self.keys[layer], self.values[layer] = k, v
            else:
                self.keys[layer] = concat_rows(self.keys[layer], k)
                self.values[layer] = concat_rows(self.values[layer], v)
        if len(self.frames) > self.capacity:
            self.frames.pop(0)
            for layer in range(self.n_layers):
                n = self.keys[layer].shape[0]
                self.keys[layer] = slice_rows(self.keys[layer], 1, n)
                self.values[layer] = slice_rows(self.values[layer], 1, n)

    def snapshot(self) -> "KvCache":
        """Detached deep copy (tracked rows are frozen to their values)."""
        out = KvCache(self.capacity, self.n_layers)
        out.frames = list(self.frames)
        for layer in range(self.n_layers):
            if self.keys[layer] is not None:
                k, v = self.keys[layer], self.values[layer]
                out.keys[layer] = (k.data if isinstance(k, Tensor) else k).copy()
                out.values[layer] = (v.data if isinstance(v, Tensor) else v).copy()
        return out


def _single_token_forward(params, cfg: NetConfig, fr: FrameInputs, cache: KvCache,
                          collect_kv: bool = False, with_head: bool = True):
    side = cfg.side
    xs = _flatten(fr.x, side)
    ctrls = np.asarray(fr.ctrl).reshape(1, side * side)
    refs = np.asarray(fr.ref).reshape(1, side * side)
    h = _embed_rows(params, cfg, xs, ctrls, refs, [fr.t], [fr.index])
    kv = [] if collect_kv else None
    for layer in range(cfg.layers):
        h = _block(params, layer, h, None, cfg.width, kv_out=kv, cache=cache)
    out = None
    if with_head:
        out = reshape(_head(params, cfg, h, xs, ctrls, [fr.t]), (side, side))
    return out, kv


def student_velocity(params, cfg: NetConfig, x, ctrl, ref, t: float, frame_index: int,
                     cache: KvCache) -> Tensor:
    """Causal velocity for one frame: the query token attends to the cached
    clean-frame tokens plus itself. The cache is not mutated."""
    if cache.frames and cache.frames[-1] >= frame_index:
        raise ValueError(f"cache holds frame {cache.frames[-1]} >= query frame {frame_index}")
    fr = FrameInputs(x=x, ctrl=ctrl, ref=ref, t=t, index=frame_index)
    out, _ = _single_token_forward(params, cfg, fr, cache)
    return out


def cache_commit(params, cfg: NetConfig, cache: KvCache, frame_index: int,
                 clean_frame, ctrl, ref, *, step_index: int, n_steps: int) -> KvCache:
    """Append the fully denoised frame's keys/values (token embedded at
    t = 1), evicting the oldest occupant when past capacity."""
    if step_index != n_steps:
        raise ValueError(f"cache_commit requires the final denoising step "
                         f"(got step {step_index} of {n_steps})")
    fr = FrameInputs(x=clean_frame, ctrl=ctrl, ref=ref, t=1.0, index=frame_index)
    _, kv = _single_token_forward(params, cfg, fr, cache, collect_kv=True, with_head=False)
    cache.append(frame_index, kv)
    return cache
