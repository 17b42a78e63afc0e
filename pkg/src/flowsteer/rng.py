"""Counter-based random streams with deterministic, addressable substreams.

Every random draw in the pipeline comes from a Philox generator keyed by a
hash of (seed, purpose, indices...). Substreams are independent of each
other and of consumption order, which is what makes train/infer rollouts,
serving, and replay bit-identical: drawing for frame 7 never disturbs the
draws for frame 8.
"""
from __future__ import annotations

import hashlib

import numpy as np


def substream(*keys) -> np.random.Generator:
    """A fresh Generator uniquely determined by the key tuple."""
    h = hashlib.blake2b(digest_size=16)
    for k in keys:
        if isinstance(k, (bool, np.bool_)):
            part = f"b:{int(k)}"
        elif isinstance(k, (int, np.integer)):
            part = f"i:{int(k)}"
        elif isinstance(k, str):
            part = f"s:{k}"
        elif isinstance(k, float):
            part = f"f:{k!r}"
        else:
            raise TypeError(f"unsupported substream key type {type(k).__name__}")
        h.update(part.encode("utf-8"))
        h.update(b"\x1f")
    key = int.from_bytes(h.digest(), "little")
    return np.random.Generator(np.random.Philox(key=key))


class RolloutRng:
    """Addressable per-frame streams for one video rollout.

    Purposes are disjoint, so e.g. the train-mode supervision-step draw does
    not perturb the state-affecting noise draws (train == infer bit-exactly).
    The attempt counter supports regenerate-with-fresh-noise: attempt 0 is
    the canonical rollout, higher attempts are regenerations.
    """

    def __init__(self, seed: int, *tags):
        self.seed = int(seed)
        self.tags = tuple(tags)

    def stream(self, purpose: str, *ids) -> np.random.Generator:
        return substream(self.seed, *self.tags, purpose, *ids)

    def init_noise(self, frame: int, shape: tuple[int, ...], attempt: int = 0) -> np.ndarray:
        return self.stream("init", frame, attempt).standard_normal(shape)

    def ref_noise(self, frame: int, shape: tuple[int, ...], attempt: int = 0) -> np.ndarray:
        return self.stream("ref", frame, attempt).standard_normal(shape)

    def supervision_step(self, frame: int, n_steps: int) -> int:
        return int(self.stream("flag", frame).integers(0, n_steps))

    def stochastic_step(self, frame: int, n_choices: int) -> int:
        return int(self.stream("sde-step", frame).integers(0, n_choices))

    def sde_noise(self, frame: int, shape: tuple[int, ...], attempt: int = 0) -> np.ndarray:
        return self.stream("sde-eps", frame, attempt).standard_normal(shape)
