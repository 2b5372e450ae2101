"""Window storage, batch sampling and optimizer plumbing shared by the learners."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch

from .data import Episode, Normalization


class FrameStore:
    """Normalized frames of many episodes, addressed by global window start.

    Windows are gathered on demand so overlapping stride-1 windows are never
    materialized.
    """

    def __init__(self, episodes: Sequence[Episode], norm: Normalization, window: int,
                 dtype: torch.dtype = torch.float32):
        self.window = window
        self.episodes = list(episodes)
        lengths = np.array([len(ep) for ep in self.episodes])
        self.offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        self.n_starts = np.maximum(lengths - window + 1, 0)
        self.images = torch.as_tensor(
            np.concatenate([norm.normalize_image(ep.images) for ep in self.episodes]), dtype=dtype)
        self.pmaps = torch.as_tensor(
            np.concatenate([norm.normalize_pmap(ep.pmaps) for ep in self.episodes]), dtype=dtype)
        self.wrenches = torch.as_tensor(
            np.concatenate([norm.normalize_wrench(ep.wrenches) for ep in self.episodes]), dtype=dtype)
        self.raw_wrenches = np.concatenate([ep.wrenches for ep in self.episodes])
        self._sampleable = np.flatnonzero(self.n_starts > 0)

    def starts(self, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Global starts of every window at ``stride``, plus their episode index."""
        g, e = [], []
        for k in range(len(self.episodes)):
            s = np.arange(0, self.n_starts[k], stride)
            g.append(self.offsets[k] + s)
            e.append(np.full(len(s), k))
        return np.concatenate(g), np.concatenate(e)

    def gather(self, starts: np.ndarray):
        idx = torch.as_tensor(np.asarray(starts)[:, None] + np.arange(self.window)[None, :])
        return self.images[idx], self.pmaps[idx], self.wrenches[idx]

    def final_raw_wrench(self, starts: np.ndarray) -> np.ndarray:
        return self.raw_wrenches[np.asarray(starts) + self.window - 1]

    def sample(self, rng: np.random.Generator, batch_size: int, min_gap: int | None = None) -> np.ndarray:
        """Uniform over episodes, then over starts; same-episode picks stay ``min_gap`` apart."""
        gap = self.window if min_gap is None else min_gap
        picks: dict[int, list[int]] = {}
        out = []
        while len(out) < batch_size:
            for _ in range(100):
                k = int(self._sampleable[rng.integers(len(self._sampleable))])
                s = int(rng.integers(self.n_starts[k]))
                if all(abs(s - o) >= gap for o in picks.get(k, ())):
                    break
            picks.setdefault(k, []).append(s)
            out.append(self.offsets[k] + s)
        return np.asarray(out)


def cosine_lr(step: int, total: int, base: float, warmup: int = 100, floor: float = 0.05) -> float:
    if step < warmup:
        return base * (step + 1) / warmup
    frac = (step - warmup) / max(1, total - warmup)
    return base * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * min(1.0, frac))))


def set_lr(opt: torch.optim.Optimizer, lr: float):
    for group in opt.param_groups:
        group["lr"] = lr


def seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g
