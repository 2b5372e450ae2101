"""Input validation helpers for the estimators."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.utils.validation import check_array

from .data import GRID, Episode


def check_image_windows(X, window: int, image_size: int) -> np.ndarray:
    """(M, N, H, W) float array of tactile windows with values in [0, 1]."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_2d=False)
    if X.ndim == 3 and window == 1:
        X = X[:, None]
    if X.ndim != 4 or X.shape[1] != window or X.shape[2:] != (image_size, image_size):
        raise ValueError(f"expected image windows of shape (M, {window}, {image_size}, {image_size}), "
                         f"got {X.shape}")
    return X


def check_force_windows(pmaps, wrenches, window: int) -> tuple[np.ndarray, np.ndarray]:
    pmaps = check_array(pmaps, allow_nd=True, dtype=np.float32, ensure_2d=False)
    wrenches = check_array(wrenches, allow_nd=True, dtype=np.float64, ensure_2d=False)
    if pmaps.shape[1:] != (window, GRID, GRID) or wrenches.shape[1:] != (window, 6):
        raise ValueError(f"expected pmaps (M, {window}, {GRID}, {GRID}) and wrenches (M, {window}, 6); "
                         f"got {pmaps.shape} and {wrenches.shape}")
    if len(pmaps) != len(wrenches):
        raise ValueError("pmaps and wrenches differ in window count")
    return pmaps, wrenches


def check_episodes(episodes: Sequence[Episode], window: int) -> list[Episode]:
    episodes = list(episodes)
    if not episodes:
        raise ValueError("no episodes given")
    for ep in episodes:
        if not isinstance(ep, Episode):
            raise TypeError(f"expected Episode, got {type(ep).__name__}")
        for name in ("images", "pmaps", "wrenches"):
            if not np.all(np.isfinite(getattr(ep, name))):
                raise ValueError(f"episode {ep.seed} ({ep.sensor_id}) has non-finite {name}")
    if all(len(ep) < window for ep in episodes):
        raise ValueError(f"no episode holds a window of {window} frames")
    return episodes
