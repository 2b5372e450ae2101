"""Explicit force regression from tactile windows, the comparison point for cross-sensor transfer."""

from __future__ import annotations

import time
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .data import GRID, IMAGE_SIZE, Episode, compute_normalization, split_episodes, stack_windows
from .errors import ConfigError, NumericalError
from .tactile import TactileEncoder
from .training import FrameStore, cosine_lr, set_lr
from .validation import check_episodes, check_image_windows


class RegressionNet(torch.nn.Module):
    def __init__(self, window=5, embed_dim=64, patch_size=8, depth=2, heads=4, temporal_depth=2,
                 temporal_heads=4):
        super().__init__()
        self.window = window
        self.trunk = TactileEncoder(window, IMAGE_SIZE, patch_size, embed_dim, depth, heads,
                                    temporal_depth, temporal_heads, out_dim=None)
        self.wrench_head = torch.nn.Linear(embed_dim, window * 6)
        self.pmap_head = torch.nn.Linear(embed_dim, window * GRID * GRID)

    def forward(self, images):
        h = self.trunk(images)
        return (self.wrench_head(h).view(-1, self.window, 6),
                self.pmap_head(h).view(-1, self.window, GRID, GRID))


class ForceRegressionBaseline(RegressorMixin, BaseEstimator):
    """Regresses the window's wrench and pressure sequences directly from tactile images.

    The trunk is the same architecture as the adapter's tactile encoder and is
    trained with the same sampler, step count and batch size.
    ``predict`` returns the final-frame wrench in physical units.
    """

    def __init__(self, window=5, embed_dim=64, patch_size=8, depth=2, heads=4, temporal_depth=2,
                 temporal_heads=4, batch_size=64, n_steps=5000, learning_rate=1e-3,
                 val_fraction=0.1, log_every=50, random_state=0):
        self.window = window
        self.embed_dim = embed_dim
        self.patch_size = patch_size
        self.depth = depth
        self.heads = heads
        self.temporal_depth = temporal_depth
        self.temporal_heads = temporal_heads
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.learning_rate = learning_rate
        self.val_fraction = val_fraction
        self.log_every = log_every
        self.random_state = random_state

    def fit(self, X: Sequence[Episode], y=None, callback=None):
        if self.batch_size < 1 or self.n_steps < 1:
            raise ConfigError("batch_size and n_steps must be >= 1")
        episodes = check_episodes(X, self.window)
        train_eps, val_eps = split_episodes(episodes, self.val_fraction, self.random_state)
        ids = {id(e) for e in val_eps}
        self.val_index_ = [i for i, e in enumerate(episodes) if id(e) in ids]
        self.normalization_ = compute_normalization(train_eps)
        torch.manual_seed(self.random_state)
        self.net_ = RegressionNet(self.window, self.embed_dim, self.patch_size, self.depth,
                                  self.heads, self.temporal_depth, self.temporal_heads)
        store = FrameStore(train_eps, self.normalization_, self.window)
        rng = np.random.default_rng(self.random_state)
        opt = torch.optim.Adam(self.net_.parameters(), lr=self.learning_rate)
        self.history_ = []
        t0 = time.perf_counter()
        for step in range(self.n_steps):
            self.net_.train()
            set_lr(opt, cosine_lr(step, self.n_steps, self.learning_rate))
            images, pmaps, wrenches = store.gather(store.sample(rng, self.batch_size))
            pred_w, pred_p = self.net_(images)
            l_w, l_p = F.mse_loss(pred_w, wrenches), F.mse_loss(pred_p, pmaps)
            loss = l_w + l_p
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss at step {step}: mse_wrench={float(l_w):.4g}, "
                                     f"mse_pmap={float(l_p):.4g}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if (step + 1) % self.log_every == 0 or step == self.n_steps - 1:
                rec = {"step": step + 1, "mse_wrench": float(l_w.detach()), "mse_pmap": float(l_p.detach()),
                       "wall_s": time.perf_counter() - t0}
                self.history_.append(rec)
                if callback is not None:
                    callback(rec)
        self.net_.eval()
        return self

    def predict_window(self, X, chunk: int = 512):
        """Wrench (M, N, 6) and pressure (M, N, 12, 12) sequences in physical units."""
        check_is_fitted(self, "net_")
        X = check_image_windows(X, self.window, IMAGE_SIZE)
        x = torch.as_tensor(self.normalization_.normalize_image(X), dtype=torch.float32)
        ws, ps = [], []
        with torch.no_grad():
            for i in range(0, len(x), chunk):
                w, p = self.net_(x[i:i + chunk])
                ws.append(w)
                ps.append(p)
        norm = self.normalization_
        return (norm.denormalize_wrench(torch.cat(ws).double().numpy()),
                norm.denormalize_pmap(torch.cat(ps).double().numpy()))

    def predict(self, X) -> np.ndarray:
        return self.predict_window(X)[0][:, -1]

    def retrieval(self, episodes: Sequence[Episode], batch_size: int = 64, seed: int = 0,
                  stride: int | None = None):
        """(top1, top5) retrieval of each window's true force sequence by nearest prediction.

        Predicted and true (pressure, wrench) windows are compared in normalized
        units, which puts the regressor on the same footing as code retrieval.
        """
        from .alignment import retrieval_from_embeddings
        wb = stack_windows(episodes, self.window, stride or self.window)
        pw, pp = self.predict_window(wb.images)
        norm = self.normalization_

        def flat(p, w):
            return np.concatenate([norm.normalize_pmap(p).reshape(len(p), -1),
                                   norm.normalize_wrench(w).reshape(len(w), -1)], axis=1)

        return retrieval_from_embeddings(flat(pp, pw), flat(wb.pmaps.astype(np.float64), wb.wrenches),
                                         batch_size, seed, metric="euclidean")

    def wrench_rmse(self, episodes: Sequence[Episode], stride: int = 1) -> float:
        from .alignment import wrench_rmse
        wb = stack_windows(episodes, self.window, stride)
        return wrench_rmse(self.predict(wb.images), wb.wrenches[:, -1])
