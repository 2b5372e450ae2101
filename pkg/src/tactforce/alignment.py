"""Contrastive tactile-force alignment: losses, training loop and the adapter estimator."""

from __future__ import annotations

import logging
import time
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.linear_model import Ridge
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.utils.validation import check_is_fitted

from .codec import ForceCodec, codebook_perplexity, quant_loss, recon_loss
from .data import IMAGE_SIZE, Episode, Normalization, compute_normalization, split_episodes
from .errors import ConfigError, NumericalError
from .tactile import TactileEncoder
from .training import FrameStore, cosine_lr, seeded_generator, set_lr
from .validation import check_episodes, check_force_windows, check_image_windows

logger = logging.getLogger(__name__)


def info_nce_symmetric(Z: torch.Tensor, C: torch.Tensor, temperature: float = 0.07) -> torch.Tensor:
    """Mean of the tactile->force and force->tactile InfoNCE losses on cosine logits."""
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    zn, cn = Z.norm(dim=1, keepdim=True), C.norm(dim=1, keepdim=True)
    if bool((zn == 0).any()) or bool((cn == 0).any()):
        raise NumericalError("zero-norm embedding row: cosine similarity undefined")
    logits = (Z / zn) @ (C / cn).T / temperature
    target = torch.arange(len(Z))
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


class AdapterNet(torch.nn.Module):
    """Force codec and tactile encoder sharing one code space."""

    def __init__(self, window=5, code_dim_p=64, code_dim_w=64, n_codes_p=32, n_codes_w=32,
                 force_hidden=256, shared_codebook=False, embed_dim=64, patch_size=8, depth=2,
                 heads=4, temporal_depth=2, temporal_heads=4, image_size=IMAGE_SIZE):
        super().__init__()
        self.codec = ForceCodec(window, code_dim_p, code_dim_w, n_codes_p, n_codes_w, force_hidden,
                                shared_codebook)
        self.tactile = TactileEncoder(window, image_size, patch_size, embed_dim, depth, heads,
                                      temporal_depth, temporal_heads, out_dim=self.codec.code_dim)


def total_loss(net: AdapterNet, images, pmaps, wrenches, temperature=0.07, lambda_quant=1.0,
               lambda_recon=1.0, beta=0.25, track=True):
    """L_NCE + lambda_quant * L_quant + lambda_recon * L_recon, with the components."""
    out = net.codec(pmaps, wrenches, track=track)
    z = net.tactile(images)
    l_nce = info_nce_symmetric(z, out["code"], temperature)
    l_quant = quant_loss(out["z_p"], out["z_w"], out["c_p"], out["c_w"], beta)
    l_recon = recon_loss(out["rec_p"], pmaps) + recon_loss(out["rec_w"], wrenches)
    total = l_nce + lambda_quant * l_quant + lambda_recon * l_recon
    parts = {"l_nce": l_nce, "l_quant": l_quant, "l_recon": l_recon, "l_total": total}
    return total, parts, out, z


@torch.no_grad()
def rank_of_true_pair(Z: torch.Tensor, C: torch.Tensor, metric: str = "cosine") -> torch.Tensor:
    """For each row, the number of candidate codes strictly more similar than the true one.

    Exact ties with the true code therefore count in its favour. ``metric`` is
    ``cosine`` or ``euclidean`` (negative squared distance).
    """
    if metric == "cosine":
        sim = F.normalize(Z, dim=1) @ F.normalize(C, dim=1).T
    elif metric == "euclidean":
        sim = -torch.cdist(Z, C) ** 2
    else:
        raise ValueError(f"unknown metric {metric!r}")
    true = sim.diagonal()[:, None]
    return (sim > true).sum(dim=1)


def retrieval_from_embeddings(Z: np.ndarray, C: np.ndarray, batch_size: int = 64, seed: int = 0,
                              metric: str = "cosine"):
    """Top-1 / top-5 over shuffled batches of ``batch_size`` (remainder dropped)."""
    Z, C = torch.as_tensor(Z, dtype=torch.float64), torch.as_tensor(C, dtype=torch.float64)
    if len(Z) < batch_size:
        raise ValueError(f"need at least {batch_size} windows for retrieval, got {len(Z)}")
    order = np.random.default_rng(seed).permutation(len(Z))
    ranks = []
    for b in range(len(Z) // batch_size):
        idx = torch.as_tensor(order[b * batch_size:(b + 1) * batch_size])
        ranks.append(rank_of_true_pair(Z[idx], C[idx], metric))
    ranks = torch.cat(ranks)
    return float((ranks < 1).double().mean()), float((ranks < 5).double().mean())


class TactileForceAdapter(TransformerMixin, BaseEstimator):
    """Aligns tactile image windows with vector-quantized force windows.

    ``fit`` takes a list of episodes, splits them by episode (90/10, seeded),
    and trains all parts jointly. ``transform`` maps (M, N, H, W) image windows
    to window embeddings; ``encode_force`` maps force windows to their codes.

    Parameters
    ----------
    window : int
        Frames per window (N).
    n_codes_p, n_codes_w : int
        Codebook sizes for the pressure and wrench modalities.
    shared_codebook : bool
        Quantize the concatenated latents against one codebook of size
        ``n_codes_p + n_codes_w`` instead of two.
    temperature : float
        Fixed InfoNCE temperature.
    lambda_quant, lambda_recon, beta : float
        Loss weights and commitment weight.
    dead_code_steps : int
        Codewords unused this many consecutive steps are reseeded.
    """

    def __init__(self, window=5, n_codes_p=32, n_codes_w=32, code_dim_p=64, code_dim_w=64,
                 force_hidden=256, shared_codebook=False, embed_dim=64, patch_size=8, depth=2,
                 heads=4, temporal_depth=2, temporal_heads=4, temperature=0.07, lambda_quant=1.0,
                 lambda_recon=1.0, beta=0.25, batch_size=64, n_steps=5000, learning_rate=1e-3,
                 weight_decay=0.0, dead_code_steps=500, val_fraction=0.1, log_every=50,
                 random_state=0):
        self.window = window
        self.n_codes_p = n_codes_p
        self.n_codes_w = n_codes_w
        self.code_dim_p = code_dim_p
        self.code_dim_w = code_dim_w
        self.force_hidden = force_hidden
        self.shared_codebook = shared_codebook
        self.embed_dim = embed_dim
        self.patch_size = patch_size
        self.depth = depth
        self.heads = heads
        self.temporal_depth = temporal_depth
        self.temporal_heads = temporal_heads
        self.temperature = temperature
        self.lambda_quant = lambda_quant
        self.lambda_recon = lambda_recon
        self.beta = beta
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.dead_code_steps = dead_code_steps
        self.val_fraction = val_fraction
        self.log_every = log_every
        self.random_state = random_state

    def _validate_params(self):
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.batch_size < 2:
            raise ConfigError("contrastive training needs batch_size >= 2")
        if self.lambda_quant < 0 or self.lambda_recon < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.window < 1 or self.n_steps < 1:
            raise ConfigError("window and n_steps must be >= 1")
        if self.batch_size < max(self.n_codes_p, self.n_codes_w) * (2 if self.shared_codebook else 1):
            raise ConfigError("the first batch must hold at least as many latents as codewords")

    def _build(self) -> AdapterNet:
        return AdapterNet(self.window, self.code_dim_p, self.code_dim_w, self.n_codes_p,
                          self.n_codes_w, self.force_hidden, self.shared_codebook, self.embed_dim,
                          self.patch_size, self.depth, self.heads, self.temporal_depth,
                          self.temporal_heads)

    def fit(self, X: Sequence[Episode], y=None, callback: Callable[[dict], None] | None = None):
        self._validate_params()
        episodes = check_episodes(X, self.window)
        train_eps, val_eps = split_episodes(episodes, self.val_fraction, self.random_state)
        ids = {id(e) for e in val_eps}
        self.val_index_ = [i for i, e in enumerate(episodes) if id(e) in ids]
        self.normalization_ = compute_normalization(train_eps)
        torch.manual_seed(self.random_state)
        self.net_ = self._build()
        rng = np.random.default_rng(self.random_state)
        gen = seeded_generator(self.random_state + 1)
        store = FrameStore(train_eps, self.normalization_, self.window)
        probe = None
        if val_eps:
            vstore = FrameStore(val_eps, self.normalization_, self.window)
            vstarts, _ = vstore.starts(stride=self.window)
            if len(vstarts) >= self.batch_size:
                pick = np.random.default_rng(self.random_state + 2).choice(len(vstarts), self.batch_size,
                                                                           replace=False)
                probe = vstore.gather(np.sort(vstarts[pick]))

        net = self.net_
        first = store.gather(store.sample(rng, self.batch_size))
        with torch.no_grad():
            z_p, z_w = net.codec.encode(first[1], first[2])
        net.codec.init_from_latents(z_p, z_w, self.random_state)
        opt = torch.optim.Adam(net.parameters(), lr=self.learning_rate, weight_decay=self.weight_decay)

        self.history_ = []
        t0 = time.perf_counter()
        for step in range(self.n_steps):
            net.train()
            set_lr(opt, cosine_lr(step, self.n_steps, self.learning_rate))
            images, pmaps, wrenches = store.gather(store.sample(rng, self.batch_size))
            loss, parts, out, _ = total_loss(net, images, pmaps, wrenches, self.temperature,
                                             self.lambda_quant, self.lambda_recon, self.beta)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss at step {step}: "
                                     + ", ".join(f"{k}={float(v.detach()):.4g}" for k, v in parts.items()))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            self._revive(out, gen)
            if (step + 1) % self.log_every == 0 or step == self.n_steps - 1:
                rec = {"step": step + 1, **{k: float(v.detach()) for k, v in parts.items()}}
                for name, book in zip(self._book_names(), net.codec.books):
                    rec[f"perplexity_{name}"] = book.perplexity()
                    book.reset_usage()
                if probe is not None:
                    net.eval()
                    with torch.no_grad():
                        z = net.tactile(probe[0])
                        enc = net.codec(probe[1], probe[2], track=False)
                        code = torch.cat([enc["c_p"], enc["c_w"]], 1)
                    rec["probe_top1"] = float((rank_of_true_pair(z, code) < 1).double().mean())
                rec["wall_s"] = time.perf_counter() - t0
                self.history_.append(rec)
                logger.debug("adapter step %d: %s", step + 1, rec)
                if callback is not None:
                    callback(rec)
        net.eval()
        return self

    def _book_names(self):
        return ["shared"] if self.shared_codebook else ["p", "w"]

    def _revive(self, out: dict, gen: torch.Generator):
        books = self.net_.codec.books
        if self.shared_codebook:
            books[0].revive_dead(torch.cat([out["z_p"], out["z_w"]], 1), self.dead_code_steps, gen)
        else:
            books[0].revive_dead(out["z_p"], self.dead_code_steps, gen)
            books[1].revive_dead(out["z_w"], self.dead_code_steps, gen)

    # inference -----------------------------------------------------------------

    def _images_tensor(self, X):
        X = check_image_windows(X, self.window, IMAGE_SIZE)
        return torch.as_tensor(self.normalization_.normalize_image(X), dtype=torch.float32)

    def transform(self, X, chunk: int = 512) -> np.ndarray:
        """Window embeddings (M, d) for image windows (M, N, H, W) in [0, 1]."""
        check_is_fitted(self, "net_")
        x = self._images_tensor(X)
        self.net_.eval()
        with torch.no_grad():
            out = [self.net_.tactile(x[i:i + chunk]) for i in range(0, len(x), chunk)]
        return torch.cat(out).numpy() if out else np.zeros((0, self.net_.codec.code_dim), np.float32)

    def encode_force(self, pmaps, wrenches, chunk: int = 512) -> dict:
        """Quantized force codes for raw (un-normalized) force windows.

        Returns ``code`` (M, d), ``idx_p``, ``idx_w``, the continuous latents
        ``z_p``, ``z_w`` and the reconstructions in raw units.
        """
        check_is_fitted(self, "net_")
        pmaps, wrenches = check_force_windows(pmaps, wrenches, self.window)
        norm = self.normalization_
        pm = torch.as_tensor(norm.normalize_pmap(pmaps), dtype=torch.float32)
        wr = torch.as_tensor(norm.normalize_wrench(wrenches), dtype=torch.float32)
        parts = []
        self.net_.eval()
        with torch.no_grad():
            for i in range(0, len(pm), chunk):
                parts.append(self.net_.codec(pm[i:i + chunk], wr[i:i + chunk], track=False))
        keys = ["code", "idx_p", "idx_w", "z_p", "z_w", "rec_p", "rec_w"]
        res = {k: torch.cat([p[k] for p in parts]).numpy() for k in keys}
        # the exact codewords, free of the straight-through rounding residue
        res["code"] = torch.cat([torch.cat([p["c_p"], p["c_w"]], 1) for p in parts]).numpy()
        res["rec_p"] = norm.denormalize_pmap(res["rec_p"])
        res["rec_w"] = norm.denormalize_wrench(res["rec_w"])
        return res

    def window_arrays(self, episodes: Sequence[Episode], stride: int | None = None):
        """Image, pressure and wrench windows of ``episodes`` at ``stride`` (default: disjoint)."""
        from .data import stack_windows
        wb = stack_windows(episodes, self.window, stride or self.window)
        return wb

    def retrieval(self, episodes: Sequence[Episode], batch_size: int = 64, seed: int = 0,
                  stride: int | None = None):
        """(top1, top5) retrieval of each window's force code among ``batch_size`` candidates."""
        wb = self.window_arrays(episodes, stride)
        Z = self.transform(wb.images)
        C = self.encode_force(wb.pmaps, wb.wrenches)["code"]
        return retrieval_from_embeddings(Z, C, batch_size, seed)

    def code_perplexity(self, episodes: Sequence[Episode]) -> dict[str, float]:
        wb = self.window_arrays(episodes, stride=1)
        enc = self.encode_force(wb.pmaps, wb.wrenches)
        if self.shared_codebook:
            k = self.n_codes_p + self.n_codes_w
            return {"shared": codebook_perplexity(np.bincount(enc["idx_p"], minlength=k))}
        return {"p": codebook_perplexity(np.bincount(enc["idx_p"], minlength=self.n_codes_p)),
                "w": codebook_perplexity(np.bincount(enc["idx_w"], minlength=self.n_codes_w))}

    def reconstruction_error(self, episodes: Sequence[Episode]) -> float:
        """Mean per-window squared reconstruction error in normalized units (both modalities)."""
        wb = self.window_arrays(episodes, stride=1)
        enc = self.encode_force(wb.pmaps, wb.wrenches)
        norm = self.normalization_
        ep = norm.normalize_pmap(enc["rec_p"]) - norm.normalize_pmap(wb.pmaps.astype(np.float64))
        ew = norm.normalize_wrench(enc["rec_w"]) - norm.normalize_wrench(wb.wrenches)
        return float((ep**2).reshape(len(ep), -1).sum(1).mean() + (ew**2).reshape(len(ew), -1).sum(1).mean())

    def score(self, X, y=None) -> float:
        """Held-out style retrieval top-1 at batch 64 on the given episodes."""
        return self.retrieval(X)[0]


def fit_wrench_probe(Z: np.ndarray, W: np.ndarray, alpha: float = 1.0):
    """Ridge probe from frozen embeddings to wrenches (standardized inputs)."""
    return make_pipeline(StandardScaler(), Ridge(alpha=alpha)).fit(Z, W)


def wrench_rmse(pred: np.ndarray, target: np.ndarray) -> float:
    """sqrt of the mean squared Euclidean wrench error (physical units)."""
    return float(np.sqrt(((np.asarray(pred) - np.asarray(target)) ** 2).sum(axis=1).mean()))


def probe_features(adapter: TactileForceAdapter, episodes: Sequence[Episode], stride: int = 1):
    """Embeddings of every window and the final-frame wrench each should predict."""
    from .data import stack_windows
    wb = stack_windows(episodes, adapter.window, stride)
    return adapter.transform(wb.images), wb.wrenches[:, -1]
