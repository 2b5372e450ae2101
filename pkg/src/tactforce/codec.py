"""Dual-codebook vector-quantized force encoder/decoder.

Pressure-map windows and wrench windows get separate MLP encoders, separate
codebooks and separate decoders. The force code fed to the alignment loss is
the concatenation of the two selected codewords, passed straight-through so
encoders receive downstream gradients while codebooks only learn through the
codebook term of the quantization loss.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn
from sklearn.cluster import KMeans

from .data import GRID


def mlp(in_dim: int, hidden: int, out_dim: int, n_hidden: int = 2) -> nn.Sequential:
    layers, d = [], in_dim
    for _ in range(n_hidden):
        layers += [nn.Linear(d, hidden), nn.GELU()]
        d = hidden
    layers.append(nn.Linear(d, out_dim))
    return nn.Sequential(*layers)


class ForceEncoder(nn.Module):
    """Flattens an (N, *frame_shape) window and maps it to a latent vector.

    A parameter-free layer norm fixes the latent scale so codewords and
    latents stay commensurate under a shared optimizer step size.
    """

    def __init__(self, in_dim: int, out_dim: int, hidden: int = 256, zero_init: bool = False,
                 normalize: bool = True):
        super().__init__()
        self.net = mlp(in_dim, hidden, out_dim)
        self.norm = nn.LayerNorm(out_dim, elementwise_affine=False) if normalize else nn.Identity()
        if zero_init:
            nn.init.zeros_(self.net[-1].weight)
            nn.init.zeros_(self.net[-1].bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(self.net(x.flatten(1)))


class ForceDecoder(nn.Module):
    def __init__(self, code_dim: int, out_shape: tuple[int, ...], hidden: int = 256):
        super().__init__()
        self.out_shape = tuple(out_shape)
        self.net = mlp(code_dim, hidden, int(np.prod(out_shape)))

    def forward(self, c: torch.Tensor) -> torch.Tensor:
        return self.net(c).view(-1, *self.out_shape)


class Codebook(nn.Module):
    """K learnable codewords with running usage statistics."""

    def __init__(self, n_codes: int, dim: int, generator: torch.Generator | None = None):
        super().__init__()
        if n_codes < 2:
            raise ValueError("a codebook needs at least two codewords")
        self.codewords = nn.Parameter(torch.randn(n_codes, dim, generator=generator))
        self.register_buffer("usage_counts", torch.zeros(n_codes, dtype=torch.float64))
        self.register_buffer("idle_steps", torch.zeros(n_codes, dtype=torch.long))

    @property
    def n_codes(self) -> int:
        return self.codewords.shape[0]

    def nearest(self, z: torch.Tensor) -> torch.Tensor:
        """Index of the nearest codeword for each row of ``z``; ties go to the lowest index."""
        if z.shape[-1] != self.codewords.shape[1]:
            raise ValueError(f"latent dim {z.shape[-1]} does not match codebook dim {self.codewords.shape[1]}")
        dist = ((z.detach()[:, None, :] - self.codewords.detach()[None, :, :]) ** 2).sum(-1)
        return torch.argmin(dist, dim=1)

    def forward(self, z: torch.Tensor, track: bool = True):
        idx = self.nearest(z)
        if track:
            self.record_usage(idx)
        return self.codewords[idx], idx

    @torch.no_grad()
    def record_usage(self, idx: torch.Tensor):
        counts = torch.bincount(idx, minlength=self.n_codes).to(self.usage_counts.dtype)
        self.usage_counts += counts
        self.idle_steps += 1
        self.idle_steps[counts > 0] = 0

    @torch.no_grad()
    def revive_dead(self, latents: torch.Tensor, max_idle: int, generator: torch.Generator | None = None) -> int:
        """Reseed codewords idle for ``max_idle`` steps with random recent latents."""
        dead = torch.nonzero(self.idle_steps >= max_idle).flatten()
        if len(dead) == 0 or len(latents) == 0:
            return 0
        pick = torch.randint(0, len(latents), (len(dead),), generator=generator)
        self.codewords[dead] = latents.detach()[pick].to(self.codewords.dtype)
        self.idle_steps[dead] = 0
        return len(dead)

    @torch.no_grad()
    def reset_usage(self):
        self.usage_counts.zero_()

    def perplexity(self) -> float:
        return codebook_perplexity(self.usage_counts)


def quantize(z, book: Codebook):
    """Nearest codeword to a single latent vector: returns (codeword, index)."""
    z = torch.as_tensor(z, dtype=book.codewords.dtype)
    if book.n_codes == 0:
        raise ValueError("empty codebook")
    c, idx = book(z.reshape(1, -1))
    return c[0], int(idx[0])


def straight_through(z: torch.Tensor, codeword: torch.Tensor) -> torch.Tensor:
    """Forward value is the codeword; the backward pass is the identity onto ``z``."""
    if z.shape != codeword.shape:
        raise ValueError("latent and codeword shapes differ")
    return z + (codeword - z).detach()


def quant_loss(z_p, z_w, c_p, c_w, beta: float = 0.25) -> torch.Tensor:
    """Codebook term plus beta-weighted commitment term, summed over both modalities.

    Squared norms are summed over the latent dim and averaged over the batch.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    total = 0.0
    for z, c in ((z_p, c_p), (z_w, c_w)):
        codebook_term = ((z.detach() - c) ** 2).sum(-1)
        commitment = ((z - c.detach()) ** 2).sum(-1)
        total = total + (codebook_term + beta * commitment).mean()
    return total


def recon_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Sum of squared errors over a window, averaged over the batch."""
    if pred.shape != target.shape:
        raise ValueError(f"reconstruction shape {tuple(pred.shape)} != target {tuple(target.shape)}")
    return ((pred - target) ** 2).flatten(1).sum(-1).mean()


def codebook_perplexity(usage) -> float:
    """exp(entropy) of the empirical code-usage distribution."""
    if isinstance(usage, Codebook):
        usage = usage.usage_counts
    counts = np.asarray(torch.as_tensor(usage).detach().cpu(), dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("perplexity needs at least one recorded usage")
    p = counts[counts > 0] / total
    return float(math.exp(-(p * np.log(p)).sum()))


def kmeans_codewords(latents: np.ndarray, n_codes: int, seed: int = 0) -> tuple[np.ndarray, bool]:
    """Codewords from 10 seeded k-means iterations; falls back to unit-scale random rows.

    Returns (codewords, used_fallback).
    """
    latents = np.asarray(latents, dtype=np.float64)
    if len(latents) < n_codes:
        raise ValueError(f"need at least {n_codes} latents to initialise {n_codes} codes")
    distinct = np.unique(latents.round(12), axis=0)
    if len(distinct) < n_codes:
        rng = np.random.default_rng(seed)
        return rng.standard_normal((n_codes, latents.shape[1])), True
    km = KMeans(n_clusters=n_codes, n_init=1, max_iter=10, random_state=seed).fit(latents)
    return km.cluster_centers_, False


def init_codebooks(z_p, z_w, n_codes_p: int, n_codes_w: int, seed: int = 0) -> tuple[Codebook, Codebook]:
    """Build both codebooks from a first batch of latents (k-means per modality)."""
    books = []
    for z, k in ((z_p, n_codes_p), (z_w, n_codes_w)):
        z = np.asarray(torch.as_tensor(z).detach().cpu())
        centers, _ = kmeans_codewords(z, k, seed)
        book = Codebook(k, z.shape[1])
        with torch.no_grad():
            book.codewords.copy_(torch.as_tensor(centers, dtype=book.codewords.dtype))
        books.append(book)
    return books[0], books[1]


class ForceCodec(nn.Module):
    """Encoders, codebooks and decoders for (pressure, wrench) windows.

    With ``shared=True`` the two latents are concatenated and quantized
    against one codebook of size ``n_codes_p + n_codes_w``.
    """

    def __init__(self, window: int = 5, code_dim_p: int = 64, code_dim_w: int = 64,
                 n_codes_p: int = 32, n_codes_w: int = 32, hidden: int = 256, shared: bool = False):
        super().__init__()
        self.window, self.shared = window, shared
        self.code_dim_p, self.code_dim_w = code_dim_p, code_dim_w
        self.enc_p = ForceEncoder(window * GRID * GRID, code_dim_p, hidden)
        self.enc_w = ForceEncoder(window * 6, code_dim_w, hidden)
        self.dec_p = ForceDecoder(code_dim_p, (window, GRID, GRID), hidden)
        self.dec_w = ForceDecoder(code_dim_w, (window, 6), hidden)
        if shared:
            self.books = nn.ModuleList([Codebook(n_codes_p + n_codes_w, code_dim_p + code_dim_w)])
        else:
            self.books = nn.ModuleList([Codebook(n_codes_p, code_dim_p), Codebook(n_codes_w, code_dim_w)])

    @property
    def code_dim(self) -> int:
        return self.code_dim_p + self.code_dim_w

    def encode(self, pmaps: torch.Tensor, wrenches: torch.Tensor):
        if pmaps.shape[1:] != (self.window, GRID, GRID) or wrenches.shape[1:] != (self.window, 6):
            raise ValueError(f"expected windows of length {self.window}: got pmaps {tuple(pmaps.shape)}, "
                             f"wrenches {tuple(wrenches.shape)}")
        return self.enc_p(pmaps), self.enc_w(wrenches)

    def select(self, z_p: torch.Tensor, z_w: torch.Tensor, track: bool = True):
        """Selected codewords (with codebook gradient) and indices per modality."""
        if self.shared:
            c, idx = self.books[0](torch.cat([z_p, z_w], dim=1), track)
            return c[:, :self.code_dim_p], c[:, self.code_dim_p:], idx, idx
        c_p, i_p = self.books[0](z_p, track)
        c_w, i_w = self.books[1](z_w, track)
        return c_p, c_w, i_p, i_w

    def decode(self, q_p: torch.Tensor, q_w: torch.Tensor):
        return self.dec_p(q_p), self.dec_w(q_w)

    def forward(self, pmaps: torch.Tensor, wrenches: torch.Tensor, track: bool = True) -> dict:
        z_p, z_w = self.encode(pmaps, wrenches)
        c_p, c_w, i_p, i_w = self.select(z_p, z_w, track)
        q_p, q_w = straight_through(z_p, c_p), straight_through(z_w, c_w)
        rec_p, rec_w = self.decode(q_p, q_w)
        return dict(z_p=z_p, z_w=z_w, c_p=c_p, c_w=c_w, idx_p=i_p, idx_w=i_w,
                    code=torch.cat([q_p, q_w], dim=1), rec_p=rec_p, rec_w=rec_w)

    @torch.no_grad()
    def init_from_latents(self, z_p: torch.Tensor, z_w: torch.Tensor, seed: int = 0):
        groups = [torch.cat([z_p, z_w], 1)] if self.shared else [z_p, z_w]
        for book, z in zip(self.books, groups):
            centers, _ = kmeans_codewords(z.cpu().numpy(), book.n_codes, seed)
            book.codewords.copy_(torch.as_tensor(centers, dtype=book.codewords.dtype))
