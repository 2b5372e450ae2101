import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from tactforce.codec import (Codebook, ForceCodec, ForceDecoder, ForceEncoder, codebook_perplexity,
                             init_codebooks, kmeans_codewords, quant_loss, quantize, recon_loss,
                             straight_through)


def book_from(rows) -> Codebook:
    rows = torch.as_tensor(rows, dtype=torch.float64)
    b = Codebook(len(rows), rows.shape[1]).double()
    with torch.no_grad():
        b.codewords.copy_(rows)
    return b


class TestQuantize:
    def test_nearest_example(self):
        c, k = quantize([0.2, 0.1], book_from([[0, 0], [1, 1]]))
        assert k == 0 and torch.equal(c, torch.zeros(2, dtype=torch.float64))

    def test_codeword_is_fixed_point(self):
        book = book_from([[0, 0], [1, 1], [3, -1]])
        c, k = quantize([3.0, -1.0], book)
        assert k == 2 and float(((c.detach() - torch.tensor([3.0, -1.0], dtype=torch.float64)) ** 2).sum()) == 0

    def test_tie_goes_to_lowest_index(self):
        assert quantize([0.5, 0.5], book_from([[0, 0], [1, 1]]))[1] == 0
        assert quantize([0.0, 0.0], book_from([[1, 0], [0, 1], [-1, 0]]))[1] == 0

    def test_usage_counted(self):
        book = book_from([[0, 0], [1, 1]])
        quantize([0.9, 0.9], book)
        quantize([0.8, 1.2], book)
        assert book.usage_counts.tolist() == [0.0, 2.0]

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            quantize([0.0, 0.0, 0.0], book_from([[0, 0], [1, 1]]))

    def test_codebook_needs_two_rows(self):
        with pytest.raises(ValueError):
            Codebook(1, 4)


class TestStraightThrough:
    def test_forward_is_codeword(self):
        z = torch.randn(4, 3)
        c = torch.randn(4, 3)
        assert torch.equal(straight_through(z, c), z + (c - z))
        torch.testing.assert_close(straight_through(z, c), c)

    def test_gradient_passes_through(self):
        z = torch.randn(5, 3, dtype=torch.float64, requires_grad=True)
        c = torch.randn(5, 3, dtype=torch.float64, requires_grad=True)
        q = straight_through(z, c)
        (q**2).sum().backward()
        torch.testing.assert_close(z.grad, 2 * c.detach())
        assert c.grad is None or torch.all(c.grad == 0)


class TestQuantLoss:
    def test_zero_when_latents_are_codewords(self):
        z = torch.randn(3, 4)
        assert float(quant_loss(z, z, z.clone(), z.clone())) == 0.0

    def test_direct_evaluation(self):
        zp = torch.tensor([[1.0, 0.0]])
        cp = torch.zeros(1, 2)
        zw = torch.tensor([[0.3, -0.2]])
        assert float(quant_loss(zp, zw, cp, zw.clone(), beta=0.25)) == pytest.approx(1.25)

    def test_stop_gradient_split(self):
        z = torch.randn(1, 3, dtype=torch.float64, requires_grad=True)
        c = torch.randn(1, 3, dtype=torch.float64, requires_grad=True)
        zero = torch.zeros(1, 2, dtype=torch.float64)
        quant_loss(z, zero, c, zero, beta=0.25).backward()
        torch.testing.assert_close(c.grad, 2 * (c - z).detach())
        torch.testing.assert_close(z.grad, 2 * 0.25 * (z - c).detach())

    @given(st.integers(0, 10_000))
    def test_zero_iff_equal(self, seed):
        g = torch.Generator().manual_seed(seed)
        z = torch.randn(2, 3, generator=g, dtype=torch.float64)
        c = z.clone()
        c[seed % 2, seed % 3] += 1e-3
        assert float(quant_loss(z, z, c, z)) > 0

    def test_beta_must_be_positive(self):
        z = torch.zeros(1, 2)
        with pytest.raises(ValueError):
            quant_loss(z, z, z, z, beta=0.0)


class TestRecon:
    def test_zero_decoder_gives_target_energy(self):
        target = torch.randn(6, 5, 12, 12, dtype=torch.float64)
        target = target / target.flatten(1).norm(dim=1)[:, None, None, None]
        dec = ForceDecoder(4, (5, 12, 12), hidden=8).double()
        for p in dec.parameters():
            torch.nn.init.zeros_(p)
        with torch.no_grad():
            out = dec(torch.randn(6, 4, dtype=torch.float64))
        assert float(recon_loss(out, target)) == pytest.approx(float((target**2).flatten(1).sum(1).mean()))

    def test_memorised_codeword_zero_loss(self):
        target = torch.randn(1, 5, 6)
        assert float(recon_loss(target.clone(), target)) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            recon_loss(torch.zeros(2, 5, 6), torch.zeros(2, 4, 6))


class TestPerplexity:
    def test_uniform(self):
        assert codebook_perplexity(np.ones(8)) == pytest.approx(8.0)

    def test_single_code(self):
        assert codebook_perplexity([0, 0, 5, 0]) == 1.0

    def test_entropy_value(self):
        h = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
        assert codebook_perplexity([3, 1]) == pytest.approx(math.exp(h), abs=1e-12)
        assert codebook_perplexity([3, 1]) == pytest.approx(1.7547, abs=1e-4)

    @given(st.lists(st.integers(0, 50), min_size=2, max_size=64).filter(lambda c: sum(c) > 0))
    def test_bounds(self, counts):
        p = codebook_perplexity(counts)
        assert 1 - 1e-12 <= p <= len(counts) + 1e-9

    def test_empty_usage_rejected(self):
        with pytest.raises(ValueError):
            codebook_perplexity([0, 0])


class TestInit:
    def test_separable_clusters_recovered(self):
        rng = np.random.default_rng(0)
        centers = rng.normal(size=(6, 3)) * 10
        latents = np.repeat(centers, 8, axis=0)
        rng.shuffle(latents)
        got, fallback = kmeans_codewords(latents, 6, seed=1)
        assert not fallback
        order = np.lexsort(got.T)
        np.testing.assert_allclose(got[order], centers[np.lexsort(centers.T)], atol=1e-9)

    def test_degenerate_batch_falls_back(self):
        got, fallback = kmeans_codewords(np.ones((40, 3)), 4, seed=0)
        assert fallback and got.shape == (4, 3) and np.all(np.isfinite(got))

    def test_seeded(self):
        z = np.random.default_rng(2).normal(size=(64, 5))
        a, _ = kmeans_codewords(z, 8, seed=3)
        b, _ = kmeans_codewords(z, 8, seed=3)
        np.testing.assert_array_equal(a, b)

    def test_init_codebooks_shapes(self):
        zp, zw = torch.randn(64, 6), torch.randn(64, 4)
        bp, bw = init_codebooks(zp, zw, 8, 16, seed=0)
        assert bp.codewords.shape == (8, 6) and bw.codewords.shape == (16, 4)

    def test_batch_must_cover_codebook(self):
        with pytest.raises(ValueError):
            kmeans_codewords(np.zeros((3, 2)), 4)


class TestEncoders:
    def test_zero_init_gives_zero_latents(self):
        enc = ForceEncoder(5 * 6, 8, hidden=16, zero_init=True, normalize=False)
        assert torch.all(enc(torch.randn(3, 5, 6)) == 0)

    def test_deterministic(self):
        codec = ForceCodec(window=5, code_dim_p=8, code_dim_w=8, n_codes_p=4, n_codes_w=4, hidden=16)
        pm, wr = torch.randn(3, 5, 12, 12), torch.randn(3, 5, 6)
        a, b = codec(pm, wr, track=False), codec(pm, wr, track=False)
        assert torch.equal(a["code"], b["code"])

    def test_code_is_concatenation(self):
        codec = ForceCodec(window=2, code_dim_p=3, code_dim_w=5, n_codes_p=4, n_codes_w=6, hidden=8)
        out = codec(torch.randn(7, 2, 12, 12), torch.randn(7, 2, 6))
        assert out["code"].shape == (7, 8)
        torch.testing.assert_close(out["code"], torch.cat([out["c_p"], out["c_w"]], 1))
        assert out["idx_p"].max() < 4 and out["idx_w"].max() < 6

    def test_shared_book_size(self):
        codec = ForceCodec(window=2, code_dim_p=3, code_dim_w=5, n_codes_p=4, n_codes_w=6, shared=True)
        assert len(codec.books) == 1 and codec.books[0].n_codes == 10
        out = codec(torch.randn(7, 2, 12, 12), torch.randn(7, 2, 6))
        assert torch.equal(out["idx_p"], out["idx_w"])

    def test_window_shape_checked(self):
        codec = ForceCodec(window=5)
        with pytest.raises(ValueError):
            codec(torch.randn(2, 4, 12, 12), torch.randn(2, 4, 6))


def test_dead_codes_revived():
    book = book_from([[0, 0], [5, 5], [9, 9]])
    z = torch.zeros(4, 2, dtype=torch.float64)
    for _ in range(3):
        book(z)
    assert book.revive_dead(z + 1.0, max_idle=3) == 2
    assert torch.all(book.codewords[1:] == 1.0)
    assert torch.all(book.idle_steps == torch.tensor([0, 0, 0]))
