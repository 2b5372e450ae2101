"""Central finite-difference gradient oracles for the differentiable modules (double precision)."""

import numpy as np
import torch

from tactforce.alignment import AdapterNet, info_nce_symmetric, total_loss
from tactforce.codec import ForceDecoder, ForceEncoder, recon_loss
from tactforce.policy import VelocityNet, fm_loss
from tactforce.tactile import FrameEncoder, TemporalEncoder

EPS = 1e-6
WIDTH = 8


def fd_relative_error(fn, tensors, seed, n_coords=24, eps=EPS):
    """||analytic - numeric|| / max norm over randomly chosen coordinates of ``tensors``."""
    tensors = list(tensors)
    analytic = torch.autograd.grad(fn(), tensors, allow_unused=True)
    rng = np.random.default_rng(seed)
    a_vals, n_vals = [], []
    for t, g in zip(tensors, analytic):
        g = torch.zeros_like(t) if g is None else g
        flat = t.data.view(-1)
        for i in rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                up = fn().item()
                flat[i] = orig - eps
                down = fn().item()
                flat[i] = orig
            n_vals.append((up - down) / (2 * eps))
            a_vals.append(g.reshape(-1)[i].item())
    a, n = np.array(a_vals), np.array(n_vals)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


def _weights(shape, gen):
    return torch.randn(shape, generator=gen, dtype=torch.float64)


def _params(module):
    return [p for p in module.parameters() if p.requires_grad]


def check_force_encoder(seed):
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    enc = ForceEncoder(3 * 6, WIDTH, hidden=WIDTH).double()
    x = _weights((4, 3, 6), gen).requires_grad_()
    w = _weights((4, WIDTH), gen)
    return fd_relative_error(lambda: (enc(x) * w).sum(), [x, *_params(enc)], seed)


def check_force_decoder(seed):
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    dec = ForceDecoder(WIDTH, (3, 4, 4), hidden=WIDTH).double()
    c = _weights((4, WIDTH), gen).requires_grad_()
    target = _weights((4, 3, 4, 4), gen)
    return fd_relative_error(lambda: recon_loss(dec(c), target), [c, *_params(dec)], seed)


def check_patch_encoder(seed):
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    enc = FrameEncoder(image_size=8, patch_size=4, embed_dim=WIDTH, depth=1, heads=2).double()
    x = _weights((3, 8, 8), gen).requires_grad_()
    w = _weights((3, WIDTH), gen)
    return fd_relative_error(lambda: (enc(x) * w).sum(), [x, *_params(enc)], seed)


def check_causal_transformer(seed):
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    enc = TemporalEncoder(window=4, embed_dim=WIDTH, depth=2, heads=2, out_dim=6).double()
    h = _weights((3, 4, WIDTH), gen).requires_grad_()
    w = _weights((3, 6), gen)
    return fd_relative_error(lambda: (enc(h) * w).sum(), [h, *_params(enc)], seed, n_coords=10)


def check_policy_net(seed):
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    net = VelocityNet(horizon=4, z_dim=3, hidden=WIDTH, n_blocks=2).double()
    a = _weights((5, 4), gen).requires_grad_()
    tau = torch.rand(5, generator=gen, dtype=torch.float64)
    obs = {"ctx": torch.randint(0, 3, (5,), generator=gen), "z": _weights((5, 3), gen), "q": _weights((5, 3), gen)}
    w = _weights((5, 4), gen)
    return fd_relative_error(lambda: (net(a, tau, obs) * w).sum(), [a, *_params(net)], seed)


def check_fm_loss(seed):
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    net = VelocityNet(horizon=4, z_dim=0, hidden=WIDTH, n_blocks=1).double()
    actions = _weights((6, 4), gen).requires_grad_()
    tau = torch.rand(6, generator=gen, dtype=torch.float64)
    noise = _weights((6, 4), gen)
    obs = {"ctx": torch.randint(0, 3, (6,), generator=gen), "q": _weights((6, 3), gen)}
    return fd_relative_error(lambda: fm_loss(net, obs, actions, tau=tau, noise=noise),
                             [actions, *_params(net)], seed)


def _tiny_adapter(seed):
    torch.manual_seed(seed)
    net = AdapterNet(window=2, code_dim_p=4, code_dim_w=4, n_codes_p=3, n_codes_w=3, force_hidden=WIDTH,
                     embed_dim=WIDTH, patch_size=16, depth=1, heads=2, temporal_depth=1, temporal_heads=2).double()
    gen = torch.Generator().manual_seed(seed)
    images = torch.rand((4, 2, 32, 32), generator=gen, dtype=torch.float64)
    pmaps = _weights((4, 2, 12, 12), gen)
    wrenches = _weights((4, 2, 6), gen)
    return net, images, pmaps, wrenches


def check_total_loss(seed, beta=0.25, lam_q=0.7, lam_r=1.3):
    """Autograd of the real L_total against finite differences of an oracle in which every
    stop-gradient operand and the straight-through offset are frozen at the base point."""
    net, images, pmaps, wrenches = _tiny_adapter(seed)
    codec = net.codec
    with torch.no_grad():
        base = codec(pmaps, wrenches, track=False)
    z_p0, z_w0 = base["z_p"].clone(), base["z_w"].clone()
    c_p0, c_w0 = base["c_p"].clone(), base["c_w"].clone()
    i_p, i_w = base["idx_p"], base["idx_w"]

    def oracle():
        z_p, z_w = codec.encode(pmaps, wrenches)
        c_p, c_w = codec.books[0].codewords[i_p], codec.books[1].codewords[i_w]
        q_p, q_w = z_p + (c_p0 - z_p0), z_w + (c_w0 - z_w0)
        l_nce = info_nce_symmetric(net.tactile(images), torch.cat([q_p, q_w], 1), 0.07)
        l_quant = sum((((z0 - c) ** 2).sum(-1) + beta * ((z - cc) ** 2).sum(-1)).mean()
                      for z0, c, z, cc in ((z_p0, c_p, z_p, c_p0), (z_w0, c_w, z_w, c_w0)))
        rec_p, rec_w = codec.decode(q_p, q_w)
        l_recon = ((rec_p - pmaps) ** 2).flatten(1).sum(-1).mean() + ((rec_w - wrenches) ** 2).flatten(1).sum(-1).mean()
        return l_nce + lam_q * l_quant + lam_r * l_recon

    params = _params(net)
    loss, parts, _, _ = total_loss(net, images, pmaps, wrenches, 0.07, lam_q, lam_r, beta, track=False)
    # the oracle reproduces the forward value exactly at the base point
    assert abs(loss.item() - oracle().item()) <= 1e-12 * max(1.0, abs(loss.item())), (loss.item(), oracle().item())
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    oracle_grad = torch.autograd.grad(oracle(), params, allow_unused=True)
    for a, o in zip(analytic, oracle_grad):
        if (a is None) != (o is None):
            return float("inf")
        if a is not None and not torch.allclose(a, o, atol=1e-12, rtol=1e-10):
            return float("inf")
    return fd_relative_error(oracle, params, seed, n_coords=6)


CHECKS = {
    "force_encoder": check_force_encoder,
    "force_decoder": check_force_decoder,
    "patch_encoder": check_patch_encoder,
    "causal_transformer": check_causal_transformer,
    "policy_net": check_policy_net,
    "total_loss": check_total_loss,
    "fm_loss": check_fm_loss,
}
