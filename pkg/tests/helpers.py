"""Stub networks, tiny configurations and independent arithmetic oracles."""

from __future__ import annotations

from types import SimpleNamespace

import torch
from torch import nn

from aclgan.core import PRESETS, composite_with_mask
from aclgan.networks import DiscriminatorConfig, GeneratorConfig

TINY_G = GeneratorConfig(base_channels=2, n_downsample=1, n_res_blocks=1, d_z=2, mask_head=True,
                         style_downsample=2, mlp_dim=4)
TINY_D = DiscriminatorConfig(n_scales=2, base_channels=2, n_layers=1)

# Whole-model settings small enough for finite differences on 8x8 images.
TINY_H = PRESETS["toy"].replace(
    image_size=8, load_size=8, base_channels=2, n_downsample=1, n_res_blocks=1, d_z=2, style_downsample=2,
    mlp_dim=4, dis_base_channels=2, dis_n_layers=1, n_scales=2,
)

# The toy preset shrunk so a couple of hundred iterations take seconds.
SMALL_TOY = PRESETS["toy"].replace(
    image_size=16, load_size=16, base_channels=4, n_res_blocks=1, mlp_dim=8, dis_base_channels=4, dis_n_layers=2,
    n_scales=2, total_iters=200, checkpoint_every=100, log_every=20, sample_every=100,
)


class StubGenerator(nn.Module):
    """Generator stand-in: output = fn(x), mask = mask_fn(x) (or absent)."""

    def __init__(self, fn=lambda x: x, mask_fn=None, d_z: int = 8):
        super().__init__()
        self.fn = fn
        self.mask_fn = mask_fn
        self.w = nn.Parameter(torch.zeros(()))
        self.cfg = SimpleNamespace(d_z=d_z)

    def forward(self, x, z):
        out = self.fn(x) + 0 * self.w
        mask = None if self.mask_fn is None else self.mask_fn(x) + 0 * self.w
        return out, mask

    def translate(self, x, z):
        out, mask = self(x, z)
        if mask is None:
            return out, None
        return composite_with_mask(out, mask, x), mask

    def encode_noise(self, x):
        return torch.zeros(x.shape[0], self.cfg.d_z) + 0 * self.w


class StubDiscriminator(nn.Module):
    """Scores every image with score_fn(x) on two 'scales'; has a dead parameter."""

    def __init__(self, score_fn, paired: bool = False):
        super().__init__()
        self.score_fn = score_fn
        self.w = nn.Parameter(torch.zeros(()))
        self.cfg = SimpleNamespace(in_channels=6 if paired else 3)

    def forward(self, x):
        s = self.score_fn(x).view(-1, 1, 1, 1).to(x.dtype)
        return [s.expand(-1, 1, 2, 2) + 0 * self.w + 0 * x.sum(), s.expand(-1, 1, 1, 1) + 0 * self.w + 0 * x.sum()]


def const_image(value, n=1, size=4, channels=3, dtype=torch.float64):
    return torch.full((n, channels, size, size), float(value), dtype=dtype)


# ------------------------------------------------------------ scalar oracles
# Plain-Python loops over nested lists; nothing here touches torch reductions.


def _flat(t):
    return [float(v) for v in t.detach().reshape(-1).tolist()]


def oracle_mean_sq(maps, target):
    per_map = []
    for m in maps:
        vals = _flat(m)
        per_map.append(sum((v - target) ** 2 for v in vals) / len(vals))
    return sum(per_map) / len(per_map)


def oracle_lsgan_d(real, fakes):
    return oracle_mean_sq(real, 1.0) + sum(oracle_mean_sq(f, 0.0) for f in fakes) / len(fakes)


def oracle_lsgan_g(fakes):
    return sum(oracle_mean_sq(f, 1.0) for f in fakes) / len(fakes)


def oracle_mae(a, b):
    x, y = _flat(a), _flat(b)
    return sum(abs(p - q) for p, q in zip(x, y)) / len(x)


def oracle_mask_single(values, delta, delta_min, delta_max, eps):
    w = len(values)
    s = sum(values)
    over = max(s - delta_max * w, 0.0)
    under = max(delta_min * w - s, 0.0)
    recip = sum(1.0 / (abs(v - 0.5) + eps) for v in values)
    return (delta * (over**2 + under**2) + recip) / w


def oracle_mask_loss(batches, h):
    per = []
    for batch in batches:
        for sample in batch:
            per.append(oracle_mask_single(_flat(sample), h.delta, h.delta_min, h.delta_max, h.epsilon))
    return sum(per) / len(per)


# ------------------------------------------------------------ parameter oracle


def conv(ci, co, k):
    return ci * co * k * k + co


def linear(i, o):
    return i * o + o


def generator_param_oracle(base, n_down, n_res, style_down, mlp, d_z, out_channels):
    total = conv(3, base, 7)
    c = base
    for _ in range(n_down):
        total += conv(c, 2 * c, 4)
        c *= 2
    total += n_res * 2 * conv(c, c, 3)
    # noise encoder
    total += conv(3, base, 7)
    d = base
    for i in range(style_down):
        nxt = 2 * d if i < 2 else d
        total += conv(d, nxt, 4)
        d = nxt
    total += conv(d, d_z, 1)
    # decoder
    total += n_res * 2 * conv(c, c, 3)
    n_adain = n_res * 2 * 2 * c
    for _ in range(n_down):
        total += conv(c, c // 2, 5) + 2 * (c // 2)
        c //= 2
    total += conv(c, out_channels, 7)
    total += linear(d_z, mlp) + linear(mlp, mlp) + linear(mlp, n_adain)
    return total


def discriminator_param_oracle(cin, base, n_layers, n_scales):
    per = conv(cin, base, 4)
    c = base
    for _ in range(n_layers - 1):
        per += conv(c, 2 * c, 4)
        c *= 2
    per += conv(c, 1, 1)
    return n_scales * per


def model_param_oracle(h):
    out = 4 if h.masked else 3
    g = generator_param_oracle(h.base_channels, h.n_downsample, h.n_res_blocks, h.style_downsample, h.mlp_dim, h.d_z, out)
    d = discriminator_param_oracle(3, h.dis_base_channels, h.dis_n_layers, h.n_scales)
    d_hat = discriminator_param_oracle(6, h.dis_base_channels, h.dis_n_layers, h.n_scales)
    return 2 * g + 2 * d + d_hat


# ------------------------------------------------------------ finite differences


BETA = 2.0


class SmoothLeaky(nn.Module):
    """Smooth stand-in for LeakyReLU(slope)."""

    def __init__(self, slope=0.2, beta=BETA):
        super().__init__()
        self.slope = slope
        self.soft = nn.Softplus(beta)

    def forward(self, x):
        return self.slope * x + (1 - self.slope) * self.soft(x)


def smooth_activations(module):
    """Swap ReLU and LeakyReLU for softplus versions, in place."""
    for name, child in module.named_children():
        if isinstance(child, nn.ReLU):
            setattr(module, name, SmoothLeaky(0.0))
        elif isinstance(child, nn.LeakyReLU):
            setattr(module, name, SmoothLeaky(child.negative_slope))
        else:
            smooth_activations(child)
    return module


def tiny_float64_models(seed=0, mask_bias=4.0, smooth=True):
    """Tiny networks in float64.

    Piecewise-linear activations are made smooth so that a finite-difference
    step of 1e-3 does not straddle a kink. The mask bias keeps every mask pixel
    away from 0.5, where the binarisation term has one.
    """
    from aclgan.networks import build_models

    models = build_models(TINY_H, seed).to(torch.float64)
    if smooth:
        for _, m in models.items():
            smooth_activations(m)
    if mask_bias is not None:
        with torch.no_grad():
            for g in models.generators():
                g.dec.head.bias[3] = mask_bias
    return models


def gradient_check(loss_fn, params, n_coords=12, step=1e-3, seed=0):
    """Compare autograd with central differences on sampled coordinates.

    Coordinates are drawn among entries whose analytic gradient is at least
    1% of the largest one. Returns (max relative error, number checked).
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    flat = [(i, j, float(g.reshape(-1)[j])) for i, g in enumerate(grads) if g is not None
            for j in range(g.numel())]
    biggest = max(abs(v) for _, _, v in flat)
    candidates = [c for c in flat if abs(c[2]) >= 1e-2 * biggest]
    rng = torch.Generator().manual_seed(seed)
    picks = torch.randperm(len(candidates), generator=rng)[:n_coords].tolist()
    worst = 0.0
    with torch.no_grad():
        for k in picks:
            i, j, analytic = candidates[k]
            view = params[i].view(-1)
            orig = float(view[j])
            view[j] = orig + step
            up = float(loss_fn())
            view[j] = orig - step
            down = float(loss_fn())
            view[j] = orig
            numeric = (up - down) / (2 * step)
            worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric)))
    return worst, len(picks)


def gradient_suite(seed=0, n_coords=12, step=1e-3, smooth=True):
    """Relative FD error for every loss against the weights it trains.

    Returns {loss name: (max relative error, coordinates checked)}.
    """
    from aclgan import losses
    from aclgan.networks import discriminator_forward as fwd
    from aclgan.training import build_translation_graph

    models = tiny_float64_models(seed, smooth=smooth)
    h = TINY_H
    g = torch.Generator().manual_seed(seed + 100)
    # Binary +-1 pixels: generator outputs sit strictly inside (-1, 1), so the
    # L1 identity term never changes sign within a finite-difference step.
    x_S = torch.randint(0, 2, (2, 3, 8, 8), generator=g).to(torch.float64) * 2 - 1
    x_T = torch.randint(0, 2, (2, 3, 8, 8), generator=g).to(torch.float64) * 2 - 1

    def bundle():
        return build_translation_graph(models.g_S, models.g_T, x_S, x_T, torch.Generator().manual_seed(seed))

    fixed = bundle().detached()
    lo = min(float((m - 0.5).abs().min()) for m in fixed.masks.values())
    assert lo > 0.05, f"mask pixel within {lo} of 0.5"

    def params(*mods):
        return [p for m in mods for p in m.parameters()]

    def gen_total():
        b = bundle()
        adv_T = losses.lsgan_g([fwd(models.d_T, b.x_bar_T)])
        adv_S = losses.lsgan_g([fwd(models.d_S, b.x_hat_S), fwd(models.d_S, b.x_tilde_S)])
        acl = losses.acl_g(models.d_hat, b.x_S, b.x_hat_S, b.x_tilde_S)
        idt = losses.identity_loss(b.x_S, b.x_idt_S, b.x_T, b.x_idt_T)
        mask = losses.mask_loss(list(b.masks.values()), h)
        return losses.total_generator_loss(adv_T, adv_S, acl, idt, mask, h)[0]

    checks = {
        "lsgan_d (D_T)": (lambda: losses.lsgan_d(fwd(models.d_T, fixed.x_T), [fwd(models.d_T, fixed.x_bar_T)]),
                          params(models.d_T)),
        "lsgan_d (D_S)": (lambda: losses.lsgan_d(fwd(models.d_S, fixed.x_S),
                                                 [fwd(models.d_S, fixed.x_hat_S), fwd(models.d_S, fixed.x_tilde_S)]),
                          params(models.d_S)),
        "lsgan_g (G_T)": (lambda: losses.lsgan_g([fwd(models.d_T, bundle().x_bar_T)]), params(models.g_T)),
        "acl_d (D_hat)": (lambda: losses.acl_d(models.d_hat, fixed.x_S, fixed.x_hat_S, fixed.x_tilde_S),
                          params(models.d_hat)),
        "acl_g (G_S, G_T)": (lambda: (lambda b: losses.acl_g(models.d_hat, b.x_S, b.x_hat_S, b.x_tilde_S))(bundle()),
                             params(models.g_S, models.g_T)),
        "identity (G_S, G_T)": (lambda: (lambda b: losses.identity_loss(b.x_S, b.x_idt_S, b.x_T, b.x_idt_T))(bundle()),
                                params(models.g_S, models.g_T)),
        "mask (G_S, G_T)": (lambda: losses.mask_loss(list(bundle().masks.values()), h), params(models.g_S, models.g_T)),
        "total (G_S, G_T)": (gen_total, params(models.g_S, models.g_T)),
    }
    return {name: gradient_check(fn, ps, n_coords, step, seed) for name, (fn, ps) in checks.items()}
