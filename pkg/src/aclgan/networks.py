"""Generators, multi-scale discriminators and the paired consistency discriminator.

Layouts follow the content/style auto-encoder family: an image encoder with
instance norm and residual blocks, a noise encoder that pools to a d_z vector,
and a decoder whose residual blocks are modulated by AdaIN parameters produced
from the noise vector by an MLP.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import torch
import torch.nn.functional as F
from torch import nn

from .core import Hyperparameters, composite_with_mask


@dataclass(frozen=True)
class GeneratorConfig:
    base_channels: int = 64
    n_downsample: int = 2
    n_res_blocks: int = 4
    d_z: int = 8
    mask_head: bool = True
    style_downsample: int = 4
    mlp_dim: int = 256
    mask_init_bias: float = 0.0

    @property
    def factor(self) -> int:
        return 2 ** max(self.n_downsample, self.style_downsample)


@dataclass(frozen=True)
class DiscriminatorConfig:
    n_scales: int = 3
    base_channels: int = 64
    n_layers: int = 4
    paired_input: bool = False

    @property
    def in_channels(self) -> int:
        return 6 if self.paired_input else 3

    @property
    def min_size(self) -> int:
        """Smallest input side that leaves a 1x1 map at the deepest scale."""
        return 2 ** (self.n_scales - 1 + self.n_layers)


class LayerNorm(nn.Module):
    """Per-sample normalisation over (C, H, W) with per-channel affine."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        flat = x.flatten(1)
        mean = flat.mean(1).view(-1, 1, 1, 1)
        std = flat.std(1).view(-1, 1, 1, 1)
        x = (x - mean) / (std + self.eps)
        return x * self.gamma.view(1, -1, 1, 1) + self.beta.view(1, -1, 1, 1)


class AdaptiveInstanceNorm(nn.Module):
    """Instance norm whose scale and shift are assigned before each forward."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.weight: torch.Tensor | None = None
        self.bias: torch.Tensor | None = None

    def forward(self, x):
        if self.weight is None or self.bias is None:
            raise RuntimeError("AdaIN parameters not assigned")
        x = F.instance_norm(x, eps=self.eps)
        return x * self.weight[:, :, None, None] + self.bias[:, :, None, None]


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "in":
        return nn.InstanceNorm2d(channels)
    if kind == "ln":
        return LayerNorm(channels)
    if kind == "adain":
        return AdaptiveInstanceNorm(channels)
    return nn.Identity()


def _activation(kind: str) -> nn.Module:
    return {
        "relu": nn.ReLU(),
        "lrelu": nn.LeakyReLU(0.2),
        "tanh": nn.Tanh(),
        "none": nn.Identity(),
    }[kind]


class ConvBlock(nn.Sequential):
    def __init__(self, cin, cout, kernel, stride, padding, norm="none", activation="relu"):
        super().__init__(
            nn.ReflectionPad2d(padding),
            nn.Conv2d(cin, cout, kernel, stride),
            _norm(norm, cout),
            _activation(activation),
        )


class ResBlock(nn.Module):
    def __init__(self, channels: int, norm: str):
        super().__init__()
        self.body = nn.Sequential(
            ConvBlock(channels, channels, 3, 1, 1, norm, "relu"),
            ConvBlock(channels, channels, 3, 1, 1, norm, "none"),
        )

    def forward(self, x):
        return x + self.body(x)


class ImageEncoder(nn.Sequential):
    def __init__(self, cfg: GeneratorConfig):
        dim = cfg.base_channels
        layers = [ConvBlock(3, dim, 7, 1, 3, "in")]
        for _ in range(cfg.n_downsample):
            layers.append(ConvBlock(dim, 2 * dim, 4, 2, 1, "in"))
            dim *= 2
        layers += [ResBlock(dim, "in") for _ in range(cfg.n_res_blocks)]
        super().__init__(*layers)
        self.out_channels = dim


class NoiseEncoder(nn.Module):
    """Maps an image to a d_z noise vector (style-encoder layout)."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        dim = cfg.base_channels
        layers = [ConvBlock(3, dim, 7, 1, 3)]
        for i in range(cfg.style_downsample):
            grow = i < 2
            layers.append(ConvBlock(dim, 2 * dim if grow else dim, 4, 2, 1))
            dim = 2 * dim if grow else dim
        layers += [nn.AdaptiveAvgPool2d(1), nn.Conv2d(dim, cfg.d_z, 1)]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x).flatten(1)


class MLP(nn.Sequential):
    def __init__(self, din: int, dout: int, hidden: int):
        super().__init__(
            nn.Linear(din, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Linear(hidden, dout),
        )


class Decoder(nn.Module):
    def __init__(self, cfg: GeneratorConfig, in_channels: int):
        super().__init__()
        dim = in_channels
        layers = [ResBlock(dim, "adain") for _ in range(cfg.n_res_blocks)]
        for _ in range(cfg.n_downsample):
            layers += [nn.Upsample(scale_factor=2), ConvBlock(dim, dim // 2, 5, 1, 2, "ln")]
            dim //= 2
        out = 4 if cfg.mask_head else 3
        layers.append(ConvBlock(dim, out, 7, 1, 3, "none", "none"))
        self.model = nn.Sequential(*layers)
        self.adain = [m for m in self.model.modules() if isinstance(m, AdaptiveInstanceNorm)]
        self.n_adain_params = sum(2 * m.channels for m in self.adain)

    @property
    def head(self) -> nn.Conv2d:
        """Final convolution; channel 3, when present, carries the mask logits."""
        return self.model[-1][1]

    def assign_adain(self, params: torch.Tensor) -> None:
        for m in self.adain:
            m.bias = params[:, : m.channels]
            m.weight = params[:, m.channels : 2 * m.channels]
            params = params[:, 2 * m.channels :]

    def forward(self, content, adain_params):
        self.assign_adain(adain_params)
        return self.model(content)


class Generator(nn.Module):
    """Image encoder + noise encoder + AdaIN decoder, optionally with a mask head."""

    def __init__(self, cfg: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.cfg = cfg
        self.enc_content = ImageEncoder(cfg)
        self.enc_noise = NoiseEncoder(cfg)
        self.dec = Decoder(cfg, self.enc_content.out_channels)
        self.mlp = MLP(cfg.d_z, self.dec.n_adain_params, cfg.mlp_dim)

    def _check_image(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected images of shape (B, 3, H, W), got {tuple(x.shape)}")
        f = self.cfg.factor
        if x.shape[2] % f or x.shape[3] % f:
            raise ValueError(f"image side {tuple(x.shape[2:])} not divisible by {f}")

    def forward(self, x, z):
        """Return (rgb in [-1, 1], mask in [0, 1] or None) before compositing."""
        self._check_image(x)
        if z.dim() != 2 or z.shape != (x.shape[0], self.cfg.d_z):
            raise ValueError(f"noise shape {tuple(z.shape)} != {(x.shape[0], self.cfg.d_z)}")
        out = self.dec(self.enc_content(x), self.mlp(z))
        if not self.cfg.mask_head:
            return torch.tanh(out), None
        return torch.tanh(out[:, :3]), torch.sigmoid(out[:, 3:])

    def encode_noise(self, x):
        self._check_image(x)
        return self.enc_noise(x)

    def translate(self, x, z):
        """Composited output: generated pixels under the mask, source elsewhere."""
        rgb, mask = self(x, z)
        if mask is None:
            return rgb, None
        return composite_with_mask(rgb, mask, x), mask


class PatchDiscriminator(nn.Sequential):
    def __init__(self, cin: int, dim: int, n_layers: int):
        layers = [ConvBlock(cin, dim, 4, 2, 1, "none", "lrelu")]
        for _ in range(n_layers - 1):
            layers.append(ConvBlock(dim, 2 * dim, 4, 2, 1, "none", "lrelu"))
            dim *= 2
        layers.append(nn.Conv2d(dim, 1, 1))
        super().__init__(*layers)


class MultiScaleDiscriminator(nn.Module):
    """One patch discriminator per scale; scale s sees the input pooled s times."""

    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.cfg = cfg
        self.downsample = nn.AvgPool2d(3, stride=2, padding=1, count_include_pad=False)
        self.nets = nn.ModuleList(
            PatchDiscriminator(cfg.in_channels, cfg.base_channels, cfg.n_layers)
            for _ in range(cfg.n_scales)
        )

    def forward(self, x) -> list[torch.Tensor]:
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (B, {self.cfg.in_channels}, H, W), got {tuple(x.shape)}")
        if min(x.shape[2:]) < self.cfg.min_size:
            raise ValueError(
                f"input {tuple(x.shape[2:])} too small for {self.cfg.n_scales} scales "
                f"(need side >= {self.cfg.min_size})"
            )
        maps = []
        for net in self.nets:
            maps.append(net(x))
            x = self.downsample(x)
        return maps


def discriminator_forward(d: MultiScaleDiscriminator, image) -> list[torch.Tensor]:
    return d(image)


def consistency_forward(dhat: MultiScaleDiscriminator, reference, candidate) -> list[torch.Tensor]:
    """Score a (reference, candidate) pair by channel concatenation."""
    if reference.shape != candidate.shape:
        raise ValueError(f"pair shapes differ: {tuple(reference.shape)} vs {tuple(candidate.shape)}")
    return dhat(torch.cat([reference, candidate], dim=1))


def init_weights(module: nn.Module, kind: str) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            if kind == "kaiming":
                nn.init.kaiming_normal_(m.weight, a=0, mode="fan_in")
            else:
                nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


@dataclass
class ModelSet:
    g_S: Generator
    g_T: Generator
    d_S: MultiScaleDiscriminator
    d_T: MultiScaleDiscriminator
    d_hat: MultiScaleDiscriminator

    NAMES = ("g_S", "g_T", "d_S", "d_T", "d_hat")

    def items(self):
        return [(name, getattr(self, name)) for name in self.NAMES]

    def generators(self):
        return [self.g_S, self.g_T]

    def discriminators(self):
        return [self.d_S, self.d_T, self.d_hat]

    def to(self, *args, **kwargs) -> "ModelSet":
        for _, m in self.items():
            m.to(*args, **kwargs)
        return self


def configs_from_hparams(h: Hyperparameters) -> tuple[GeneratorConfig, DiscriminatorConfig]:
    g = GeneratorConfig(
        base_channels=h.base_channels,
        n_downsample=h.n_downsample,
        n_res_blocks=h.n_res_blocks,
        d_z=h.d_z,
        mask_head=h.masked,
        style_downsample=h.style_downsample,
        mlp_dim=h.mlp_dim,
        mask_init_bias=h.mask_init_bias,
    )
    d = DiscriminatorConfig(n_scales=h.n_scales, base_channels=h.dis_base_channels, n_layers=h.dis_n_layers)
    return g, d


def build_models(h: Hyperparameters, seed: int = 0) -> ModelSet:
    """Construct and initialise all five networks deterministically from ``seed``."""
    gcfg, dcfg = configs_from_hparams(h)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        models = ModelSet(
            g_S=Generator(gcfg),
            g_T=Generator(gcfg),
            d_S=MultiScaleDiscriminator(dcfg),
            d_T=MultiScaleDiscriminator(dcfg),
            d_hat=MultiScaleDiscriminator(DiscriminatorConfig(dcfg.n_scales, dcfg.base_channels, dcfg.n_layers, True)),
        )
        for g in models.generators():
            init_weights(g, "kaiming")
            if gcfg.mask_head:
                with torch.no_grad():
                    g.dec.head.bias[3] = gcfg.mask_init_bias
        for d in models.discriminators():
            init_weights(d, "gaussian")
    return models


def count_parameters(models: ModelSet | nn.Module | Iterable[nn.Module]) -> int:
    """Total trainable scalars across the given networks."""
    if isinstance(models, ModelSet):
        modules = [m for _, m in models.items()]
    elif isinstance(models, nn.Module):
        modules = [models]
    else:
        modules = list(models)
    return sum(p.numel() for m in modules for p in m.parameters() if p.requires_grad)
