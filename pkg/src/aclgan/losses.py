"""Least-squares adversarial, consistency, identity and focus-mask objectives.

Score maps are reduced by a mean over pixels, then a mean over scales, so
magnitudes do not depend on resolution or on the number of scales.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch

from .core import ConfigError, Hyperparameters, LossReport
from .networks import consistency_forward

ScoreMaps = Sequence[torch.Tensor]


def _mean_sq(maps: ScoreMaps, target: float) -> torch.Tensor:
    if len(maps) == 0:
        raise ValueError("empty score-map list")
    return sum(((m - target) ** 2).mean() for m in maps) / len(maps)


def lsgan_d(real_maps: ScoreMaps, fake_map_lists: Sequence[ScoreMaps]) -> torch.Tensor:
    """Discriminator side: real pushed to 1, every fake list pushed to 0.

    Several fake lists are averaged with equal weight.
    """
    if len(fake_map_lists) == 0:
        raise ValueError("need at least one fake score-map list")
    fake = sum(_mean_sq(maps, 0.0) for maps in fake_map_lists) / len(fake_map_lists)
    return _mean_sq(real_maps, 1.0) + fake


def lsgan_g(fake_map_lists: Sequence[ScoreMaps]) -> torch.Tensor:
    if len(fake_map_lists) == 0:
        raise ValueError("need at least one fake score-map list")
    return sum(_mean_sq(maps, 1.0) for maps in fake_map_lists) / len(fake_map_lists)


def _acl_scores(dhat, x_S, x_hat_S, x_tilde_S):
    if not (x_S.shape == x_hat_S.shape == x_tilde_S.shape):
        raise ValueError(
            f"shape mismatch: {tuple(x_S.shape)}, {tuple(x_hat_S.shape)}, {tuple(x_tilde_S.shape)}"
        )
    return consistency_forward(dhat, x_S, x_hat_S), consistency_forward(dhat, x_S, x_tilde_S)


def acl_d(dhat, x_S, x_hat_S, x_tilde_S, swap_labels: bool = False) -> torch.Tensor:
    """Consistency discriminator: (x_S, x_hat_S) labelled real, (x_S, x_tilde_S) fake.

    ``swap_labels`` exchanges the two labels.
    """
    hat, tilde = _acl_scores(dhat, x_S, x_hat_S, x_tilde_S)
    if swap_labels:
        hat, tilde = tilde, hat
    return _mean_sq(hat, 1.0) + _mean_sq(tilde, 0.0)


def acl_g(dhat, x_S, x_hat_S, x_tilde_S, swap_labels: bool = False) -> torch.Tensor:
    """Generator side of the consistency game: the labels are inverted."""
    hat, tilde = _acl_scores(dhat, x_S, x_hat_S, x_tilde_S)
    if swap_labels:
        hat, tilde = tilde, hat
    return _mean_sq(hat, 0.0) + _mean_sq(tilde, 1.0)


def identity_loss(x_S, x_idt_S, x_T, x_idt_T) -> torch.Tensor:
    """Mean absolute reconstruction error of both identity paths, summed."""
    if x_S.shape != x_idt_S.shape or x_T.shape != x_idt_T.shape:
        raise ValueError("identity pairs must share shapes")
    return (x_S - x_idt_S).abs().mean() + (x_T - x_idt_T).abs().mean()


def mask_loss_per_sample(masks: torch.Tensor, h: Hyperparameters) -> torch.Tensor:
    """Bounded focus-mask penalty for a (B, 1, H, W) batch, one value per sample."""
    if not h.epsilon > 0:
        raise ConfigError("epsilon", "must be positive")
    flat = masks.flatten(1)
    n_pixels = flat.shape[1]
    area = flat.sum(1)
    over = torch.clamp(area - h.delta_max * n_pixels, min=0)
    under = torch.clamp(h.delta_min * n_pixels - area, min=0)
    binarise = (1.0 / ((flat - 0.5).abs() + h.epsilon)).sum(1)
    return (h.delta * (over**2 + under**2) + binarise) / n_pixels


def mask_loss(masks: Sequence[torch.Tensor], h: Hyperparameters) -> torch.Tensor:
    """Average bounded focus-mask penalty over every mask in every batch given."""
    if not h.epsilon > 0:
        raise ConfigError("epsilon", "must be positive")
    if len(masks) == 0:
        raise ValueError("no masks given")
    return torch.cat([mask_loss_per_sample(m, h) for m in masks]).mean()


def _value(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def total_generator_loss(adv_T, adv_S, acl, idt, mask, h: Hyperparameters):
    """Weighted total of the generator objectives.

    Returns (total, LossReport). Components may be tensors (the total then
    carries gradients) or plain floats. Ablation switches zero their weight.
    """
    components = {"adv_T": adv_T, "adv_S": adv_S, "acl": acl, "idt": idt, "mask": mask}
    for name, value in components.items():
        if not math.isfinite(_value(value)):
            raise FloatingPointError(f"non-finite loss component {name}={_value(value)}")
    w_acl, w_idt, w_mask = h.effective_lambdas
    total = adv_T + adv_S
    # Skipped terms stay out of the graph so their gradients are exactly zero.
    for weight, term in ((w_acl, acl), (w_idt, idt), (w_mask, mask)):
        if weight:
            total = total + weight * term
    v = {name: _value(value) for name, value in components.items()}
    # Recomputed in float64 so the report satisfies the weighted-sum identity exactly.
    v["total"] = v["adv_T"] + v["adv_S"] + w_acl * v["acl"] + w_idt * v["idt"] + w_mask * v["mask"]
    report = LossReport(**v, weights=(w_acl, w_idt, w_mask))
    return total, report
