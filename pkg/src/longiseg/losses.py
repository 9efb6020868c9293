"""Training objectives.

Segmentation and registration both use mean squared error, and the
multitask objective is their unweighted sum. The registration term
is MSE(fixed, warp(moving, field)) + lambda * diffusion(field).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import torch

from .warp import warp_image

DEFAULT_LAMBDA = 0.01
DICE_EPS = 1e-7


class SegLossKind(str, enum.Enum):
    MSE = "mse"
    ASYMMETRIC_DICE = "asymmetric_dice"


@dataclass(frozen=True)
class LossConfig:
    lambda_smooth: float = DEFAULT_LAMBDA
    seg_loss_kind: SegLossKind = SegLossKind.MSE
    beta: float = 1.5

    def __post_init__(self):
        object.__setattr__(self, "seg_loss_kind", SegLossKind(self.seg_loss_kind))
        if not self.lambda_smooth >= 0:
            raise ValueError(f"lambda_smooth must be >= 0, got {self.lambda_smooth}")
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def seg_loss_mse(prob: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    _check_same_shape(prob, gt, "seg_loss_mse")
    if not torch.all((gt == 0) | (gt == 1)):
        raise ValueError("seg_loss_mse: ground truth must be binary")
    return torch.mean((prob - gt.to(prob.dtype)) ** 2)


def smoothness_loss(field: torch.Tensor) -> torch.Tensor:
    """Diffusion regularizer: mean of squared forward differences.

    ``field`` is (2, h, w) or (B, 2, h, w). Row differences cover
    (h-1) x w positions and column differences h x (w-1) per component; the
    mean runs over all those entries together. A direction with a single
    sample contributes nothing.
    """
    if field.dim() == 3:
        field = field.unsqueeze(0)
    h, w = field.shape[-2:]
    if h < 2 and w < 2:
        raise ValueError(f"smoothness_loss needs at least 2 samples in one direction, got {h}x{w}")
    total = field.new_zeros(())
    count = 0
    if h >= 2:
        d_row = field[..., 1:, :] - field[..., :-1, :]
        total = total + (d_row ** 2).sum()
        count += d_row.numel()
    if w >= 2:
        d_col = field[..., :, 1:] - field[..., :, :-1]
        total = total + (d_col ** 2).sum()
        count += d_col.numel()
    return total / count


def similarity_loss(x_i: torch.Tensor, x_j: torch.Tensor, field: torch.Tensor) -> torch.Tensor:
    _check_same_shape(x_i, x_j, "registration")
    return torch.mean((x_i - warp_image(x_j, field)) ** 2)


def registration_loss(x_i, x_j, field, cfg: LossConfig = LossConfig(), return_parts: bool = False):
    """MSE(x_i, x_j warped by field) + lambda * smoothness(field)."""
    sim = similarity_loss(x_i, x_j, field)
    smooth = smoothness_loss(field)
    total = sim + cfg.lambda_smooth * smooth
    if return_parts:
        return total, sim, smooth
    return total


def asymmetric_dice_loss(prob: torch.Tensor, gt: torch.Tensor, beta: float = 1.5,
                         eps: float = DICE_EPS) -> torch.Tensor:
    """1 - F_beta on soft counts, eps added to numerator and denominator."""
    if not beta > 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    _check_same_shape(prob, gt, "asymmetric_dice_loss")
    g = gt.to(prob.dtype)
    tp = (prob * g).sum()
    fn = ((1 - prob) * g).sum()
    fp = (prob * (1 - g)).sum()
    b2 = beta * beta
    f_beta = ((1 + b2) * tp + eps) / ((1 + b2) * tp + b2 * fn + fp + eps)
    return 1 - f_beta


def seg_loss(prob, gt, cfg: LossConfig) -> torch.Tensor:
    if cfg.seg_loss_kind is SegLossKind.ASYMMETRIC_DICE:
        return asymmetric_dice_loss(prob, gt, cfg.beta)
    return seg_loss_mse(prob, gt)


@dataclass
class LossParts:
    total: torch.Tensor
    seg: torch.Tensor
    sim: torch.Tensor
    smooth: torch.Tensor

    @property
    def reg(self) -> torch.Tensor:
        return self.total - self.seg

    def as_floats(self) -> dict[str, float]:
        return {"L_total": self.total.item(), "L_seg": self.seg.item(),
                "L_sim": self.sim.item(), "L_smooth": self.smooth.item()}


def multitask_loss(prob, gt, x_i, x_j, field, cfg: LossConfig = LossConfig()) -> LossParts:
    """L_seg + L_reg with unit task weights."""
    l_seg = seg_loss(prob, gt, cfg)
    l_reg, l_sim, l_smooth = registration_loss(x_i, x_j, field, cfg, return_parts=True)
    return LossParts(l_seg + l_reg, l_seg, l_sim, l_smooth)
