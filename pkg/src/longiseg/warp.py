"""Differentiable 2D warping of images by pixel-unit displacement fields.

A field has two components on its channel axis: component 0 displaces rows,
component 1 displaces columns. ``warp_image(img, u)(p)`` is the bilinear
sample of ``img`` at ``p + u(p)``; coordinates leaving the grid are clamped
to the border (replicate padding).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


def _as_batched(x: torch.Tensor, name: str) -> tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ValueError(f"{name} must be (C, h, w) or (B, C, h, w), got {tuple(x.shape)}")


def warp_image(img, field):
    """Warp ``img`` (C, h, w) or (B, C, h, w) by ``field`` (2, h, w) or (B, 2, h, w).

    Accepts numpy arrays or tensors; numpy in gives numpy out.
    """
    as_numpy = isinstance(img, np.ndarray)
    img_t = torch.as_tensor(img)
    field_t = torch.as_tensor(field, dtype=img_t.dtype if img_t.is_floating_point() else None)
    if not img_t.is_floating_point():
        img_t = img_t.to(field_t.dtype if field_t.is_floating_point() else torch.float64)
        field_t = field_t.to(img_t.dtype)
    x, squeeze = _as_batched(img_t, "img")
    u, _ = _as_batched(field_t, "field")
    if u.shape[1] != 2:
        raise ValueError(f"field must have 2 components, got {u.shape[1]}")
    if x.shape[0] != u.shape[0] or x.shape[-2:] != u.shape[-2:]:
        raise ValueError(f"shape mismatch: img {tuple(x.shape)} vs field {tuple(u.shape)}")

    b, c, h, w = x.shape
    rows = torch.arange(h, dtype=u.dtype, device=u.device).view(1, h, 1)
    cols = torch.arange(w, dtype=u.dtype, device=u.device).view(1, 1, w)
    r = torch.clamp(rows + u[:, 0], 0, h - 1)
    q = torch.clamp(cols + u[:, 1], 0, w - 1)

    r0 = torch.floor(r).detach()
    q0 = torch.floor(q).detach()
    fr = (r - r0).unsqueeze(1)
    fq = (q - q0).unsqueeze(1)
    r0 = r0.long()
    q0 = q0.long()
    r1 = torch.clamp(r0 + 1, max=h - 1)
    q1 = torch.clamp(q0 + 1, max=w - 1)

    flat = x.reshape(b, c, h * w)

    def gather(ri, qi):
        idx = (ri * w + qi).reshape(b, 1, h * w).expand(b, c, h * w)
        return torch.gather(flat, 2, idx).reshape(b, c, h, w)

    top = gather(r0, q0) * (1 - fq) + gather(r0, q1) * fq
    bottom = gather(r1, q0) * (1 - fq) + gather(r1, q1) * fq
    out = top * (1 - fr) + bottom * fr
    if squeeze:
        out = out.squeeze(0)
    return out.detach().cpu().numpy() if as_numpy else out


def max_relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-6) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over all entries."""
    a = analytic.detach().double().flatten()
    n = numeric.detach().double().flatten()
    denom = torch.clamp(torch.maximum(a.abs(), n.abs()), min=floor)
    return float(((a - n).abs() / denom).max()) if a.numel() else 0.0


def central_differences(fn, tensor: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of scalar ``fn()`` w.r.t. ``tensor`` (modified in place, restored)."""
    grad = torch.zeros_like(tensor)
    flat = tensor.data.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + eps
            hi = float(fn())
            flat[k] = orig - eps
            lo = float(fn())
            flat[k] = orig
            gflat[k] = (hi - lo) / (2 * eps)
    return grad


@dataclass
class GradcheckReport:
    passed: bool
    max_rel_error_img: float
    max_rel_error_field: float
    worst: str
    tolerance: float = 1e-4


def warp_gradcheck(shape=(4, 4), seed: int = 0, channels: int = 1, field=None,
                   tolerance: float = 1e-4) -> GradcheckReport:
    """Compare autograd gradients of ``sum(warp_image)`` with central differences.

    Runs in float64. The random field is scaled to +-1.5 px and kept off
    integer sampling positions, where bilinear interpolation has kinks.
    """
    h, w = shape
    if h > 8 or w > 8:
        raise ValueError("gradcheck shape must be at most 8x8")
    gen = torch.Generator().manual_seed(seed)
    img = torch.rand(channels, h, w, generator=gen, dtype=torch.float64)
    if field is None:
        u = (torch.rand(2, h, w, generator=gen, dtype=torch.float64) - 0.5) * 3.0
        frac = u - torch.round(u)
        u = torch.where(frac.abs() < 0.05, u + 0.1, u)
    else:
        u = torch.as_tensor(field, dtype=torch.float64).clone()
    img.requires_grad_(True)
    u.requires_grad_(True)
    warp_image(img, u).sum().backward()

    def objective():
        return warp_image(img.detach(), u.detach()).sum()

    num_img = central_differences(objective, img)
    num_field = central_differences(objective, u)
    err_img = max_relative_error(img.grad, num_img)
    err_field = max_relative_error(u.grad, num_field)
    worst_name, worst_err, a, n = max(
        ("img", err_img, img.grad, num_img), ("field", err_field, u.grad, num_field), key=lambda t: t[1]
    )
    k = int(((a - n).abs()).flatten().argmax())
    worst = (f"{worst_name}[{k}]: analytic={a.flatten()[k].item():.6g} "
             f"numeric={n.flatten()[k].item():.6g} rel_err={worst_err:.3g}")
    passed = bool(np.isfinite(err_img) and np.isfinite(err_field) and max(err_img, err_field) < tolerance)
    return GradcheckReport(passed, err_img, err_field, worst, tolerance)
