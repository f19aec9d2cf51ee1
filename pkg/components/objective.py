"""
Masked reconstruction losses and their mode-dependent sum.

All terms are mean squared errors normalized by the feature width and the
number of selected rows, computed per sample and then averaged over the
batch. Targets are used as given; no per-patch normalization is applied.
"""
from typing import Optional, Union

import torch

from models.data_models import LossBreakdown, MaskLike, MaskPlan, TargetLatents
from utils.config import MODES
from utils.errors import EmptyMaskError, MissingTermError, ShapeMismatchError

REQUIRED_TERMS = {
    "pilamim": ("l_pixel", "l_latent", "l_cls"),
    "pixel_only": ("l_pixel",),
    "latent_only": ("l_latent", "l_cls"),
    "pilamim_no_cls": ("l_pixel", "l_latent"),
}


def _masked_ids(plan: MaskLike, device) -> torch.Tensor:
    if isinstance(plan, MaskPlan):
        return torch.as_tensor(plan.masked, dtype=torch.long, device=device).unsqueeze(0)
    return plan.masked.to(device)


def _batched(*tensors: torch.Tensor):
    return [t.unsqueeze(0) if t.ndim == 2 else t for t in tensors]


def _masked_mse(pred: torch.Tensor, target: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    if ids.shape[1] == 0:
        raise EmptyMaskError("masked loss needs at least one masked patch")
    if ids.shape[0] != pred.shape[0]:
        raise ShapeMismatchError(f"mask batch {ids.shape[0]} != prediction batch {pred.shape[0]}")
    index = ids.unsqueeze(-1).expand(-1, -1, pred.shape[-1])
    diff = torch.gather(pred, 1, index) - torch.gather(target, 1, index)
    per_sample = diff.pow(2).sum(dim=(1, 2)) / (pred.shape[-1] * ids.shape[1])
    return per_sample.mean()


def loss_pixel(xhat: torch.Tensor, x: torch.Tensor, plan: MaskLike) -> torch.Tensor:
    """
    Pixel reconstruction error over masked patches only.

    Args:
        xhat: (B, N, D_x) or (N, D_x) predictions
        x: Ground-truth patches, same shape
        plan: Mask plan(s) naming the masked patches

    Returns:
        Scalar (1 / (D_x |M|)) sum_{i in M} ||xhat_i - x_i||^2, batch-averaged
    """
    xhat, x = _batched(xhat, x)
    if xhat.shape != x.shape:
        raise ShapeMismatchError(f"prediction {tuple(xhat.shape)} != target {tuple(x.shape)}")
    return _masked_mse(xhat, x, _masked_ids(plan, xhat.device))


def loss_latent(that: torch.Tensor, t: Union[TargetLatents, torch.Tensor], plan: MaskLike) -> torch.Tensor:
    """Latent reconstruction error over masked patch tokens; row 0 ([CLS]) is excluded"""
    target = t.tokens if isinstance(t, TargetLatents) else t
    that, target = _batched(that, target)
    if that.shape != target.shape:
        raise ShapeMismatchError(f"prediction {tuple(that.shape)} != target {tuple(target.shape)}")
    return _masked_mse(that, target.detach(), _masked_ids(plan, that.device) + 1)


def loss_cls(that0: torch.Tensor, t0: torch.Tensor) -> torch.Tensor:
    """(1 / D_t) ||that_0 - t_0||^2, batch-averaged"""
    if that0.shape != t0.shape:
        raise ShapeMismatchError(f"[CLS] prediction {tuple(that0.shape)} != target {tuple(t0.shape)}")
    return (that0 - t0.detach()).pow(2).mean(dim=-1).mean()


def total_loss(
    mode: str,
    l_pixel: Optional[torch.Tensor] = None,
    l_latent: Optional[torch.Tensor] = None,
    l_cls: Optional[torch.Tensor] = None,
    latent_only_cls: bool = True,
) -> LossBreakdown:
    """
    Unit-weight sum of the terms the mode uses; unused terms are recorded as None.

    Args:
        mode: pilamim | pixel_only | latent_only | pilamim_no_cls
        l_pixel, l_latent, l_cls: Available loss terms
        latent_only_cls: Keep L_cls in latent_only mode

    Returns:
        LossBreakdown whose total is the sum of the present terms
    """
    if mode not in MODES:
        raise ValueError(f"Unknown mode: {mode}")
    required = REQUIRED_TERMS[mode]
    if mode == "latent_only" and not latent_only_cls:
        required = ("l_latent",)

    supplied = {"l_pixel": l_pixel, "l_latent": l_latent, "l_cls": l_cls}
    missing = [name for name in required if supplied[name] is None]
    if missing:
        raise MissingTermError(f"mode {mode!r} needs {', '.join(missing)}")

    used = {name: supplied[name] for name in required}
    total = sum(used.values())
    return LossBreakdown(
        l_pixel=used.get("l_pixel"),
        l_latent=used.get("l_latent"),
        l_cls=used.get("l_cls"),
        total=total,
    )
