"""Segmentation losses: Region Mutual Information (RMI) and CE + soft Dice."""

from __future__ import annotations

import torch
import torch.nn.functional as F

CLIP_MIN = 1e-6
POS_ALPHA = 1e-5


def _region_vectors(maps: torch.Tensor, radius: int) -> torch.Tensor:
    """Stack every pixel with its ``radius x radius`` neighbourhood.

    (n, c, h, w) -> (n, c, radius**2, (h - radius + 1) * (w - radius + 1))
    """
    n, c, h, w = maps.shape
    nh, nw = h - radius + 1, w - radius + 1
    if nh < 1 or nw < 1:
        raise ValueError(f"maps of size {h}x{w} are smaller than the RMI radius {radius}")
    parts = [maps[:, :, y:y + nh, x:x + nw] for y in range(radius) for x in range(radius)]
    return torch.stack(parts, dim=2).reshape(n, c, radius * radius, nh * nw)


def _log_det(m: torch.Tensor) -> torch.Tensor:
    chol = torch.linalg.cholesky(m)
    return 2.0 * torch.log(torch.diagonal(chol, dim1=-2, dim2=-1)).sum(-1)


def rmi_lower_bound(onehot: torch.Tensor, probs: torch.Tensor, radius: int = 3,
                    pos_alpha: float = POS_ALPHA) -> torch.Tensor:
    """Mean over classes of 0.5 * logdet of the posterior covariance of label regions,
    normalized by the region dimension."""
    n, c = onehot.shape[:2]
    d = radius * radius
    la = _region_vectors(onehot, radius).double()
    pr = _region_vectors(probs, radius).double()
    la = la - la.mean(dim=3, keepdim=True)
    pr = pr - pr.mean(dim=3, keepdim=True)
    eye = torch.eye(d, dtype=la.dtype, device=la.device).expand(n, c, d, d)
    la_cov = la @ la.transpose(2, 3)
    pr_cov = pr @ pr.transpose(2, 3)
    la_pr_cov = la @ pr.transpose(2, 3)
    pr_cov_inv = torch.linalg.inv(pr_cov + pos_alpha * eye)
    appro_var = la_cov - la_pr_cov @ pr_cov_inv @ la_pr_cov.transpose(2, 3)
    # symmetrize against round-off before the Cholesky factorization
    appro_var = 0.5 * (appro_var + appro_var.transpose(2, 3))
    rmi = 0.5 * _log_det(appro_var + pos_alpha * eye)
    return (rmi.mean(dim=0) / d).mean()


def rmi_loss(logits: torch.Tensor, target: torch.Tensor, radius: int = 3, pool_size: int = 3,
             pool_stride: int = 3, weight_lambda: float = 0.5, pos_alpha: float = POS_ALPHA,
             return_parts: bool = False):
    """``weight_lambda * CE + (1 - weight_lambda) * RMI``.

    Cross-entropy is taken on softmax probabilities; the RMI term uses
    per-class sigmoid probabilities and one-hot labels, both average-pooled
    by ``pool_stride`` first (``pool_stride=1`` disables pooling).
    """
    if logits.ndim != 4 or target.shape != (logits.shape[0], *logits.shape[2:]):
        raise ValueError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} disagree")
    num_classes = logits.shape[1]
    target = target.long()
    if target.min() < 0 or target.max() >= num_classes:
        raise ValueError("target labels outside the class range")
    ce = F.cross_entropy(logits, target)
    probs = torch.sigmoid(logits) + CLIP_MIN
    onehot = F.one_hot(target, num_classes).permute(0, 3, 1, 2).to(logits.dtype)
    if pool_stride > 1:
        pad = pool_size // 2
        probs = F.avg_pool2d(probs, pool_size, stride=pool_stride, padding=pad)
        onehot = F.avg_pool2d(onehot, pool_size, stride=pool_stride, padding=pad)
    rmi = rmi_lower_bound(onehot, probs, radius, pos_alpha).to(logits.dtype)
    if not torch.isfinite(rmi):
        raise FloatingPointError("RMI term is non-finite after covariance regularization")
    total = weight_lambda * ce + (1 - weight_lambda) * rmi
    if return_parts:
        return total, ce, rmi
    return total


def ce_dice_loss(logits: torch.Tensor, target: torch.Tensor, smooth: float = 1.0,
                 return_parts: bool = False):
    """Pixel cross-entropy plus the mean over classes of (1 - soft Dice)."""
    num_classes = logits.shape[1]
    target = target.long()
    ce = F.cross_entropy(logits, target)
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(target, num_classes).permute(0, 3, 1, 2).to(logits.dtype)
    dims = (0, 2, 3)
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    dice = (2 * inter + smooth) / (denom + smooth)
    dice_loss = (1 - dice).mean()
    total = ce + dice_loss
    if return_parts:
        return total, ce, dice_loss
    return total


LOSSES = {"rmi": rmi_loss, "ce_dice": ce_dice_loss}


def get_loss(kind: str):
    try:
        return LOSSES[kind]
    except KeyError:
        raise ValueError(f"unknown loss {kind!r}; choose from {sorted(LOSSES)}") from None
