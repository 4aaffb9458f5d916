"""Composite training objective: NP (FTL + Dice), HV (MSE + MSGE), NT (FTL + Dice + BCE), tissue CE."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Dict

import torch
import torch.nn.functional as F
from torch import Tensor

EPS = 1e-7  # guards empty channels only; no additive smoothing
TERMS = ("np_ftl", "np_dice", "hv_mse", "hv_msge", "nt_ftl", "nt_dice", "nt_bce", "tc_ce")


@dataclass(frozen=True)
class LossWeights:
    np_ftl: float = 1.0
    np_dice: float = 1.0
    hv_mse: float = 1.0
    hv_msge: float = 2.0
    nt_ftl: float = 1.0
    nt_dice: float = 1.0
    nt_bce: float = 1.0
    tc_ce: float = 0.5
    ftl_alpha: float = 0.7
    ftl_beta: float = 0.3
    ftl_gamma: float = 4.0 / 3.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v == v and abs(v) != float("inf")) or v < 0:
                raise ValueError(f"loss weight {f.name}={v} must be finite and >= 0")
        # the per-head positivity rule is relaxed to "some term is on" so single-head objectives work
        if not any(getattr(self, t) > 0 for t in TERMS):
            raise ValueError("at least one loss weight must be positive")

    def scaled(self, factor: float) -> "LossWeights":
        """Multiply every term weight (not the FTL shape parameters) by ``factor``."""
        kw = {f.name: getattr(self, f.name) * (factor if f.name in TERMS else 1.0) for f in fields(self)}
        return LossWeights(**kw)


@dataclass
class LossBreakdown:
    total: Tensor
    terms: Dict[str, Tensor]

    def as_record(self) -> Dict[str, float]:
        rec = {"total": float(self.total.detach())}
        rec.update({k: float(v.detach()) for k, v in self.terms.items()})
        return rec


def _check_shapes(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _channel_sums(prob: Tensor, target: Tensor):
    dims = [0] + list(range(2, prob.dim()))
    tp = (prob * target).sum(dims)
    fp = (prob * (1 - target)).sum(dims)
    fn = ((1 - prob) * target).sum(dims)
    return tp, fp, fn


def tversky_index(prob: Tensor, target: Tensor, alpha: float, beta: float) -> Tensor:
    """Per-channel TP / (TP + alpha*FN + beta*FP) over ``[B, C, ...]`` inputs."""
    tp, fp, fn = _channel_sums(prob, target)
    return tp / (tp + alpha * fn + beta * fp).clamp(min=EPS)


def focal_tversky_loss(prob: Tensor, target: Tensor, alpha=0.7, beta=0.3, gamma=4.0 / 3.0) -> Tensor:
    """Mean over channels of ``(1 - TI)^gamma``."""
    ti = tversky_index(prob, target, alpha, beta)
    return ((1 - ti).clamp(min=0) ** gamma).mean()


def dice_loss(prob: Tensor, target: Tensor) -> Tensor:
    """Mean over channels of ``1 - 2TP / (2TP + FP + FN)``, i.e. the Tversky complement at alpha = beta = 1/2."""
    return (1 - tversky_index(prob, target, 0.5, 0.5)).mean()


def bce_on_softmax(logits: Tensor, target: Tensor) -> Tensor:
    """Mean per-channel binary cross-entropy of the softmaxed channels."""
    log_p = F.log_softmax(logits, dim=1)
    c = logits.shape[1]
    eye = torch.eye(c, dtype=torch.bool, device=logits.device)
    lse = torch.logsumexp(logits, dim=1, keepdim=True)
    log_not_p = []
    for k in range(c):
        # log(1 - p_k) = logsumexp over the other channels minus logsumexp over all
        others = logits.masked_fill(eye[k].reshape(1, c, *([1] * (logits.dim() - 2))), float("-inf"))
        log_not_p.append(torch.logsumexp(others, dim=1, keepdim=True) - lse)
    log_not_p = torch.cat(log_not_p, dim=1)
    return -(target * log_p + (1 - target) * log_not_p).mean()


def one_hot(indices: Tensor, num_classes: int) -> Tensor:
    if indices.numel() and (int(indices.max()) >= num_classes or int(indices.min()) < 0):
        raise ValueError(f"class index out of range [0, {num_classes})")
    return F.one_hot(indices.long(), num_classes).movedim(-1, 1).float()


def sobel_kernels(size: int = 5, dtype=torch.float32, device=None):
    """Horizontal and vertical derivative kernels ``offset / (dr^2 + dc^2)``."""
    r = torch.arange(-(size // 2), size // 2 + 1, dtype=dtype, device=device)
    rr, cc = torch.meshgrid(r, r, indexing="ij")
    denom = rr * rr + cc * cc
    denom[size // 2, size // 2] = 1.0
    return cc / denom, rr / denom


def hv_gradients(hv: Tensor, size: int = 5) -> Tensor:
    """Horizontal derivative of channel 0 and vertical derivative of channel 1 (reflection padded).

    ``hv`` is ``[B, 2, H, W]`` or ``[2, H, W]``.
    """
    squeeze = hv.dim() == 3
    if squeeze:
        hv = hv[None]
    kx, ky = sobel_kernels(size, hv.dtype, hv.device)
    pad = size // 2
    padded = F.pad(hv, [pad] * 4, mode="reflect")
    gx = F.conv2d(padded[:, :1], kx[None, None])
    gy = F.conv2d(padded[:, 1:2], ky[None, None])
    out = torch.cat([gx, gy], dim=1)
    return out[0] if squeeze else out


def loss_np(np_logits: Tensor, np_target: Tensor, weights: LossWeights = LossWeights()) -> Dict[str, Tensor]:
    """FTL and Dice of the softmaxed two-channel NP logits against a binary ``[B, H, W]`` target."""
    target = one_hot(np_target, 2)
    _check_shapes(np_logits, target, "loss_np")
    prob = F.softmax(np_logits, dim=1)
    return {
        "np_ftl": weights.np_ftl * focal_tversky_loss(prob, target, weights.ftl_alpha, weights.ftl_beta,
                                                      weights.ftl_gamma),
        "np_dice": weights.np_dice * dice_loss(prob, target),
    }


def mse_term(hv_pred: Tensor, hv_target: Tensor) -> Tensor:
    return ((hv_pred - hv_target) ** 2).mean()


def msge_term(hv_pred: Tensor, hv_target: Tensor, np_target: Tensor) -> Tensor:
    mask = (np_target > 0).to(hv_pred.dtype)
    if mask.dim() == hv_pred.dim() - 1:
        mask = mask.unsqueeze(1)
    n = mask.sum()
    if n == 0:
        return hv_pred.sum() * 0.0
    diff = (hv_gradients(hv_pred) - hv_gradients(hv_target)) ** 2
    return (diff * mask).sum() / (n * hv_pred.shape[1])


def loss_hv(hv_pred: Tensor, hv_target: Tensor, np_target: Tensor,
            weights: LossWeights = LossWeights()) -> Dict[str, Tensor]:
    _check_shapes(hv_pred, hv_target, "loss_hv")
    return {
        "hv_mse": weights.hv_mse * mse_term(hv_pred, hv_target),
        "hv_msge": weights.hv_msge * msge_term(hv_pred, hv_target, np_target),
    }


def loss_nt(nt_logits: Tensor, nt_target: Tensor, weights: LossWeights = LossWeights()) -> Dict[str, Tensor]:
    """``nt_target`` is either class indices ``[B, H, W]`` or a one-hot ``[B, C, H, W]``."""
    c = nt_logits.shape[1]
    target = one_hot(nt_target, c) if nt_target.dim() == nt_logits.dim() - 1 else nt_target.float()
    _check_shapes(nt_logits, target, "loss_nt")
    prob = F.softmax(nt_logits, dim=1)
    return {
        "nt_ftl": weights.nt_ftl * focal_tversky_loss(prob, target, weights.ftl_alpha, weights.ftl_beta,
                                                      weights.ftl_gamma),
        "nt_dice": weights.nt_dice * dice_loss(prob, target),
        "nt_bce": weights.nt_bce * bce_on_softmax(nt_logits, target),
    }


def loss_tc(tissue_logits: Tensor, tissue_target: Tensor, weights: LossWeights = LossWeights()):
    return {"tc_ce": weights.tc_ce * F.cross_entropy(tissue_logits, tissue_target.long())}


def loss_total(output, targets, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Sum of the four head losses.

    ``output`` carries ``np_logits``, ``hv_map``, ``nt_logits``, ``tissue_logits``;
    ``targets`` carries ``np_target``, ``hv_target``, ``nt_target``, ``tissue_target``.
    """
    terms = {}
    terms.update(loss_np(output.np_logits, targets.np_target, weights))
    terms.update(loss_hv(output.hv_map, targets.hv_target, targets.np_target, weights))
    terms.update(loss_nt(output.nt_logits, targets.nt_target, weights))
    terms.update(loss_tc(output.tissue_logits, targets.tissue_target, weights))
    total = sum(terms[k] for k in TERMS)
    return LossBreakdown(total, terms)
