"""Shared test helpers: network state randomization and loss gradient checks."""
from types import SimpleNamespace

import numpy as np
import torch
from torch import nn

from nulite.losses import LossWeights, loss_hv, loss_np, loss_nt, loss_tc
from nulite.network import NetworkOutput
from nulite.synthetic import disk_pair, ideal_output

# filled by the acceptance tests, printed in the terminal summary
ACCEPTANCE = {}


def randomize_statistics(module: nn.Module, seed: int) -> nn.Module:
    """Random BN affine/running statistics and layer scales, so fused and branch forms differ visibly."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.BatchNorm2d):
                m.weight.copy_(torch.rand(m.weight.shape, generator=g) + 0.5)
                m.bias.copy_(torch.randn(m.bias.shape, generator=g) * 0.1)
                m.running_mean.copy_(torch.randn(m.running_mean.shape, generator=g) * 0.1)
                m.running_var.copy_(torch.rand(m.running_var.shape, generator=g) + 0.5)
                m.num_batches_tracked.fill_(1)
        for name, p in module.named_parameters():
            if "layer_scale" in name:
                p.copy_(torch.rand(p.shape, generator=g) * 0.2)
    return module.eval()


def n_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def random_batch(seed, b=2, h=6, w=6, classes=2, tissues=19, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    npt = (torch.rand(b, h, w, generator=g) > 0.5).long()
    return SimpleNamespace(
        np_logits=torch.randn(b, 2, h, w, generator=g, dtype=dtype),
        hv_map=torch.randn(b, 2, h, w, generator=g, dtype=dtype) * 0.5,
        nt_logits=torch.randn(b, classes, h, w, generator=g, dtype=dtype),
        tissue_logits=torch.randn(b, tissues, generator=g, dtype=dtype),
        np_target=npt,
        hv_target=(torch.rand(b, 2, h, w, generator=g, dtype=dtype) * 2 - 1) * npt[:, None],
        nt_target=torch.randint(0, classes, (b, h, w), generator=g) * npt,
        tissue_target=torch.randint(0, tissues, (b,), generator=g),
    )


def term_fn(name, batch):
    """(input tensor, scalar function of it) for one loss term."""
    w = LossWeights()
    if name.startswith("np_"):
        return batch.np_logits, lambda x: loss_np(x, batch.np_target, w)[name]
    if name.startswith("hv_"):
        return batch.hv_map, lambda x: loss_hv(x, batch.hv_target, batch.np_target, w)[name]
    if name.startswith("nt_"):
        return batch.nt_logits, lambda x: loss_nt(x, batch.nt_target, w)[name]
    return batch.tissue_logits, lambda x: loss_tc(x, batch.tissue_target, w)[name]


def gradient_relative_error(name, seed=7, h=1e-3, top=50):
    """Max relative error between autograd and central differences over the largest gradient entries."""
    batch = random_batch(seed)
    x0, fn = term_fn(name, batch)
    x = x0.clone().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.detach().ravel()
    numeric = torch.zeros_like(analytic)
    flat = x0.detach().clone().ravel()
    for i in range(flat.numel()):
        plus, minus = flat.clone(), flat.clone()
        plus[i] += h
        minus[i] -= h
        numeric[i] = (fn(plus.view_as(x0)) - fn(minus.view_as(x0))) / (2 * h)
    idx = torch.argsort(analytic.abs(), descending=True)[:top]
    rel = (analytic[idx] - numeric[idx]).abs() / torch.maximum(analytic[idx].abs(), numeric[idx].abs())
    return float(rel.max())


# fixture grid on which separation is expected: equal radii, overlap d / 2r in [0.55, 0.85]
SEPARATION_GRID = [(r, f, a) for r in (9, 10, 12, 14) for f in (0.55, 0.7, 0.85) for a in (0, 30, 45, 90, 135)]


def best_iou(gt, inst, k):
    m = gt == k
    ious = [np.logical_and(m, inst == j).sum() / np.logical_or(m, inst == j).sum() for j in np.unique(inst[m]) if j]
    return max(ious, default=0.0)


def noisy_output(seed, size=48):
    """Soft, imperfect maps: an ideal output plus Gaussian noise on every head."""
    rng = np.random.default_rng(seed)
    inst = disk_pair(float(rng.uniform(6, 12)), float(rng.uniform(6, 12)), float(rng.uniform(4, 18)),
                     float(rng.uniform(0, 180)), size)
    out = ideal_output(inst, margin=3.0)
    return NetworkOutput(out.np_logits + rng.normal(0, 2.0, out.np_logits.shape).astype(np.float32),
                         out.hv_map + rng.normal(0, 0.2, out.hv_map.shape).astype(np.float32),
                         out.nt_logits + rng.normal(0, 2.0, out.nt_logits.shape).astype(np.float32),
                         out.tissue_logits)
