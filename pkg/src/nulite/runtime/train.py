"""Training loop and checkpoints."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from ..data import AnnotatedImage, augment, balanced_sampler, make_targets
from ..losses import loss_total
from ..network import NuLite, build_network, reparameterize_network
from .config import Config, from_dict

log = logging.getLogger(__name__)


@dataclass
class Batch:
    images: torch.Tensor
    np_target: torch.Tensor
    hv_target: torch.Tensor
    nt_target: torch.Tensor
    tissue_target: torch.Tensor


def collate(samples: Sequence[AnnotatedImage], targets, mean, std) -> Batch:
    m = torch.tensor(mean, dtype=torch.float32).reshape(1, 3, 1, 1)
    s = torch.tensor(std, dtype=torch.float32).reshape(1, 3, 1, 1)
    x = torch.from_numpy(np.stack([smp.rgb for smp in samples])).permute(0, 3, 1, 2).float() / 255.0
    return Batch(
        images=(x - m) / s,
        np_target=torch.from_numpy(np.stack([t.np_target for t in targets])),
        hv_target=torch.from_numpy(np.stack([t.hv_target for t in targets])),
        nt_target=torch.from_numpy(np.stack([t.nt_target for t in targets])),
        tissue_target=torch.tensor([t.tissue_target for t in targets], dtype=torch.long),
    )


def make_optimizer(net: torch.nn.Module, cfg: Config):
    t = cfg.train
    opt = torch.optim.AdamW(net.parameters(), lr=t.lr, betas=(t.beta1, t.beta2), weight_decay=t.weight_decay)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=t.gamma)
    return opt, sched


def save_checkpoint(path, net: NuLite, cfg: Config, epoch: int, optimizer=None, scheduler=None) -> None:
    torch.save({
        "config": cfg.to_dict(),
        "state_dict": net.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
        "epoch": epoch,
        "reparameterized": net.reparameterized,
        "mean": list(cfg.data.mean),
        "std": list(cfg.data.std),
    }, path)


def load_checkpoint(path, map_location="cpu"):
    """Rebuild the network from a checkpoint.  Returns ``(network, config, payload)``."""
    payload = torch.load(path, map_location=map_location, weights_only=False)
    cfg = from_dict(payload["config"])
    net = NuLite(cfg.network_config())
    if payload.get("reparameterized"):
        # build the fused layout; its values are overwritten by the state dict below
        for m in net.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.num_batches_tracked.fill_(1)
        net = reparameterize_network(net)
    net.load_state_dict(payload["state_dict"])
    net.eval()
    return net, cfg, payload


@dataclass
class TrainResult:
    network: NuLite
    epoch_losses: List[float] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)


class NonFiniteLoss(FloatingPointError):
    pass


def train(cfg: Config, dataset: Sequence[AnnotatedImage], network: Optional[NuLite] = None,
          out_dir: Optional[str] = None, log_path: Optional[str] = None,
          on_epoch: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """AdamW + per-epoch exponential decay over balanced, augmented batches.

    One epoch draws ``len(dataset)`` samples from the balanced sampler.
    A checkpoint is written after every epoch when ``out_dir`` is given and
    one JSON record per step is appended to ``log_path``.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    t = cfg.train
    t.validate()
    torch.manual_seed(t.seed)
    net = network if network is not None else build_network(cfg.network_config(), seed=t.seed)
    opt, sched = make_optimizer(net, cfg)
    sampler = balanced_sampler(dataset, t.seed, t.sampler_gamma, t.sampler_beta)
    steps = math.ceil(len(dataset) / t.batch_size)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_path, "a") if log_path else None
    result = TrainResult(net)
    aug_rng = np.random.default_rng(t.seed)
    try:
        for epoch in range(t.epochs):
            net.train()
            lr = opt.param_groups[0]["lr"]
            result.lrs.append(lr)
            totals = []
            remaining = len(dataset)
            for step in range(steps):
                n = min(t.batch_size, remaining)
                remaining -= n
                idx = [next(sampler) for _ in range(n)]
                pairs = []
                for i in idx:
                    if t.augment:
                        pairs.append(augment(dataset[i], int(aug_rng.integers(2 ** 63)), cfg.augment))
                    else:
                        pairs.append((dataset[i], make_targets(dataset[i])))
                batch = collate([p[0] for p in pairs], [p[1] for p in pairs], cfg.data.mean, cfg.data.std)
                output = net(batch.images)
                breakdown = loss_total(output, batch, cfg.loss)
                for name, value in breakdown.terms.items():
                    if not torch.isfinite(value):
                        raise NonFiniteLoss(f"loss term {name} is not finite at epoch {epoch} step {step}")
                opt.zero_grad(set_to_none=True)
                breakdown.total.backward()
                if t.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(net.parameters(), t.grad_clip)
                opt.step()
                rec = breakdown.as_record()
                totals.append(rec["total"])
                if log_fh and step % t.log_every == 0:
                    log_fh.write(json.dumps({"epoch": epoch, "step": step, "lr": lr, **rec}) + "\n")
            sched.step()
            mean_loss = float(np.mean(totals))
            result.epoch_losses.append(mean_loss)
            log.info("epoch %d  loss %.4f  lr %.3g", epoch, mean_loss, lr)
            if out:
                path = out / f"epoch_{epoch:03d}.pt"
                save_checkpoint(path, net, cfg, epoch, opt, sched)
                result.checkpoints.append(path)
            if on_epoch:
                on_epoch(epoch, mean_loss)
    finally:
        if log_fh:
            log_fh.close()
    return result
