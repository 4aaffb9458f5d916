"""FastViT-style hybrid encoder with structurally reparameterizable blocks.

The encoder exposes four stages at strides 4/8/16/32 with widths
``[Z, 2Z, 4Z, 8Z]``.  Every multi-branch block (MobileOne-style conv block,
large-kernel patch embedding, RepMixer, conditional positional encoding)
keeps its train-time branches until :func:`reparameterize` collapses them
into a single convolution with bias.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, replace
from typing import Iterable, NamedTuple, Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

VARIANTS = ("T8", "T12", "S12", "SA12", "SA24", "SA36", "MA36")

# name -> (base width Z, depths, mlp ratio, number of trailing attention stages)
_VARIANT_TABLE = {
    "T8": (48, (2, 2, 4, 2), 3.0, 0),
    "T12": (64, (2, 2, 6, 2), 3.0, 0),
    "S12": (64, (2, 2, 6, 2), 4.0, 0),
    "SA12": (64, (2, 2, 6, 2), 4.0, 1),
    "SA24": (64, (4, 4, 12, 4), 4.0, 1),
    "SA36": (64, (6, 6, 18, 6), 4.0, 1),
    "MA36": (76, (6, 6, 18, 6), 4.0, 1),
}


class ShapeError(ValueError):
    """Raised when an input tensor violates the stride-32 shape contract."""


class CalibrationError(RuntimeError):
    """Raised when fusing batch-norm branches whose statistics were never populated."""


@dataclass(frozen=True)
class EncoderConfig:
    variant_name: str = "S12"
    base_width: int = 64
    stage_depths: tuple = (2, 2, 6, 2)
    stage_kind: tuple = ("repmixer", "repmixer", "repmixer", "repmixer")
    mlp_ratio: float = 4.0
    train_mode: bool = True
    head_dim: int = 32
    layer_scale_init: float = 1e-5

    @property
    def stage_widths(self) -> tuple:
        z = self.base_width
        return (z, 2 * z, 4 * z, 8 * z)

    @classmethod
    def from_variant(cls, name: str, train_mode: bool = True) -> "EncoderConfig":
        if name not in _VARIANT_TABLE:
            raise ValueError(f"unknown encoder variant {name!r}; expected one of {VARIANTS}")
        z, depths, mlp, n_attn = _VARIANT_TABLE[name]
        kinds = tuple("attention" if i >= 4 - n_attn else "repmixer" for i in range(4))
        return cls(name, z, depths, kinds, mlp, train_mode)

    def validate(self) -> None:
        if self.variant_name not in _VARIANT_TABLE:
            raise ValueError(f"unknown encoder variant {self.variant_name!r}")
        if self.base_width != _VARIANT_TABLE[self.variant_name][0]:
            raise ValueError(
                f"base width {self.base_width} inconsistent with variant {self.variant_name} "
                f"(expected {_VARIANT_TABLE[self.variant_name][0]})"
            )
        seen_attention = False
        for kind in self.stage_kind:
            if kind not in ("repmixer", "attention"):
                raise ValueError(f"unknown stage kind {kind!r}")
            if kind == "repmixer" and seen_attention:
                raise ValueError("attention stages may only occupy the last stage(s)")
            seen_attention |= kind == "attention"


class FeaturePyramid(NamedTuple):
    stem: Tensor
    s1: Tensor
    s2: Tensor
    s3: Tensor
    s4: Tensor
    pooled: Tensor


# ---------------------------------------------------------------------------
# fusion helpers


def _check_populated(bn: nn.BatchNorm2d) -> None:
    if bn.num_batches_tracked is not None and int(bn.num_batches_tracked) == 0:
        raise CalibrationError(
            "batch-norm running statistics are unpopulated; run a calibration forward "
            "pass in train mode (see calibrate_batchnorm) before reparameterizing"
        )


def fuse_conv_bn(weight: Optional[Tensor], bn: nn.BatchNorm2d, identity: Optional[Tensor] = None):
    """Fold ``bn(conv(x))`` into one kernel and bias.

    ``identity`` replaces ``weight`` for a bare normalization branch.
    """
    _check_populated(bn)
    kernel = identity if weight is None else weight
    std = torch.sqrt(bn.running_var + bn.eps)
    scale = bn.weight / std
    fused_w = kernel * scale.reshape(-1, 1, 1, 1)
    fused_b = bn.bias - bn.running_mean * scale
    return fused_w, fused_b


def identity_kernel(channels: int, groups: int, kernel_size: int, like: Tensor) -> Tensor:
    per_group = channels // groups
    k = torch.zeros(channels, per_group, kernel_size, kernel_size, dtype=like.dtype, device=like.device)
    c = kernel_size // 2
    for i in range(channels):
        k[i, i % per_group, c, c] = 1.0
    return k


def _pad_to(kernel: Tensor, size: int) -> Tensor:
    pad = (size - kernel.shape[-1]) // 2
    return F.pad(kernel, [pad] * 4) if pad else kernel


class ConvBN(nn.Sequential):
    def __init__(self, cin, cout, kernel_size, stride=1, padding=0, groups=1):
        super().__init__()
        self.add_module("conv", nn.Conv2d(cin, cout, kernel_size, stride, padding, groups=groups, bias=False))
        self.add_module("bn", nn.BatchNorm2d(cout))

    def fused(self):
        return fuse_conv_bn(self.conv.weight, self.bn)


# ---------------------------------------------------------------------------
# reparameterizable blocks


class MobileOneBlock(nn.Module):
    """Conv block with k x k, 1 x 1 and identity-BN branches summed before the activation."""

    def __init__(self, cin, cout, kernel_size, stride=1, groups=1, use_act=True,
                 use_scale_branch=True, num_conv_branches=1):
        super().__init__()
        self.cin, self.cout, self.kernel_size = cin, cout, kernel_size
        self.stride, self.groups = stride, groups
        self.padding = kernel_size // 2
        self.activation = nn.GELU() if use_act else nn.Identity()
        self.skip = nn.BatchNorm2d(cin) if cin == cout and stride == 1 else None
        self.conv_branches = nn.ModuleList(
            ConvBN(cin, cout, kernel_size, stride, self.padding, groups) for _ in range(num_conv_branches)
        )
        self.scale = ConvBN(cin, cout, 1, stride, 0, groups) if use_scale_branch and kernel_size > 1 else None
        self.reparam_conv: Optional[nn.Conv2d] = None

    def forward(self, x):
        if self.reparam_conv is not None:
            return self.activation(self.reparam_conv(x))
        out = 0
        if self.skip is not None:
            out = out + self.skip(x)
        if self.scale is not None:
            out = out + self.scale(x)
        for branch in self.conv_branches:
            out = out + branch(x)
        return self.activation(out)

    def equivalent_kernel(self):
        if self.reparam_conv is not None:
            return self.reparam_conv.weight, self.reparam_conv.bias
        ref = next(self.parameters())
        w = torch.zeros(self.cout, self.cin // self.groups, self.kernel_size, self.kernel_size,
                        dtype=ref.dtype, device=ref.device)
        b = torch.zeros(self.cout, dtype=ref.dtype, device=ref.device)
        if self.skip is not None:
            ident = identity_kernel(self.cin, self.groups, self.kernel_size, ref)
            kw, kb = fuse_conv_bn(None, self.skip, identity=ident)
            w, b = w + kw, b + kb
        if self.scale is not None:
            kw, kb = self.scale.fused()
            w, b = w + _pad_to(kw, self.kernel_size), b + kb
        for branch in self.conv_branches:
            kw, kb = branch.fused()
            w, b = w + kw, b + kb
        return w, b

    def reparameterize(self):
        if self.reparam_conv is not None:
            return
        w, b = self.equivalent_kernel()
        conv = nn.Conv2d(self.cin, self.cout, self.kernel_size, self.stride, self.padding,
                         groups=self.groups, bias=True)
        conv.weight.data.copy_(w.detach())
        conv.bias.data.copy_(b.detach())
        self.reparam_conv = conv
        self.skip = None
        self.scale = None
        self.conv_branches = nn.ModuleList()


class ReparamLargeKernelConv(nn.Module):
    """Strided large-kernel grouped conv with a parallel small-kernel branch."""

    def __init__(self, cin, cout, kernel_size=7, stride=2, groups=1, small_kernel=3):
        super().__init__()
        self.cin, self.cout, self.kernel_size = cin, cout, kernel_size
        self.stride, self.groups = stride, groups
        self.large = ConvBN(cin, cout, kernel_size, stride, kernel_size // 2, groups)
        self.small = ConvBN(cin, cout, small_kernel, stride, small_kernel // 2, groups)
        self.activation = nn.GELU()
        self.reparam_conv: Optional[nn.Conv2d] = None

    def forward(self, x):
        if self.reparam_conv is not None:
            return self.activation(self.reparam_conv(x))
        return self.activation(self.large(x) + self.small(x))

    def reparameterize(self):
        if self.reparam_conv is not None:
            return
        lw, lb = self.large.fused()
        sw, sb = self.small.fused()
        conv = nn.Conv2d(self.cin, self.cout, self.kernel_size, self.stride, self.kernel_size // 2,
                         groups=self.groups, bias=True)
        conv.weight.data.copy_((lw + _pad_to(sw, self.kernel_size)).detach())
        conv.bias.data.copy_((lb + sb).detach())
        self.reparam_conv = conv
        del self.large, self.small


class Stem(nn.Sequential):
    def __init__(self, cin, width):
        super().__init__(
            MobileOneBlock(cin, width, 3, stride=2),
            MobileOneBlock(width, width, 3, stride=2, groups=width),
            MobileOneBlock(width, width, 1),
        )


class PatchEmbed(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(
            ReparamLargeKernelConv(cin, cout, 7, stride=2, groups=cin),
            MobileOneBlock(cout, cout, 1),
        )


class RepMixer(nn.Module):
    """Depthwise token mixing ``x + s * (mixer(x) - norm(x))``; fuses to one depthwise conv."""

    def __init__(self, dim, kernel_size=3, layer_scale_init=1e-5):
        super().__init__()
        self.dim, self.kernel_size = dim, kernel_size
        self.norm = MobileOneBlock(dim, dim, kernel_size, groups=dim, use_act=False,
                                   use_scale_branch=False, num_conv_branches=0)
        self.mixer = MobileOneBlock(dim, dim, kernel_size, groups=dim, use_act=False)
        self.layer_scale = nn.Parameter(layer_scale_init * torch.ones(dim, 1, 1))
        self.reparam_conv: Optional[nn.Conv2d] = None

    def forward(self, x):
        if self.reparam_conv is not None:
            return self.reparam_conv(x)
        return x + self.layer_scale * (self.mixer(x) - self.norm(x))

    def reparameterize(self):
        if self.reparam_conv is not None:
            return
        mw, mb = self.mixer.equivalent_kernel()
        nw, nb = self.norm.equivalent_kernel()
        ident = identity_kernel(self.dim, self.dim, self.kernel_size, mw)
        scale = self.layer_scale.reshape(-1, 1, 1, 1)
        w = ident + scale * (mw - nw)
        b = self.layer_scale.reshape(-1) * (mb - nb)
        conv = nn.Conv2d(self.dim, self.dim, self.kernel_size, 1, self.kernel_size // 2,
                         groups=self.dim, bias=True)
        conv.weight.data.copy_(w.detach())
        conv.bias.data.copy_(b.detach())
        self.reparam_conv = conv
        del self.mixer, self.norm, self.layer_scale


class ConvFFN(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.conv = ConvBN(dim, dim, 7, padding=3, groups=dim)
        self.fc1 = nn.Conv2d(dim, hidden, 1)
        self.act = nn.GELU()
        self.fc2 = nn.Conv2d(hidden, dim, 1)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(self.conv(x))))

    def reparameterize(self):
        if not isinstance(self.conv, ConvBN):
            return
        w, b = self.conv.fused()
        conv = nn.Conv2d(w.shape[0], w.shape[0], 7, 1, 3, groups=w.shape[0], bias=True)
        conv.weight.data.copy_(w.detach())
        conv.bias.data.copy_(b.detach())
        self.conv = conv


class RepMixerBlock(nn.Module):
    def __init__(self, dim, mlp_ratio, layer_scale_init=1e-5):
        super().__init__()
        self.token_mixer = RepMixer(dim, 3, layer_scale_init)
        self.ffn = ConvFFN(dim, int(dim * mlp_ratio))
        self.layer_scale = nn.Parameter(layer_scale_init * torch.ones(dim, 1, 1))

    def forward(self, x):
        x = self.token_mixer(x)
        return x + self.layer_scale * self.ffn(x)


class ChannelLayerNorm(nn.LayerNorm):
    """LayerNorm over the channel axis of an NCHW tensor."""

    def forward(self, x):
        return super().forward(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class Attention(nn.Module):
    """Multi-head self-attention over the flattened spatial grid."""

    def __init__(self, dim, head_dim=32):
        super().__init__()
        self.num_heads = max(dim // head_dim, 1)
        self.head_dim = dim // self.num_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        qkv = self.qkv(tokens).reshape(b, h * w, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        out = attn.softmax(dim=-1) @ v
        out = self.proj(out.transpose(1, 2).reshape(b, h * w, c))
        return out.transpose(1, 2).reshape(b, c, h, w)


class AttentionBlock(nn.Module):
    def __init__(self, dim, mlp_ratio, head_dim=32, layer_scale_init=1e-5):
        super().__init__()
        self.norm = ChannelLayerNorm(dim)
        self.token_mixer = Attention(dim, head_dim)
        self.ffn = ConvFFN(dim, int(dim * mlp_ratio))
        self.layer_scale_1 = nn.Parameter(layer_scale_init * torch.ones(dim, 1, 1))
        self.layer_scale_2 = nn.Parameter(layer_scale_init * torch.ones(dim, 1, 1))

    def forward(self, x):
        x = x + self.layer_scale_1 * self.token_mixer(self.norm(x))
        return x + self.layer_scale_2 * self.ffn(x)


class RepCPE(nn.Module):
    """Conditional positional encoding ``x + dwconv7x7(x)``."""

    def __init__(self, dim, kernel_size=7):
        super().__init__()
        self.dim, self.kernel_size = dim, kernel_size
        self.pe = nn.Conv2d(dim, dim, kernel_size, 1, kernel_size // 2, groups=dim, bias=True)
        self.fused = False

    def forward(self, x):
        return self.pe(x) if self.fused else x + self.pe(x)

    def reparameterize(self):
        if self.fused:
            return
        ident = identity_kernel(self.dim, self.dim, self.kernel_size, self.pe.weight)
        self.pe.weight.data.add_(ident)
        self.fused = True


# ---------------------------------------------------------------------------
# encoder


def init_weights(module: nn.Module) -> None:
    """Truncated normal for dense layers, fan-out normal for convolutions, zero biases."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class Encoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        widths = config.stage_widths
        self.stem = Stem(3, widths[0])
        self.stages = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for i, (width, depth, kind) in enumerate(zip(widths, config.stage_depths, config.stage_kind)):
            if i > 0:
                self.downsamples.append(PatchEmbed(widths[i - 1], width))
            blocks = []
            if kind == "attention":
                blocks.append(RepCPE(width))
                blocks += [AttentionBlock(width, config.mlp_ratio, config.head_dim, config.layer_scale_init)
                           for _ in range(depth)]
            else:
                blocks += [RepMixerBlock(width, config.mlp_ratio, config.layer_scale_init) for _ in range(depth)]
            self.stages.append(nn.Sequential(*blocks))

    @property
    def out_channels(self) -> tuple:
        return self.config.stage_widths

    @property
    def reparameterized(self) -> bool:
        return not self.config.train_mode

    def forward(self, x: Tensor) -> FeaturePyramid:
        check_input_shape(x)
        stem = self.stem(x)
        feats = []
        h = stem
        for i, stage in enumerate(self.stages):
            if i > 0:
                h = self.downsamples[i - 1](h)
            h = stage(h)
            feats.append(h)
        pooled = feats[-1].mean(dim=(-2, -1))
        return FeaturePyramid(stem, *feats, pooled)


def check_input_shape(x: Tensor) -> None:
    if x.dim() != 4:
        raise ShapeError(f"expected a [B, 3, H, W] tensor, got shape {tuple(x.shape)}")
    if x.shape[1] != 3:
        raise ShapeError(f"expected 3 input channels, got {x.shape[1]}")
    for name, size in (("H", x.shape[-2]), ("W", x.shape[-1])):
        if size % 32:
            raise ShapeError(f"input {name}={size} is not divisible by 32")


def build_encoder(config: EncoderConfig | str, seed: Optional[int] = None) -> Encoder:
    if isinstance(config, str):
        config = EncoderConfig.from_variant(config)
    if not config.train_mode:
        raise ValueError("build the branch-form encoder and call reparameterize() to obtain inference form")
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            enc = Encoder(config)
            init_weights(enc)
    else:
        enc = Encoder(config)
        init_weights(enc)
    return enc


def _fuse_in_place(module: nn.Module) -> None:
    # a fusable block consumes its sub-branches, so do not descend into it
    for child in module.children():
        if hasattr(child, "reparameterize"):
            child.reparameterize()
        else:
            _fuse_in_place(child)


def reparameterize(encoder: Encoder) -> Encoder:
    """Return a copy of ``encoder`` with every multi-branch block fused.

    The copy is in eval mode.  Calling this on an already fused encoder
    returns an unchanged copy.
    """
    fused = copy.deepcopy(encoder)
    fused.eval()
    if encoder.reparameterized:
        return fused
    with torch.no_grad():
        _fuse_in_place(fused)
    fused.config = replace(encoder.config, train_mode=False)
    return fused


def calibrate_batchnorm(model: nn.Module, batches: Iterable[Tensor]) -> nn.Module:
    """Populate batch-norm running statistics with train-mode forwards (no gradient)."""
    was_training = model.training
    model.train()
    with torch.no_grad():
        for batch in batches:
            model(batch)
    model.train(was_training)
    return model


class TissueClassifier(nn.Module):
    """Dense layer on the pooled last-stage features."""

    def __init__(self, in_features: int, num_tissue_classes: int):
        super().__init__()
        if num_tissue_classes < 2:
            raise ValueError(f"num_tissue_classes must be >= 2, got {num_tissue_classes}")
        self.fc = nn.Linear(in_features, num_tissue_classes)

    def forward(self, pooled: Tensor) -> Tensor:
        return self.fc(pooled)


def tissue_logits(pyramid: FeaturePyramid, classifier: TissueClassifier) -> Tensor:
    return classifier(pyramid.pooled)
