"""U-Net assembly: FastViT encoder, five-layer decoder, NP/HV/NC heads and tissue classifier."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import Dict, Optional

import numpy as np
import torch
from torch import Tensor, nn

from .encoder import (
    Encoder,
    EncoderConfig,
    TissueClassifier,
    check_input_shape,
    init_weights,
    reparameterize as reparameterize_encoder,
)

PANNUKE_NUCLEI_CLASSES = 6  # background + 5 nucleus types
PANNUKE_TISSUE_CLASSES = 19

# preset name -> encoder variant; ALT_PRESETS is the larger-backbone reading
PRESETS = {
    "NuLite-T": "S12",
    "NuLite-M": "SA24",
    "NuLite-H": "SA36",
}
ALT_PRESETS = {
    "NuLite-T": "S12",
    "NuLite-M": "SA36",
    "NuLite-H": "MA36",
}


@dataclass(frozen=True)
class NetworkConfig:
    encoder_config: EncoderConfig = field(default_factory=lambda: EncoderConfig.from_variant("S12"))
    num_nuclei_classes: int = PANNUKE_NUCLEI_CLASSES
    num_tissue_classes: int = PANNUKE_TISSUE_CLASSES

    def validate(self) -> None:
        self.encoder_config.validate()
        if self.num_nuclei_classes < 2:
            raise ValueError("num_nuclei_classes must include background plus at least one class")
        if self.num_tissue_classes < 2:
            raise ValueError("num_tissue_classes must be >= 2")

    def to_dict(self) -> dict:
        return {
            "variant": self.encoder_config.variant_name,
            "num_nuclei_classes": self.num_nuclei_classes,
            "num_tissue_classes": self.num_tissue_classes,
        }


def variant(name: str, num_nuclei_classes: int = PANNUKE_NUCLEI_CLASSES,
            num_tissue_classes: int = PANNUKE_TISSUE_CLASSES, alternative: bool = False) -> NetworkConfig:
    """Per-variant config: NuLite-T -> S12, NuLite-M -> SA24, NuLite-H -> SA36.

    ``alternative=True`` selects the S12/SA36/MA36 backbones instead.
    """
    table = ALT_PRESETS if alternative else PRESETS
    if name not in table:
        raise ValueError(f"unknown network variant {name!r}; expected one of {sorted(table)}")
    return NetworkConfig(EncoderConfig.from_variant(table[name]), num_nuclei_classes, num_tissue_classes)


@dataclass
class NetworkOutput:
    """Raw network predictions.  Tensors are batch-first, or per-image numpy arrays."""

    np_logits: Tensor
    hv_map: Tensor
    nt_logits: Tensor
    tissue_logits: Tensor

    def image(self, i: int) -> "NetworkOutput":
        """Detach one image of the batch into float32 numpy arrays."""
        def grab(t):
            return t[i].detach().cpu().float().numpy()
        return NetworkOutput(grab(self.np_logits), grab(self.hv_map), grab(self.nt_logits),
                             grab(self.tissue_logits))


class ConvBNReLU(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


def deconv(cin, cout):
    return nn.ConvTranspose2d(cin, cout, kernel_size=2, stride=2)


def decoder_layer(cin, convs, cout):
    """Conv blocks that halve the channel count in steps to ``cout``, then a 2x deconvolution."""
    layers = []
    c = cin
    for k in range(convs):
        nxt = cout if k == convs - 1 else max(c // 2, cout)
        layers.append(ConvBNReLU(c, nxt))
        c = nxt
    layers.append(deconv(c, cout))
    return nn.Sequential(*layers)


class SegmentationHead(nn.Sequential):
    def __init__(self, cin, hidden, cout):
        super().__init__(ConvBNReLU(cin, hidden), nn.Conv2d(hidden, cout, 1))


class NuLite(nn.Module):
    def __init__(self, config: NetworkConfig, encoder: Optional[Encoder] = None):
        super().__init__()
        config.validate()
        self.config = config
        self.encoder = encoder if encoder is not None else Encoder(config.encoder_config)
        z = config.encoder_config.base_width
        s1, s2, s3, s4 = self.encoder.out_channels
        if (s1, s2, s3, s4) != (z, 2 * z, 4 * z, 8 * z):
            raise ValueError(f"encoder widths {(s1, s2, s3, s4)} do not follow [Z, 2Z, 4Z, 8Z] for Z={z}")
        self.stem_skip = ConvBNReLU(3, z)
        self.dec1 = decoder_layer(s4, 1, 4 * z)
        self.dec2 = decoder_layer(4 * z + s3, 2, 2 * z)
        self.dec3 = decoder_layer(2 * z + s2, 2, z)
        self.dec4 = decoder_layer(z + s1, 1, z)
        self.dec5 = decoder_layer(z, 1, z)
        head_in = 2 * z
        self.np_head = SegmentationHead(head_in, z, 2)
        self.hv_head = SegmentationHead(head_in, z, 2)
        self.nc_head = SegmentationHead(head_in, z, config.num_nuclei_classes)
        self.tissue_head = TissueClassifier(s4, config.num_tissue_classes)
        # channel closure of every concatenation is checked here, not at forward time
        for layer, expected in ((self.dec2, 8 * z), (self.dec3, 4 * z), (self.dec4, 2 * z)):
            got = layer[0][0].in_channels
            if got != expected:
                raise ValueError(f"decoder concatenation expects {expected} channels, layer built for {got}")

    @property
    def reparameterized(self) -> bool:
        return self.encoder.reparameterized

    def forward(self, x: Tensor, trace: Optional[Dict[str, tuple]] = None) -> NetworkOutput:
        check_input_shape(x)
        feats = self.encoder(x)
        d1 = self.dec1(feats.s4)
        d2 = self.dec2(torch.cat([d1, feats.s3], dim=1))
        d3 = self.dec3(torch.cat([d2, feats.s2], dim=1))
        d4 = self.dec4(torch.cat([d3, feats.s1], dim=1))
        d5 = self.dec5(d4)
        head_in = torch.cat([d5, self.stem_skip(x)], dim=1)
        out = NetworkOutput(
            np_logits=self.np_head(head_in),
            hv_map=self.hv_head(head_in),
            nt_logits=self.nc_head(head_in),
            tissue_logits=self.tissue_head(feats.pooled),
        )
        if trace is not None:
            rows = {
                "DEC.1": (feats.s4, d1),
                "DEC.2": (torch.cat([d1, feats.s3], 1), d2),
                "DEC.3": (torch.cat([d2, feats.s2], 1), d3),
                "DEC.4": (torch.cat([d3, feats.s1], 1), d4),
                "DEC.5": (d4, d5),
                "NP.HEAD": (head_in, out.np_logits),
                "HV.HEAD": (head_in, out.hv_map),
                "NC.HEAD": (head_in, out.nt_logits),
            }
            for name, (a, b) in rows.items():
                trace[name] = (tuple(a.shape[1:]), tuple(b.shape[1:]))
        return out


def build_network(config: NetworkConfig | str, seed: Optional[int] = None) -> NuLite:
    if isinstance(config, str):
        config = variant(config)
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            net = NuLite(config)
            init_weights(net)
    else:
        net = NuLite(config)
        init_weights(net)
    return net


def reparameterize_network(net: NuLite) -> NuLite:
    """Copy of ``net`` (eval mode) whose encoder is fused; decoder and heads are shared by value."""
    fused = copy.deepcopy(net)
    fused.encoder = reparameterize_encoder(net.encoder)
    fused.config = replace(net.config, encoder_config=fused.encoder.config)
    return fused.eval()


def decoder_shapes(z: int, h: int, w: int, c: int) -> Dict[str, tuple]:
    """Expected (channels, H, W) rows of the decoder table for base width ``z``."""
    return {
        "DEC.1": ((8 * z, h // 32, w // 32), (4 * z, h // 16, w // 16)),
        "DEC.2": ((8 * z, h // 16, w // 16), (2 * z, h // 8, w // 8)),
        "DEC.3": ((4 * z, h // 8, w // 8), (z, h // 4, w // 4)),
        "DEC.4": ((2 * z, h // 4, w // 4), (z, h // 2, w // 2)),
        "DEC.5": ((z, h // 2, w // 2), (z, h, w)),
        "NP.HEAD": ((2 * z, h, w), (2, h, w)),
        "HV.HEAD": ((2 * z, h, w), (2, h, w)),
        "NC.HEAD": ((2 * z, h, w), (c, h, w)),
    }


@torch.no_grad()
def predict(net: NuLite, image: np.ndarray, mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5)) -> NetworkOutput:
    """Run one uint8 ``[H, W, 3]`` image through ``net`` and return per-image numpy outputs."""
    x = to_tensor(image, mean, std)[None]
    net.eval()
    return net(x).image(0)


def to_tensor(image: np.ndarray, mean, std) -> Tensor:
    x = torch.from_numpy(np.array(image, copy=True)).permute(2, 0, 1).float() / 255.0
    m = torch.tensor(mean, dtype=torch.float32).reshape(3, 1, 1)
    s = torch.tensor(std, dtype=torch.float32).reshape(3, 1, 1)
    return (x - m) / s
