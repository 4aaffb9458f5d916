"""Complexity accounting: parameters, multiply-accumulates, memory estimate, latency.

FLOP convention: one multiply-accumulate is counted as one FLOP.
"""
from __future__ import annotations

import copy
import platform
import statistics
import time
from dataclasses import dataclass, field
from typing import Dict, Optional

import torch
from torch import nn

from .encoder import Attention
from .network import NuLite, build_network, reparameterize_network, variant

FLOP_CONVENTION = "1 multiply-accumulate = 1 FLOP"

# Published figures for the CellViT reference models, used only as comparison constants.
CELLVIT_REFERENCE = {
    "cellvit256": {
        "label": "CellViT-256",
        "params_millions": 46.75,
        "gflops": {256: 132.89, 1024: 2125.94},
        "size_mb": {256: 1859.98, 1024: 26953.06},
        "latency_ms": {256: 35.71, 1024: 1169.7},
    },
    "cellvit-sam-h": {
        "label": "CellViT-SAM-H",
        "params_millions": 699.74,
        "gflops": {256: 214.20, 1024: 3413.41},
        "size_mb": {256: 6002.34, 1024: 45612.96},
        "latency_ms": {256: 103.89, 1024: 2389.14},
    },
}

# Published reparameterized NuLite figures per encoder backbone, for side-by-side display
PUBLISHED_NULITE_REP = {
    "S12": {"params_millions": 12.01, "gflops": {256: 19.76, 1024: 316.11}, "size_mb": {256: 489.99, 1024: 7119.61}},
    "SA24": {"params_millions": 24.08, "gflops": {256: 21.45, 1024: 343.16}, "size_mb": {256: 623.45, 1024: 8531.03}},
    "SA36": {"params_millions": 34.04, "gflops": {256: 23.14, 1024: 370.20}, "size_mb": {256: 745.57, 1024: 9887.84}},
    "MA36": {"params_millions": 47.85, "gflops": {256: 32.53, 1024: 520.39}, "size_mb": {256: 913.95, 1024: 11753.44}},
}


@dataclass
class ComplexityReport:
    name: str
    reparameterized: bool
    params_millions: float
    gflops: Dict[int, float] = field(default_factory=dict)
    estimated_total_size_mb: Dict[int, float] = field(default_factory=dict)
    latency_ms: Dict[int, tuple] = field(default_factory=dict)
    hardware: str = ""

    def as_records(self) -> Dict[str, float]:
        rec = {"name": self.name, "reparameterized": self.reparameterized,
               "params_millions": round(self.params_millions, 4)}
        for size, v in sorted(self.gflops.items()):
            rec[f"gflops@{size}"] = round(v, 4)
        for size, v in sorted(self.estimated_total_size_mb.items()):
            rec[f"size_mb@{size}"] = round(v, 2)
        for size, (mean, std) in sorted(self.latency_ms.items()):
            rec[f"latency_ms@{size}"] = round(mean, 3)
            rec[f"latency_std_ms@{size}"] = round(std, 3)
        if self.hardware:
            rec["hardware"] = self.hardware
        return rec


def count_params(module: nn.Module, reparameterized: Optional[bool] = None) -> int:
    """Trainable parameter count.

    If ``reparameterized`` is True and ``module`` is a branch-form network, the
    count is taken on a fused copy.
    """
    if reparameterized and isinstance(module, NuLite) and not module.reparameterized:
        module = reparameterize_network(_calibrated(module))
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def _calibrated(net: NuLite) -> NuLite:
    # fusing only needs populated statistics; the values do not change the count
    for m in net.modules():
        if isinstance(m, nn.BatchNorm2d) and int(m.num_batches_tracked) == 0:
            m.num_batches_tracked.fill_(1)
    return net


def conv_macs(module: nn.Conv2d, out_shape) -> int:
    kh, kw = module.kernel_size
    return kh * kw * (module.in_channels // module.groups) * module.out_channels * out_shape[-2] * out_shape[-1]


def deconv_macs(module: nn.ConvTranspose2d, in_shape) -> int:
    kh, kw = module.kernel_size
    return kh * kw * module.in_channels * (module.out_channels // module.groups) * in_shape[-2] * in_shape[-1]


class _Counter:
    def __init__(self, root=None):
        self.root = root
        self.macs = 0
        self.activation_elems = 0

    def hook(self, module, inputs, output):
        x = inputs[0]
        if isinstance(module, nn.Conv2d):
            self.macs += conv_macs(module, output.shape) * output.shape[0]
        elif isinstance(module, nn.ConvTranspose2d):
            self.macs += deconv_macs(module, x.shape) * x.shape[0]
        elif isinstance(module, nn.Linear):
            self.macs += module.in_features * module.out_features * (output.numel() // module.out_features)
        elif isinstance(module, Attention):
            b, c, h, w = x.shape
            n = h * w
            # q @ k^T and attn @ v; the projections are counted by their Linear hooks
            self.macs += 2 * b * n * n * c
        # every non-container module output, as in the usual "estimated total size" summaries
        if module is not self.root and not isinstance(module, (nn.Sequential, nn.ModuleList)) \
                and isinstance(output, torch.Tensor):
            self.activation_elems += output.numel()


def _trace(net: nn.Module, input_size: int, batch: int = 1) -> _Counter:
    if input_size % 32:
        raise ValueError(f"input size {input_size} is not divisible by 32")
    # shapes only: run the copy on the meta device so no arithmetic is performed
    shadow = copy.deepcopy(net).to("meta").eval()
    counter = _Counter(shadow)
    handles = [m.register_forward_hook(counter.hook) for m in shadow.modules()]
    try:
        with torch.no_grad():
            shadow(torch.zeros(batch, 3, input_size, input_size, device="meta"))
    finally:
        for h in handles:
            h.remove()
    return counter


def count_flops(net: nn.Module, input_size: int) -> float:
    """GFLOPs (multiply-accumulates / 1e9) of one batch-1 forward pass at ``input_size`` squared."""
    return _trace(net, input_size).macs / 1e9


def estimated_total_size_mb(net: nn.Module, input_size: int) -> float:
    """Parameter bytes + input bytes + module output bytes of a batch-1 fp32 forward (no gradient buffers)."""
    counter = _trace(net, input_size)
    params = sum(p.numel() for p in net.parameters())
    elems = params + 3 * input_size * input_size + counter.activation_elems
    return elems * 4 / 2 ** 20


def measure_latency(net: nn.Module, input_size: int = 256, batch: int = 4, repeats: int = 100,
                    warmup: int = 10) -> tuple:
    """Mean and standard deviation (ms) of ``repeats`` timed forward passes after ``warmup``."""
    net.eval()
    x = torch.rand(batch, 3, input_size, input_size)
    times = []
    with torch.inference_mode():
        for _ in range(warmup):
            net(x)
        for _ in range(repeats):
            t0 = time.perf_counter()
            net(x)
            times.append((time.perf_counter() - t0) * 1e3)
    std = statistics.pstdev(times) if len(times) > 1 else 0.0
    return statistics.fmean(times), std


def hardware_string() -> str:
    return f"{platform.processor() or platform.machine()} / torch {torch.__version__} / {torch.get_num_threads()} thread(s)"


def profile(name: str, reparameterized: bool = True, sizes=(256, 1024), latency_repeats: int = 0,
            latency_batch: int = 4, seed: int = 0, alternative: bool = False) -> ComplexityReport:
    """Static (and optionally timed) complexity report for a named network preset."""
    net = build_network(variant(name, alternative=alternative), seed=seed)
    if reparameterized:
        net = reparameterize_network(_calibrated(net))
    net.eval()
    report = ComplexityReport(name, reparameterized, count_params(net) / 1e6, hardware=hardware_string())
    for s in sizes:
        report.gflops[s] = count_flops(net, s)
        report.estimated_total_size_mb[s] = estimated_total_size_mb(net, s)
        if latency_repeats:
            report.latency_ms[s] = measure_latency(net, s, latency_batch, latency_repeats,
                                                   warmup=min(10, latency_repeats))
    return report


def reference_report(key: str) -> ComplexityReport:
    ref = CELLVIT_REFERENCE[key]
    return ComplexityReport(
        ref["label"], False, ref["params_millions"], dict(ref["gflops"]), dict(ref["size_mb"]),
        {k: (v, 0.0) for k, v in ref["latency_ms"].items()}, hardware="published (literature constant)",
    )


def published_report(backbone: str) -> ComplexityReport:
    ref = PUBLISHED_NULITE_REP[backbone]
    return ComplexityReport(f"NuLite-Rep({backbone})", True, ref["params_millions"], dict(ref["gflops"]),
                            dict(ref["size_mb"]), hardware="published (literature constant)")


def speedup_table(report_a: ComplexityReport, report_b: ComplexityReport) -> Dict[str, float]:
    """Elementwise ratios ``a / b`` for params and every per-size quantity both reports carry."""
    def ratio(x, y, what):
        if y == 0:
            raise ZeroDivisionError(f"cannot form speedup ratio: {what} of {report_b.name} is zero")
        return x / y

    out = {"params": ratio(report_a.params_millions, report_b.params_millions, "params")}
    for key, attr in (("gflops", "gflops"), ("size_mb", "estimated_total_size_mb")):
        a, b = getattr(report_a, attr), getattr(report_b, attr)
        for s in sorted(set(a) & set(b)):
            out[f"{key}@{s}"] = ratio(a[s], b[s], f"{key}@{s}")
    for s in sorted(set(report_a.latency_ms) & set(report_b.latency_ms)):
        out[f"latency@{s}"] = ratio(report_a.latency_ms[s][0], report_b.latency_ms[s][0], f"latency@{s}")
    return out


def format_report(report: ComplexityReport, compare: Optional[ComplexityReport] = None) -> str:
    lines = [f"# {FLOP_CONVENTION}", f"# hardware: {report.hardware}",
             "# latency covers the network forward only (no post-processing)", ""]
    lines.append(f"{'model':<14}{'rep':>5}{'params(M)':>12}" + "".join(
        f"{'GFLOPs@' + str(s):>14}{'size_MB@' + str(s):>14}" for s in sorted(report.gflops)))
    lines.append(f"{report.name:<14}{str(report.reparameterized):>5}{report.params_millions:>12.2f}" + "".join(
        f"{report.gflops[s]:>14.2f}{report.estimated_total_size_mb.get(s, float('nan')):>14.2f}"
        for s in sorted(report.gflops)))
    for s, (mean, std) in sorted(report.latency_ms.items()):
        lines.append(f"latency@{s}: {mean:.2f} +- {std:.2f} ms")
    if compare is not None:
        lines.append("")
        lines.append(f"speedup of {report.name} vs {compare.name} (reference / this model)")
        for k, v in speedup_table(compare, report).items():
            lines.append(f"  {k:<16}{v:>10.2f}x")
    return "\n".join(lines)
