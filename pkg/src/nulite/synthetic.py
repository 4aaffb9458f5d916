"""Synthetic H&E-like tiles with disk-shaped nuclei, for tests and smoke runs."""
from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage as ndi

from .data import AnnotatedImage

# rough per-class stain tints (RGB in [0, 1]); index 0 is unused
CLASS_TINTS = np.array([
    [0.00, 0.00, 0.00],
    [0.35, 0.15, 0.45],
    [0.20, 0.10, 0.35],
    [0.50, 0.30, 0.55],
    [0.25, 0.25, 0.25],
    [0.45, 0.20, 0.35],
])


def place_disks(size, count: int, radius_range, rng, min_gap: float = 2.0, max_tries: int = 2000):
    """Non-overlapping disk centres and radii (rejection sampling)."""
    h, w = (size, size) if np.isscalar(size) else size
    placed = []
    tries = 0
    while len(placed) < count and tries < max_tries:
        tries += 1
        r = rng.uniform(*radius_range)
        cy, cx = rng.uniform(r, h - r), rng.uniform(r, w - r)
        if all(np.hypot(cy - y, cx - x) >= r + q + min_gap for y, x, q in placed):
            placed.append((cy, cx, r))
    return placed


def render(size, disks, classes: Sequence[int], rng, noise: float = 0.03) -> tuple:
    h, w = (size, size) if np.isscalar(size) else size
    yy, xx = np.mgrid[:h, :w]
    inst = np.zeros((h, w), dtype=np.int32)
    types = np.zeros((h, w), dtype=np.uint8)
    for k, ((cy, cx, r), c) in enumerate(zip(disks, classes), start=1):
        m = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r) & (inst == 0)
        inst[m] = k
        types[m] = c
    bg = np.array([0.93, 0.75, 0.85]) + rng.normal(0, 0.02, 3)
    img = np.broadcast_to(bg, (h, w, 3)).copy()
    # soft stroma texture
    img += ndi.gaussian_filter(rng.normal(0, 0.08, (h, w)), 3)[..., None] * np.array([0.3, 0.6, 0.4])
    tint = CLASS_TINTS[np.minimum(types, len(CLASS_TINTS) - 1)]
    soft = ndi.gaussian_filter((inst > 0).astype(np.float64), 0.7)[..., None]
    img = img * (1 - soft) + tint * soft
    img += rng.normal(0, noise, img.shape)
    rgb = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    return rgb, inst, types


def disk_sample(sample_id: str, size=64, count: int = 4, radius_range=(7.0, 10.0), num_classes: int = 6,
                tissue_label: int = 0, seed: int = 0, min_gap: float = 3.0) -> AnnotatedImage:
    """One tile of well-separated, class-tinted disks."""
    rng = np.random.default_rng(seed)
    disks = place_disks(size, count, radius_range, rng, min_gap)
    classes = rng.integers(1, num_classes, size=len(disks))
    rgb, inst, types = render(size, disks, classes, rng)
    return AnnotatedImage(sample_id, rgb, inst, types, int(tissue_label), 0)


def disk_dataset(n: int, size=64, count: int = 4, radius_range=(7.0, 10.0), num_classes: int = 6,
                 num_tissues: int = 19, seed: int = 0) -> List[AnnotatedImage]:
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2 ** 31, size=n)
    tissues = rng.integers(0, num_tissues, size=n)
    return [disk_sample(f"syn{i:04d}", size, count, radius_range, num_classes, int(t), int(s))
            for i, (s, t) in enumerate(zip(seeds, tissues))]


def disk_pair(r1: float, r2: float, distance: float, angle_deg: float = 0.0, size: int = 64,
              offset=(0.0, 0.0)) -> np.ndarray:
    """Two overlapping disks split along the power-weighted boundary into ids 1 and 2."""
    yy, xx = np.mgrid[:size, :size]
    c1 = np.array([size / 2 + offset[0], size / 2 + offset[1]]) - 0.5 * distance * np.array(
        [np.sin(np.radians(angle_deg)), np.cos(np.radians(angle_deg))])
    c2 = c1 + distance * np.array([np.sin(np.radians(angle_deg)), np.cos(np.radians(angle_deg))])
    d1 = np.hypot(yy - c1[0], xx - c1[1])
    d2 = np.hypot(yy - c2[0], xx - c2[1])
    m = (d1 <= r1) | (d2 <= r2)
    inst = np.zeros((size, size), dtype=np.int32)
    inst[m] = np.where(d1 / r1 <= d2 / r2, 1, 2)[m]
    return inst


def ideal_output(instance_map: np.ndarray, type_map: Optional[np.ndarray] = None, num_classes: int = 6,
                 margin: float = 10.0):
    """Saturated logits and exact HV maps consistent with a ground-truth instance map."""
    from .data import make_hv_target
    from .network import NetworkOutput

    fg = instance_map > 0
    np_logits = np.stack([np.where(fg, -margin, margin), np.where(fg, margin, -margin)]).astype(np.float32)
    types = type_map if type_map is not None else fg.astype(np.int64)
    nt = np.full((num_classes,) + instance_map.shape, -margin, dtype=np.float32)
    for c in range(num_classes):
        nt[c][types == c] = margin
    return NetworkOutput(np_logits, make_hv_target(instance_map), nt, np.zeros(19, dtype=np.float32))
