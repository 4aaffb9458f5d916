"""Network output -> instance map and typed nuclei.

Foreground thresholding, HV-gradient energy, marker-controlled watershed,
per-instance typing and morphological cleanup.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence

import numpy as np
import torch
from scipy import ndimage as ndi
from skimage.segmentation import watershed

from .data import relabel_sequential, write_instance_png
from .losses import hv_gradients


@dataclass(frozen=True)
class PostprocessParams:
    np_threshold: float = 0.5
    energy_threshold: float = 0.4
    min_object_px: int = 10
    min_marker_px: int = 10
    connectivity: int = 8

    def __post_init__(self):
        for name in ("np_threshold", "energy_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name}={v} must lie in (0, 1)")
        for name in ("min_object_px", "min_marker_px"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")

    @property
    def structure(self) -> np.ndarray:
        return ndi.generate_binary_structure(2, 1 if self.connectivity == 4 else 2)


@dataclass
class TypedNucleus:
    id: int
    class_id: int
    class_prob: float
    centroid: tuple
    bbox: tuple  # (r0, c0, r1, c1), end-exclusive
    area_px: int

    def to_json(self) -> str:
        return json.dumps({
            "id": self.id, "class": self.class_id, "prob": round(self.class_prob, 6),
            "centroid": [round(float(c), 3) for c in self.centroid], "bbox": list(self.bbox),
            "area": self.area_px,
        })

    @classmethod
    def from_json(cls, line: str) -> "TypedNucleus":
        d = json.loads(line)
        return cls(d["id"], d["class"], d["prob"], tuple(d["centroid"]), tuple(d["bbox"]), d["area"])


def softmax(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def remove_small(mask_or_labels: np.ndarray, min_px: int, structure=None) -> np.ndarray:
    """Drop connected components (binary input) or labels (integer input) smaller than ``min_px``."""
    if mask_or_labels.dtype == bool:
        labels, n = ndi.label(mask_or_labels, structure=structure)
        if n == 0 or min_px <= 0:
            return mask_or_labels.copy()
        sizes = np.bincount(labels.ravel())
        keep = sizes >= min_px
        keep[0] = False
        return keep[labels]
    sizes = np.bincount(mask_or_labels.ravel())
    drop = sizes < min_px
    drop[0] = False
    out = mask_or_labels.copy()
    out[drop[mask_or_labels]] = 0
    return out


def foreground(np_logits: np.ndarray, params: PostprocessParams = PostprocessParams()) -> np.ndarray:
    fg = softmax(np.asarray(np_logits, dtype=np.float64), axis=0)[1] > params.np_threshold
    return remove_small(fg, params.min_object_px, params.structure)


def _minmax(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    if hi - lo <= 0:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def energy_map(hv_map: np.ndarray) -> np.ndarray:
    """``max(Sx, Sy)`` of the min-max normalised absolute HV derivatives (shared training kernels)."""
    g = hv_gradients(torch.from_numpy(np.asarray(hv_map, dtype=np.float64))).numpy()
    return np.maximum(_minmax(np.abs(g[0])), _minmax(np.abs(g[1])))


def instance_segment(output, params: PostprocessParams = PostprocessParams()) -> np.ndarray:
    """Instance map with ids 1..N numbered by marker discovery in row-major order.

    Every foreground component gets at least one marker (components without
    a low-energy core are seeded as a whole), so the ids partition the
    foreground exactly.
    """
    fg = foreground(output.np_logits, params)
    if not fg.any():
        return np.zeros(fg.shape, dtype=np.int32)
    energy = energy_map(output.hv_map)
    structure = params.structure
    # markers use 4-connectivity so cores cannot leak diagonally through a one-pixel ridge
    cross = ndi.generate_binary_structure(2, 1)
    cores = remove_small(fg & (energy <= params.energy_threshold), params.min_marker_px, cross)
    markers, n = ndi.label(cores, structure=cross)
    comps, n_comp = ndi.label(fg, structure=structure)
    seeded = np.zeros(n_comp + 1, dtype=bool)
    seeded[np.unique(comps[markers > 0])] = True
    orphan = ~seeded[comps] & fg
    if orphan.any():
        extra, _ = ndi.label(orphan, structure=structure)
        markers = np.where(extra > 0, extra + n, markers)
    markers = relabel_sequential(markers)
    labels = watershed(energy, markers, mask=fg, connectivity=1 if params.connectivity == 4 else 2)
    return relabel_sequential(labels.astype(np.int32))


def cleanup(instances: np.ndarray, params: PostprocessParams = PostprocessParams()) -> np.ndarray:
    """Closing (3x3) and hole filling per instance, small-instance removal, contiguous relabel.

    Smoothing only claims background pixels, so instances never overwrite each
    other.  The pass repeats until the map stops changing, which makes the
    operation idempotent.
    """
    current = relabel_sequential(np.asarray(instances).astype(np.int32))
    square = np.ones((3, 3), dtype=bool)
    for _ in range(32):
        out = remove_small(current, params.min_object_px)
        slices = ndi.find_objects(out)
        for k, sl in enumerate(slices, start=1):
            if sl is None:
                continue
            # one-pixel margin so closing can reach the bounding-box border
            sl = tuple(slice(max(s.start - 1, 0), s.stop + 1) for s in sl)
            mask = out[sl] == k
            smooth = ndi.binary_fill_holes(ndi.binary_closing(np.pad(mask, 1), square))[1:-1, 1:-1]
            region = out[sl]
            region[smooth & (region == 0)] = k
        out = relabel_sequential(out)
        if np.array_equal(out, current):
            break
        current = out
    return current


def assign_types(instances: np.ndarray, nt_logits: np.ndarray) -> List[TypedNucleus]:
    """Winning non-background class by summed softmax mass; ties go to the lower index."""
    prob = softmax(np.asarray(nt_logits, dtype=np.float64), axis=0)
    out = []
    inst = np.asarray(instances).astype(np.int64)
    for k, sl in enumerate(ndi.find_objects(inst), start=1):
        if sl is None:
            continue
        mask = inst[sl] == k
        p = prob[(slice(None),) + sl][:, mask]
        mass = p[1:].sum(axis=1)
        cls = int(np.argmax(mass)) + 1  # argmax returns the first maximum
        rows, cols = np.nonzero(mask)
        out.append(TypedNucleus(
            id=k,
            class_id=cls,
            class_prob=float(p[cls].mean()),
            centroid=(float(rows.mean() + sl[0].start), float(cols.mean() + sl[1].start)),
            bbox=(int(sl[0].start + rows.min()), int(sl[1].start + cols.min()),
                  int(sl[0].start + rows.max() + 1), int(sl[1].start + cols.max() + 1)),
            area_px=int(mask.sum()),
        ))
    return out


def type_map(instances: np.ndarray, nuclei: Sequence[TypedNucleus]) -> np.ndarray:
    lut = np.zeros(int(instances.max(initial=0)) + 1, dtype=np.uint8)
    for n in nuclei:
        lut[n.id] = n.class_id
    return lut[instances]


def postprocess(output, params: PostprocessParams = PostprocessParams()):
    """Segment, clean, then type.  Returns ``(instance_map, nuclei)``."""
    inst = cleanup(instance_segment(output, params), params)
    return inst, assign_types(inst, output.nt_logits)


def write_detections(path, nuclei: Iterable[TypedNucleus]) -> None:
    with open(path, "w") as fh:
        for n in nuclei:
            fh.write(n.to_json() + "\n")


def read_detections(path) -> List[TypedNucleus]:
    with open(path) as fh:
        return [TypedNucleus.from_json(line) for line in fh if line.strip()]


def write_instance_map(path, instances: np.ndarray) -> None:
    write_instance_png(Path(path), instances)
