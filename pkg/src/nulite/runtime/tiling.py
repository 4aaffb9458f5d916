"""Tile planning, per-tile inference and overlap stitching."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy import ndimage as ndi

from ..data import relabel_sequential
from ..metrics import greedy_pairs
from ..network import NetworkOutput, to_tensor
from ..postprocess import PostprocessParams, TypedNucleus, assign_types, cleanup, instance_segment

log = logging.getLogger(__name__)


def _axis_origins(length: int, tile: int, overlap: int) -> List[int]:
    stride = tile - overlap
    origins = list(range(0, length - tile + 1, stride))
    if origins[-1] + tile < length:
        origins.append(length - tile)
    return origins


def _axis_cores(origins: Sequence[int], tile: int, length: int) -> List[Tuple[int, int]]:
    # core boundaries sit in the middle of each overlap band
    bounds = [0] + [(origins[i - 1] + tile + origins[i]) // 2 for i in range(1, len(origins))] + [length]
    return [(bounds[i], bounds[i + 1]) for i in range(len(origins))]


@dataclass(frozen=True)
class TileGrid:
    height: int
    width: int
    tile_size: int
    overlap_px: int
    row_origins: Tuple[int, ...]
    col_origins: Tuple[int, ...]

    @property
    def origins(self) -> List[Tuple[int, int]]:
        return [(r, c) for r in self.row_origins for c in self.col_origins]

    def cores(self) -> List[Tuple[int, int, int, int]]:
        """Per-tile ``(r0, r1, c0, c1)`` core regions in image coordinates; they partition the image."""
        rc = _axis_cores(self.row_origins, self.tile_size, self.height)
        cc = _axis_cores(self.col_origins, self.tile_size, self.width)
        return [(r0, r1, c0, c1) for r0, r1 in rc for c0, c1 in cc]

    def __len__(self) -> int:
        return len(self.row_origins) * len(self.col_origins)


def plan_tiles(height: int, width: int, tile_size: int, overlap_px: int) -> TileGrid:
    """Row-major grid with stride ``tile_size - overlap_px``; the last row/column is clamped in-bounds."""
    if tile_size <= 0 or tile_size % 32:
        raise ValueError(f"tile size {tile_size} must be a positive multiple of 32")
    if not 0 <= overlap_px < tile_size:
        raise ValueError(f"overlap {overlap_px} must lie in [0, tile size)")
    if tile_size > min(height, width):
        raise ValueError(f"tile size {tile_size} exceeds image size {height}x{width}")
    return TileGrid(height, width, tile_size, overlap_px, tuple(_axis_origins(height, tile_size, overlap_px)),
                    tuple(_axis_origins(width, tile_size, overlap_px)))


@torch.no_grad()
def forward_tiles(net, image: np.ndarray, grid: TileGrid, mean, std, batch_size: int = 4) -> List[NetworkOutput]:
    x = to_tensor(image, mean, std)
    t = grid.tile_size
    outs = []
    origins = grid.origins
    for i in range(0, len(origins), batch_size):
        chunk = origins[i:i + batch_size]
        batch = torch.stack([x[:, r:r + t, c:c + t] for r, c in chunk])
        out = net(batch)
        outs.extend(out.image(j) for j in range(len(chunk)))
    return outs


def postprocess_tile(output: NetworkOutput, params: PostprocessParams):
    inst = cleanup(instance_segment(output, params), params)
    return inst, assign_types(inst, output.nt_logits)


@dataclass
class _Candidate:
    tile: int
    nucleus: TypedNucleus
    rows: np.ndarray  # global pixel coordinates
    cols: np.ndarray
    margin: float  # centroid distance to the nearest interior tile edge


def _interior_margin(centroid, origin, grid: TileGrid) -> float:
    r, c = centroid
    r0, c0 = origin
    t = grid.tile_size
    d = []
    # edges lying on the image border do not truncate anything
    if r0 > 0:
        d.append(r - r0)
    if r0 + t < grid.height:
        d.append(r0 + t - 1 - r)
    if c0 > 0:
        d.append(c - c0)
    if c0 + t < grid.width:
        d.append(c0 + t - 1 - c)
    return min(d) if d else float("inf")


def stitch(tiles: Sequence[Tuple[np.ndarray, List[TypedNucleus]]], grid: TileGrid,
           params: PostprocessParams = PostprocessParams()):
    """Merge per-tile instance maps into one image-level map.

    A tile proposes every instance that reaches into its core region.
    Proposals from different tiles with pixel IoU > 0.5 are duplicates; the
    one whose centroid lies farther from its tile's interior edges wins.
    Winners are painted in that priority order onto unclaimed pixels.
    """
    cores = grid.cores()
    t = grid.tile_size
    cands: List[_Candidate] = []
    for i, ((inst, nuclei), (r0, c0), (cr0, cr1, cc0, cc1)) in enumerate(zip(tiles, grid.origins, cores)):
        by_id = {n.id: n for n in nuclei}
        core = np.zeros((t, t), dtype=bool)
        core[max(cr0 - r0, 0):max(cr1 - r0, 0), max(cc0 - c0, 0):max(cc1 - c0, 0)] = True
        for k, sl in enumerate(ndi.find_objects(inst), start=1):
            if sl is None or k not in by_id:
                continue
            m = inst[sl] == k
            if not core[sl][m].any():
                continue
            rr, cc = np.nonzero(m)
            rr = rr + sl[0].start + r0
            cc = cc + sl[1].start + c0
            cent = (rr.mean(), cc.mean())
            cands.append(_Candidate(i, by_id[k], rr, cc, _interior_margin(cent, (r0, c0), grid)))

    # priority: larger margin first, ties by tile index then instance id for determinism
    order = sorted(range(len(cands)), key=lambda j: (-cands[j].margin, cands[j].tile, cands[j].nucleus.id))
    out = np.zeros((grid.height, grid.width), dtype=np.int32)
    kept: List[_Candidate] = []
    for j in order:
        cand = cands[j]
        # duplicate test against already kept proposals that share pixels
        hits = out[cand.rows, cand.cols]
        dup = False
        for lbl in np.unique(hits[hits > 0]):
            other = kept[lbl - 1]
            inter = int((hits == lbl).sum())
            union = cand.rows.size + other.rows.size - inter
            if inter / union > 0.5:
                dup = True
                break
        if dup:
            continue
        free = hits == 0
        if free.sum() < max(params.min_object_px, 1):
            continue
        kept.append(cand)
        out[cand.rows[free], cand.cols[free]] = len(kept)
    # painted remnants may be fragmented; keep each label's largest piece
    painted = _largest_piece(out)
    out = relabel_sequential(painted)
    return out, _records(out, painted, kept)


def _largest_piece(labels: np.ndarray) -> np.ndarray:
    out = labels.copy()
    for k, sl in enumerate(ndi.find_objects(labels), start=1):
        if sl is None:
            continue
        m = labels[sl] == k
        comp, n = ndi.label(m)
        if n > 1:
            sizes = np.bincount(comp.ravel())
            sizes[0] = 0
            region = out[sl]
            region[m & (comp != sizes.argmax())] = 0
    return out


def _records(labels: np.ndarray, painted: np.ndarray, kept: Sequence[_Candidate]) -> List[TypedNucleus]:
    recs = []
    for k, sl in enumerate(ndi.find_objects(labels), start=1):
        if sl is None:
            continue
        m = labels[sl] == k
        rows, cols = np.nonzero(m)
        r0, c0 = sl[0].start, sl[1].start
        src = kept[int(painted[r0 + rows[0], c0 + cols[0]]) - 1].nucleus
        recs.append(TypedNucleus(
            id=k, class_id=src.class_id, class_prob=src.class_prob,
            centroid=(float(rows.mean() + r0), float(cols.mean() + c0)),
            bbox=(int(r0 + rows.min()), int(c0 + cols.min()), int(r0 + rows.max() + 1), int(c0 + cols.max() + 1)),
            area_px=int(m.sum()),
        ))
    return recs


def infer_tiled(net, image: np.ndarray, grid: Optional[TileGrid] = None, params: PostprocessParams = PostprocessParams(),
                mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5), batch_size: int = 4):
    """Tiled forward, per-tile post-processing and stitching.  Returns ``(instance_map, nuclei)``."""
    h, w = image.shape[:2]
    if grid is None:
        grid = plan_tiles(h, w, min(h, w) // 32 * 32, 0)
    if (grid.height, grid.width) != (h, w):
        raise ValueError("tile grid was planned for a different image size")
    if not getattr(net, "reparameterized", True):
        log.warning("running tiled inference with a branch-form network; reparameterize it for speed")
    net.eval()
    outputs = forward_tiles(net, image, grid, mean, std, batch_size)
    tiles = [postprocess_tile(o, params) for o in outputs]
    if len(tiles) == 1 and grid.tile_size == h == w:
        return tiles[0]
    return stitch(tiles, grid, params)


def _core_interior(inst: np.ndarray, grid: TileGrid):
    """Per instance: (lies entirely inside one core region, centroid row, centroid col)."""
    cores = grid.cores()
    out = []
    for k, sl in enumerate(ndi.find_objects(inst), start=1):
        if sl is None:
            continue
        r0, c0 = sl[0].start, sl[1].start
        rows, cols = np.nonzero(inst[sl] == k)
        rmin, rmax, cmin, cmax = r0 + rows.min(), r0 + rows.max(), c0 + cols.min(), c0 + cols.max()
        inside = any(a <= rmin and rmax < b and c <= cmin and cmax < d for a, b, c, d in cores)
        out.append((inside, r0 + rows.mean(), c0 + cols.mean()))
    return out


def core_detection_f1(reference: np.ndarray, tiled: np.ndarray, grid: TileGrid, radius: float = 12.0) -> float:
    """Detection F1 of a stitched map against a single-pass reference over core-interior nuclei.

    Only instances contained in a single core region are scored: unmatched
    reference instances count as misses and unmatched stitched instances
    as false detections.  Centroids pair greedily within ``radius``.
    """
    ref, til = _core_interior(reference, grid), _core_interior(tiled, grid)
    a = np.array([[r, c] for _, r, c in ref], dtype=float).reshape(-1, 2)
    b = np.array([[r, c] for _, r, c in til], dtype=float).reshape(-1, 2)
    pairs = greedy_pairs(a, b, radius)
    pa, pb = {i for i, _ in pairs}, {j for _, j in pairs}
    tp = sum(1 for i, _ in pairs if ref[i][0])
    fn = sum(1 for i, v in enumerate(ref) if v[0] and i not in pa)
    fp = sum(1 for j, v in enumerate(til) if v[0] and j not in pb)
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)
