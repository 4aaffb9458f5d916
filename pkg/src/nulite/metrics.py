"""Panoptic quality and detection metrics for nucleus instance maps.

Conventions:

* instance matching pairs every (gt, pred) couple with IoU > 0.5, which is
  unique by construction;
* SQ is 0 when there are no true positives; an image where gt and pred are
  both empty yields nan, and nan entries are skipped by every average;
* detection pairing is greedy nearest-centroid within a radius;
* rates with a zero denominator are reported as 0.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage as ndi

from .data import instance_types

NAN = float("nan")
DEFAULT_RADIUS_PX = 12.0


@dataclass
class MatchResult:
    tp_pairs: List[Tuple[int, int, float]]
    fp_ids: List[int]
    fn_ids: List[int]


def _ids(inst: np.ndarray) -> np.ndarray:
    u = np.unique(inst)
    return u[u > 0]


def match_instances(gt: np.ndarray, pred: np.ndarray) -> MatchResult:
    """All (gt, pred) pairs whose IoU exceeds 0.5."""
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: gt {gt.shape} vs pred {pred.shape}")
    g_ids, p_ids = _ids(gt), _ids(pred)
    g_area = dict(zip(*np.unique(gt[gt > 0], return_counts=True)))
    p_area = dict(zip(*np.unique(pred[pred > 0], return_counts=True)))
    both = (gt > 0) & (pred > 0)
    pairs, inter = np.unique(np.stack([gt[both], pred[both]]), axis=1, return_counts=True)
    tp = []
    for (g, p), n in zip(pairs.T, inter):
        iou = n / (g_area[g] + p_area[p] - n)
        if iou > 0.5:
            tp.append((int(g), int(p), float(iou)))
    tp.sort()
    matched_g = {g for g, _, _ in tp}
    matched_p = {p for _, p, _ in tp}
    return MatchResult(tp, [int(p) for p in p_ids if p not in matched_p], [int(g) for g in g_ids if g not in matched_g])


def panoptic_quality(match: MatchResult) -> Tuple[float, float, float]:
    """``(DQ, SQ, PQ)``; nan for an empty-vs-empty comparison."""
    tp, fp, fn = len(match.tp_pairs), len(match.fp_ids), len(match.fn_ids)
    if tp + fp + fn == 0:
        return NAN, NAN, NAN
    dq = tp / (tp + 0.5 * fp + 0.5 * fn)
    sq = math.fsum(iou for _, _, iou in match.tp_pairs) / tp if tp else 0.0
    return dq, sq, dq * sq


def _type_lookup(inst: np.ndarray, types) -> Dict[int, int]:
    if isinstance(types, Mapping):
        return {int(k): int(v) for k, v in types.items()}
    types = np.asarray(types)
    if types.shape != inst.shape:
        raise ValueError("type map shape does not match instance map")
    return instance_types(inst, types)


def restrict(inst: np.ndarray, lookup: Mapping[int, int], cls: int) -> np.ndarray:
    keep = np.zeros(int(inst.max(initial=0)) + 1, dtype=bool)
    for k, c in lookup.items():
        if c == cls and k < keep.size:
            keep[k] = True
    return np.where(keep[inst], inst, 0)


def nanmean(values) -> float:
    """Order-independent mean over the finite entries (nan when there are none)."""
    vals = [float(v) for v in values if not math.isnan(v)]
    return math.fsum(vals) / len(vals) if vals else NAN


def pq_binary_and_multiclass(gt_inst, gt_types, pred_inst, pred_types, num_classes: int):
    """``(bPQ, mPQ, {class: (DQ, SQ, PQ)})`` for one image.

    Types are either pixel type maps or ``{instance id: class}`` mappings.
    Classes absent from both maps report nan and do not enter mPQ.
    """
    gt_inst = np.asarray(gt_inst)
    pred_inst = np.asarray(pred_inst)
    bpq = panoptic_quality(match_instances(gt_inst, pred_inst))[2]
    g_lookup = _type_lookup(gt_inst, gt_types)
    p_lookup = _type_lookup(pred_inst, pred_types)
    per_class = {}
    for c in range(1, num_classes):
        m = match_instances(restrict(gt_inst, g_lookup, c), restrict(pred_inst, p_lookup, c))
        per_class[c] = panoptic_quality(m)
    mpq = nanmean(v[2] for v in per_class.values())
    return bpq, mpq, per_class


# ---------------------------------------------------------------------------
# detection


@dataclass
class DetectionCounts:
    """Pooled detection/classification counts; additive across images."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    # (gt class, pred class) -> number of detection pairs
    pairs: Dict[Tuple[int, int], int] = field(default_factory=dict)
    unpaired_pred: Dict[int, int] = field(default_factory=dict)
    unpaired_gt: Dict[int, int] = field(default_factory=dict)

    def __add__(self, other: "DetectionCounts") -> "DetectionCounts":
        def merge(a, b):
            out = dict(a)
            for k, v in b.items():
                out[k] = out.get(k, 0) + v
            return out
        return DetectionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                               merge(self.pairs, other.pairs), merge(self.unpaired_pred, other.unpaired_pred),
                               merge(self.unpaired_gt, other.unpaired_gt))

    def class_terms(self, c: int) -> Dict[str, int]:
        tp_c = self.pairs.get((c, c), 0)
        tn_c = sum(n for (g, p), n in self.pairs.items() if g == p and g != c)
        fp_c = sum(n for (g, p), n in self.pairs.items() if p == c and g != c)
        fn_c = sum(n for (g, p), n in self.pairs.items() if g == c and p != c)
        return {"tp": tp_c, "tn": tn_c, "fp": fp_c, "fn": fn_c,
                "fp_d": self.unpaired_pred.get(c, 0), "fn_d": self.unpaired_gt.get(c, 0)}


def _ratio(num, den) -> float:
    return num / den if den else 0.0


def greedy_pairs(gt_xy: np.ndarray, pred_xy: np.ndarray, radius_px: float) -> List[Tuple[int, int]]:
    """Unique pairs by ascending centroid distance (ties by gt then pred index) within ``radius_px``."""
    if len(gt_xy) == 0 or len(pred_xy) == 0:
        return []
    # squared distances rounded to 1e-9 so exact geometric ties stay ties under float error
    d2 = np.round(((gt_xy[:, None, :] - pred_xy[None, :, :]) ** 2).sum(-1), 9)
    gi, pi = np.nonzero(d2 <= round(radius_px * radius_px, 9))
    order = np.lexsort((pi, gi, d2[gi, pi]))
    used_g, used_p, out = set(), set(), []
    for k in order:
        g, p = int(gi[k]), int(pi[k])
        if g in used_g or p in used_p:
            continue
        used_g.add(g)
        used_p.add(p)
        out.append((g, p))
    return out


def detection_counts(gt: Sequence[Tuple[float, float, int]], pred: Sequence[Tuple[float, float, int]],
                     radius_px: float = DEFAULT_RADIUS_PX) -> DetectionCounts:
    """Counts from ``(row, col, class)`` centroid lists."""
    if radius_px <= 0:
        raise ValueError("detection radius must be positive")
    g = np.asarray([(r, c) for r, c, _ in gt], dtype=np.float64).reshape(-1, 2)
    p = np.asarray([(r, c) for r, c, _ in pred], dtype=np.float64).reshape(-1, 2)
    pairs = greedy_pairs(g, p, radius_px)
    counts = DetectionCounts(tp=len(pairs), fp=len(pred) - len(pairs), fn=len(gt) - len(pairs))
    for gi, pi in pairs:
        key = (int(gt[gi][2]), int(pred[pi][2]))
        counts.pairs[key] = counts.pairs.get(key, 0) + 1
    paired_g = {gi for gi, _ in pairs}
    paired_p = {pi for _, pi in pairs}
    for i, (_, _, c) in enumerate(gt):
        if i not in paired_g:
            counts.unpaired_gt[int(c)] = counts.unpaired_gt.get(int(c), 0) + 1
    for i, (_, _, c) in enumerate(pred):
        if i not in paired_p:
            counts.unpaired_pred[int(c)] = counts.unpaired_pred.get(int(c), 0) + 1
    return counts


@dataclass
class DetectionScores:
    precision: float
    recall: float
    f1: float
    accuracy: float  # type agreement over detection pairs
    per_class: Dict[int, Dict[str, float]]


def scores_from_counts(counts: DetectionCounts, num_classes: int) -> DetectionScores:
    p = _ratio(counts.tp, counts.tp + counts.fp)
    r = _ratio(counts.tp, counts.tp + counts.fn)
    f1 = _ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn)
    agree = sum(n for (g, q), n in counts.pairs.items() if g == q)
    acc = _ratio(agree, sum(counts.pairs.values()))
    per_class = {}
    for c in range(1, num_classes):
        t = counts.class_terms(c)
        pos = t["tp"] + t["tn"]
        per_class[c] = {
            "precision": _ratio(pos, pos + 2 * t["fp"] + t["fp_d"]),
            "recall": _ratio(pos, pos + 2 * t["fn"] + t["fn_d"]),
            "f1": _ratio(2 * pos, 2 * pos + 2 * t["fp"] + 2 * t["fn"] + t["fp_d"] + t["fn_d"]),
        }
    return DetectionScores(p, r, f1, acc, per_class)


def detection_scores(gt, pred, radius_px: float = DEFAULT_RADIUS_PX, num_classes: Optional[int] = None):
    """Detection P/R/F1 and per-class P_c/R_c/F1_c from ``(row, col, class)`` lists."""
    if num_classes is None:
        num_classes = max([int(c) for *_, c in list(gt) + list(pred)], default=0) + 1
    return scores_from_counts(detection_counts(gt, pred, radius_px), num_classes)


def centroids(inst: np.ndarray, types) -> List[Tuple[float, float, int]]:
    inst = np.asarray(inst)
    lookup = _type_lookup(inst, types)
    ids = _ids(inst)
    if ids.size == 0:
        return []
    cms = ndi.center_of_mass(np.ones_like(inst), inst, ids)
    return [(float(r), float(c), lookup.get(int(k), 0)) for k, (r, c) in zip(ids, cms)]


# ---------------------------------------------------------------------------
# per-image results and aggregation


@dataclass
class ImageResult:
    image_id: str
    tissue: str
    binary: Tuple[float, float, float]
    bpq: float
    mpq: float
    per_class: Dict[int, Tuple[float, float, float]]
    detection: DetectionCounts


def evaluate_image(gt_inst, gt_types, pred_inst, pred_types, num_classes: int, image_id: str = "",
                   tissue: str = "all", radius_px: float = DEFAULT_RADIUS_PX) -> ImageResult:
    binary = panoptic_quality(match_instances(gt_inst, pred_inst))
    bpq, mpq, per_class = pq_binary_and_multiclass(gt_inst, gt_types, pred_inst, pred_types, num_classes)
    det = detection_counts(centroids(gt_inst, gt_types), centroids(pred_inst, pred_types), radius_px)
    return ImageResult(image_id, tissue, binary, bpq, mpq, per_class, det)


@dataclass
class MetricsReport:
    image_count: int
    num_classes: int
    binary: Dict[str, float]
    bpq: float
    mpq: float
    per_class_pq: Dict[int, Dict[str, float]]
    detection: Dict[str, float]
    per_class_detection: Dict[int, Dict[str, float]]
    per_tissue: Dict[str, Dict[str, float]]
    tissue_average: Dict[str, float]
    tissue_std: Dict[str, float]

    def records(self) -> Dict[str, float]:
        out = {"images": self.image_count, "bPQ": self.bpq, "mPQ": self.mpq}
        out.update({f"binary.{k}": v for k, v in self.binary.items()})
        for c, d in self.per_class_pq.items():
            out.update({f"class{c}.{k}": v for k, v in d.items()})
        out.update({f"detection.{k}": v for k, v in self.detection.items()})
        for c, d in self.per_class_detection.items():
            out.update({f"class{c}.{k}": v for k, v in d.items()})
        for t, d in sorted(self.per_tissue.items()):
            out.update({f"tissue.{t}.{k}": v for k, v in d.items()})
        out.update({f"tissue.Average.{k}": v for k, v in self.tissue_average.items()})
        out.update({f"tissue.STD.{k}": v for k, v in self.tissue_std.items()})
        return out


def pstdev(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    if not vals:
        return NAN
    mu = math.fsum(vals) / len(vals)
    return math.sqrt(math.fsum((v - mu) ** 2 for v in vals) / len(vals))


def aggregate_report(results: Sequence[ImageResult], num_classes: Optional[int] = None) -> MetricsReport:
    """Dataset report: image means, pooled detection counts, per-tissue means and their mean/population STD."""
    if not results:
        raise ValueError("cannot aggregate an empty result list")
    if num_classes is None:
        num_classes = max(max(r.per_class, default=0) for r in results) + 1
    binary = {k: nanmean(r.binary[i] for r in results) for i, k in enumerate(("DQ", "SQ", "PQ"))}
    per_class = {c: {k: nanmean(r.per_class.get(c, (NAN,) * 3)[i] for r in results)
                     for i, k in enumerate(("DQ", "SQ", "PQ"))} for c in range(1, num_classes)}
    counts = DetectionCounts()
    # pool in a fixed order so integer sums are trivially order independent
    for r in results:
        counts = counts + r.detection
    det = scores_from_counts(counts, num_classes)
    groups = defaultdict(list)
    for r in results:
        groups[r.tissue].append(r)
    per_tissue = {t: {"bPQ": nanmean(r.bpq for r in rs), "mPQ": nanmean(r.mpq for r in rs), "images": len(rs)}
                  for t, rs in groups.items()}
    keys = ("bPQ", "mPQ")
    return MetricsReport(
        image_count=len(results),
        num_classes=num_classes,
        binary=binary,
        bpq=nanmean(r.bpq for r in results),
        mpq=nanmean(r.mpq for r in results),
        per_class_pq=per_class,
        detection={"precision": det.precision, "recall": det.recall, "f1": det.f1, "accuracy": det.accuracy},
        per_class_detection=det.per_class,
        per_tissue=per_tissue,
        tissue_average={k: nanmean(v[k] for v in per_tissue.values()) for k in keys},
        tissue_std={k: pstdev([v[k] for v in per_tissue.values()]) for k in keys},
    )


def format_report(report: MetricsReport, class_names: Optional[Sequence[str]] = None) -> str:
    """Key-value text with a tissue table (mPQ/bPQ) and a per-class table (DQ/SQ/PQ, P/R/F1)."""
    name = (lambda c: class_names[c]) if class_names else (lambda c: f"class{c}")
    lines = [f"images = {report.image_count}", f"bPQ = {report.bpq:.4f}", f"mPQ = {report.mpq:.4f}"]
    lines += [f"binary.{k} = {v:.4f}" for k, v in report.binary.items()]
    lines += [f"detection.{k} = {v:.4f}" for k, v in report.detection.items()]
    lines += ["", "[tissue]", "tissue\tmPQ\tbPQ"]
    for t in sorted(report.per_tissue):
        d = report.per_tissue[t]
        lines.append(f"{t}\t{d['mPQ']:.4f}\t{d['bPQ']:.4f}")
    lines.append(f"Average\t{report.tissue_average['mPQ']:.4f}\t{report.tissue_average['bPQ']:.4f}")
    lines.append(f"STD\t{report.tissue_std['mPQ']:.4f}\t{report.tissue_std['bPQ']:.4f}")
    lines += ["", "[class]", "class\tDQ\tSQ\tPQ\tP\tR\tF1"]
    for c in sorted(report.per_class_pq):
        q, d = report.per_class_pq[c], report.per_class_detection.get(c, {})
        lines.append("\t".join([name(c)] + [f"{q[k]:.4f}" for k in ("DQ", "SQ", "PQ")]
                               + [f"{d.get(k, NAN):.4f}" for k in ("precision", "recall", "f1")]))
    return "\n".join(lines) + "\n"
