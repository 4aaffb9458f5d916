"""Annotated tiles, target synthesis, augmentation, balanced sampling and dataset I/O.

On-disk layout::

    images/<id>.png          8-bit RGB
    labels/<id>_inst.png     16-bit instance ids
    labels/<id>_type.png     8-bit class indices (0 = background)
    manifest.tsv             id, tissue_label, fold
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage as ndi

log = logging.getLogger(__name__)

# nucleus classes follow the channel order of the PanNuke mask arrays
PANNUKE_CLASSES = ("Background", "Neoplastic", "Inflammatory", "Connective", "Dead", "Epithelial")
DEAD_CLASS = 4
PANNUKE_TISSUES = (
    "Adrenal_gland", "Bile-duct", "Bladder", "Breast", "Cervix", "Colon", "Esophagus", "HeadNeck",
    "Kidney", "Liver", "Lung", "Ovarian", "Pancreatic", "Prostate", "Skin", "Stomach", "Testis",
    "Thyroid", "Uterus",
)


@dataclass
class AnnotatedImage:
    """One tile.  ``rgb`` is uint8 ``[H, W, 3]``; label maps are ``[H, W]``."""

    id: str
    rgb: np.ndarray
    instance_map: np.ndarray
    type_map: np.ndarray
    tissue_label: int = 0
    fold_id: int = 0

    @property
    def shape(self):
        return self.instance_map.shape


@dataclass
class TrainingTargets:
    np_target: np.ndarray
    hv_target: np.ndarray
    nt_target: np.ndarray
    tissue_target: int


# ---------------------------------------------------------------------------
# targets


def make_hv_target(instance_map: np.ndarray) -> np.ndarray:
    """Per-instance horizontal/vertical offsets from the centroid, scaled to [-1, 1].

    Negative and positive offsets are scaled separately, so the leftmost
    (topmost) pixel of each instance maps to -1 and the rightmost
    (bottommost) to +1.  Background is 0.
    """
    inst = np.asarray(instance_map)
    hv = np.zeros((2,) + inst.shape, dtype=np.float32)
    ids = np.unique(inst)
    ids = ids[ids > 0]
    if ids.size == 0:
        return hv
    slices = ndi.find_objects(inst.astype(np.int64, copy=False))
    for k in ids:
        sl = slices[k - 1]
        if sl is None:
            continue
        mask = inst[sl] == k
        rows, cols = np.nonzero(mask)
        rows = rows.astype(np.float64)
        cols = cols.astype(np.float64)
        for ch, coord in ((0, cols), (1, rows)):
            off = coord - coord.mean()
            neg, pos = off < 0, off > 0
            if neg.any():
                off[neg] /= -off[neg].min()
            if pos.any():
                off[pos] /= off[pos].max()
            view = hv[ch][sl]
            view[mask] = off
    return hv


def make_targets(sample: AnnotatedImage) -> TrainingTargets:
    inst = sample.instance_map
    return TrainingTargets(
        np_target=(inst > 0).astype(np.int64),
        hv_target=make_hv_target(inst),
        nt_target=np.where(inst > 0, sample.type_map, 0).astype(np.int64),
        tissue_target=int(sample.tissue_label),
    )


def instance_types(instance_map: np.ndarray, type_map: np.ndarray) -> Dict[int, int]:
    """Majority non-background type per instance (ties to the lower class)."""
    out = {}
    inst = np.asarray(instance_map)
    for k, sl in enumerate(ndi.find_objects(inst.astype(np.int64, copy=False)), start=1):
        if sl is None:
            continue
        vals = type_map[sl][inst[sl] == k]
        vals = vals[vals > 0]
        if vals.size:
            out[k] = int(np.bincount(vals).argmax())
    return out


def relabel_sequential(instance_map: np.ndarray) -> np.ndarray:
    """Relabel ids to 1..N in order of first appearance (row-major scan)."""
    flat = instance_map.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids > 0
    ids, first = ids[keep], first[keep]
    order = ids[np.argsort(first, kind="stable")]
    lut = np.zeros(int(instance_map.max()) + 1 if instance_map.size else 1, dtype=np.int32)
    lut[order] = np.arange(1, len(order) + 1, dtype=np.int32)
    return lut[instance_map]


def repair_consistency(sample: AnnotatedImage, num_classes: Optional[int] = None) -> AnnotatedImage:
    """Enforce ``type == 0 <=> instance == 0`` and one type per instance (majority vote)."""
    inst = sample.instance_map.astype(np.int32)
    types = sample.type_map.astype(np.int32)
    if num_classes is not None and types.size and types.max() >= num_classes:
        raise ValueError(f"{sample.id}: type value {types.max()} >= number of classes {num_classes}")
    fixed = np.where(inst > 0, types, 0)
    votes = instance_types(inst, fixed)
    repaired = 0
    for k, sl in enumerate(ndi.find_objects(inst), start=1):
        if sl is None:
            continue
        m = inst[sl] == k
        if k not in votes:
            inst[sl][m] = 0
            repaired += 1
            continue
        region = fixed[sl]
        if np.any(region[m] != votes[k]):
            repaired += 1
        region[m] = votes[k]
    fixed = np.where(inst > 0, fixed, 0)
    if repaired or np.any(fixed != np.where(sample.type_map > 0, sample.type_map, 0)):
        log.warning("%s: repaired type/instance consistency for %d instance(s)", sample.id, repaired)
    return replace(sample, instance_map=inst, type_map=fixed.astype(np.uint8))


# ---------------------------------------------------------------------------
# dataset I/O


def read_manifest(root: Path) -> List[dict]:
    path = Path(root) / "manifest.tsv"
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    return [{"id": r["id"], "tissue_label": int(r["tissue_label"]), "fold": int(r["fold"])} for r in rows]


def write_manifest(root: Path, rows: Sequence[dict]) -> None:
    with open(Path(root) / "manifest.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["id", "tissue_label", "fold"])
        for r in rows:
            w.writerow([r["id"], r["tissue_label"], r["fold"]])


def read_label_png(path: Path) -> np.ndarray:
    if not Path(path).exists():
        raise FileNotFoundError(path)
    return np.asarray(Image.open(path)).astype(np.int32)


def write_instance_png(path: Path, instance_map: np.ndarray) -> None:
    if instance_map.max(initial=0) > 65535:
        raise ValueError("instance ids exceed the 16-bit label range")
    Image.fromarray(instance_map.astype(np.uint16)).save(path)


def write_sample(root: Path, sample: AnnotatedImage) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    Image.fromarray(sample.rgb.astype(np.uint8)).save(root / "images" / f"{sample.id}.png")
    write_instance_png(root / "labels" / f"{sample.id}_inst.png", sample.instance_map)
    Image.fromarray(sample.type_map.astype(np.uint8)).save(root / "labels" / f"{sample.id}_type.png")


def write_dataset(root: Path, samples: Sequence[AnnotatedImage]) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = read_manifest(root)
    known = {r["id"] for r in rows}
    for s in samples:
        write_sample(root, s)
        if s.id not in known:
            rows.append({"id": s.id, "tissue_label": s.tissue_label, "fold": s.fold_id})
    write_manifest(root, rows)


def load_sample(root: Path, row: dict, num_classes: Optional[int] = None) -> AnnotatedImage:
    root = Path(root)
    img_path = root / "images" / f"{row['id']}.png"
    if not img_path.exists():
        raise FileNotFoundError(img_path)
    rgb = np.asarray(Image.open(img_path).convert("RGB"))
    inst = read_label_png(root / "labels" / f"{row['id']}_inst.png")
    types = read_label_png(root / "labels" / f"{row['id']}_type.png")
    if inst.shape != rgb.shape[:2] or types.shape != rgb.shape[:2]:
        raise ValueError(f"{row['id']}: label shapes {inst.shape}/{types.shape} do not match image {rgb.shape[:2]}")
    sample = AnnotatedImage(row["id"], rgb, inst, types, row["tissue_label"], row["fold"])
    return repair_consistency(sample, num_classes)


def load_pannuke(root, fold: Optional[int] = None, num_classes: int = len(PANNUKE_CLASSES)) -> List[AnnotatedImage]:
    """Load every tile of ``fold`` (all folds when None) from a dataset directory."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(root)
    rows = [r for r in read_manifest(root) if fold is None or r["fold"] == fold]
    if not rows:
        log.warning("no samples found under %s for fold %s", root, fold)
        return []
    return [load_sample(root, r, num_classes) for r in rows]


def convert_pannuke(images_npy, masks_npy, types_npy, out_dir, fold: int, prefix: Optional[str] = None) -> int:
    """Write one PanNuke fold (``images.npy``, ``masks.npy``, ``types.npy``) into the tile layout.

    Mask channels 0-4 hold per-class instance ids and channel 5 is background;
    instances are renumbered to be unique per image.
    """
    images = np.load(images_npy, mmap_mode="r")
    masks = np.load(masks_npy, mmap_mode="r")
    tissues = np.load(types_npy, allow_pickle=True)
    if not (len(images) == len(masks) == len(tissues)):
        raise ValueError("images, masks and types arrays differ in length")
    tissue_index = {name: i for i, name in enumerate(PANNUKE_TISSUES)}
    prefix = prefix or f"fold{fold}"
    samples = []
    for n in range(len(images)):
        mask = np.asarray(masks[n])
        inst = np.zeros(mask.shape[:2], dtype=np.int32)
        types = np.zeros(mask.shape[:2], dtype=np.uint8)
        next_id = 1
        for ch in range(5):
            layer = mask[..., ch].astype(np.int64)
            for k in np.unique(layer):
                if k == 0:
                    continue
                m = layer == k
                inst[m] = next_id
                types[m] = ch + 1
                next_id += 1
        name = str(tissues[n])
        if name not in tissue_index:
            raise ValueError(f"unknown tissue type {name!r}")
        rgb = np.clip(np.asarray(images[n]), 0, 255).astype(np.uint8)
        samples.append(AnnotatedImage(f"{prefix}_{n:05d}", rgb, relabel_sequential(inst), types,
                                      tissue_index[name], fold))
    write_dataset(out_dir, samples)
    return len(samples)


# ---------------------------------------------------------------------------
# class alignment for external datasets

CONSEP_TARGETS = ("Background", "Neoplastic", "Inflammatory", "Epithelial", "Miscellaneous")
GLYSAC_TARGETS = ("Background", "Epithelial", "Inflammatory", "Miscellaneous")

_CONSEP_SOURCE = {
    0: "background", 1: "other", 2: "inflammatory", 3: "healthy epithelial",
    4: "dysplastic/malignant epithelial", 5: "fibroblast", 6: "muscle", 7: "endothelial",
}
_CONSEP_MAP = {
    "background": "Background", "other": "Miscellaneous", "inflammatory": "Inflammatory",
    "healthy epithelial": "Epithelial", "dysplastic/malignant epithelial": "Neoplastic",
    "fibroblast": "Miscellaneous", "muscle": "Miscellaneous", "endothelial": "Miscellaneous",
}
_GLYSAC_SOURCE = {0: "background", 1: "other", 2: "lymphocytes", 3: "epithelial"}
_GLYSAC_MAP = {
    "background": "Background", "other": "Miscellaneous", "miscellaneous": "Miscellaneous",
    "lymphocytes": "Inflammatory", "epithelial": "Epithelial",
}
# model (PanNuke-class) predictions onto each aligned label set
_PANNUKE_TO = {
    "CoNSeP": {"Background": "Background", "Neoplastic": "Neoplastic", "Inflammatory": "Inflammatory",
               "Connective": "Miscellaneous", "Dead": "Miscellaneous", "Epithelial": "Epithelial"},
    "GlySAC": {"Background": "Background", "Neoplastic": "Epithelial", "Inflammatory": "Inflammatory",
               "Connective": "Miscellaneous", "Dead": "Miscellaneous", "Epithelial": "Epithelial"},
}


def target_classes(dataset: str) -> tuple:
    if dataset == "CoNSeP":
        return CONSEP_TARGETS
    if dataset == "GlySAC":
        return GLYSAC_TARGETS
    raise ValueError(f"unknown dataset {dataset!r}")


def align_label(dataset: str, label) -> str:
    """Aligned class name for one source label (integer code or name)."""
    if dataset == "CoNSeP":
        source, table = _CONSEP_SOURCE, _CONSEP_MAP
    elif dataset == "GlySAC":
        source, table = _GLYSAC_SOURCE, _GLYSAC_MAP
    else:
        raise ValueError(f"unknown dataset {dataset!r}")
    key = source.get(int(label)) if not isinstance(label, str) else label.strip().lower()
    if key not in table:
        raise ValueError(f"unknown {dataset} label {label!r}")
    return table[key]


def align_classes(dataset: str, type_map: np.ndarray) -> np.ndarray:
    """Map a CoNSeP or GlySAC type map onto its aligned PanNuke-compatible label set."""
    targets = target_classes(dataset)
    type_map = np.asarray(type_map)
    out = np.zeros(type_map.shape, dtype=np.uint8)
    for v in np.unique(type_map):
        out[type_map == v] = targets.index(align_label(dataset, int(v)))
    return out


def align_pannuke_predictions(dataset: str, type_map: np.ndarray) -> np.ndarray:
    """Map PanNuke-class predictions onto the aligned label set of ``dataset``."""
    targets = target_classes(dataset)
    lut = np.array([targets.index(_PANNUKE_TO[dataset][name]) for name in PANNUKE_CLASSES], dtype=np.uint8)
    return lut[np.asarray(type_map)]


def resize_tile(sample: AnnotatedImage, size: int = 1024) -> AnnotatedImage:
    """Bilinear image resize, nearest-neighbour label resize (e.g. 1000 -> 1024 px tiles)."""
    rgb = np.asarray(Image.fromarray(sample.rgb).resize((size, size), Image.BILINEAR))
    inst = np.asarray(Image.fromarray(sample.instance_map.astype(np.int32)).resize((size, size), Image.NEAREST))
    types = np.asarray(Image.fromarray(sample.type_map.astype(np.uint8)).resize((size, size), Image.NEAREST))
    return replace(sample, rgb=rgb, instance_map=relabel_sequential(inst.astype(np.int32)), type_map=types)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    p_flip: float = 0.5
    p_rot90: float = 0.5
    p_rotate: float = 0.3
    max_rotation_deg: float = 180.0
    p_elastic: float = 0.2
    elastic_alpha: float = 30.0
    elastic_sigma: float = 5.0
    p_shift: float = 0.2
    max_shift_px: int = 16
    p_blur: float = 0.2
    max_blur_kernel: int = 5
    p_noise: float = 0.3
    max_noise_sigma: float = 0.05
    p_color_jitter: float = 0.3
    color_jitter: float = 0.1
    p_superpixel: float = 0.1

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(**{k: 0.0 for k in cls.__dataclass_fields__ if k.startswith("p_")})


def augment(sample: AnnotatedImage, seed, config: AugmentConfig = AugmentConfig()):
    """Randomly transformed copy of ``sample`` and its regenerated targets.

    Geometric transforms move image and label maps together (labels with
    nearest-neighbour sampling); photometric transforms touch the image only.
    HV targets are rebuilt from the transformed instance map rather than warped.
    Returns ``(AnnotatedImage, TrainingTargets)``.
    """
    rng = np.random.default_rng(seed)
    rgb = sample.rgb
    inst = sample.instance_map
    types = sample.type_map
    changed = False

    def geometric(fn):
        nonlocal rgb, inst, types, changed
        rgb = np.stack([fn(rgb[..., c], 1) for c in range(3)], axis=-1)
        inst, types = fn(inst, 0), fn(types, 0)
        changed = True

    if rng.random() < config.p_flip:
        axis = int(rng.integers(2))
        geometric(lambda a, order: np.flip(a, axis=axis))
    if rng.random() < config.p_rot90:
        k = int(rng.integers(1, 4))
        geometric(lambda a, order: np.rot90(a, k))
    if rng.random() < config.p_rotate:
        angle = float(rng.uniform(-config.max_rotation_deg, config.max_rotation_deg))
        geometric(lambda a, order: ndi.rotate(a, angle, reshape=False, order=order, mode="reflect" if order else "constant"))
    if rng.random() < config.p_shift:
        dy, dx = rng.integers(-config.max_shift_px, config.max_shift_px + 1, size=2)
        geometric(lambda a, order: ndi.shift(a, (dy, dx), order=order, mode="reflect" if order else "constant"))
    if rng.random() < config.p_elastic:
        h, w = inst.shape
        dx = ndi.gaussian_filter(rng.uniform(-1, 1, (h, w)), config.elastic_sigma) * config.elastic_alpha
        dy = ndi.gaussian_filter(rng.uniform(-1, 1, (h, w)), config.elastic_sigma) * config.elastic_alpha
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        coords = np.array([yy + dy, xx + dx])
        geometric(lambda a, order: ndi.map_coordinates(a, coords, order=order, mode="reflect" if order else "constant"))

    img = rgb.astype(np.float32) / 255.0
    photometric = False
    if rng.random() < config.p_blur:
        k = int(rng.integers(1, config.max_blur_kernel // 2 + 1)) * 2 + 1
        img = np.stack([ndi.uniform_filter(img[..., c], k) for c in range(3)], axis=-1)
        photometric = True
    if rng.random() < config.p_noise:
        img = img + rng.normal(0, rng.uniform(0, config.max_noise_sigma), img.shape)
        photometric = True
    if rng.random() < config.p_color_jitter:
        j = config.color_jitter
        brightness = rng.uniform(1 - j, 1 + j)
        contrast = rng.uniform(1 - j, 1 + j)
        mean = img.mean()
        img = (img - mean) * contrast + mean * brightness
        img = img * rng.uniform(1 - j, 1 + j, size=3)
        photometric = True
    if rng.random() < config.p_superpixel:
        from skimage.segmentation import slic

        seg = slic(np.clip(img, 0, 1), n_segments=200, compactness=10, start_label=1)
        means = np.stack([ndi.mean(img[..., c], seg, np.arange(1, seg.max() + 1)) for c in range(3)], -1)
        replace_mask = rng.random(seg.max()) < 0.1
        sp = means[seg - 1]
        img = np.where(replace_mask[seg - 1][..., None], sp, img)
        photometric = True

    if not (changed or photometric):
        return sample, make_targets(sample)
    if photometric:
        rgb = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    inst = relabel_sequential(np.ascontiguousarray(inst).astype(np.int32))
    types = np.where(inst > 0, np.ascontiguousarray(types), 0).astype(np.uint8)
    out = replace(sample, rgb=np.ascontiguousarray(rgb), instance_map=inst, type_map=types)
    return out, make_targets(out)


# ---------------------------------------------------------------------------
# balanced sampling


def sampling_weights(tissue_labels: Sequence[int], rare_counts: Sequence[int], gamma_s: float = 1.0,
                     beta_r: float = 0.1) -> np.ndarray:
    """``(1 / freq(tissue))^gamma_s * (1 + beta_r * rare_count)`` normalised to sum to 1."""
    tissue = np.asarray(tissue_labels)
    if tissue.size == 0:
        raise ValueError("cannot sample from an empty dataset")
    _, inverse, counts = np.unique(tissue, return_inverse=True, return_counts=True)
    freq = counts[inverse] / tissue.size
    w = (1.0 / freq) ** gamma_s * (1.0 + beta_r * np.asarray(rare_counts, dtype=np.float64))
    return w / w.sum()


def rare_nuclei_counts(samples: Sequence[AnnotatedImage], rare_class: int = DEAD_CLASS) -> np.ndarray:
    return np.array([sum(1 for t in instance_types(s.instance_map, s.type_map).values() if t == rare_class)
                     for s in samples])


def balanced_sampler(dataset: Sequence[AnnotatedImage], seed: int, gamma_s: float = 1.0, beta_r: float = 0.1,
                     rare_class: int = DEAD_CLASS, chunk: int = 4096) -> Iterator[int]:
    """Infinite reproducible stream of dataset indices drawn with :func:`sampling_weights`."""
    if len(dataset) == 0:
        raise ValueError("cannot sample from an empty dataset")
    weights = sampling_weights([s.tissue_label for s in dataset], rare_nuclei_counts(dataset, rare_class),
                               gamma_s, beta_r)
    return weighted_stream(weights, seed, chunk)


def weighted_stream(weights: np.ndarray, seed: int, chunk: int = 4096) -> Iterator[int]:
    rng = np.random.default_rng(seed)
    n = len(weights)
    while True:
        yield from (int(i) for i in rng.choice(n, size=chunk, p=weights))
