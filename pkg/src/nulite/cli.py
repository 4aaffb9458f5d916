"""Command-line entry point: ``nulite <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

log = logging.getLogger("nulite")


def _seed_everything(seed: Optional[int]) -> None:
    if seed is None:
        return
    import random

    import torch

    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def _load_config(args):
    from .runtime.config import load_config, with_seed

    return with_seed(load_config(args.config, args.set or []), args.seed)


# ---------------------------------------------------------------------------
# commands


def cmd_convert(args) -> int:
    from .data import convert_pannuke

    n = convert_pannuke(args.images, args.masks, args.types, args.out, args.fold)
    print(f"converted = {n}\nout = {args.out}")
    return 0


def cmd_train(args) -> int:
    from .data import load_pannuke
    from .plotting import loss_figure
    from .runtime.train import train
    from .synthetic import disk_dataset

    cfg = _load_config(args)
    if args.synthetic:
        dataset = disk_dataset(args.synthetic, size=64, seed=cfg.train.seed)
    else:
        root = args.data or cfg.data.root
        if not root:
            raise ValueError("no training data: pass --data, set [data].root, or use --synthetic N")
        dataset = [s for f in cfg.data.train_folds for s in load_pannuke(root, f, cfg.num_nuclei_classes)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(cfg, dataset, out_dir=str(out), log_path=str(out / "train_log.jsonl"))
    loss_figure(result.epoch_losses, out / "loss.png")
    with open(out / "summary.txt", "w") as fh:
        for e, (loss, lr) in enumerate(zip(result.epoch_losses, result.lrs)):
            fh.write(f"epoch={e}\tloss={loss:.6f}\tlr={lr:.6e}\n")
    print(f"epochs = {len(result.epoch_losses)}\nfinal_loss = {result.epoch_losses[-1] if result.epoch_losses else float('nan'):.6f}")
    print(f"checkpoint = {result.checkpoints[-1] if result.checkpoints else ''}")
    return 0


def _input_images(path: Path) -> List[Path]:
    if path.is_file():
        return [path]
    if (path / "images").is_dir():
        path = path / "images"
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".tif", ".tiff", ".jpg", ".jpeg"))
    if not files:
        raise FileNotFoundError(f"no images found under {path}")
    return files


def infer_image(net, rgb: np.ndarray, tile: int, overlap: int, params, mean, std):
    """Reflect-pad to a tileable size, run tiled inference and crop back."""
    from scipy import ndimage as ndi

    from .data import relabel_sequential
    from .postprocess import TypedNucleus
    from .runtime.tiling import infer_tiled, plan_tiles

    h, w = rgb.shape[:2]
    th = max(tile, -(-h // 32) * 32)
    tw = max(tile, -(-w // 32) * 32)
    if (th, tw) == (h, w):
        return infer_tiled(net, rgb, plan_tiles(h, w, tile, overlap), params, mean, std)
    padded = np.pad(rgb, ((0, th - h), (0, tw - w), (0, 0)), mode="reflect")
    inst, nuclei = infer_tiled(net, padded, plan_tiles(th, tw, tile, overlap), params, mean, std)
    by_id = {n.id: n for n in nuclei}
    cropped = relabel_sequential(inst[:h, :w])
    recs = []
    for k, sl in enumerate(ndi.find_objects(cropped), start=1):
        if sl is None:
            continue
        m = cropped[sl] == k
        rows, cols = np.nonzero(m)
        r0, c0 = sl[0].start, sl[1].start
        src = by_id[int(inst[r0 + rows[0], c0 + cols[0]])]
        recs.append(TypedNucleus(k, src.class_id, src.class_prob, (float(rows.mean() + r0), float(cols.mean() + c0)),
                                 (int(r0 + rows.min()), int(c0 + cols.min()), int(r0 + rows.max() + 1),
                                  int(c0 + cols.max() + 1)), int(m.sum())))
    return cropped, recs


def cmd_infer(args) -> int:
    from PIL import Image

    from .network import reparameterize_network
    from .plotting import overlay_figure
    from .postprocess import type_map, write_detections, write_instance_map
    from .runtime.train import load_checkpoint

    net, cfg, payload = load_checkpoint(args.model)
    if not net.reparameterized:
        net = reparameterize_network(net)
    tile = args.tile or cfg.eval.tile_size
    overlap = cfg.eval.overlap_px if args.overlap is None else args.overlap
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in _input_images(Path(args.input)):
        rgb = np.asarray(Image.open(path).convert("RGB"))
        inst, nuclei = infer_image(net, rgb, tile, overlap, cfg.postprocess, payload["mean"], payload["std"])
        write_instance_map(out / f"{path.stem}_inst.png", inst)
        write_detections(out / f"{path.stem}_detections.jsonl", nuclei)
        if args.overlay:
            overlay_figure(rgb, inst, type_map(inst, nuclei), path=out / f"{path.stem}_overlay.png", title=path.stem)
        print(f"{path.stem}\tnuclei={len(nuclei)}")
    return 0


def _read_split(root: Path):
    """``{id: (instance_map, types, tissue)}`` from a dataset or prediction directory."""
    from .data import PANNUKE_TISSUES, read_label_png, read_manifest
    from .postprocess import read_detections

    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(root)
    out = {}
    rows = read_manifest(root)
    if rows:
        for r in rows:
            inst = read_label_png(root / "labels" / f"{r['id']}_inst.png")
            types = read_label_png(root / "labels" / f"{r['id']}_type.png")
            t = r["tissue_label"]
            out[r["id"]] = (inst, types, PANNUKE_TISSUES[t] if 0 <= t < len(PANNUKE_TISSUES) else str(t))
        return out
    for p in sorted(root.glob("*_inst.png")):
        sid = p.name[: -len("_inst.png")]
        inst = read_label_png(p)
        det = root / f"{sid}_detections.jsonl"
        types = {n.id: n.class_id for n in read_detections(det)} if det.exists() else (inst > 0).astype(np.int32)
        out[sid] = (inst, types, "all")
    if not out:
        raise FileNotFoundError(f"no label images found under {root}")
    return out


def cmd_eval(args) -> int:
    from .metrics import aggregate_report, evaluate_image, format_report
    from .plotting import tissue_figure

    gt = _read_split(Path(args.gt))
    pred = _read_split(Path(args.pred))
    missing = sorted(set(gt) - set(pred))
    if missing:
        raise FileNotFoundError(f"{len(missing)} ground-truth image(s) have no prediction, e.g. {missing[0]}")
    results = []
    for sid in sorted(gt):
        g_inst, g_types, tissue = gt[sid]
        p_inst, p_types, _ = pred[sid]
        results.append(evaluate_image(g_inst, g_types, p_inst, p_types, args.num_classes, sid, tissue, args.radius))
    report = aggregate_report(results, args.num_classes)
    text = format_report(report)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        tissue_figure(report.per_tissue, out.with_suffix(".png"))
    print(text, end="")
    return 0


def cmd_profile(args) -> int:
    from .plotting import complexity_figure
    from .profiler import CELLVIT_REFERENCE, format_report, profile, reference_report

    sizes = tuple(args.input_size)
    report = profile(args.variant, reparameterized=not args.no_rep, sizes=sizes,
                     latency_repeats=args.latency, latency_batch=args.latency_batch, seed=args.seed or 0)
    compare = None
    if args.compare:
        if args.compare not in CELLVIT_REFERENCE:
            raise ValueError(f"unknown reference {args.compare!r}; expected one of {sorted(CELLVIT_REFERENCE)}")
        compare = reference_report(args.compare)
    text = format_report(report, compare)
    print(text)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        rows = [report.as_records()] + ([compare.as_records()] if compare else [])
        out.write_text(text + "\n\n" + "\n".join(json.dumps(r) for r in rows) + "\n")
        complexity_figure(rows, sizes[0], out.with_suffix(".png"))
    return 0


def cmd_overlay(args) -> int:
    from PIL import Image

    from .data import read_label_png
    from .plotting import overlay_figure
    from .postprocess import read_detections, type_map

    rgb = np.asarray(Image.open(args.image).convert("RGB"))
    inst = read_label_png(Path(args.inst))
    types = None
    if args.detections:
        types = type_map(inst, read_detections(args.detections))
    elif args.types:
        types = read_label_png(Path(args.types))
    if inst.shape != rgb.shape[:2]:
        raise ValueError(f"label image {inst.shape} does not match RGB image {rgb.shape[:2]}")
    from .data import PANNUKE_CLASSES

    overlay_figure(rgb, inst, types, PANNUKE_CLASSES, path=args.out, title=Path(args.image).stem)
    print(f"overlay = {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nulite", description="Nuclei instance segmentation and classification.")
    p.add_argument("--seed", type=int, default=None, help="seed for every stochastic component")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("convert-dataset", help="convert PanNuke fold arrays into the tile layout")
    c.add_argument("--images", required=True)
    c.add_argument("--masks", required=True)
    c.add_argument("--types", required=True)
    c.add_argument("--fold", type=int, required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_convert)

    t = sub.add_parser("train", help="train a network")
    t.add_argument("--config")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
    t.add_argument("--data", help="dataset root (overrides [data].root)")
    t.add_argument("--synthetic", type=int, default=0, metavar="N", help="train on N synthetic disk tiles")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="tiled inference on images")
    i.add_argument("--model", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--tile", type=int, default=None)
    i.add_argument("--overlap", type=int, default=None)
    i.add_argument("--overlay", action="store_true", help="also write <id>_overlay.png")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--num-classes", type=int, default=6)
    e.add_argument("--radius", type=float, default=12.0)
    e.add_argument("--out", help="report file; a figure is written next to it")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("profile", help="parameter / FLOP / size / latency report")
    pr.add_argument("--variant", default="NuLite-T")
    pr.add_argument("--input-size", type=int, nargs="+", default=[256])
    pr.add_argument("--no-rep", action="store_true", help="profile the branch-form network")
    pr.add_argument("--compare", help="reference model: cellvit256 or cellvit-sam-h")
    pr.add_argument("--latency", type=int, default=0, metavar="REPEATS")
    pr.add_argument("--latency-batch", type=int, default=4)
    pr.add_argument("--out", help="report file; a figure is written next to it")
    pr.set_defaults(func=cmd_profile)

    o = sub.add_parser("overlay", help="draw instance boundaries on an image")
    o.add_argument("--image", required=True)
    o.add_argument("--inst", required=True)
    g = o.add_mutually_exclusive_group()
    g.add_argument("--detections")
    g.add_argument("--types")
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_overlay)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    _seed_everything(args.seed)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError, RuntimeError, OSError) as exc:
        print(f"error: command={args.command} type={type(exc).__name__} message={exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
