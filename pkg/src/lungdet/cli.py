"""``lungdet`` command line: preprocess, infer, eval, bench, selftest."""
from __future__ import annotations

import argparse
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import jsonio
from .config import ConfigError, PipelineConfig, load_config, with_paths
from .ct_io import parse_annotations_csv, read_volume
from .detect_head import detect, model_param_shapes, slice_to_input
from .evaluator import EvalConsistencyError, area_histogram, evaluate, format_report, histogram_csv
from .preprocess import (
    CocoDataset,
    export_coco,
    extract_slices,
    manifest_csv,
    read_manifest,
    read_pgm,
    write_slice_pgm,
)
from .selftest import run_selftest
from .swin_backbone import WeightsError, check_weights
from .weights import ArchiveError, load_archive, parameter_count, save_archive, seeded_weights

log = logging.getLogger("lungdet")

COCO_NAME = "coco_all.json"
MANIFEST_NAME = "manifest.csv"
RESULTS_NAME = "results.json"
IMAGES_DIR = "images"


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------- preprocess

def cmd_preprocess(cfg: PipelineConfig) -> dict:
    cfg.validate(need=("scans_dir", "annotations"))
    scans = sorted(Path(cfg.scans_dir).glob("*.mhd"))
    if not scans:
        raise CommandError(f"no volumes found in {cfg.scans_dir}")
    annotations = parse_annotations_csv(Path(cfg.annotations).read_text(encoding="utf-8"))
    by_uid: dict[str, list] = {}
    for a in annotations:
        by_uid.setdefault(a.series_uid, []).append(a)

    out = Path(cfg.output_dir)
    (out / IMAGES_DIR).mkdir(parents=True, exist_ok=True)
    slices, labels, failures = [], [], []
    for path in scans:
        try:
            vol = read_volume(path)
        except (OSError, ValueError) as exc:
            log.error("%s: %s", path.name, exc)
            failures.append(path.name)
            continue
        s, lab = extract_slices(vol, by_uid.get(vol.series_uid, []), cfg.hu_lo, cfg.hu_hi, cfg.radius_scale)
        for sl in s:
            write_slice_pgm(sl, out / IMAGES_DIR / sl.file_name)
        slices.extend(s)
        labels.extend(lab)

    coco = export_coco(slices, labels)
    (out / COCO_NAME).write_text(coco.to_json(), encoding="utf-8")
    (out / MANIFEST_NAME).write_text(manifest_csv(slices), encoding="utf-8")
    counts = {"scans": len(scans) - len(failures), "slices": len(slices), "annotations": len(coco.annotations)}
    print(f"scans: {counts['scans']}  slices: {counts['slices']}  annotations: {counts['annotations']}")
    if failures:
        raise CommandError(f"{len(failures)} volume(s) failed: {', '.join(failures)}")
    return counts


# ---------------------------------------------------------------- infer

def load_model_weights(cfg: PipelineConfig, seed: int | None = None) -> dict:
    shapes = model_param_shapes(cfg.swin, cfg.detector)
    if seed is not None or cfg.weights is None:
        return seeded_weights(shapes, cfg.seed if seed is None else seed)
    weights = load_archive(cfg.weights)
    check_weights(weights, shapes)
    return weights


def detections_to_results(image_id: int, dets) -> list[dict]:
    out = []
    for d in dets:
        x1, y1, x2, y2 = d.box
        out.append({
            "image_id": int(image_id),
            "category_id": int(d.label),
            "bbox": [jsonio.fixed(x1), jsonio.fixed(y1), jsonio.fixed(x2 - x1), jsonio.fixed(y2 - y1)],
            "score": jsonio.fixed(d.score),
        })
    return out


def cmd_infer(cfg: PipelineConfig, seed: int | None = None) -> list[dict]:
    out = Path(cfg.output_dir)
    manifest_path, coco_path = out / MANIFEST_NAME, out / COCO_NAME
    for p in (manifest_path, coco_path):
        if not p.exists():
            raise CommandError(f"{p} not found; run preprocess first")
    coco = CocoDataset.from_json(coco_path.read_text(encoding="utf-8"))
    ids = {im["file_name"]: im["id"] for im in coco.images}
    weights = load_model_weights(cfg, seed)

    results = []
    for _, _, file_name in read_manifest(manifest_path.read_text(encoding="utf-8")):
        if file_name not in ids:
            raise CommandError(f"manifest image {file_name} missing from {COCO_NAME}")
        pixels = read_pgm(out / IMAGES_DIR / file_name)
        dets = detect(slice_to_input(pixels), weights, cfg.swin, cfg.detector)
        results.extend(detections_to_results(ids[file_name], dets))
    results.sort(key=lambda r: (r["image_id"], -r["score"]))
    (out / RESULTS_NAME).write_text(jsonio.dumps(results), encoding="utf-8")
    print(f"images: {len(ids)}  detections: {len(results)}")
    return results


# ---------------------------------------------------------------- eval

def cmd_eval(gt_path, results_path, cfg: PipelineConfig, out_json=None, hist_csv=None):
    gt = jsonio.loads(Path(gt_path).read_text(encoding="utf-8"))
    results = jsonio.loads(Path(results_path).read_text(encoding="utf-8"))
    res = evaluate(gt, results, cfg.eval)
    print(format_report(res), end="")
    if out_json:
        Path(out_json).write_text(res.to_json(), encoding="utf-8")
    if hist_csv:
        areas = [a["bbox"][2] * a["bbox"][3] for a in gt["annotations"]]
        Path(hist_csv).write_text(histogram_csv(area_histogram(areas, cfg.hist_bin_width)), encoding="utf-8")
    return res


# ---------------------------------------------------------------- bench / selftest

def cmd_bench(cfg: PipelineConfig, runs: int = 5, size: int | None = None, seed: int | None = None) -> dict:
    weights = load_model_weights(cfg, seed)
    side = size or cfg.swin.img_size
    rng = np.random.default_rng(cfg.seed)
    image = slice_to_input(rng.integers(0, 4096, size=(side, side)))
    times = []
    for _ in range(max(runs, 1)):
        t0 = time.perf_counter()
        detect(image, weights, cfg.swin, cfg.detector)
        times.append(time.perf_counter() - t0)
    report = {"image_side": side, "runs": len(times), "median_seconds": statistics.median(times),
              "parameters": parameter_count(weights)}
    print(f"image {side}x{side}  runs {len(times)}  median {report['median_seconds']:.3f} s/slice  "
          f"parameters {report['parameters']}")
    return report


def cmd_selftest(perturb: str | None = None) -> bool:
    rows = run_selftest(perturb)
    print(f"{'suite':<10} {'result':<6} {'time':>7}  detail")
    for name, ok, detail, secs in rows:
        print(f"{name:<10} {'PASS' if ok else 'FAIL':<6} {secs:6.2f}s  {detail}")
    return all(ok for _, ok, _, _ in rows)


# ---------------------------------------------------------------- argparse

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lungdet", description="2D lung-nodule detection pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config key (repeatable)")
        sp.add_argument("--output-dir")

    sp = sub.add_parser("preprocess", help="volumes + annotations -> 12-bit slices, COCO JSON, manifest")
    common(sp)
    sp.add_argument("--scans-dir")
    sp.add_argument("--annotations")

    sp = sub.add_parser("infer", help="run the detector over the preprocessed slices")
    common(sp)
    sp.add_argument("--weights", help="NTAR1 weights archive")
    sp.add_argument("--seed-weights", type=int, metavar="SEED", help="use deterministic random weights")
    sp.add_argument("--write-weights", metavar="PATH", help="also save the weights used as an archive")

    sp = sub.add_parser("eval", help="score COCO results against COCO ground truth")
    common(sp)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--results", required=True)
    sp.add_argument("--out-json")
    sp.add_argument("--hist-csv")

    sp = sub.add_parser("bench", help="time per-slice inference and count parameters")
    common(sp)
    sp.add_argument("--weights")
    sp.add_argument("--seed-weights", type=int, metavar="SEED")
    sp.add_argument("--runs", type=int, default=5)
    sp.add_argument("--size", type=int)

    sp = sub.add_parser("selftest", help="run embedded oracle suites")
    sp.add_argument("--perturb", choices=("iou", "nms", "ap", "roi_align", "shapes"),
                    help="corrupt one kernel to confirm its suite fails")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "selftest":
            return 0 if cmd_selftest(args.perturb) else 1
        cfg = load_config(args.config, args.set)
        cfg = with_paths(cfg, output_dir=args.output_dir, scans_dir=getattr(args, "scans_dir", None),
                         annotations=getattr(args, "annotations", None), weights=getattr(args, "weights", None))
        cfg.validate()
        if args.command == "preprocess":
            cmd_preprocess(cfg)
        elif args.command == "infer":
            if args.weights is None and args.seed_weights is None and cfg.weights is None:
                raise CommandError("infer needs --weights, --seed-weights or paths.weights in the config")
            cmd_infer(cfg, args.seed_weights)
            if args.write_weights:
                save_archive(load_model_weights(cfg, args.seed_weights), args.write_weights)
        elif args.command == "eval":
            cmd_eval(args.gt, args.results, cfg, args.out_json, args.hist_csv)
        elif args.command == "bench":
            cmd_bench(cfg, args.runs, args.size, args.seed_weights)
    except (CommandError, ConfigError, ArchiveError, WeightsError, EvalConsistencyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
