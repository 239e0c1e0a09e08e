"""``fogdet`` command line: data synthesis, training, evaluation, inference, studies, timing.

Exit codes: 0 success, 1 validation error, 2 runtime failure.  Every command
writes a ``manifest.json`` next to its outputs.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import VARIANTS, WEIGHT_GRID, ConfigError, TrainConfig, load_config, save_config
from .datakit import (SceneConfig, annotation_to_voc, generate_toy_scene, load_annotation, load_paired_dataset,
                      read_index, write_index)
from .weathersim import (DEFAULT_AIRLIGHT, TEST_BETA_RANGE, TRAIN_BETA_RANGE, FogParams, apply_fog, load_image,
                         sample_beta, save_image)

logger = logging.getLogger("fogdet")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class ValidationError(Exception):
    pass


# -- helpers ---------------------------------------------------------------------


def content_hash(paths) -> str:
    """SHA-256 over the bytes of ``paths`` in sorted order."""
    h = hashlib.sha256()
    for p in sorted(Path(p) for p in paths):
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def write_manifest(out_dir, command: str, config: dict, seed, artifacts, inputs=()) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "seed": seed,
        "artifacts": sorted(str(a) for a in artifacts),
        "input_hash": content_hash(inputs),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return path


def write_records(path, rows) -> None:
    """Machine-readable line-delimited records."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value
    return out


def resolve_config(args) -> TrainConfig:
    overrides = parse_overrides(getattr(args, "set", None))
    for flag, key in (("seed", "seed"), ("epochs", "epochs"), ("data", "data_root")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return load_config(getattr(args, "config", None), overrides)


def _list_images(root: Path):
    folder = root / "images" if (root / "images").is_dir() else root
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


# -- data commands -----------------------------------------------------------------


def cmd_make_dataset(args) -> int:
    out = Path(args.out)
    if args.train < 0 or args.test < 0:
        raise ValidationError("--train and --test must be >= 0")
    try:
        cfg = SceneConfig(width=args.size, height=args.size, min_objects=args.min_objects,
                          max_objects=args.max_objects, max_size=min(SceneConfig.max_size, args.size))
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    rng = np.random.default_rng(args.seed)
    entries, artifacts, incomplete = [], [], 0
    for split, count in (("train", args.train), ("test", args.test)):
        for i in range(count):
            image_id = f"{split}_{i:05d}"
            scene = generate_toy_scene(rng, cfg, image_id)
            incomplete += scene.incomplete
            img_path = out / "images" / f"{image_id}.png"
            save_image(scene.image, img_path)
            ann_path = out / "annotations" / f"{image_id}.xml"
            ann_path.parent.mkdir(parents=True, exist_ok=True)
            ann_path.write_text(annotation_to_voc(scene.annotation))
            entries.append((image_id, split))
            artifacts += [img_path, ann_path]
    write_index(out, entries)
    write_manifest(out, "make-dataset", {**dataclasses.asdict(cfg), "train": args.train, "test": args.test},
                   args.seed, artifacts + [out / "index.txt"])
    print(f"wrote {len(entries)} scenes to {out} ({incomplete} with fewer objects than drawn)")
    return EXIT_OK


def cmd_synth_fog(args) -> int:
    src, out = Path(args.input), Path(args.out)
    if not src.exists():
        raise ValidationError(f"input directory not found: {src}")
    if args.beta is not None and args.beta < 0:
        raise ValidationError("--beta must be >= 0")
    if (src / "index.txt").exists():
        entries = read_index(src)
        image_dir = src / "images"
        paths = {}
        for image_id, _ in entries:
            found = [image_dir / f"{image_id}{s}" for s in IMAGE_SUFFIXES if (image_dir / f"{image_id}{s}").exists()]
            paths[image_id] = found[0] if found else image_dir / f"{image_id}.png"
    else:
        listed = _list_images(src)
        entries = [(p.stem, "train") for p in listed]
        paths = {p.stem: p for p in listed}
    rng = np.random.default_rng(args.seed)
    errors, records, artifacts = [], [], []
    for image_id, split in entries:
        path = paths[image_id]
        try:
            clean = load_image(path)
        except Exception as exc:  # noqa: BLE001 - report every unreadable file
            errors.append(f"{path}: {exc}")
            continue
        if args.beta is not None:
            beta = args.beta
        else:
            beta = sample_beta(args.test_beta_range if split == "test" else args.beta_range, rng)
        fog = FogParams(A=args.airlight, beta=beta)
        save_image(clean, out / "clean" / f"{image_id}.png")
        save_image(apply_fog(clean, fog), out / "foggy" / f"{image_id}.png")
        ann_src = src / "annotations" / f"{image_id}.xml"
        if ann_src.exists():
            (out / "annotations").mkdir(parents=True, exist_ok=True)
            shutil.copyfile(ann_src, out / "annotations" / f"{image_id}.xml")
            artifacts.append(out / "annotations" / f"{image_id}.xml")
        records.append({"image_id": image_id, "split": split, "A": fog.A, "beta": fog.beta})
        artifacts += [out / "clean" / f"{image_id}.png", out / "foggy" / f"{image_id}.png"]
    if errors:
        print("unreadable inputs:\n  " + "\n  ".join(errors), file=sys.stderr)
        return EXIT_RUNTIME
    write_index(out, [(r["image_id"], r["split"]) for r in records])
    write_records(out / "fog_params.jsonl", records)
    write_manifest(out, "synth-fog", {"airlight": args.airlight, "beta": args.beta,
                                       "beta_range": list(args.beta_range),
                                       "test_beta_range": list(args.test_beta_range)},
                   args.seed, artifacts + [out / "index.txt", out / "fog_params.jsonl"],
                   inputs=[paths[i] for i, _ in entries])
    print(f"fogged {len(records)} images into {out}")
    return EXIT_OK


# -- model commands ----------------------------------------------------------------


def _load_split(cfg: TrainConfig, split: str):
    root = Path(cfg.data_root)
    if not (root / "index.txt").exists():
        raise ValidationError(f"no paired dataset at {root} (index.txt missing)")
    samples = load_paired_dataset(root, split, cfg.classes)
    if not samples:
        raise ValidationError(f"split {split!r} of {root} is empty")
    return samples


def cmd_train(args) -> int:
    from .training import fit

    cfg = resolve_config(args)
    out = Path(args.out)
    train_set = _load_split(cfg, "train")
    save_config(cfg, out / "config.ini")
    result = fit(cfg, train_set, out, on_log=lambda r: print(
        f"step {r['step']:5d} lr {r['lr']:.5f} total {r['grand_total']:.4f} det {r['detection_total']:.4f} "
        f"rest {r['restoration_loss']:.4f}"))
    write_manifest(out, "train", cfg.to_dict(), cfg.seed,
                   [result.checkpoint, out / "metrics.jsonl", out / "config.ini"])
    print(f"checkpoint: {result.checkpoint}")
    return EXIT_OK


def _ground_truth(cfg: TrainConfig, split: str):
    root = Path(cfg.data_root)
    return {image_id: load_annotation(root, image_id, cfg.classes) for image_id, _ in read_index(root, split)}


def cmd_eval(args) -> int:
    from .detection.boxes import read_detections
    from .evalkit import mean_ap, plot_pr_curves, write_report

    cfg = resolve_config(args)
    out = Path(args.out)
    if args.detections is None and args.checkpoint is None:
        raise ValidationError("eval needs --checkpoint or --detections")
    if args.detections is not None:
        det_path = Path(args.detections)
        if not det_path.exists():
            raise ValidationError(f"detections file not found: {det_path}")
        gts = _ground_truth(cfg, args.split)
        dets = read_detections(det_path, cfg.classes)
        inputs = [det_path]
    else:
        from .model import load_checkpoint
        from .training import predict

        model = load_checkpoint(args.checkpoint, for_inference=True)
        samples = _load_split(cfg, args.split)
        per_image = predict(model, samples, model.cfg.input_size, conf_threshold=cfg.conf_threshold,
                            nms_threshold=cfg.nms_threshold)
        gts = {s.annotation.image_id: s.annotation for s in samples}
        dets = [d for image in per_image for d in image]
        inputs = [Path(args.checkpoint)]
    result = mean_ap(dets, gts, cfg.classes, args.iou_threshold, args.ap_method)
    write_report(result, out / "eval", {"split": args.split, "ap_method": args.ap_method})
    write_records(out / "eval_per_class.jsonl",
                  [{"class": k, "ap": v, "num_gt": result.num_gt[k]} for k, v in result.per_class_ap.items()])
    artifacts = [out / "eval.json", out / "eval.txt", out / "eval_per_class.jsonl"]
    if args.plot:
        plot_pr_curves(result, out / "pr_curves.png")
        artifacts.append(out / "pr_curves.png")
    write_manifest(out, "eval", cfg.to_dict(), cfg.seed, artifacts, inputs)
    print(result.summary())
    return EXIT_OK


CLASS_COLORS = [(230, 25, 75), (60, 180, 75), (0, 130, 200), (245, 130, 48), (145, 30, 180), (70, 240, 240)]


def draw_detections(image: np.ndarray, dets, class_names, path) -> None:
    from PIL import Image, ImageDraw

    from .weathersim import to_uint8

    canvas = Image.fromarray(to_uint8(image))
    draw = ImageDraw.Draw(canvas)
    for d in dets:
        color = CLASS_COLORS[d.class_id % len(CLASS_COLORS)]
        b = d.box
        draw.rectangle([b.x_min, b.y_min, b.x_max - 1, b.y_max - 1], outline=color, width=2)
        label = f"{class_names[d.class_id]} {d.score:.2f}"
        draw.text((b.x_min + 2, max(b.y_min - 11, 0)), label, fill=color)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    canvas.save(path)


def cmd_infer(args) -> int:
    import torch

    from .datakit import letterbox_image
    from .detection.boxes import write_detections
    from .detection.predict import postprocess
    from .model import load_checkpoint

    cfg = resolve_config(args)
    src, out = Path(args.input), Path(args.out)
    if not src.exists():
        raise ValidationError(f"input not found: {src}")
    model = load_checkpoint(args.checkpoint, for_inference=True)
    model.eval()
    paths = [src] if src.is_file() else _list_images(src)
    all_dets, artifacts = [], []
    for path in paths:
        image = load_image(path)
        boxed, geo = letterbox_image(image, model.cfg.input_size)
        with torch.no_grad():
            heads, _ = model(torch.from_numpy(boxed[None]).float())
        dets = postprocess(heads, [path.stem], [geo], [(image.shape[2], image.shape[1])],
                           args.conf, cfg.nms_threshold)[0]
        draw_detections(image, dets, cfg.classes, out / f"{path.stem}_det.png")
        artifacts.append(out / f"{path.stem}_det.png")
        all_dets.extend(dets)
    write_detections(all_dets, out / "detections.txt", cfg.classes)
    write_manifest(out, "infer", {**cfg.to_dict(), "conf": args.conf}, cfg.seed,
                   artifacts + [out / "detections.txt"], [Path(args.checkpoint), *paths])
    print(f"{len(all_dets)} detections on {len(paths)} image(s) -> {out}")
    return EXIT_OK


def cmd_strip(args) -> int:
    from .model import strip_restoration

    out = Path(args.out)
    dropped = strip_restoration(args.checkpoint, out)
    write_manifest(out.parent, "strip", {"source": str(args.checkpoint)}, None, [out], [Path(args.checkpoint)])
    print(f"dropped {dropped} restoration tensors -> {out}")
    return EXIT_OK


def _seeds(text: str):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ValidationError(f"--seeds expects comma-separated integers, got {text!r}") from exc


def _parse_grid(text: str):
    try:
        return tuple(tuple(float(x) for x in pair.split("&")) for pair in text.split(",") if pair.strip())
    except ValueError as exc:
        raise ValidationError(f"--grid expects pairs like 0.2&0.8, got {text!r}") from exc


def cmd_ablate(args) -> int:
    from .training import run_ablation, summarize

    cfg = resolve_config(args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ValidationError(f"unknown variant(s) {bad}; choose from {list(VARIANTS)}")
    out = Path(args.out)
    rows = run_ablation(variants, cfg, _load_split(cfg, "train"), _load_split(cfg, "test"),
                        _seeds(args.seeds), out / "runs")
    means = summarize(rows, "variant")
    write_records(out / "ablation.jsonl", rows)
    table = format_table("Variant", means, {v: VARIANTS[v] for v in means})
    (out / "ablation.txt").write_text(table + "\n")
    (out / "ablation.json").write_text(json.dumps({"rows": rows, "mean_map": means}, indent=2) + "\n")
    write_manifest(out, "ablate", {**cfg.to_dict(), "variants": variants, "seeds": args.seeds}, cfg.seed,
                   [out / "ablation.jsonl", out / "ablation.txt", out / "ablation.json"])
    print(table)
    return EXIT_OK


def format_table(header: str, means: dict, flags: dict | None = None) -> str:
    names = list(means)
    lines = [header.ljust(12) + "".join(n.rjust(10) for n in names)]
    if flags:
        for comp in ("restoration", "dtfe", "focal", "scconv"):
            lines.append(comp.ljust(12) + "".join(("yes" if flags[n][comp] else "-").rjust(10) for n in names))
    lines.append("mAP@0.5".ljust(12) + "".join(f"{means[n]:10.4f}" for n in names))
    return "\n".join(lines)


def cmd_sweep_weights(args) -> int:
    from .training import summarize, sweep_weights

    cfg = resolve_config(args)
    grid = _parse_grid(args.grid) if args.grid else WEIGHT_GRID
    out = Path(args.out)
    rows = sweep_weights(cfg, _load_split(cfg, "train"), _load_split(cfg, "test"), grid,
                         _seeds(args.seeds), out / "runs")
    means = summarize(rows, "label")
    write_records(out / "sweep.jsonl", rows)
    table = format_table("w_det&w_rest", means)
    (out / "sweep.txt").write_text(table + "\n")
    write_manifest(out, "sweep-weights", {**cfg.to_dict(), "grid": [list(g) for g in grid]}, cfg.seed,
                   [out / "sweep.jsonl", out / "sweep.txt"])
    print(table)
    return EXIT_OK


def bench_model(model, width: int, height: int, runs: int = 50, warmup: int = 5, seed: int = 0) -> dict:
    """Time letterbox + forward + postprocess on one random image; returns per-run latencies."""
    import torch

    from .datakit import letterbox_image
    from .detection.predict import postprocess

    rng = np.random.default_rng(seed)
    image = rng.uniform(0, 1, size=(3, height, width))
    model.eval()
    samples = []
    with torch.no_grad():
        for i in range(warmup + runs):
            t0 = time.perf_counter()
            boxed, geo = letterbox_image(image, model.cfg.input_size)
            heads, _ = model(torch.from_numpy(boxed[None]).float())
            postprocess(heads, ["bench"], [geo], [(width, height)])
            if i >= warmup:
                samples.append(time.perf_counter() - t0)
    mean = float(np.mean(samples))
    return {"runs": runs, "warmup": warmup, "latencies": samples, "mean_latency": mean, "fps": 1.0 / mean}


def cmd_bench(args) -> int:
    import torch

    from .model import JointDetector, load_checkpoint

    cfg = resolve_config(args)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint, for_inference=True)
    else:
        torch.manual_seed(cfg.seed)
        model = JointDetector(dataclasses.replace(cfg.model_config(), restoration=False))
    stats = bench_model(model, args.width, args.height, args.runs, args.warmup, cfg.seed)
    out = Path(args.out)
    write_records(out / "bench.jsonl", [{"run": i, "latency": t} for i, t in enumerate(stats["latencies"])])
    summary = {k: v for k, v in stats.items() if k != "latencies"}
    summary["image_size"] = [args.width, args.height]
    (out / "bench.json").write_text(json.dumps(summary, indent=2) + "\n")
    write_manifest(out, "bench", summary, cfg.seed, [out / "bench.jsonl", out / "bench.json"],
                   [Path(args.checkpoint)] if args.checkpoint else [])
    print(f"mean latency {stats['mean_latency'] * 1000:.2f} ms, {stats['fps']:.2f} FPS over {args.runs} runs")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def _add_config_args(p, data=True):
    p.add_argument("--config", help="INI run config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--seed", type=int)
    if data:
        p.add_argument("--data", help="paired dataset root (overrides data_root)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fogdet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="generate a toy shape dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=500)
    p.add_argument("--test", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=160)
    p.add_argument("--min-objects", type=int, default=1)
    p.add_argument("--max-objects", type=int, default=4)
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("synth-fog", help="fog a dataset with the scattering model")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--airlight", type=float, default=DEFAULT_AIRLIGHT)
    p.add_argument("--beta", type=float, help="fixed beta for every image")
    p.add_argument("--beta-range", type=float, nargs=2, default=TRAIN_BETA_RANGE, metavar=("LO", "HI"))
    p.add_argument("--test-beta-range", type=float, nargs=2, default=TEST_BETA_RANGE, metavar=("LO", "HI"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_fog)

    p = sub.add_parser("train", help="train a detector")
    _add_config_args(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mAP of a checkpoint or a detections file")
    _add_config_args(p)
    p.add_argument("--checkpoint")
    p.add_argument("--detections")
    p.add_argument("--split", default="test")
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.add_argument("--ap-method", choices=("all_point", "voc07"), default="all_point")
    p.add_argument("--plot", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="detect objects and draw boxes")
    _add_config_args(p, data=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--conf", type=float, default=0.25)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("strip", help="copy a checkpoint without the restoration decoder")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.set_defaults(func=cmd_strip)

    p = sub.add_parser("ablate", help="component ablation study")
    _add_config_args(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--variants", default=",".join(VARIANTS))
    p.add_argument("--seeds", default="0")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-weights", help="detection/restoration loss-weight study")
    _add_config_args(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--grid", help="comma-separated det&rest pairs, e.g. 1&1,0.2&0.8")
    p.add_argument("--seeds", default="0")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_weights)

    p = sub.add_parser("bench", help="per-image latency and FPS")
    _add_config_args(p, data=False)
    p.add_argument("--checkpoint")
    p.add_argument("--width", type=int, default=550)
    p.add_argument("--height", type=int, default=400)
    p.add_argument("--runs", type=int, default=50)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on bad usage; report it as a validation error
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        logger.exception("command failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
