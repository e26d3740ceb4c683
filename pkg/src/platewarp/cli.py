"""Command-line surface: train, eval, detect, gradcheck, edges, synth.

Thread pinning must happen before numpy first loads its BLAS, so the
--threads flag is peeked from argv at import time, ahead of the heavy
imports below.  The default is one thread: every seeded subcommand is
then bitwise reproducible.
"""

from __future__ import annotations

import os
import sys


def _pin_threads(argv) -> None:
    n = "1"
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            n = argv[i + 1]
        elif a.startswith("--threads="):
            n = a.split("=", 1)[1]
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
        "VECLIB_MAXIMUM_THREADS",
    ):
        os.environ[var] = n


if "numpy" not in sys.modules:
    _pin_threads(sys.argv)

import argparse
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import configio, data, losses, network, report
from .autodiff import Tensor, adam_step, grad_check_report, zero_grads
from .edges import EdgeBranch


def _load_run_config(path) -> configio.RunConfig:
    if path is None:
        return configio.RunConfig.default()
    return configio.load(path)


def _load_dataset(args, cfg: configio.RunConfig) -> list[data.Sample]:
    if args.synthetic is not None:
        base = args.synth_seed if args.synth_seed is not None else cfg.synth.seed
        return [data.synth_scene(cfg.synth, base + k) for k in range(args.synthetic)]
    records = data.parse_annotations(args.annotations)
    root = Path(args.annotations).parent
    samples = []
    skipped = 0
    for img_path, quads in records:
        full = Path(img_path)
        if not full.is_absolute():
            full = root / full
        try:
            image = data.read_image(full)
        except (OSError, data.ImageFormatError) as exc:
            print(f"warning: skipping {img_path}: {exc}", file=sys.stderr)
            skipped += 1
            continue
        samples.append(data.Sample(image=image, quads=quads, id=img_path))
    if skipped:
        print(f"warning: {skipped} image(s) skipped", file=sys.stderr)
    return samples


def _add_data_args(p: argparse.ArgumentParser) -> None:
    grp = p.add_mutually_exclusive_group(required=True)
    grp.add_argument("--annotations", help="annotation file (see README for the format)")
    grp.add_argument("--synthetic", type=int, metavar="N", help="generate N synthetic scenes")
    p.add_argument("--synth-seed", type=int, default=None, help="base seed for synthetic scenes")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="config file path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="BLAS thread count (default 1)")


def cmd_train(args) -> int:
    cfg = _load_run_config(args.config)
    if args.variant:
        cfg.network = replace(cfg.network, variant=args.variant)
    dataset = _load_dataset(args, cfg)
    if not dataset:
        print("error: empty training dataset", file=sys.stderr)
        return 2

    model = network.build_model(cfg.network, args.seed)
    adam = cfg.adam
    params = model.parameters()
    h, w = cfg.network.input_height, cfg.network.input_width
    augment_cfg = data.AugmentConfig.disabled() if args.no_augment else cfg.augment

    out_path = Path(args.out)
    report_dir = Path(args.report_dir) if args.report_dir else out_path.parent
    report_dir.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else report_dir / "loss_log.csv"

    history = {"iter": [], "loc": [], "conf": [], "total": []}
    with open(log_path, "w", encoding="utf-8") as log:
        log.write("iter,location_loss,confidence_loss,total_loss\n")
        for it in range(args.iterations):
            rng = np.random.default_rng([args.seed, 2**31 + it])
            if len(dataset) >= args.batch_size:
                idxs = rng.choice(len(dataset), size=args.batch_size, replace=False)
            else:
                idxs = rng.choice(len(dataset), size=args.batch_size, replace=True)
            samples = []
            for slot, j in enumerate(idxs):
                s = dataset[int(j)]
                s = data.augment(s, augment_cfg, [args.seed, it, slot])
                samples.append(s)
            batch = data.make_batch(
                samples, args.batch_size, h, w, alpha=cfg.network.alpha
            )
            grid = model.forward(batch.images, training=True)
            breakdown = losses.total_loss(grid, batch.targets)
            zero_grads(params)
            breakdown.tensor.backward()
            adam_step(params, adam)
            log.write(
                f"{it},{breakdown.location:.17g},{breakdown.confidence:.17g},{breakdown.total:.17g}\n"
            )
            history["iter"].append(it)
            history["loc"].append(breakdown.location)
            history["conf"].append(breakdown.confidence)
            history["total"].append(breakdown.total)
            if args.checkpoint_every and (it + 1) % args.checkpoint_every == 0:
                network.save_checkpoint(model, out_path, step_count=adam.step_count)
    network.save_checkpoint(model, out_path, step_count=adam.step_count)
    if history["iter"]:
        report.save_loss_curves(
            report_dir / "loss_curves.png",
            history["iter"],
            history["loc"],
            history["conf"],
            history["total"],
        )
        print(
            f"trained {args.iterations} iterations: total loss "
            f"{history['total'][0]:.4f} -> {history['total'][-1]:.4f}"
        )
    print(f"checkpoint written to {out_path}")
    return 0


def _detect_in_sample(model, sample: data.Sample, tau, nms_thr):
    cfg = model.config
    img, amap = data.letterbox(sample.image, cfg.input_height, cfg.input_width)
    grid = model.forward(img[None], training=False)
    dets = losses.decode_detections(
        grid.data[0], tau, nms_thr, alpha=cfg.alpha
    )
    inv = amap.invert()
    out = []
    for d in dets:
        try:
            quad = data.Quad.from_points(inv.apply(d.quad.corners))
        except ValueError:
            continue
        out.append(losses.Detection(quad, d.confidence, d.source_cell))
    return out


def cmd_eval(args) -> int:
    cfg = _load_run_config(args.config)
    dataset = _load_dataset(args, cfg)
    report_dir = Path(args.report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)

    reports = []
    for ckpt in args.checkpoint:
        model, _ = network.load_checkpoint(ckpt)
        tau = args.tau if args.tau is not None else model.config.detection_threshold
        rep = report.EvalReport(name=Path(ckpt).stem, per_image=[])
        for sample in dataset:
            dets = _detect_in_sample(model, sample, tau, args.nms_threshold)
            res = report.match_image(sample.quads, dets)
            res.id = sample.id
            rep.per_image.append(res)
        reports.append(rep)
        report.write_eval_csv(report_dir / f"eval_{rep.name}.csv", rep)

    table = report.format_summary_table(reports)
    print(table)
    (report_dir / "summary.txt").write_text(table + "\n", encoding="utf-8")
    report.save_qiou_histogram(report_dir / "qiou_hist.png", reports)
    if len(reports) > 1:
        report.write_comparison_csv(report_dir / "comparison.csv", reports)
        report.save_comparison_chart(report_dir / "comparison.png", reports)
    return 0


def _draw_polyline(image: np.ndarray, corners: np.ndarray, color=(1.0, 0.0, 0.0)) -> None:
    h, w = image.shape[:2]
    for i in range(4):
        a = corners[i]
        b = corners[(i + 1) % 4]
        n = max(2, int(np.ceil(np.hypot(*(b - a)) * 2)))
        ts = np.linspace(0.0, 1.0, n)
        xs = np.clip(np.rint(a[0] + ts * (b[0] - a[0])), 0, w - 1).astype(int)
        ys = np.clip(np.rint(a[1] + ts * (b[1] - a[1])), 0, h - 1).astype(int)
        image[ys, xs] = color


def cmd_detect(args) -> int:
    try:
        image = data.read_image(args.image)
    except (OSError, data.ImageFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    model, _ = network.load_checkpoint(args.checkpoint)
    tau = args.tau if args.tau is not None else model.config.detection_threshold
    sample = data.Sample(image=image, quads=[], id=str(args.image))
    dets = _detect_in_sample(model, sample, tau, args.nms_threshold)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = Path(args.image).stem
    base = Path(args.image).name

    data.write_annotations(
        out_dir / f"{name}.quads.txt", [(base, [d.quad for d in dets])] if dets else []
    )
    overlay = image.copy()
    for d in dets:
        _draw_polyline(overlay, d.quad.corners)
    data.write_image(out_dir / f"{name}.overlay.ppm", overlay)
    for k, d in enumerate(dets):
        crop = losses.rectify_plate(image, d.quad, args.crop_width, args.crop_width // 2)
        data.write_image(out_dir / f"{name}.plate{k}.ppm", crop)
    print(f"{len(dets)} detection(s); outputs in {out_dir}")
    return 0


def _gradcheck_input(cfg: configio.RunConfig, seed: int):
    """2-sample batch of small synthetic scenes plus their cell targets."""
    synth = replace(
        cfg.synth,
        image_height=32,
        image_width=32,
        plate_width=(14.0, 20.0),
        plate_aspect=(1.6, 2.4),
        rotation_max_deg=20.0,
    )
    samples = [data.synth_scene(synth, [seed, k]) for k in range(2)]
    batch = data.make_batch(samples, 2, 32, 32, alpha=cfg.network.alpha)
    return batch


def cmd_gradcheck(args) -> int:
    cfg = _load_run_config(args.config)
    net_cfg = replace(cfg.network, input_height=32, input_width=32)
    if args.variant:
        net_cfg = replace(net_cfg, variant=args.variant)
    model = network.build_model(net_cfg, args.seed)
    batch = _gradcheck_input(cfg, args.seed)
    images = Tensor(batch.images, requires_grad=True)

    def loss_fn():
        return losses.total_loss(model.forward(images, training=True), batch.targets).tensor

    rep = grad_check_report(
        loss_fn,
        model.trainable_parameters(),
        perturbation=args.perturbation,
        max_entries=args.entries,
        seed=args.seed,
    )
    rep["input_image"] = grad_check_report(
        loss_fn, [images], perturbation=args.perturbation, max_entries=8, seed=args.seed
    )["tensor"]

    width = max(len(k) for k in rep)
    worst = 0.0
    for name_, err in sorted(rep.items()):
        flag = "ok" if err < args.tolerance else "FAIL"
        print(f"{name_:<{width}}  {err:12.3e}  {flag}")
        worst = max(worst, err)
    print(f"max relative error: {worst:.3e} (tolerance {args.tolerance:g})")
    return 0 if worst < args.tolerance else 1


def cmd_edges(args) -> int:
    try:
        image = data.read_image(args.image)
    except (OSError, data.ImageFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    branch = EdgeBranch(presmooth=args.presmooth)
    feats = branch.features(Tensor(image[None])).data[0]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = Path(args.image).stem
    for ch, label in enumerate(("sobel_x", "sobel_y", "sobel_xy")):
        values = feats[:, :, ch]
        lo, hi = values.min(), values.max()
        vis = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
        data.write_image_gray(out_dir / f"{name}.{label}.pgm", vis)
        if args.dump_raw:
            np.savetxt(out_dir / f"{name}.{label}.txt", values, fmt="%.17g")
    print(f"edge maps written to {out_dir}")
    return 0


def cmd_synth(args) -> int:
    cfg = _load_run_config(args.config)
    base = args.synth_seed if args.synth_seed is not None else cfg.synth.seed
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for k in range(args.count):
        sample = data.synth_scene(cfg.synth, base + k)
        fname = f"{sample.id}.ppm"
        data.write_image(out_dir / fname, sample.image)
        records.append((fname, sample.quads))
    data.write_annotations(out_dir / "annotations.txt", records)
    print(f"{args.count} scene(s) written to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="platewarp",
        description="Warped planar license plate detection: train, evaluate, detect.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a detector")
    _add_common(p)
    _add_data_args(p)
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--variant", choices=network.VARIANTS, default=None)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--checkpoint-every", type=int, default=500)
    p.add_argument("--report-dir", default=None)
    p.add_argument("--log", default=None, help="loss log CSV path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoint(s) with the qIoU metric")
    _add_common(p)
    _add_data_args(p)
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--tau", type=float, default=None, help="detection threshold")
    p.add_argument("--nms-threshold", type=float, default=0.1)
    p.add_argument("--report-dir", default="eval_report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect", help="detect plates in one image")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out-dir", default="detections")
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--nms-threshold", type=float, default=0.1)
    p.add_argument("--crop-width", type=int, default=128)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    _add_common(p)
    p.add_argument("--variant", choices=network.VARIANTS, default=None)
    p.add_argument("--perturbation", type=float, default=1e-5)
    p.add_argument("--entries", type=int, default=4, help="sampled entries per parameter")
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("edges", help="write Sobel edge maps for an image")
    _add_common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--out-dir", default="edges")
    p.add_argument("--presmooth", action="store_true")
    p.add_argument("--dump-raw", action="store_true")
    p.set_defaults(func=cmd_edges)

    p = sub.add_parser("synth", help="emit a synthetic dataset to disk")
    _add_common(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--synth-seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, network.CheckpointError, network.ConfigError, data.AnnotationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
