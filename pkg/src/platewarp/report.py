"""Evaluation reports: detection/ground-truth matching, qIoU aggregation,
delimited output and the matplotlib figures rendered next to it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import geometry as geo
from .geometry import Quad
from .losses import Detection

FALSE_POSITIVE_QIOU = 0.5


@dataclass
class ImageResult:
    id: str
    gt_qious: list[float]  # best qIoU per ground-truth quad (0 when unmatched)
    matched: list  # per ground-truth quad: the matched Detection or None
    detections: int
    false_positives: int


@dataclass
class EvalReport:
    name: str
    per_image: list[ImageResult]

    @property
    def mean_qiou(self) -> float:
        scores = [q for r in self.per_image for q in r.gt_qious]
        return float(np.mean(scores)) if scores else 0.0

    @property
    def detection_count(self) -> int:
        return sum(r.detections for r in self.per_image)

    @property
    def false_positive_count(self) -> int:
        return sum(r.false_positives for r in self.per_image)

    @property
    def ground_truth_count(self) -> int:
        return sum(len(r.gt_qious) for r in self.per_image)


def match_image(gt_quads: list[Quad], detections: list[Detection]) -> ImageResult:
    """Greedy best-first matching: each ground-truth quad takes its best
    remaining detection; unmatched quads score 0.  A detection below 0.5
    qIoU against every ground truth counts as a false positive."""
    pairs = []
    for gi, g in enumerate(gt_quads):
        for di, d in enumerate(detections):
            q = geo.qiou(g, d.quad)
            if q > 0.0:
                pairs.append((q, gi, di))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    gt_scores = [0.0] * len(gt_quads)
    matched = [None] * len(gt_quads)
    used_gt: set[int] = set()
    used_det: set[int] = set()
    for q, gi, di in pairs:
        if gi in used_gt or di in used_det:
            continue
        used_gt.add(gi)
        used_det.add(di)
        gt_scores[gi] = q
        matched[gi] = detections[di]

    fp = 0
    for di, d in enumerate(detections):
        best = max((geo.qiou(g, d.quad) for g in gt_quads), default=0.0)
        if best < FALSE_POSITIVE_QIOU:
            fp += 1
    return ImageResult(
        id="",
        gt_qious=gt_scores,
        matched=matched,
        detections=len(detections),
        false_positives=fp,
    )


def write_eval_csv(path, report: EvalReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["image_id", "gt_index", "best_qiou", "detections", "false_positives",
             "matched_cell", "matched_confidence"]
        )
        for r in report.per_image:
            if not r.gt_qious:
                writer.writerow([r.id, "", "", r.detections, r.false_positives, "", ""])
            for gi, q in enumerate(r.gt_qious):
                det = r.matched[gi]
                cell = f"{det.source_cell[0]}:{det.source_cell[1]}" if det else ""
                conf = format(det.confidence, ".6g") if det else ""
                writer.writerow(
                    [r.id, gi, format(q, ".17g"), r.detections, r.false_positives, cell, conf]
                )


def format_summary_table(reports: list[EvalReport]) -> str:
    """Text table with one row per model; adds a delta column (relative to
    the first row) when comparing several checkpoints."""
    lines = []
    header = f"{'Model':<24} {'mean qIoU':>10} {'GT':>6} {'dets':>6} {'FP':>6}"
    if len(reports) > 1:
        header += f" {'delta':>8}"
    lines.append(header)
    lines.append("-" * len(header))
    base = reports[0].mean_qiou if reports else 0.0
    for i, rep in enumerate(reports):
        row = (
            f"{rep.name:<24} {rep.mean_qiou:>10.4f} {rep.ground_truth_count:>6}"
            f" {rep.detection_count:>6} {rep.false_positive_count:>6}"
        )
        if len(reports) > 1:
            delta = rep.mean_qiou - base
            row += f" {delta:>+8.4f}" if i else f" {'-':>8}"
        lines.append(row)
    return "\n".join(lines)


def write_comparison_csv(path, reports: list[EvalReport]) -> None:
    base = reports[0].mean_qiou if reports else 0.0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "mean_qiou", "ground_truths", "detections", "false_positives", "delta_vs_first"])
        for i, rep in enumerate(reports):
            writer.writerow(
                [
                    rep.name,
                    format(rep.mean_qiou, ".17g"),
                    rep.ground_truth_count,
                    rep.detection_count,
                    rep.false_positive_count,
                    format(rep.mean_qiou - base, ".17g") if i else "",
                ]
            )


def save_loss_curves(path, iterations, location, confidence, total) -> None:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(iterations, total, label="total", color="black")
    ax.plot(iterations, location, label="location", color="tab:blue")
    ax.plot(iterations, confidence, label="confidence", color="tab:orange")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    if min(total) > 0:
        ax.set_yscale("log")
    ax.legend()
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_qiou_histogram(path, reports: list[EvalReport]) -> None:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    bins = np.linspace(0.0, 1.0, 21)
    for rep in reports:
        scores = [q for r in rep.per_image for q in r.gt_qious]
        ax.hist(scores, bins=bins, alpha=0.6, label=f"{rep.name} (mean {rep.mean_qiou:.3f})")
    ax.set_xlabel("qIoU per ground-truth quad")
    ax.set_ylabel("count")
    ax.legend()
    ax.set_title("detection quality")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_comparison_chart(path, reports: list[EvalReport]) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    names = [r.name for r in reports]
    means = [r.mean_qiou for r in reports]
    ax.bar(names, means, color=["tab:gray", "tab:green", "tab:blue", "tab:orange"][: len(names)])
    for i, m in enumerate(means):
        ax.text(i, m + 0.01, f"{m:.3f}", ha="center")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("mean qIoU")
    ax.set_title("model comparison")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
