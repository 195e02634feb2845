"""Inference and mean-average-precision evaluation.

Detection scoring averages the refinement stages' class probabilities;
boxes come from the last stage's class-specific regression applied to each
proposal, followed by class-wise NMS. AP uses all-points interpolation
(greedy max-IoU matching, each ground-truth box matched once), and mAP
averages the classes that actually have ground-truth instances.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import Dataset, ImageRecord
from .geometry import Box, iou_matrix, nms
from .mil import refine_probs
from .network import DetectorNetwork


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_index: int
    box: Box
    confidence: float


def infer(
    net: DetectorNetwork,
    image: np.ndarray,
    boxes: np.ndarray,
    image_id: str,
    nms_threshold: float = 0.4,
) -> list[Detection]:
    """Deterministic detections for one image (confidences in [0, 1])."""
    out = net.forward(image, boxes, training=False, need_embed=False)
    num_classes = net.cfg.num_classes
    stage_probs = [refine_probs(rl) for rl in out.ref_logits]  # (C+1, N) each
    scores = np.mean([sp[:num_classes] for sp in stage_probs], axis=0)  # (C, N)
    reg_last = np.asarray(out.reg[-1], dtype=np.float64)  # (N, 4*(C+1))
    h, w = image.shape[:2]
    boxes = np.asarray(boxes, dtype=np.float64)
    pw = boxes[:, 2] - boxes[:, 0]
    ph = boxes[:, 3] - boxes[:, 1]
    pcx = 0.5 * (boxes[:, 0] + boxes[:, 2])
    pcy = 0.5 * (boxes[:, 1] + boxes[:, 3])
    detections: list[Detection] = []
    for c in range(num_classes):
        d = reg_last[:, 4 * c : 4 * c + 4]
        cx = pcx + d[:, 0] * pw
        cy = pcy + d[:, 1] * ph
        bw = pw * np.exp(d[:, 2])
        bh = ph * np.exp(d[:, 3])
        arr = np.stack([cx - 0.5 * bw, cy - 0.5 * bh, cx + 0.5 * bw, cy + 0.5 * bh], axis=1)
        # clip exactly like Box.clipped so the decoded boxes stay valid
        arr[:, 0] = np.minimum(np.maximum(arr[:, 0], 0.0), w - 1e-3)
        arr[:, 1] = np.minimum(np.maximum(arr[:, 1], 0.0), h - 1e-3)
        arr[:, 2] = np.maximum(np.minimum(arr[:, 2], w), arr[:, 0] + 1e-3)
        arr[:, 3] = np.maximum(np.minimum(arr[:, 3], h), arr[:, 1] + 1e-3)
        keep = nms(arr, scores[c], nms_threshold)
        for r in keep:
            detections.append(
                Detection(image_id, c, Box.from_array(arr[r]), float(scores[c, r]))
            )
    return detections


def _average_precision(confidences: np.ndarray, is_tp: np.ndarray, npos: int) -> float:
    """All-points interpolated AP given per-detection outcomes in rank order."""
    tp = np.cumsum(is_tp)
    fp = np.cumsum(~is_tp)
    recalls = tp / npos
    precisions = tp / np.maximum(tp + fp, 1)
    mrec = np.concatenate(([0.0], recalls, [1.0]))
    mpre = np.concatenate(([0.0], precisions, [0.0]))
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]).sum())


def evaluate_map(
    detections: list[Detection],
    records: list[ImageRecord],
    num_classes: int,
    iou_thresh: float = 0.5,
) -> dict:
    """Per-class AP and mAP over classes with at least one GT instance."""
    gt_by_class: dict[int, dict[str, np.ndarray]] = {c: {} for c in range(num_classes)}
    for rec in records:
        for obj in rec.gt_objects:
            gt_by_class[obj.class_index].setdefault(rec.image_id, []).append(
                obj.box.as_array()
            )
    for c in range(num_classes):
        gt_by_class[c] = {k: np.stack(v) for k, v in gt_by_class[c].items()}

    per_class_ap: dict[int, float | None] = {}
    for c in range(num_classes):
        npos = sum(a.shape[0] for a in gt_by_class[c].values())
        if npos == 0:
            per_class_ap[c] = None
            continue
        dets = [d for d in detections if d.class_index == c]
        if not dets:
            per_class_ap[c] = 0.0
            continue
        conf = np.array([d.confidence for d in dets])
        order = np.lexsort((np.arange(len(dets)), -conf))
        matched: dict[str, np.ndarray] = {
            img: np.zeros(a.shape[0], dtype=bool) for img, a in gt_by_class[c].items()
        }
        is_tp = np.zeros(len(dets), dtype=bool)
        for rank, i in enumerate(order):
            d = dets[i]
            gts = gt_by_class[c].get(d.image_id)
            if gts is None:
                continue
            overlaps = iou_matrix(d.box.as_array()[None, :], gts)[0]
            j = int(np.argmax(overlaps))
            if overlaps[j] >= iou_thresh and not matched[d.image_id][j]:
                matched[d.image_id][j] = True
                is_tp[rank] = True
        per_class_ap[c] = _average_precision(conf[order], is_tp, npos)

    valid = [v for v in per_class_ap.values() if v is not None]
    return {
        "per_class_ap": per_class_ap,
        "map": float(np.mean(valid)) if valid else 0.0,
    }


def evaluate_dataset(
    net: DetectorNetwork, dataset: Dataset, nms_threshold: float = 0.4, iou_thresh: float = 0.5
) -> dict:
    """Run inference over every record and score against the hidden GT."""
    detections: list[Detection] = []
    for rec in dataset.records:
        detections.extend(
            infer(net, rec.image, rec.proposals.array, rec.image_id, nms_threshold)
        )
    return evaluate_map(detections, dataset.records, dataset.num_classes, iou_thresh)


def format_report(result: dict, class_names: list[str]) -> str:
    """Plain-text AP table."""
    lines = [f"{'class':<12} {'AP':>8}"]
    for c, name in enumerate(class_names):
        ap = result["per_class_ap"].get(c, result["per_class_ap"].get(str(c)))
        lines.append(f"{name:<12} {'n/a' if ap is None else f'{ap:8.4f}'}")
    lines.append(f"{'mAP':<12} {result['map']:8.4f}")
    return "\n".join(lines) + "\n"


def write_report(result: dict, class_names: list[str], out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "per_class_ap": {
            class_names[c]: ap for c, ap in result["per_class_ap"].items()
        },
        "map": result["map"],
    }
    (out / "eval.json").write_text(json.dumps(payload, indent=1) + "\n")
    (out / "eval.txt").write_text(format_report(result, class_names))
