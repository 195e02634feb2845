r"""
Synthetic shapes dataset tour
=============================

Generates a small dataset and renders a grid of images with their hidden
ground-truth boxes and a sample of the pre-generated proposals, showing the
three proposal families: tight jitters, half-box distractors, random fill.
"""

import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from protodet.dataset import generate, load
from protodet.geometry import iou

out_dir = Path(tempfile.mkdtemp(prefix="protodet_demo_"))
generate(seed=7, num_images=9, num_classes=5, out_dir=out_dir / "data")
ds = load(out_dir / "data")

fig, axes = plt.subplots(3, 3, figsize=(9, 9))
for ax, rec in zip(axes.ravel(), ds.records):
    ax.imshow(rec.image)
    present = [ds.class_names[c] for c in np.nonzero(rec.labels)[0]]
    ax.set_title(", ".join(present), fontsize=8)
    for obj in rec.gt_objects:
        b = obj.box
        ax.add_patch(plt.Rectangle((b.x1, b.y1), b.width, b.height,
                                   fill=False, edgecolor="lime", linewidth=1.5))
    # show a few proposals: the best jitter and one half-box distractor per GT
    for obj in rec.gt_objects:
        ious = [iou(p, obj.box) for p in rec.proposals]
        best = int(np.argmax(ious))
        b = rec.proposals.box(best)
        ax.add_patch(plt.Rectangle((b.x1, b.y1), b.width, b.height,
                                   fill=False, edgecolor="white", linewidth=0.8))
        halves = [i for i, v in enumerate(ious) if 0.25 <= v <= 0.6]
        if halves:
            b = rec.proposals.box(halves[0])
            ax.add_patch(plt.Rectangle((b.x1, b.y1), b.width, b.height,
                                       fill=False, edgecolor="orange", linewidth=0.8,
                                       linestyle="--"))
    ax.axis("off")
fig.suptitle("green: ground truth | white: best proposal | orange: part distractor")
fig.tight_layout()
fig.savefig(out_dir / "dataset_tour.png", dpi=130)
print(f"wrote {out_dir / 'dataset_tour.png'}")

coverage = []
for rec in ds.records:
    for obj in rec.gt_objects:
        coverage.append(max(iou(p, obj.box) for p in rec.proposals))
print(f"ground-truth objects: {len(coverage)}, best-proposal IoU: "
      f"min {min(coverage):.2f}, median {np.median(coverage):.2f}")
