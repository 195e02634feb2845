r"""
Train a small model and look at its detections
==============================================

End to end at toy scale: 60 training images, 1200 iterations (about a
minute), evaluation on held-out images, loss curves, and detection
overlays. For the real benchmark scale use the CLI (see the README).
"""

import json
import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from protodet.config import TrainConfig
from protodet.dataset import generate, load
from protodet.evaluation import evaluate_dataset, format_report, infer
from protodet.training import run_training

root = Path(tempfile.mkdtemp(prefix="protodet_demo_"))
generate(seed=1, num_images=60, num_classes=5, out_dir=root / "train")
generate(seed=2, num_images=16, num_classes=5, out_dir=root / "test")

config = TrainConfig(iterations=1200, seed=0, checkpoint_every=600)
state = run_training(root / "train", root / "run", config, log_every=300)

test = load(root / "test")
result = evaluate_dataset(state.net, test, config.nms_threshold)
print()
print(format_report(result, test.class_names))

rows = [json.loads(l) for l in (root / "run" / "metrics.jsonl").read_text().splitlines()]
fig, ax = plt.subplots(figsize=(7, 4))
ax.plot([r["iter"] for r in rows], [r["L_total"] for r in rows], lw=0.7, label="L_total")
ax.plot([r["iter"] for r in rows], [r["L_mil"] for r in rows], lw=0.7, label="L_mil")
ax.set_xlabel("iteration")
ax.set_ylabel("loss")
ax.legend()
fig.tight_layout()
fig.savefig(root / "losses.png", dpi=130)

fig, axes = plt.subplots(2, 3, figsize=(9, 6))
for ax, rec in zip(axes.ravel(), test.records):
    ax.imshow(rec.image)
    dets = infer(state.net, rec.image, rec.proposals.array, rec.image_id, 0.4)
    for d in sorted(dets, key=lambda d: -d.confidence)[:4]:
        b = d.box
        ax.add_patch(plt.Rectangle((b.x1, b.y1), b.width, b.height, fill=False,
                                   edgecolor="red", linewidth=1.0))
        ax.text(b.x1, b.y1 - 1, f"{test.class_names[d.class_index]} {d.confidence:.2f}",
                color="red", fontsize=6)
    for obj in rec.gt_objects:
        b = obj.box
        ax.add_patch(plt.Rectangle((b.x1, b.y1), b.width, b.height, fill=False,
                                   edgecolor="lime", linewidth=1.2))
    ax.axis("off")
fig.tight_layout()
fig.savefig(root / "detections.png", dpi=130)
print(f"wrote {root / 'losses.png'} and {root / 'detections.png'}")
