r"""
Two-stream scoring and the loss surfaces
========================================

Walks one image through the untrained network: the class/detection softmax
streams, their fused product, the per-class image scores, and the three
loss components evaluated on that single forward pass.
"""

import tempfile
from pathlib import Path

import numpy as np

from protodet.bank import PrototypeBank, select_positive_prototypes
from protodet.config import TrainConfig
from protodet.contrast import build_anchors, contrastive_loss, total_loss
from protodet.dataset import generate, load, rng_for
from protodet.mil import generate_pseudo_labels, mil_loss, refine_loss, score_bundle
from protodet.training import init_state

out_dir = Path(tempfile.mkdtemp(prefix="protodet_demo_"))
generate(seed=11, num_images=1, num_classes=5, out_dir=out_dir)
ds = load(out_dir)
rec = ds.records[0]
view = rec.train_view()

state = init_state(5, TrainConfig(seed=0))
rng = rng_for(0, 99)
out = state.net.forward(view.image, view.proposals.array, training=True, rng=rng)

bundle = score_bundle(out.xcls_logits, out.xdet_logits)
print("sigma_cls column sums (first 5):", bundle.sigma_cls.sum(axis=0)[:5].round(6))
print("sigma_det row sums:", bundle.sigma_det.sum(axis=1).round(6))
print("image scores phi:", bundle.phi.round(4), " labels:", view.labels)

l_mil, _ = mil_loss(bundle.phi, view.labels)
print(f"\nMIL loss on the untrained network: {l_mil:.4f}")

prev = bundle.fused
l_refs = []
for k in range(3):
    plan = generate_pseudo_labels(prev, view.labels, view.proposals.array)
    l_k, _, _ = refine_loss(out.ref_logits[k], out.reg[k], plan)
    l_refs.append(l_k)
    print(f"stage {k + 1}: seeds {plan.seeds}, {plan.n_positive} positives, loss {l_k:.4f}")

# a half-filled bank makes the contrastive term active
bank = PrototypeBank(5, capacity=6, dim=128)
proto_rng = np.random.default_rng(3)
for c in range(5):
    for _ in range(2):
        v = proto_rng.standard_normal(128)
        bank.update(c, "pos", v / np.linalg.norm(v))
        v = proto_rng.standard_normal(128)
        bank.update(c, "neg", v / np.linalg.norm(v))
selected = select_positive_prototypes(bundle.fused, out.embed, view.labels)
anchors, _ = build_anchors(bank, selected, rng)
l_cont, _ = contrastive_loss(anchors, epsilon=0.2)
print(f"\ncontrastive loss against a random bank: {l_cont:.4f}")
print(f"total: {total_loss(l_mil, l_refs, l_cont, lam=0.03):.4f}")
