r"""
Pseudo-label sampling in action
===============================

Constructs a controlled scene where one class instance is missed by the
plain argmax seeding and a distractor half-box scores deceptively well,
then shows the mining pass recovering the missed instance and the discard
pass suppressing the part distractor.
"""

import numpy as np

from protodet.bank import PrototypeBank
from protodet.mil import PlsResult, generate_pseudo_labels
from protodet.sampling import run_pls

rng = np.random.default_rng(4)
dim = 128


def unit(v):
    return v / np.linalg.norm(v)


full_object = unit(rng.standard_normal(dim))   # how class-0 objects embed
part_only = unit(rng.standard_normal(dim))     # how bare parts embed

boxes = np.array(
    [
        [10, 10, 34, 34],   # 0: instance A (will be the argmax seed)
        [60, 60, 84, 84],   # 1: instance B, identical appearance, lower score
        [10, 10, 22, 34],   # 2: left half of A, the part distractor
        [40, 5, 55, 20],    # 3: background
        [5, 70, 25, 90],    # 4: background
    ],
    dtype=float,
)
embed = np.stack(
    [
        full_object,
        unit(full_object + 0.04 * rng.standard_normal(dim)),  # B looks like A
        unit(0.35 * full_object + part_only),                 # the part looks part-like
        unit(rng.standard_normal(dim)),
        unit(rng.standard_normal(dim)),
    ]
)
fused = np.array([[0.80, 0.30, 0.75, 0.02, 0.01]])  # the part scores deceptively high
labels = np.array([1])

print("without sampling:")
plan = generate_pseudo_labels(fused, labels, boxes)
print("  seeds:", plan.seeds, "assigned:", plan.assigned, "weights:", plan.weights)

bank = PrototypeBank(num_classes=1, capacity=6, dim=dim, momentum=0.7)
for _ in range(4):  # positives: full-object appearances from other images
    bank.update(0, "pos", unit(full_object + 0.05 * rng.standard_normal(dim)))
for _ in range(4):  # negatives: part-like embeddings misclassified elsewhere
    bank.update(0, "neg", unit(part_only + 0.05 * rng.standard_normal(dim)))

result = run_pls(bank, fused, embed, labels, boxes)
print("\nwith a filled bank:")
print(f"  tau_pos {result.tau_pos[0]:.3f}  tau_neg {result.tau_neg[0]:.3f}")
print("  mined:", result.mined, " discarded:", result.discarded)

plan = generate_pseudo_labels(fused, labels, boxes, result)
print("  seeds:", plan.seeds, "assigned:", plan.assigned, "weights:", plan.weights)
print("\ninstance B became a seed (mined); the half-box kept its class but its")
print("weight dropped to zero (discarded), so it no longer supervises refinement.")
