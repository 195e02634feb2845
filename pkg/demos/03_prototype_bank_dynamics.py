r"""
Prototype bank dynamics
=======================

Fills a bank with synthetic class clusters, shows the momentum blend
converging slots toward cluster centers, and renders the pairwise cosine
structure the sampling thresholds are computed from.
"""

import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from protodet.bank import PrototypeBank
from protodet.sampling import tau_neg, tau_pos

rng = np.random.default_rng(0)
dim = 128
centers = rng.standard_normal((3, dim))
centers /= np.linalg.norm(centers, axis=1, keepdims=True)


def sample_near(center, spread=0.35):
    v = center + spread * rng.standard_normal(dim)
    return v / np.linalg.norm(v)


bank = PrototypeBank(num_classes=3, capacity=6, dim=dim, momentum=0.7)
for step in range(200):
    c = int(rng.integers(0, 3))
    bank.update(c, "pos", sample_near(centers[c]))
    bank.update(c, "neg", sample_near(-centers[c], spread=0.5))

print("fill:", bank.pos_fill(), "positives,", bank.neg_fill(), "negatives")
for c in range(3):
    sims = bank.pos_matrix(c) @ centers[c]
    print(f"class {c}: slot-to-center cosine after 200 updates: "
          f"min {sims.min():.3f} mean {sims.mean():.3f}")
    print(f"  update counts: {bank.pos_counts[c]}")

anchor = sample_near(centers[0])
print(f"\ntau_pos for a near-cluster anchor: {tau_pos(bank, 0, anchor):.3f}")
candidates = np.stack([sample_near(centers[0]) for _ in range(10)]
                      + [sample_near(-centers[0], 0.5) for _ in range(10)])
print(f"tau_neg over a mixed candidate set: {tau_neg(bank, 0, candidates):.3f}")

fig, axes = plt.subplots(1, 3, figsize=(10, 3.2))
for c, ax in enumerate(axes):
    mat = np.vstack([bank.pos_matrix(c), bank.neg_matrix(c)])
    im = ax.imshow(mat @ mat.T, vmin=-1, vmax=1, cmap="RdBu_r")
    ax.set_title(f"class {c}: pos+neg cosines", fontsize=9)
fig.colorbar(im, ax=axes, shrink=0.8)
out = Path(tempfile.mkdtemp(prefix="protodet_demo_")) / "bank_cosines.png"
fig.savefig(out, dpi=130)
print(f"\nwrote {out}")
