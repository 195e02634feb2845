"""Global feature bank of per-class positive and negative prototypes.

Positive prototypes are embeddings of each present class's top-scoring
proposal; negative prototypes are embeddings of the highest-scoring
proposal of a class certifiably absent from the image. Slots hold at most
``capacity`` unit vectors per class and polarity; once full, the incoming
vector blends into its most similar slot with momentum and is renormalized.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from . import npa

logger = logging.getLogger(__name__)


class PrototypeBank:
    def __init__(self, num_classes: int, capacity: int = 6, dim: int = 128, momentum: float = 0.7):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.num_classes = num_classes
        self.capacity = capacity
        self.dim = dim
        self.momentum = momentum
        self.pos: list[list[np.ndarray]] = [[] for _ in range(num_classes)]
        self.neg: list[list[np.ndarray]] = [[] for _ in range(num_classes)]
        self.pos_counts: list[list[int]] = [[] for _ in range(num_classes)]
        self.neg_counts: list[list[int]] = [[] for _ in range(num_classes)]

    def _slots(self, polarity: str):
        if polarity == "pos":
            return self.pos, self.pos_counts
        if polarity == "neg":
            return self.neg, self.neg_counts
        raise ValueError(f"polarity must be 'pos' or 'neg', got {polarity!r}")

    def update(self, class_index: int, polarity: str, vec: np.ndarray) -> None:
        """Append below capacity; otherwise momentum-blend the most similar slot."""
        slots, counts = self._slots(polarity)
        v = np.asarray(vec, dtype=np.float64).copy()
        norm = np.linalg.norm(v)
        if abs(norm - 1.0) > 1e-6:
            logger.warning(
                "bank update for class %d (%s) got non-unit vector (|v|=%.6f); renormalizing",
                class_index,
                polarity,
                norm,
            )
            v /= norm
        entries = slots[class_index]
        if len(entries) < self.capacity:
            entries.append(v)
            counts[class_index].append(1)
            return
        sims = np.array([float(s @ v) for s in entries])
        j = int(np.argmax(sims))
        blended = self.momentum * entries[j] + (1.0 - self.momentum) * v
        entries[j] = blended / np.linalg.norm(blended)
        counts[class_index][j] += 1

    def pos_matrix(self, class_index: int) -> np.ndarray:
        """(m, dim) stack of class positives; empty -> (0, dim)."""
        e = self.pos[class_index]
        return np.stack(e) if e else np.zeros((0, self.dim))

    def neg_matrix(self, class_index: int) -> np.ndarray:
        e = self.neg[class_index]
        return np.stack(e) if e else np.zeros((0, self.dim))

    def pos_fill(self) -> int:
        return sum(len(e) for e in self.pos)

    def neg_fill(self) -> int:
        return sum(len(e) for e in self.neg)

    # -- persistence --------------------------------------------------------

    def save(self, path: str | Path) -> None:
        arrays = {}
        for c in range(self.num_classes):
            arrays[f"pos_{c}"] = self.pos_matrix(c).astype(np.float32)
            arrays[f"neg_{c}"] = self.neg_matrix(c).astype(np.float32)
            arrays[f"pos_counts_{c}"] = np.asarray(self.pos_counts[c], dtype=np.int32)
            arrays[f"neg_counts_{c}"] = np.asarray(self.neg_counts[c], dtype=np.int32)
        meta = {
            "num_classes": self.num_classes,
            "capacity": self.capacity,
            "dim": self.dim,
            "momentum": self.momentum,
        }
        npa.write_bundle(path, arrays, meta)

    @classmethod
    def load(cls, path: str | Path) -> "PrototypeBank":
        arrays, meta = npa.read_bundle(path)
        bank = cls(meta["num_classes"], meta["capacity"], meta["dim"], meta["momentum"])
        for c in range(bank.num_classes):
            bank.pos[c] = [row.astype(np.float64) for row in arrays[f"pos_{c}"]]
            bank.neg[c] = [row.astype(np.float64) for row in arrays[f"neg_{c}"]]
            bank.pos_counts[c] = [int(v) for v in arrays[f"pos_counts_{c}"]]
            bank.neg_counts[c] = [int(v) for v in arrays[f"neg_counts_{c}"]]
        return bank


# ---------------------------------------------------------------------------
# prototype selection from one image's scores


def select_positive_prototypes(
    fused: np.ndarray, embed: np.ndarray, labels: np.ndarray
) -> list[tuple[int, np.ndarray, int]]:
    """Per present class: the embedding of its top fused-score proposal.

    Returns (class, vector, proposal index) triples; argmax ties go to the
    lowest proposal index.
    """
    out = []
    for c in np.nonzero(np.asarray(labels) == 1)[0]:
        m = int(np.argmax(fused[c]))
        out.append((int(c), np.asarray(embed[m], dtype=np.float64), m))
    return out


def select_negative_prototypes(
    fused: np.ndarray,
    embed: np.ndarray,
    labels: np.ndarray,
    score_floor: float = 0.1,
) -> list[tuple[int, np.ndarray, int]]:
    """Per absent class: its top-scoring proposal, an archetypal mistake.

    The proposal is admitted only when its fused score reaches
    ``score_floor`` times the image's maximum fused score (0 admits every
    per-absent-class argmax).
    """
    floor = score_floor * float(fused.max()) if fused.size else 0.0
    out = []
    for c in np.nonzero(np.asarray(labels) == 0)[0]:
        m = int(np.argmax(fused[c]))
        if fused[c, m] >= floor:
            out.append((int(c), np.asarray(embed[m], dtype=np.float64), m))
    return out
