"""Similarity-threshold pseudo-label sampling against the prototype bank.

Mining: proposals whose embedding is closer to a class's top-ranking
proposal than the average similarity of that class's stored positives
become extra seeds. Discarding: proposals too similar to the class's
stored negatives (archetypal misclassifications) are dropped from the
supervision as probable overfit parts. With empty banks both passes are
inactive and sampling is the identity.
"""

from __future__ import annotations

import numpy as np

from .bank import PrototypeBank
from .geometry import iou_matrix
from .mil import PlsResult, generate_pseudo_labels

DISCARD_RULES = ("above_tau", "below_tau")


def tau_pos(bank: PrototypeBank, class_index: int, anchor: np.ndarray) -> float | None:
    """Mean cosine between the anchor and the class's stored positives."""
    mat = bank.pos_matrix(class_index)
    if mat.shape[0] == 0:
        return None
    return float((mat @ np.asarray(anchor, dtype=np.float64)).mean())


def mine(
    embed: np.ndarray,
    anchor: np.ndarray,
    tau: float,
    *,
    anchor_index: int,
    seed_box: np.ndarray,
    boxes: np.ndarray,
    iou_exclude: float = 0.5,
) -> list[int]:
    """Indices with cosine(embed_r, anchor) > tau, excluding the anchor
    itself and anything IoU > ``iou_exclude`` with the seed box (those are
    already covered by the neighborhood rule)."""
    sims = np.asarray(embed, dtype=np.float64) @ np.asarray(anchor, dtype=np.float64)
    near_seed = iou_matrix(boxes, seed_box[None, :])[:, 0] > iou_exclude
    hits = (sims > tau) & ~near_seed
    hits[anchor_index] = False
    return [int(r) for r in np.nonzero(hits)[0]]


def tau_neg(bank: PrototypeBank, class_index: int, embed: np.ndarray) -> float | None:
    """Mean over candidates of each candidate's best negative-prototype cosine."""
    mat = bank.neg_matrix(class_index)
    if mat.shape[0] == 0:
        return None
    sims = np.asarray(embed, dtype=np.float64) @ mat.T  # (N, m)
    return float(sims.max(axis=1).mean())


def discard(
    embed: np.ndarray,
    candidates: list[int] | np.ndarray,
    bank: PrototypeBank,
    class_index: int,
    tau: float,
    rule: str = "above_tau",
) -> list[int]:
    """Candidates flagged as overfit by their best negative-prototype cosine.

    ``above_tau`` (default) discards high similarity to the class's
    negative prototypes; ``below_tau`` is the printed-threshold variant,
    selectable for A/B comparison.
    """
    if rule not in DISCARD_RULES:
        raise ValueError(f"discard rule must be one of {DISCARD_RULES}, got {rule!r}")
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.size == 0:
        return []
    mat = bank.neg_matrix(class_index)
    if mat.shape[0] == 0:
        return []
    best = (np.asarray(embed, dtype=np.float64)[candidates] @ mat.T).max(axis=1)
    hit = best > tau if rule == "above_tau" else best < tau
    return [int(r) for r in candidates[hit]]


def run_pls(
    bank: PrototypeBank,
    fused: np.ndarray,
    embed: np.ndarray,
    labels: np.ndarray,
    boxes: np.ndarray,
    rule: str = "above_tau",
) -> PlsResult:
    """One sampling pass per image, shared by every refinement stage.

    Anchors come from the fused scores (the same top-ranking proposals that
    feed the positive bank). Discard candidates are the positives of the
    provisional fused-score plan; an index both mined and discarded ends up
    only discarded.
    """
    result = PlsResult()
    present = [int(c) for c in np.nonzero(np.asarray(labels) == 1)[0]]
    if not present:
        return result
    for c in present:
        m = int(np.argmax(fused[c]))
        anchor = np.asarray(embed[m], dtype=np.float64)
        tp = tau_pos(bank, c, anchor)
        if tp is None:
            continue
        result.tau_pos[c] = tp
        mined = mine(embed, anchor, tp, anchor_index=m, seed_box=boxes[m], boxes=boxes)
        if mined:
            result.mined[c] = mined
    provisional = generate_pseudo_labels(fused, labels, boxes, PlsResult(mined=dict(result.mined)))
    for c in present:
        tn = tau_neg(bank, c, embed)
        if tn is None:
            continue
        result.tau_neg[c] = tn
        candidates = np.nonzero(provisional.assigned == c)[0]
        dropped = discard(embed, candidates, bank, c, tn, rule)
        if dropped:
            result.discarded[c] = dropped
            if c in result.mined:
                kept = [r for r in result.mined[c] if r not in set(dropped)]
                if kept:
                    result.mined[c] = kept
                else:
                    del result.mined[c]
    result.validate()
    return result
