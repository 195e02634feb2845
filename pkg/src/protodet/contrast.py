"""Feature-space augmentation and the prototype contrastive objective.

Anchors are the current image's selected positive-prototype embeddings and
two augmented views of each. Positives are the bank's same-class positive
prototypes; negatives are every other class's positives plus the class's
own negative prototypes. Bank vectors are constants: gradients flow only
into the anchors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bank import PrototypeBank
from .layers import l2norm_rows_backward, l2norm_rows_forward


def augment_views(
    vec: np.ndarray,
    rng: np.random.Generator,
    sigma: float = 0.05,
    dropout_frac: float = 0.1,
):
    """Two stochastic unit-norm views of a unit vector.

    View one adds an isotropic perturbation of exact norm ``sigma`` and
    renormalizes; view two zeroes ``dropout_frac`` of the coordinates and
    renormalizes. Returns (view1, view2, cache) with the cache holding what
    backward needs; both views are deterministic given the generator state.
    """
    v = np.asarray(vec, dtype=np.float64)
    d = v.shape[0]
    if sigma > 0.0:
        direction = rng.standard_normal(d)
        noise = direction * (sigma / np.linalg.norm(direction))
    else:
        noise = np.zeros(d)
    v1, n1_cache = l2norm_rows_forward((v + noise)[None, :])
    n_drop = int(round(dropout_frac * d))
    keep = np.ones(d)
    if n_drop > 0:
        keep[rng.choice(d, size=n_drop, replace=False)] = 0.0
    v2, n2_cache = l2norm_rows_forward((v * keep)[None, :])
    return v1[0], v2[0], (n1_cache, n2_cache, keep)


def augment_backward(dv1: np.ndarray, dv2: np.ndarray, cache) -> np.ndarray:
    n1_cache, n2_cache, keep = cache
    g1 = l2norm_rows_backward(dv1[None, :], n1_cache)[0]
    g2 = l2norm_rows_backward(dv2[None, :], n2_cache)[0] * keep
    return g1 + g2


@dataclass
class Anchor:
    class_index: int
    vec: np.ndarray  # unit vector
    positives: np.ndarray  # (P, D) bank constants
    negatives: np.ndarray  # (Q, D) bank constants

    @property
    def valid(self) -> bool:
        return self.positives.shape[0] > 0 and self.negatives.shape[0] > 0


def build_anchors(
    bank: PrototypeBank,
    selected: list[tuple[int, np.ndarray, int]],
    rng: np.random.Generator,
    sigma: float = 0.05,
    dropout_frac: float = 0.1,
):
    """Anchor triples (original + two views) for each selected prototype.

    Returns (anchors, sources): ``sources[i] = (proposal_index, view_cache)``
    maps each anchor back to the embedding row its gradient belongs to
    (``view_cache`` is None for the un-augmented anchor).
    """
    anchors: list[Anchor] = []
    sources: list[tuple[int, object]] = []
    for class_index, vec, m in selected:
        pos = bank.pos_matrix(class_index)
        neg_parts = [bank.pos_matrix(c) for c in range(bank.num_classes) if c != class_index]
        neg_parts.append(bank.neg_matrix(class_index))
        neg_parts = [p for p in neg_parts if p.shape[0]]
        neg = np.concatenate(neg_parts, axis=0) if neg_parts else np.zeros((0, bank.dim))
        v1, v2, cache = augment_views(vec, rng, sigma, dropout_frac)
        anchors.append(Anchor(class_index, np.asarray(vec, dtype=np.float64), pos, neg))
        sources.append((m, None))
        anchors.append(Anchor(class_index, v1, pos, neg))
        sources.append((m, ("v1", cache)))
        anchors.append(Anchor(class_index, v2, pos, neg))
        sources.append((m, ("v2", cache)))
    return anchors, sources


def contrastive_loss(anchors: list[Anchor], epsilon: float = 0.2):
    """Temperature-scaled contrast of each anchor against bank prototypes.

    Per anchor and positive: ``-log(exp(s.p/eps) / (exp(s.p/eps) +
    sum_n exp(s.n/eps)))`` averaged over positives, then over valid anchors
    (anchors lacking a positive or a negative are skipped; none valid ->
    exactly 0). Returns (loss, grads) with one gradient per anchor vector
    (zeros for skipped anchors); bank vectors receive no gradient.
    """
    if epsilon <= 0.0:
        raise ValueError(f"temperature must be positive, got {epsilon}")
    grads = [np.zeros_like(np.asarray(a.vec, dtype=np.float64)) for a in anchors]
    valid = [i for i, a in enumerate(anchors) if a.valid]
    if not valid:
        return 0.0, grads
    total = 0.0
    for i in valid:
        a = anchors[i]
        s = np.asarray(a.vec, dtype=np.float64)
        zp = a.positives @ s / epsilon  # (P,)
        zn = a.negatives @ s / epsilon  # (Q,)
        shift = max(zp.max(), zn.max())
        ep = np.exp(zp - shift)
        en = np.exp(zn - shift)
        b = en.sum()
        p_count = zp.shape[0]
        # loss terms: log(a_p + B) - log(a_p)
        total += float((np.log(ep + b) - np.log(ep)).sum()) / p_count
        # d/ds of the mean term
        denom = ep + b
        coeff_p = (ep / denom - 1.0) / p_count  # multiplies each positive vector
        coeff_n = (1.0 / denom).sum() * en / p_count  # multiplies each negative
        grads[i] = (coeff_p @ a.positives + coeff_n @ a.negatives) / epsilon
    loss = total / len(valid)
    for i in valid:
        grads[i] /= len(valid)
    return loss, grads


def total_loss(l_mil: float, l_refs: list[float], l_cont: float, lam: float) -> float:
    """Image loss: MIL + per-stage refinement sum + weighted contrastive."""
    return float(l_mil + sum(l_refs) + lam * l_cont)
