"""Two-stream instance scoring, the image-level loss, and cascaded
pseudo-label refinement.

Score matrices follow the class-major convention: ``(C, N)`` with one
column per proposal. The classification stream is softmax-normalized over
classes per proposal, the detection stream over proposals per class, and
their elementwise product sums (over proposals) to per-class image scores
in ``[0, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import iou_matrix

PHI_CLAMP = 1e-6


def _softmax(z: np.ndarray, axis: int) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class ScoreBundle:
    xcls: np.ndarray  # (C, N) raw logits
    xdet: np.ndarray  # (C, N) raw logits
    sigma_cls: np.ndarray  # softmax of xcls over classes: columns sum to 1
    sigma_det: np.ndarray  # softmax of xdet over proposals: rows sum to 1
    fused: np.ndarray  # elementwise product, in [0, 1]
    phi: np.ndarray  # (C,) per-class image scores, in [0, 1]


def score_bundle(xcls_logits: np.ndarray, xdet_logits: np.ndarray) -> ScoreBundle:
    """Build the fused score bundle from proposal-major ``(N, C)`` logits."""
    xcls = np.asarray(xcls_logits, dtype=np.float64).T
    xdet = np.asarray(xdet_logits, dtype=np.float64).T
    sigma_cls = _softmax(xcls, axis=0)
    sigma_det = _softmax(xdet, axis=1)
    fused = sigma_cls * sigma_det
    return ScoreBundle(xcls, xdet, sigma_cls, sigma_det, fused, fused.sum(axis=1))


def mil_loss(phi: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Binary cross entropy over per-class image scores.

    ``phi`` is clamped into ``[1e-6, 1 - 1e-6]`` before the logs; the
    returned gradient is zero where the clamp is active.
    """
    phi = np.asarray(phi, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    p = np.clip(phi, PHI_CLAMP, 1.0 - PHI_CLAMP)
    loss = float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum())
    inside = (phi > PHI_CLAMP) & (phi < 1.0 - PHI_CLAMP)
    dphi = np.where(inside, -y / p + (1.0 - y) / (1.0 - p), 0.0)
    return loss, dphi


def mil_backward(bundle: ScoreBundle, dphi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. the proposal-major ``(N, C)`` logits."""
    dfused = np.broadcast_to(dphi[:, None], bundle.fused.shape)
    ds_cls = dfused * bundle.sigma_det
    ds_det = dfused * bundle.sigma_cls
    s = bundle.sigma_cls
    dxcls = s * (ds_cls - (ds_cls * s).sum(axis=0, keepdims=True))
    s = bundle.sigma_det
    dxdet = s * (ds_det - (ds_det * s).sum(axis=1, keepdims=True))
    return dxcls.T, dxdet.T


# ---------------------------------------------------------------------------
# pseudo labels


@dataclass
class PlsResult:
    """Mined / discarded proposal indices per ground-truth class."""

    mined: dict[int, list[int]] = field(default_factory=dict)
    discarded: dict[int, list[int]] = field(default_factory=dict)
    tau_pos: dict[int, float] = field(default_factory=dict)
    tau_neg: dict[int, float] = field(default_factory=dict)

    def validate(self) -> None:
        for c, rows in self.mined.items():
            overlap = set(rows) & set(self.discarded.get(c, ()))
            if overlap:
                raise ValueError(f"class {c}: mined and discarded overlap {sorted(overlap)}")


@dataclass
class PseudoLabelPlan:
    assigned: np.ndarray  # (N,) class per proposal; background == num_classes
    weights: np.ndarray  # (N,) in {0, 1}; 0 means ignored
    reg_targets: np.ndarray  # (N, 4), defined where assigned < num_classes
    seeds: dict[int, list[int]]  # class -> seed proposal indices
    num_classes: int

    @property
    def n_weighted(self) -> int:
        return int(self.weights.sum())

    @property
    def n_positive(self) -> int:
        return int(((self.assigned < self.num_classes) & (self.weights == 1)).sum())

    def foreground_indices(self) -> np.ndarray:
        return np.nonzero((self.assigned < self.num_classes) & (self.weights == 1))[0]


def generate_pseudo_labels(
    prev_scores: np.ndarray,
    labels: np.ndarray,
    boxes: np.ndarray,
    pls_result: PlsResult | None = None,
    iou_thresh: float = 0.5,
) -> PseudoLabelPlan:
    """Label every proposal from the previous stage's scores.

    For each present class the top-scoring proposal seeds the class
    (argmax ties to the lowest index); sampling-mined proposals join the
    seed set. A proposal takes the class of its highest-IoU seed at IoU >=
    ``iou_thresh`` (ties: lower class, then earlier seed), with the seed box
    as regression target; everything else is background. Discarded indices
    keep their assignment but get weight 0.
    """
    labels = np.asarray(labels)
    num_classes = labels.shape[0]
    n = boxes.shape[0]
    assigned = np.full(n, num_classes, dtype=np.int64)
    weights = np.ones(n, dtype=np.int8)
    reg_targets = np.zeros((n, 4), dtype=np.float64)
    present = [c for c in range(num_classes) if labels[c] == 1]
    plan = PseudoLabelPlan(assigned, weights, reg_targets, {}, num_classes)
    if not present:
        return plan

    pls = pls_result or PlsResult()
    pls.validate()
    seed_cols: list[tuple[int, int]] = []  # (class, proposal index), tie-break order
    for c in present:
        seed = int(np.argmax(prev_scores[c]))
        seeds = [seed] + [int(m) for m in sorted(pls.mined.get(c, [])) if m != seed]
        plan.seeds[c] = seeds
        seed_cols.extend((c, s) for s in seeds)

    seed_boxes = boxes[[s for _, s in seed_cols]]
    overlaps = iou_matrix(boxes, seed_boxes)
    overlaps[overlaps < iou_thresh] = -1.0
    best = overlaps.argmax(axis=1)  # first max -> (lower class, earlier seed)
    midx = np.nonzero(overlaps[np.arange(n), best] >= 0.0)[0]
    if midx.size:
        assigned[midx] = np.array([seed_cols[b][0] for b in best[midx]])
        s = boxes[[seed_cols[b][1] for b in best[midx]]]
        p = boxes[midx]
        pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
        reg_targets[midx, 0] = (0.5 * (s[:, 0] + s[:, 2]) - 0.5 * (p[:, 0] + p[:, 2])) / pw
        reg_targets[midx, 1] = (0.5 * (s[:, 1] + s[:, 3]) - 0.5 * (p[:, 1] + p[:, 3])) / ph
        reg_targets[midx, 2] = np.log((s[:, 2] - s[:, 0]) / pw)
        reg_targets[midx, 3] = np.log((s[:, 3] - s[:, 1]) / ph)
    for rows in pls.discarded.values():
        for r in rows:
            weights[r] = 0
    return plan


# ---------------------------------------------------------------------------
# refinement loss


def smooth_l1(diff: np.ndarray) -> tuple[float, np.ndarray]:
    """Elementwise Huber penalty (transition at 1) summed, with gradient."""
    a = np.abs(diff)
    loss = float(np.where(a < 1.0, 0.5 * diff * diff, a - 0.5).sum())
    grad = np.where(a < 1.0, diff, np.sign(diff))
    return loss, grad


def refine_loss(
    ref_logits: np.ndarray, reg: np.ndarray, plan: PseudoLabelPlan
) -> tuple[float, np.ndarray, np.ndarray]:
    """Weighted cross entropy plus SmoothL1 on the assigned class's slice.

    ``ref_logits`` is proposal-major ``(N, C+1)``; ``reg`` is
    ``(N, 4*(C+1))``. Returns (loss, dlogits, dreg), all float64. Zero
    weighted proposals -> exactly 0; zero positives -> no regression term.
    """
    logits = np.asarray(ref_logits, dtype=np.float64)
    reg = np.asarray(reg, dtype=np.float64)
    n, _ = logits.shape
    dlogits = np.zeros_like(logits)
    dreg = np.zeros_like(reg)
    n_k = plan.n_weighted
    if n_k == 0:
        return 0.0, dlogits, dreg
    probs = _softmax(logits, axis=1)
    w = plan.weights.astype(np.float64)
    picked = probs[np.arange(n), plan.assigned]
    ce = float(-(w * np.log(np.maximum(picked, 1e-300))).sum() / n_k)
    dlogits = probs.copy()
    dlogits[np.arange(n), plan.assigned] -= 1.0
    dlogits *= (w / n_k)[:, None]

    loss = ce
    fg = plan.foreground_indices()
    g_k = fg.size
    if g_k > 0:
        cols = (4 * plan.assigned[fg])[:, None] + np.arange(4)[None, :]
        diff = reg[fg[:, None], cols] - plan.reg_targets[fg]
        reg_loss, grad = smooth_l1(diff)
        loss += reg_loss / g_k
        dreg[fg[:, None], cols] = grad / g_k
    return loss, dlogits, dreg


def refine_probs(ref_logits: np.ndarray) -> np.ndarray:
    """Class-major ``(C+1, N)`` softmax scores of one refinement stage."""
    return _softmax(np.asarray(ref_logits, dtype=np.float64), axis=1).T
