"""Independent brute-force reference implementations used only by tests.

Everything here is deliberately written as plain scalar loops over raw
floats and lists, sharing no code with the library, so that agreement is
meaningful. Slow on purpose.
"""

from __future__ import annotations

import math


# ---------------------------------------------------------------------------
# geometry


def iou_grid_oracle(a, b, steps: int = 400) -> float:
    """IoU by counting sub-sampled grid points over the union's bounding box."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    x_lo, x_hi = min(ax1, bx1), max(ax2, bx2)
    y_lo, y_hi = min(ay1, by1), max(ay2, by2)
    dx = (x_hi - x_lo) / steps
    dy = (y_hi - y_lo) / steps
    inter = union = 0
    for i in range(steps):
        x = x_lo + (i + 0.5) * dx
        in_ax = ax1 <= x <= ax2
        in_bx = bx1 <= x <= bx2
        if not (in_ax or in_bx):
            continue
        for j in range(steps):
            y = y_lo + (j + 0.5) * dy
            in_a = in_ax and ay1 <= y <= ay2
            in_b = in_bx and by1 <= y <= by2
            if in_a and in_b:
                inter += 1
            if in_a or in_b:
                union += 1
    return inter / union if union else 0.0


def iou_exact(a, b) -> float:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    return inter / (area_a + area_b - inter)


def nms_oracle(boxes, scores, threshold) -> list[int]:
    """Pairwise-exhaustive greedy suppression on python lists."""
    n = len(boxes)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    kept: list[int] = []
    for i in order:
        ok = True
        for k in kept:
            if iou_exact(boxes[i], boxes[k]) > threshold:
                ok = False
                break
        if ok:
            kept.append(i)
    return kept


# ---------------------------------------------------------------------------
# losses


def mil_loss_oracle(phi, y) -> float:
    total = 0.0
    for c in range(len(y)):
        p = min(max(phi[c], 1e-6), 1.0 - 1e-6)
        total -= y[c] * math.log(p) + (1.0 - y[c]) * math.log(1.0 - p)
    return total


def smooth_l1_oracle(diff) -> float:
    total = 0.0
    for d in diff:
        total += 0.5 * d * d if abs(d) < 1.0 else abs(d) - 0.5
    return total


def refine_loss_oracle(probs, reg_pred, assigned, weights, reg_targets) -> float:
    """probs: (C+1, N) column-stochastic; assigned: class index per proposal
    (background = C); weights in {0, 1}; reg_targets: dict r -> 4-list for
    foreground proposals. reg_pred: (4*(C+1), N).
    """
    n_cols = len(assigned)
    num_classes = len(probs) - 1
    n_k = sum(1 for r in range(n_cols) if weights[r] == 1)
    fg = [r for r in range(n_cols) if weights[r] == 1 and assigned[r] < num_classes]
    g_k = len(fg)
    if n_k == 0:
        return 0.0
    ce = 0.0
    for r in range(n_cols):
        if weights[r] == 1:
            ce -= math.log(max(probs[assigned[r]][r], 1e-300))
    loss = ce / n_k
    if g_k > 0:
        reg = 0.0
        for r in fg:
            c = assigned[r]
            diff = [reg_pred[4 * c + i][r] - reg_targets[r][i] for i in range(4)]
            reg += smooth_l1_oracle(diff)
        loss += reg / g_k
    return loss


def contrastive_loss_oracle(anchors, positives, negatives, epsilon) -> float:
    """anchors: list of vectors; positives/negatives: per-anchor lists of
    vectors. Anchors with no positive or no negative are skipped.
    """
    terms = []
    for s, pos, neg in zip(anchors, positives, negatives):
        if not pos or not neg:
            continue
        denom_neg = sum(math.exp(_dot(s, sn) / epsilon) for sn in neg)
        inner = 0.0
        for sp in pos:
            a = math.exp(_dot(s, sp) / epsilon)
            inner += math.log(a / (a + denom_neg))
        terms.append(inner / len(pos))
    if not terms:
        return 0.0
    return -sum(terms) / len(terms)


def _dot(u, v) -> float:
    return sum(ui * vi for ui, vi in zip(u, v))


def cosine_oracle(u, v) -> float:
    nu = math.sqrt(_dot(u, u))
    nv = math.sqrt(_dot(v, v))
    return _dot(u, v) / (nu * nv)


# ---------------------------------------------------------------------------
# pseudo-label sampling


def tau_pos_oracle(anchor, bank_pos) -> float:
    return sum(cosine_oracle(anchor, p) for p in bank_pos) / len(bank_pos)


def mine_oracle(embeds, anchor, tau, anchor_index, seed_box, boxes) -> list[int]:
    mined = []
    for r in range(len(embeds)):
        if r == anchor_index:
            continue
        if iou_exact(boxes[r], seed_box) > 0.5:
            continue
        if cosine_oracle(embeds[r], anchor) > tau:
            mined.append(r)
    return mined


def tau_neg_oracle(embeds, bank_neg) -> float:
    total = 0.0
    for e in embeds:
        total += max(cosine_oracle(e, n) for n in bank_neg)
    return total / len(embeds)


def discard_oracle(embeds, candidates, bank_neg, tau, rule="above_tau") -> list[int]:
    out = []
    for r in candidates:
        best = max(cosine_oracle(embeds[r], n) for n in bank_neg)
        hit = best > tau if rule == "above_tau" else best < tau
        if hit:
            out.append(r)
    return out


# ---------------------------------------------------------------------------
# pseudo-label plan


def pseudo_label_plan_oracle(prev_scores, labels, boxes, mined, discarded, num_classes):
    """Reference plan: argmax seed per present class plus mined seeds; each
    proposal joins the max-IoU seed at IoU >= 0.5 (ties: lower class, then
    lower seed index); discarded indices get weight 0.

    prev_scores: rows per class (>= num_classes rows accepted, extra rows
    ignored); mined/discarded: dict class -> list of indices.
    Returns (assigned, weights, seeds_by_class, targets) with background ==
    num_classes and targets a dict r -> (seed_box).
    """
    n = len(boxes)
    present = [c for c in range(num_classes) if labels[c] == 1]
    assigned = [num_classes] * n
    weights = [1] * n
    seeds_by_class: dict[int, list[int]] = {}
    targets: dict[int, tuple] = {}
    if not present:
        return assigned, weights, seeds_by_class, targets
    for c in present:
        row = prev_scores[c]
        best = 0
        for r in range(1, n):
            if row[r] > row[best]:
                best = r
        seeds = [best]
        for m in sorted(mined.get(c, [])):  # mined indices are a set; canonical order
            if m not in seeds:
                seeds.append(m)
        seeds_by_class[c] = seeds
    for r in range(n):
        best_iou = 0.0
        best_key = None
        for c in present:
            for si, s in enumerate(seeds_by_class[c]):
                ov = iou_exact(boxes[r], boxes[s])
                if ov >= 0.5:
                    key = (-ov, c, si)
                    if best_key is None or key < best_key:
                        best_key = key
                        best_iou = ov
        if best_key is not None:
            _, c, si = best_key
            assigned[r] = c
            targets[r] = boxes[seeds_by_class[c][si]]
    for c, rows in discarded.items():
        for r in rows:
            weights[r] = 0
    return assigned, weights, seeds_by_class, targets


# ---------------------------------------------------------------------------
# average precision


def ap_oracle(detections, gt_boxes, iou_thresh=0.5) -> float:
    """All-points interpolated AP for one class.

    detections: list of (image_id, confidence, box); gt_boxes: dict
    image_id -> list of boxes. Greedy max-IoU matching in confidence order,
    each ground-truth box matched at most once.
    """
    npos = sum(len(v) for v in gt_boxes.values())
    if npos == 0:
        return 0.0
    dets = sorted(range(len(detections)), key=lambda i: (-detections[i][1], i))
    matched: dict[tuple, bool] = {}
    tps, fps = [], []
    for i in dets:
        image_id, _, box = detections[i]
        best_iou, best_j = 0.0, None
        for j, g in enumerate(gt_boxes.get(image_id, [])):
            ov = iou_exact(box, g)
            if ov > best_iou:
                best_iou, best_j = ov, j
        if best_j is not None and best_iou >= iou_thresh and not matched.get((image_id, best_j)):
            matched[(image_id, best_j)] = True
            tps.append(1)
            fps.append(0)
        else:
            tps.append(0)
            fps.append(1)
    precisions, recalls = [], []
    tp = fp = 0
    for t, f in zip(tps, fps):
        tp += t
        fp += f
        precisions.append(tp / (tp + fp))
        recalls.append(tp / npos)
    # integrate the precision envelope over recall (all-points interpolation);
    # the envelope at a new recall value is the max precision at or after the
    # first detection reaching that recall
    ap = 0.0
    prev_recall = 0.0
    for k in range(len(recalls)):
        if recalls[k] == prev_recall:
            continue
        ap += (recalls[k] - prev_recall) * max(precisions[k:])
        prev_recall = recalls[k]
    return ap


# ---------------------------------------------------------------------------
# RoI pooling


def roi_pool_oracle(fmap, region, mask, stride, grid=4):
    """Nested-loop masked grid max pooling over one region.

    Mirrors the published contract: continuous cell bounds, floor/ceil
    integer windows with midpoint fallback for degenerate cells, per-cell
    max, and exact zero for cells fully inside the mask rectangle.
    """
    h = len(fmap)
    w = len(fmap[0])
    c = len(fmap[0][0])
    x1, y1, x2, y2 = region
    out = [[[0.0] * c for _ in range(grid)] for _ in range(grid)]

    def windows(lo, hi, limit):
        result = []
        for g in range(grid):
            a = lo + (hi - lo) * (g / grid)
            b = lo + (hi - lo) * ((g + 1) / grid)
            i0 = int(math.floor(a))
            i1 = int(math.ceil(b))
            i0 = min(max(i0, 0), limit - 1)
            i1 = min(max(i1, 1), limit)
            if i1 <= i0:
                mid = min(max(int(math.floor(0.5 * (a + b))), 0), limit - 1)
                i0, i1 = mid, mid + 1
            result.append((i0, i1))
        return result

    wx = windows(x1 / stride, x2 / stride, w)
    wy = windows(y1 / stride, y2 / stride, h)
    eps = 1e-6 * max(h, w) * stride
    for gy in range(grid):
        for gx in range(grid):
            if mask is not None:
                cx0 = x1 + (x2 - x1) * (gx / grid)
                cx1 = x1 + (x2 - x1) * ((gx + 1) / grid)
                cy0 = y1 + (y2 - y1) * (gy / grid)
                cy1 = y1 + (y2 - y1) * ((gy + 1) / grid)
                if (
                    cx0 >= mask[0] - eps
                    and cx1 <= mask[2] + eps
                    and cy0 >= mask[1] - eps
                    and cy1 <= mask[3] + eps
                ):
                    continue  # stays 0
            (ix0, ix1) = wx[gx]
            (iy0, iy1) = wy[gy]
            for ch in range(c):
                best = None
                for yy in range(iy0, iy1):
                    for xx in range(ix0, ix1):
                        v = fmap[yy][xx][ch]
                        if best is None or v > best:
                            best = v
                out[gy][gx][ch] = best
    return out
