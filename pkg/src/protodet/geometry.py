"""Axis-aligned boxes, IoU, greedy NMS, and center-size regression encoding.

Coordinates are continuous reals with inclusive corners; area is
``(x2 - x1) * (y2 - y1)`` with no +1 pixel convention.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    """Rectangle with strictly positive width and height."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(np.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box {coords}: need x2 > x1 and y2 > y1")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def scaled(self, factor: float) -> "Box":
        """Scale width and height by ``factor`` about the center."""
        cx, cy = self.center
        hw = 0.5 * self.width * factor
        hh = 0.5 * self.height * factor
        return Box(cx - hw, cy - hh, cx + hw, cy + hh)

    def clipped(self, width: float, height: float) -> "Box":
        """Clip to ``[0, width] x [0, height]``; the result keeps positive area."""
        x1 = min(max(self.x1, 0.0), width - 1e-3)
        y1 = min(max(self.y1, 0.0), height - 1e-3)
        x2 = max(min(self.x2, width), x1 + 1e-3)
        y2 = max(min(self.y2, height), y1 + 1e-3)
        return Box(x1, y1, x2, y2)

    def contains_box(self, other: "Box", eps: float = 1e-6) -> bool:
        return (
            other.x1 >= self.x1 - eps
            and other.y1 >= self.y1 - eps
            and other.x2 <= self.x2 + eps
            and other.y2 <= self.y2 + eps
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @staticmethod
    def from_array(a: Sequence[float]) -> "Box":
        return Box(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


class ProposalSet:
    """Ordered, immutable collection of proposal boxes for one image.

    The index of a box here is the column index used by every score matrix
    downstream, so order is part of the contract.
    """

    def __init__(self, boxes: np.ndarray | Sequence[Box], image_id: str):
        if isinstance(boxes, np.ndarray):
            arr = np.asarray(boxes, dtype=np.float64)
        else:
            arr = np.stack([b.as_array() for b in boxes]) if len(boxes) else np.zeros((0, 4))
        if arr.ndim != 2 or arr.shape[1] != 4:
            raise ValueError(f"proposal array must be (N, 4), got {arr.shape}")
        if arr.shape[0] < 1:
            raise ValueError("a proposal set needs at least one box")
        if not np.isfinite(arr).all():
            raise ValueError("non-finite proposal coordinates")
        if not ((arr[:, 2] > arr[:, 0]).all() and (arr[:, 3] > arr[:, 1]).all()):
            raise ValueError("all proposals need positive width and height")
        self._boxes = arr
        self._boxes.setflags(write=False)
        self.image_id = image_id

    def __len__(self) -> int:
        return self._boxes.shape[0]

    def __iter__(self) -> Iterator[Box]:
        return (Box.from_array(row) for row in self._boxes)

    def box(self, i: int) -> Box:
        return Box.from_array(self._boxes[i])

    @property
    def array(self) -> np.ndarray:
        """(N, 4) read-only float64 view in box order."""
        return self._boxes


def iou(a: Box, b: Box) -> float:
    """Intersection over union; symmetric, 0 when disjoint, 1 when identical."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (N, 4) against (M, 4) arrays -> (N, M)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def nms(boxes: np.ndarray | Sequence[Box], scores: Sequence[float], threshold: float) -> list[int]:
    """Greedy non-maximum suppression.

    Boxes are visited in descending score order (ties go to the lower
    original index); a box is suppressed iff its IoU with an already kept
    box strictly exceeds ``threshold``. Returns kept indices in visit order.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"nms threshold must lie in (0, 1), got {threshold}")
    if isinstance(boxes, np.ndarray):
        arr = np.asarray(boxes, dtype=np.float64)
    else:
        arr = np.stack([b.as_array() for b in boxes]) if len(boxes) else np.zeros((0, 4))
    s = np.asarray(scores, dtype=np.float64)
    if arr.shape[0] != s.shape[0]:
        raise ValueError("boxes and scores must have equal length")
    if arr.shape[0] == 0:
        return []
    order = np.lexsort((np.arange(len(s)), -s))
    kept: list[int] = []
    kept_rows: list[np.ndarray] = []
    for i in order:
        row = arr[i]
        suppressed = False
        for krow in kept_rows:
            ix = min(row[2], krow[2]) - max(row[0], krow[0])
            iy = min(row[3], krow[3]) - max(row[1], krow[1])
            if ix > 0.0 and iy > 0.0:
                inter = ix * iy
                area = (row[2] - row[0]) * (row[3] - row[1])
                karea = (krow[2] - krow[0]) * (krow[3] - krow[1])
                if inter / (area + karea - inter) > threshold:
                    suppressed = True
                    break
        if not suppressed:
            kept.append(int(i))
            kept_rows.append(row)
    return kept


def encode_regression(proposal: Box, target: Box) -> np.ndarray:
    """Center-size offsets ``(dx/w, dy/h, log(wt/w), log(ht/h))`` as float64."""
    px, py = proposal.center
    tx, ty = target.center
    return np.array(
        [
            (tx - px) / proposal.width,
            (ty - py) / proposal.height,
            np.log(target.width / proposal.width),
            np.log(target.height / proposal.height),
        ],
        dtype=np.float64,
    )


def decode_regression(delta: Sequence[float], proposal: Box) -> Box:
    """Inverse of :func:`encode_regression`: apply offsets to a proposal."""
    dx, dy, dw, dh = (float(v) for v in delta)
    px, py = proposal.center
    cx = px + dx * proposal.width
    cy = py + dy * proposal.height
    w = proposal.width * np.exp(dw)
    h = proposal.height * np.exp(dh)
    return Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
