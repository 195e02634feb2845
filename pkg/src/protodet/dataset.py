"""Synthetic multi-object shapes dataset with image-level labels.

Each image carries 1-4 colored shapes on a textured background, a binary
class-presence vector, and ~150 pre-generated proposal boxes (ground-truth
jitters, discriminative sub-part distractors, and random fill). Ground-truth
boxes are stored for the evaluator only; training code receives a
:class:`TrainView` that does not expose them.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import npa
from .errors import ConfigurationError, DataError
from .geometry import Box, ProposalSet, iou, iou_matrix

DEFAULT_CLASS_NAMES = ("circle", "square", "triangle", "cross", "ring")

# stream tags keeping per-purpose RNG streams independent
_STREAM_IMAGE = 1
_STREAM_PROPOSALS = 2
_STREAM_SHUFFLE = 3


def rng_for(seed: int, *tags: int) -> np.random.Generator:
    """Deterministic generator for (seed, purpose, index...) tuples."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *tags])))


@dataclass(frozen=True)
class GenParams:
    image_size: int = 96
    num_proposals: int = 150
    min_object_size: float = 12.0
    max_object_size: float = 40.0
    max_objects: int = 4
    max_distinct_classes: int = 3
    gt_overlap_max: float = 0.3
    jitters_per_gt: int = 8
    subparts_per_gt: int = 4
    texture_noise: float = 0.08
    pixel_noise: float = 0.04
    shade_noise: float = 0.03
    # color is the learnable class cue: each class owns a hue band, but a
    # fraction of objects draw an arbitrary hue, so confident cross-class
    # mistakes (the negative-prototype raw material) keep happening
    hue_jitter: float = 0.05
    offcolor_frac: float = 0.15

    def validate(self) -> None:
        if self.image_size < 32 or self.image_size % 8 != 0:
            raise ConfigurationError("image_size must be >= 32 and divisible by 8")
        if self.num_proposals < 8:
            raise ConfigurationError("num_proposals must be >= 8")
        if not 2.0 <= self.min_object_size < self.max_object_size:
            raise ConfigurationError("need 2 <= min_object_size < max_object_size")
        if self.max_object_size > self.image_size - 4:
            raise ConfigurationError("max_object_size too large for the image")
        if not 1 <= self.max_objects <= 6:
            raise ConfigurationError("max_objects must lie in [1, 6]")
        if not 0.0 <= self.gt_overlap_max < 1.0:
            raise ConfigurationError("gt_overlap_max must lie in [0, 1)")
        if self.max_objects * (self.jitters_per_gt + self.subparts_per_gt + 1) > self.num_proposals:
            raise ConfigurationError("num_proposals too small for the structured proposals")


@dataclass(frozen=True)
class GtObject:
    class_index: int
    box: Box


@dataclass(frozen=True)
class TrainView:
    """What the trainer is allowed to see: no ground-truth boxes."""

    image_id: str
    image: np.ndarray
    labels: np.ndarray
    proposals: ProposalSet


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    labels: np.ndarray  # (C,) int32, 1 iff class present
    proposals: ProposalSet
    gt_objects: tuple[GtObject, ...] = field(repr=False)  # evaluator only

    def train_view(self) -> TrainView:
        return TrainView(self.image_id, self.image, self.labels, self.proposals)


@dataclass
class DatasetManifest:
    num_images: int
    num_classes: int
    class_names: list[str]
    seed: int
    records: list[dict]
    root: Path


class Dataset:
    """In-memory dataset with deterministic shuffled iteration."""

    def __init__(self, manifest: DatasetManifest, records: list[ImageRecord]):
        self.manifest = manifest
        self.records = records

    def __len__(self) -> int:
        return len(self.records)

    @property
    def num_classes(self) -> int:
        return self.manifest.num_classes

    @property
    def class_names(self) -> list[str]:
        return self.manifest.class_names

    def shuffled(self, epoch_seed: int) -> list[ImageRecord]:
        order = rng_for(epoch_seed, _STREAM_SHUFFLE).permutation(len(self.records))
        return [self.records[i] for i in order]


# ---------------------------------------------------------------------------
# rendering


def _class_names(num_classes: int) -> list[str]:
    if not 2 <= num_classes <= 10:
        raise ConfigurationError(f"num_classes must lie in [2, 10], got {num_classes}")
    names = []
    for c in range(num_classes):
        base = DEFAULT_CLASS_NAMES[c % len(DEFAULT_CLASS_NAMES)]
        names.append(base if c < len(DEFAULT_CLASS_NAMES) else base + "2")
    return names


def _object_color(
    rng: np.random.Generator, class_index: int, num_classes: int, params: GenParams
) -> np.ndarray:
    if rng.random() < params.offcolor_frac:
        hue = rng.uniform(0.0, 1.0)
    else:
        hue = (class_index / num_classes + rng.normal(0.0, params.hue_jitter)) % 1.0
    sat = rng.uniform(0.7, 1.0)
    val = rng.uniform(0.6, 0.95)
    rgb = np.array(colorsys.hsv_to_rgb(hue, sat, val))
    rgb = np.clip(rgb + rng.normal(0.0, 0.05, size=3), 0.0, 1.0)  # color jitter
    return rgb


def _shape_mask(shape: str, box: Box, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    xs = xs + 0.5
    ys = ys + 0.5
    cx, cy = box.center
    hx = 0.5 * box.width
    hy = 0.5 * box.height
    u = (xs - cx) / hx
    v = (ys - cy) / hy
    if shape == "circle":
        return u * u + v * v <= 1.0
    if shape == "square":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    if shape == "triangle":
        # apex at top center, base along the bottom edge
        return (v <= 1.0) & (np.abs(u) <= (v + 1.0) / 2.0)
    if shape == "cross":
        bar = 0.34
        horiz = (np.abs(v) <= bar) & (np.abs(u) <= 1.0)
        vert = (np.abs(u) <= bar) & (np.abs(v) <= 1.0)
        return horiz | vert
    if shape == "ring":
        r2 = u * u + v * v
        return (r2 <= 1.0) & (r2 >= 0.55**2)
    raise ValueError(f"unknown shape {shape!r}")


def _render_background(rng: np.random.Generator, params: GenParams) -> np.ndarray:
    size = params.image_size
    base = rng.uniform(0.25, 0.45, size=3)
    img = np.tile(base.astype(np.float64), (size, size, 1))
    coarse = rng.normal(0.0, params.texture_noise, size=(size // 8, size // 8, 3))
    img += np.kron(coarse, np.ones((8, 8, 1)))
    img += rng.normal(0.0, params.pixel_noise, size=img.shape)
    return img


def _place_objects(
    rng: np.random.Generator, num_classes: int, params: GenParams
) -> list[GtObject]:
    n_objects = int(rng.choice([1, 2, 3, 4][: params.max_objects],
                               p=_object_count_probs(params.max_objects)))
    max_distinct = min(params.max_distinct_classes, n_objects, num_classes)
    n_distinct = int(rng.integers(1, max_distinct + 1))
    classes = list(rng.choice(num_classes, size=n_distinct, replace=False))
    # every chosen class appears at least once; the rest duplicate randomly
    assignment = classes + [int(rng.choice(classes)) for _ in range(n_objects - n_distinct)]
    size = params.image_size
    placed: list[GtObject] = []
    for class_index in assignment:
        for _ in range(40):
            s = rng.uniform(params.min_object_size, params.max_object_size)
            name = DEFAULT_CLASS_NAMES[class_index % len(DEFAULT_CLASS_NAMES)]
            aspect = rng.uniform(0.85, 1.2) if name in ("triangle", "cross") else 1.0
            w = s
            h = min(max(s * aspect, params.min_object_size), params.max_object_size)
            cx = rng.uniform(0.5 * w + 1.0, size - 0.5 * w - 1.0)
            cy = rng.uniform(0.5 * h + 1.0, size - 0.5 * h - 1.0)
            box = Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
            if all(iou(box, g.box) <= params.gt_overlap_max for g in placed):
                placed.append(GtObject(class_index, box))
                break
    return placed


def _object_count_probs(max_objects: int) -> np.ndarray:
    # skewed toward multi-object images so same-class duplicates are common
    weights = np.array([0.15, 0.25, 0.30, 0.30][:max_objects])
    return weights / weights.sum()


def render_image(
    seed: int, index: int, num_classes: int, params: GenParams
) -> tuple[np.ndarray, list[GtObject]]:
    """Render image ``index`` of the dataset: float32 (H, W, 3) plus its GT."""
    rng = rng_for(seed, _STREAM_IMAGE, index)
    img = _render_background(rng, params)
    objects = _place_objects(rng, num_classes, params)
    for obj in objects:
        name = DEFAULT_CLASS_NAMES[obj.class_index % len(DEFAULT_CLASS_NAMES)]
        mask = _shape_mask(name, obj.box, params.image_size)
        color = _object_color(rng, obj.class_index, num_classes, params)
        shade = rng.normal(0.0, params.shade_noise, size=(int(mask.sum()), 3))
        img[mask] = color[None, :] + shade
    return np.clip(img, 0.0, 1.0).astype(np.float32), objects


# ---------------------------------------------------------------------------
# proposals


def _jitter_box(rng: np.random.Generator, box: Box, amount: float, size: int) -> Box:
    cx, cy = box.center
    w, h = box.width, box.height
    cx += rng.uniform(-amount, amount) * w
    cy += rng.uniform(-amount, amount) * h
    w *= 1.0 + rng.uniform(-amount, amount)
    h *= 1.0 + rng.uniform(-amount, amount)
    raw = Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    return raw.clipped(size, size)


def _half_box(rng: np.random.Generator, box: Box, size: int) -> Box:
    side = int(rng.integers(0, 4))
    cx, cy = box.center
    if side == 0:
        raw = Box(box.x1, box.y1, cx, box.y2)
    elif side == 1:
        raw = Box(cx, box.y1, box.x2, box.y2)
    elif side == 2:
        raw = Box(box.x1, box.y1, box.x2, cy)
    else:
        raw = Box(box.x1, cy, box.x2, box.y2)
    return _jitter_box(rng, raw, 0.06, size)


def make_proposals(
    gt_objects: list[GtObject] | tuple[GtObject, ...],
    image_size: int,
    params: GenParams,
    seed: int,
    index: int = 0,
) -> np.ndarray:
    """Pre-generate exactly ``params.num_proposals`` boxes for one image.

    Union of per-GT jitters, per-GT half-box distractors (the
    discriminative-part failure mode the sampling module is meant to fix),
    and uniform random fill; at least one proposal reaches IoU >= 0.6 with
    every GT object, and the final order is a deterministic shuffle.
    """
    rng = rng_for(seed, _STREAM_PROPOSALS, index)
    size = image_size
    boxes: list[Box] = []
    for obj in gt_objects:
        jitters = [_jitter_box(rng, obj.box, 0.25, size) for _ in range(params.jitters_per_gt)]
        if max(iou(j, obj.box) for j in jitters) < 0.6:
            # coverage guarantee: redraw the last jitter with shrinking noise
            for attempt in range(20):
                cand = _jitter_box(rng, obj.box, 0.25 / (attempt + 2), size)
                if iou(cand, obj.box) >= 0.6:
                    jitters[-1] = cand
                    break
            else:
                jitters[-1] = obj.box.clipped(size, size)
        boxes.extend(jitters)
        boxes.extend(_half_box(rng, obj.box, size) for _ in range(params.subparts_per_gt))
    while len(boxes) < params.num_proposals:
        w = rng.uniform(8.0, 0.6 * size)
        h = rng.uniform(8.0, 0.6 * size)
        cx = rng.uniform(0.5 * w, size - 0.5 * w)
        cy = rng.uniform(0.5 * h, size - 0.5 * h)
        boxes.append(Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h).clipped(size, size))
    arr = np.stack([b.as_array() for b in boxes[: params.num_proposals]])
    return arr[rng.permutation(arr.shape[0])]


# ---------------------------------------------------------------------------
# persistence

_MANIFEST_NAME = "manifest.json"


def generate(
    seed: int,
    num_images: int,
    num_classes: int,
    out_dir: str | Path,
    params: GenParams | None = None,
) -> DatasetManifest:
    """Generate a dataset on disk; bit-identical for identical arguments."""
    params = params or GenParams()
    params.validate()
    if num_images < 1:
        raise ConfigurationError("num_images must be >= 1")
    class_names = _class_names(num_classes)
    out = Path(out_dir)
    (out / "records").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(num_images):
        image, objects = render_image(seed, i, num_classes, params)
        labels = np.zeros(num_classes, dtype=np.int32)
        for obj in objects:
            labels[obj.class_index] = 1
        proposals = make_proposals(objects, params.image_size, params, seed, i)
        gt = np.array(
            [[o.class_index, o.box.x1, o.box.y1, o.box.x2, o.box.y2] for o in objects],
            dtype=np.float32,
        ).reshape(len(objects), 5)
        rid = f"img_{i:05d}"
        files = {
            "image_file": f"records/{rid}_image.npa",
            "proposal_file": f"records/{rid}_proposals.npa",
            "gt_file": f"records/{rid}_gt.npa",
        }
        npa.write(out / files["image_file"], image)
        npa.write(out / files["proposal_file"], proposals.astype(np.float32))
        npa.write(out / files["gt_file"], gt)
        records.append(
            {
                "id": rid,
                "image_file": files["image_file"],
                "labels": [int(v) for v in labels],
                "proposal_file": files["proposal_file"],
                "gt_file": files["gt_file"],
            }
        )
    manifest_dict = {
        "version": 1,
        "num_images": num_images,
        "num_classes": num_classes,
        "class_names": class_names,
        "seed": seed,
        "records": records,
    }
    (out / _MANIFEST_NAME).write_text(json.dumps(manifest_dict, indent=1) + "\n")
    return DatasetManifest(num_images, num_classes, class_names, seed, records, out)


_MANIFEST_KEYS = {"version", "num_images", "num_classes", "class_names", "seed", "records"}
_RECORD_KEYS = {"id", "image_file", "labels", "proposal_file", "gt_file"}


def load(manifest_path: str | Path) -> Dataset:
    """Load a dataset; any structural corruption names the offending record."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / _MANIFEST_NAME
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    try:
        raw = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"manifest is not valid JSON: {e}") from e
    if set(raw) != _MANIFEST_KEYS or raw.get("version") != 1:
        raise DataError(f"manifest keys/version mismatch: {sorted(raw)}")
    root = manifest_path.parent
    num_classes = raw["num_classes"]
    records: list[ImageRecord] = []
    for idx, rec in enumerate(raw["records"]):
        if set(rec) != _RECORD_KEYS:
            raise DataError(f"record {idx}: bad keys {sorted(rec)}")
        try:
            image = npa.read(root / rec["image_file"])
            proposals = npa.read(root / rec["proposal_file"])
            gt = npa.read(root / rec["gt_file"])
        except (OSError, npa.NpaError) as e:
            raise DataError(f"record {idx} ({rec['id']}): {e}") from e
        if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.float32:
            raise DataError(f"record {idx}: image must be float32 (H, W, 3)")
        if proposals.ndim != 2 or proposals.shape[1] != 4:
            raise DataError(f"record {idx}: proposals must be (N, 4)")
        if gt.ndim != 2 or gt.shape[1] != 5:
            raise DataError(f"record {idx}: gt must be (G, 5)")
        labels = np.asarray(rec["labels"], dtype=np.int32)
        if labels.shape != (num_classes,):
            raise DataError(f"record {idx}: labels length != num_classes")
        gt_objects = tuple(
            GtObject(int(row[0]), Box.from_array(row[1:].astype(np.float64)))
            for row in gt
        )
        records.append(
            ImageRecord(
                image_id=rec["id"],
                image=image,
                labels=labels,
                proposals=ProposalSet(proposals.astype(np.float64), image_id=rec["id"]),
                gt_objects=gt_objects,
            )
        )
    manifest = DatasetManifest(
        raw["num_images"], num_classes, list(raw["class_names"]), raw["seed"], raw["records"], root
    )
    return Dataset(manifest, records)


def gt_coverage(record: ImageRecord, threshold: float = 0.6) -> float:
    """Fraction of GT objects with at least one proposal above ``threshold`` IoU."""
    if not record.gt_objects:
        return 1.0
    gt = np.stack([o.box.as_array() for o in record.gt_objects])
    m = iou_matrix(gt, record.proposals.array)
    return float((m.max(axis=1) >= threshold).mean())
