"""Box geometry, TP/FP matching and average-precision evaluation.

Everything downstream (fitness, search, reporting) is built on the three
primitives here: IoU between axis-aligned boxes, greedy one-to-one matching
of detections against ground truth, and all-point-interpolated AP at a
single IoU threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# COCO-style area buckets, in squared pixels.
SMALL_AREA = 32.0**2
MEDIUM_AREA = 96.0**2

SIZE_BUCKETS = ("all", "S", "M", "L")


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in corner form, continuous pixel coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"box coordinates must be finite and >= 0, got {self}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box: need x1 < x2 and y1 < y2, got {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def bucket(self) -> str:
        a = self.area
        if a < SMALL_AREA:
            return "S"
        if a < MEDIUM_AREA:
            return "M"
        return "L"


@dataclass(frozen=True)
class GroundTruthObject:
    box: BoundingBox
    class_id: int

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")


@dataclass(frozen=True, eq=False)
class Detection:
    """A predicted box with a full class-probability vector."""

    box: BoundingBox
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", probs)
        probs.flags.writeable = False
        if probs.ndim != 1 or probs.size < 1:
            raise ValueError("probs must be a non-empty 1-d vector")
        if np.any(probs < 0) or np.any(probs > 1):
            raise ValueError("probabilities must lie in [0, 1]")
        if abs(float(probs.sum()) - 1.0) > 1e-6:
            raise ValueError(f"probabilities must sum to 1 +- 1e-6, got {probs.sum()}")
        top = int(np.argmax(probs))
        object.__setattr__(self, "_class_id", top)
        object.__setattr__(self, "_score", float(probs[top]))

    @property
    def class_id(self) -> int:
        return self._class_id

    @property
    def score(self) -> float:
        return self._score


@dataclass(frozen=True)
class MatchResult:
    """Partition of detections into TP/FP plus the one-to-one TP assignment."""

    tp_indices: frozenset[int]
    fp_indices: frozenset[int]
    matched_gt: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.tp_indices & self.fp_indices:
            raise ValueError("tp and fp index sets must be disjoint")
        if set(self.matched_gt) != set(self.tp_indices):
            raise ValueError("matched_gt keys must be exactly the TP indices")
        gt_hits = list(self.matched_gt.values())
        if len(gt_hits) != len(set(gt_hits)):
            raise ValueError("a ground-truth object may be matched at most once")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two valid boxes; 0 when disjoint."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def coverage(det: BoundingBox, region: BoundingBox) -> float:
    """Fraction of ``det``'s area covered by ``region``.

    Equals iou(det, region) whenever the region lies inside the box, and
    reaches 1 for a region enclosing the whole box. Used to weight margins
    by how much a sampled patch touches a detection.
    """
    ix = min(det.x2, region.x2) - max(det.x1, region.x1)
    iy = min(det.y2, region.y2) - max(det.y1, region.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    return (ix * iy) / det.area


def match_detections(
    dets: list[Detection],
    gts: list[GroundTruthObject],
    iou_thresh: float = 0.5,
) -> MatchResult:
    """Greedy one-to-one matching in descending detection-confidence order.

    A detection is a TP iff it is assigned to a previously unassigned
    ground-truth object of the same class with IoU strictly greater than
    ``iou_thresh``; every other detection is an FP. Among the available
    ground truths the one with the highest IoU is taken.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"iou_thresh must be in (0, 1), got {iou_thresh}")

    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    matched_gt: dict[int, int] = {}
    taken: set[int] = set()
    for di in order:
        det = dets[di]
        best_iou = iou_thresh
        best_gi = -1
        for gi, gt in enumerate(gts):
            if gi in taken or gt.class_id != det.class_id:
                continue
            v = iou(det.box, gt.box)
            if v > best_iou:
                best_iou = v
                best_gi = gi
        if best_gi >= 0:
            matched_gt[di] = best_gi
            taken.add(best_gi)

    tp = frozenset(matched_gt)
    fp = frozenset(range(len(dets))) - tp
    return MatchResult(tp_indices=tp, fp_indices=fp, matched_gt=matched_gt)


def _in_bucket(box: BoundingBox, size_bucket: str) -> bool:
    return size_bucket == "all" or box.bucket() == size_bucket


def average_precision(
    per_image: list[tuple[list[Detection], list[GroundTruthObject]]],
    iou_thresh: float = 0.5,
    size_bucket: str = "all",
) -> float | None:
    """All-point-interpolated mAP at one IoU threshold over a corpus.

    Detections and ground truths are restricted to the requested COCO size
    bucket before matching. The returned value is the mean AP over classes
    that have ground truth in the bucket; ``None`` when the bucket holds no
    ground truth at all (absent, not zero).
    """
    if size_bucket not in SIZE_BUCKETS:
        raise ValueError(f"unknown size bucket {size_bucket!r}")

    # (confidence, image index, det index, is_tp) per class
    per_class: dict[int, list[tuple[float, int, int, bool]]] = {}
    gt_count: dict[int, int] = {}

    for img_idx, (dets, gts) in enumerate(per_image):
        kept_gts = [g for g in gts if _in_bucket(g.box, size_bucket)]
        kept_dets = [d for d in dets if _in_bucket(d.box, size_bucket)]
        for g in kept_gts:
            gt_count[g.class_id] = gt_count.get(g.class_id, 0) + 1
        match = match_detections(kept_dets, kept_gts, iou_thresh)
        for di, det in enumerate(kept_dets):
            per_class.setdefault(det.class_id, []).append(
                (det.score, img_idx, di, di in match.tp_indices)
            )

    if not gt_count:
        return None

    aps = []
    for cls, n_gt in sorted(gt_count.items()):
        entries = sorted(per_class.get(cls, []), key=lambda e: (-e[0], e[1], e[2]))
        if not entries:
            aps.append(0.0)
            continue
        tp = np.cumsum([e[3] for e in entries], dtype=np.float64)
        fp = np.cumsum([not e[3] for e in entries], dtype=np.float64)
        recall = tp / n_gt
        precision = tp / (tp + fp)
        aps.append(_all_point_ap(recall, precision))
    return float(np.mean(aps))


def _all_point_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    # Interpolate precision as the running max from the right, then sum the
    # area under the resulting step curve.
    r = np.concatenate(([0.0], recall, [recall[-1]]))
    p = np.concatenate(([0.0], precision, [0.0]))
    p = np.maximum.accumulate(p[::-1])[::-1]
    return float(np.sum((r[1:] - r[:-1]) * p[1:]))
