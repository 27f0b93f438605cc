"""Box and tracklet geometry: IoU, GIoU, temporal intersection and volume IoU.

Boxes are ``(x1, y1, x2, y2)`` in continuous pixel coordinates. Degenerate
(zero-area) boxes are legal everywhere and never raise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

ROI_FEATURE_DIM = 2048


class GeometryError(ValueError):
    pass


class BBox(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def area(self) -> float:
        return max(self.x2 - self.x1, 0.0) * max(self.y2 - self.y1, 0.0)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    @property
    def size(self) -> tuple[float, float]:
        return self.x2 - self.x1, self.y2 - self.y1


def check_box(box, where: str = "box") -> None:
    x1, y1, x2, y2 = box
    if not (np.isfinite(x1) and np.isfinite(y1) and np.isfinite(x2) and np.isfinite(y2)):
        raise GeometryError(f"{where}: non-finite coordinate")
    if x2 < x1:
        raise GeometryError(f"{where}: x2 < x1 ({x2} < {x1})")
    if y2 < y1:
        raise GeometryError(f"{where}: y2 < y1 ({y2} < {y1})")


def _area(b) -> float:
    return max(b[2] - b[0], 0.0) * max(b[3] - b[1], 0.0)


def _inter(a, b) -> float:
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    if w <= 0.0 or h <= 0.0:
        return 0.0
    return w * h


def iou(a, b) -> float:
    """Intersection over union; 0 when the union is empty."""
    inter = _inter(a, b)
    union = _area(a) + _area(b) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def giou(a, b) -> float:
    """Generalized IoU: ``IoU - (C - U) / C`` with C the enclosing-box area.

    Returns 0 when the enclosing box is empty (both boxes collapse to a point).
    """
    inter = _inter(a, b)
    union = _area(a) + _area(b) - inter
    enclose = (max(a[2], b[2]) - min(a[0], b[0])) * (max(a[3], b[3]) - min(a[1], b[1]))
    if enclose <= 0.0:
        return 0.0
    iou_ = inter / union if union > 0.0 else 0.0
    return iou_ - (enclose - union) / enclose


@dataclass
class Tracklet:
    """A box sequence over consecutive frames of one video.

    ``roi_feature`` is the temporally averaged 2048-d RoI feature; it may be
    ``None`` for purely geometric use. ``vlm_embedding`` is only present when
    a pretrained visual embedding was exported for training.
    """

    id: str
    video: str
    start_frame: int
    boxes: np.ndarray
    roi_feature: Optional[np.ndarray] = field(default=None, repr=False)
    vlm_embedding: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if len(self.boxes) == 0:
            raise GeometryError(f"tracklet {self.id}: needs at least one box")
        bad = (self.boxes[:, 2] < self.boxes[:, 0]) | (self.boxes[:, 3] < self.boxes[:, 1])
        if bad.any():
            k = int(np.argmax(bad))
            raise GeometryError(f"tracklet {self.id}: invalid box at frame {self.start_frame + k}")
        if self.roi_feature is not None:
            self.roi_feature = np.asarray(self.roi_feature)
            if self.roi_feature.shape != (ROI_FEATURE_DIM,):
                raise GeometryError(
                    f"tracklet {self.id}: roi_feature must be {ROI_FEATURE_DIM}-d, "
                    f"got shape {self.roi_feature.shape}"
                )

    @property
    def end_frame(self) -> int:
        return self.start_frame + len(self.boxes) - 1

    def __len__(self) -> int:
        return len(self.boxes)

    def box_at(self, frame: int) -> np.ndarray:
        if not self.start_frame <= frame <= self.end_frame:
            raise GeometryError(f"tracklet {self.id} has no box at frame {frame}")
        return self.boxes[frame - self.start_frame]

    def clip(self, start: int, end: int) -> Optional["Tracklet"]:
        """Restrict to frames ``[start, end]`` (inclusive); None if disjoint."""
        s = max(start, self.start_frame)
        e = min(end, self.end_frame)
        if s > e:
            return None
        return Tracklet(
            self.id, self.video, s,
            self.boxes[s - self.start_frame: e - self.start_frame + 1],
            self.roi_feature, self.vlm_embedding,
        )


def _same_video(ti: Tracklet, tj: Tracklet) -> None:
    if ti.video != tj.video:
        raise GeometryError(f"tracklets from different videos: {ti.video!r} vs {tj.video!r}")


def temporal_intersection(ti: Tracklet, tj: Tracklet) -> Optional[tuple[int, int]]:
    """Inclusive frame span shared by both tracklets, or None."""
    _same_video(ti, tj)
    fs = max(ti.start_frame, tj.start_frame)
    fe = min(ti.end_frame, tj.end_frame)
    if fs > fe:
        return None
    return fs, fe


def _areas(boxes: np.ndarray) -> np.ndarray:
    return np.clip(boxes[:, 2] - boxes[:, 0], 0, None) * np.clip(boxes[:, 3] - boxes[:, 1], 0, None)


def _inters(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w = np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0])
    h = np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1])
    return np.clip(w, 0, None) * np.clip(h, 0, None)


def viou(ti: Tracklet, tj: Tracklet) -> float:
    """Volume IoU over the union of both frame spans.

    Frames covered by only one tracklet contribute that box's area to the
    union and nothing to the intersection.
    """
    _same_video(ti, tj)
    union = _areas(ti.boxes).sum() + _areas(tj.boxes).sum()
    span = temporal_intersection(ti, tj)
    inter = 0.0
    if span is not None:
        fs, fe = span
        a = ti.boxes[fs - ti.start_frame: fe - ti.start_frame + 1]
        b = tj.boxes[fs - tj.start_frame: fe - tj.start_frame + 1]
        inter = float(_inters(a, b).sum())
    union -= inter
    if union <= 0.0:
        return 0.0
    return float(inter / union)


def overlap_viou(ti: Tracklet, tj: Tracklet) -> float:
    """Volume IoU restricted to the shared frames (0 if none)."""
    span = temporal_intersection(ti, tj)
    if span is None:
        return 0.0
    fs, fe = span
    return viou(ti.clip(fs, fe), tj.clip(fs, fe))
