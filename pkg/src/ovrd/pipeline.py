"""Segment-based relation detection and greedy association into video-level
relation instances.

Association rule: relations are visited by descending combined score (ties:
segment index, subject id, object id, predicate). A relation joins the first
open instance with the same ``(s_cls, predicate, o_cls)`` whose subject and
object tracklets each overlap or abut the relation's, with volume IoU over the
shared frames >= ``merge_viou`` (for abutting spans without shared frames, the
IoU of the two boundary boxes is used). Otherwise it opens a new instance.
After the pass, instances that satisfy the same rule against one another are
merged until none do. Instance boxes are the per-frame mean of member boxes;
confidence is the mean member score.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import Tracklet, iou, overlap_viou, temporal_intersection
from .motion import DEFAULT_GAMMA, DEFAULT_SEGMENT_LENGTH, motion_pattern, relative_position_feature

MIN_PAIR_OVERLAP = 2


@dataclass
class Segment:
    video: str
    index: int
    start: int
    end: int  # exclusive
    tracklets: list


def segment_windows(n_frames: int, seg_len: int = DEFAULT_SEGMENT_LENGTH, stride: int = 15) -> list:
    """Full windows ``[k*stride, k*stride + seg_len)``.

    A video shorter than ``seg_len`` gets one window over all of it. If the
    grid leaves a tail uncovered, one extra window ending at the last frame is
    appended.
    """
    if seg_len <= 0 or not 0 < stride <= seg_len:
        raise ValueError("need seg_len > 0 and 0 < stride <= seg_len")
    if n_frames <= seg_len:
        return [(0, max(n_frames, 0))]
    wins = [(s, s + seg_len) for s in range(0, n_frames - seg_len + 1, stride)]
    if wins[-1][1] < n_frames:
        wins.append((n_frames - seg_len, n_frames))
    return wins


def split_segments(tracklets, n_frames: int, seg_len: int = DEFAULT_SEGMENT_LENGTH,
                   stride: int = 15, video: Optional[str] = None) -> list:
    """Clip a video's tracklets to each window; clips shorter than 2 frames are dropped."""
    tracklets = list(tracklets)
    if video is None:
        video = tracklets[0].video if tracklets else ""
    out = []
    for k, (s, e) in enumerate(segment_windows(n_frames, seg_len, stride)):
        clips = []
        for t in tracklets:
            c = t.clip(s, e - 1)
            if c is not None and len(c) >= 2:
                clips.append(c)
        out.append(Segment(video, k, s, e, clips))
    return out


def enumerate_pairs(segment: Segment, min_overlap: int = MIN_PAIR_OVERLAP) -> list:
    """Ordered pairs ``(i, j)``, ``i != j``, sharing at least ``min_overlap`` frames."""
    pairs = []
    for ti in segment.tracklets:
        for tj in segment.tracklets:
            if ti is tj:
                continue
            span = temporal_intersection(ti, tj)
            if span is not None and span[1] - span[0] + 1 >= min_overlap:
                pairs.append((ti, tj))
    return pairs


@dataclass
class PairCandidate:
    """One ordered tracklet pair inside a segment with its geometric cues."""

    video: str
    segment: int
    sub: Tracklet
    obj: Tracklet
    pos_feature: np.ndarray  # 12-d
    pattern_group: int

    @property
    def key(self) -> tuple:
        return (self.video, self.segment, self.sub.id, self.obj.id)


def pair_candidates(segment: Segment, gamma: float = DEFAULT_GAMMA,
                    seg_len: int = DEFAULT_SEGMENT_LENGTH) -> list:
    return [PairCandidate(segment.video, segment.index, ti, tj,
                          relative_position_feature(ti, tj, seg_len),
                          motion_pattern(ti, tj, gamma).index)
            for ti, tj in enumerate_pairs(segment)]


# -- detection ----------------------------------------------------------------

@dataclass
class SegmentRelation:
    video: str
    segment: int
    sub: Tracklet
    obj: Tracklet
    s_cls: str
    s_score: float
    predicate: str
    p_score: float
    o_cls: str
    o_score: float

    @property
    def score(self) -> float:
        return self.s_score * self.p_score * self.o_score

    @property
    def triplet(self) -> tuple:
        return self.s_cls, self.predicate, self.o_cls

    def sort_key(self) -> tuple:
        return (-self.score, self.segment, self.sub.id, self.obj.id, self.predicate)


def detect_segment_relations(segment: Segment, object_labels: dict, head, top_k: int = 5,
                             gamma: float = DEFAULT_GAMMA,
                             seg_len: int = DEFAULT_SEGMENT_LENGTH) -> list:
    """Score every eligible pair of a segment and keep its ``top_k`` predicates.

    ``object_labels`` maps tracklet id -> ``(class, score)``; ``head`` exposes
    ``predicates`` and ``predict(candidates) -> (n, len(predicates))``.
    """
    if head is None:
        raise ValueError("relation head is not trained")
    cands = pair_candidates(segment, gamma, seg_len)
    if not cands:
        return []
    probs = head.predict(cands)
    names = head.predicates
    out = []
    for c, row in zip(cands, probs):
        s_cls, s_score = object_labels[c.sub.id]
        o_cls, o_score = object_labels[c.obj.id]
        order = np.argsort(-row, kind="stable")[:top_k]
        for k in order:
            out.append(SegmentRelation(c.video, c.segment, c.sub, c.obj, s_cls, float(s_score),
                                       names[k], float(row[k]), o_cls, float(o_score)))
    out.sort(key=SegmentRelation.sort_key)
    return out


# -- association --------------------------------------------------------------

@dataclass
class RelationInstance:
    video: str
    triplet: tuple
    sub: Tracklet
    obj: Tracklet
    member_scores: list = field(default_factory=list)
    members_sub: list = field(default_factory=list, repr=False)
    members_obj: list = field(default_factory=list, repr=False)

    @property
    def confidence(self) -> float:
        return float(np.mean(self.member_scores))

    def sort_key(self) -> tuple:
        return (-self.confidence, self.sub.start_frame, self.sub.id, self.obj.id, self.triplet)


def _spans_touch(a: Tracklet, b: Tracklet) -> bool:
    return a.start_frame <= b.end_frame + 1 and b.start_frame <= a.end_frame + 1


def _track_similarity(a: Tracklet, b: Tracklet) -> float:
    if temporal_intersection(a, b) is not None:
        return overlap_viou(a, b)
    if a.end_frame + 1 == b.start_frame:
        return iou(a.boxes[-1], b.boxes[0])
    return iou(b.boxes[-1], a.boxes[0])


def _compatible(inst: RelationInstance, video: str, triplet: tuple, sub: Tracklet, obj: Tracklet,
                merge_viou: float) -> bool:
    if inst.video != video or inst.triplet != triplet:
        return False
    if not (_spans_touch(inst.sub, sub) and _spans_touch(inst.obj, obj)):
        return False
    return (_track_similarity(inst.sub, sub) >= merge_viou
            and _track_similarity(inst.obj, obj) >= merge_viou)


def _average(tracks: list, template: Tracklet) -> Tracklet:
    start = min(t.start_frame for t in tracks)
    end = max(t.end_frame for t in tracks)
    acc = np.zeros((end - start + 1, 4))
    cnt = np.zeros(end - start + 1)
    for t in tracks:
        acc[t.start_frame - start: t.end_frame - start + 1] += t.boxes
        cnt[t.start_frame - start: t.end_frame - start + 1] += 1
    if (cnt == 0).any():
        raise ValueError("merged tracklet has a temporal gap")
    return Tracklet(template.id, template.video, start, acc / cnt[:, None],
                    template.roi_feature, template.vlm_embedding)


def _absorb(dst: RelationInstance, src: RelationInstance) -> None:
    dst.member_scores.extend(src.member_scores)
    dst.members_sub.extend(src.members_sub)
    dst.members_obj.extend(src.members_obj)
    dst.sub = _average(dst.members_sub, dst.sub)
    dst.obj = _average(dst.members_obj, dst.obj)


def _singleton(rel: SegmentRelation) -> RelationInstance:
    return RelationInstance(rel.video, rel.triplet, rel.sub, rel.obj, [rel.score], [rel.sub], [rel.obj])


def greedy_associate(relations, merge_viou: float = 0.5) -> list:
    """Merge segment relations into video-level instances (see module docs)."""
    rels = sorted(relations, key=SegmentRelation.sort_key)
    instances: list = []
    for r in rels:
        for inst in instances:
            if _compatible(inst, r.video, r.triplet, r.sub, r.obj, merge_viou):
                _absorb(inst, _singleton(r))
                break
        else:
            instances.append(_singleton(r))
    changed = True
    while changed:
        changed = False
        for i in range(len(instances)):
            for j in range(i + 1, len(instances)):
                b = instances[j]
                if _compatible(instances[i], b.video, b.triplet, b.sub, b.obj, merge_viou):
                    _absorb(instances[i], b)
                    del instances[j]
                    changed = True
                    break
            if changed:
                break
    instances.sort(key=RelationInstance.sort_key)
    return instances


def instance_as_relation(inst: RelationInstance) -> SegmentRelation:
    """View an instance as a single relation scored by its confidence."""
    s_cls, pred, o_cls = inst.triplet
    return SegmentRelation(inst.video, -1, inst.sub, inst.obj, s_cls, 1.0, pred, inst.confidence, o_cls, 1.0)


# -- prediction interchange ---------------------------------------------------

def _boxes_record(t: Tracklet) -> list:
    return [[t.start_frame + k] + [float(x) for x in b] for k, b in enumerate(t.boxes)]


def instance_record(inst: RelationInstance) -> dict:
    s_cls, pred, o_cls = inst.triplet
    return {"video": inst.video, "s_cls": s_cls, "predicate": pred, "o_cls": o_cls,
            "score": inst.confidence, "sub_boxes": _boxes_record(inst.sub),
            "obj_boxes": _boxes_record(inst.obj), "sub_id": inst.sub.id, "obj_id": inst.obj.id}


def write_predictions(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_predictions(path) -> list:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path} line {lineno}: invalid JSON ({exc.msg})") from None
    return out


def record_tracklet(boxes_rec, video: str, tid: str = "pred") -> Tracklet:
    """Rebuild a tracklet from ``[[frame, x1, y1, x2, y2], ...]``."""
    if not boxes_rec:
        raise ValueError("empty box list in prediction")
    frames = [int(r[0]) for r in boxes_rec]
    if frames != list(range(frames[0], frames[0] + len(frames))):
        raise ValueError("prediction boxes must cover consecutive frames")
    return Tracklet(tid, video, frames[0], np.array([r[1:5] for r in boxes_rec], dtype=np.float64))
