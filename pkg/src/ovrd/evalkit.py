"""Relation detection metrics: triplet mAP, Recall@K and tagging Precision@K.

Predictions use the line-delimited interchange written by the pipeline. GT is
filtered by split (``novel`` keeps relations whose predicate is novel, ``all``
keeps everything); predictions are never filtered. Matching is greedy per
video in descending score order; each prediction takes the unmatched GT with
the same class triple whose weaker subject/object vIoU is highest, provided
both reach the threshold. Equal scores are ordered by prediction content, so
results do not depend on input order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import Tracklet, viou
from .pipeline import (detect_segment_relations, greedy_associate, instance_record,
                       record_tracklet, split_segments)

MODES = ("SGDet", "SGCls", "PredCls")
SPLITS = ("novel", "all")
METRIC_KEYS = ("mAP", "R@50", "R@100", "P@1", "P@5", "P@10")


class EvalError(ValueError):
    pass


@dataclass
class EvalConfig:
    mode: str = "SGDet"
    split: str = "novel"
    viou_threshold: float = 0.5
    recall_k: tuple = (50, 100)
    tag_k: tuple = (1, 5, 10)

    def __post_init__(self):
        if self.mode not in MODES:
            raise EvalError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.split not in SPLITS:
            raise EvalError(f"split must be one of {SPLITS}, got {self.split!r}")
        if not 0 < self.viou_threshold < 1:
            raise EvalError("viou_threshold must lie in (0, 1)")


@dataclass
class Prediction:
    video: str
    triplet: tuple
    score: float
    sub: Tracklet
    obj: Tracklet

    def sort_key(self) -> tuple:
        return (-self.score, self.video, self.triplet, self.sub.start_frame, self.obj.start_frame,
                self.sub.boxes.tobytes(), self.obj.boxes.tobytes())


@dataclass
class MatchResult:
    pred_match: list  # per prediction (in ranked order): GT index or None
    gt_covered: np.ndarray  # per GT: bool

    def __post_init__(self):
        hits = [m for m in self.pred_match if m is not None]
        assert len(hits) == len(set(hits)), "a GT instance was matched twice"


def match_triplet(pred: Prediction, gt_triplet: tuple, gt_sub: Tracklet, gt_obj: Tracklet,
                  viou_threshold: float = 0.5) -> bool:
    if pred.triplet != tuple(gt_triplet):
        return False
    return viou(pred.sub, gt_sub) >= viou_threshold and viou(pred.obj, gt_obj) >= viou_threshold


def parse_predictions(records, gt, objects=None, predicates=None, mode: str = "SGDet") -> list:
    """Turn interchange records into :class:`Prediction` objects.

    In SGCls and PredCls the records' ``sub_id``/``obj_id`` name GT tracklets
    whose boxes replace the predicted ones.
    """
    out = []
    for n, r in enumerate(records):
        try:
            video = str(r["video"])
            triplet = (str(r["s_cls"]), str(r["predicate"]), str(r["o_cls"]))
            score = float(r["score"])
            sub_boxes, obj_boxes = r["sub_boxes"], r["obj_boxes"]
        except (KeyError, TypeError, ValueError) as exc:
            raise EvalError(f"prediction {n}: malformed record ({exc})") from None
        if not math.isfinite(score):
            raise EvalError(f"prediction {n}: non-finite score")
        if objects is not None:
            for cls in (triplet[0], triplet[2]):
                if cls not in objects:
                    raise EvalError(f"prediction {n}: unknown object category {cls!r}")
        if predicates is not None and triplet[1] not in predicates:
            raise EvalError(f"prediction {n}: unknown predicate {triplet[1]!r}")
        sub = obj = None
        if mode != "SGDet":
            sub = gt.tracklets.get((video, str(r.get("sub_id"))))
            obj = gt.tracklets.get((video, str(r.get("obj_id"))))
        try:
            sub = sub or record_tracklet(sub_boxes, video, str(r.get("sub_id", "sub")))
            obj = obj or record_tracklet(obj_boxes, video, str(r.get("obj_id", "obj")))
        except Exception as exc:
            raise EvalError(f"prediction {n}: {exc}") from None
        out.append(Prediction(video, triplet, score, sub, obj))
    return out


def filter_gt(gt, split: str, novel_predicates) -> list:
    """GT relation instances kept by ``split``, in their original order."""
    novel = set(novel_predicates)
    return [g for g in gt.instances if split == "all" or g.predicate in novel]


def rank(preds: list) -> list:
    return sorted(preds, key=Prediction.sort_key)


def greedy_match(preds: list, gts: list, gt_tracks: list, viou_threshold: float) -> MatchResult:
    """Match ranked predictions of one video to its GT instances."""
    covered = np.zeros(len(gts), dtype=bool)
    result = []
    cache: dict = {}
    for p in preds:
        best, best_ov = None, -1.0
        for gi, g in enumerate(gts):
            if covered[gi] or g.triplet != p.triplet:
                continue
            key = (id(p), gi)
            if key not in cache:
                gs, go = gt_tracks[gi]
                cache[key] = min(viou(p.sub, gs), viou(p.obj, go))
            ov = cache[key]
            if ov >= viou_threshold and ov > best_ov:
                best, best_ov = gi, ov
        if best is not None:
            covered[best] = True
        result.append(best)
    return MatchResult(result, covered)


def _ap(hits: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP from ranked TP flags."""
    if n_gt == 0:
        return float("nan")
    if len(hits) == 0:
        return 0.0
    tp = np.cumsum(hits)
    prec = tp / np.arange(1, len(hits) + 1)
    interp = np.maximum.accumulate(prec[::-1])[::-1]
    return float(interp[hits.astype(bool)].sum() / n_gt)


def evaluate(records, gt, vocab_objects, vocab_predicates, config: Optional[EvalConfig] = None) -> dict:
    """Metric report for interchange ``records`` against ``gt``.

    ``vocab_objects``/``vocab_predicates`` are :class:`Vocabulary` objects; the
    predicate vocabulary also defines which GT counts as novel.
    """
    cfg = config or EvalConfig()
    preds = parse_predictions(records, gt, vocab_objects, vocab_predicates, cfg.mode)
    gts = filter_gt(gt, cfg.split, vocab_predicates.novel)
    by_video_gt: dict = {}
    for g in gts:
        by_video_gt.setdefault(g.video, []).append(g)
    by_video_pred: dict = {}
    for p in preds:
        by_video_pred.setdefault(p.video, []).append(p)

    flags = []  # (sort key, triplet, tp)
    matched_at = {k: 0 for k in cfg.recall_k}
    for video in sorted(set(by_video_gt) | set(by_video_pred)):
        vp = rank(by_video_pred.get(video, []))
        vg = by_video_gt.get(video, [])
        tracks = [(gt.tracklet(video, g.sub_id), gt.tracklet(video, g.obj_id)) for g in vg]
        m = greedy_match(vp, vg, tracks, cfg.viou_threshold)
        for r, (p, gi) in enumerate(zip(vp, m.pred_match)):
            flags.append((p.sort_key(), p.triplet, gi is not None))
            for k in cfg.recall_k:
                if gi is not None and r < k:
                    matched_at[k] += 1

    n_gt = len(gts)
    gt_count: dict = {}
    for g in gts:
        gt_count[g.triplet] = gt_count.get(g.triplet, 0) + 1
    flags.sort(key=lambda f: f[0])
    per_cat: dict = {}
    for _, trip, tp in flags:
        if trip in gt_count:
            per_cat.setdefault(trip, []).append(tp)
    aps = [_ap(np.array(per_cat.get(t, []), dtype=float), c) for t, c in sorted(gt_count.items())]

    report = {"mAP": float(np.mean(aps)) if aps else 0.0}
    for k in cfg.recall_k:
        report[f"R@{k}"] = matched_at[k] / n_gt if n_gt else 0.0
    report.update(tagging_precision(preds, by_video_gt, cfg.tag_k))
    report.update({"mode": cfg.mode, "split": cfg.split, "n_gt": n_gt, "n_pred": len(preds)})
    return report


def tagging_precision(preds: list, by_video_gt: dict, ks=(1, 5, 10)) -> dict:
    """Class-triple precision at K, averaged over videos that have GT."""
    sums = {k: 0.0 for k in ks}
    per_video: dict = {}
    for p in rank(preds):
        per_video.setdefault(p.video, []).append(p.triplet)
    for video, gts in by_video_gt.items():
        truth = {g.triplet for g in gts}
        uniq = list(dict.fromkeys(per_video.get(video, [])))
        for k in ks:
            top = uniq[:k]
            if top:
                sums[k] += sum(t in truth for t in top) / len(top)
    n = len(by_video_gt)
    return {f"P@{k}": sums[k] / n if n else 0.0 for k in ks}


def grouped_recall(records, gt, vocab_objects, vocab_predicates, config: Optional[EvalConfig] = None,
                   k: int = 100) -> dict:
    """Recall@k per predicate prefix (text before the first underscore)."""
    cfg = config or EvalConfig()
    preds = parse_predictions(records, gt, vocab_objects, vocab_predicates, cfg.mode)
    gts = filter_gt(gt, cfg.split, vocab_predicates.novel)
    groups: dict = {}
    by_video_gt: dict = {}
    for g in gts:
        by_video_gt.setdefault(g.video, []).append(g)
    for video, vg in by_video_gt.items():
        vp = rank([p for p in preds if p.video == video])
        tracks = [(gt.tracklet(video, g.sub_id), gt.tracklet(video, g.obj_id)) for g in vg]
        m = greedy_match(vp, vg, tracks, cfg.viou_threshold)
        hit = np.zeros(len(vg), dtype=bool)
        for r, gi in enumerate(m.pred_match):
            if gi is not None and r < k:
                hit[gi] = True
        for g, h in zip(vg, hit):
            tot = groups.setdefault(g.predicate.split("_")[0], [0, 0])
            tot[0] += int(h)
            tot[1] += 1
    return {name: hits / n for name, (hits, n) in sorted(groups.items())}


# -- producing predictions per evaluation regime -------------------------------

@dataclass
class PipelineConfig:
    seg_len: int = 30
    stride: int = 15
    top_k: int = 5
    merge_viou: float = 0.5
    gamma: float = -0.3


def run_mode_inputs(mode: str, dataset, models, split: str = "test",
                    cfg: Optional[PipelineConfig] = None) -> list:
    """Interchange records for one regime.

    ``models`` is ``(tracklet classifier, relation head, object text table)``.
    SGDet runs on detections; SGCls on GT tracklets with predicted labels;
    PredCls on GT tracklets with GT labels.
    """
    from .trackletcls import object_scores

    if mode not in MODES:
        raise EvalError(f"mode must be one of {MODES}, got {mode!r}")
    cfg = cfg or PipelineConfig()
    clf, head, table = models
    object_names = dataset.objects.all
    head.set_vocabulary(dataset.predicates.all)
    records = []
    for v in dataset.split(split):
        if mode == "SGDet":
            tracks = v.detections
        else:
            tracks = v.gt_tracklets
            if not tracks:
                raise EvalError(f"{mode} needs ground-truth tracklets; video {v.id} has none")
        if not tracks:
            continue
        if mode == "PredCls":
            labels = {}
            for t in tracks:
                cls = v.gt.classes.get((v.id, t.id))
                if cls is None:
                    raise EvalError(f"PredCls needs a GT label for tracklet {t.id} in {v.id}")
                labels[t.id] = (cls, 1.0)
        else:
            if clf is None:
                raise EvalError("tracklet classifier is not trained")
            k, p = object_scores(clf, np.stack([t.roi_feature for t in tracks]), table)
            labels = {t.id: (object_names[int(i)], float(s)) for t, i, s in zip(tracks, k, p)}
        rels = []
        for seg in split_segments(tracks, v.n_frames, cfg.seg_len, cfg.stride, v.id):
            rels.extend(detect_segment_relations(seg, labels, head, cfg.top_k, cfg.gamma, cfg.seg_len))
        records.extend(instance_record(inst) for inst in greedy_associate(rels, cfg.merge_viou))
    return records


# -- reports -------------------------------------------------------------------

def format_report(report: dict) -> str:
    keys = [k for k in METRIC_KEYS if k in report] + [k for k in report if k not in METRIC_KEYS]
    width = max(len(k) for k in keys)
    lines = []
    for k in keys:
        v = report[k]
        lines.append(f"{k:<{width}}  {v:.4f}" if isinstance(v, float) else f"{k:<{width}}  {v}")
    return "\n".join(lines) + "\n"


def write_report(report: dict, out_dir, stem: str = "report") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    txt, js = out_dir / f"{stem}.txt", out_dir / f"{stem}.json"
    txt.write_text(format_report(report))
    js.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return txt, js
