import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ovrd.evalkit import (EvalConfig, EvalError, PipelineConfig, Prediction, evaluate, format_report,
                          grouped_recall, match_triplet, run_mode_inputs, write_report)
from ovrd.geometry import Tracklet
from ovrd.tensorio import GroundTruth, RelationGT, Vocabulary

from conftest import make_tracklet
from oracles import ap_all_points, enumerate_greedy, frame_viou

OBJECTS = Vocabulary(["dog", "cat"], ["fox"])
PREDICATES = Vocabulary(["chase", "near"], ["leap"])


def boxes_record(t):
    return [[t.start_frame + k] + [float(x) for x in b] for k, b in enumerate(t.boxes)]


def record(video, triplet, score, sub, obj):
    s, p, o = triplet
    return {"video": video, "s_cls": s, "predicate": p, "o_cls": o, "score": score,
            "sub_boxes": boxes_record(sub), "obj_boxes": boxes_record(obj),
            "sub_id": sub.id, "obj_id": obj.id}


def simple_gt():
    gt = GroundTruth()
    s = make_tracklet([[0, 0, 10, 10]] * 5, tid="s", video="v")
    o = make_tracklet([[20, 0, 30, 10]] * 5, tid="o", video="v")
    gt.tracklets.update({("v", "s"): s, ("v", "o"): o})
    gt.classes.update({("v", "s"): "dog", ("v", "o"): "cat"})
    gt.add(RelationGT("v", "s", "o", "chase", "dog", "cat"))
    return gt, s, o


def random_track(rng, video, tid, n_frames=6):
    start = int(rng.integers(0, 3))
    xy = rng.uniform(0, 30, 2)
    wh = rng.uniform(8, 20, 2)
    drift = np.cumsum(rng.normal(0, 1.5, (n_frames - start, 2)), axis=0)
    b = np.hstack([xy + drift, xy + wh + drift])
    return Tracklet(tid, video, start, b)


def jitter(rng, t, scale, tid):
    shift = rng.normal(0, scale, (len(t.boxes), 2))
    return Tracklet(tid, t.video, t.start_frame, t.boxes + np.hstack([shift, shift]))


def micro_case(seed):
    """Random GT (<= 5 per video) and predictions (<= 8 per video) over 1-3 videos."""
    rng = np.random.default_rng(seed)
    objects = OBJECTS.all
    preds = PREDICATES.all
    gt, records = GroundTruth(), []
    for vi in range(int(rng.integers(1, 4))):
        video = f"v{vi}"
        tracks = []
        for gi in range(int(rng.integers(1, 6))):
            s = random_track(rng, video, f"s{gi}")
            o = random_track(rng, video, f"o{gi}")
            gt.tracklets.update({(video, s.id): s, (video, o.id): o})
            trip = (objects[int(rng.integers(2))], preds[int(rng.integers(3))], objects[int(rng.integers(2))])
            gt.classes.update({(video, s.id): trip[0], (video, o.id): trip[2]})
            gt.add(RelationGT(video, s.id, o.id, trip[1], trip[0], trip[2]))
            tracks.append((trip, s, o))
        for pi in range(int(rng.integers(0, 9))):
            trip, s, o = tracks[int(rng.integers(len(tracks)))]
            if rng.random() < 0.3:
                trip = (trip[0], preds[int(rng.integers(3))], trip[2])
            scale = rng.choice([0.5, 2.0, 6.0])
            records.append(record(video, trip, float(rng.uniform()), jitter(rng, s, scale, f"ps{pi}"),
                                  jitter(rng, o, scale, f"po{pi}")))
    return gt, records


def oracle_report(gt, records, split, threshold=0.5, ks=(50, 100)):
    """Straight re-derivation of the metrics from the definitions."""
    novel = set(PREDICATES.novel)
    kept = [g for g in gt.instances if split == "all" or g.predicate in novel]
    per_cat, hits_at = {}, {k: 0 for k in ks}
    ranked_all = []
    videos = sorted({g.video for g in kept} | {r["video"] for r in records})
    for video in videos:
        vg = [g for g in kept if g.video == video]
        vr = sorted([r for r in records if r["video"] == video], key=lambda r: -r["score"])
        tracks = [Tracklet("x", video, int(b[0][0]), np.array([x[1:] for x in b]))
                  for r in vr for b in (r["sub_boxes"], r["obj_boxes"])]
        overlap = []
        for i, r in enumerate(vr):
            row = []
            for g in vg:
                same = (r["s_cls"], r["predicate"], r["o_cls"]) == g.triplet
                row.append(min(frame_viou(tracks[2 * i], gt.tracklet(video, g.sub_id)),
                               frame_viou(tracks[2 * i + 1], gt.tracklet(video, g.obj_id))) if same else None)
            overlap.append(row)
        match = enumerate_greedy(overlap, threshold) if vg else [None] * len(vr)
        for rank, (r, m) in enumerate(zip(vr, match)):
            ranked_all.append((r["score"], (r["s_cls"], r["predicate"], r["o_cls"]), m is not None))
            for k in ks:
                hits_at[k] += int(m is not None and rank < k)
    ranked_all.sort(key=lambda x: -x[0])
    counts = {}
    for g in kept:
        counts[g.triplet] = counts.get(g.triplet, 0) + 1
    aps = []
    for trip, n in sorted(counts.items()):
        flags = [h for _, t, h in ranked_all if t == trip]
        aps.append(ap_all_points(np.array(flags, dtype=int), n))
    out = {"mAP": float(np.mean(aps)) if aps else 0.0}
    for k in ks:
        out[f"R@{k}"] = hits_at[k] / len(kept) if kept else 0.0
    return out


class TestMatchTriplet:
    def setup_method(self):
        _, self.s, self.o = simple_gt()

    def test_exact_copy(self):
        p = Prediction("v", ("dog", "chase", "cat"), 1.0, self.s, self.o)
        assert match_triplet(p, ("dog", "chase", "cat"), self.s, self.o)

    def test_low_subject_overlap(self):
        sub = make_tracklet([[0, 0, 10, 4]] * 5, tid="x", video="v")  # vIoU 0.4
        p = Prediction("v", ("dog", "chase", "cat"), 1.0, sub, self.o)
        assert not match_triplet(p, ("dog", "chase", "cat"), self.s, self.o, 0.5)
        assert match_triplet(p, ("dog", "chase", "cat"), self.s, self.o, 0.4)

    def test_wrong_predicate(self):
        p = Prediction("v", ("dog", "near", "cat"), 1.0, self.s, self.o)
        assert not match_triplet(p, ("dog", "chase", "cat"), self.s, self.o)


class TestEvaluate:
    def test_single_exact(self):
        gt, s, o = simple_gt()
        rep = evaluate([record("v", ("dog", "chase", "cat"), 0.9, s, o)], gt, OBJECTS, PREDICATES,
                       EvalConfig(split="all"))
        assert (rep["mAP"], rep["R@50"], rep["R@100"], rep["P@1"]) == (1.0, 1.0, 1.0, 1.0)

    def test_duplicate_prediction_is_false_positive(self):
        gt, s, o = simple_gt()
        recs = [record("v", ("dog", "chase", "cat"), sc, s, o) for sc in (0.9, 0.8)]
        rep = evaluate(recs, gt, OBJECTS, PREDICATES, EvalConfig(split="all"))
        assert rep["mAP"] == 1.0 and rep["R@50"] == 1.0

    def test_false_positive_first_halves_ap(self):
        gt, s, o = simple_gt()
        far = make_tracklet([[300, 300, 310, 310]] * 5, tid="f", video="v")
        recs = [record("v", ("dog", "chase", "cat"), 0.9, far, o),
                record("v", ("dog", "chase", "cat"), 0.5, s, o)]
        rep = evaluate(recs, gt, OBJECTS, PREDICATES, EvalConfig(split="all"))
        assert rep["mAP"] == pytest.approx(0.5)

    def test_sgcls_uses_gt_boxes(self):
        gt, s, o = simple_gt()
        bad = make_tracklet([[300, 300, 310, 310]] * 5, tid="s", video="v")
        rec = record("v", ("dog", "chase", "cat"), 0.9, bad, o)
        assert evaluate([rec], gt, OBJECTS, PREDICATES, EvalConfig("SGDet", "all"))["R@50"] == 0.0
        assert evaluate([rec], gt, OBJECTS, PREDICATES, EvalConfig("SGCls", "all"))["R@50"] == 1.0

    def test_novel_split_filters_gt_only(self):
        gt, s, o = simple_gt()
        gt.add(RelationGT("v", "s", "o", "leap", "dog", "cat"))
        recs = [record("v", ("dog", "leap", "cat"), 0.4, s, o),
                record("v", ("dog", "chase", "cat"), 0.9, s, o)]
        rep = evaluate(recs, gt, OBJECTS, PREDICATES, EvalConfig(split="novel"))
        assert rep["n_gt"] == 1 and rep["n_pred"] == 2
        assert rep["mAP"] == 1.0 and rep["R@50"] == 1.0

    def test_no_predictions(self):
        gt, _, _ = simple_gt()
        rep = evaluate([], gt, OBJECTS, PREDICATES, EvalConfig(split="all"))
        assert all(rep[k] == 0.0 for k in ("mAP", "R@50", "R@100", "P@1", "P@5", "P@10"))

    def test_malformed(self):
        gt, s, o = simple_gt()
        good = record("v", ("dog", "chase", "cat"), 0.9, s, o)
        for bad in ({k: v for k, v in good.items() if k != "score"}, {**good, "score": float("nan")},
                    {**good, "predicate": "fly"}, {**good, "s_cls": "whale"}, {**good, "sub_boxes": []}):
            with pytest.raises(EvalError):
                evaluate([bad], gt, OBJECTS, PREDICATES, EvalConfig(split="all"))

    def test_config_checks(self):
        for kw in ({"mode": "Det"}, {"split": "base"}, {"viou_threshold": 1.0}):
            with pytest.raises(EvalError):
                EvalConfig(**kw)

    def test_tagging_ignores_boxes_and_dedups(self):
        gt, s, o = simple_gt()
        far = make_tracklet([[300, 300, 310, 310]] * 5, tid="f", video="v")
        recs = [record("v", ("dog", "chase", "cat"), 0.9, far, far),
                record("v", ("dog", "chase", "cat"), 0.8, far, far),
                record("v", ("cat", "near", "dog"), 0.7, far, far)]
        rep = evaluate(recs, gt, OBJECTS, PREDICATES, EvalConfig(split="all"))
        assert rep["R@50"] == 0.0
        assert rep["P@1"] == 1.0 and rep["P@5"] == 0.5

    def test_report_files(self, tmp_path):
        gt, s, o = simple_gt()
        rep = evaluate([record("v", ("dog", "chase", "cat"), 0.9, s, o)], gt, OBJECTS, PREDICATES,
                       EvalConfig(split="all"))
        txt, js = write_report(rep, tmp_path)
        assert txt.read_text() == format_report(rep)
        assert '"mAP": 1.0' in js.read_text()

    def test_grouped_recall(self):
        gt, s, o = simple_gt()
        gt.add(RelationGT("v", "s", "o", "near", "dog", "cat"))
        rec = [record("v", ("dog", "chase", "cat"), 0.9, s, o)]
        assert grouped_recall(rec, gt, OBJECTS, PREDICATES, EvalConfig(split="all")) == {"chase": 1.0,
                                                                                           "near": 0.0}


class TestOracle:
    @pytest.mark.parametrize("seed", range(50))
    def test_matches_exhaustive_oracle(self, seed):
        gt, records = micro_case(seed)
        for split in ("all", "novel"):
            rep = evaluate(records, gt, OBJECTS, PREDICATES, EvalConfig(split=split))
            ref = oracle_report(gt, records, split)
            for k in ("mAP", "R@50", "R@100"):
                assert rep[k] == pytest.approx(ref[k], abs=1e-12), (split, k)

    def test_crafted_three_gt_five_predictions(self):
        gt = GroundTruth()
        base = [make_tracklet([[40 * i, 0, 40 * i + 10, 10]] * 4, tid=f"t{i}", video="v") for i in range(4)]
        for t in base:
            gt.tracklets[("v", t.id)] = t
        for s, o, p in ((0, 1, "chase"), (2, 3, "chase"), (1, 2, "near")):
            gt.add(RelationGT("v", f"t{s}", f"t{o}", p, "dog", "cat"))
        far = make_tracklet([[500, 500, 510, 510]] * 4, tid="far", video="v")
        recs = [record("v", ("dog", "chase", "cat"), 0.9, base[2], base[3]),
                record("v", ("dog", "chase", "cat"), 0.8, far, base[1]),
                record("v", ("dog", "near", "cat"), 0.7, base[1], base[2]),
                record("v", ("dog", "chase", "cat"), 0.6, base[0], base[1]),
                record("v", ("dog", "chase", "cat"), 0.5, base[0], base[1])]
        rep = evaluate(recs, gt, OBJECTS, PREDICATES, EvalConfig(split="all"))
        # chase: TP, FP, TP -> (1 + 2/3) / 2 ; near: TP -> 1
        assert rep["mAP"] == pytest.approx(((1 + 2 / 3) / 2 + 1) / 2, abs=1e-12)
        assert rep["mAP"] == pytest.approx(oracle_report(gt, recs, "all")["mAP"], abs=1e-12)


class TestProperties:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_recall_and_precision_ranges(self, seed):
        gt, records = micro_case(seed)
        rep = evaluate(records, gt, OBJECTS, PREDICATES,
                       EvalConfig(split="all", recall_k=(1, 2, 50, 100)))
        assert rep["R@1"] <= rep["R@2"] <= rep["R@50"] <= rep["R@100"] <= 1.0
        assert all(0.0 <= rep[f"P@{k}"] <= 1.0 for k in (1, 5, 10))
        assert 0.0 <= rep["mAP"] <= 1.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.randoms(use_true_random=False))
    def test_permutation_invariant(self, seed, shuffler):
        gt, records = micro_case(seed)
        rng = np.random.default_rng(seed)
        for r in records:  # force ties
            r["score"] = float(rng.choice([0.3, 0.6]))
        shuffled = list(records)
        shuffler.shuffle(shuffled)
        a = evaluate(records, gt, OBJECTS, PREDICATES, EvalConfig(split="all"))
        b = evaluate(shuffled, gt, OBJECTS, PREDICATES, EvalConfig(split="all"))
        assert a == b


class PerfectHead:
    """Scores a pair's GT predicates 0.99 and everything else 0.01."""

    def __init__(self, gt):
        self.truth = {}
        for g in gt.instances:
            self.truth.setdefault((g.video, g.sub_id, g.obj_id), set()).add(g.predicate)
        self.predicates = []

    def set_vocabulary(self, names):
        self.predicates = list(names)

    def predict(self, cands):
        out = np.full((len(cands), len(self.predicates)), 0.01)
        for n, c in enumerate(cands):
            for p in self.truth.get((c.video, c.sub.id, c.obj.id), ()):
                out[n, self.predicates.index(p)] = 0.99
        return out


class TestRunModes:
    def test_predcls_perfect_scorer(self, small_dataset):
        ds, _ = small_dataset
        gt = ds.ground_truth("test")
        recs = run_mode_inputs("PredCls", ds, (None, PerfectHead(gt), None), "test", PipelineConfig(top_k=2))
        for split in ("all", "novel"):
            rep = evaluate(recs, gt, ds.objects, ds.predicates, EvalConfig("PredCls", split))
            assert rep["mAP"] == 1.0 and rep["R@100"] == 1.0

    def test_sgcls_needs_classifier(self, small_dataset):
        ds, _ = small_dataset
        with pytest.raises(EvalError):
            run_mode_inputs("SGCls", ds, (None, PerfectHead(ds.ground_truth("test")), None), "test")

    def test_bad_mode(self, small_dataset):
        ds, _ = small_dataset
        with pytest.raises(EvalError):
            run_mode_inputs("Det", ds, (None, None, None))

    def test_sgdet_without_detections(self, small_dataset):
        ds, _ = small_dataset
        gt = ds.ground_truth("test")
        videos = ds.split("test")
        saved = [v.detections for v in videos]
        try:
            for v in videos:
                v.detections = []
            recs = run_mode_inputs("SGDet", ds, (None, PerfectHead(gt), None), "test")
        finally:
            for v, d in zip(videos, saved):
                v.detections = d
        assert recs == []
        rep = evaluate(recs, gt, ds.objects, ds.predicates, EvalConfig("SGDet", "all"))
        assert rep["mAP"] == rep["R@100"] == rep["P@1"] == 0.0
