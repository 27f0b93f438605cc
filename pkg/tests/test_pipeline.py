import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ovrd.geometry import ROI_FEATURE_DIM, Tracklet
from ovrd.motion import N_GROUPS
from ovrd.pipeline import (Segment, SegmentRelation, detect_segment_relations, enumerate_pairs,
                           greedy_associate, instance_as_relation, instance_record, pair_candidates,
                           read_predictions, record_tracklet, segment_windows, split_segments,
                           write_predictions)
from ovrd.relcls import RelationHead, freeze_and_cache_text_embeddings
from ovrd.nnkit import MlpParams
from ovrd.textenc import PromptBank, TextEncoder, predicate_text_embedding

from conftest import make_tracklet
from test_relcls import pair_identity


def static(box, start, end, tid, video="v"):
    return make_tracklet([box] * (end - start), start=start, tid=tid, video=video)


def rel(seg, sub, obj, score, triplet=("dog", "chase", "cat"), video="v"):
    s_cls, pred, o_cls = triplet
    return SegmentRelation(video, seg, sub, obj, s_cls, 1.0, pred, score, o_cls, 1.0)


class TestWindows:
    def test_sixty_frames(self):
        assert [s for s, _ in segment_windows(60, 30, 15)] == [0, 15, 30]
        assert all(e - s == 30 for s, e in segment_windows(60, 30, 15))

    def test_short_video(self):
        assert segment_windows(20, 30, 15) == [(0, 20)]

    def test_tail_window(self):
        wins = segment_windows(70, 30, 15)
        assert wins[-1] == (40, 70)
        assert all(b[0] > a[0] for a, b in zip(wins, wins[1:]))

    @pytest.mark.parametrize("seg_len,stride", [(0, 1), (30, 0), (30, 31)])
    def test_bad_arguments(self, seg_len, stride):
        with pytest.raises(ValueError):
            segment_windows(60, seg_len, stride)

    @given(st.integers(1, 300), st.integers(1, 40), st.data())
    def test_windows_cover_video(self, n, seg_len, data):
        stride = data.draw(st.integers(1, seg_len))
        wins = segment_windows(n, seg_len, stride)
        covered = np.zeros(n, dtype=bool)
        for s, e in wins:
            assert 0 <= s < e <= n
            covered[s:e] = True
        assert covered.all()


class TestSegments:
    def test_clipping_and_absence(self):
        a = static([0, 0, 10, 10], 0, 20, "a")
        b = static([0, 0, 10, 10], 40, 60, "b")
        segs = split_segments([a, b], 60, 30, 15)
        assert [[t.id for t in s.tracklets] for s in segs] == [["a"], ["a", "b"], ["b"]]
        assert segs[1].tracklets[0].start_frame == 15 and len(segs[1].tracklets[0]) == 5

    def test_short_slices_dropped(self):
        a = static([0, 0, 10, 10], 0, 16, "a")  # one frame inside [15, 45)
        assert [t.id for t in split_segments([a], 60, 30, 15)[1].tracklets] == []

    def test_pairs(self):
        ts = [static([0, 0, 10, 10], 0, 30, tid) for tid in "abc"]
        seg = Segment("v", 0, 0, 30, ts)
        assert len(enumerate_pairs(seg)) == 6
        assert enumerate_pairs(Segment("v", 0, 0, 30, ts[:1])) == []
        a, b = static([0, 0, 10, 10], 0, 10, "a"), static([0, 0, 10, 10], 9, 20, "b")
        assert enumerate_pairs(Segment("v", 0, 0, 30, [a, b])) == []
        c = static([0, 0, 10, 10], 8, 20, "c")
        assert len(enumerate_pairs(Segment("v", 0, 0, 30, [a, c]))) == 2

    def test_candidates_carry_geometry(self):
        ts = [static([0, 0, 10, 10], 0, 30, "a"), static([100, 0, 110, 10], 0, 30, "b")]
        for c in pair_candidates(Segment("v", 0, 0, 30, ts)):
            assert c.pos_feature.shape == (12,)
            assert 0 <= c.pattern_group < N_GROUPS


class StubHead:
    def __init__(self, predicates, table):
        self.predicates = predicates
        self.table = table  # (sub id, obj id) -> probability row

    def predict(self, cands):
        return np.array([self.table[(c.sub.id, c.obj.id)] for c in cands])


class TestDetect:
    def setup_method(self):
        self.ts = [static([0, 0, 10, 10], 0, 30, "a"), static([50, 0, 60, 10], 0, 30, "b"),
                   static([100, 0, 110, 10], 0, 30, "c")]
        self.labels = {"a": ("dog", 0.9), "b": ("cat", 0.8), "c": ("ball", 0.5)}
        rng = np.random.default_rng(0)
        self.head = StubHead(["chase", "near", "hold"],
                             {(i, j): rng.uniform(0.1, 0.9, 3) for i in "abc" for j in "abc" if i != j})

    def test_top1_one_per_pair(self):
        out = detect_segment_relations(Segment("v", 0, 0, 30, self.ts), self.labels, self.head, top_k=1)
        assert len(out) == 6
        assert len({(r.sub.id, r.obj.id) for r in out}) == 6

    def test_scores_and_order(self):
        out = detect_segment_relations(Segment("v", 0, 0, 30, self.ts), self.labels, self.head, top_k=3)
        assert len(out) == 18
        for r in out:
            assert r.score == r.s_score * r.p_score * r.o_score
        assert [r.score for r in out] == sorted((r.score for r in out), reverse=True)

    def test_empty_segment(self):
        assert detect_segment_relations(Segment("v", 0, 0, 30, []), {}, self.head) == []

    def test_untrained(self):
        with pytest.raises(ValueError):
            detect_segment_relations(Segment("v", 0, 0, 30, self.ts), self.labels, None)

    def test_planted_pair_ranked_first(self):
        rng = np.random.default_rng(3)
        enc = TextEncoder()
        d = enc.d
        head = RelationHead("repro", enc, PromptBank.init(rng), MlpParams.zeros(12, 8, 2 * d),
                            ["chase", "near", "hold"])
        freeze_and_cache_text_embeddings(head)
        head.phi_p = pair_identity(d, ROI_FEATURE_DIM)
        head.set_vocabulary(["chase", "near", "hold", "leap"])
        tracks = [static([0, 0, 10, 10], 0, 30, "a"), static([40, 0, 50, 10], 0, 30, "b"),
                  static([200, 200, 210, 210], 0, 30, "c")]
        for t in tracks:
            t.roi_feature = rng.standard_normal(ROI_FEATURE_DIM)
        seg = Segment("v", 0, 0, 30, tracks)
        g = [c for c in pair_candidates(seg) if (c.sub.id, c.obj.id) == ("a", "b")][0].pattern_group
        target = predicate_text_embedding(enc, head.bank, g, enc.token("leap"))
        tracks[0].roi_feature[:d] = target[:d]
        tracks[1].roi_feature[:d] = target[d:]
        labels = {"a": ("dog", 1.0), "b": ("cat", 1.0), "c": ("ball", 1.0)}
        out = detect_segment_relations(seg, labels, head, top_k=2)
        top = out[0]
        assert (top.sub.id, top.triplet, top.obj.id) == ("a", ("dog", "leap", "cat"), "b")


class TestAssociate:
    def test_adjacent_identical_merge(self):
        r1 = rel(0, static([0, 0, 10, 10], 0, 30, "a"), static([20, 0, 30, 10], 0, 30, "b"), 0.8)
        r2 = rel(1, static([0, 0, 10, 10], 15, 45, "a"), static([20, 0, 30, 10], 15, 45, "b"), 0.6)
        (inst,) = greedy_associate([r1, r2])
        assert (inst.sub.start_frame, inst.sub.end_frame) == (0, 44)
        assert inst.confidence == pytest.approx(0.7)

    def test_disjoint_tracklets_stay_apart(self):
        r1 = rel(0, static([0, 0, 10, 10], 0, 30, "a"), static([20, 0, 30, 10], 0, 30, "b"), 0.8)
        r2 = rel(1, static([300, 0, 310, 10], 15, 45, "c"), static([320, 0, 330, 10], 15, 45, "d"), 0.6)
        assert len(greedy_associate([r1, r2])) == 2

    def test_different_predicate_stays_apart(self):
        s, o = static([0, 0, 10, 10], 0, 30, "a"), static([20, 0, 30, 10], 0, 30, "b")
        out = greedy_associate([rel(0, s, o, 0.8), rel(0, s, o, 0.5, ("dog", "near", "cat"))])
        assert len(out) == 2

    def test_three_segment_trace(self):
        """Windows 0/15/30 of a 60-frame video; the chain collapses into one instance."""
        s1, s2, s3 = 0.9, 0.6, 0.3
        rels = []
        for k, (start, score) in enumerate(((0, s1), (15, s2), (30, s3))):
            rels.append(rel(k, static([0, 0, 10, 10], start, start + 30, "a"),
                            static([20, 0, 30, 10], start, start + 30, "b"), score))
        out = greedy_associate(rels[::-1])
        assert len(out) == 1
        inst = out[0]
        assert inst.confidence == pytest.approx((s1 + s2 + s3) / 3, abs=1e-15)
        assert (inst.sub.start_frame, inst.sub.end_frame) == (0, 59)
        np.testing.assert_array_equal(inst.sub.boxes, np.tile([0, 0, 10, 10], (60, 1)))
        assert sorted(inst.member_scores) == [s3, s2, s1]

    def test_overlap_boxes_averaged(self):
        r1 = rel(0, static([0, 0, 10, 10], 0, 30, "a"), static([20, 0, 30, 10], 0, 30, "b"), 0.9)
        r2 = rel(1, static([1, 0, 11, 10], 15, 45, "a"), static([20, 0, 30, 10], 15, 45, "b"), 0.5)
        (inst,) = greedy_associate([r1, r2])
        np.testing.assert_allclose(inst.sub.boxes[0], [0, 0, 10, 10])
        np.testing.assert_allclose(inst.sub.boxes[20], [0.5, 0, 10.5, 10])
        np.testing.assert_allclose(inst.sub.boxes[40], [1, 0, 11, 10])

    def test_tie_break_is_order_free(self):
        a = [rel(k, static([100 * k, 0, 100 * k + 10, 10], 0, 30, f"s{k}"),
                 static([100 * k + 20, 0, 100 * k + 30, 10], 0, 30, f"o{k}"), 0.5) for k in range(4)]
        first = [instance_record(i) for i in greedy_associate(a)]
        assert [instance_record(i) for i in greedy_associate(a[::-1])] == first


def random_relations(seed):
    """A few relation chains over a 75-frame video with jittered boxes and two triplets."""
    rng = np.random.default_rng(seed)
    wins = segment_windows(75, 30, 15)
    rels = []
    for chain in range(int(rng.integers(1, 4))):
        base_s = np.array([rng.uniform(0, 60), rng.uniform(0, 60)])
        base_o = base_s + rng.uniform(-30, 30, 2)
        trip = [("dog", "chase", "cat"), ("dog", "near", "cat")][int(rng.integers(2))]
        for k, (s, e) in enumerate(wins):
            if rng.random() < 0.3:
                continue
            jit = rng.uniform(0, 8)
            boxes = []
            for base in (base_s, base_o):
                xy = base + jit * rng.standard_normal(2)
                boxes.append(np.tile(np.r_[xy, xy + 20], (e - s, 1)))
            sub = Tracklet(f"s{chain}", "v", s, boxes[0])
            obj = Tracklet(f"o{chain}", "v", s, boxes[1])
            score = float(np.round(rng.uniform(0.05, 1.0), 2))  # rounding forces some ties
            rels.append(SegmentRelation("v", k, sub, obj, trip[0], 1.0, trip[1], score, trip[2], 1.0))
    return rels


def _summary(instances):
    return [(i.triplet, i.confidence, i.sub.start_frame, i.sub.boxes.tobytes(), i.obj.boxes.tobytes())
            for i in instances]


class TestAssociationProperties:
    @settings(max_examples=1000, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_idempotent(self, seed):
        once = greedy_associate(random_relations(seed))
        twice = greedy_associate([instance_as_relation(i) for i in once])
        assert _summary(twice) == _summary(once)

    @settings(max_examples=1000, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_threshold_monotone(self, seed):
        rels = random_relations(seed)
        counts = [len(greedy_associate(rels, t)) for t in (0.1, 0.3, 0.5, 0.7, 0.9)]
        assert counts == sorted(counts)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_every_relation_used_once(self, seed):
        rels = random_relations(seed)
        out = greedy_associate(rels)
        assert sum(len(i.member_scores) for i in out) == len(rels)
        for inst in out:
            assert 0 < inst.confidence <= 1
            assert len(inst.sub) == inst.sub.end_frame - inst.sub.start_frame + 1

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.randoms(use_true_random=False))
    def test_input_order_irrelevant(self, seed, shuffler):
        rels = random_relations(seed)
        shuffled = list(rels)
        shuffler.shuffle(shuffled)
        assert _summary(greedy_associate(shuffled)) == _summary(greedy_associate(rels))


class TestInterchange:
    def test_round_trip(self, tmp_path):
        r = rel(0, static([0, 0, 10, 10], 3, 8, "a"), static([20, 0, 30, 10], 3, 8, "b"), 0.25)
        recs = [instance_record(i) for i in greedy_associate([r])]
        write_predictions(tmp_path / "p.jsonl", recs)
        back = read_predictions(tmp_path / "p.jsonl")
        assert back == recs
        assert set(back[0]) >= {"video", "s_cls", "predicate", "o_cls", "score", "sub_boxes", "obj_boxes"}
        t = record_tracklet(back[0]["sub_boxes"], "v")
        assert t.start_frame == 3 and len(t) == 5

    def test_bad_lines(self, tmp_path):
        (tmp_path / "p.jsonl").write_text('{"video": "v"}\n{oops\n')
        with pytest.raises(ValueError, match="line 2"):
            read_predictions(tmp_path / "p.jsonl")

    def test_gap_rejected(self):
        with pytest.raises(ValueError):
            record_tracklet([[0, 0, 0, 1, 1], [2, 0, 0, 1, 1]], "v")
        with pytest.raises(ValueError):
            record_tracklet([], "v")

    def test_confidence_is_finite(self):
        r = rel(0, static([0, 0, 10, 10], 0, 5, "a"), static([20, 0, 30, 10], 0, 5, "b"), 0.5)
        assert math.isfinite(instance_record(greedy_associate([r])[0])["score"])
