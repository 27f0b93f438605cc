import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ovrd.motion import (DEFAULT_GAMMA, DEFAULT_SEGMENT_LENGTH, N_GROUPS, PATTERN_TABLE, MotionError,
                         MotionPattern, boundary_gious, motion_pattern, pattern_from_gious, pattern_index,
                         relative_position_feature)

from conftest import make_tracklet, random_tracklet

VALID = {("+", "+", "+"), ("+", "+", "-"), ("-", "-", "+"), ("-", "-", "-"), ("-", "+", "+"), ("+", "-", "-")}


class TestDefaults:
    def test_published_values(self):
        assert DEFAULT_GAMMA == -0.3
        assert DEFAULT_SEGMENT_LENGTH == 30
        assert N_GROUPS == 6


class TestPatterns:
    def test_examples(self):
        assert tuple(pattern_from_gious(-0.5, 0.2, -0.3)) == ("-", "+", "+")
        assert tuple(pattern_from_gious(-0.3, -0.3, -0.3)) == ("+", "+", "+")
        assert tuple(pattern_from_gious(0.5, 0.1, -0.3)) == ("+", "+", "-")

    def test_index_table(self):
        expected = {("+", "+", "+"): 0, ("+", "+", "-"): 1, ("-", "-", "+"): 2,
                    ("-", "-", "-"): 3, ("-", "+", "+"): 4, ("+", "-", "-"): 5}
        for p, i in expected.items():
            assert pattern_index(p) == i
            assert MotionPattern(p).index == i
        assert sorted(pattern_index(p) for p in PATTERN_TABLE) == list(range(6))

    @pytest.mark.parametrize("bad", [("+", "-", "+"), ("-", "+", "-")])
    def test_impossible_patterns(self, bad):
        with pytest.raises(MotionError):
            pattern_index(bad)
        with pytest.raises(MotionError):
            MotionPattern(bad)

    def test_only_six_sign_triples_exist(self):
        all_triples = set(itertools.product("+-", repeat=3))
        assert set(PATTERN_TABLE) == VALID == all_triples - {("+", "-", "+"), ("-", "+", "-")}

    @settings(max_examples=500, deadline=None)
    @given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
    def test_any_gious_give_valid_pattern(self, gs, ge, gamma):
        p = pattern_from_gious(gs, ge, gamma)
        assert tuple(p) in VALID
        assert (p[2] == "+") == (gs <= ge)

    def test_random_pairs(self):
        rng = np.random.default_rng(0)
        seen = set()
        for _ in range(2000):
            a = random_tracklet(rng, tid="a", start=0, length=10)
            b = random_tracklet(rng, tid="b", start=0, length=10)
            p = motion_pattern(a, b)
            assert tuple(p) in VALID
            seen.add(pattern_index(p))
            gs, ge = boundary_gious(a, b)
            assert (p[2] == "+") == (gs <= ge)
        assert seen <= set(range(6))

    def test_needs_overlap(self):
        a = make_tracklet([[0, 0, 1, 1]], 0)
        b = make_tracklet([[0, 0, 1, 1]], 3)
        with pytest.raises(MotionError):
            motion_pattern(a, b)
        with pytest.raises(MotionError):
            relative_position_feature(a, b)

    def test_uses_intersection_boundaries(self):
        # subject moves far away before the object appears; only the shared span counts
        a = make_tracklet([[500, 500, 510, 510], [0, 0, 10, 10], [0, 0, 10, 10]], 0)
        b = make_tracklet([[0, 0, 10, 10], [0, 0, 10, 10]], 1)
        assert boundary_gious(a, b) == (1.0, 1.0)


class TestRelativePosition:
    def test_identical_boxes_zero(self):
        t = make_tracklet([[3, 4, 8, 9], [4, 4, 9, 10]], 2)
        np.testing.assert_array_equal(relative_position_feature(t, t), np.zeros(12))

    def test_substitution_example(self):
        s = make_tracklet([[1, 1, 3, 3]])
        o = make_tracklet([[0.5, 0.5, 1.5, 1.5]])
        f = relative_position_feature(s, o, 30)
        expected = [1, 1, math.log(2), math.log(2), math.log(4), 0]
        np.testing.assert_allclose(f[:6], expected, atol=1e-12)
        np.testing.assert_allclose(f[6:], expected, atol=1e-12)

    def test_swap_negates_logs(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            a = random_tracklet(rng, tid="a", start=0, length=5)
            b = random_tracklet(rng, tid="b", start=0, length=5)
            fa, fb = relative_position_feature(a, b), relative_position_feature(b, a)
            for off in (0, 6):
                np.testing.assert_allclose(fa[off + 2:off + 5], -fb[off + 2:off + 5], atol=1e-9)

    def test_origin_box_is_finite(self):
        s = make_tracklet([[0, 0, 0, 0]])
        o = make_tracklet([[-1, -1, 1, 1]])
        f = relative_position_feature(s, o)
        assert f.shape == (12,) and np.isfinite(f).all()

    def test_segment_length_positive(self):
        t = make_tracklet([[0, 0, 1, 1]])
        with pytest.raises(MotionError):
            relative_position_feature(t, t, 0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000))
    def test_self_pair_is_zero(self, seed):
        t = random_tracklet(np.random.default_rng(seed))
        assert np.all(relative_position_feature(t, t) == 0.0)
