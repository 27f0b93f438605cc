"""Motion patterns of subject/object pairs and relative-position features.

A motion pattern is the sign triple of ``[G_s - gamma, G_e - gamma, G_e - G_s]``
where ``G_s``/``G_e`` are the GIoU of the pair's boxes at the first and last
frame of their temporal intersection. ``sign(0)`` is ``'+'``.

Pattern -> prompt-group index (part of the model-file contract)::

    (+,+,+) 0   (+,+,-) 1   (-,-,+) 2   (-,-,-) 3   (-,+,+) 4   (+,-,-) 5

The triples (+,-,+) and (-,+,-) cannot arise and are rejected.
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import Tracklet, giou, temporal_intersection

DEFAULT_GAMMA = -0.3
DEFAULT_SEGMENT_LENGTH = 30
DIV_EPS = 1e-6

PATTERN_TABLE = (
    ("+", "+", "+"),
    ("+", "+", "-"),
    ("-", "-", "+"),
    ("-", "-", "-"),
    ("-", "+", "+"),
    ("+", "-", "-"),
)
_INDEX = {p: i for i, p in enumerate(PATTERN_TABLE)}
N_GROUPS = len(PATTERN_TABLE)


class MotionError(ValueError):
    pass


class MotionPattern(tuple):
    """Validated sign triple; only the 6 realizable patterns can be built."""

    def __new__(cls, signs):
        signs = tuple(signs)
        if signs not in _INDEX:
            raise MotionError(f"invalid motion pattern {signs}")
        return super().__new__(cls, signs)

    @property
    def index(self) -> int:
        return _INDEX[tuple(self)]

    def __str__(self):
        return "[" + ",".join(self) + "]"


def _sign(x: float) -> str:
    return "+" if x >= 0 else "-"


def pattern_from_gious(g_start: float, g_end: float, gamma: float = DEFAULT_GAMMA) -> MotionPattern:
    return MotionPattern((_sign(g_start - gamma), _sign(g_end - gamma), _sign(g_end - g_start)))


def boundary_gious(ti: Tracklet, tj: Tracklet) -> tuple[float, float]:
    span = temporal_intersection(ti, tj)
    if span is None:
        raise MotionError(f"tracklets {ti.id} and {tj.id} do not overlap in time")
    fs, fe = span
    return giou(ti.box_at(fs), tj.box_at(fs)), giou(ti.box_at(fe), tj.box_at(fe))


def motion_pattern(ti: Tracklet, tj: Tracklet, gamma: float = DEFAULT_GAMMA) -> MotionPattern:
    g_s, g_e = boundary_gious(ti, tj)
    return pattern_from_gious(g_s, g_e, gamma)


def pattern_index(p) -> int:
    try:
        return _INDEX[tuple(p)]
    except KeyError:
        raise MotionError(f"invalid motion pattern {tuple(p)}") from None


def _guard(x: float) -> float:
    if abs(x) >= DIV_EPS:
        return x
    return DIV_EPS if x >= 0 else -DIV_EPS


def _boundary_feature(bi, bj, ti: int, tj: int, seg_len: float) -> list:
    xi, yi = (bi[0] + bi[2]) / 2.0, (bi[1] + bi[3]) / 2.0
    xj, yj = (bj[0] + bj[2]) / 2.0, (bj[1] + bj[3]) / 2.0
    wi, hi = max(bi[2] - bi[0], DIV_EPS), max(bi[3] - bi[1], DIV_EPS)
    wj, hj = max(bj[2] - bj[0], DIV_EPS), max(bj[3] - bj[1], DIV_EPS)
    return [
        (xi - xj) / _guard(xj),
        (yi - yj) / _guard(yj),
        math.log(wi / wj),
        math.log(hi / hj),
        math.log(wi * hi / (wj * hj)),
        (ti - tj) / seg_len,
    ]


def relative_position_feature(ti: Tracklet, tj: Tracklet,
                              seg_len: float = DEFAULT_SEGMENT_LENGTH) -> np.ndarray:
    """12-d feature: begin- and end-of-intersection relative box geometry."""
    if seg_len <= 0:
        raise MotionError("segment length must be positive")
    span = temporal_intersection(ti, tj)
    if span is None:
        raise MotionError(f"tracklets {ti.id} and {tj.id} do not overlap in time")
    fs, fe = span
    f_begin = _boundary_feature(ti.box_at(fs), tj.box_at(fs), fs, fs, seg_len)
    f_end = _boundary_feature(ti.box_at(fe), tj.box_at(fe), fe, fe, seg_len)
    return np.array(f_begin + f_end, dtype=np.float64)
