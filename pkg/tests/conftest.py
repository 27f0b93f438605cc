import numpy as np
import pytest

from ovrd.geometry import ROI_FEATURE_DIM, Tracklet


def make_tracklet(boxes, start=0, tid="t", video="v", feature=None):
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    if feature is None:
        feature = np.zeros(ROI_FEATURE_DIM)
    return Tracklet(tid, video, start, boxes, feature)


def random_box(rng, scale=100.0, min_size=0.5):
    x1, y1 = rng.uniform(0, scale, 2)
    w, h = rng.uniform(min_size, scale / 2, 2)
    return np.array([x1, y1, x1 + w, y1 + h])


def random_tracklet(rng, n_frames=20, tid="t", video="v", start=None, length=None):
    length = length or int(rng.integers(1, n_frames + 1))
    start = int(rng.integers(0, n_frames - length + 1)) if start is None else start
    b0 = random_box(rng)
    drift = rng.normal(0, 3, size=(length, 4)).cumsum(axis=0)
    boxes = b0 + drift
    boxes[:, 2] = np.maximum(boxes[:, 2], boxes[:, 0])
    boxes[:, 3] = np.maximum(boxes[:, 3], boxes[:, 1])
    return make_tracklet(boxes, start, tid, video)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A 60-video planted dataset shared by the module tests."""
    from ovrd import config as cfgmod
    from ovrd.synth import gen_synth
    from ovrd.tensorio import load_dataset

    conf = cfgmod.desk_config({"seed": 0, "n_videos": 60})
    out = tmp_path_factory.mktemp("small")
    return load_dataset(gen_synth(cfgmod.synth_config(conf), out)), conf


_CRITERIA: dict = {}


@pytest.fixture
def criterion():
    """Record one acceptance criterion outcome; lines are printed in the summary."""
    def record(number, ok, detail=""):
        _CRITERIA[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
