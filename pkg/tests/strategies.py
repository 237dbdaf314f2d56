"""Hypothesis strategies for the file-format round-trip tests."""

import numpy as np
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from evslam.core import DepthImage, EventImage, Pose
from evslam.evaluation import Trajectory
from evslam.formats import DEPTH_MAX_M

shapes = st.tuples(st.integers(1, 8), st.integers(1, 8))


@st.composite
def event_images(draw):
    h, w = draw(shapes)
    if draw(st.booleans()):
        elems = st.integers(0, 2 ** 32 - 1)
        dtype = np.uint32
    else:
        elems = st.floats(0, 2.0 ** 100, width=32, allow_nan=False, allow_infinity=False)
        dtype = np.float32
    pos = draw(hnp.arrays(dtype, (h, w), elements=elems))
    neg = draw(hnp.arrays(dtype, (h, w), elements=elems))
    return EventImage(pos, neg)


unit = st.floats(-1.0, 1.0, allow_nan=False)


@st.composite
def poses(draw):
    q = np.array(draw(st.tuples(unit, unit, unit, unit)))
    if np.linalg.norm(q) < 1e-3:
        q = np.array([0.0, 0.0, 0.0, 1.0])
    t = np.array(draw(st.tuples(*[st.floats(-1e3, 1e3, allow_nan=False)] * 3)))
    return Pose(q, t)


@st.composite
def trajectories(draw):
    n = draw(st.integers(1, 12))
    # integer nanosecond stamps survive the 9-decimal text form
    gaps = draw(st.lists(st.integers(1, 10 ** 10), min_size=n, max_size=n))
    stamps = np.cumsum(gaps) / 1e9
    return Trajectory(stamps, tuple(draw(poses()) for _ in range(n)))


@st.composite
def depth_images(draw):
    h, w = draw(shapes)
    elems = st.one_of(st.just(0.0), st.floats(0.0, DEPTH_MAX_M, allow_nan=False))
    return DepthImage(draw(hnp.arrays(np.float64, (h, w), elements=elems)))
