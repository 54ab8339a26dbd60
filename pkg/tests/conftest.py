import sys
import math

import numpy as np
import pytest
from hypothesis import settings, strategies as st

from streamseg4d.geometry import RigidTransform, TwistVector, se3_exp

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)


@st.composite
def twists(draw, max_angle=math.pi * 0.95, max_v=10.0):
    axis = np.array(draw(st.tuples(*[st.floats(-1, 1)] * 3)))
    n = np.linalg.norm(axis)
    axis = axis / n if n > 1e-3 else np.array([0.0, 0.0, 1.0])
    angle = draw(st.floats(0, max_angle))
    v = np.array(draw(st.tuples(*[st.floats(-max_v, max_v)] * 3)))
    return TwistVector(axis * angle, v)


@st.composite
def transforms(draw):
    return se3_exp(draw(twists()))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_transform(rng, max_angle=math.pi * 0.9, scale=5.0) -> RigidTransform:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return se3_exp(TwistVector(axis * rng.uniform(0, max_angle), rng.normal(0, scale, 3)))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
