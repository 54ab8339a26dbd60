import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from streamseg4d.geometry import (
    GeometryError,
    PointCloud,
    RigidTransform,
    TwistVector,
    build_spatial_index,
    compose,
    kabsch,
    nn_query,
    pack_keys,
    rot_z,
    se3_exp,
    se3_log,
    unpack_keys,
    voxelize,
)

from conftest import random_transform, transforms, twists, vec3


def Rz(a):
    return RigidTransform(rot_z(a), np.zeros(3))


def test_compose_identity_and_inverse(rng):
    T = random_transform(rng)
    assert compose(RigidTransform.identity(), T).allclose(T)
    assert compose(T, T.inverse()).allclose(RigidTransform.identity())


def test_compose_rz_closed_form():
    c, s = math.cos(0.3), math.sin(0.3)
    expected = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    np.testing.assert_allclose(compose(Rz(0.1), Rz(0.2)).rotation, expected, atol=1e-12)


def test_compose_applies_right_operand_first(rng):
    a, b = random_transform(rng), random_transform(rng)
    p = rng.normal(size=(5, 3))
    np.testing.assert_allclose(compose(a, b).apply(p), a.apply(b.apply(p)), atol=1e-9)


def test_invalid_rotation_rejected():
    with pytest.raises(GeometryError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(GeometryError):
        RigidTransform(np.eye(3) * 1.01, np.zeros(3))


def test_log_identity_is_zero():
    xi = se3_log(RigidTransform.identity())
    assert np.all(xi.omega == 0) and np.all(xi.v == 0)


def test_exp_quarter_turn_matches_rodrigues():
    T = se3_exp(TwistVector([0, 0, math.pi / 2], [0, 0, 0]))
    # Rodrigues with k = z, theta = pi/2: R = I + K + K^2
    K = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 0]], dtype=float)
    np.testing.assert_allclose(T.rotation, np.eye(3) + K + K @ K, atol=1e-12)


def test_exp_doubles_pure_translation():
    xi = se3_log(RigidTransform.from_translation([1, 0, 0]))
    np.testing.assert_allclose(se3_exp(xi.scaled(2)).translation, [2, 0, 0], atol=1e-12)


def test_log_rejects_half_turn():
    with pytest.raises(GeometryError):
        se3_log(Rz(math.pi))


@given(twists())
def test_exp_log_round_trip(xi):
    T = se3_exp(xi)
    assert se3_exp(se3_log(T)).allclose(T, atol=1e-9)


@given(transforms(), vec3)
def test_apply_inverse_round_trip(T, p):
    np.testing.assert_allclose(T.inverse().apply(T.apply(p[None]))[0], p, atol=1e-9)


@given(transforms(), transforms())
def test_compose_stays_orthonormal(a, b):
    R = compose(a, b).rotation
    assert np.max(np.abs(R.T @ R - np.eye(3))) < 1e-9
    assert abs(np.linalg.det(R) - 1) < 1e-9


def test_voxelize_examples():
    assert list(voxelize(np.array([[0.05, 0.05, 0.05]]), 0.2)) == [(0, 0, 0)]
    assert list(voxelize(np.array([[-0.01, 0.0, 0.0]]), 0.2)) == [(-1, 0, 0)]


def test_voxelize_rejects_bad_input():
    with pytest.raises(GeometryError):
        voxelize(np.array([[np.nan, 0, 0]]), 0.2)
    with pytest.raises(GeometryError):
        voxelize(np.zeros((1, 3)), 0.0)


@given(st.integers(0, 2000), st.floats(0.05, 2.0), st.integers(0, 2**31))
def test_voxelize_is_partition(n, size, seed):
    pts = np.random.default_rng(seed).uniform(-20, 20, (n, 3))
    buckets = voxelize(PointCloud(pts), size)
    idx = np.concatenate(list(buckets.values())) if buckets else np.array([], int)
    assert sorted(idx.tolist()) == list(range(n))
    for key, members in buckets.items():
        assert np.all(np.floor(pts[members] / size) == np.array(key))


@given(st.lists(st.tuples(*[st.integers(-10**5, 10**5)] * 3), min_size=1, max_size=50))
def test_pack_unpack_round_trip_and_order(keys):
    k = np.array(keys, dtype=np.int64)
    np.testing.assert_array_equal(unpack_keys(pack_keys(k)), k)
    # packed order is lexicographic order of (ix, iy, iz)
    lex = np.lexsort((k[:, 2], k[:, 1], k[:, 0]))
    assert np.all(np.diff(pack_keys(k)[lex]) >= 0)


def test_nn_examples():
    idx = build_spatial_index(np.array([[0.0, 0, 0], [10, 0, 0]]))
    assert nn_query(idx, np.array([1.0, 0, 0])) == (0, 1.0)
    assert nn_query(idx, np.array([10.0, 0, 0])) == (1, 0.0)
    with pytest.raises(GeometryError):
        build_spatial_index(np.zeros((0, 3)))


def test_nn_matches_brute_force(rng):
    pts = rng.uniform(-10, 10, (5000, 3))
    q = rng.uniform(-12, 12, (100, 3))
    idx = build_spatial_index(pts)
    got_i, got_d = idx.nn_query(q)
    d = np.sqrt(((q[:, None, :] - pts[None]) ** 2).sum(-1))
    np.testing.assert_array_equal(got_i, d.argmin(1))
    np.testing.assert_allclose(got_d, d.min(1), atol=1e-12)


@given(st.integers(1, 400), st.integers(0, 2**31))
def test_nn_matches_brute_force_random(n, seed):
    r = np.random.default_rng(seed)
    pts, q = r.normal(size=(n, 3)), r.normal(size=(8, 3))
    got_i, got_d = build_spatial_index(pts).nn_query(q)
    d = np.linalg.norm(q[:, None] - pts[None], axis=2)
    np.testing.assert_allclose(got_d, d.min(1), atol=1e-12)
    np.testing.assert_allclose(d[np.arange(8), got_i], d.min(1), atol=1e-12)


def test_point_cloud_attribute_length_checked():
    with pytest.raises(GeometryError):
        PointCloud(np.zeros((3, 3)), intensity=np.zeros(2))


def test_kabsch_recovers_transform(rng):
    T = random_transform(rng)
    src = rng.normal(size=(50, 3))
    assert kabsch(src, T.apply(src)).allclose(T, atol=1e-9)
