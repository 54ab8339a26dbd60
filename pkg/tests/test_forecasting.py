import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from streamseg4d.forecasting import (
    FlowField,
    FlowMemory,
    ForecastError,
    MaskPolicy,
    PoseEstimationError,
    PoseMemory,
    apply_moving_mask,
    estimate_key_flow,
    estimate_pose,
    forecast_flow,
    forecast_pose,
    smooth_sequence,
    update_flow_memory,
    update_pose_memory,
)
from streamseg4d.geometry import RigidTransform, TwistVector, rot_z, se3_exp, se3_log
from streamseg4d.scene import BodySpec, SceneConfig, generate_scene, gt_flow, gt_relative_pose

V = 0.2


def static_cloud(seed=0):
    seq = generate_scene(SceneConfig(n_bodies=6, moving_fraction=0.0, n_frames=1, seed=seed, n_static_background_points=3000))
    return seq[0].points


def test_icp_identical_cloud_gives_identity():
    p = static_cloud()
    T = estimate_pose(p, p)
    assert T.allclose(RigidTransform.identity(), atol=1e-6)


def test_icp_recovers_small_motion():
    p = static_cloud(1)
    T = se3_exp(TwistVector([0, 0, 0.05], [0.3, 0.0, 0.0]))
    est = estimate_pose(p, T.apply(p))
    assert np.linalg.norm(est.translation - T.translation) < 1e-3
    assert (est.inverse() @ T).angle() < 1e-3


def test_icp_with_outliers():
    rng = np.random.default_rng(2)
    p = static_cloud(2)
    T = se3_exp(TwistVector([0, 0, 0.04], [0.25, 0.1, 0.0]))
    q = T.apply(p)
    n_out = len(q) // 5
    q = np.vstack([q, rng.uniform(q.min(0), q.max(0), (n_out, 3))])
    est = estimate_pose(p, q)
    assert np.linalg.norm(est.translation - T.translation) < 5e-2


def test_icp_rejects_degenerate():
    line = np.column_stack([np.linspace(0, 10, 100), np.zeros(100), np.zeros(100)])
    with pytest.raises(PoseEstimationError):
        estimate_pose(line, line)
    with pytest.raises(PoseEstimationError):
        estimate_pose(static_cloud()[:10], static_cloud()[:10])


def xi(w, v):
    return se3_exp(TwistVector(w, v))


def test_pose_memory_fixed_point_and_single_update():
    step = xi([0, 0, 0.03], [0.4, 0.1, 0])
    mem = PoseMemory.create(0.8)
    for _ in range(30):
        mem = update_pose_memory(mem, step, 1)
    np.testing.assert_allclose(mem.twist.as_array(), se3_log(step).as_array(), atol=1e-12)
    mem0 = update_pose_memory(PoseMemory.create(0.0, warm_start=False), step, 1)
    np.testing.assert_allclose(mem0.twist.as_array(), se3_log(step).as_array(), atol=1e-15)


def test_pose_memory_divides_by_gap():
    step = xi([0, 0, 0.02], [0.5, 0, 0])
    mem = update_pose_memory(PoseMemory.create(), step @ step @ step, 3)
    np.testing.assert_allclose(mem.twist.as_array(), se3_log(step).as_array(), atol=1e-12)
    with pytest.raises(ForecastError):
        update_pose_memory(mem, step, 0)


def test_alternating_increments_two_cycle():
    a = 0.5
    x = np.array([0.0, 0, 0, 0.3, 0, 0])
    mem = PoseMemory.create(a, warm_start=False)
    seq = []
    for k in range(40):
        mem = update_pose_memory(mem, se3_exp(TwistVector.from_array(x if k % 2 == 0 else -x)), 1)
        seq.append(mem.twist.v[0])
    assert max(abs(s) for s in seq) <= 0.3
    # scalar oracle: s+ = a s- + (1-a) x, s- = a s+ - (1-a) x  =>  s+ = (1-a) x / (1+a)
    limit = (1 - a) * 0.3 / (1 + a)
    assert abs(seq[-2] - limit) < 1e-9 and abs(seq[-1] + limit) < 1e-9
    errs = [abs(abs(s) - limit) for s in seq]
    assert errs[-1] < errs[0]


def test_forecast_examples():
    mem = PoseMemory.create()
    for _ in range(3):
        mem = update_pose_memory(mem, RigidTransform.identity(), 1)
    assert all(forecast_pose(mem, m).allclose(RigidTransform.identity()) for m in range(1, 11))
    mem = update_pose_memory(PoseMemory.create(), RigidTransform.from_translation([0.5, 0, 0]), 1)
    np.testing.assert_allclose(forecast_pose(mem, 4).translation, [2, 0, 0], atol=1e-12)
    mem = update_pose_memory(PoseMemory.create(), xi([0, 0.02, 0], [0, 0, 0]), 1)
    T = forecast_pose(mem, 10)
    assert abs(T.angle() - 0.2) < 1e-12
    np.testing.assert_allclose(se3_log(T).omega, [0, 0.2, 0], atol=1e-12)
    with pytest.raises(ForecastError):
        forecast_pose(mem, 11)


@settings(max_examples=25)
@given(st.floats(-0.1, 0.1), st.floats(-1, 1), st.floats(-1, 1), st.integers(1, 3))
def test_forecast_matches_constant_velocity_gt(wz, vx, vy, gap):
    seq = generate_scene(SceneConfig(n_bodies=1, n_frames=25, ego_omega=(0, 0, wz), ego_v=(vx, vy, 0)))
    mem = PoseMemory.create()
    t = 0
    for _ in range(3):
        mem = update_pose_memory(mem, gt_relative_pose(seq, t, t + gap), gap)
        t += gap
    heads = []
    for m in range(1, 11):
        T = forecast_pose(mem, m)
        G = gt_relative_pose(seq, t, t + m)
        assert np.linalg.norm(T.translation - G.translation) < 1e-6
        assert (T.inverse() @ G).angle() < 1e-6
        heads.append(se3_log(T).as_array() / m)
    np.testing.assert_allclose(heads, [heads[0]] * 10, atol=1e-12)


def body_scene(v=(0, 0, 0), omega=(0, 0, 0), n_frames=5, kind="car"):
    return generate_scene(SceneConfig(bodies=[BodySpec(kind=kind, center=(0.0, 0.0), v=v, omega=omega)], clutter=[], n_static_background_points=500, n_frames=n_frames))


def test_key_flow_static_scene_zero():
    seq = body_scene()
    f0, f2 = seq[0], seq[2]
    fld = estimate_key_flow(f0.points, f2.points, (f0.instance, f2.instance), gt_relative_pose(seq, 0, 2), gap=2)
    assert np.all(fld.vectors == 0)


def test_key_flow_translating_body_gap_two():
    seq = body_scene(v=(1.0, 0, 0))
    f0, f2 = seq[0], seq[2]
    fld = estimate_key_flow(f0.points, f2.points, (f0.instance, f2.instance), gt_relative_pose(seq, 0, 2), gap=2)
    vec = fld.query(f2.points[f2.instance > 0])
    np.testing.assert_allclose(vec, np.tile([1.0, 0, 0], (len(vec), 1)), atol=1e-6)
    assert np.all(fld.query(f2.points[f2.instance == 0]) == 0)


def test_key_flow_gt_passthrough():
    seq = body_scene(v=(0.3, 0.1, 0), omega=(0, 0, 0.05))
    f = seq[1]
    g = gt_flow(seq, 1, 1)
    fld = estimate_key_flow(None, f.points, (None, f.instance), RigidTransform.identity(), gt_flow=g)
    # the field stores voxel means of the per-point oracle flow
    ref = FlowField.from_points(f.points, g, V)
    np.testing.assert_array_equal(fld.vectors, ref.vectors)


def test_key_flow_small_instance_zero(caplog):
    prev = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    fld = estimate_key_flow(prev, prev + [1, 0, 0], (np.array([5, 5]), np.array([5, 5])), RigidTransform.identity())
    assert np.all(fld.vectors == 0)
    assert "fewer than" in caplog.text


def test_flow_field_query_radius():
    fld = FlowField.from_points(np.array([[0.1, 0.1, 0.1]]), np.array([[1.0, 2.0, 3.0]]), V)
    np.testing.assert_array_equal(fld.query(np.array([0.45, 0.1, 0.1])), [1, 2, 3])
    np.testing.assert_array_equal(fld.query(np.array([0.6, 0.1, 0.1])), [0, 0, 0])
    np.testing.assert_array_equal(FlowField.empty().query(np.zeros((2, 3))), np.zeros((2, 3)))


def test_flow_memory_examples():
    pts = np.random.default_rng(0).uniform(-3, 3, (200, 3))
    assert len(forecast_flow(FlowMemory(), 3)) == 0
    f = np.array([0.2, -0.1, 0.05])
    mem = FlowMemory()
    for _ in range(4):
        mem = update_flow_memory(mem, FlowField.from_points(pts, np.tile(f, (200, 1)), V))
    np.testing.assert_allclose(forecast_flow(mem, 3).vectors, np.tile(3 * f, (len(mem.state), 1)), atol=1e-12)
    zero = FlowField.from_points(pts, np.zeros((200, 3)), V)
    for _ in range(60):
        mem = update_flow_memory(mem, zero)
    assert np.abs(mem.state.vectors).max() < 1e-8
    with pytest.raises(ForecastError):
        forecast_flow(mem, 0)


def test_flow_memory_decaying_input_scalar_oracle():
    pts = np.array([[0.1, 0.1, 0.1]])
    values = [1.0 * 0.6**k for k in range(6)]
    mem = FlowMemory(alpha=0.7)
    for v in values:
        mem = update_flow_memory(mem, FlowField.from_points(pts, [[v, 0, 0]], V))
    got = forecast_flow(mem, 1).vectors[0, 0]
    assert abs(got - smooth_sequence(values, 0.7)) < 1e-12
    assert values[-1] < got < np.mean(values)


def test_moving_mask_examples():
    pts = np.array([[0.1, 0.1, 0.1], [3.1, 0.1, 0.1]])
    fld = FlowField.from_points(pts, [[0.01, 0, 0], [0.2, 0, 0]], V)
    out = apply_moving_mask(fld, MaskPolicy("threshold", 0.05))
    np.testing.assert_allclose(out.query(pts), [[0, 0, 0], [0.2, 0, 0]])
    gt = apply_moving_mask(fld, mask=np.zeros(2, bool))
    assert np.all(gt.query(pts) == 0)
    assert apply_moving_mask(fld, MaskPolicy("none")) is fld
    with pytest.raises(ForecastError):
        MaskPolicy("speed")


def test_moving_mask_jittered_static_field():
    rng = np.random.default_rng(5)
    pts = np.unique(np.floor(rng.uniform(-20, 20, (20000, 3)) / V), axis=0) * V + V / 2
    fld = FlowField.from_points(pts, rng.normal(0, 0.01, (len(pts), 3)), V)
    out = apply_moving_mask(fld, MaskPolicy("threshold", 0.05))
    zeroed = np.all(out.query(fld.centers) == 0, axis=1).mean()
    assert zeroed >= 0.99


def test_moving_mask_scaled_forecast_uses_per_frame_speed():
    pts = np.array([[0.1, 0.1, 0.1]])
    fld = FlowField.from_points(pts, [[0.03, 0, 0]], V).scaled(3)  # 0.09 over 3 frames
    assert len(apply_moving_mask(fld, MaskPolicy("threshold", 0.05), per_frame_scale=1 / 3)) == 0
