import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from streamseg4d.geometry import RigidTransform, compose, rot_z
from streamseg4d.scene import (
    BodySpec,
    SceneConfig,
    SceneError,
    body_flow_lipschitz,
    generate_scene,
    gt_flow,
    gt_moving_mask,
    gt_relative_pose,
)


def single_body(v=(0, 0, 0), omega=(0, 0, 0), rot_center=None, n_bg=0, n_frames=5, **kw):
    body = BodySpec(kind="car", center=(0.0, 0.0), v=v, omega=omega, rot_center=rot_center)
    return SceneConfig(bodies=[body], clutter=[], n_static_background_points=n_bg, n_frames=n_frames, **kw)


def world(frame):
    return frame.pose.apply(frame.points)


def test_static_scene_identical_in_world():
    seq = generate_scene(SceneConfig(n_bodies=4, moving_fraction=0.0, n_frames=4, seed=3))
    for f in seq.frames[1:]:
        np.testing.assert_allclose(world(f), world(seq[0]), atol=1e-12)


def test_translating_body_moves_exactly():
    seq = generate_scene(single_body(v=(1, 0, 0)))
    for a, b in zip(seq.frames, seq.frames[1:]):
        np.testing.assert_allclose(b.points - a.points, np.tile([1.0, 0, 0], (len(a), 1)), atol=1e-12)


def test_same_seed_same_bytes():
    cfg = SceneConfig(n_bodies=5, n_frames=3, seed=11, ego_v=(0.3, 0, 0))
    a, b = generate_scene(cfg), generate_scene(cfg)
    for fa, fb in zip(a.frames, b.frames):
        assert fa.points.tobytes() == fb.points.tobytes()
        assert fa.instance.tobytes() == fb.instance.tobytes()


def test_empty_scene_rejected():
    with pytest.raises(SceneError):
        SceneConfig(bodies=[], n_static_background_points=0)
    with pytest.raises(SceneError):
        SceneConfig(fps=0)


def test_relative_pose_examples():
    seq = generate_scene(SceneConfig(n_bodies=1, ego_v=(0.5, 0, 0), n_frames=6, seed=2))
    assert gt_relative_pose(seq, 2, 2).allclose(gt_relative_pose(seq, 0, 0))
    assert abs(np.linalg.norm(gt_relative_pose(seq, 0, 4).translation) - 2.0) < 1e-12
    T = gt_relative_pose(seq, 1, 4)
    assert compose(T, gt_relative_pose(seq, 4, 1)).allclose(RigidTransform.identity())
    with pytest.raises(IndexError):
        gt_relative_pose(seq, 0, 6)


def test_relative_pose_maps_static_points():
    seq = generate_scene(SceneConfig(n_bodies=3, moving_fraction=0.0, ego_v=(0.4, 0.1, 0), ego_omega=(0, 0, 0.05), n_frames=5))
    T = gt_relative_pose(seq, 1, 3)
    np.testing.assert_allclose(T.apply(seq[1].points), seq[3].points, atol=1e-9)


def test_flow_examples():
    seq = generate_scene(SceneConfig(n_bodies=3, moving_fraction=0.0, n_frames=3))
    assert np.all(gt_flow(seq, 0, 2) == 0)
    seq = generate_scene(single_body(v=(1, 0, 0)))
    np.testing.assert_allclose(gt_flow(seq, 0, 3), np.tile([3.0, 0, 0], (len(seq[0]), 1)), atol=1e-12)
    with pytest.raises(IndexError):
        gt_flow(seq, 2, 3)


def test_rotation_flow_oracle():
    seq = generate_scene(single_body(omega=(0, 0, 0.1), rot_center=(0, 0, 0)))
    body = seq.bodies[0]
    p = np.array([5.0, 0, 0])
    # rotation about the origin: flow of p is R(0.1) p - p
    moved = body.step().apply(p[None])[0]
    np.testing.assert_allclose(moved - p, rot_z(0.1) @ p - p, atol=1e-12)
    f = gt_flow(seq, 0, 1)
    np.testing.assert_allclose(f, seq[0].points @ rot_z(0.1).T - seq[0].points, atol=1e-12)


def test_moving_mask_examples():
    assert not gt_moving_mask(generate_scene(single_body())[0]).any()
    assert gt_moving_mask(generate_scene(single_body(v=(0.2, 0, 0)))[0]).all()
    seq = generate_scene(SceneConfig(n_bodies=6, moving_fraction=0.5, seed=4, n_frames=2))
    n_moving = sum(len(b.local_points) for b in seq.bodies if b.moving)
    assert gt_moving_mask(seq[0]).sum() == n_moving


@settings(max_examples=15)
@given(st.integers(0, 10**6))
def test_rigidity_and_flow_consistency(seed):
    cfg = SceneConfig(n_bodies=4, n_frames=4, seed=seed, ego_v=(0.3, 0, 0), ego_omega=(0, 0, 0.02), n_static_background_points=200)
    seq = generate_scene(cfg)
    f0 = seq[0]
    for inst in np.unique(f0.instance[f0.instance > 0]):
        sel0 = f0.instance == inst
        d0 = np.linalg.norm(f0.points[sel0][:40, None] - f0.points[sel0][None, :40], axis=2)
        for f in seq.frames[1:]:
            sel = f.instance == inst
            d = np.linalg.norm(f.points[sel][:40, None] - f.points[sel][None, :40], axis=2)
            np.testing.assert_allclose(d, d0, atol=1e-9)
    for m in (1, 3):
        # x + flow(x), carried to frame m by the ego transform, is the observed point
        moved = gt_relative_pose(seq, 0, m).apply(f0.points + gt_flow(seq, 0, m))
        np.testing.assert_allclose(moved, seq[m].points, atol=1e-9)
    np.testing.assert_allclose(gt_flow(seq, 1, 1), seq[1].flow, atol=1e-12)


def test_static_points_have_zero_flow():
    seq = generate_scene(SceneConfig(n_bodies=4, ego_v=(0.5, 0, 0), n_frames=3, seed=8))
    f = gt_flow(seq, 0, 2)
    assert np.all(f[~seq[0].moving] == 0)


def test_lipschitz_bound():
    seq = generate_scene(single_body(omega=(0, 0, 0.3)))
    L = body_flow_lipschitz(seq.bodies[0], 1)
    assert abs(L - 2 * math.sin(0.15)) < 1e-12
    assert L <= 0.3


def test_at_fps_preserves_physical_motion():
    cfg = single_body(v=(0.4, 0, 0), n_frames=10)
    half = cfg.at_fps(5.0)
    assert half.n_frames == 5
    np.testing.assert_allclose(half.bodies[0].v, (0.8, 0, 0))
