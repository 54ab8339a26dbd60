import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from streamseg4d.metrics import (
    METRIC_COLUMNS,
    MetricError,
    evaluate_frames,
    lstq,
    panoptic_quality,
    rows_to_csv,
    streaming_evaluate,
)
from streamseg4d.runtime import CostModel, RunConfig, run_stream
from streamseg4d.scene import SceneConfig, generate_scene

from oracles import lstq_oracle, pq_oracle, random_instance

THING = np.array([False, False, False, True, True, True])


def frames_of(gts, moving=None):
    return [SimpleNamespace(semantic=s, instance=i, moving=np.zeros(len(s), bool) if moving is None else moving[k]) for k, (s, i) in enumerate(gts)]


def test_pq_perfect_and_empty():
    sem = np.array([1, 1, 4, 4, 4, 2])
    inst = np.array([0, 0, 7, 7, 7, 0])
    assert panoptic_quality(sem, inst, sem, inst, THING)[:3] == (1.0, 1.0, 1.0)
    gt = np.full(10, 4)
    pq, rq, sq, _ = panoptic_quality(np.zeros(10, int), np.zeros(10, int), gt, np.ones(10, int), THING)
    assert pq == 0.0


def test_pq_hand_counted_iou():
    gt_sem = np.array([4] * 10 + [1] * 2)
    gt_inst = np.array([1] * 10 + [0] * 2)
    pred_sem = np.array([4] * 8 + [1] * 2 + [4] * 2)
    pred_inst = np.array([1] * 8 + [0] * 2 + [1] * 2)
    # the two stuff points are predicted as the instance; only class 4 is scored here
    pq, rq, sq, per = panoptic_quality(pred_sem, pred_inst, gt_sem, gt_inst, THING)
    assert per[4][0] == pytest.approx(8 / 12, abs=1e-15)


def test_pq_length_mismatch():
    with pytest.raises(MetricError):
        panoptic_quality(np.zeros(3, int), np.zeros(3, int), np.zeros(4, int), np.zeros(4, int), THING)


def test_lstq_perfect_and_split_tubes():
    sem = [np.array([4, 4, 4, 4, 1]), np.array([4, 4, 4, 4, 1])]
    inst = [np.array([1, 1, 1, 1, 0]), np.array([1, 1, 1, 1, 0])]
    assert lstq(inst, inst, sem, sem) == (1.0, 1.0, 1.0)
    halves = [np.array([1, 1, 2, 2, 0]), np.array([1, 1, 2, 2, 0])]
    L, a, c = lstq(halves, inst, sem, sem)
    assert a == pytest.approx(0.5, abs=1e-15) and c == 1.0
    assert L == pytest.approx(math.sqrt(0.5), abs=1e-15)
    with pytest.raises(MetricError):
        lstq([np.zeros(3, int)], [np.zeros(3, int)], [np.ones(3, int)], [np.ones(3, int)])


@settings(max_examples=60)
@given(st.integers(0, 2**32 - 1))
def test_matches_bruteforce_oracles(seed):
    preds, gts, thing = random_instance(np.random.default_rng(seed))
    rep = evaluate_frames(preds, frames_of(gts), thing)
    for got, want in zip((rep.sPQ, rep.sRQ, rep.sSQ), pq_oracle(preds, gts, thing)):
        assert abs(got - want) <= 1e-12
    for got, want in zip((rep.sLSTQ, rep.S_assoc, rep.S_cls), lstq_oracle(preds, gts)):
        assert abs(got - want) <= 1e-12


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1))
def test_invariants(seed):
    rng = np.random.default_rng(seed)
    preds, gts, thing = random_instance(rng)
    rep = evaluate_frames(preds, frames_of(gts), thing)
    for k in METRIC_COLUMNS:
        v = getattr(rep, k)
        assert v is None or 0.0 <= v <= 1.0
    assert rep.sLSTQ == pytest.approx(math.sqrt(rep.S_assoc * rep.S_cls), abs=1e-12)
    for c, vals in rep.per_class.items():
        if vals["RQ"] > 0:
            assert vals["PQ"] == pytest.approx(vals["RQ"] * vals["SQ"], abs=1e-12)
    # relabelling predicted instances changes nothing
    perm = rng.permutation(1000) + 1
    relabelled = [(s, np.where(i > 0, perm[i], 0)) for s, i in preds]
    rep2 = evaluate_frames(relabelled, frames_of(gts), thing)
    for k in METRIC_COLUMNS:
        a, b = getattr(rep, k), getattr(rep2, k)
        assert (a is None and b is None) or a == pytest.approx(b, abs=1e-12)


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_partition_consistency(seed):
    # classes 1-2 only on static points, 3-5 only on moving points; predictions
    # stay inside their split, so merged d/s stats reproduce the unsplit ones
    rng = np.random.default_rng(seed)
    preds, gts, thing = random_instance(rng, n_frames=3, n_points=150)
    gts = [(np.where(s == 0, 1, s), i) for s, i in gts]
    moving = [thing[s] for s, _ in gts]
    fixed = []
    for (ps, pi), (gs, _), m in zip(preds, gts, moving):
        ps = np.where(m, np.where(thing[ps], ps, gs), np.where(thing[ps] | (ps == 0), gs, ps))
        fixed.append((ps, pi))
    from streamseg4d.metrics import _split_pq

    g = [(s.astype(np.int64), i.astype(np.int64)) for s, i in gts]
    p = [(s.astype(np.int64), i.astype(np.int64)) for s, i in fixed]
    _, sd = _split_pq(p, g, moving, thing, full=True)
    _, ss = _split_pq(p, g, [~m for m in moving], thing, full=True)
    assert not set(sd) & set(ss)
    merged = {**sd, **ss}
    (pq, _, _), full = _split_pq(p, g, [np.ones(len(m), bool) for m in moving], thing, full=True)
    assert set(full) == set(merged)
    for c in full:
        assert (full[c].tp, full[c].fp, full[c].fn) == (merged[c].tp, merged[c].fp, merged[c].fn)
        assert full[c].iou_sum == pytest.approx(merged[c].iou_sum, abs=1e-12)
    rep = evaluate_frames(fixed, frames_of(gts, moving), thing)
    assert rep.sPQ == pytest.approx(pq, abs=1e-12)


def test_streaming_clean_is_perfect():
    seq = generate_scene(SceneConfig(n_bodies=4, n_frames=6, seed=2))
    zero = CostModel(pipeline_ms=0, c_rebuild_us=0)
    rep = streaming_evaluate(run_stream(RunConfig(costs=zero), seq), seq)
    for k in METRIC_COLUMNS:
        assert getattr(rep, k) == 1.0


def test_all_fallback_hurts_dynamic_points_more():
    seq = generate_scene(SceneConfig(n_bodies=8, moving_fraction=0.5, speed_range=(0.6, 1.0), n_frames=8, seed=6))
    cfg = RunConfig(costs=CostModel(c_fixed_ms=500.0), latency=__import__("streamseg4d").backbone.LatencyModel("fixed", 300.0))
    rep = run_stream(cfg, seq)
    assert all(r.fallback for r in rep.records)
    m = streaming_evaluate(rep, seq)
    assert m.sPQ_d < m.sPQ_s


def test_missing_record_rejected():
    seq = generate_scene(SceneConfig(n_bodies=2, n_frames=3, seed=2))
    rep = run_stream(RunConfig(), seq)
    rep.records = rep.records[:-1]
    with pytest.raises(MetricError):
        streaming_evaluate(rep, seq)


def test_csv_columns_stable():
    text = rows_to_csv([{"sLSTQ": 0.5, "sPQ": 1.0}], METRIC_COLUMNS)
    assert text.splitlines()[0] == ",".join(METRIC_COLUMNS)
