"""Panoptic quality and LSTQ under the streaming protocol.

Points whose ground-truth class is the ignore id are dropped before any
statistic is computed.  Per-class statistics are accumulated over all frames
and averaged over the classes that occur in either ground truth or
prediction.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

IGNORE = 0
METRIC_COLUMNS = ["sLSTQ", "S_assoc", "S_cls", "sPQ", "sRQ", "sSQ", "sPQ_d", "sPQ_s", "sPQ_th", "sPQ_st", "sLSTQ_d", "sLSTQ_s"]


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------- PQ


@dataclass
class PQStats:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0

    def add(self, other: "PQStats") -> None:
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.iou_sum += other.iou_sum

    @property
    def present(self) -> bool:
        return self.tp + self.fp + self.fn > 0

    def values(self):
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        if denom == 0:
            return 0.0, 0.0, 0.0
        pq = self.iou_sum / denom
        rq = self.tp / denom
        sq = self.iou_sum / self.tp if self.tp else 0.0
        return pq, rq, sq


def _segment_ids(sem: np.ndarray, inst: np.ndarray, thing: np.ndarray) -> np.ndarray:
    """One integer per (class, instance) segment; stuff collapses to one segment per class."""
    inst_eff = np.where(thing[sem], inst.astype(np.int64), 0)
    return sem.astype(np.int64) * (1 << 32) + (inst_eff & 0xFFFFFFFF)


def frame_pq_stats(pred_sem, pred_inst, gt_sem, gt_inst, thing, ignore: int = IGNORE) -> Dict[int, PQStats]:
    """Per-class TP/FP/FN and IoU sums for one frame."""
    pred_sem = np.asarray(pred_sem, dtype=np.int64)
    gt_sem = np.asarray(gt_sem, dtype=np.int64)
    if len(pred_sem) != len(gt_sem):
        raise MetricError(f"point count mismatch: {len(pred_sem)} predicted vs {len(gt_sem)} ground truth")
    thing = np.asarray(thing, dtype=bool)
    valid = gt_sem != ignore
    ps, pi = pred_sem[valid], np.asarray(pred_inst)[valid]
    gs, gi = gt_sem[valid], np.asarray(gt_inst)[valid]
    pseg = _segment_ids(ps, pi, thing)
    gseg = _segment_ids(gs, gi, thing)

    stats: Dict[int, PQStats] = {}
    g_ids, g_area = np.unique(gseg, return_counts=True)
    p_ids, p_area = np.unique(pseg, return_counts=True)
    pairs, inter = np.unique(np.stack([pseg, gseg]), axis=1, return_counts=True)
    g_area_of = dict(zip(g_ids.tolist(), g_area.tolist()))
    p_area_of = dict(zip(p_ids.tolist(), p_area.tolist()))
    matched_g, matched_p = set(), set()
    for (ps_id, gs_id), n in zip(pairs.T.tolist(), inter.tolist()):
        if ps_id >> 32 != gs_id >> 32:
            continue
        iou = n / (p_area_of[ps_id] + g_area_of[gs_id] - n)
        if iou > 0.5:
            c = gs_id >> 32
            st = stats.setdefault(c, PQStats())
            st.tp += 1
            st.iou_sum += iou
            matched_g.add(gs_id)
            matched_p.add(ps_id)
    for g in g_ids.tolist():
        if g not in matched_g:
            stats.setdefault(g >> 32, PQStats()).fn += 1
    for p in p_ids.tolist():
        c = p >> 32
        if p not in matched_p and c != ignore:
            stats.setdefault(c, PQStats()).fp += 1
    return stats


def _average(stats: Dict[int, PQStats], gt_only: bool = False):
    # gt_only: classes without ground truth (false positives only) are skipped
    present = [s for c, s in sorted(stats.items()) if (s.tp + s.fn > 0 if gt_only else s.present)]
    if not present:
        return 0.0, 0.0, 0.0
    vals = np.array([s.values() for s in present])
    return tuple(float(v) for v in vals.mean(axis=0))


def panoptic_quality(pred_sem, pred_inst, gt_sem, gt_inst, thing, ignore: int = IGNORE):
    """``(PQ, RQ, SQ, per_class)`` for one frame."""
    stats = frame_pq_stats(pred_sem, pred_inst, gt_sem, gt_inst, thing, ignore)
    pq, rq, sq = _average(stats)
    return pq, rq, sq, {c: s.values() for c, s in stats.items() if s.present}


# ---------------------------------------------------------------- LSTQ


def lstq(pred_inst_frames, gt_inst_frames, pred_sem_frames, gt_sem_frames, n_classes: Optional[int] = None, ignore: int = IGNORE, gt_classes_only: bool = False):
    """``(LSTQ, S_assoc, S_cls)`` over a sequence of frames.

    Tubes are identified by non-zero instance id across frames (class
    agnostic); ignore-class points are dropped.  ``S_cls`` averages over
    classes in ground truth or prediction, or ground truth only with
    ``gt_classes_only``.
    """
    gs = np.concatenate([np.asarray(x, dtype=np.int64) for x in gt_sem_frames]) if len(gt_sem_frames) else np.zeros(0, np.int64)
    ps = np.concatenate([np.asarray(x, dtype=np.int64) for x in pred_sem_frames]) if len(pred_sem_frames) else np.zeros(0, np.int64)
    gi = np.concatenate([np.asarray(x, dtype=np.int64) for x in gt_inst_frames]) if len(gt_inst_frames) else np.zeros(0, np.int64)
    pi = np.concatenate([np.asarray(x, dtype=np.int64) for x in pred_inst_frames]) if len(pred_inst_frames) else np.zeros(0, np.int64)
    if not (len(gs) == len(ps) == len(gi) == len(pi)):
        raise MetricError("prediction and ground truth cover different point sets")
    valid = gs != ignore
    gs, ps, gi, pi = gs[valid], ps[valid], gi[valid], pi[valid]

    s_assoc = association_score(pi, gi)
    s_cls = classification_score(ps, gs, ignore, gt_classes_only)
    return math.sqrt(s_assoc * s_cls), s_assoc, s_cls


def association_score(pred_inst: np.ndarray, gt_inst: np.ndarray) -> float:
    g_mask = gt_inst != 0
    g_ids, g_size = np.unique(gt_inst[g_mask], return_counts=True)
    if len(g_ids) == 0:
        raise MetricError("no ground-truth tubes to associate")
    p_mask = pred_inst != 0
    p_ids, p_size = np.unique(pred_inst[p_mask], return_counts=True)
    p_size_of = dict(zip(p_ids.tolist(), p_size.tolist()))
    both = g_mask & p_mask
    pairs, inter = np.unique(np.stack([gt_inst[both], pred_inst[both]]), axis=1, return_counts=True)
    per_tube = dict.fromkeys(g_ids.tolist(), 0.0)
    g_size_of = dict(zip(g_ids.tolist(), g_size.tolist()))
    for (g, p), n in zip(pairs.T.tolist(), inter.tolist()):
        iou = n / (g_size_of[g] + p_size_of[p] - n)
        per_tube[g] += n * iou
    return float(np.mean([per_tube[g] / g_size_of[g] for g in g_ids.tolist()]))


def classification_score(pred_sem: np.ndarray, gt_sem: np.ndarray, ignore: int = IGNORE, gt_classes_only: bool = False) -> float:
    classes = np.unique(gt_sem) if gt_classes_only else np.union1d(np.unique(gt_sem), np.unique(pred_sem))
    classes = classes[classes != ignore]
    if len(classes) == 0:
        return 0.0
    ious = []
    for c in classes:
        g = gt_sem == c
        p = pred_sem == c
        union = np.count_nonzero(g | p)
        ious.append(np.count_nonzero(g & p) / union)
    return float(np.mean(ious))


# ---------------------------------------------------------------- streaming report


@dataclass
class MetricReport:
    sPQ: float
    sRQ: float
    sSQ: float
    sLSTQ: float
    S_assoc: float
    S_cls: float
    sPQ_d: Optional[float]
    sPQ_s: Optional[float]
    sPQ_th: Optional[float]
    sPQ_st: Optional[float]
    sLSTQ_d: Optional[float] = None
    sLSTQ_s: Optional[float] = None
    n_frames: int = 0
    per_class: Dict[int, dict] = field(default_factory=dict)

    def row(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_COLUMNS}

    def to_json(self) -> str:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return json.dumps(d, sort_keys=True, indent=1)

    def to_csv(self) -> str:
        return rows_to_csv([self.row()], METRIC_COLUMNS)


def rows_to_csv(rows: List[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k)) for k in columns})
    return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(round(v, 12))
    return v


def _split_pq(preds, gts, masks, thing, full: bool = False):
    stats: Dict[int, PQStats] = {}
    any_points = False
    for (ps, pi), (gs, gi), mk in zip(preds, gts, masks):
        if not mk.any():
            continue
        any_points = True
        for c, s in frame_pq_stats(ps[mk], pi[mk], gs[mk], gi[mk], thing).items():
            stats.setdefault(c, PQStats()).add(s)
    if not any_points:
        return None, stats
    return _average(stats, gt_only=not full), stats


def _split_lstq(preds, gts, masks, ignore=IGNORE):
    if not any(m.any() for m in masks):
        return None
    try:
        v, _, _ = lstq(
            [p[1][m] for p, m in zip(preds, masks)],
            [g[1][m] for g, m in zip(gts, masks)],
            [p[0][m] for p, m in zip(preds, masks)],
            [g[0][m] for g, m in zip(gts, masks)],
            ignore=ignore,
            gt_classes_only=True,
        )
    except MetricError:
        return None
    return v


def evaluate_frames(preds, gt_frames, thing, moving_masks=None) -> MetricReport:
    """Metrics over per-frame ``(semantic, instance)`` predictions.

    ``gt_frames`` items need ``semantic``, ``instance`` and ``moving``.
    Splits mask points by the ground-truth moving flag (d/s) and by whether
    the ground-truth class is a thing (th/st).
    """
    thing = np.asarray(thing, dtype=bool)
    preds = [(np.asarray(s, dtype=np.int64), np.asarray(i, dtype=np.int64)) for s, i in preds]
    gts = [(np.asarray(f.semantic, dtype=np.int64), np.asarray(f.instance, dtype=np.int64)) for f in gt_frames]
    if len(preds) != len(gts):
        raise MetricError(f"{len(preds)} predictions for {len(gts)} frames")
    for k, (p, g) in enumerate(zip(preds, gts)):
        if len(p[0]) != len(g[0]):
            raise MetricError(f"frame {k}: point count mismatch")
    full = [np.ones(len(g[0]), dtype=bool) for g in gts]
    if moving_masks is None:
        moving_masks = [np.asarray(f.moving, dtype=bool) for f in gt_frames]
    dyn = [np.asarray(m, dtype=bool) for m in moving_masks]
    sta = [~m for m in dyn]
    th = [thing[g[0]] for g in gts]
    st = [~m for m in th]

    (pq, rq, sq), stats = _split_pq(preds, gts, full, thing, full=True)
    L, s_assoc, s_cls = lstq([p[1] for p in preds], [g[1] for g in gts], [p[0] for p in preds], [g[0] for g in gts])

    def first(x):
        return None if x[0] is None else x[0][0]

    return MetricReport(
        sPQ=pq,
        sRQ=rq,
        sSQ=sq,
        sLSTQ=L,
        S_assoc=s_assoc,
        S_cls=s_cls,
        sPQ_d=first(_split_pq(preds, gts, dyn, thing)),
        sPQ_s=first(_split_pq(preds, gts, sta, thing)),
        sPQ_th=first(_split_pq(preds, gts, th, thing)),
        sPQ_st=first(_split_pq(preds, gts, st, thing)),
        sLSTQ_d=_split_lstq(preds, gts, dyn),
        sLSTQ_s=_split_lstq(preds, gts, sta),
        n_frames=len(preds),
        per_class={int(c): dict(zip(("PQ", "RQ", "SQ"), s.values())) for c, s in sorted(stats.items()) if s.present},
    )


def streaming_evaluate(report, gt_sequence, thing=None) -> MetricReport:
    """Evaluate every emitted record (fallbacks included) against its frame."""
    frames = list(gt_sequence.frames if hasattr(gt_sequence, "frames") else gt_sequence)
    by_index = {r.frame_index: r for r in report.records}
    missing = [f.frame_index for f in frames if f.frame_index not in by_index]
    if missing:
        raise MetricError(f"report has no record for frames {missing}")
    if thing is None:
        thing = gt_sequence.classes.thing
    preds = [(by_index[f.frame_index].semantic, by_index[f.frame_index].instance) for f in frames]
    return evaluate_frames(preds, frames, thing)
