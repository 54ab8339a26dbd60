"""Brute-force reference metrics built from explicit point sets.

Deliberately naive: segments and tubes are Python sets of
``(frame, point)`` memberships and every pair is compared.
"""
import math
from collections import defaultdict


def _segments(sem, inst, thing, frame, valid):
    segs = defaultdict(set)
    for i in valid:
        c = int(sem[i])
        key = (c, int(inst[i]) if thing[c] else 0)
        segs[key].add((frame, i))
    return segs


def pq_oracle(preds, gts, thing, ignore=0):
    """Dataset PQ/RQ/SQ: per frame matching, per class accumulation, class mean."""
    stats = defaultdict(lambda: [0, 0, 0, 0.0])  # tp, fp, fn, iou_sum
    for f, ((ps, pi), (gs, gi)) in enumerate(zip(preds, gts)):
        valid = [i for i in range(len(gs)) if int(gs[i]) != ignore]
        gseg = _segments(gs, gi, thing, f, valid)
        pseg = _segments(ps, pi, thing, f, valid)
        mg, mp = set(), set()
        for gk, gset in gseg.items():
            for pk, pset in pseg.items():
                if gk[0] != pk[0]:
                    continue
                iou = len(gset & pset) / len(gset | pset)
                if iou > 0.5:
                    stats[gk[0]][0] += 1
                    stats[gk[0]][3] += iou
                    mg.add(gk)
                    mp.add(pk)
        for gk in gseg:
            if gk not in mg:
                stats[gk[0]][2] += 1
        for pk in pseg:
            if pk not in mp and pk[0] != ignore:
                stats[pk[0]][1] += 1
    vals = []
    for tp, fp, fn, s in stats.values():
        if tp + fp + fn == 0:
            continue
        d = tp + 0.5 * fp + 0.5 * fn
        vals.append((s / d, tp / d, s / tp if tp else 0.0))
    if not vals:
        return 0.0, 0.0, 0.0
    return tuple(sum(v[k] for v in vals) / len(vals) for k in range(3))


def lstq_oracle(preds, gts, ignore=0):
    gt_tubes, pr_tubes = defaultdict(set), defaultdict(set)
    gt_cls, pr_cls = defaultdict(set), defaultdict(set)
    for f, ((ps, pi), (gs, gi)) in enumerate(zip(preds, gts)):
        for i in range(len(gs)):
            if int(gs[i]) == ignore:
                continue
            m = (f, i)
            gt_cls[int(gs[i])].add(m)
            pr_cls[int(ps[i])].add(m)
            if int(gi[i]) != 0:
                gt_tubes[int(gi[i])].add(m)
            if int(pi[i]) != 0:
                pr_tubes[int(pi[i])].add(m)
    per_tube = []
    for t in gt_tubes.values():
        acc = 0.0
        for s in pr_tubes.values():
            inter = len(s & t)
            if inter:
                acc += inter * inter / len(s | t)
        per_tube.append(acc / len(t))
    s_assoc = sum(per_tube) / len(per_tube)
    classes = (set(gt_cls) | set(pr_cls)) - {ignore}
    ious = [len(gt_cls[c] & pr_cls[c]) / len(gt_cls[c] | pr_cls[c]) for c in classes]
    s_cls = sum(ious) / len(ious) if ious else 0.0
    return math.sqrt(s_assoc * s_cls), s_assoc, s_cls


def random_instance(rng, n_frames=None, n_points=None, n_classes=6, thing=None):
    """GT and a perturbed prediction; small enough for the set-based oracles."""
    import numpy as np

    n_frames = n_frames or int(rng.integers(1, 6))
    n_points = n_points or int(rng.integers(20, 201))
    thing = thing if thing is not None else np.array([False, False, False, True, True, True])[:n_classes]
    n_inst = int(rng.integers(1, 6))
    # each instance keeps one thing class across frames
    inst_cls = rng.choice(np.flatnonzero(thing), n_inst)
    gts, preds = [], []
    perm = rng.permutation(50) + 1
    for _ in range(n_frames):
        inst = rng.integers(0, n_inst + 1, n_points)
        sem = np.where(inst > 0, inst_cls[np.maximum(inst - 1, 0)], rng.integers(0, 3, n_points))
        inst = np.where(inst > 0, inst, 0)
        gts.append((sem, inst))
        ps, pi = sem.copy(), perm[inst] * (inst > 0)
        flip = rng.random(n_points) < rng.uniform(0, 0.4)
        ps[flip] = rng.integers(0, n_classes, flip.sum())
        swap = rng.random(n_points) < rng.uniform(0, 0.3)
        pi[swap] = rng.integers(0, n_inst + 3, swap.sum())
        preds.append((ps, pi))
    return preds, gts, thing
