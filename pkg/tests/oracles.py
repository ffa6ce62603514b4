"""Independent brute-force references used by unit and acceptance tests.

These deliberately avoid the package's own helpers: plain tuples, literal
loops, re-derived IoU.
"""
import math
import random

import numpy as np


def box_iou(a, b):
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter)


def greedy_flags(dets, gts, thr):
    """dets: list of (image, cls, box, score); gts: list of (image, cls, box).

    Returns a TP flag per detection following the protocol step by step:
    visit detections by descending score (ties by input position); each takes
    the unused same-image same-class gt with the largest IoU >= thr, the
    earliest such gt on equal IoU.
    """
    order = list(range(len(dets)))
    # selection sort by score, keeping earlier index on ties
    for i in range(len(order)):
        best = i
        for j in range(i + 1, len(order)):
            if dets[order[j]][3] > dets[order[best]][3]:
                best = j
        order.insert(i, order.pop(best))
    used = [False] * len(gts)
    flags = [False] * len(dets)
    for d in order:
        img, cls, box, _ = dets[d]
        pick, pick_iou = None, -1.0
        for g, (gimg, gcls, gbox) in enumerate(gts):
            if used[g] or gimg != img or gcls != cls:
                continue
            v = box_iou(box, gbox)
            if v >= thr and v > pick_iou:
                pick, pick_iou = g, v
        if pick is not None:
            used[pick] = True
            flags[d] = True
    return flags


def f1_oracle(dets, gts, thr, conf):
    kept = [d for d in dets if d[3] >= conf]
    tp = sum(greedy_flags(kept, gts, thr))
    fp, fn = len(kept) - tp, len(gts) - tp
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def ap_oracle(dets, gts, thr):
    """Threshold enumeration: one (recall, precision) point per distinct score,
    then area under max-precision-to-the-right. Assumes one class."""
    if not gts or not dets:
        return 0.0
    points = []
    for t in sorted({d[3] for d in dets}, reverse=True):
        kept = [d for d in dets if d[3] >= t]
        tp = sum(greedy_flags(kept, gts, thr))
        points.append((tp / len(gts), tp / len(kept)))
    ap, prev_r = 0.0, 0.0
    for k, (r, _) in enumerate(points):
        if r > prev_r:
            ap += (r - prev_r) * max(p for _, p in points[k:])
            prev_r = r
    return ap


def map_oracle(dets, gts, thr):
    classes = sorted({g[1] for g in gts})
    if not classes:
        return 0.0
    return sum(ap_oracle([d for d in dets if d[1] == c], [g for g in gts if g[1] == c], thr)
               for c in classes) / len(classes)


def nms_oracle(dets, thr):
    """dets: list of (box, score). Repeatedly keep the highest remaining score
    (first index on ties) and delete everything overlapping it at or above thr."""
    alive = list(range(len(dets)))
    keep = []
    while alive:
        best = alive[0]
        for i in alive:
            if dets[i][1] > dets[best][1]:
                best = i
        keep.append(best)
        alive = [i for i in alive if i != best and box_iou(dets[i][0], dets[best][0]) < thr]
    return keep


def random_eval_instance(rng: random.Random, max_side=6, n_images=2, n_classes=2, grid=12):
    """Small detection/ground-truth instance with distinct scores."""
    def box():
        x0, y0 = rng.randint(0, grid - 2), rng.randint(0, grid - 2)
        return (x0, y0, rng.randint(x0 + 1, grid), rng.randint(y0 + 1, grid))

    gts = [(f"im{rng.randrange(n_images)}", rng.randrange(n_classes), box()) for _ in range(rng.randint(0, max_side))]
    dets = []
    for _ in range(rng.randint(0, max_side)):
        if gts and rng.random() < 0.6:
            img, cls, (x0, y0, x1, y1) = rng.choice(gts)
            j = lambda v: v + rng.choice((-1, 0, 0, 1))
            b = (j(x0), j(y0), j(x1), j(y1))
            if b[2] <= b[0] or b[3] <= b[1]:
                b = (x0, y0, x1, y1)
            dets.append((img, cls, b))
        else:
            dets.append((f"im{rng.randrange(n_images)}", rng.randrange(n_classes), box()))
    scores = rng.sample(range(1, 1000), len(dets))
    dets = [(img, cls, b, s / 1000) for (img, cls, b), s in zip(dets, scores)]
    return dets, gts


def wbf_oracle(sources, weights, thr, scale=True):
    """Reference weighted box fusion on plain tuples.

    sources: list of lists of (cls, box, score). Returns sorted list of
    (cls, box, score). Detections are visited by (score desc, x_min, y_min,
    x_max, y_max, weight desc, source); each joins the existing cluster of
    its class with the highest IoU >= thr against that cluster's current
    fused box, skipping clusters that already hold a box from its source.
    """
    items = []
    for s, dets in enumerate(sources):
        for cls, box, score in dets:
            items.append((-score, *box, -weights[s], s, cls))
    items.sort()
    clusters = []  # [cls, members[(box, score, w, s)], fused]
    for neg_score, x0, y0, x1, y1, neg_w, s, cls in items:
        box, score, w = (x0, y0, x1, y1), -neg_score, -neg_w
        pick, pick_iou = None, thr
        for c in clusters:
            if c[0] != cls or any(m[3] == s for m in c[1]):
                continue
            v = box_iou(c[2], box)
            if v >= pick_iou and (pick is None or v > pick_iou):
                pick, pick_iou = c, v
        if pick is None:
            pick = [cls, [], None]
            clusters.append(pick)
        pick[1].append((box, score, w, s))
        tot = sum(m[1] * m[2] for m in pick[1])
        pick[2] = tuple(sum(m[0][k] * m[1] * m[2] for m in pick[1]) / tot for k in range(4))
    out = []
    for cls, members, fused in clusters:
        score = sum(m[1] * m[2] for m in members) / sum(m[2] for m in members)
        if scale:
            score *= len({m[3] for m in members}) / len(sources)
        out.append((cls, fused, score))
    return sorted(out, key=lambda t: (t[0], -t[2], t[1]))


def ca_loop_forward(x, p):
    """Straight-line re-implementation with explicit loops."""
    C, H, W = x.shape
    m = p.c_mid

    def delta(t):
        if p.delta_kind == "sigmoid":
            return 1 / (1 + math.exp(-t))
        return t * min(max(t + 3, 0), 6) / 6

    def sig(t):
        return 1 / (1 + math.exp(-t))

    zh = [[sum(x[c, h, i] for i in range(W)) / W for h in range(H)] for c in range(C)]
    zw = [[sum(x[c, j, w] for j in range(H)) / H for w in range(W)] for c in range(C)]
    z = [zh[c] + zw[c] for c in range(C)]
    f = [[delta(sum(p.w_f1[k, c] * z[c][n] for c in range(C)) + p.b_f1[k]) for n in range(H + W)] for k in range(m)]
    gh = np.zeros((C, H))
    gw = np.zeros((C, W))
    for c in range(C):
        for h in range(H):
            gh[c, h] = sig(sum(p.w_fh[c, k] * f[k][h] for k in range(m)) + p.b_fh[c])
        for w in range(W):
            gw[c, w] = sig(sum(p.w_fw[c, k] * f[k][H + w] for k in range(m)) + p.b_fw[c])
    y = np.zeros_like(x)
    for c in range(C):
        for i in range(H):
            for j in range(W):
                y[c, i, j] = x[c, i, j] * gh[c, i] * gw[c, j]
    return y, gh, gw, np.array(f)
