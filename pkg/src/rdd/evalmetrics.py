"""Detection scoring: IoU matching, precision/recall/F1, AP and mAP@0.5.

Matching is greedy: detections are visited in descending score order (ties
keep input order) and each claims the still-unmatched ground-truth box of the
same image and class with the highest IoU, provided that IoU reaches the
threshold. AP uses all-point interpolation of the precision envelope.
"""
from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import DamageClass, PixelBox

IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class Detection:
    image_id: str
    cls: DamageClass
    box: PixelBox
    score: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "cls", DamageClass(self.cls))
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if not (self.box.x_min < self.box.x_max and self.box.y_min < self.box.y_max):
            raise ValueError(f"degenerate box {self.box}")


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    cls: DamageClass
    box: PixelBox

    def __post_init__(self):
        object.__setattr__(self, "cls", DamageClass(self.cls))


@dataclass
class MatchResult:
    """Per-detection TP flags (in the caller's order) and matched gt indices."""

    tp: list[bool]
    matched_gt: list[int | None]
    gt_matched: list[bool]

    @property
    def n_tp(self) -> int:
        return sum(self.tp)

    @property
    def n_fp(self) -> int:
        return len(self.tp) - self.n_tp

    @property
    def n_fn(self) -> int:
        return len(self.gt_matched) - sum(self.gt_matched)


@dataclass
class PRCurve:
    scores: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    ap: float
    n_gt: int = 0
    envelope: np.ndarray = field(default_factory=lambda: np.zeros(0))


def iou(a: PixelBox, b: PixelBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _score_order(dets: Sequence[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)  # stable: ties keep input order


def match(dets: Sequence[Detection], gts: Sequence[GroundTruth | PixelBox], iou_thr: float = IOU_THRESHOLD) -> MatchResult:
    """Greedy matching of one image's detections of one class."""
    gt_boxes = [g.box if isinstance(g, GroundTruth) else g for g in gts]
    gt_used = [False] * len(gt_boxes)
    tp = [False] * len(dets)
    matched: list[int | None] = [None] * len(dets)
    for i in _score_order(dets):
        best, best_iou = None, iou_thr
        for j, g in enumerate(gt_boxes):
            if gt_used[j]:
                continue
            v = iou(dets[i].box, g)
            if v >= best_iou and (best is None or v > best_iou):
                best, best_iou = j, v
        if best is not None:
            gt_used[best] = True
            tp[i] = True
            matched[i] = best
    return MatchResult(tp, matched, gt_used)


def _group(items: Iterable, key) -> dict:
    out = defaultdict(list)
    for it in items:
        out[key(it)].append(it)
    return out


def _match_all(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thr: float):
    """Match per (image, class); return per-detection TP flags aligned with
    ``dets`` and the number of gts per class."""
    flags = [False] * len(dets)
    by_key = _group(range(len(dets)), lambda i: (dets[i].image_id, dets[i].cls))
    gt_by_key = _group(gts, lambda g: (g.image_id, g.cls))
    for key, idx in by_key.items():
        res = match([dets[i] for i in idx], gt_by_key.get(key, []), iou_thr)
        for i, t in zip(idx, res.tp):
            flags[i] = t
    return flags


@dataclass(frozen=True)
class F1Result:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int

    def as_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "tp": self.tp, "fp": self.fp, "fn": self.fn}


def prf(tp: int, fp: int, fn: int) -> F1Result:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return F1Result(p, r, f1, tp, fp, fn)


def f1_at(
    dets: Sequence[Detection], gts: Sequence[GroundTruth],
    iou_thr: float = IOU_THRESHOLD, conf_thr: float = 0.0,
) -> F1Result:
    """Micro-averaged precision, recall and F1 over all images and classes."""
    kept = [d for d in dets if d.score >= conf_thr]
    flags = _match_all(kept, gts, iou_thr)
    tp = sum(flags)
    return prf(tp, len(kept) - tp, len(gts) - tp)


def _exact_ap(ctp: np.ndarray, cfp: np.ndarray, n_gt: int) -> float:
    # Precision and recall are ratios of counts, so the area is summed in exact
    # rationals and rounded once; hand-traced values then match to the last bit.
    best = Fraction(0)
    area = Fraction(0)
    for i in range(len(ctp) - 1, -1, -1):
        best = max(best, Fraction(int(ctp[i]), int(ctp[i] + cfp[i])))
        gained = ctp[i] - (ctp[i - 1] if i else 0)
        if gained:
            area += int(gained) * best
    return float(area / n_gt)


def average_precision(
    dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thr: float = IOU_THRESHOLD
) -> PRCurve:
    """AP of a single class, all-point interpolation."""
    n_gt = len(gts)
    flags = _match_all(dets, gts, iou_thr)
    order = _score_order(dets)
    tp = np.array([flags[i] for i in order], dtype=np.float64)
    scores = np.array([dets[i].score for i in order], dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt if n_gt else np.zeros_like(ctp)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(ctp + cfp > 0, ctp / (ctp + cfp), 0.0)
    if n_gt == 0 or len(order) == 0:
        return PRCurve(scores, precision, recall, 0.0, n_gt, np.zeros_like(precision))

    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.flip(np.maximum.accumulate(np.flip(mpre)))
    ap = _exact_ap(ctp.astype(np.int64), cfp.astype(np.int64), n_gt)
    return PRCurve(scores, precision, recall, ap, n_gt, mpre[1:-1])


def map50(
    dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thr: float = IOU_THRESHOLD
) -> tuple[dict[str, float], float]:
    """Per-class AP and their mean over classes that have ground truth."""
    gt_cls = _group(gts, lambda g: g.cls)
    det_cls = _group(dets, lambda d: d.cls)
    per_class = {
        c.code: average_precision(det_cls.get(c, []), gt_cls[c], iou_thr).ap
        for c in DamageClass if c in gt_cls
    }
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean


def best_f1_sweep(
    dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thr: float = IOU_THRESHOLD
) -> tuple[float, float]:
    """Confidence threshold with the highest F1 (ties go to the lower threshold)."""
    if not dets:
        return 0.0, 0.0
    best_conf, best_f1 = 0.0, -1.0
    for t in sorted({d.score for d in dets}):
        f = f1_at(dets, gts, iou_thr, t).f1
        if f > best_f1:
            best_conf, best_f1 = t, f
    return best_conf, best_f1


def evaluate(
    dets: Sequence[Detection], gts: Sequence[GroundTruth],
    iou_thr: float = IOU_THRESHOLD, conf_thr: float = 0.25, folders: dict[str, str] | None = None,
) -> dict:
    """Full report: per-class P/R/F1/AP, mAP, overall F1, optional per-folder boards.

    ``folders`` maps image id to folder name; each folder gets its own board
    plus an ``Overall`` board over everything.
    """
    def board(ds, gs):
        per_class = {}
        aps, mean = map50(ds, gs, iou_thr)
        for c in DamageClass:
            dc = [d for d in ds if d.cls == c]
            gc = [g for g in gs if g.cls == c]
            if not dc and not gc:
                continue
            per_class[c.code] = {**f1_at(dc, gc, iou_thr, conf_thr).as_dict(), "ap": aps.get(c.code)}
        overall = f1_at(ds, gs, iou_thr, conf_thr)
        return {"per_class": per_class, "map50": mean, **overall.as_dict(),
                "n_detections": len(ds), "n_ground_truth": len(gs)}

    report = {"iou_threshold": iou_thr, "conf_threshold": conf_thr, "Overall": board(dets, gts)}
    if folders:
        boards = {}
        for name in sorted(set(folders.values())):
            ids = {i for i, f in folders.items() if f == name}
            boards[name] = board([d for d in dets if d.image_id in ids], [g for g in gts if g.image_id in ids])
        report["boards"] = boards
    return report


# ---------------------------------------------------------------------------
# prediction CSV

CSV_FIELDS = ("image_id", "class_code", "x_min", "y_min", "x_max", "y_max", "score")


def write_predictions(dets: Iterable[Detection], path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for d in dets:
        b = d.box
        w.writerow([d.image_id, d.cls.code, *(f"{v:.6f}" for v in b.as_tuple()), f"{d.score:.6f}"])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_predictions(source) -> list[Detection]:
    """Parse a prediction CSV given as a path or as text."""
    text = Path(source).read_text() if isinstance(source, Path) or (
        isinstance(source, str) and "\n" not in source and Path(source).exists()) else source
    out = []
    for n, row in enumerate(csv.DictReader(io.StringIO(text)), start=2):
        try:
            box = PixelBox(*(float(row[k]) for k in ("x_min", "y_min", "x_max", "y_max")))
            out.append(Detection(row["image_id"], DamageClass.from_code(row["class_code"]), box, float(row["score"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"prediction CSV row {n}: {exc}") from None
    return out


def ground_truth_from_records(records) -> list[GroundTruth]:
    return [GroundTruth(r.id, cls, box) for r in records for cls, box in r.pixel_boxes()]
