"""Combine detections from several models and from test-time-augmented passes.

The default merge is weighted box fusion (WBF): detections of one class are
clustered by IoU with the running fused box of each cluster, a cluster takes
at most one detection per source, and the fused corners are the
``score * weight`` weighted mean of the members. The fused score is the
weight-averaged member score times ``sources in cluster / total sources``.
Greedy NMS over the pooled detections is available as the alternative mode.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import cv2
import numpy as np
import yaml

from .dataset import PixelBox
from .evalmetrics import Detection, iou, read_predictions

log = logging.getLogger(__name__)

WBF_IOU = 0.55
NMS_IOU = 0.5


def _order_key(d: Detection, weight: float = 1.0, source: int = 0):
    b = d.box
    return (-d.score, b.x_min, b.y_min, b.x_max, b.y_max, -weight, source)


def nms(dets: Sequence[Detection], iou_thr: float = NMS_IOU) -> list[Detection]:
    """Keep the best-scoring box, drop all others with IoU >= ``iou_thr``, repeat."""
    if not 0 < iou_thr < 1:
        raise ValueError("iou_thr must lie in (0, 1)")
    remaining = sorted(dets, key=_order_key)
    keep = []
    while remaining:
        best = remaining.pop(0)
        keep.append(best)
        remaining = [d for d in remaining if iou(best.box, d.box) < iou_thr]
    return keep


def nms_by_class(dets: Sequence[Detection], iou_thr: float = NMS_IOU) -> list[Detection]:
    out = []
    for cls in sorted({d.cls for d in dets}):
        out.extend(nms([d for d in dets if d.cls == cls], iou_thr))
    return out


@dataclass
class _Cluster:
    members: list[tuple[Detection, float, int]] = field(default_factory=list)
    box: PixelBox | None = None

    def add(self, det: Detection, weight: float, source: int) -> None:
        self.members.append((det, weight, source))
        ws = np.array([d.score * w for d, w, _ in self.members])
        coords = np.array([d.box.as_tuple() for d, _, _ in self.members])
        if ws.sum() > 0:
            fused = (ws[:, None] * coords).sum(axis=0) / ws.sum()
        else:
            fused = coords.mean(axis=0)
        self.box = PixelBox(*map(float, fused))

    @property
    def sources(self) -> set[int]:
        return {s for _, _, s in self.members}


def fuse_clusters(
    sources: Sequence[Sequence[Detection]],
    weights: Sequence[float] | None = None,
    iou_thr: float = WBF_IOU,
    participation_scaling: bool = True,
) -> list[tuple[Detection, list[int]]]:
    """Weighted box fusion for one image; returns fused detections with the
    indices of the sources that contributed to each."""
    n = len(sources)
    weights = [1.0] * n if weights is None else [float(w) for w in weights]
    if len(weights) != n:
        raise ValueError("one weight per source is required")
    if any(w <= 0 for w in weights):
        raise ValueError("source weights must be positive")

    flat = [(d, weights[s], s) for s, dets in enumerate(sources) for d in dets]
    out = []
    for cls in sorted({d.cls for d, _, _ in flat}):
        items = sorted((t for t in flat if t[0].cls == cls), key=lambda t: _order_key(*t))
        clusters: list[_Cluster] = []
        for det, w, s in items:
            best, best_iou = None, iou_thr
            for c in clusters:
                if s in c.sources:
                    continue
                v = iou(c.box, det.box)
                if v >= best_iou and (best is None or v > best_iou):
                    best, best_iou = c, v
            if best is None:
                best = _Cluster()
                clusters.append(best)
            best.add(det, w, s)
        for c in clusters:
            wsum = sum(w for _, w, _ in c.members)
            score = sum(d.score * w for d, w, _ in c.members) / wsum
            if participation_scaling:
                score *= len(c.sources) / n
            det0 = c.members[0][0]
            fused = Detection(det0.image_id, cls, c.box, min(1.0, score))
            out.append((fused, sorted(c.sources)))
    out.sort(key=lambda t: _order_key(t[0]))
    return out


def weighted_box_fusion(
    sources: Sequence[Sequence[Detection]],
    weights: Sequence[float] | None = None,
    iou_thr: float = WBF_IOU,
    participation_scaling: bool = True,
) -> list[Detection]:
    return [d for d, _ in fuse_clusters(sources, weights, iou_thr, participation_scaling)]


# ---------------------------------------------------------------------------
# test-time augmentation

@dataclass(frozen=True)
class TTAVariant:
    kind: str = "identity"  # identity | hflip | scale
    factor: float = 1.0

    def __post_init__(self):
        if self.kind not in ("identity", "hflip", "scale"):
            raise ValueError(f"unknown TTA variant {self.kind!r}")
        if self.kind == "scale" and not self.factor > 0:
            raise ValueError("scale factor must be positive")

    @property
    def name(self) -> str:
        return f"scale({self.factor:g})" if self.kind == "scale" else self.kind

    @classmethod
    def parse(cls, text: str) -> "TTAVariant":
        text = text.strip()
        if text.startswith("scale"):
            return cls("scale", float(text[text.index("(") + 1:text.rindex(")")]))
        return cls(text)

    def transform_image(self, image: np.ndarray) -> np.ndarray:
        if self.kind == "hflip":
            return np.ascontiguousarray(image[:, ::-1])
        if self.kind == "scale":
            h, w = image.shape[:2]
            size = (max(1, round(w * self.factor)), max(1, round(h * self.factor)))
            return cv2.resize(image, size, interpolation=cv2.INTER_LINEAR)
        return image

    def transform_box(self, box: PixelBox, width: float) -> PixelBox:
        """Map a box from original-image to transformed-image coordinates."""
        if self.kind == "hflip":
            return PixelBox(width - box.x_max, box.y_min, width - box.x_min, box.y_max)
        if self.kind == "scale":
            f = self.factor
            return PixelBox(box.x_min * f, box.y_min * f, box.x_max * f, box.y_max * f)
        return box

    def inverse_box(self, box: PixelBox, width: float) -> PixelBox:
        """Map a box detected on the transformed image back; ``width`` is the
        original image width."""
        if self.kind == "hflip":
            return PixelBox(width - box.x_max, box.y_min, width - box.x_min, box.y_max)
        if self.kind == "scale":
            f = self.factor
            return PixelBox(box.x_min / f, box.y_min / f, box.x_max / f, box.y_max / f)
        return box


Model = Callable[[np.ndarray, str], Sequence[Detection]]


class InferenceError(RuntimeError):
    def __init__(self, image_id: str, message: str):
        super().__init__(f"{image_id}: {message}")
        self.image_id = image_id


def tta_infer(
    model: Model, image: np.ndarray, variants: Sequence[TTAVariant], image_id: str = "",
    iou_thr: float = WBF_IOU,
) -> list[Detection]:
    """Run ``model`` on every variant of ``image``, undo each variant on its
    boxes, and fuse the passes with equal weights."""
    if not any(v.kind == "identity" for v in variants):
        raise ValueError("TTA variants must include identity")
    width = image.shape[1]
    passes = []
    for v in variants:
        try:
            dets = model(v.transform_image(image), image_id)
        except Exception as exc:
            raise InferenceError(image_id, f"{v.name} pass failed: {exc}") from exc
        passes.append([
            Detection(d.image_id, d.cls, v.inverse_box(d.box, width), d.score) for d in dets
        ])
    if len(passes) == 1:
        return list(passes[0])
    return weighted_box_fusion(passes, iou_thr=iou_thr)


# ---------------------------------------------------------------------------
# sources and runs

Provider = Callable[[str], Sequence[Detection]]


@dataclass
class DetectionSource:
    name: str
    provider: Provider
    weight: float = 1.0

    def __post_init__(self):
        if not self.weight > 0:
            raise ValueError(f"source {self.name}: weight must be positive")


class MissingImage(KeyError):
    pass


class CSVProvider:
    """Detections read from a prediction CSV, served per image id."""

    def __init__(self, path):
        self.path = Path(path)
        self._by_image: dict[str, list[Detection]] = {}
        for d in read_predictions(self.path):
            self._by_image.setdefault(d.image_id, []).append(d)

    def image_ids(self) -> set[str]:
        return set(self._by_image)

    def __call__(self, image_id: str) -> list[Detection]:
        if image_id not in self._by_image:
            raise MissingImage(image_id)
        return list(self._by_image[image_id])


class TTAProvider:
    """Wrap an image-level model with test-time augmentation."""

    def __init__(self, model: Model, load_image: Callable[[str], np.ndarray], variants: Sequence[TTAVariant]):
        self.model, self.load_image, self.variants = model, load_image, list(variants)

    def __call__(self, image_id: str) -> list[Detection]:
        return tta_infer(self.model, self.load_image(image_id), self.variants, image_id)


@dataclass(frozen=True)
class FusionConfig:
    mode: str = "wbf"
    iou_thr: float = WBF_IOU
    participation_scaling: bool = True
    weights: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("wbf", "nms"):
            raise ValueError(f"fusion mode must be 'wbf' or 'nms', got {self.mode!r}")
        if not 0 < self.iou_thr < 1:
            raise ValueError("iou_thr must lie in (0, 1)")

    @classmethod
    def load(cls, path) -> "FusionConfig":
        """Flat ``key: value`` file; per-source weights as ``weight.<name>: w``."""
        data = yaml.safe_load(Path(path).read_text()) or {}
        weights = {k.split(".", 1)[1]: float(v) for k, v in data.items() if k.startswith("weight.")}
        rest = {k: v for k, v in data.items() if not k.startswith("weight.")}
        unknown = set(rest) - {"mode", "iou_thr", "participation_scaling"}
        if unknown:
            raise ValueError(f"{path}: unknown keys {sorted(unknown)}")
        return cls(weights=weights, **rest)


def _fetch(src: DetectionSource, image_id: str) -> list[Detection]:
    try:
        return list(src.provider(image_id))
    except (MissingImage, KeyError):
        log.info("source %s has no detections for %s", src.name, image_id)
        return []


def ensemble_image(
    sources: Sequence[DetectionSource], image_id: str, config: FusionConfig = FusionConfig()
) -> tuple[list[Detection], list[dict]]:
    per_source = [_fetch(s, image_id) for s in sources]
    weights = [config.weights.get(s.name, s.weight) for s in sources]
    if config.mode == "nms":
        pooled = [(d, i) for i, dets in enumerate(per_source) for d in dets]
        kept = nms_by_class([d for d, _ in pooled], config.iou_thr)
        origin = {id(d): i for d, i in pooled}
        prov = [{"box": list(d.box.as_tuple()), "class": d.cls.code, "sources": [sources[origin[id(d)]].name]}
                for d in kept]
        return kept, prov
    fused = fuse_clusters(per_source, weights, config.iou_thr, config.participation_scaling)
    prov = [{"box": list(d.box.as_tuple()), "class": d.cls.code, "sources": [sources[i].name for i in srcs]}
            for d, srcs in fused]
    return [d for d, _ in fused], prov


def ensemble_run(
    sources: Sequence[DetectionSource], image_ids: Sequence[str],
    config: FusionConfig = FusionConfig(), jobs: int = 1,
) -> tuple[list[Detection], dict]:
    """Fuse every image; results are ordered by image id regardless of ``jobs``."""
    if not sources:
        raise ValueError("at least one detection source is required")
    ids = sorted(set(image_ids))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda i: ensemble_image(sources, i, config), ids))
    else:
        results = [ensemble_image(sources, i, config) for i in ids]
    dets, provenance = [], {}
    for image_id, (d, p) in zip(ids, results):
        dets.extend(d)
        provenance[image_id] = p
    return dets, provenance


def same_detections(a: Sequence[Detection], b: Sequence[Detection], tol: float = 1e-9) -> bool:
    """Order-insensitive comparison with coordinate and score tolerance."""
    if len(a) != len(b):
        return False
    key = lambda d: (d.image_id, int(d.cls), round(d.box.x_min, 6), round(d.box.y_min, 6), -round(d.score, 6))
    for x, y in zip(sorted(a, key=key), sorted(b, key=key)):
        if x.image_id != y.image_id or x.cls != y.cls:
            return False
        if not all(math.isclose(p, q, abs_tol=tol) for p, q in zip(x.box.as_tuple() + (x.score,), y.box.as_tuple() + (y.score,))):
            return False
    return True
