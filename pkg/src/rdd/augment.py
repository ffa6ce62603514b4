"""Label-consistent training augmentations.

Images are ``(H, W, 3)`` uint8 arrays in OpenCV channel order. Boxes are
``(N, 4)`` float arrays of ``x_min, y_min, x_max, y_max`` pixels with a
parallel ``(N,)`` integer class array.

Every random decision is drawn from a caller-supplied
:class:`numpy.random.Generator`, so a fixed seed reproduces the output image
and boxes bit for bit. The composition order of :func:`pipeline` is
mosaic (or letterbox), geometric warp, HSV jitter, flips, mixup, paste-in.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
import yaml

FILL = 114
MIN_BOX_SIDE = 2.0
MIN_AREA_RATIO = 0.1
PASTE_IOU_MAX = 0.3
PASTE_TRIES = 30
MIXUP_ALPHA = 8.0
OP_ORDER = ("mosaic|letterbox", "affine", "hsv", "flipud", "fliplr", "mixup", "paste_in")

_PROBABILITIES = ("flipud", "fliplr", "mosaic", "mixup", "copy_paste", "paste_in")


@dataclass(frozen=True)
class AugmentConfig:
    """Augmentation hyperparameters; defaults are the stock detector values."""

    hsv_h: float = 0.015
    hsv_s: float = 0.7
    hsv_v: float = 0.4
    degrees: float = 0.0
    translate: float = 0.2
    scale: float = 0.9
    shear: float = 0.0
    perspective: float = 0.0
    flipud: float = 0.0
    fliplr: float = 0.5
    mosaic: float = 1.0
    mixup: float = 0.15
    copy_paste: float = 0.0  # alias of paste_in; the larger of the two is used
    paste_in: float = 0.15
    loss_ota: int = 1  # detector-side loss switch, carried for file compatibility only

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ValueError(f"{f.name} must be a finite number, got {v!r}")
            if v < 0:
                raise ValueError(f"{f.name} must be >= 0, got {v}")
            if f.name in _PROBABILITIES and v > 1:
                raise ValueError(f"{f.name} is a probability, got {v}")

    @property
    def paste_probability(self) -> float:
        return max(self.paste_in, self.copy_paste)

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def zero(cls) -> "AugmentConfig":
        return cls(**{f.name: 0 for f in fields(cls)})


DEFAULT = AugmentConfig()
EXPERIMENTED = replace(DEFAULT, scale=0.7, shear=0.01, perspective=0.0001, mosaic=0.5, mixup=0.1, paste_in=0.05)
PRESETS = {"default": DEFAULT, "experimented": EXPERIMENTED, "zero": AugmentConfig.zero()}


def load_config(path, base: AugmentConfig = DEFAULT) -> AugmentConfig:
    """Read a flat ``key: value`` file; unspecified keys keep ``base`` values."""
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected key: value pairs")
    known = {f.name for f in fields(AugmentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"{path}: unknown keys {sorted(unknown)}")
    return replace(base, **data)


def dump_config(cfg: AugmentConfig) -> str:
    return "".join(f"{k}: {v}\n" for k, v in cfg.as_dict().items())


# ---------------------------------------------------------------------------
# samples

@dataclass
class Sample:
    image: np.ndarray
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    id: str = ""

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.classes = np.asarray(self.classes, dtype=int).reshape(-1)
        if len(self.boxes) != len(self.classes):
            raise ValueError("boxes and classes differ in length")


@dataclass
class AugmentedSample(Sample):
    provenance: dict = field(default_factory=dict)


def _provenance(*samples: Sample) -> dict:
    ids = []
    for s in samples:
        ids.extend(getattr(s, "provenance", {}).get("source_ids", [s.id]))
    return {"source_ids": ids, "ops": []}


# ---------------------------------------------------------------------------
# geometry

@dataclass(frozen=True)
class AffineSpec:
    matrix: np.ndarray
    angle: float = 0.0
    scale: float = 1.0
    shear_x: float = 0.0
    shear_y: float = 0.0
    perspective_x: float = 0.0
    perspective_y: float = 0.0
    translate_x: float = 0.0
    translate_y: float = 0.0
    in_size: tuple[int, int] = (0, 0)
    out_size: int = 0

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError("affine matrix must be 3x3")
        object.__setattr__(self, "matrix", m)

    @property
    def invertible(self) -> bool:
        return abs(np.linalg.det(self.matrix[:2, :2])) > 1e-12

    @property
    def is_identity(self) -> bool:
        return np.array_equal(self.matrix, np.eye(3))

    def draws(self) -> dict:
        return {
            "angle": self.angle, "scale": self.scale,
            "shear_x": self.shear_x, "shear_y": self.shear_y,
            "perspective_x": self.perspective_x, "perspective_y": self.perspective_y,
            "translate_x": self.translate_x, "translate_y": self.translate_y,
        }

    def as_dict(self) -> dict:
        return {**self.draws(), "matrix": self.matrix.tolist(),
                "in_size": list(self.in_size), "out_size": self.out_size}


def compose_affine(
    out_size: int,
    in_size: tuple[int, int] | None = None,
    *,
    angle: float = 0.0,
    scale: float = 1.0,
    shear_x: float = 0.0,
    shear_y: float = 0.0,
    perspective_x: float = 0.0,
    perspective_y: float = 0.0,
    translate_x: float = 0.0,
    translate_y: float = 0.0,
) -> AffineSpec:
    """Build the warp from explicit components.

    Order: move the input center to the origin, rotate and scale, shear,
    apply perspective, then move to the output center plus a translation of
    ``translate_* * out_size`` pixels. Angles and shears are in degrees.
    """
    in_w, in_h = in_size or (out_size, out_size)
    center = np.eye(3)
    center[0, 2], center[1, 2] = -in_w / 2, -in_h / 2
    rot = np.eye(3)
    rot[:2] = cv2.getRotationMatrix2D(angle=angle, center=(0, 0), scale=scale)
    shear = np.eye(3)
    shear[0, 1] = math.tan(math.radians(shear_x))
    shear[1, 0] = math.tan(math.radians(shear_y))
    persp = np.eye(3)
    persp[2, 0], persp[2, 1] = perspective_x, perspective_y
    trans = np.eye(3)
    trans[0, 2] = out_size / 2 + translate_x * out_size
    trans[1, 2] = out_size / 2 + translate_y * out_size
    m = trans @ persp @ shear @ rot @ center
    return AffineSpec(
        m, angle, scale, shear_x, shear_y, perspective_x, perspective_y,
        translate_x, translate_y, (int(in_w), int(in_h)), int(out_size),
    )


def sample_affine(
    cfg: AugmentConfig, rng: np.random.Generator, out_size: int, in_size: tuple[int, int] | None = None
) -> AffineSpec:
    """Draw warp components uniformly within the ranges given by ``cfg``."""
    persp_x = rng.uniform(-cfg.perspective, cfg.perspective)
    persp_y = rng.uniform(-cfg.perspective, cfg.perspective)
    angle = rng.uniform(-cfg.degrees, cfg.degrees)
    gain = rng.uniform(1 - cfg.scale, 1 + cfg.scale)
    shear_x = rng.uniform(-cfg.shear, cfg.shear)
    shear_y = rng.uniform(-cfg.shear, cfg.shear)
    tx = rng.uniform(-cfg.translate, cfg.translate)
    ty = rng.uniform(-cfg.translate, cfg.translate)
    # uniform(-0, 0) can yield -0.0; normalize so a zero config is exactly the identity
    return compose_affine(
        out_size, in_size, angle=angle + 0.0, scale=gain + 0.0, shear_x=shear_x + 0.0, shear_y=shear_y + 0.0,
        perspective_x=persp_x + 0.0, perspective_y=persp_y + 0.0, translate_x=tx + 0.0, translate_y=ty + 0.0,
    )


def transform_boxes(boxes: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Axis-aligned hull of each box's four transformed corners."""
    n = len(boxes)
    if n == 0:
        return np.zeros((0, 4))
    corners = np.ones((n * 4, 3))
    corners[:, :2] = boxes[:, [0, 1, 2, 3, 0, 3, 2, 1]].reshape(n * 4, 2)
    pts = corners @ matrix.T
    pts = pts[:, :2] / pts[:, 2:3]
    x = pts[:, 0].reshape(n, 4)
    y = pts[:, 1].reshape(n, 4)
    return np.stack([x.min(1), y.min(1), x.max(1), y.max(1)], axis=1)


def box_candidates(
    old: np.ndarray, new: np.ndarray, gain: float = 1.0,
    min_side: float = MIN_BOX_SIDE, min_area_ratio: float = MIN_AREA_RATIO,
) -> np.ndarray:
    """Mask of boxes that stay at least ``min_side`` wide/tall and keep
    ``min_area_ratio`` of their scale-adjusted area."""
    w_new, h_new = new[:, 2] - new[:, 0], new[:, 3] - new[:, 1]
    old_area = (old[:, 2] - old[:, 0]) * (old[:, 3] - old[:, 1]) * gain * gain
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(old_area > 0, w_new * h_new / old_area, 0.0)
    return (w_new >= min_side) & (h_new >= min_side) & (ratio >= min_area_ratio)


def apply_affine(sample: Sample, spec: AffineSpec, out_size: int) -> AugmentedSample:
    """Warp image and boxes; exposed pixels are filled with gray 114."""
    if not spec.invertible:
        raise ValueError("affine transform is not invertible")
    img = sample.image
    m = spec.matrix
    if spec.is_identity and img.shape[:2] == (out_size, out_size):
        out = img.copy()
    elif m[2, 0] != 0 or m[2, 1] != 0:
        out = cv2.warpPerspective(img, m, (out_size, out_size), flags=cv2.INTER_LINEAR,
                                  borderValue=(FILL, FILL, FILL))
    else:
        out = cv2.warpAffine(img, m[:2], (out_size, out_size), flags=cv2.INTER_LINEAR,
                             borderValue=(FILL, FILL, FILL))

    boxes = transform_boxes(sample.boxes, m)
    boxes = np.clip(boxes, 0, out_size) if len(boxes) else boxes
    keep = box_candidates(sample.boxes, boxes, gain=spec.scale)
    prov = {**getattr(sample, "provenance", _provenance(sample))}
    prov = {**prov, "ops": [*prov.get("ops", []), "affine"], "affine": spec.as_dict()}
    return AugmentedSample(out, boxes[keep], sample.classes[keep], sample.id, provenance=prov)


def letterbox(sample: Sample, size: int) -> AugmentedSample:
    """Resize so the long side equals ``size`` and pad to a square with gray."""
    h, w = sample.image.shape[:2]
    r = size / max(h, w)
    nw, nh = round(w * r), round(h * r)
    img = sample.image
    if (nw, nh) != (w, h):
        img = cv2.resize(img, (nw, nh), interpolation=cv2.INTER_LINEAR)
    top, left = (size - nh) // 2, (size - nw) // 2
    canvas = np.full((size, size, 3), FILL, dtype=np.uint8)
    canvas[top:top + nh, left:left + nw] = img
    boxes = sample.boxes * np.array([nw / w, nh / h, nw / w, nh / h]) + np.array([left, top, left, top])
    prov = _provenance(sample)
    prov["ops"] = ["letterbox"]
    return AugmentedSample(canvas, boxes, sample.classes.copy(), sample.id, provenance=prov)


def _resize_long_side(sample: Sample, size: int) -> Sample:
    h, w = sample.image.shape[:2]
    r = size / max(h, w)
    if r == 1:
        return sample
    nw, nh = max(1, round(w * r)), max(1, round(h * r))
    img = cv2.resize(sample.image, (nw, nh), interpolation=cv2.INTER_LINEAR)
    return Sample(img, sample.boxes * np.array([nw / w, nh / h, nw / w, nh / h]), sample.classes, sample.id)


def fliplr(sample: AugmentedSample) -> AugmentedSample:
    w = sample.image.shape[1]
    boxes = sample.boxes.copy()
    boxes[:, [0, 2]] = w - sample.boxes[:, [2, 0]]
    prov = {**sample.provenance, "ops": [*sample.provenance.get("ops", []), "fliplr"]}
    return AugmentedSample(np.ascontiguousarray(sample.image[:, ::-1]), boxes, sample.classes.copy(), sample.id, provenance=prov)


def flipud(sample: AugmentedSample) -> AugmentedSample:
    h = sample.image.shape[0]
    boxes = sample.boxes.copy()
    boxes[:, [1, 3]] = h - sample.boxes[:, [3, 1]]
    prov = {**sample.provenance, "ops": [*sample.provenance.get("ops", []), "flipud"]}
    return AugmentedSample(np.ascontiguousarray(sample.image[::-1]), boxes, sample.classes.copy(), sample.id, provenance=prov)


# ---------------------------------------------------------------------------
# photometric

def hsv_gains(fractions: tuple[float, float, float], rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-1, 1, 3) * np.asarray(fractions, dtype=np.float64) + 1.0


def apply_hsv(image: np.ndarray, gains) -> np.ndarray:
    """Shift hue by ``(gain_h - 1)`` of the hue wheel, scale S and V, clamp."""
    gh, gs, gv = (float(g) for g in gains)
    if gh == gs == gv == 1.0:
        return image.copy()
    hue, sat, val = cv2.split(cv2.cvtColor(image, cv2.COLOR_BGR2HSV))
    x = np.arange(256, dtype=np.float64)
    # OpenCV 8-bit hue spans 0..179
    lut_hue = ((x + round((gh - 1.0) * 180)) % 180).astype(np.uint8)
    lut_sat = np.clip(np.rint(x * gs), 0, 255).astype(np.uint8)
    lut_val = np.clip(np.rint(x * gv), 0, 255).astype(np.uint8)
    hsv = cv2.merge((cv2.LUT(hue, lut_hue), cv2.LUT(sat, lut_sat), cv2.LUT(val, lut_val)))
    return cv2.cvtColor(hsv, cv2.COLOR_HSV2BGR)


def hsv_jitter(image: np.ndarray, fractions: tuple[float, float, float], rng: np.random.Generator) -> np.ndarray:
    return apply_hsv(image, hsv_gains(fractions, rng))


# ---------------------------------------------------------------------------
# multi-image ops

def mosaic4(
    samples: Sequence[Sample], size: int, rng: np.random.Generator, center: tuple[int, int] | None = None
) -> AugmentedSample:
    """Tile four images around a random center on a ``2S x 2S`` gray canvas.

    Each image is first resized so its long side is ``S``; the part that
    falls outside its quadrant is cropped and boxes are clipped to what stays
    visible. Pass the result through :func:`apply_affine` with
    ``in_size=(2S, 2S)`` to obtain an ``S x S`` training image.
    """
    if len(samples) < 4:
        raise ValueError(f"mosaic needs 4 samples, got {len(samples)}")
    s2 = 2 * size
    if center is None:
        xc = int(rng.uniform(size / 2, 3 * size / 2))
        yc = int(rng.uniform(size / 2, 3 * size / 2))
    else:
        xc, yc = center
    canvas = np.full((s2, s2, 3), FILL, dtype=np.uint8)
    all_boxes, all_classes = [], []
    for i, sample in enumerate(samples[:4]):
        s = _resize_long_side(sample, size)
        h, w = s.image.shape[:2]
        if i == 0:
            x1a, y1a, x2a, y2a = max(xc - w, 0), max(yc - h, 0), xc, yc
            x1b, y1b = w - (x2a - x1a), h - (y2a - y1a)
        elif i == 1:
            x1a, y1a, x2a, y2a = xc, max(yc - h, 0), min(xc + w, s2), yc
            x1b, y1b = 0, h - (y2a - y1a)
        elif i == 2:
            x1a, y1a, x2a, y2a = max(xc - w, 0), yc, xc, min(s2, yc + h)
            x1b, y1b = w - (x2a - x1a), 0
        else:
            x1a, y1a, x2a, y2a = xc, yc, min(xc + w, s2), min(s2, yc + h)
            x1b, y1b = 0, 0
        x2b, y2b = x1b + (x2a - x1a), y1b + (y2a - y1a)
        canvas[y1a:y2a, x1a:x2a] = s.image[y1b:y2b, x1b:x2b]
        if len(s.boxes):
            b = s.boxes + np.array([x1a - x1b, y1a - y1b] * 2)
            b[:, [0, 2]] = np.clip(b[:, [0, 2]], x1a, x2a)
            b[:, [1, 3]] = np.clip(b[:, [1, 3]], y1a, y2a)
            ok = (b[:, 2] - b[:, 0] >= MIN_BOX_SIDE) & (b[:, 3] - b[:, 1] >= MIN_BOX_SIDE)
            all_boxes.append(b[ok])
            all_classes.append(s.classes[ok])
    boxes = np.concatenate(all_boxes) if all_boxes else np.zeros((0, 4))
    classes = np.concatenate(all_classes) if all_classes else np.zeros(0, dtype=int)
    prov = _provenance(*samples[:4])
    prov.update(ops=["mosaic"], mosaic_center=[int(xc), int(yc)])
    return AugmentedSample(canvas, boxes, classes, "+".join(s.id for s in samples[:4]), provenance=prov)


def mixup(a: AugmentedSample, b: AugmentedSample, rng: np.random.Generator) -> AugmentedSample:
    """Blend ``lam * a + (1 - lam) * b`` with ``lam ~ Beta(8, 8)``; keep both box lists."""
    if a.image.shape != b.image.shape:
        raise ValueError(f"mixup needs equal image shapes, got {a.image.shape} and {b.image.shape}")
    lam = float(rng.beta(MIXUP_ALPHA, MIXUP_ALPHA))
    blend = lam * a.image.astype(np.float64) + (1.0 - lam) * b.image.astype(np.float64)
    img = np.clip(np.rint(blend), 0, 255).astype(np.uint8)
    prov = {
        **a.provenance,
        "source_ids": [*a.provenance.get("source_ids", [a.id]), *b.provenance.get("source_ids", [b.id])],
        "ops": [*a.provenance.get("ops", []), "mixup"],
        "mixup_lambda": lam,
        "mixup_partner": b.provenance,
    }
    return AugmentedSample(
        img, np.concatenate([a.boxes, b.boxes]), np.concatenate([a.classes, b.classes]), a.id, provenance=prov
    )


@dataclass
class Donor:
    patch: np.ndarray
    cls: int
    source_id: str = ""


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def donors_from(sample: Sample) -> list[Donor]:
    out = []
    h, w = sample.image.shape[:2]
    for box, cls in zip(sample.boxes, sample.classes):
        x0, y0 = max(0, int(math.floor(box[0]))), max(0, int(math.floor(box[1])))
        x1, y1 = min(w, int(math.ceil(box[2]))), min(h, int(math.ceil(box[3])))
        if x1 - x0 >= MIN_BOX_SIDE and y1 - y0 >= MIN_BOX_SIDE:
            out.append(Donor(sample.image[y0:y1, x0:x1].copy(), int(cls), sample.id))
    return out


def paste_in(
    dst: AugmentedSample, donors: Sequence[Donor], p: float, rng: np.random.Generator,
    iou_max: float = PASTE_IOU_MAX, tries: int = PASTE_TRIES,
) -> AugmentedSample:
    """Paste each donor with probability ``p`` where it overlaps every
    existing box with IoU below ``iou_max``; unplaceable donors are skipped."""
    img = dst.image.copy()
    boxes, classes = dst.boxes.copy(), dst.classes.copy()
    h, w = img.shape[:2]
    pasted = []
    for donor in donors:
        if not rng.random() < p:
            continue
        ph, pw = donor.patch.shape[:2]
        if ph > h or pw > w or ph < MIN_BOX_SIDE or pw < MIN_BOX_SIDE:
            continue
        for _ in range(tries):
            x = int(rng.integers(0, w - pw + 1))
            y = int(rng.integers(0, h - ph + 1))
            cand = np.array([[x, y, x + pw, y + ph]], dtype=np.float64)
            if len(boxes) == 0 or box_iou_matrix(cand, boxes).max() < iou_max:
                img[y:y + ph, x:x + pw] = donor.patch
                boxes = np.concatenate([boxes, cand])
                classes = np.append(classes, donor.cls)
                pasted.append({"source_id": donor.source_id, "box": cand[0].tolist(), "class": donor.cls})
                break
    prov = {**dst.provenance, "ops": [*dst.provenance.get("ops", []), "paste_in"], "pasted": pasted}
    return AugmentedSample(img, boxes, classes, dst.id, provenance=prov)


# ---------------------------------------------------------------------------
# pipeline

def _base_draw(cfg: AugmentConfig, sources: Sequence[Sample], rng: np.random.Generator, size: int) -> AugmentedSample:
    if rng.random() < cfg.mosaic:
        picks = rng.integers(0, len(sources), size=4)
        base = mosaic4([sources[i] for i in picks], size, rng)
        in_size = (2 * size, 2 * size)
    else:
        base = letterbox(sources[int(rng.integers(0, len(sources)))], size)
        in_size = (size, size)
    out = apply_affine(base, sample_affine(cfg, rng, size, in_size), size)
    gains = hsv_gains((cfg.hsv_h, cfg.hsv_s, cfg.hsv_v), rng)
    out.image = apply_hsv(out.image, gains)
    out.provenance["ops"].append("hsv")
    out.provenance["hsv_gains"] = gains.tolist()
    if rng.random() < cfg.flipud:
        out = flipud(out)
    if rng.random() < cfg.fliplr:
        out = fliplr(out)
    return out


def pipeline(
    cfg: AugmentConfig, sources: Sequence[Sample], rng: np.random.Generator, size: int = 640
) -> AugmentedSample:
    """Produce one ``size x size`` training sample from ``sources``."""
    if not sources:
        raise ValueError("no source samples")
    out = _base_draw(cfg, sources, rng, size)
    if rng.random() < cfg.mixup:
        out = mixup(out, _base_draw(cfg, sources, rng, size), rng)
    p = cfg.paste_probability
    if p > 0:
        donor_src = sources[int(rng.integers(0, len(sources)))]
        out = paste_in(out, donors_from(_resize_long_side(donor_src, size)), p, rng)
    out.provenance["order"] = list(OP_ORDER)
    out.provenance["config"] = cfg.as_dict()
    return out


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per sample so batches can be built in any order."""
    return np.random.default_rng([int(seed), int(index)])


def generate(
    cfg: AugmentConfig, sources: Sequence[Sample], seed: int, n: int, size: int = 640, jobs: int = 1
) -> list[AugmentedSample]:
    def one(i):
        s = pipeline(cfg, sources, sample_rng(seed, i), size)
        s.provenance["index"] = i
        return s

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, range(n)))
    return [one(i) for i in range(n)]
