"""Road-damage annotations: label I/O, box frames, filtering, cropping, splitting.

Label files hold one box per line, ``<class> <cx> <cy> <w> <h>``, with the
box expressed as fractions of the image size. Pixel conversions always use the
owning image's own width and height.

Dataset layout on disk::

    <root>/<folder>/images/<id>.jpg|png
    <root>/<folder>/labels/<id>.txt
"""
from __future__ import annotations

import csv
import enum
import io
import json
import logging
import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)

NORM_SLACK = 1e-6
NORWAY_SIDE = 1824
MIN_CROPPED_SIDE = 1.0
VAL_FRACTION = 0.10
TRAIN_ONLY_FOLDERS = frozenset({"China_Drone"})
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")

# (widths, heights) observed per source folder
FOLDER_SIZES: dict[str, tuple[frozenset[int], frozenset[int]]] = {
    "China_Drone": (frozenset({512}), frozenset({512})),
    "China_MotorBike": (frozenset({512}), frozenset({512})),
    "Czech": (frozenset({600}), frozenset({600})),
    "India": (frozenset({720}), frozenset({720})),
    "Japan": (frozenset({600, 1024, 1080, 540}), frozenset({600, 1024, 1080, 540})),
    "Norway": (frozenset({4040, 3650, 3643}), frozenset({2041, 2035, 2044})),
    "United_States": (frozenset({640}), frozenset({640})),
    "Norway1": (frozenset({NORWAY_SIDE}), frozenset({NORWAY_SIDE})),
}


class DamageClass(enum.IntEnum):
    D00 = 0  # longitudinal crack
    D10 = 1  # transverse crack
    D20 = 2  # alligator crack
    D40 = 3  # pothole

    @property
    def code(self) -> str:
        return self.name

    @classmethod
    def from_code(cls, code: str) -> "DamageClass":
        try:
            return cls[code]
        except KeyError:
            raise ValueError(f"unknown damage class {code!r}") from None


class LabelError(ValueError):
    """A label line could not be parsed or validated."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class ClassRangeError(LabelError):
    pass


@dataclass(frozen=True)
class NormBox:
    """Center/size box in fractions of the image dimensions."""

    cx: float
    cy: float
    w: float
    h: float

    def validate(self) -> None:
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"non-positive size in {self}")
        lo, hi = -NORM_SLACK, 1.0 + NORM_SLACK
        for v in (self.cx - self.w / 2, self.cx + self.w / 2, self.cy - self.h / 2, self.cy + self.h / 2):
            if not lo <= v <= hi:
                raise ValueError(f"box extends outside the image: {self}")


@dataclass(frozen=True)
class PixelBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return max(0.0, self.width) * max(0.0, self.height)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def validate(self, dims: tuple[int, int] | None = None) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")
        if dims is not None:
            w, h = dims
            if self.x_min < 0 or self.y_min < 0 or self.x_max > w or self.y_max > h:
                raise ValueError(f"{self} outside a {w}x{h} image")


class Annotation(NamedTuple):
    cls: DamageClass
    box: NormBox


@dataclass(frozen=True)
class ImageRecord:
    id: str
    folder: str
    width: int
    height: int
    annotations: tuple[Annotation, ...] = ()
    discarded: int = 0  # boxes of classes outside the four in scope

    @property
    def dims(self) -> tuple[int, int]:
        return (self.width, self.height)

    def dims_match_folder(self) -> bool:
        if self.folder not in FOLDER_SIZES:
            return True
        widths, heights = FOLDER_SIZES[self.folder]
        return self.width in widths and self.height in heights

    def pixel_boxes(self) -> list[tuple[DamageClass, PixelBox]]:
        return [(a.cls, to_pixels(a.box, self.dims)) for a in self.annotations]


@dataclass(frozen=True)
class SplitPlan:
    target_folder: str
    val_ids: frozenset[str]
    train_ids: frozenset[str]
    seed: int

    def as_dict(self) -> dict:
        return {
            "target_folder": self.target_folder,
            "seed": self.seed,
            "val_ids": sorted(self.val_ids),
            "train_ids": sorted(self.train_ids),
        }


# ---------------------------------------------------------------------------
# label files

def parse_label_file(
    text: str, image_dims: tuple[int, int] | None = None, *, on_unknown_class: str = "raise"
) -> list[Annotation]:
    """Parse label-file text into validated annotations.

    ``on_unknown_class`` is ``"raise"`` (default) or ``"discard"``; discarded
    lines are silently skipped so callers can count them.
    """
    if on_unknown_class not in ("raise", "discard"):
        raise ValueError("on_unknown_class must be 'raise' or 'discard'")
    out = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 5:
            raise LabelError(line_no, f"expected 5 fields, found {len(parts)}")
        try:
            cls_idx = int(parts[0])
            cx, cy, w, h = (float(v) for v in parts[1:])
        except ValueError:
            raise LabelError(line_no, f"non-numeric field in {line.strip()!r}") from None
        if not 0 <= cls_idx < len(DamageClass):
            if on_unknown_class == "discard":
                continue
            raise ClassRangeError(line_no, f"class index {cls_idx} outside 0..{len(DamageClass) - 1}")
        box = NormBox(cx, cy, w, h)
        try:
            box.validate()
            if image_dims is not None:
                to_pixels(box, image_dims).validate()
        except ValueError as exc:
            raise LabelError(line_no, str(exc)) from None
        out.append(Annotation(DamageClass(cls_idx), box))
    return out


def count_label_lines(text: str) -> int:
    return sum(1 for line in text.splitlines() if line.strip())


def format_label_file(annotations: Iterable[Annotation]) -> str:
    return "".join(
        f"{int(a.cls)} {a.box.cx:.6f} {a.box.cy:.6f} {a.box.w:.6f} {a.box.h:.6f}\n" for a in annotations
    )


def to_pixels(b: NormBox, dims: tuple[int, int]) -> PixelBox:
    w, h = dims
    return PixelBox(
        (b.cx - b.w / 2) * w,
        (b.cy - b.h / 2) * h,
        (b.cx + b.w / 2) * w,
        (b.cy + b.h / 2) * h,
    )


def to_normalized(b: PixelBox, dims: tuple[int, int]) -> NormBox:
    w, h = dims
    return NormBox(
        (b.x_min + b.x_max) / 2 / w,
        (b.y_min + b.y_max) / 2 / h,
        (b.x_max - b.x_min) / w,
        (b.y_max - b.y_min) / h,
    )


# ---------------------------------------------------------------------------
# record-level operations

def filter_usable(records: Iterable[ImageRecord]) -> tuple[list[ImageRecord], list[ImageRecord]]:
    """Split records into those with at least one in-scope box and the rest."""
    usable, unusable = [], []
    for rec in records:
        (usable if rec.annotations else unusable).append(rec)
    return usable, unusable


@dataclass
class CropCounts:
    kept: int = 0
    clipped: int = 0
    dropped: int = 0

    @property
    def total(self) -> int:
        return self.kept + self.clipped + self.dropped

    def __add__(self, other: "CropCounts") -> "CropCounts":
        return CropCounts(self.kept + other.kept, self.clipped + other.clipped, self.dropped + other.dropped)

    def as_dict(self) -> dict:
        return {"kept": self.kept, "clipped": self.clipped, "dropped": self.dropped, "total": self.total}


def crop_boxes(
    boxes: Sequence[tuple[DamageClass, PixelBox]], region: PixelBox, min_side: float = MIN_CROPPED_SIDE
) -> tuple[list[tuple[DamageClass, PixelBox]], CropCounts]:
    """Intersect boxes with ``region`` and express them relative to its origin."""
    counts = CropCounts()
    out = []
    for cls, b in boxes:
        x0, y0 = max(b.x_min, region.x_min), max(b.y_min, region.y_min)
        x1, y1 = min(b.x_max, region.x_max), min(b.y_max, region.y_max)
        if x1 - x0 < min_side or y1 - y0 < min_side:
            counts.dropped += 1
            continue
        inside = (x0, y0, x1, y1) == b.as_tuple()
        if inside:
            counts.kept += 1
        else:
            counts.clipped += 1
        out.append((cls, PixelBox(x0 - region.x_min, y0 - region.y_min, x1 - region.x_min, y1 - region.y_min)))
    return out, counts


def norway_crop(
    rec: ImageRecord, image: np.ndarray | None = None, region_side: int = NORWAY_SIDE, folder: str = "Norway1"
) -> tuple[ImageRecord, np.ndarray | None, CropCounts]:
    """Keep the ``region_side`` square at the lower-left corner of the image.

    With a top-left pixel origin the region is ``x in [0, side)`` and
    ``y in [H - side, H)``. Boxes are clipped to the region and shifted up by
    ``H - side``; anything left narrower or shorter than one pixel is dropped.
    """
    if rec.width < region_side or rec.height < region_side:
        raise ValueError(f"{rec.id}: {rec.width}x{rec.height} image is smaller than the {region_side}px crop")
    top = rec.height - region_side
    region = PixelBox(0, top, region_side, rec.height)
    boxes, counts = crop_boxes(rec.pixel_boxes(), region)
    side = (region_side, region_side)
    new_rec = replace(
        rec,
        folder=folder,
        width=region_side,
        height=region_side,
        annotations=tuple(Annotation(cls, to_normalized(b, side)) for cls, b in boxes),
    )
    cropped = None
    if image is not None:
        if image.shape[0] != rec.height or image.shape[1] != rec.width:
            raise ValueError(f"{rec.id}: image is {image.shape[1]}x{image.shape[0]}, record says {rec.width}x{rec.height}")
        cropped = np.ascontiguousarray(image[top:, :region_side])
    return new_rec, cropped, counts


def _fisher_yates(ids: Sequence[str], seed: int) -> list[str]:
    out = sorted(ids)
    rng = random.Random(seed)
    for i in range(len(out) - 1, 0, -1):
        j = rng.randrange(i + 1)
        out[i], out[j] = out[j], out[i]
    return out


def split_train_val(folders: Mapping[str, Iterable[str]], target: str, seed: int = 0) -> SplitPlan:
    """Validation = 10% (floor) of the target folder; train = everything else.

    Folders without a test set (China_Drone) are always train-only and cannot
    be a target.
    """
    folders = {name: list(ids) for name, ids in folders.items()}
    if target not in folders:
        raise KeyError(f"unknown target folder {target!r}")
    if target in TRAIN_ONLY_FOLDERS:
        raise ValueError(f"{target} has no test set and is always train-only")
    seen: dict[str, str] = {}
    for name, ids in folders.items():
        for i in ids:
            if i in seen:
                raise ValueError(f"image id {i!r} appears in both {seen[i]} and {name}")
            seen[i] = name
    target_ids = folders[target]
    if len(target_ids) < 10:
        raise ValueError(f"{target} has {len(target_ids)} usable images; at least 10 are needed")
    n_val = math.floor(len(target_ids) * VAL_FRACTION)
    shuffled = _fisher_yates(target_ids, seed)
    val = frozenset(shuffled[:n_val])
    train = frozenset(shuffled[n_val:]).union(*(ids for name, ids in folders.items() if name != target))
    return SplitPlan(target, val, train, seed)


def stats(records: Iterable[ImageRecord]) -> dict:
    """Per-folder image, usable-image and per-class box counts plus totals."""
    classes = [c.code for c in DamageClass]

    def empty():
        return {"images": 0, "usable": 0, "discarded_boxes": 0, "boxes": {c: 0 for c in classes}}

    per_folder: dict[str, dict] = {}
    total = empty()
    for rec in records:
        entry = per_folder.setdefault(rec.folder, empty())
        for bucket in (entry, total):
            bucket["images"] += 1
            bucket["usable"] += bool(rec.annotations)
            bucket["discarded_boxes"] += rec.discarded
            for a in rec.annotations:
                bucket["boxes"][a.cls.code] += 1
    return {"folders": dict(sorted(per_folder.items())), "total": total}


def stats_csv(report: dict) -> str:
    classes = [c.code for c in DamageClass]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["folder", "images", "usable", *classes, "discarded_boxes"])
    rows = list(report["folders"].items()) + [("TOTAL", report["total"])]
    for name, e in rows:
        writer.writerow([name, e["images"], e["usable"], *(e["boxes"][c] for c in classes), e["discarded_boxes"]])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# dataset directory

def image_size(path: Path) -> tuple[int, int]:
    from PIL import Image

    with Image.open(path) as im:
        return im.size


def _find_images(folder_dir: Path) -> list[Path]:
    img_dir = folder_dir / "images"
    if not img_dir.is_dir():
        return []
    return sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_record(image_path: Path, folder: str, dims: tuple[int, int] | None = None) -> ImageRecord:
    dims = dims or image_size(image_path)
    label_path = image_path.parent.parent / "labels" / f"{image_path.stem}.txt"
    text = label_path.read_text() if label_path.exists() else ""
    try:
        anns = parse_label_file(text, dims, on_unknown_class="discard")
    except LabelError as exc:
        raise LabelError(exc.line_no, f"{label_path}: {exc}") from None
    discarded = count_label_lines(text) - len(anns)
    rec = ImageRecord(image_path.stem, folder, dims[0], dims[1], tuple(anns), discarded)
    if not rec.dims_match_folder():
        log.warning("%s/%s is %dx%d, not a size listed for that folder", folder, rec.id, *dims)
    return rec


def load_dataset(root, folders: Sequence[str] | None = None, jobs: int = 1) -> list[ImageRecord]:
    """Read every image record under ``root``; result is ordered by (folder, id)."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    names = folders or sorted(p.name for p in root.iterdir() if (p / "images").is_dir())
    cache = _read_index(root)
    tasks = [(path, name) for name in names for path in _find_images(root / name)]

    def work(task):
        path, name = task
        cached = cache.get(f"{name}/{path.stem}")
        return load_record(path, name, tuple(cached["dims"]) if cached else None)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(work, tasks))
    else:
        records = [work(t) for t in tasks]
    return sorted(records, key=lambda r: (r.folder, r.id))


INDEX_NAME = "index.json"


def _read_index(root: Path) -> dict:
    path = root / INDEX_NAME
    if not path.exists():
        return {}
    try:
        return {f"{e['folder']}/{e['id']}": e for e in json.loads(path.read_text())["images"]}
    except (KeyError, ValueError, TypeError):
        log.warning("ignoring malformed index %s", path)
        return {}


def write_index(root, records: Sequence[ImageRecord]) -> Path:
    """Cache image dimensions and box counts in ``<root>/index.json``."""
    path = Path(root) / INDEX_NAME
    doc = {
        "images": [
            {"folder": r.folder, "id": r.id, "dims": [r.width, r.height],
             "boxes": len(r.annotations), "discarded": r.discarded}
            for r in records
        ]
    }
    path.write_text(json.dumps(doc, indent=1))
    return path


def write_record(root, rec: ImageRecord, image: np.ndarray | None = None, suffix: str = ".jpg") -> None:
    base = Path(root) / rec.folder
    (base / "labels").mkdir(parents=True, exist_ok=True)
    (base / "labels" / f"{rec.id}.txt").write_text(format_label_file(rec.annotations))
    if image is not None:
        import cv2

        (base / "images").mkdir(parents=True, exist_ok=True)
        cv2.imwrite(str(base / "images" / f"{rec.id}{suffix}"), image)


def usable_ids_by_folder(records: Iterable[ImageRecord]) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for rec in records:
        out.setdefault(rec.folder, [])
        if rec.annotations:
            out[rec.folder].append(rec.id)
    return out
