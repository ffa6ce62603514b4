import os
import time
from pathlib import Path

import numpy as np
import pytest

from rdd.dataset import Annotation, DamageClass, ImageRecord, NormBox, to_normalized, PixelBox, write_record

DATA_ENV = "RDD_DATA_ROOT"


def real_data_root() -> Path | None:
    root = os.environ.get(DATA_ENV)
    return Path(root) if root and Path(root).is_dir() else None


def make_record(rid, folder, dims, pixel_boxes, discarded=0):
    anns = tuple(Annotation(DamageClass(c), to_normalized(PixelBox(*b), dims)) for c, b in pixel_boxes)
    return ImageRecord(rid, folder, dims[0], dims[1], anns, discarded)


def textured_image(w, h, seed=0):
    rng = np.random.default_rng(seed)
    base = rng.integers(0, 256, size=(h // 8 + 1, w // 8 + 1, 3), dtype=np.uint8)
    return np.ascontiguousarray(np.repeat(np.repeat(base, 8, axis=0), 8, axis=1)[:h, :w])


def write_dataset(root: Path, spec: dict[str, tuple[tuple[int, int], int, int]], seed=0):
    """spec: folder -> (dims, n_usable, n_empty). Images are written as PNG."""
    rng = np.random.default_rng(seed)
    records = []
    for folder, (dims, n_usable, n_empty) in spec.items():
        for i in range(n_usable + n_empty):
            boxes = []
            if i < n_usable:
                for _ in range(int(rng.integers(1, 4))):
                    w, h = rng.uniform(0.05, 0.3, size=2)
                    cx, cy = rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2)
                    boxes.append(Annotation(DamageClass(int(rng.integers(4))), NormBox(cx, cy, w, h)))
            rec = ImageRecord(f"{folder}_{i:04d}", folder, dims[0], dims[1], tuple(boxes))
            write_record(root, rec, textured_image(*dims, seed=i), suffix=".png")
            records.append(rec)
    return records


SIX_FOLDERS = {
    "China_Drone": ((512, 512), 12, 2),
    "China_MotorBike": ((512, 512), 15, 1),
    "Czech": ((600, 600), 20, 3),
    "India": ((720, 720), 11, 0),
    "Japan": ((600, 600), 25, 4),
    "United_States": ((640, 640), 30, 5),
}


@pytest.fixture
def six_folder_ids():
    """Folder -> usable ids for a synthetic six-folder corpus."""
    return {f: [f"{f}_{i:04d}" for i in range(n)] for f, (_, n, _) in SIX_FOLDERS.items()}


@pytest.fixture
def small_dataset(tmp_path):
    root = tmp_path / "data"
    spec = {"Czech": ((96, 96), 6, 2), "United_States": ((80, 64), 5, 1)}
    records = write_dataset(root, spec)
    return root, records


# ---------------------------------------------------------------------------
# acceptance reporting: one line per criterion in the terminal summary, plus
# the whole-suite runtime limit

SUITE_LIMIT_S = 120.0
ACCEPTANCE: dict[str, tuple[bool, str, float]] = {}


def pytest_sessionstart(session):
    session.config._rdd_t0 = time.perf_counter()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    elapsed = time.perf_counter() - config._rdd_t0
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        ok, title, secs = ACCEPTANCE[key]
        tr.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {key}: {title} ({secs:.2f}s)")
    ok = elapsed < SUITE_LIMIT_S
    tr.write_line(f"{'PASS' if ok else 'FAIL'}  full test session runtime {elapsed:.1f}s (limit {SUITE_LIMIT_S:.0f}s)")


def pytest_sessionfinish(session, exitstatus):
    if time.perf_counter() - session.config._rdd_t0 >= SUITE_LIMIT_S and exitstatus == 0:
        session.exitstatus = 1
