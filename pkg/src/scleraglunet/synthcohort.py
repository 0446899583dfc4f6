"""Synthetic multiview scleral cohort with class- and glucose-dependent
vascular morphology, plus manifest read/write.

Vascular parameters are monotone functions of fasting plasma glucose, so
the rendered images carry a learnable signal and the generator's own truth
masks serve as an oracle.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidParam, IoFailure, ManifestSchemaError
from .imgproc import RasterImage

VIEWS = ("straight", "up", "down", "left", "right")
CLASS_NAMES = ("normal", "controlled", "high_glucose")
CLASS_FPG = {  # class index -> (mean, sd) mg/dL
    0: (92.4, 8.1),
    1: (133.8, 14.7),
    2: (204.9, 28.6),
}
FPG_BOUNDS = (50.0, 400.0)
RENDER_SIZE = 256
ROI_RECT = (32, 32, 192, 192)  # x, y, w, h inside the render
GENERATOR_VERSION = "synthcohort-1"

MANIFEST_HEADER = ["participant_id", "class_label", "fpg_mgdl", "view",
                   "image_path", "roi_x", "roi_y", "roi_w", "roi_h"]
TRUTH_HEADER = ["participant_id", "vessel_count", "tortuosity_px",
                "caliber_mean_px", "caliber_var_px2"]

# which other views a vessel is partially visible in, keyed by home view
ADJACENT = {
    "straight": ("up", "down"),
    "up": ("straight", "left"),
    "down": ("straight", "right"),
    "left": ("up", "straight"),
    "right": ("down", "straight"),
}
PARTIAL_VISIBILITY = 0.45  # fraction of path length drawn in adjacent views


@dataclass(frozen=True)
class VascularTruth:
    vessel_count: int
    tortuosity_px: float
    caliber_mean_px: float
    caliber_var_px2: float


@dataclass(frozen=True)
class ParticipantRecord:
    participant_id: str
    class_index: int  # 0 normal, 1 controlled, 2 high_glucose
    fpg: float
    truth: VascularTruth
    view_images: dict  # view -> (image_path, (roi_x, roi_y, roi_w, roi_h))

    def __post_init__(self):
        if set(self.view_images) != set(VIEWS):
            raise ManifestSchemaError(
                f"{self.participant_id}: views must be exactly {VIEWS}")
        if self.fpg <= 0:
            raise ManifestSchemaError(f"{self.participant_id}: fpg must be positive")


@dataclass(frozen=True)
class CohortManifest:
    records: tuple
    seed: int
    generator_version: str = GENERATOR_VERSION

    def __post_init__(self):
        ids = [r.participant_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ManifestSchemaError("participant ids must be unique")


def _participant_rng(seed: int, index: int, stream: int):
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(index, stream)))


def _truncated_normal(rng, mean: float, sd: float, lo: float, hi: float) -> float:
    while True:
        v = rng.normal(mean, sd)
        if lo < v < hi:
            return float(v)


def vascular_params(fpg: float, rng) -> VascularTruth:
    """Monotone glucose -> morphology map with seeded jitter."""
    count = int(round(8.0 + 0.12 * (fpg - 80.0) + rng.normal(0.0, 0.35)))
    count = max(count, 3)
    tort = max(0.5 + 0.02 * (fpg - 80.0) + rng.normal(0.0, 0.08), 0.1)
    caliber_mean = 4.0 + 0.01 * (fpg - 80.0) + rng.normal(0.0, 0.15)
    caliber_var = max(0.1 + 0.01 * (fpg - 80.0) + rng.normal(0.0, 0.03), 0.05)
    return VascularTruth(vessel_count=count, tortuosity_px=float(tort),
                         caliber_mean_px=float(caliber_mean),
                         caliber_var_px2=float(caliber_var))


def sample_cohort(counts, seed: int, image_dir: str = "images") -> CohortManifest:
    """Draw a cohort with per-class sizes `counts` (normal, controlled, high)."""
    if len(counts) != 3 or any(c < 1 for c in counts):
        raise InvalidParam("need three per-class counts, each >= 1")
    records = []
    index = 0
    for cls, n in enumerate(counts):
        mean, sd = CLASS_FPG[cls]
        for _ in range(n):
            pid = f"P{index:04d}"
            rng = _participant_rng(seed, index, 0)
            fpg = _truncated_normal(rng, mean, sd, *FPG_BOUNDS)
            truth = vascular_params(fpg, rng)
            views = {v: (os.path.join(image_dir, f"{pid}_{v}.pgm"), ROI_RECT)
                     for v in VIEWS}
            records.append(ParticipantRecord(
                participant_id=pid, class_index=cls, fpg=fpg,
                truth=truth, view_images=views))
            index += 1
    records.sort(key=lambda r: r.participant_id)
    return CohortManifest(records=tuple(records), seed=seed)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _vessel_path(rng, tortuosity: float, size: int) -> np.ndarray:
    """Random-walk spline across the canvas, tortuosity sets the wiggle."""
    angle = rng.uniform(0.0, 2.0 * np.pi)
    length = rng.uniform(0.5, 0.6) * size
    # place the midpoint so both endpoints stay well inside the ROI
    margin = 0.14 * size
    hx = abs(np.cos(angle)) * length / 2.0 + margin
    hy = abs(np.sin(angle)) * length / 2.0 + margin
    cx = rng.uniform(hx, size - hx)
    cy = rng.uniform(hy, size - hy)
    x0 = cx - np.cos(angle) * length / 2.0
    y0 = cy - np.sin(angle) * length / 2.0
    steps = max(int(length), 8)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    freq = rng.uniform(2.0, 4.0)
    t = np.linspace(0.0, 1.0, steps)
    along = t * length
    across = tortuosity * 4.0 * np.sin(2.0 * np.pi * freq * t + phase)
    ca, sa = np.cos(angle), np.sin(angle)
    xs = x0 + along * ca - across * sa
    ys = y0 + along * sa + across * ca
    return np.stack([xs, ys], axis=1)


def _stamp_vessel(canvas: np.ndarray, mask: np.ndarray, path: np.ndarray,
                  radius: float, depth: float):
    """Darken disks along the path; also marks the truth mask."""
    size = canvas.shape[0]
    r = max(int(np.ceil(radius)), 1)
    offs = np.arange(-r, r + 1)
    oy, ox = np.meshgrid(offs, offs, indexing="ij")
    disk = (oy ** 2 + ox ** 2) <= radius ** 2
    oy, ox = oy[disk], ox[disk]
    for x, y in path:
        cx, cy = int(round(x)), int(round(y))
        ys = cy + oy
        xs = cx + ox
        keep = (ys >= 0) & (ys < size) & (xs >= 0) & (xs < size)
        canvas[ys[keep], xs[keep]] = np.maximum(canvas[ys[keep], xs[keep]], depth)
        mask[ys[keep], xs[keep]] = True


def render_views(record: ParticipantRecord, seed: int, index: int | None = None):
    """Render the five gaze views. Returns (images, truth_masks), both keyed
    by view name; deterministic given (record, seed).
    """
    if index is None:
        index = int(record.participant_id.lstrip("P"))
    rng = _participant_rng(seed, index, 1)
    size = RENDER_SIZE
    truth = record.truth

    # vessel geometry is shared across views; each vessel has a home view
    vessels = []
    for _ in range(truth.vessel_count):
        home = VIEWS[rng.integers(0, len(VIEWS))]
        path = _vessel_path(rng, truth.tortuosity_px, size)
        radius = max(rng.normal(truth.caliber_mean_px,
                                np.sqrt(truth.caliber_var_px2)), 1.0) / 2.0
        depth = rng.uniform(0.45, 0.55)
        vessels.append((home, path, radius, depth))

    images = {}
    masks = {}
    for view in VIEWS:
        # smooth illumination gradient over a bright scleral background
        gx = rng.uniform(-0.06, 0.06)
        gy = rng.uniform(-0.06, 0.06)
        base = rng.uniform(0.72, 0.8)
        yy, xx = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size),
                             indexing="ij")
        bg = base + gx * xx + gy * yy

        dark = np.zeros((size, size))
        mask = np.zeros((size, size), dtype=bool)
        for home, path, radius, depth in vessels:
            if home == view:
                segment = path
            elif view in ADJACENT[home]:
                n = max(int(len(path) * PARTIAL_VISIBILITY), 4)
                segment = path[:n]
            else:
                continue
            _stamp_vessel(dark, mask, segment, radius, depth)
        img = bg - dark * bg

        # sparse specular highlights
        for _ in range(rng.integers(1, 4)):
            hx = rng.integers(8, size - 8)
            hy = rng.integers(8, size - 8)
            hr = rng.integers(2, 4)
            img[hy - hr:hy + hr, hx - hr:hx + hr] = 1.0

        img = img + rng.normal(0.0, 0.02, size=(size, size))
        images[view] = np.clip(img, 0.0, 1.0)
        masks[view] = mask
    return images, masks


def render_rasters(record: ParticipantRecord, seed: int):
    images, _ = render_views(record, seed)
    out = {}
    for view, arr in images.items():
        q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
        out[view] = RasterImage(width=RENDER_SIZE, height=RENDER_SIZE,
                                channels=1, data=q[:, :, None])
    return out


# ---------------------------------------------------------------------------
# Manifest I/O
# ---------------------------------------------------------------------------

def write_manifest(manifest: CohortManifest, directory) -> None:
    try:
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "manifest.csv"), "w", newline="",
                  encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(MANIFEST_HEADER)
            for rec in manifest.records:
                for view in VIEWS:
                    path, roi = rec.view_images[view]
                    writer.writerow([rec.participant_id, CLASS_NAMES[rec.class_index],
                                     repr(rec.fpg), view, path, *roi])
        with open(os.path.join(directory, "truth.csv"), "w", newline="",
                  encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRUTH_HEADER)
            for rec in manifest.records:
                t = rec.truth
                writer.writerow([rec.participant_id, t.vessel_count,
                                 repr(t.tortuosity_px), repr(t.caliber_mean_px),
                                 repr(t.caliber_var_px2)])
        with open(os.path.join(directory, "meta.csv"), "w", newline="",
                  encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["seed", "generator_version"])
            writer.writerow([manifest.seed, manifest.generator_version])
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_manifest(directory) -> CohortManifest:
    """Read a manifest; records come back sorted by participant_id."""
    path = os.path.join(directory, "manifest.csv")
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        with open(os.path.join(directory, "truth.csv"), newline="",
                  encoding="utf-8") as fh:
            truth_rows = list(csv.reader(fh))
        meta_path = os.path.join(directory, "meta.csv")
        seed = 0
        version = GENERATOR_VERSION
        if os.path.exists(meta_path):
            with open(meta_path, newline="", encoding="utf-8") as fh:
                meta = list(csv.reader(fh))
            seed = int(meta[1][0])
            version = meta[1][1]
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if not rows or rows[0] != MANIFEST_HEADER:
        raise ManifestSchemaError(f"bad manifest header in {path}")
    if not truth_rows or truth_rows[0] != TRUTH_HEADER:
        raise ManifestSchemaError("bad truth header")

    truths = {}
    for row in truth_rows[1:]:
        truths[row[0]] = VascularTruth(
            vessel_count=int(row[1]), tortuosity_px=float(row[2]),
            caliber_mean_px=float(row[3]), caliber_var_px2=float(row[4]))

    grouped: dict = {}
    for row in rows[1:]:
        if len(row) != len(MANIFEST_HEADER):
            raise ManifestSchemaError(f"wrong column count: {row}")
        pid, label, fpg, view, img, rx, ry, rw, rh = row
        if label not in CLASS_NAMES:
            raise ManifestSchemaError(f"unknown class label {label!r}")
        if view not in VIEWS:
            raise ManifestSchemaError(f"unknown view {view!r}")
        entry = grouped.setdefault(pid, {"label": label, "fpg": float(fpg), "views": {}})
        if view in entry["views"]:
            raise ManifestSchemaError(f"duplicate view {view} for {pid}")
        entry["views"][view] = (img, (int(rx), int(ry), int(rw), int(rh)))

    records = []
    for pid in sorted(grouped):
        entry = grouped[pid]
        if set(entry["views"]) != set(VIEWS):
            raise ManifestSchemaError(f"{pid}: expected 5 views, got {sorted(entry['views'])}")
        if pid not in truths:
            raise ManifestSchemaError(f"{pid}: missing truth row")
        records.append(ParticipantRecord(
            participant_id=pid, class_index=CLASS_NAMES.index(entry["label"]),
            fpg=entry["fpg"], truth=truths[pid], view_images=entry["views"]))
    return CohortManifest(records=tuple(records), seed=seed, generator_version=version)
