"""Deterministic synthetic fetal-ultrasound phantoms.

Every image is a pure function of its :class:`PhantomSpec`. The fan is a
single bright wedge on a zero background; each view draws its own geometric
signature inside it. The head ellipse of brain views has a perimeter, in
millimetres, equal to the median head circumference at the requested GA.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import cv2
import numpy as np

from .curation import ImageRecord, write_manifest
from .growth import GA_MAX_DAYS, GA_MIN_DAYS, QuantileModel, ellipse_perimeter, load_quantiles

VIEWS = ("abdomen", "brain", "femur", "heart", "cervix", "other")
FIVE_VIEWS = VIEWS[:5]
BRAIN_SUBVIEWS = ("transcerebellum", "transthalamic", "transventricular")
# the keywords phantom records can carry
PHANTOM_KEYWORDS = ("abdomen", "brain", "femur", "heart", "cervix", "4ch") + BRAIN_SUBVIEWS

FIELD_OF_VIEW_MM = 144.0
HEAD_ASPECT = 0.8  # minor/major axis ratio
SKULL_PX = 1.6
ANNOTATION_COLORS = ((1.0, 1.0, 0.0), (0.0, 1.0, 0.3))

_MEDIAN_HC: QuantileModel = load_quantiles().median


def default_spacing(size: int) -> float:
    return FIELD_OF_VIEW_MM / size


@dataclass(frozen=True)
class PhantomSpec:
    view_class: str
    ga_days: int
    pixel_spacing_mm: float
    annotation_text: str | None = None
    noise_seed: int = 0
    brain_subview: str | None = None
    size: int = 64

    def __post_init__(self):
        if self.view_class not in VIEWS:
            raise ValueError(f"unknown view class {self.view_class!r}")
        if not GA_MIN_DAYS <= self.ga_days <= GA_MAX_DAYS:
            raise ValueError(f"ga_days={self.ga_days} outside [{GA_MIN_DAYS}, {GA_MAX_DAYS}]")
        if not self.pixel_spacing_mm > 0:
            raise ValueError("pixel_spacing_mm must be positive")
        if self.brain_subview is not None and self.brain_subview not in BRAIN_SUBVIEWS:
            raise ValueError(f"unknown brain subview {self.brain_subview!r}")
        if self.size < 32:
            raise ValueError("phantom canvas must be at least 32 px")


@dataclass
class PhantomImage:
    pixels: np.ndarray  # H x W float in [0, 1], annotation burned in as luminance
    fan_mask: np.ndarray
    annotation_mask: np.ndarray
    spec: PhantomSpec
    rgb: np.ndarray  # H x W x 3, annotation in colour
    structures: dict = field(default_factory=dict)

    @property
    def head_axes_px(self) -> tuple[float, float] | None:
        return self.structures.get("_head_axes")


def head_axes_mm(ga_days: float) -> tuple[float, float]:
    """Semi-axes (mm) of the head ellipse whose perimeter equals the median HC."""
    hc = float(_MEDIAN_HC(ga_days))
    a = hc / float(ellipse_perimeter(1.0, HEAD_ASPECT))
    return a, a * HEAD_ASPECT


def _smooth_inside(d):
    """Anti-aliased indicator from a signed distance (negative inside, px)."""
    return np.clip(0.5 - d, 0.0, 1.0)


def _fan_geometry(size: int):
    apex = (-0.08 * size, size / 2.0)  # (row, col)
    r_in, r_out = 0.16 * size, 1.04 * size
    half_angle = np.deg2rad(44.0)
    return apex, r_in, r_out, half_angle


def fan_mask(size: int) -> np.ndarray:
    apex, r_in, r_out, half = _fan_geometry(size)
    yy, xx = np.mgrid[0:size, 0:size].astype(float) + 0.5
    dy, dx = yy - apex[0], xx - apex[1]
    r = np.hypot(dy, dx)
    theta = np.arctan2(dx, dy)
    return (r >= r_in) & (r <= r_out) & (np.abs(theta) <= half)


def _ellipse_sdf(yy, xx, cy, cx, a, b, angle=0.0):
    """Approximate signed distance (px) to an ellipse with semi-axes a (x) and b (y)."""
    c, s = np.cos(angle), np.sin(angle)
    x = (xx - cx) * c + (yy - cy) * s
    y = -(xx - cx) * s + (yy - cy) * c
    k = np.sqrt((x / a) ** 2 + (y / b) ** 2)
    return (k - 1.0) * 0.5 * (a + b)


def _segment_sdf(yy, xx, p0, p1, half_width):
    py, px = yy - p0[0], xx - p0[1]
    vy, vx = p1[0] - p0[0], p1[1] - p0[1]
    h = np.clip((py * vy + px * vx) / (vy * vy + vx * vx), 0.0, 1.0)
    return np.hypot(py - h * vy, px - h * vx) - half_width


def _paint(canvas, alpha, value):
    canvas *= 1.0 - alpha
    canvas += alpha * value


def _render_brain(canvas, yy, xx, spec, center, rng, structures):
    a_mm, b_mm = head_axes_mm(spec.ga_days)
    a, b = a_mm / spec.pixel_spacing_mm, b_mm / spec.pixel_spacing_mm
    cy, cx = center
    sd = _ellipse_sdf(yy, xx, cy, cx, a, b)
    inside = _smooth_inside(sd)
    _paint(canvas, inside, 0.1)
    ring = _smooth_inside(np.abs(sd) - SKULL_PX / 2)
    _paint(canvas, ring, 0.92)
    midline = _smooth_inside(_segment_sdf(yy, xx, (cy, cx - 0.8 * a), (cy, cx + 0.8 * a), 0.45)) * inside
    _paint(canvas, midline, 0.5)
    sub = spec.brain_subview or BRAIN_SUBVIEWS[int(rng.integers(3))]
    if sub == "transthalamic":
        for dy in (-0.22 * b, 0.22 * b):
            _paint(canvas, _smooth_inside(_ellipse_sdf(yy, xx, cy + dy, cx, 0.18 * a, 0.14 * b)), 0.38)
    elif sub == "transcerebellum":
        for dy in (-0.2 * b, 0.2 * b):
            _paint(canvas, _smooth_inside(_ellipse_sdf(yy, xx, cy + dy, cx + 0.55 * a, 0.14 * a, 0.2 * b)), 0.48)
    else:
        for dy in (-0.45 * b, 0.45 * b):
            seg = _segment_sdf(yy, xx, (cy + dy, cx - 0.35 * a), (cy + dy, cx + 0.35 * a), 0.5)
            _paint(canvas, _smooth_inside(seg), 0.55)
    structures["head"] = sd <= 0
    structures["skull"] = np.abs(sd) <= SKULL_PX / 2
    structures["midline"] = (midline > 0.5)
    structures["_head_axes"] = (a, b)
    structures["_subview"] = sub


def _render_abdomen(canvas, yy, xx, spec, center, rng, structures):
    r = 0.9 * head_axes_mm(spec.ga_days)[0] / spec.pixel_spacing_mm
    r = min(r, 0.3 * spec.size)
    cy, cx = center
    sd = _ellipse_sdf(yy, xx, cy, cx, r, 0.95 * r)
    _paint(canvas, _smooth_inside(sd), 0.5)
    _paint(canvas, _smooth_inside(np.abs(sd) - 0.6), 0.75)
    ang = rng.uniform(-0.4, 0.4)
    st = _ellipse_sdf(yy, xx, cy - 0.2 * r, cx - 0.3 * r, 0.32 * r, 0.24 * r, ang)
    _paint(canvas, _smooth_inside(st), 0.05)
    sp = _ellipse_sdf(yy, xx, cy + 0.72 * r, cx + 0.1 * r, 0.13 * r + 0.6, 0.13 * r + 0.6)
    _paint(canvas, _smooth_inside(sp), 0.95)
    structures["abdomen"] = sd <= 0
    structures["stomach"] = st <= 0


def _render_femur(canvas, yy, xx, spec, center, rng, structures):
    length = 0.5 * head_axes_mm(spec.ga_days)[0] * 2 / spec.pixel_spacing_mm
    length = min(max(length, 0.22 * spec.size), 0.55 * spec.size)
    ang = rng.uniform(-0.35, 0.35)
    cy, cx = center
    dy, dx = np.sin(ang) * length / 2, np.cos(ang) * length / 2
    sd = _segment_sdf(yy, xx, (cy - dy, cx - dx), (cy + dy, cx + dx), 1.1 * spec.size / 64)
    _paint(canvas, _smooth_inside(sd), 0.97)
    structures["femur"] = sd <= 0


def _heart_geometry(spec, center, phase=0.0, chd=False):
    r = 0.55 * head_axes_mm(spec.ga_days)[0] / spec.pixel_spacing_mm
    r = min(max(r, 0.19 * spec.size), 0.27 * spec.size)
    cy, cx = center
    beat = 1.0 + 0.12 * np.sin(phase)
    chambers = []
    for qy in (-1, 1):
        for qx in (-1, 1):
            scale = beat if qy > 0 else 2.0 - beat
            cr = 0.3 * r * scale
            if chd and qy > 0 and qx < 0:
                cr *= 0.45
            chambers.append((cy + qy * 0.42 * r, cx + qx * 0.42 * r, cr))
    return r, chambers


def _render_heart(canvas, yy, xx, spec, center, rng, structures, phase=0.0, chd=False):
    r, chambers = _heart_geometry(spec, center, phase, chd)
    cy, cx = center
    disk = _ellipse_sdf(yy, xx, cy, cx, r, r)
    _paint(canvas, _smooth_inside(disk), 0.72)
    masks = []
    for (py, px, cr) in chambers:
        sd = _ellipse_sdf(yy, xx, py, px, cr, cr)
        _paint(canvas, _smooth_inside(sd), 0.06)
        masks.append(sd <= 0)
    sept = np.minimum(
        _segment_sdf(yy, xx, (cy - 0.85 * r, cx), (cy + 0.85 * r, cx), 0.55),
        _segment_sdf(yy, xx, (cy, cx - 0.85 * r), (cy, cx + 0.85 * r), 0.55),
    )
    _paint(canvas, _smooth_inside(sept), 0.9)
    structures["heart"] = disk <= 0
    structures["atria"] = masks[0] | masks[1]
    structures["ventricles"] = masks[2] | masks[3]
    structures["septum"] = (sept <= 0) & (disk <= 0)


def _render_cervix(canvas, yy, xx, spec, center, rng, structures):
    cy, cx = center
    length = 0.62 * spec.size
    tip = (cy + 0.05 * spec.size, cx - length / 2)
    base_c = (cy + 0.05 * spec.size, cx + length / 2)
    half_base = 0.17 * spec.size
    pts = np.array([[tip[1], tip[0]], [base_c[1], base_c[0] - half_base], [base_c[1], base_c[0] + half_base]])
    ang = rng.uniform(-0.2, 0.2)
    c, s = np.cos(ang), np.sin(ang)
    rot = np.array([[c, -s], [s, c]])
    pts = (pts - [cx, cy]) @ rot.T + [cx, cy]
    up = 8
    big = np.zeros((spec.size * up, spec.size * up), np.uint8)
    cv2.fillPoly(big, [np.round(pts * up).astype(np.int32)], 255)
    wedge = cv2.resize(big.astype(np.float32) / 255.0, (spec.size, spec.size), interpolation=cv2.INTER_AREA)
    _paint(canvas, wedge, 0.75)
    p1 = ((pts[1, 1] + pts[2, 1]) / 2, (pts[1, 0] + pts[2, 0]) / 2)
    canal = _smooth_inside(_segment_sdf(yy, xx, (pts[0, 1], pts[0, 0]), p1, 0.5))
    _paint(canvas, canal * wedge, 0.12)
    structures["cervix"] = wedge >= 0.5


def _render_other(canvas, yy, xx, spec, center, rng, structures):
    for _ in range(int(rng.integers(3, 6))):
        py = rng.uniform(0.3, 0.85) * spec.size
        px = rng.uniform(0.25, 0.75) * spec.size
        ra = rng.uniform(0.04, 0.12) * spec.size
        rb = rng.uniform(0.04, 0.12) * spec.size
        _paint(canvas, _smooth_inside(_ellipse_sdf(yy, xx, py, px, ra, rb, rng.uniform(0, np.pi))),
               rng.uniform(0.05, 0.8))


_RENDERERS = {
    "brain": _render_brain,
    "abdomen": _render_abdomen,
    "femur": _render_femur,
    "heart": _render_heart,
    "cervix": _render_cervix,
    "other": _render_other,
}


def _base_canvas(size: int, rng) -> tuple[np.ndarray, np.ndarray]:
    fan = fan_mask(size)
    yy = np.mgrid[0:size, 0:size][0].astype(float)
    tissue = 0.3 + 0.06 * (yy / size)
    return np.where(fan, tissue, 0.0), fan


def _finish(canvas, fan, rng, spec, structures, annotate=True) -> PhantomImage:
    speckle = rng.uniform(0.9, 1.1, size=canvas.shape)
    gray = np.clip(canvas * speckle, 0.0, 1.0) * fan
    gray = np.where(fan, np.maximum(gray, 0.02), 0.0)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    ann = np.zeros_like(fan)
    if annotate and spec.annotation_text:
        ann, color = _annotation_mask(spec, rng)
        ann &= fan
        rgb[ann] = color
        gray = np.where(ann, rgb.mean(axis=2), gray)
    for k in [k for k in structures if not k.startswith("_")]:
        structures[k] = structures[k] & fan
    return PhantomImage(gray, fan, ann, spec, rgb, structures)


def _annotation_mask(spec: PhantomSpec, rng):
    size = spec.size
    scale = 0.26 * size / 64
    canvas = np.zeros((size, size), np.uint8)
    org = (int(0.05 * size), int(0.80 * size))
    cv2.putText(canvas, spec.annotation_text, org, cv2.FONT_HERSHEY_SIMPLEX, scale, 255, 1, cv2.LINE_8)
    color = ANNOTATION_COLORS[int(rng.integers(len(ANNOTATION_COLORS)))]
    return canvas > 0, color


def _center(spec: PhantomSpec, rng) -> tuple[float, float]:
    jitter = 2.0 * spec.size / 64
    return (0.56 * spec.size + rng.uniform(-jitter, jitter), 0.5 * spec.size + rng.uniform(-jitter, jitter))


def gen_image(spec: PhantomSpec) -> PhantomImage:
    """Render one phantom image; identical specs give identical pixels."""
    rng = np.random.default_rng([spec.noise_seed, VIEWS.index(spec.view_class), spec.ga_days])
    canvas, fan = _base_canvas(spec.size, rng)
    yy, xx = np.mgrid[0:spec.size, 0:spec.size].astype(float) + 0.5
    structures: dict = {}
    center = _center(spec, rng)
    _RENDERERS[spec.view_class](canvas, yy, xx, spec, center, rng, structures)
    return _finish(canvas, fan, rng, spec, structures)


def render_head_only(spec: PhantomSpec) -> np.ndarray:
    """Filled head mask of a brain spec, for segmentation targets."""
    if spec.view_class != "brain":
        raise ValueError("head masks exist only for brain views")
    return gen_image(spec).structures["head"]


def gen_video(spec: PhantomSpec, n_frames: int, chd: bool = False, period: float | None = None) -> np.ndarray:
    """Heart-view frame sequence (T x H x W) with periodic chamber motion.

    ``chd`` shrinks the lower-left chamber in every frame.
    """
    if not 16 <= n_frames <= 128:
        raise ValueError(f"n_frames={n_frames} outside [16, 128]")
    rng = np.random.default_rng([spec.noise_seed, 7919, spec.ga_days, int(chd)])
    period = float(rng.uniform(10.0, 16.0)) if period is None else period
    phase0 = float(rng.uniform(0, 2 * np.pi))
    center = _center(spec, rng)
    yy, xx = np.mgrid[0:spec.size, 0:spec.size].astype(float) + 0.5
    frames = np.empty((n_frames, spec.size, spec.size))
    for t in range(n_frames):
        canvas, fan = _base_canvas(spec.size, rng)
        structures: dict = {}
        _render_heart(canvas, yy, xx, spec, center, rng, structures,
                      phase=phase0 + 2 * np.pi * t / period, chd=chd)
        frames[t] = _finish(canvas, fan, rng, spec, structures, annotate=False).pixels
    return frames


def _allocate(n: int, class_mix: Mapping[str, float]) -> list[str]:
    """Largest-remainder allocation of n items to classes."""
    names = list(class_mix)
    w = np.array([class_mix[k] for k in names], dtype=float)
    if w.sum() <= 0 or np.any(w < 0):
        raise ValueError("class_mix weights must be non-negative with positive sum")
    exact = n * w / w.sum()
    counts = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return [k for k, c in zip(names, counts) for _ in range(c)]


def view_labels(view: str) -> frozenset:
    if view == "other":
        return frozenset()
    return frozenset({view})


def gen_dataset(
    n_patients: int,
    images_per_patient: int,
    class_mix: Mapping[str, float] | Sequence[str] | None = None,
    seed: int = 0,
    size: int = 64,
    annotate_fraction: float = 0.0,
    ga_mean: float = 148.0,
    ga_std: float = 16.0,
    test_fraction: float = 0.0,
    ga_distribution: str = "normal",
) -> list[ImageRecord]:
    """Phantom manifest with one GA per patient.

    GAs are drawn from N(ga_mean, ga_std) clipped to the valid range, or
    uniformly over the whole range with ``ga_distribution="uniform"``; class
    counts follow ``class_mix`` by largest remainder.
    """
    if ga_distribution not in ("normal", "uniform"):
        raise ValueError(f"unknown ga_distribution {ga_distribution!r}")
    if n_patients < 1:
        raise ValueError("n_patients must be >= 1")
    if images_per_patient < 1:
        raise ValueError("images_per_patient must be >= 1")
    if class_mix is None:
        class_mix = {v: 1.0 for v in FIVE_VIEWS}
    elif not isinstance(class_mix, Mapping):
        class_mix = {v: 1.0 for v in class_mix}
    if not class_mix:
        raise ValueError("class_mix is empty")
    for v in class_mix:
        if v not in VIEWS:
            raise ValueError(f"unknown view class {v!r}")
    rng = np.random.default_rng(seed)
    n = n_patients * images_per_patient
    views = _allocate(n, class_mix)
    views = [views[i] for i in rng.permutation(n)]
    spacing = default_spacing(size)
    n_test = int(round(test_fraction * n_patients))
    test_patients = set(rng.permutation(n_patients)[:n_test].tolist())
    records = []
    for p in range(n_patients):
        if ga_distribution == "uniform":
            ga = int(rng.integers(GA_MIN_DAYS, GA_MAX_DAYS + 1))
        else:
            ga = int(np.clip(round(rng.normal(ga_mean, ga_std)), GA_MIN_DAYS, GA_MAX_DAYS))
        for j in range(images_per_patient):
            k = p * images_per_patient + j
            view = views[k]
            image_id = f"img{k:06d}"
            sub = BRAIN_SUBVIEWS[int(rng.integers(3))] if view == "brain" else None
            annotate = bool(rng.random() < annotate_fraction)
            meta = {
                "view": view,
                "noise_seed": int(rng.integers(2**31)),
                "size": size,
                "brain_subview": sub,
                "annotation_text": view.upper()[:4] if annotate and view != "other" else None,
            }
            records.append(
                ImageRecord(
                    image_id=image_id,
                    patient_id=f"pt{p:05d}",
                    path=f"images/{image_id}.png",
                    labels=view_labels(view),
                    ga_days=ga,
                    pixel_spacing_mm=spacing,
                    split="test" if p in test_patients else "train",
                    meta=meta,
                )
            )
    return records


def spec_from_record(record: ImageRecord) -> PhantomSpec:
    m = record.meta
    return PhantomSpec(
        view_class=m["view"],
        ga_days=record.ga_days,
        pixel_spacing_mm=record.pixel_spacing_mm,
        annotation_text=m.get("annotation_text"),
        noise_seed=m["noise_seed"],
        brain_subview=m.get("brain_subview"),
        size=m.get("size", 64),
    )


def render_record(record: ImageRecord, annotations: bool = True) -> PhantomImage:
    spec = spec_from_record(record)
    if not annotations:
        spec = replace(spec, annotation_text=None)
    return gen_image(spec)


def render_images(records: Sequence[ImageRecord], annotations: bool = False) -> np.ndarray:
    """Stack of grayscale pixels (N x H x W, float32)."""
    return np.stack([render_record(r, annotations).pixels for r in records]).astype(np.float32)


def write_dataset(records: Sequence[ImageRecord], out_dir) -> Path:
    """Write PNGs (colour when annotated, else 8-bit gray) and ``manifest.jsonl``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    for r in records:
        img = render_record(r)
        target = out_dir / r.path
        if img.annotation_mask.any():
            bgr = (np.clip(img.rgb[..., ::-1], 0, 1) * 255).round().astype(np.uint8)
            cv2.imwrite(str(target), bgr)
        else:
            cv2.imwrite(str(target), (img.pixels * 255).round().astype(np.uint8))
    manifest = out_dir / "manifest.jsonl"
    write_manifest(records, manifest)
    with open(out_dir / "phantom_meta.json", "w") as fh:
        json.dump({"field_of_view_mm": FIELD_OF_VIEW_MM, "n_records": len(records)}, fh, indent=2)
    return manifest
