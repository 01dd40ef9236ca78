"""Fan extraction, annotation inpainting, square standardisation, augmentation."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

CHROMA_THRESHOLD = 0.15
DILATE_RADIUS = 2
INPAINT_RADIUS = 3


class NoForegroundError(ValueError):
    pass


def extract_fan(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Keep the largest non-zero connected component.

    Returns the image cropped to that component's bounding box (pixels
    outside the component zeroed) and the full-size component mask.
    """
    image = np.asarray(image)
    if image.size == 0:
        raise ValueError("empty image")
    gray = image if image.ndim == 2 else image.max(axis=2)
    fg = (gray != 0).astype(np.uint8)
    if not fg.any():
        raise NoForegroundError("no foreground: image is all zero")
    n, labels, stats, _ = cv2.connectedComponentsWithStats(fg, connectivity=8)
    # label 0 is background
    largest = 1 + int(np.argmax(stats[1:, cv2.CC_STAT_AREA]))
    mask = labels == largest
    y0, y1, x0, x1 = fan_bbox(mask)
    cropped = np.where(mask[..., None] if image.ndim == 3 else mask, image, 0)[y0:y1, x0:x1]
    return cropped, mask


def fan_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1


def chroma(image: np.ndarray) -> np.ndarray:
    return image.max(axis=2) - image.min(axis=2)


def annotation_mask(image: np.ndarray, threshold: float = CHROMA_THRESHOLD, dilate: int = DILATE_RADIUS) -> np.ndarray:
    marked = chroma(image) > threshold
    if dilate > 0 and marked.any():
        k = cv2.getStructuringElement(cv2.MORPH_ELLIPSE, (2 * dilate + 1, 2 * dilate + 1))
        marked = cv2.dilate(marked.astype(np.uint8), k) > 0
    return marked


def remove_annotations(
    image: np.ndarray,
    threshold: float = CHROMA_THRESHOLD,
    dilate: int = DILATE_RADIUS,
    radius: int = INPAINT_RADIUS,
    return_mask: bool = False,
):
    """Inpaint coloured overlays (Telea fast marching) and return grayscale.

    ``image`` is H x W x 3 in [0, 1].
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 colour image, got shape {image.shape}")
    # median of equal channels is exact, so gray inputs pass through unchanged
    gray = np.median(image, axis=2).astype(np.float32)
    mask = annotation_mask(image, threshold, dilate)
    if mask.any():
        # Telea's float path expects a 0..255 intensity scale
        filled = cv2.inpaint(gray * 255.0, mask.astype(np.uint8), radius, cv2.INPAINT_TELEA) / 255.0
        gray = np.where(mask, np.clip(filled, 0.0, 1.0), gray).astype(np.float32)
    return (gray, mask) if return_mask else gray


def pad_to_square(image: np.ndarray) -> np.ndarray:
    """Zero-pad the shorter side; an odd remainder goes to the bottom/right."""
    h, w = image.shape[:2]
    side = max(h, w)
    top = (side - h) // 2
    left = (side - w) // 2
    pad = [(top, side - h - top), (left, side - w - left)] + [(0, 0)] * (image.ndim - 2)
    return np.pad(image, pad)


def standardize(image: np.ndarray, size: int = 224) -> np.ndarray:
    image = np.asarray(image)
    if image.size == 0:
        raise ValueError("empty image")
    sq = pad_to_square(image).astype(np.float32)
    if sq.shape[0] == size:
        return sq
    return cv2.resize(sq, (size, size), interpolation=cv2.INTER_LINEAR)


@dataclass(frozen=True)
class AugmentationPolicy:
    rotation_deg_range: tuple[float, float] = (-7.0, 7.0)
    translation_frac_range: tuple[float, float] = (-0.05, 0.05)
    brightness_range: tuple[float, float] = (0.85, 1.15)
    contrast_range: tuple[float, float] = (0.85, 1.15)
    saturation_range: tuple[float, float] = (0.85, 1.15)
    seed: int = 0

    def __post_init__(self):
        for name, identity in (
            ("rotation_deg_range", 0.0),
            ("translation_frac_range", 0.0),
            ("brightness_range", 1.0),
            ("contrast_range", 1.0),
            ("saturation_range", 1.0),
        ):
            lo, hi = getattr(self, name)
            if not lo <= identity <= hi:
                raise ValueError(f"{name}={lo, hi} must contain the identity value {identity}")

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentationPolicy":
        return cls((0.0, 0.0), (0.0, 0.0), (1.0, 1.0), (1.0, 1.0), (1.0, 1.0), seed)


def _jitter(image, brightness, contrast, saturation):
    out = image
    if brightness != 1.0:
        out = out * brightness
    if contrast != 1.0:
        gray = out if out.ndim == 2 else out.mean(axis=2)
        m = gray.mean()
        out = (out - m) * contrast + m
    if saturation != 1.0 and out.ndim == 3:
        gray = out.mean(axis=2, keepdims=True)
        out = (out - gray) * saturation + gray
    return out


def augment(image: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator | None = None) -> np.ndarray:
    """Random rotation, then translation, then colour jitter; clipped to [0, 1].

    Without ``rng`` the policy seed drives sampling, so repeated calls agree.
    """
    if rng is None:
        rng = np.random.default_rng(policy.seed)
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape[:2]
    angle = rng.uniform(*policy.rotation_deg_range)
    tx = rng.uniform(*policy.translation_frac_range) * w
    ty = rng.uniform(*policy.translation_frac_range) * h
    b = rng.uniform(*policy.brightness_range)
    c = rng.uniform(*policy.contrast_range)
    s = rng.uniform(*policy.saturation_range)
    out = image
    if angle != 0.0 or tx != 0.0 or ty != 0.0:
        m = cv2.getRotationMatrix2D((w / 2.0, h / 2.0), angle, 1.0)
        m[0, 2] += tx
        m[1, 2] += ty
        out = cv2.warpAffine(out, m, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    out = _jitter(out, b, c, s)
    if out is image:
        return image.copy()
    return np.clip(out, 0.0, 1.0)


# --------------------------------------------------------------------------- estimators

class AnnotationRemover(TransformerMixin, BaseEstimator):
    def __init__(self, threshold=CHROMA_THRESHOLD, dilate=DILATE_RADIUS, radius=INPAINT_RADIUS):
        self.threshold = threshold
        self.dilate = dilate
        self.radius = radius

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return [remove_annotations(x, self.threshold, self.dilate, self.radius) for x in X]


class FanCropper(TransformerMixin, BaseEstimator):
    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return [extract_fan(x)[0] for x in X]


class Standardizer(TransformerMixin, BaseEstimator):
    def __init__(self, size=224):
        self.size = size

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return np.stack([standardize(x, self.size) for x in X])


class RandomAugmenter(TransformerMixin, BaseEstimator):
    """Applies :func:`augment` with one generator across the batch."""

    def __init__(self, policy=None, seed=0):
        self.policy = policy
        self.seed = seed

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        policy = self.policy or AugmentationPolicy()
        rng = np.random.default_rng(self.seed)
        return np.stack([augment(x, policy, rng) for x in X])


def preprocess_image(image: np.ndarray, size: int = 224) -> tuple[np.ndarray, int]:
    """Full pipeline for one frame: inpaint, extract fan, standardise.

    Accepts gray or colour input; returns the standardised image and the
    number of inpainted pixels.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    gray, mask = remove_annotations(image, return_mask=True)
    cropped, _ = extract_fan(gray)
    return standardize(cropped, size), int(mask.sum())


def read_image(path) -> np.ndarray:
    """PNG to float RGB in [0, 1] (gray files are replicated)."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise OSError(f"cannot read image {path}")
    img = raw.astype(np.float32) / (65535.0 if raw.dtype == np.uint16 else 255.0)
    if img.ndim == 2:
        return np.repeat(img[..., None], 3, axis=2)
    return img[..., 2::-1].copy()


def write_gray_png(path, image: np.ndarray) -> None:
    cv2.imwrite(str(path), (np.clip(image, 0, 1) * 255).round().astype(np.uint8))


def preprocess_directory(in_dir, out_dir, size: int = 224) -> dict:
    """Batch preprocessing with a sidecar report of inpainted pixel counts."""
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = {"size": size, "images": {}}
    for p in sorted(in_dir.glob("*.png")):
        gray, mask = remove_annotations(read_image(p), return_mask=True)
        cropped, _ = extract_fan(gray)
        write_gray_png(out_dir / p.name, standardize(cropped, size))
        # output pixels per input pixel; divides the physical pixel spacing
        scale = size / max(cropped.shape[:2])
        report["images"][p.name] = {"inpainted_pixels": int(mask.sum()), "scale": scale}
    with open(out_dir / "preprocess_report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    return report


__all__ = [
    "AugmentationPolicy",
    "AnnotationRemover",
    "FanCropper",
    "NoForegroundError",
    "RandomAugmenter",
    "Standardizer",
    "augment",
    "extract_fan",
    "pad_to_square",
    "preprocess_directory",
    "preprocess_image",
    "remove_annotations",
    "standardize",
]
