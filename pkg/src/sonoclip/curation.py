"""Turn labeled image manifests into image-caption shards.

Covers caption templating, subgroup routing, confident-learning label
filtering, pseudo-labeling, and dedup-preserving sharding.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

SUBGROUPS = ("standard_view", "multi_keyword", "unlabeled", "textbook")
SPLITS = ("train", "test")


@dataclass
class ImageRecord:
    image_id: str
    patient_id: str
    path: str
    labels: frozenset = frozenset()
    ga_days: int | None = None
    pixel_spacing_mm: float | None = None
    subgroup: str | None = None
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = frozenset(self.labels)
        if not self.patient_id:
            raise ValueError(f"record {self.image_id}: patient_id is required")
        if self.split not in SPLITS:
            raise ValueError(f"record {self.image_id}: split must be one of {SPLITS}")
        if self.subgroup is not None and self.subgroup not in SUBGROUPS:
            raise ValueError(f"record {self.image_id}: unknown subgroup {self.subgroup!r}")
        if not self.labels and self.subgroup not in (None, "unlabeled", "textbook"):
            raise ValueError(f"record {self.image_id}: labels empty but subgroup is {self.subgroup}")

    @property
    def view(self) -> str | None:
        return self.meta.get("view")

    def to_json(self) -> str:
        d = asdict(self)
        d["labels"] = sorted(self.labels)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ImageRecord":
        d = json.loads(line)
        d["labels"] = frozenset(d.get("labels", ()))
        return cls(**d)


def write_manifest(records: Iterable[ImageRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_manifest(path) -> list[ImageRecord]:
    with open(path) as fh:
        return [ImageRecord.from_json(line) for line in fh if line.strip()]


# --------------------------------------------------------------------------- lexicon

def load_lexicon(path=None) -> dict[str, list[str]]:
    if path is None:
        text = resources.files("sonoclip.data").joinpath("lexicon.txt").read_text()
    else:
        text = Path(path).read_text()
    sections: dict[str, list[str]] = {}
    current = None
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            current = line.strip("[]")
            sections[current] = []
        elif current is None:
            raise ValueError("lexicon entry before any section header")
        else:
            sections[current].append(line)
    return sections


_LEXICON = load_lexicon()
STANDARD_VIEWS = frozenset(_LEXICON["standard"])
SUBVIEW_KEYWORDS = frozenset(_LEXICON["subviews"])
STANDARD_KEYWORDS = STANDARD_VIEWS | SUBVIEW_KEYWORDS


def route_subgroup(record: ImageRecord, views: frozenset = STANDARD_VIEWS,
                   subviews: frozenset = SUBVIEW_KEYWORDS) -> str:
    """Standard view when the labels name one standard view, plus optional sub-planes."""
    if record.subgroup == "textbook":
        return "textbook"
    if not record.labels:
        return "unlabeled"
    if record.labels <= views | subviews and len(record.labels & views) == 1:
        return "standard_view"
    return "multi_keyword"


# --------------------------------------------------------------------------- captions

def format_ga(ga_days: int) -> str:
    weeks, days = divmod(int(ga_days), 7)
    return f"{weeks}w {days}d"


def format_spacing(spacing_mm: float) -> str:
    return f"{spacing_mm:g} mm/px"


_CLAUSE = re.compile(r"\[\[(\w+):(.*?)\]\]")


def _label_key(labels: Iterable[str]) -> frozenset:
    return frozenset(s.strip() for s in labels if s.strip())


@dataclass(frozen=True)
class CaptionSet:
    image_id: str
    captions: tuple[str, ...]

    def __post_init__(self):
        if len(self.captions) != 5:
            raise ValueError(f"{self.image_id}: a caption set holds exactly 5 captions")
        if len(set(self.captions)) != 5:
            raise ValueError(f"{self.image_id}: captions are not pairwise distinct")


class TemplateBank:
    """Five sentence skeletons per label set, read from a plain-text file."""

    def __init__(self, templates: Mapping[frozenset, Sequence[str]], version: str = "1"):
        self.templates = {frozenset(k): tuple(v) for k, v in templates.items()}
        self.version = version
        for key, tpl in self.templates.items():
            if len(tpl) != 5:
                raise ValueError(f"label set {sorted(key)} has {len(tpl)} templates, expected 5")

    @classmethod
    def parse(cls, text: str) -> "TemplateBank":
        templates: dict[frozenset, list[str]] = {}
        version = "1"
        current = None
        for line in text.splitlines():
            stripped = line.strip()
            if not stripped:
                continue
            if stripped.startswith("#"):
                m = re.search(r"version\s+(\w+)", stripped)
                if m:
                    version = m.group(1)
                continue
            if stripped.startswith("[") and not stripped.startswith("[["):
                current = _label_key(stripped.strip("[]").split(","))
                if current in templates:
                    raise ValueError(f"duplicate template section {sorted(current)}")
                templates[current] = []
            elif current is None:
                raise ValueError("template line outside a section")
            else:
                templates[current].append(stripped)
        return cls(templates, version)

    @classmethod
    def load(cls, path=None) -> "TemplateBank":
        if path is None:
            text = resources.files("sonoclip.data").joinpath("caption_templates.txt").read_text()
        else:
            text = Path(path).read_text()
        return cls.parse(text)

    def __contains__(self, labels) -> bool:
        return _label_key(labels) in self.templates

    def label_sets(self) -> list[frozenset]:
        return list(self.templates)

    def render(self, labels, ga_days: int | None = None, spacing_mm: float | None = None) -> list[str]:
        key = _label_key(labels)
        if key not in self.templates:
            raise KeyError(f"unknown label set: {', '.join(sorted(key)) or '(empty)'}")
        values = {"keywords": ", ".join(sorted(key))}
        if ga_days is not None:
            values["ga"] = format_ga(ga_days)
        if spacing_mm is not None:
            values["spacing"] = format_spacing(spacing_mm)

        def clause(m):
            return m.group(2) if m.group(1) in values else ""

        return [_CLAUSE.sub(clause, tpl).format(**values) for tpl in self.templates[key]]


def build_caption_set(record: ImageRecord, templates: TemplateBank) -> CaptionSet:
    if not record.labels:
        raise ValueError(f"{record.image_id}: cannot caption a record without labels")
    captions = templates.render(record.labels, record.ga_days, record.pixel_spacing_mm)
    return CaptionSet(record.image_id, tuple(captions))


def caption_pool(record: ImageRecord, templates: TemplateBank, metadata_free: bool = True) -> list[str]:
    """Training-time caption choices for one record.

    The record's five captions, followed (when ``metadata_free``) by the same
    templates rendered without GA and spacing clauses. Drawing from the pool
    teaches the text tower that bare view descriptions still name the view,
    which is how inference prompts are phrased.
    """
    pool = list(build_caption_set(record, templates).captions)
    if metadata_free:
        pool += [c for c in templates.render(record.labels) if c not in pool]
    return pool


# --------------------------------------------------------------------------- label noise

def confident_thresholds(oof_probs, labels, n_classes: int | None = None) -> np.ndarray:
    """Per-class mean self-confidence; classes without support get +inf."""
    probs = np.asarray(oof_probs, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n_classes = probs.shape[1] if n_classes is None else n_classes
    t = np.full(n_classes, np.inf)
    for c in range(n_classes):
        members = labels == c
        if members.any():
            t[c] = probs[members, c].mean()
    return t


def confident_flags(oof_probs, labels) -> np.ndarray:
    """Indices whose confidently-assigned class differs from the given label.

    A sample is confidently assigned to the highest-probability class among
    those where its probability reaches the class threshold. Samples with no
    such class are not flagged.
    """
    probs = np.asarray(oof_probs, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise ValueError("oof_probs must be N x C with one label per row")
    t = confident_thresholds(probs, labels)
    above = probs >= t[None, :]
    masked = np.where(above, probs, -np.inf)
    confident = np.argmax(masked, axis=1)
    has_any = above.any(axis=1)
    return np.flatnonzero(has_any & (confident != labels))


def oof_probabilities(X, y, groups, estimator=None, n_splits: int = 5):
    """Patient-wise out-of-fold class probabilities."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import GroupKFold, cross_val_predict

    if estimator is None:
        estimator = LogisticRegression(max_iter=1000)
    return cross_val_predict(
        estimator, X, y, groups=groups, cv=GroupKFold(n_splits=n_splits), method="predict_proba"
    )


def pseudo_label(probs, threshold: float = 0.9) -> int | None:
    probs = np.asarray(probs, dtype=float)
    if abs(probs.sum() - 1.0) > 1e-6:
        raise ValueError(f"probabilities sum to {probs.sum()}, expected 1")
    k = int(np.argmax(probs))
    return k if probs[k] > threshold else None


# --------------------------------------------------------------------------- shards

UPSAMPLE_DEFAULT = {"textbook": 10, "standard_view": 1, "multi_keyword": 1, "unlabeled": 1}


@dataclass(frozen=True)
class ShardEntry:
    image_id: str
    path: str
    caption: str
    caption_index: int = 0


def build_shards(
    items: Sequence[tuple[ImageRecord, Sequence[str]]],
    upsample_map: Mapping[str, int] | None = None,
    shard_size: int = 64,
    seed: int = 0,
) -> list[list[ShardEntry]]:
    """Replicate records by subgroup factor and spread replicas over shards.

    Items are (record, captions) pairs. Replicas of one record land in
    distinct shards, so every shard holds unique image ids.
    """
    upsample_map = dict(UPSAMPLE_DEFAULT if upsample_map is None else upsample_map)
    if shard_size < 1:
        raise ValueError("shard_size must be >= 1")
    for k, f in upsample_map.items():
        if int(f) != f or f < 1:
            raise ValueError(f"upsample factor for {k} must be an integer >= 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(items))
    replicas: list[ShardEntry] = []
    max_factor = 1
    for i in order:
        record, captions = items[i]
        if not captions:
            raise ValueError(f"{record.image_id}: no captions")
        factor = int(upsample_map.get(route_subgroup(record), 1))
        max_factor = max(max_factor, factor)
        offset = int(rng.integers(len(captions)))
        for r in range(factor):
            ci = (offset + r) % len(captions)
            replicas.append(ShardEntry(record.image_id, record.path, captions[ci], ci))
    n_shards = max(1, math.ceil(len(replicas) / shard_size))
    if max_factor > n_shards:
        raise ValueError(
            f"cannot satisfy dedup: upsample factor {max_factor} exceeds the {n_shards} available shards"
        )
    shards: list[list[ShardEntry]] = [[] for _ in range(n_shards)]
    # consecutive replicas of one record go to consecutive shards
    for k, entry in enumerate(replicas):
        shards[k % n_shards].append(entry)
    for s in shards:
        ids = [e.image_id for e in s]
        assert len(ids) == len(set(ids)), "duplicate image id within a shard"
    return shards


def write_shards(shards: Sequence[Sequence[ShardEntry]], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, shard in enumerate(shards):
        p = out_dir / f"shard_{i:05d}.jsonl"
        with open(p, "w") as fh:
            for e in shard:
                fh.write(json.dumps({"image_id": e.image_id, "path": e.path, "caption": e.caption}) + "\n")
        paths.append(p)
    return paths


def read_shards(paths: Iterable) -> list[list[ShardEntry]]:
    shards = []
    for p in sorted(Path(x) for x in paths):
        with open(p) as fh:
            shards.append([ShardEntry(**json.loads(line)) for line in fh if line.strip()])
    return shards
