"""Head-circumference growth curves (quartic quantile regression in GA days)."""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

GA_MIN_DAYS = 98
GA_MAX_DAYS = 280
HC_MIN_MM = 100.0
HC_MAX_MM = 342.0

REQUIRED_METADATA = ("source", "provenance")


@dataclass(frozen=True)
class QuantileModel:
    """One percentile curve ``HC(t) = b0 + b1 t + ... + b4 t^4`` with t in days."""

    percentile: float
    coefficients: tuple[float, float, float, float, float]
    domain: tuple[int, int] = (GA_MIN_DAYS, GA_MAX_DAYS)

    def __post_init__(self):
        if len(self.coefficients) != 5:
            raise ValueError(f"expected 5 coefficients, got {len(self.coefficients)}")

    def __call__(self, ga_days):
        t = np.asarray(ga_days, dtype=float)
        b0, b1, b2, b3, b4 = self.coefficients
        # Horner form
        return (((b4 * t + b3) * t + b2) * t + b1) * t + b0

    def in_domain(self, ga_days) -> bool:
        lo, hi = self.domain
        return lo <= ga_days <= hi


class QuantileSet(dict):
    """Mapping percentile -> QuantileModel, plus the file metadata."""

    def __init__(self, models: Iterable[QuantileModel], metadata: Mapping[str, str] | None = None):
        super().__init__((m.percentile, m) for m in models)
        self.metadata = dict(metadata or {})

    @property
    def median(self) -> QuantileModel:
        return self[50.0]


def validate_quantiles(models: Mapping[float, QuantileModel]) -> None:
    """Raise ValueError unless curves are increasing on the domain and ordered."""
    t = np.arange(GA_MIN_DAYS, GA_MAX_DAYS + 1)
    for p, m in models.items():
        if np.any(np.diff(m(t)) <= 0):
            raise ValueError(f"percentile {p} curve is not strictly increasing on [{GA_MIN_DAYS}, {GA_MAX_DAYS}]")
    ordered = sorted(models)
    for lo, hi in zip(ordered, ordered[1:]):
        if np.any(models[lo](t) >= models[hi](t)):
            raise ValueError(f"percentile {lo} curve is not below percentile {hi}")


def parse_quantile_file(text: str) -> QuantileSet:
    metadata: dict[str, str] = {}
    models = []
    domain = (GA_MIN_DAYS, GA_MAX_DAYS)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            key, sep, value = body.partition(":")
            if sep and key.strip().isidentifier():
                metadata[key.strip()] = value.strip()
            continue
        fields = line.split()
        if len(fields) != 6:
            raise ValueError(f"line {lineno}: expected 'percentile b0 b1 b2 b3 b4', got {raw!r}")
        values = [float(x) for x in fields]
        models.append(QuantileModel(values[0], tuple(values[1:])))
    if "domain" in metadata:
        lo, hi = (int(x) for x in metadata["domain"].split())
        domain = (lo, hi)
        models = [QuantileModel(m.percentile, m.coefficients, domain) for m in models]
    missing = [k for k in REQUIRED_METADATA if k not in metadata]
    if missing:
        raise ValueError(f"quantile file lacks provenance metadata: {', '.join(missing)}")
    qs = QuantileSet(models, metadata)
    validate_quantiles(qs)
    return qs


def load_quantiles(path: str | Path | None = None) -> QuantileSet:
    """Load a coefficient file; ``None`` loads the bundled synthetic curves."""
    if path is None:
        text = resources.files("sonoclip.data").joinpath("hc_quantiles_synthetic.txt").read_text()
    else:
        text = Path(path).read_text()
    return parse_quantile_file(text)


def hc_percentile_bounds(ga_days, models: Mapping[float, QuantileModel]) -> tuple[float, float]:
    """(2.5th, 97.5th) percentile HC in mm at ``ga_days``."""
    if not GA_MIN_DAYS <= ga_days <= GA_MAX_DAYS:
        raise ValueError(f"ga_days={ga_days} outside [{GA_MIN_DAYS}, {GA_MAX_DAYS}]")
    try:
        lo, hi = models[2.5], models[97.5]
    except KeyError as exc:
        raise ValueError("2.5th and 97.5th percentile models are required") from exc
    return float(lo(ga_days)), float(hi(ga_days))


def ellipse_perimeter(a, b):
    """Ramanujan's second approximation to the perimeter of an ellipse."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    h = ((a - b) / (a + b)) ** 2
    return np.pi * (a + b) * (1 + 3 * h / (10 + np.sqrt(4 - 3 * h)))
