"""Prompt-ensembled zero-shot view classification and GA estimation."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin

from .curation import TemplateBank
from .growth import (
    GA_MAX_DAYS,
    GA_MIN_DAYS,
    HC_MAX_MM,
    HC_MIN_MM,
    QuantileModel,
    hc_percentile_bounds,
    load_quantiles,
)

PROMPTS_PER_CLASS = 5
TOP_K = 15
PROMPT_STYLES = ("caption", "typical")

TextEncoder = Callable[[Sequence[str]], np.ndarray]


class PromptBank(dict):
    """Class name -> five prompt strings."""

    def __init__(self, prompts: Mapping[str, Sequence[str]]):
        super().__init__()
        for name, ps in prompts.items():
            ps = tuple(ps)
            if len(ps) != PROMPTS_PER_CLASS:
                raise ValueError(f"class {name!r} has {len(ps)} prompts, expected {PROMPTS_PER_CLASS}")
            if name in self:
                raise ValueError(f"duplicate class {name!r}")
            self[name] = ps

    @classmethod
    def parse(cls, text: str) -> "PromptBank":
        prompts: dict[str, list[str]] = {}
        current = None
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            m = re.fullmatch(r"\[(.+)\]", line)
            if m:
                current = m.group(1).strip()
                if current in prompts:
                    raise ValueError(f"duplicate class {current!r}")
                prompts[current] = []
            elif current is None:
                raise ValueError("prompt line outside a class section")
            else:
                prompts[current].append(line)
        return cls(prompts)

    @classmethod
    def load(cls, path=None, style: str = "caption") -> "PromptBank":
        if path is None:
            if style not in PROMPT_STYLES:
                raise ValueError(f"style must be one of {PROMPT_STYLES}")
            text = resources.files("sonoclip.data").joinpath(f"prompts_{style}.txt").read_text()
        else:
            text = Path(path).read_text()
        return cls.parse(text)

    @classmethod
    def from_templates(cls, classes: Sequence[str], templates: TemplateBank | None = None) -> "PromptBank":
        templates = templates or TemplateBank.load()
        return cls({c: templates.render({c}) for c in classes})

    def dump(self) -> str:
        lines = []
        for name, ps in self.items():
            lines.append(f"[{name}]")
            lines.extend(ps)
        return "\n".join(lines) + "\n"


def _unit(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return x / np.linalg.norm(x, axis=axis, keepdims=True)


def ensemble(prompt_embs: np.ndarray) -> np.ndarray:
    """Mean of unit prompt embeddings (last-but-one axis), renormalised."""
    return _unit(_unit(np.asarray(prompt_embs, dtype=np.float64)).mean(axis=-2))


def class_embeddings(bank: PromptBank, text_encoder: TextEncoder) -> dict[str, np.ndarray]:
    if not bank:
        raise ValueError("prompt bank is empty")
    names = list(bank)
    flat = [p for n in names for p in bank[n]]
    if any(len(bank[n]) != PROMPTS_PER_CLASS for n in names):
        raise ValueError("every class needs exactly 5 prompts")
    embs = np.asarray(text_encoder(flat), dtype=np.float64).reshape(len(names), PROMPTS_PER_CLASS, -1)
    return dict(zip(names, ensemble(embs)))


def classify(image_emb, class_embs: Mapping[str, np.ndarray]) -> tuple[str, dict[str, float]]:
    """Highest-cosine class; ties go to the alphabetically first class."""
    if not class_embs:
        raise ValueError("no classes to choose from")
    names = sorted(class_embs)
    scores = {n: float(np.dot(image_emb, class_embs[n])) for n in names}
    # max() returns the first maximal element in sorted order
    return max(names, key=lambda n: scores[n]), scores


def classify_batch(image_embs, class_embs: Mapping[str, np.ndarray]) -> tuple[list[str], np.ndarray]:
    """Vectorised :func:`classify`; returns labels and an N x C score matrix in sorted class order."""
    if not class_embs:
        raise ValueError("no classes to choose from")
    names = sorted(class_embs)
    scores = np.asarray(image_embs, dtype=np.float64) @ np.stack([class_embs[n] for n in names]).T
    return [names[i] for i in np.argmax(scores, axis=1)], scores


def text_encoder_for(model, vocab) -> TextEncoder:
    """Adapter from a dual encoder + vocabulary to a strings -> unit-vectors callable."""
    from .model import embed_texts
    from .tokenizer import encode_batch

    def encode(texts: Sequence[str]) -> np.ndarray:
        return embed_texts(model, encode_batch(texts, vocab, model.cfg.max_tokens))

    return encode


class ZeroShotClassifier(ClassifierMixin, BaseEstimator):
    """Zero-shot classifier over precomputed image embeddings.

    ``fit`` only encodes the prompt bank; labels passed to it are ignored.
    """

    def __init__(self, model=None, vocab=None, prompts=None, style="caption"):
        self.model = model
        self.vocab = vocab
        self.prompts = prompts
        self.style = style

    def fit(self, X=None, y=None):
        bank = self.prompts if self.prompts is not None else PromptBank.load(style=self.style)
        if not isinstance(bank, PromptBank):
            bank = PromptBank(bank)
        self.class_embeddings_ = class_embeddings(bank, text_encoder_for(self.model, self.vocab))
        self.classes_ = np.array(sorted(self.class_embeddings_))
        return self

    def decision_function(self, X):
        return classify_batch(X, self.class_embeddings_)[1]

    def predict(self, X):
        return np.array(classify_batch(X, self.class_embeddings_)[0])


# --------------------------------------------------------------------------- gestational age

class ExcludedSample(ValueError):
    """Raised when a sample falls outside the evaluable HC range."""

    def __init__(self, reason: str, message: str):
        super().__init__(message)
        self.reason = reason


@dataclass
class GAEstimate:
    ga_days: int
    top_candidates: tuple[int, ...] = ()
    valid: bool | None = None
    scores: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not GA_MIN_DAYS <= self.ga_days <= GA_MAX_DAYS:
            raise ValueError(f"ga_days={self.ga_days} outside [{GA_MIN_DAYS}, {GA_MAX_DAYS}]")


GA_DAYS = np.arange(GA_MIN_DAYS, GA_MAX_DAYS + 1)


def ga_prompts(ga_days: int, pixel_spacing_mm: float, templates: TemplateBank | None = None,
               labels=("brain",)) -> list[str]:
    templates = templates or TemplateBank.load()
    return templates.render(set(labels), ga_days, pixel_spacing_mm)


def top_k_days(days, scores, k: int = TOP_K) -> np.ndarray:
    """The k highest-scoring days; equal scores prefer the smaller day."""
    days = np.asarray(days)
    scores = np.asarray(scores, dtype=np.float64)
    if days.shape != scores.shape or days.ndim != 1:
        raise ValueError("days and scores must be 1-D and aligned")
    if len(days) < k:
        raise ValueError(f"need at least {k} candidates")
    order = np.lexsort((days, -scores))
    return days[order[:k]]


def ga_from_scores(days, scores, k: int = TOP_K, rule: str = "median") -> GAEstimate:
    days = np.asarray(days)
    scores = np.asarray(scores, dtype=np.float64)
    top = top_k_days(days, scores, k)
    if rule == "median":
        ga = int(np.sort(top)[(k - 1) // 2])
    elif rule == "argmax":
        ga = int(top[0])
    else:
        raise ValueError(f"unknown rule {rule!r}")
    order = np.argsort(days)
    return GAEstimate(ga, tuple(int(d) for d in top), scores=scores[order])


def ga_prompt_embeddings(text_encoder: TextEncoder, pixel_spacing_mm: float,
                         templates: TemplateBank | None = None, days=GA_DAYS) -> np.ndarray:
    """Unit embeddings of every GA prompt: days x 5 x dim."""
    templates = templates or TemplateBank.load()
    texts = [p for d in days for p in ga_prompts(int(d), pixel_spacing_mm, templates)]
    embs = np.asarray(text_encoder(texts), dtype=np.float64)
    return _unit(embs.reshape(len(days), PROMPTS_PER_CLASS, -1))


def ga_scores(image_emb, prompt_embs: np.ndarray) -> np.ndarray:
    """Mean cosine over each day's five prompts."""
    return np.einsum("d,tpd->t", np.asarray(image_emb, dtype=np.float64), prompt_embs) / prompt_embs.shape[1]


def estimate_ga(
    image_emb,
    text_encoder: TextEncoder,
    pixel_spacing_mm: float | None,
    templates: TemplateBank | None = None,
    days=GA_DAYS,
    k: int = TOP_K,
    rule: str = "median",
) -> GAEstimate:
    if pixel_spacing_mm is None:
        raise ValueError("pixel spacing is required for GA estimation")
    days = np.asarray(days)
    prompt_embs = ga_prompt_embeddings(text_encoder, pixel_spacing_mm, templates, days)
    return ga_from_scores(days, ga_scores(image_emb, prompt_embs), k, rule)


def check_validity(true_hc_mm: float, estimate: GAEstimate, models: Mapping[float, QuantileModel]) -> bool:
    """Inclusive percentile-band check; out-of-range HC raises :class:`ExcludedSample`."""
    if not HC_MIN_MM <= true_hc_mm <= HC_MAX_MM:
        raise ExcludedSample("hc_out_of_range", f"HC {true_hc_mm} mm outside [{HC_MIN_MM}, {HC_MAX_MM}]")
    lo, hi = hc_percentile_bounds(estimate.ga_days, models)
    estimate.valid = bool(lo <= true_hc_mm <= hi)
    return estimate.valid


def validity_report(true_hcs, estimates: Sequence[GAEstimate], models) -> dict:
    rows = []
    for i, (hc, est) in enumerate(zip(true_hcs, estimates)):
        try:
            ok = check_validity(float(hc), est, models)
            rows.append({"index": i, "hc_mm": float(hc), "ga_days": est.ga_days, "valid": ok, "excluded": None})
        except ExcludedSample as e:
            rows.append({"index": i, "hc_mm": float(hc), "ga_days": est.ga_days, "valid": None, "excluded": e.reason})
    judged = [r for r in rows if r["excluded"] is None]
    rate = sum(r["valid"] for r in judged) / len(judged) if judged else float("nan")
    return {"n": len(rows), "n_evaluated": len(judged), "n_excluded": len(rows) - len(judged),
            "validity_rate": rate, "records": rows}


class GAEstimator(RegressorMixin, BaseEstimator):
    """GA regression from image embeddings by prompt sweep.

    Prompt embeddings are cached per pixel spacing after the first call.
    """

    def __init__(self, model=None, vocab=None, templates=None, k=TOP_K, rule="median"):
        self.model = model
        self.vocab = vocab
        self.templates = templates
        self.k = k
        self.rule = rule

    def fit(self, X=None, y=None):
        self.encoder_ = text_encoder_for(self.model, self.vocab)
        self.cache_: dict[float, np.ndarray] = {}
        return self

    def prompt_embeddings(self, spacing: float) -> np.ndarray:
        key = float(spacing)
        if key not in self.cache_:
            self.cache_[key] = ga_prompt_embeddings(self.encoder_, key, self.templates)
        return self.cache_[key]

    def estimates(self, X, pixel_spacing) -> list[GAEstimate]:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        spacing = np.broadcast_to(np.asarray(pixel_spacing, dtype=float), (len(X),))
        return [
            ga_from_scores(GA_DAYS, ga_scores(x, self.prompt_embeddings(s)), self.k, self.rule)
            for x, s in zip(X, spacing)
        ]

    def predict(self, X, pixel_spacing=None):
        if pixel_spacing is None:
            raise ValueError("pixel_spacing is required")
        return np.array([e.ga_days for e in self.estimates(X, pixel_spacing)])


__all__ = [
    "ExcludedSample",
    "GAEstimate",
    "GAEstimator",
    "PromptBank",
    "ZeroShotClassifier",
    "check_validity",
    "class_embeddings",
    "classify",
    "classify_batch",
    "ensemble",
    "estimate_ga",
    "ga_from_scores",
    "ga_prompts",
    "hc_percentile_bounds",
    "load_quantiles",
    "text_encoder_for",
    "top_k_days",
    "validity_report",
]
